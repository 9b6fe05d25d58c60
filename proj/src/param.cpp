#include "fdt/param.hpp"

#include <cmath>

#include "fdt/errors.hpp"
#include "fdt/rng.hpp"

namespace fdt {

double he_scale(std::size_t fan_in) {
    if (fan_in == 0) {
        throw ContractError("he_scale: fan_in must be >= 1");
    }
    return std::sqrt(2.0 / static_cast<double>(fan_in));
}

Tensor init_normal(const Shape& shape, std::uint64_t seed) {
    Tensor out(shape);
    Rng rng(seed);
    for (double& x : out.values()) {
        x = rng.normal();
    }
    return out;
}

Param::Param(Tensor initial, std::size_t fan_in_, Scaling scaling_, bool literal_division_)
    : raw(std::move(initial)),
      grad(raw.shape()),
      m(raw.shape()),
      v(raw.shape()),
      fan_in(fan_in_),
      scaling(scaling_),
      literal_division(literal_division_) {
    if (fan_in == 0) {
        throw ContractError("param fan_in must be >= 1");
    }
}

double Param::multiplier() const {
    if (scaling == Scaling::plain) {
        return 1.0;
    }
    const double z = he_scale(fan_in);
    return literal_division ? 1.0 / z : z;
}

Tensor Param::effective() const {
    if (scaling == Scaling::plain) {
        return raw;
    }
    Tensor out = raw;
    const double k = multiplier();
    for (double& x : out.values()) {
        x *= k;
    }
    return out;
}

void Param::zero_grad() { grad.fill(0.0); }

void Param::reset_moments() {
    m.fill(0.0);
    v.fill(0.0);
}

}  // namespace fdt
