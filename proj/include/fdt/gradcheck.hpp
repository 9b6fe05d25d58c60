#pragma once

// Central finite-difference checks of the analytic gradients.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fdt/model.hpp"

namespace fdt {

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-5);

struct GradcheckEntry {
    std::string name;  // "op:<name>/<input>" or a parameter name
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;

    const GradcheckEntry* worst() const;
    double max_rel_error() const;
    bool passed(double tolerance = kGradcheckTolerance) const { return max_rel_error() < tolerance; }
};

// Every differentiable op on small random inputs.
GradcheckReport gradcheck_ops(std::uint64_t seed);

// Tiny model used by the model-level check: d_model=8, heads=2, ffn=16, l=2.
ModelConfig gradcheck_model_config();

// Every element of every Param of a freshly initialised tiny model. Biases are
// drawn from N(0, 0.01) instead of zero, otherwise the zero start frame puts
// every mel pre-net unit exactly on the ReLU kink.
GradcheckReport gradcheck_model(std::uint64_t seed);

}  // namespace fdt
