#include "fdt/optim.hpp"

#include <cmath>

namespace fdt {

void adam_step(std::span<Param* const> params, AdamState& state) {
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bias1 = 1.0 - std::pow(state.beta1, t);
    const double bias2 = 1.0 - std::pow(state.beta2, t);
    for (Param* p : params) {
        double* w = p->raw.data();
        double* g = p->grad.data();
        double* m = p->m.data();
        double* v = p->v.data();
        const std::size_t n = p->size();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            w[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
            g[i] = 0.0;
        }
    }
}

void sgd_step(std::span<Param* const> params, double lr) {
    for (Param* p : params) {
        double* w = p->raw.data();
        double* g = p->grad.data();
        for (std::size_t i = 0; i < p->size(); ++i) {
            w[i] -= lr * g[i];
            g[i] = 0.0;
        }
    }
}

void zero_grads(std::span<Param* const> params) {
    for (Param* p : params) {
        p->zero_grad();
    }
}

}  // namespace fdt
