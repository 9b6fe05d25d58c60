#pragma once

#include <cstdint>
#include <span>

#include "fdt/param.hpp"

namespace fdt {

struct AdamState {
    std::uint64_t step_count = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Bias-corrected Adam on every param's raw tensor, then zeroes the grads.
void adam_step(std::span<Param* const> params, AdamState& state);

// Plain w <- w - lr * grad, then zeroes the grads.
void sgd_step(std::span<Param* const> params, double lr);

void zero_grads(std::span<Param* const> params);

}  // namespace fdt
