#pragma once

#include <cstddef>
#include <cstdint>

#include "fdt/tensor.hpp"

namespace fdt {

enum class Scaling { equalized, plain };

// He's per-layer constant sqrt(2 / fan_in).
double he_scale(std::size_t fan_in);

// i.i.d. N(0, 1) draws from an Rng seeded with `seed`.
Tensor init_normal(const Shape& shape, std::uint64_t seed);

// A trainable weight. Forward passes see `effective()`; gradients are kept
// with respect to `raw`.
//
// Equalized weights are stored at unit scale and multiplied by he_scale(fan_in)
// at use time. With `literal_division` set the raw tensor is divided by that
// constant instead.
struct Param {
    Tensor raw;
    Tensor grad;
    Tensor m;
    Tensor v;
    std::size_t fan_in = 1;
    Scaling scaling = Scaling::plain;
    bool literal_division = false;

    Param() = default;
    Param(Tensor initial, std::size_t fan_in, Scaling scaling, bool literal_division = false);

    std::size_t size() const noexcept { return raw.size(); }
    double multiplier() const;
    Tensor effective() const;
    void zero_grad();
    void reset_moments();
};

}  // namespace fdt
