#pragma once

#include <vector>

#include "fdt/tensor.hpp"

namespace fdt {

// One token sequence [S] paired with its target frames [F x frame_dim].
struct Sample {
    std::vector<int> tokens;
    Tensor frames;
};

using Batch = std::vector<Sample>;

}  // namespace fdt
