// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "intraq/synthesis.hpp"

namespace intraq::data {

inline constexpr std::int64_t kShapeClasses = 10;

/// Procedural 10-class 32x32 RGB dataset used as the desk-scale reference
/// task. Each image holds one object (disk, square, triangle, ring, plus,
/// X, horizontal bars, vertical bars, diamond, frame) at a random position,
/// size, tilt and colour over a noisy background with a clutter
/// rectangle. Pixels are standardized
/// to roughly zero mean, unit variance. Soft targets are 1.
synthesis::SyntheticImageSet make_shapes_dataset(std::int64_t count, std::uint64_t seed, std::int64_t side = 32);

}  // namespace intraq::data
