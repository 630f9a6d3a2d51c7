// SPDX-License-Identifier: Apache-2.0
#include "intraq/shapes_dataset.hpp"

#include <array>
#include <cmath>
#include <random>

#include "intraq/errors.hpp"

namespace intraq::data {

namespace {

// Membership of the point (u, v) in shape `label`; u, v are in object
// coordinates, the object occupying [-1, 1]^2.
bool inside(std::int64_t label, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (label) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: return v <= 0.85 && v >= -0.85 && au <= (v + 0.85) / 1.7 * 0.95;
    case 3: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case 4: return (au <= 0.28 && av <= 1.0) || (av <= 0.28 && au <= 1.0);
    case 5: return au <= 1.0 && av <= 1.0 && (std::abs(u - v) <= 0.38 || std::abs(u + v) <= 0.38);
    case 6: return au <= 0.95 && av <= 0.95 && std::fmod(v + 0.95, 0.76) <= 0.38;
    case 7: return au <= 0.95 && av <= 0.95 && std::fmod(u + 0.95, 0.76) <= 0.38;
    case 8: return au + av <= 1.0;
    case 9: return au <= 0.9 && av <= 0.9 && (au >= 0.55 || av >= 0.55);
    default: return false;
  }
}

}  // namespace

synthesis::SyntheticImageSet make_shapes_dataset(std::int64_t count, std::uint64_t seed, std::int64_t side) {
  if (count < 0 || side < 8) throw ConfigError("shapes dataset needs count >= 0 and side >= 8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  synthesis::SyntheticImageSet set;
  set.num_classes = kShapeClasses;
  set.images = torch::empty({count, 3, side, side}, torch::kFloat32);
  set.labels = torch::empty({count}, torch::kInt64);
  set.soft_targets = torch::ones({count}, torch::kFloat32);
  set.rounds.assign(static_cast<std::size_t>(count), 0);

  const double s = static_cast<double>(side);
  float* px = set.images.data_ptr<float>();
  for (std::int64_t n = 0; n < count; ++n) {
    const std::int64_t label = std::uniform_int_distribution<std::int64_t>(0, kShapeClasses - 1)(rng);
    set.labels.data_ptr<std::int64_t>()[n] = label;

    std::array<double, 3> bg{}, fg{};
    for (auto& c : bg) c = unit(rng);
    // Foreground must differ from the background by a visible margin.
    do {
      for (auto& c : fg) c = unit(rng);
    } while (std::abs((fg[0] + fg[1] + fg[2]) - (bg[0] + bg[1] + bg[2])) < 0.45);
    const double grad_x = 0.4 * (unit(rng) - 0.5), grad_y = 0.4 * (unit(rng) - 0.5);
    const double noise_amp = 0.03 + 0.12 * unit(rng);

    const double radius = s * (0.15 + 0.27 * unit(rng));  // half side of the object box
    const double cx = radius + (s - 2.0 * radius) * unit(rng);
    const double cy = radius + (s - 2.0 * radius) * unit(rng);
    const double aspect = 0.8 + 0.4 * unit(rng);
    const double angle = 0.35 * (2.0 * unit(rng) - 1.0);  // about +-20 degrees
    const double ca = std::cos(angle), sa = std::sin(angle);

    // A clutter rectangle in a random colour behind the object.
    struct Box {
      double x0, y0, x1, y1;
      std::array<double, 3> colour;
    };
    std::array<Box, 1> clutter{};
    for (auto& b : clutter) {
      const double w = s * (0.1 + 0.2 * unit(rng)), h = s * (0.1 + 0.2 * unit(rng));
      b.x0 = (s - w) * unit(rng);
      b.y0 = (s - h) * unit(rng);
      b.x1 = b.x0 + w;
      b.y1 = b.y0 + h;
      for (auto& c : b.colour) c = unit(rng);
    }

    float* img = px + n * 3 * side * side;
    for (std::int64_t y = 0; y < side; ++y) {
      for (std::int64_t x = 0; x < side; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double dx = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
            const double dy = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
            const double u = (ca * dx + sa * dy) / (radius * aspect);
            const double v = (-sa * dx + ca * dy) / (radius / aspect);
            hits += inside(label, u, v) ? 1 : 0;
          }
        }
        const double cover = hits / 4.0;
        const double shade = grad_x * (x / s - 0.5) + grad_y * (y / s - 0.5);
        std::array<double, 3> back = bg;
        for (const auto& b : clutter) {
          if (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) back = b.colour;
        }
        for (int c = 0; c < 3; ++c) {
          double val = (1.0 - cover) * (back[c] + shade) + cover * fg[c] + noise_amp * noise(rng);
          val = std::clamp(val, 0.0, 1.0);
          img[(c * side + y) * side + x] = static_cast<float>((val - 0.5) / 0.3);
        }
      }
    }
  }
  return set;
}

}  // namespace intraq::data
