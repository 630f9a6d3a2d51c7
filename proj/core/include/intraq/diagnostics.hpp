// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "intraq/model.hpp"

namespace intraq::diagnostics {

struct ClassDistance {
  std::int64_t label = 0;
  std::int64_t count = 0;
  double mean_distance = 0.0;  // over all unordered pairs, in [0, 2]
};

/// Mean within-class cosine distance (1 - cosine similarity).
struct HeterogeneityReport {
  std::vector<ClassDistance> per_class;  // classes with >= 2 images, ascending label
  std::vector<std::int64_t> excluded;    // classes present with a single image
  double overall_mean = 0.0;             // mean of per_class[i].mean_distance
  std::int64_t num_images = 0;
  std::int64_t num_classes = 0;          // distinct labels seen
};

/// Exact enumeration of within-class pairs. Throws NumericError on a
/// zero-norm vector and InputError when no class has two images.
HeterogeneityReport intra_class_distance(const std::vector<model::FeatureVector>& features);

/// Keyed text form (`key = value` lines).
std::string format_report(const HeterogeneityReport& report);
/// Tab-separated table: label, count, mean_distance.
std::string report_table(const HeterogeneityReport& report);

struct FeatureMatrix {
  std::int64_t count = 0;
  std::int64_t dim = 0;
  std::vector<float> values;  // row-major count x dim
  std::vector<std::int64_t> labels;
};

/// `IQFEAT1 <count> <dim>\n` then count x dim little-endian float32. Labels
/// go to `<path>.labels`, one per line.
void write_features(const std::filesystem::path& path, const FeatureMatrix& matrix);
FeatureMatrix read_features(const std::filesystem::path& path);
std::filesystem::path labels_path(const std::filesystem::path& features);

/// Penultimate features of `images` under `model`, written as above.
FeatureMatrix export_features(model::Classifier& model, const torch::Tensor& images, const torch::Tensor& labels,
                              const std::filesystem::path& path, std::int64_t batch_size = 256);

/// Up to `per_class` random indices from each listed class, ascending by class.
std::vector<std::int64_t> sample_per_class(const torch::Tensor& labels, const std::vector<std::int64_t>& classes,
                                           std::int64_t per_class, std::mt19937_64& rng);

}  // namespace intraq::diagnostics
