// SPDX-License-Identifier: Apache-2.0
#include "intraq/diagnostics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <sstream>

#include "intraq/access_log.hpp"
#include "intraq/errors.hpp"

namespace intraq::diagnostics {

HeterogeneityReport intra_class_distance(const std::vector<model::FeatureVector>& features) {
  std::map<std::int64_t, std::vector<std::vector<double>>> by_class;
  std::size_t dim = features.empty() ? 0 : features.front().values.size();
  for (const auto& f : features) {
    if (f.values.size() != dim) throw InputError("feature vectors of different dimension");
    double norm = 0.0;
    for (float v : f.values) norm += static_cast<double>(v) * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericError("zero-norm feature vector in class " + std::to_string(f.source_class));
    std::vector<double> unit(dim);
    for (std::size_t i = 0; i < dim; ++i) unit[i] = f.values[i] / norm;
    by_class[f.source_class].push_back(std::move(unit));
  }

  HeterogeneityReport report;
  report.num_images = static_cast<std::int64_t>(features.size());
  report.num_classes = static_cast<std::int64_t>(by_class.size());
  for (const auto& [label, vecs] : by_class) {
    if (vecs.size() < 2) {
      report.excluded.push_back(label);
      continue;
    }
    double sum = 0.0;
    std::int64_t pairs = 0;
    for (std::size_t i = 0; i < vecs.size(); ++i) {
      for (std::size_t j = i + 1; j < vecs.size(); ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < dim; ++k) dot += vecs[i][k] * vecs[j][k];
        sum += std::clamp(1.0 - dot, 0.0, 2.0);
        ++pairs;
      }
    }
    report.per_class.push_back({label, static_cast<std::int64_t>(vecs.size()), sum / static_cast<double>(pairs)});
  }
  if (report.per_class.empty()) throw InputError("no class has at least two images");
  double total = 0.0;
  for (const auto& c : report.per_class) total += c.mean_distance;
  report.overall_mean = total / static_cast<double>(report.per_class.size());
  return report;
}

std::string format_report(const HeterogeneityReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "overall_mean = " << report.overall_mean << "\n"
      << "num_images = " << report.num_images << "\n"
      << "num_classes = " << report.num_classes << "\n"
      << "excluded_classes =";
  for (auto c : report.excluded) out << ' ' << c;
  out << "\n";
  for (const auto& c : report.per_class) out << "class_" << c.label << "_mean_distance = " << c.mean_distance << "\n";
  return out.str();
}

std::string report_table(const HeterogeneityReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "label\tcount\tmean_distance\n";
  for (const auto& c : report.per_class) out << c.label << '\t' << c.count << '\t' << c.mean_distance << '\n';
  return out.str();
}

std::filesystem::path labels_path(const std::filesystem::path& features) {
  return std::filesystem::path(features.string() + ".labels");
}

void write_features(const std::filesystem::path& path, const FeatureMatrix& m) {
  if (static_cast<std::int64_t>(m.values.size()) != m.count * m.dim ||
      static_cast<std::int64_t>(m.labels.size()) != m.count) {
    throw InputError("feature matrix size does not match count x dim");
  }
  std::string bytes = "IQFEAT1 " + std::to_string(m.count) + " " + std::to_string(m.dim) + "\n";
  bytes.reserve(bytes.size() + m.values.size() * 4);
  for (float v : m.values) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
  }
  io::write_file(path, bytes);
  std::string labels;
  for (auto l : m.labels) labels += std::to_string(l) + "\n";
  io::write_file(labels_path(path), labels);
}

FeatureMatrix read_features(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw IoError("'" + path.string() + "': missing IQFEAT1 header");
  std::istringstream header(bytes.substr(0, nl));
  std::string magic;
  FeatureMatrix m;
  if (!(header >> magic >> m.count >> m.dim) || magic != "IQFEAT1" || m.count < 0 || m.dim < 0) {
    throw IoError("'" + path.string() + "': malformed IQFEAT1 header");
  }
  const auto payload = static_cast<std::size_t>(m.count * m.dim) * 4;
  if (bytes.size() - nl - 1 != payload) throw IoError("'" + path.string() + "': payload size mismatch");
  m.values.resize(static_cast<std::size_t>(m.count * m.dim));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + nl + 1);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
    m.values[i] = std::bit_cast<float>(u);
  }
  std::istringstream labels(io::read_file(labels_path(path)));
  for (std::int64_t l; labels >> l;) m.labels.push_back(l);
  if (static_cast<std::int64_t>(m.labels.size()) != m.count) {
    throw IoError("'" + labels_path(path).string() + "': label count does not match features");
  }
  return m;
}

FeatureMatrix export_features(model::Classifier& model, const torch::Tensor& images, const torch::Tensor& labels,
                              const std::filesystem::path& path, std::int64_t batch_size) {
  FeatureMatrix m;
  m.count = images.defined() ? images.size(0) : 0;
  if (labels.defined() && labels.numel() != m.count) throw InputError("one label per image required");
  torch::NoGradGuard guard;
  model->eval();
  std::vector<torch::Tensor> chunks;
  for (std::int64_t s = 0; s < m.count; s += batch_size) {
    const auto e = std::min(m.count, s + batch_size);
    chunks.push_back(model::forward_with_stats(model, images.slice(0, s, e), false).features);
  }
  if (m.count > 0) {
    const auto feats = torch::cat(chunks).to(torch::kFloat32).contiguous();
    m.dim = feats.size(1);
    m.values.assign(feats.data_ptr<float>(), feats.data_ptr<float>() + feats.numel());
    const auto l = labels.to(torch::kInt64).contiguous();
    m.labels.assign(l.data_ptr<std::int64_t>(), l.data_ptr<std::int64_t>() + l.numel());
  } else {
    // Feature width from a dummy pass so the header is still meaningful.
    const auto& s = model->input_shape();
    m.dim = model->run(torch::zeros({1, s.channels, s.height, s.width}), false).features.size(1);
  }
  write_features(path, m);
  return m;
}

std::vector<std::int64_t> sample_per_class(const torch::Tensor& labels, const std::vector<std::int64_t>& classes,
                                           std::int64_t per_class, std::mt19937_64& rng) {
  const auto l = labels.to(torch::kInt64).contiguous();
  std::vector<std::int64_t> out;
  for (auto c : classes) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < l.numel(); ++i) {
      if (l.data_ptr<std::int64_t>()[i] == c) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    if (static_cast<std::int64_t>(idx.size()) > per_class) idx.resize(static_cast<std::size_t>(per_class));
    std::sort(idx.begin(), idx.end());
    out.insert(out.end(), idx.begin(), idx.end());
  }
  return out;
}

}  // namespace intraq::diagnostics
