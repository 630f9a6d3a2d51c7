// SPDX-License-Identifier: Apache-2.0
#include "intraq/image_set_io.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "intraq/access_log.hpp"
#include "intraq/errors.hpp"

namespace intraq::io {

namespace {

constexpr char kMagic[] = {'I', 'Q', 'S', 'E', 'T', '1'};
constexpr std::size_t kHeaderBytes = sizeof(kMagic) + 5 * 4;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void expect(const char* data, std::size_t n) {
    need(n);
    if (std::memcmp(bytes_.data() + pos_, data, n) != 0) throw IoError("bad magic: not an IQSET1 archive");
    pos_ += n;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("truncated IQSET1 archive");
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::int64_t v, const char* what) {
  if (v < 0 || v > static_cast<std::int64_t>(UINT32_MAX)) throw IoError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::string encode_image_set(const synthesis::SyntheticImageSet& set) {
  const auto n = set.size();
  std::int64_t c = 0, h = 0, w = 0;
  if (n > 0) {
    if (set.images.dim() != 4) throw InputError("images must be [N, C, H, W]");
    c = set.images.size(1);
    h = set.images.size(2);
    w = set.images.size(3);
  }
  std::string out(kMagic, sizeof(kMagic));
  const auto pixels = c * h * w;
  out.reserve(kHeaderBytes + static_cast<std::size_t>(n * (8 + 4 * pixels)));
  put_u32(out, checked_u32(n, "count"));
  put_u32(out, checked_u32(c, "channels"));
  put_u32(out, checked_u32(h, "height"));
  put_u32(out, checked_u32(w, "width"));
  put_u32(out, checked_u32(set.num_classes, "num_classes"));
  if (n == 0) return out;
  const auto labels = set.labels.to(torch::kInt64).contiguous();
  const auto soft = set.soft_targets.to(torch::kFloat32).contiguous();
  const auto images = set.images.detach().to(torch::kFloat32).contiguous();
  for (std::int64_t i = 0; i < n; ++i) put_u32(out, checked_u32(labels.data_ptr<std::int64_t>()[i], "label"));
  for (std::int64_t i = 0; i < n; ++i) put_f32(out, soft.data_ptr<float>()[i]);
  const float* px = images.data_ptr<float>();
  for (std::int64_t i = 0; i < n * pixels; ++i) put_f32(out, px[i]);
  return out;
}

synthesis::SyntheticImageSet decode_image_set(const std::string& bytes) {
  Reader r(bytes);
  r.expect(kMagic, sizeof(kMagic));
  const std::int64_t n = r.u32();
  const std::int64_t c = r.u32();
  const std::int64_t h = r.u32();
  const std::int64_t w = r.u32();
  synthesis::SyntheticImageSet set;
  set.num_classes = r.u32();
  const auto pixels = c * h * w;
  r.need(static_cast<std::size_t>(n * (8 + 4 * pixels)));
  set.labels = torch::empty({n}, torch::kInt64);
  set.soft_targets = torch::empty({n}, torch::kFloat32);
  set.images = torch::empty({n, c, h, w}, torch::kFloat32);
  for (std::int64_t i = 0; i < n; ++i) set.labels.data_ptr<std::int64_t>()[i] = r.u32();
  for (std::int64_t i = 0; i < n; ++i) set.soft_targets.data_ptr<float>()[i] = r.f32();
  float* px = set.images.data_ptr<float>();
  for (std::int64_t i = 0; i < n * pixels; ++i) px[i] = r.f32();
  if (!r.done()) throw IoError("trailing bytes after IQSET1 payload");
  set.rounds.assign(static_cast<std::size_t>(n), 0);
  return set;
}

std::filesystem::path manifest_path(const std::filesystem::path& archive) {
  return std::filesystem::path(archive.string() + ".manifest");
}

void write_image_set(const std::filesystem::path& path, const synthesis::SyntheticImageSet& set,
                     const std::string& config_hash) {
  write_file(path, encode_image_set(set));
  std::ostringstream m;
  m << "format = IQSET1\n"
    << "config_hash = " << config_hash << "\n"
    << "count = " << set.size() << "\n"
    << "round_runs =";
  // Run-length encoded round ids: "<round>:<length>" pairs.
  for (std::size_t i = 0; i < set.rounds.size();) {
    std::size_t j = i;
    while (j < set.rounds.size() && set.rounds[j] == set.rounds[i]) ++j;
    m << ' ' << set.rounds[i] << ':' << (j - i);
    i = j;
  }
  m << "\n";
  write_file(manifest_path(path), m.str());
}

ImageSetManifest read_manifest(const std::filesystem::path& archive) {
  std::istringstream in(read_file(manifest_path(archive)));
  ImageSetManifest man;
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto key = line.substr(0, eq);
    auto value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(' ') + 1);
    value.erase(0, value.find_first_not_of(' '));
    if (key == "config_hash") {
      man.config_hash = value;
    } else if (key == "count") {
      man.count = std::stoll(value);
    } else if (key == "round_runs") {
      std::istringstream runs(value);
      for (std::string run; runs >> run;) {
        const auto colon = run.find(':');
        if (colon == std::string::npos) throw IoError("malformed round_runs entry '" + run + "'");
        const auto id = std::stoll(run.substr(0, colon));
        const auto len = std::stoll(run.substr(colon + 1));
        man.rounds.insert(man.rounds.end(), static_cast<std::size_t>(len), id);
      }
    }
  }
  return man;
}

synthesis::SyntheticImageSet read_image_set(const std::filesystem::path& path) {
  auto set = decode_image_set(read_file(path));
  if (std::filesystem::exists(manifest_path(path))) {
    auto man = read_manifest(path);
    if (static_cast<std::int64_t>(man.rounds.size()) == set.size()) set.rounds = std::move(man.rounds);
  }
  return set;
}

}  // namespace intraq::io
