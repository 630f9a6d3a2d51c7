// SPDX-License-Identifier: Apache-2.0
#include "intraq/access_log.hpp"

#include <fstream>
#include <sstream>

#include "intraq/errors.hpp"

namespace intraq::io {

namespace {

std::filesystem::path normalize(const std::filesystem::path& p) {
  std::error_code ec;
  auto abs = std::filesystem::weakly_canonical(p, ec);
  return ec ? std::filesystem::absolute(p).lexically_normal() : abs;
}

}  // namespace

AccessLog& AccessLog::instance() {
  static AccessLog log;
  return log;
}

void AccessLog::record(const std::filesystem::path& path, Mode mode) {
  std::lock_guard lock(mutex_);
  entries_.push_back({normalize(path), mode});
}

void AccessLog::clear() {
  std::lock_guard lock(mutex_);
  entries_.clear();
}

std::vector<AccessLog::Entry> AccessLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

bool AccessLog::was_read(const std::filesystem::path& path) const {
  const auto target = normalize(path).string();
  std::lock_guard lock(mutex_);
  for (const auto& e : entries_) {
    if (e.mode != Mode::read) continue;
    const auto s = e.path.string();
    if (s == target || (s.size() > target.size() && s.compare(0, target.size(), target) == 0 &&
                        s[target.size()] == '/')) {
      return true;
    }
  }
  return false;
}

std::string read_file(const std::filesystem::path& path) {
  AccessLog::instance().record(path, AccessLog::Mode::read);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return std::move(buf).str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  AccessLog::instance().record(path, AccessLog::Mode::write);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

}  // namespace intraq::io
