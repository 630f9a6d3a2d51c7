// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

namespace intraq::io {

/// Records every path the toolkit opens for reading or writing.
///
/// All file access in the library goes through read_file/write_file below, so
/// the log is a complete account of what a command touched. Tests use it to
/// check the zero-shot contract: synthesis and fine-tuning never open the
/// real training data.
class AccessLog {
 public:
  enum class Mode { read, write };

  struct Entry {
    std::filesystem::path path;
    Mode mode;
  };

  static AccessLog& instance();

  void record(const std::filesystem::path& path, Mode mode);
  void clear();
  std::vector<Entry> entries() const;

  /// True if any recorded read resolves to `path` or lies below it.
  bool was_read(const std::filesystem::path& path) const;

 private:
  AccessLog() = default;

  mutable std::mutex mutex_;
  std::vector<Entry> entries_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace intraq::io
