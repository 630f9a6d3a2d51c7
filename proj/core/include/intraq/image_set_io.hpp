// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "intraq/synthesis.hpp"

namespace intraq::io {

/// IQSET1 archive, all integers little-endian:
///
///   "IQSET1" | u32 count | u32 channels | u32 height | u32 width | u32 num_classes
///   | count x u32 label | count x f32 soft target | count x C x H x W f32 image (CHW)
///
/// Real labeled datasets use the same layout with soft targets of 1.
std::string encode_image_set(const synthesis::SyntheticImageSet& set);
synthesis::SyntheticImageSet decode_image_set(const std::string& bytes);

struct ImageSetManifest {
  std::string config_hash;
  std::int64_t count = 0;
  std::vector<std::int64_t> rounds;  // generation round of each image
};

std::filesystem::path manifest_path(const std::filesystem::path& archive);

/// Writes the archive and its `<archive>.manifest` sidecar.
void write_image_set(const std::filesystem::path& path, const synthesis::SyntheticImageSet& set,
                     const std::string& config_hash);

/// Reads an archive; round ids come from the sidecar when one exists.
synthesis::SyntheticImageSet read_image_set(const std::filesystem::path& path);

ImageSetManifest read_manifest(const std::filesystem::path& archive);

}  // namespace intraq::io
