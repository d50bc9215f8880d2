#pragma once

#include <filesystem>
#include <string>

#include "thoraxdiff/volume.hpp"

namespace thoraxdiff {

// On-disk format: `<base>.json` sidecar
//   {"shape":[D,H,W], "dtype":"f32"|"u8", "spacing_mm":[z,y,x],
//    "order":"row-major, z slowest"}
// plus `<base>.raw`, a little-endian blob of D*H*W elements.
// `path` may name the base, the .json or the .raw file.

void save_volume(const std::filesystem::path& path, const Volume& vol);
Volume load_volume(const std::filesystem::path& path);

void save_layout(const std::filesystem::path& path, const SemanticLayout& layout);
SemanticLayout load_layout(const std::filesystem::path& path);

// Strip a trailing .json/.raw so both forms address the same pair.
std::filesystem::path volume_base(const std::filesystem::path& path);

// Write bytes to `path` via a sibling temp file and rename, so readers never
// see a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace thoraxdiff
