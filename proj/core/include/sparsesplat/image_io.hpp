#pragma once

#include "sparsesplat/image.hpp"

#include <filesystem>

namespace ssplat {

/// Portable float map: "PF" (3 channels) or "Pf" (1 channel), little-endian
/// (scale -1.0). Rows are stored bottom-to-top as the format requires.
void write_pfm(const std::filesystem::path& path, const ImageF& image);
ImageF read_pfm(const std::filesystem::path& path);

/// 8-bit PNG preview; values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const ImageF& image);

/// Min-max normalization into [0, 1]; constant maps become all zero.
ImageF normalize_for_display(const ImageF& map);

} // namespace ssplat
