#pragma once

#include <filesystem>

#include "se2/tensor.hpp"

namespace se2 {

/// SE2T tensor file: magic "SE2T", u8 rank, rank x u32 little-endian
/// extents, float32 little-endian payload, row-major.
void write_se2t(const std::filesystem::path& path, const Tensor& t);
Tensor read_se2t(const std::filesystem::path& path);

inline void write_se2t(const std::filesystem::path& path, const TensorD& t) {
  write_se2t(path, t.cast<float>());
}

}  // namespace se2
