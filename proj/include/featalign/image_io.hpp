#pragma once

// Image grids as binary PGM (one channel) or PPM (three channels).

#include "featalign/tensor.hpp"

#include <filesystem>
#include <string>

namespace featalign {

inline constexpr std::size_t grid_gutter = 2;

/// Lays out `images` ([N x C*H*W], channel-major) row by row on a white
/// background with a 2-pixel gutter between cells. Values are clamped to
/// [0, 1] and written as round(v * 255). Requires rows * cols >= N and C in {1, 3}.
std::string encode_image_grid(const tensor& images, const shape_t& image_shape, std::size_t rows, std::size_t cols);

void emit_image_grid(const tensor& images, const shape_t& image_shape, std::size_t rows, std::size_t cols,
                     const std::filesystem::path& path);

/// Interleaves (reconstruction, original) pairs: row i of the result holds
/// recon[i], original[i] at positions 2i, 2i + 1.
tensor interleave_pairs(const tensor& reconstructions, const tensor& originals);

void emit_pair_grid(const tensor& reconstructions, const tensor& originals, const shape_t& image_shape,
                    std::size_t rows, std::size_t pair_cols, const std::filesystem::path& path);

} // namespace featalign
