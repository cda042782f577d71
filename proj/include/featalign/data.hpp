#pragma once

// Dataset loaders: MNIST IDX files, folders of binary PGM/PPM images and
// seeded synthetic sets.

#include "featalign/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace featalign {

class data_error : public std::runtime_error {
public:
    enum class kind { io, bad_magic, truncated, count_mismatch, bad_format, unknown_kind };
    data_error(kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
    kind which() const noexcept { return kind_; }

private:
    kind kind_;
};

struct dataset {
    tensor x;                  ///< [N x D]
    shape_t example_shape;     ///< e.g. {1, 28, 28}; product is D
    std::vector<int> labels;   ///< empty or N entries in [0, class_count)
    std::size_t class_count = 0;

    std::size_t size() const { return x.rank() ? x.extent(0) : 0; }
    std::size_t extent() const { return x.rank() == 2 ? x.extent(1) : 0; }
    bool has_labels() const { return !labels.empty(); }
};

/// Parses a big-endian IDX image file (0x00000803) and, optionally, its
/// label file (0x00000801). Pixels are divided by 255.
dataset load_mnist_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels);

/// Reads every .pgm/.ppm file (binary P5/P6, maxval <= 255) in a directory,
/// sorted by file name. All images must share one shape.
dataset load_image_folder(const std::filesystem::path& dir);

/// `ring`: eight 2-D Gaussians (radius 2, std 0.05) labelled by mode.
/// `gaussian`: standard normal in `dim` dimensions.
/// `mixed`: standard normal latents mixed by a seeded orthogonal matrix.
dataset synthetic_dataset(const std::string& kind, std::size_t n, std::uint64_t seed, std::size_t dim = 2);

inline constexpr double ring_radius = 2.0;
inline constexpr double ring_std = 0.05;
inline constexpr int ring_modes = 8;

/// First `count` examples starting at `offset`.
dataset subset(const dataset& d, std::size_t offset, std::size_t count);

/// Rows `idx` of a batch, in order, plus their labels when present.
tensor gather_rows(const tensor& x, std::span<const std::size_t> idx);
std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const std::size_t> idx);

} // namespace featalign
