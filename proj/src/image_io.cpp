#include "featalign/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace featalign {

std::string encode_image_grid(const tensor& images, const shape_t& image_shape, std::size_t rows, std::size_t cols)
{
    if (image_shape.size() != 3 || (image_shape[0] != 1 && image_shape[0] != 3))
        throw shape_error("image grid: image shape must be {1|3, H, W}, got " + shape_str(image_shape));
    const std::size_t ch = image_shape[0], h = image_shape[1], w = image_shape[2];
    const std::size_t per = ch * h * w;
    if (images.rank() != 2 || images.extent(1) != per)
        throw shape_error("image grid: images " + shape_str(images.shape()) + " do not match " + shape_str(image_shape));
    const std::size_t n = images.extent(0);
    if (rows * cols < n || rows == 0 || cols == 0)
        throw std::invalid_argument("image grid: " + std::to_string(rows) + "x" + std::to_string(cols)
                                    + " cells cannot hold " + std::to_string(n) + " images");
    const std::size_t gw = cols * w + (cols - 1) * grid_gutter;
    const std::size_t gh = rows * h + (rows - 1) * grid_gutter;
    std::string header = (ch == 1 ? "P5\n" : "P6\n") + std::to_string(gw) + " " + std::to_string(gh) + "\n255\n";
    std::string body(gw * gh * ch, static_cast<char>(255));
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t oy = (k / cols) * (h + grid_gutter), ox = (k % cols) * (w + grid_gutter);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t c = 0; c < ch; ++c) {
                    const double v = std::clamp(images[k * per + c * h * w + y * w + x], 0.0, 1.0);
                    body[((oy + y) * gw + ox + x) * ch + c] = static_cast<char>(std::lround(v * 255.0));
                }
    }
    return header + body;
}

void emit_image_grid(const tensor& images, const shape_t& image_shape, std::size_t rows, std::size_t cols,
                     const std::filesystem::path& path)
{
    const std::string bytes = encode_image_grid(images, image_shape, rows, cols);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

tensor interleave_pairs(const tensor& reconstructions, const tensor& originals)
{
    if (reconstructions.shape() != originals.shape() || originals.rank() != 2)
        throw shape_error("interleave_pairs: " + shape_str(reconstructions.shape()) + " vs "
                          + shape_str(originals.shape()));
    const std::size_t n = originals.extent(0), d = originals.extent(1);
    tensor out({2 * n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            out[(2 * i) * d + j] = reconstructions[i * d + j];
            out[(2 * i + 1) * d + j] = originals[i * d + j];
        }
    return out;
}

void emit_pair_grid(const tensor& reconstructions, const tensor& originals, const shape_t& image_shape,
                    std::size_t rows, std::size_t pair_cols, const std::filesystem::path& path)
{
    emit_image_grid(interleave_pairs(reconstructions, originals), image_shape, rows, 2 * pair_cols, path);
}

} // namespace featalign
