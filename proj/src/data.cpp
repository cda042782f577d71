#include "featalign/data.hpp"

#include "featalign/model.hpp"
#include "featalign/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace featalign {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw data_error(data_error::kind::io, "cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), {}};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off)
{
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8)
           | std::uint32_t(b[off + 3]);
}

struct idx_file {
    std::vector<std::size_t> dims;
    std::vector<unsigned char> bytes;
    std::size_t payload = 0;
};

idx_file parse_idx(const std::filesystem::path& p, std::uint32_t magic, std::size_t rank)
{
    idx_file f;
    f.bytes = read_file(p);
    const std::size_t header = 4 + 4 * rank;
    if (f.bytes.size() < 4) throw data_error(data_error::kind::truncated, p.string() + ": truncated header");
    const std::uint32_t m = be32(f.bytes, 0);
    if (m != magic)
        throw data_error(data_error::kind::bad_magic,
                         fmt::format("{}: bad magic 0x{:08x}", p.string(), m));
    if (f.bytes.size() < header) throw data_error(data_error::kind::truncated, p.string() + ": truncated header");
    std::size_t total = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        f.dims.push_back(be32(f.bytes, 4 + 4 * i));
        total *= f.dims.back();
    }
    if (f.bytes.size() - header < total)
        throw data_error(data_error::kind::truncated, p.string() + ": payload shorter than " + std::to_string(total)
                                                          + " bytes");
    f.payload = header;
    return f;
}

} // namespace

dataset load_mnist_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels)
{
    idx_file img = parse_idx(images, 0x00000803u, 3);
    const std::size_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
    dataset d;
    d.example_shape = {1, h, w};
    d.x = tensor({n, h * w});
    for (std::size_t i = 0; i < n * h * w; ++i) d.x[i] = static_cast<double>(img.bytes[img.payload + i]) / 255.0;
    if (labels) {
        idx_file lab = parse_idx(*labels, 0x00000801u, 1);
        if (lab.dims[0] != n)
            throw data_error(data_error::kind::count_mismatch, "image count " + std::to_string(n)
                                                                   + " does not match label count "
                                                                   + std::to_string(lab.dims[0]));
        d.labels.resize(n);
        int top = -1;
        for (std::size_t i = 0; i < n; ++i) {
            d.labels[i] = lab.bytes[lab.payload + i];
            top = std::max(top, d.labels[i]);
        }
        d.class_count = std::max<std::size_t>(10, static_cast<std::size_t>(top + 1));
    }
    return d;
}

namespace {

struct pnm {
    std::size_t channels, height, width;
    std::vector<double> pixels; // channel-major
};

pnm read_pnm(const std::filesystem::path& p)
{
    const auto b = read_file(p);
    std::size_t pos = 0;
    auto bad = [&](const std::string& why) { return data_error(data_error::kind::bad_format, p.string() + ": " + why); };
    auto token = [&]() {
        for (;;) {
            while (pos < b.size() && std::isspace(b[pos])) ++pos;
            if (pos < b.size() && b[pos] == '#') {
                while (pos < b.size() && b[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        std::string t;
        while (pos < b.size() && !std::isspace(b[pos])) t += static_cast<char>(b[pos++]);
        if (t.empty()) throw bad("truncated header");
        return t;
    };
    auto number = [&]() {
        const std::string t = token();
        if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
            throw bad("bad header field '" + t + "'");
        return static_cast<std::size_t>(std::stoull(t));
    };
    const std::string magic = token();
    if (magic != "P5" && magic != "P6") throw bad("expected P5 or P6, got " + magic);
    pnm img;
    img.channels = magic == "P5" ? 1 : 3;
    img.width = number();
    img.height = number();
    const std::size_t maxval = number();
    if (maxval == 0 || maxval > 255) throw bad("maxval must be in 1..255");
    ++pos; // single whitespace before the raster
    const std::size_t count = img.channels * img.width * img.height;
    if (b.size() < pos + count) throw data_error(data_error::kind::truncated, p.string() + ": truncated raster");
    img.pixels.resize(count);
    const std::size_t plane = img.width * img.height;
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < img.channels; ++c)
            img.pixels[c * plane + i] = static_cast<double>(b[pos + i * img.channels + c]) / static_cast<double>(maxval);
    return img;
}

} // namespace

dataset load_image_folder(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir)) throw data_error(data_error::kind::io, dir.string() + " is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const auto ext = e.path().extension();
        if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
    }
    if (files.empty()) throw data_error(data_error::kind::io, dir.string() + " holds no .pgm/.ppm files");
    std::sort(files.begin(), files.end());
    dataset d;
    std::vector<double> all;
    for (const auto& f : files) {
        pnm img = read_pnm(f);
        shape_t s{img.channels, img.height, img.width};
        if (d.example_shape.empty()) d.example_shape = s;
        if (s != d.example_shape)
            throw data_error(data_error::kind::bad_format, f.string() + ": shape " + shape_str(s) + " differs from "
                                                               + shape_str(d.example_shape));
        all.insert(all.end(), img.pixels.begin(), img.pixels.end());
    }
    d.x = tensor({files.size(), shape_size(d.example_shape)}, std::move(all));
    return d;
}

dataset synthetic_dataset(const std::string& kind, std::size_t n, std::uint64_t seed, std::size_t dim)
{
    if (n == 0) throw std::invalid_argument("synthetic_dataset: n must be >= 1");
    rng gen(rng::derive(seed, "synthetic:" + kind));
    dataset d;
    if (kind == "ring") {
        d.example_shape = {2};
        d.x = tensor({n, 2});
        d.labels.resize(n);
        d.class_count = ring_modes;
        for (std::size_t i = 0; i < n; ++i) {
            const int mode = static_cast<int>(gen.below(ring_modes));
            const double a = 2.0 * std::numbers::pi * mode / ring_modes;
            d.x[2 * i] = ring_radius * std::cos(a) + ring_std * gen.normal();
            d.x[2 * i + 1] = ring_radius * std::sin(a) + ring_std * gen.normal();
            d.labels[i] = mode;
        }
        return d;
    }
    if (kind != "gaussian" && kind != "mixed")
        throw data_error(data_error::kind::unknown_kind, "synthetic_dataset: unknown kind '" + kind + "'");
    if (dim == 0) throw std::invalid_argument("synthetic_dataset: dim must be >= 1");
    d.example_shape = {dim};
    d.x = gen.normal_tensor({n, dim}, 1.0);
    if (kind == "mixed") {
        rng mix_gen(rng::derive(seed, "synthetic:mix"));
        const tensor q = orthogonal_matrix(dim, dim, mix_gen);
        tensor mixed({n, dim});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < dim; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < dim; ++c) s += q[r * dim + c] * d.x[i * dim + c];
                mixed[i * dim + r] = s;
            }
        d.x = std::move(mixed);
    }
    return d;
}

dataset subset(const dataset& d, std::size_t offset, std::size_t count)
{
    if (offset + count > d.size())
        throw std::out_of_range("subset: [" + std::to_string(offset) + ", " + std::to_string(offset + count)
                                + ") exceeds " + std::to_string(d.size()) + " examples");
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = offset + i;
    dataset s;
    s.example_shape = d.example_shape;
    s.class_count = d.class_count;
    s.x = gather_rows(d.x, idx);
    s.labels = gather_labels(d.labels, idx);
    return s;
}

tensor gather_rows(const tensor& x, std::span<const std::size_t> idx)
{
    if (x.rank() != 2) throw shape_error("gather_rows: expected [N x D], got " + shape_str(x.shape()));
    const std::size_t d = x.extent(1);
    tensor out({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= x.extent(0)) throw std::out_of_range("gather_rows: index out of range");
        std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                    out.values().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const std::size_t> idx)
{
    if (labels.empty()) return {};
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
}

} // namespace featalign
