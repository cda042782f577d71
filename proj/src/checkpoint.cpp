#include "featalign/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace featalign {

namespace {

class writer {
public:
    void bytes(const void* p, std::size_t n)
    {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void tensor_data(const tensor& t)
    {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) u64(e);
        for (double v : t.values()) f64(v);
    }
    std::vector<unsigned char>& buffer() { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class reader {
public:
    reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
    void need(std::size_t k) const
    {
        if (pos_ + k > n_) throw checkpoint_error(checkpoint_error::kind::truncated, "checkpoint: truncated payload");
    }
    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64()
    {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_++]) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t k)
    {
        need(k);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
        pos_ += k;
        return s;
    }
    tensor tensor_data()
    {
        const std::uint32_t rank = u32();
        if (rank > 8) throw checkpoint_error(checkpoint_error::kind::truncated, "checkpoint: implausible tensor rank");
        shape_t shape(rank);
        for (auto& e : shape) e = u64();
        const std::size_t count = shape_size(shape);
        need(count * 8);
        std::vector<double> vals(count);
        for (auto& v : vals) v = f64();
        return tensor(std::move(shape), std::move(vals));
    }
    std::size_t remaining() const { return n_ - pos_; }

private:
    const unsigned char* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

std::uint32_t crc32_of(const unsigned char* p, std::size_t n)
{
    return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& architecture,
                     std::span<const tensor* const> parameters, const adam_state& adam)
{
    writer w;
    w.bytes("FALN", 4);
    w.u32(checkpoint_version);
    const std::string arch = architecture.dump(); // object keys are sorted, so this is canonical
    w.u64(arch.size());
    w.bytes(arch.data(), arch.size());
    w.u64(parameters.size());
    for (const auto* p : parameters) w.tensor_data(*p);
    w.f64(adam.settings.lr);
    w.f64(adam.settings.beta1);
    w.f64(adam.settings.beta2);
    w.f64(adam.settings.eps);
    w.u64(adam.step);
    w.u64(adam.m.size());
    for (std::size_t i = 0; i < adam.m.size(); ++i) {
        w.tensor_data(adam.m[i]);
        w.tensor_data(adam.v[i]);
    }
    auto& buf = w.buffer();
    w.u32(crc32_of(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw checkpoint_error(checkpoint_error::kind::io, "checkpoint: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw checkpoint_error(checkpoint_error::kind::io, "checkpoint: write failed for " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const network& net, const adam_state& adam)
{
    auto params = net.parameters();
    save_checkpoint(path, to_json(net.spec()), params, adam);
}

checkpoint read_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw checkpoint_error(checkpoint_error::kind::io, "checkpoint: cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 12) throw checkpoint_error(checkpoint_error::kind::truncated, "checkpoint: file too short");
    if (std::memcmp(buf.data(), "FALN", 4) != 0)
        throw checkpoint_error(checkpoint_error::kind::bad_magic, "checkpoint: bad magic in " + path.string());
    reader head(buf.data() + 4, 4);
    const std::uint32_t version = head.u32();
    if (version != checkpoint_version)
        throw checkpoint_error(checkpoint_error::kind::version_mismatch,
                               "checkpoint: format version " + std::to_string(version) + ", expected "
                                   + std::to_string(checkpoint_version));
    const std::size_t body = buf.size() - 4;
    reader tail(buf.data() + body, 4);
    if (tail.u32() != crc32_of(buf.data(), body))
        throw checkpoint_error(checkpoint_error::kind::checksum, "checkpoint: CRC-32 mismatch in " + path.string());

    reader r(buf.data() + 8, body - 8);
    checkpoint ck;
    const std::size_t arch_len = r.u64();
    try {
        ck.architecture = nlohmann::json::parse(r.str(arch_len));
    }
    catch (const nlohmann::json::parse_error& e) {
        throw checkpoint_error(checkpoint_error::kind::truncated, std::string("checkpoint: bad architecture: ") + e.what());
    }
    const std::size_t count = r.u64();
    for (std::size_t i = 0; i < count; ++i) ck.parameters.push_back(r.tensor_data());
    ck.adam.settings.lr = r.f64();
    ck.adam.settings.beta1 = r.f64();
    ck.adam.settings.beta2 = r.f64();
    ck.adam.settings.eps = r.f64();
    ck.adam.step = r.u64();
    const std::size_t moments = r.u64();
    for (std::size_t i = 0; i < moments; ++i) {
        ck.adam.m.push_back(r.tensor_data());
        ck.adam.v.push_back(r.tensor_data());
    }
    if (r.remaining() != 0) throw checkpoint_error(checkpoint_error::kind::truncated, "checkpoint: trailing bytes");
    return ck;
}

void load_checkpoint_into(const std::filesystem::path& path, const nlohmann::json& architecture,
                          std::span<tensor* const> parameters, adam_state& adam)
{
    checkpoint ck = read_checkpoint(path);
    if (ck.architecture != architecture)
        throw checkpoint_error(checkpoint_error::kind::shape_mismatch,
                               "checkpoint: architecture differs: stored " + ck.architecture.dump() + ", expected "
                                   + architecture.dump());
    if (ck.parameters.size() != parameters.size())
        throw checkpoint_error(checkpoint_error::kind::shape_mismatch, "checkpoint: parameter count differs");
    for (std::size_t i = 0; i < parameters.size(); ++i)
        if (ck.parameters[i].shape() != parameters[i]->shape())
            throw checkpoint_error(checkpoint_error::kind::shape_mismatch,
                                   "checkpoint: parameter " + std::to_string(i) + " has shape "
                                       + shape_str(ck.parameters[i].shape()) + ", expected "
                                       + shape_str(parameters[i]->shape()));
    if (!ck.adam.m.empty() && ck.adam.m.size() != parameters.size())
        throw checkpoint_error(checkpoint_error::kind::shape_mismatch, "checkpoint: optimizer state size differs");
    for (std::size_t i = 0; i < parameters.size(); ++i) *parameters[i] = std::move(ck.parameters[i]);
    adam = std::move(ck.adam);
}

loaded_network load_checkpoint(const std::filesystem::path& path)
{
    checkpoint ck = read_checkpoint(path);
    network_spec spec;
    try {
        spec = network_spec_from_json(ck.architecture);
    }
    catch (const spec_error& e) {
        throw checkpoint_error(checkpoint_error::kind::shape_mismatch, e.what());
    }
    network net = build_network(spec, 0);
    auto params = net.parameters();
    if (params.size() != ck.parameters.size())
        throw checkpoint_error(checkpoint_error::kind::shape_mismatch, "checkpoint: parameter count differs");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != ck.parameters[i].shape())
            throw checkpoint_error(checkpoint_error::kind::shape_mismatch, "checkpoint: parameter shape differs");
        *params[i] = std::move(ck.parameters[i]);
    }
    return {std::move(net), std::move(ck.adam)};
}

} // namespace featalign
