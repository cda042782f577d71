#include "featalign/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace featalign {

std::uint64_t rng::derive(std::uint64_t seed, std::string_view purpose)
{
    std::uint64_t h = 1469598103934665603ull; // FNV-1a
    for (char c : purpose) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    std::uint64_t z = seed ^ h; // splitmix64 finalizer
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double rng::normal()
{
    const double u1 = 1.0 - uniform(); // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

tensor rng::normal_tensor(shape_t shape, double stddev)
{
    tensor t(std::move(shape));
    for (auto& v : t.values()) v = stddev * normal();
    return t;
}

std::size_t rng::below(std::size_t n)
{
    if (n == 0) return 0;
    // Rejection sampling keeps the result unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return static_cast<std::size_t>(v % n);
}

} // namespace featalign
