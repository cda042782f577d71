#pragma once

// Seeded random streams. Draws are produced from the mt19937_64 bit sequence
// with fixed transforms so that results do not depend on the standard
// library's distribution implementations.

#include "featalign/tensor.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace featalign {

class rng {
public:
    explicit rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Independent substream seed for a named purpose ("init", "beta", ...).
    static std::uint64_t derive(std::uint64_t seed, std::string_view purpose);

    std::uint64_t next() { return engine_(); }
    /// Uniform draw in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    /// Standard normal draw (Box-Muller, one value per pair of uniforms).
    double normal();
    tensor normal_tensor(shape_t shape, double stddev = 1.0);
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);

private:
    std::mt19937_64 engine_;
};

} // namespace featalign
