#include "stats/rng.hpp"

#include <cmath>
#include <numbers>

#include "stats/errors.hpp"

namespace stats {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

double RngStream::normal() {
    // Box-Muller without caching so each call costs a fixed two draws.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RngStream::index(std::size_t n) {
    if (n == 0) throw ParamError("RngStream::index requires n > 0");
    // Rejection sampling to avoid modulo bias.
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
    std::uint64_t x = next_u64();
    while (x > limit) x = next_u64();
    return static_cast<std::size_t>(x % n);
}

std::size_t RngStream::multinomial(std::span<const double> probs) {
    if (probs.empty()) throw ParamError("multinomial over an empty distribution");
    double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    // Rounding left u just past the accumulated mass; take the last
    // positive-probability entry.
    for (std::size_t i = probs.size(); i > 0; --i) {
        if (probs[i - 1] > 0.0) return i - 1;
    }
    return probs.size() - 1;
}

}  // namespace stats
