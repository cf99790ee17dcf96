#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "stats/tensor.hpp"

namespace stats {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Deterministic random stream. All distributions are hand-rolled on top of
/// mt19937_64 so draws are bit-identical across platforms and standard
/// libraries. Substreams are derived by hashing a name into the seed, so
/// independent consumers (init, shuffle, sampling) never share state.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : engine_(seed), seed_(seed) {}

    RngStream substream(std::string_view name) const {
        return RngStream(fnv1a64(name, seed_ ^ 0x9e3779b97f4a7c15ULL));
    }

    std::uint64_t next_u64() {
        ++draws_;
        return engine_();
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; consumes exactly two u64 draws.
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform index in [0, n).
    std::size_t index(std::size_t n);

    /// One draw from a probability vector; consumes exactly one u64 draw.
    std::size_t multinomial(std::span<const double> probs);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    }

    void fill_normal(Tensor& t, double mean, double stddev) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = normal(mean, stddev);
    }

    /// Number of raw u64 draws consumed so far (reproducibility audits).
    std::uint64_t draw_count() const { return draws_; }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_;
    std::uint64_t draws_ = 0;
};

}  // namespace stats
