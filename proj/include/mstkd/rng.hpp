#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mstkd {

// Deterministic RNG with explicit bit-to-double conversion so that streams
// are stable across standard library implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return std::ldexp(static_cast<double>(gen_() >> 11), -53); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive integer range
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(gen_() % span);
    }

    bool coin() { return (gen_() & 1u) != 0; }

    double normal() {
        // Box-Muller; one sample per call, cached partner discarded for simplicity.
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
    }

    // Derive an independent stream for a sub-task.
    Rng fork(std::uint64_t salt) {
        return Rng(gen_() ^ (salt * 0x9e3779b97f4a7c15ull + 0x7f4a7c15ull));
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace mstkd
