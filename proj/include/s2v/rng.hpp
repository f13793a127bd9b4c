#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"

namespace s2v {

namespace detail {

inline uint64_t mix64(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a(const std::string & s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace detail

// Counter-based generator: draw i from stream (seed) is mix64(seed ^ mix64(i)),
// so the sequence depends only on the seed and the draw index. split() derives
// an independent child stream from the parent seed and a stream id; the child
// is unaffected by how many draws the parent has made.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(detail::mix64(seed ^ 0xA5A5A5A55A5A5A5Aull)) {}

    uint64_t next_u64() { return detail::mix64(seed_ ^ detail::mix64(counter_++)); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return (double) (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) {
            throw InputError("uniform_int: n must be positive");
        }
        return (int) (next_u64() % (uint64_t) n);
    }

    // Box-Muller; one draw consumes two uniforms so the stream position stays
    // a pure function of the number of calls.
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    Rng split(uint64_t stream_id) const {
        Rng child(0);
        child.seed_ = detail::mix64(seed_ ^ detail::mix64(stream_id ^ 0x5EEDFACE5EEDFACEull));
        child.counter_ = 0;
        return child;
    }

    Rng split(const std::string & name) const { return split(detail::fnv1a(name)); }

    void fill_gaussian(Matrix & m, double scale = 1.0) {
        for (float & v : m.data) v = (float) (gaussian() * scale);
    }

    void fill_uniform(Matrix & m, double lo, double hi) {
        for (float & v : m.data) v = (float) uniform(lo, hi);
    }

    // Fisher-Yates.
    template <class T> void shuffle(std::vector<T> & v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = (size_t) (next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t seed_ = 0;
    uint64_t counter_ = 0;
};

} // namespace s2v
