#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "amflow/tensor.hpp"

namespace amflow {

// Named-stream splitting: every consumer derives its own engine from
// (root seed, stream name), so reseeding one stream leaves the others alone.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) {
    return splitmix64(seed ^ splitmix64(fnv1a(name)));
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return splitmix64(stream_seed(seed, name) + splitmix64(index + 1));
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed, std::string_view name) {
    return Engine(stream_seed(seed, name));
}

inline Engine make_engine(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return Engine(stream_seed(seed, name, index));
}

inline Tensor gaussian(const Shape& shape, Engine& eng) {
    Tensor t(shape);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (double& v : t.data) v = nd(eng);
    return t;
}

inline Tensor uniform(const Shape& shape, Engine& eng, double lo, double hi) {
    Tensor t(shape);
    std::uniform_real_distribution<double> ud(lo, hi);
    for (double& v : t.data) v = ud(eng);
    return t;
}

}  // namespace amflow
