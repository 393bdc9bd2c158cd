#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "amflow/tensor.hpp"

namespace amflow {

struct FramePair {
    std::size_t i = 0, j = 0;
    std::size_t distance() const { return j - i; }
    bool operator==(const FramePair&) const = default;
};

// Pairs (i, j) with 1 <= j - i <= span, ordered by anchor then target.
inline std::vector<FramePair> temporal_pairs(std::size_t F, std::size_t span) {
    if (span < 1) throw std::invalid_argument("temporal span must be >= 1");
    std::vector<FramePair> out;
    for (std::size_t i = 0; i < F; ++i)
        for (std::size_t j = i + 1; j <= std::min(i + span, F - 1); ++j) out.push_back({i, j});
    return out;
}

inline std::vector<FramePair> all_pairs(std::size_t F) { return temporal_pairs(F, F > 1 ? F - 1 : 1); }

enum class FlowMode { hard, soft };

inline const char* to_string(FlowMode m) { return m == FlowMode::hard ? "hard" : "soft"; }

// Per-(pair, tile) displacement, stored as (P, N, 2) with (dy, dx) last.
struct MotionFlow {
    std::vector<FramePair> pairs;
    std::size_t tiles = 0;
    FlowMode mode = FlowMode::hard;
    Tensor delta;

    MotionFlow() = default;
    MotionFlow(std::vector<FramePair> p, std::size_t n, FlowMode m)
        : pairs(std::move(p)), tiles(n), mode(m), delta(Shape{pairs.size(), n, 2}) {}

    double dy(std::size_t p, std::size_t t) const { return delta[(p * tiles + t) * 2]; }
    double dx(std::size_t p, std::size_t t) const { return delta[(p * tiles + t) * 2 + 1]; }
    void set(std::size_t p, std::size_t t, double y, double x) {
        delta[(p * tiles + t) * 2] = y;
        delta[(p * tiles + t) * 2 + 1] = x;
    }
};

inline void require_same_coverage(const MotionFlow& a, const MotionFlow& b, const char* what) {
    if (a.pairs != b.pairs || a.tiles != b.tiles)
        throw std::invalid_argument(std::string(what) + ": flows cover different (tile, pair) sets");
}

// Displacements live on a periodic grid; report the shortest representative.
inline double wrap_offset(double d, double period) { return d - period * std::round(d / period); }

}  // namespace amflow
