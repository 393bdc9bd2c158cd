#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "amflow/autodiff.hpp"
#include "amflow/flow.hpp"
#include "amflow/rng.hpp"
#include "amflow/synth.hpp"

namespace amflow {

// Score-op counters. One op = one query-key dot product.
struct ScoreCounter {
    std::uint64_t windowed = 0;        // window-restricted scores (windowed extraction)
    std::uint64_t full = 0;            // dense per-token all-pairs scores
    std::uint64_t representative = 0;  // representative-query vs all tokens (centers, full-attention oracle)

    ScoreCounter& operator+=(const ScoreCounter& o) {
        windowed += o.windowed;
        full += o.full;
        representative += o.representative;
        return *this;
    }
};

// ---------------------------------------------------------------- projection

// Columns of the Q factor of a seeded Gaussian matrix.
inline Tensor orthonormal_projection(std::size_t C, std::size_t D, std::uint64_t seed, std::string_view stream) {
    if (C == 0 || D == 0) throw std::invalid_argument("projection: C and D_h must be positive");
    if (D > C) throw std::invalid_argument("projection: D_h > C cannot have orthonormal columns");
    Engine eng = make_engine(seed, stream);
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::MatrixXd g(C, C);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
        for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = nd(eng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(Eigen::Index(C), Eigen::Index(D));
    Tensor w(Shape{C, D});
    for (std::size_t r = 0; r < C; ++r)
        for (std::size_t c = 0; c < D; ++c) w[r * D + c] = q(Eigen::Index(r), Eigen::Index(c));
    return w;
}

struct ProjectionParams {
    std::size_t head_dim = 8;
    double tau = 1.0;
    std::uint64_t seed = 0;
    bool tied = true;      // W_K = W_Q
    bool identity = false; // test mode: D_h = C, W = I
};

struct Projection {
    Tensor wq, wk;  // (C, D_h)
    std::size_t head_dim = 0;
    double tau = 1.0;
    bool tied = true;

    double score_scale() const { return tau / std::sqrt(double(head_dim)); }
};

inline Projection make_projection(std::size_t C, const ProjectionParams& p) {
    if (!(p.tau > 0.0)) throw std::invalid_argument("projection: tau must be positive");
    Projection pr;
    pr.tau = p.tau;
    pr.tied = p.tied;
    if (p.identity) {
        pr.head_dim = C;
        pr.wq = Tensor(Shape{C, C});
        for (std::size_t i = 0; i < C; ++i) pr.wq[i * C + i] = 1.0;
        pr.wk = pr.wq;
        return pr;
    }
    if (p.head_dim < 2) throw std::invalid_argument("projection: D_h must be at least 2");
    pr.head_dim = p.head_dim;
    pr.wq = orthonormal_projection(C, p.head_dim, p.seed, "projection.q");
    pr.wk = p.tied ? pr.wq : orthonormal_projection(C, p.head_dim, p.seed, "projection.k");
    return pr;
}

// Q, K stored as (F, S, D_h) with S = h*w row-major tokens.
struct AttentionContext {
    Tensor q, k;
    std::size_t frames = 0, h = 0, w = 0, head_dim = 0;
    double tau = 1.0;

    std::size_t tokens() const { return h * w; }
    double scale() const { return tau / std::sqrt(double(head_dim)); }
    const double* qrow(std::size_t f, std::size_t s) const { return &q.data[(f * tokens() + s) * head_dim]; }
    const double* krow(std::size_t f, std::size_t s) const { return &k.data[(f * tokens() + s) * head_dim]; }
    double score(std::size_t i, std::size_t sq, std::size_t j, std::size_t sk) const {
        const double* a = qrow(i, sq);
        const double* b = krow(j, sk);
        double s = 0.0;
        for (std::size_t d = 0; d < head_dim; ++d) s += a[d] * b[d];
        return s;
    }
};

// Flat index permutation (F,C,h,w) -> (F*S, C).
inline std::vector<std::size_t> token_index(std::size_t F, std::size_t C, std::size_t h, std::size_t w) {
    std::vector<std::size_t> idx;
    idx.reserve(F * C * h * w);
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t s = 0; s < h * w; ++s)
            for (std::size_t c = 0; c < C; ++c) idx.push_back((f * C + c) * h * w + s);
    return idx;
}

inline Tensor tokens_of(const LatentVideo& v) {
    const auto idx = token_index(v.frames(), v.channels(), v.height(), v.width());
    Tensor t(Shape{v.frames() * v.tokens(), v.channels()});
    for (std::size_t k = 0; k < idx.size(); ++k) t[k] = v.values[idx[k]];
    return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Tape t;
    return t.value(t.matmul(t.constant(a), t.constant(b)));
}

inline AttentionContext project_qk(const LatentVideo& video, const Projection& pr) {
    if (pr.wq.dim(0) != video.channels()) throw std::invalid_argument("project_qk: channel count differs from projection");
    AttentionContext ctx;
    ctx.frames = video.frames();
    ctx.h = video.height();
    ctx.w = video.width();
    ctx.head_dim = pr.head_dim;
    ctx.tau = pr.tau;
    const Tensor tok = tokens_of(video);
    const Shape s{video.frames(), video.tokens(), pr.head_dim};
    ctx.q = matmul(tok, pr.wq).reshaped(s);
    ctx.k = pr.tied ? ctx.q : matmul(tok, pr.wk).reshaped(s);
    return ctx;
}

inline AttentionContext project_qk(const LatentVideo& video, std::uint64_t seed, std::size_t head_dim, double tau) {
    return project_qk(video, make_projection(video.channels(), ProjectionParams{head_dim, tau, seed}));
}

// Differentiable projection of a latent variable: returns (F*S, D_h) node.
struct QKVars {
    Var q, k;
};

inline QKVars project_qk(Tape& tape, Var latent, const Projection& pr) {
    const Shape& s = tape.shape(latent);
    if (s.size() != 4) throw std::invalid_argument("project_qk: latent must be (F,C,h,w)");
    const std::size_t F = s[0], C = s[1], h = s[2], w = s[3];
    Var tok = tape.gather(latent, token_index(F, C, h, w), Shape{F * h * w, C});
    Var q = tape.matmul(tok, tape.constant(pr.wq));
    Var k = pr.tied ? q : tape.matmul(tok, tape.constant(pr.wk));
    return {q, k};
}

// ---------------------------------------------------------------- tiles

struct Tile {
    std::size_t y0 = 0, x0 = 0;           // top-left
    std::size_t cy = 0, cx = 0;           // representative position P_block
};

struct TileGrid {
    std::size_t h = 0, w = 0, tile_h = 4, tile_w = 4, stride_h = 4, stride_w = 4;
    std::vector<Tile> tiles;

    std::size_t size() const { return tiles.size(); }
    std::size_t rep_index(std::size_t t) const { return tiles[t].cy * w + tiles[t].cx; }

    std::vector<std::array<double, 2>> rep_points() const {
        std::vector<std::array<double, 2>> p;
        for (const auto& t : tiles) p.push_back({double(t.cy), double(t.cx)});
        return p;
    }

    std::vector<std::size_t> members(std::size_t t) const {
        std::vector<std::size_t> m;
        for (std::size_t y = tiles[t].y0; y < tiles[t].y0 + tile_h; ++y)
            for (std::size_t x = tiles[t].x0; x < tiles[t].x0 + tile_w; ++x) m.push_back(y * w + x);
        return m;
    }
};

inline std::size_t tiles_along(std::size_t n, std::size_t t, std::size_t stride) {
    return (n - t + stride - 1) / stride + 1;
}

inline TileGrid make_tile_grid(std::size_t h, std::size_t w, std::size_t tile_h = 4, std::size_t tile_w = 4,
                               std::size_t stride_h = 4, std::size_t stride_w = 4) {
    if (tile_h == 0 || tile_w == 0 || stride_h == 0 || stride_w == 0)
        throw std::invalid_argument("tile grid: tile size and stride must be positive");
    if (tile_h > h || tile_w > w) throw std::invalid_argument("tile grid: tile larger than grid");
    TileGrid g{h, w, tile_h, tile_w, stride_h, stride_w, {}};
    const std::size_t ny = tiles_along(h, tile_h, stride_h), nx = tiles_along(w, tile_w, stride_w);
    for (std::size_t a = 0; a < ny; ++a)
        for (std::size_t b = 0; b < nx; ++b) {
            Tile t;
            t.y0 = std::min(a * stride_h, h - tile_h);  // last row/column clamped to the border
            t.x0 = std::min(b * stride_w, w - tile_w);
            t.cy = t.y0 + tile_h / 2;
            t.cx = t.x0 + tile_w / 2;
            g.tiles.push_back(t);
        }
    return g;
}

// ---------------------------------------------------------------- representative attention

inline Tensor representative_attention(const AttentionContext& ctx, const TileGrid& tiles, std::size_t i,
                                       std::size_t j, ScoreCounter* counter = nullptr) {
    if (i >= ctx.frames || j >= ctx.frames) throw std::out_of_range("representative_attention: frame index");
    const std::size_t S = ctx.tokens(), N = tiles.size();
    Tensor a(Shape{N, S});
    std::vector<double> row(S);
    for (std::size_t p = 0; p < N; ++p) {
        const std::size_t r = tiles.rep_index(p);
        for (std::size_t s = 0; s < S; ++s) row[s] = ctx.score(i, r, j, s) * ctx.scale();
        const auto sm = softmax(row);
        std::copy(sm.begin(), sm.end(), a.data.begin() + long(p * S));
    }
    if (counter) counter->representative += N * S;
    return a;
}

// Expectation center: attention-weighted mean of absolute token positions.
inline std::vector<std::array<double, 2>> estimate_center_expectation(const Tensor& a_rep, std::size_t h,
                                                                      std::size_t w) {
    if (a_rep.rank() != 2 || a_rep.dim(1) != h * w) throw std::invalid_argument("center_expectation: shape");
    std::vector<std::array<double, 2>> c(a_rep.dim(0));
    for (std::size_t p = 0; p < a_rep.dim(0); ++p) {
        double y = 0.0, x = 0.0;
        for (std::size_t s = 0; s < h * w; ++s) {
            const double v = a_rep[p * h * w + s];
            y += v * double(s / w);
            x += v * double(s % w);
        }
        c[p] = {y, x};
    }
    return c;
}

// Index of the largest value; ties go to the smallest index.
inline std::size_t argmax_first(const double* v, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < n; ++s)
        if (v[s] > v[best]) best = s;
    return best;
}

// Argmax center: P_block + (argmax position - representative position).
inline std::vector<std::array<long, 2>> estimate_center_argmax(const AttentionContext& ctx, const TileGrid& tiles,
                                                               std::size_t i, std::size_t j,
                                                               ScoreCounter* counter = nullptr) {
    if (i >= ctx.frames || j >= ctx.frames) throw std::out_of_range("estimate_center_argmax: frame index");
    const std::size_t S = ctx.tokens(), N = tiles.size();
    std::vector<std::array<long, 2>> c(N);
    std::vector<double> row(S);
    for (std::size_t p = 0; p < N; ++p) {
        const std::size_t r = tiles.rep_index(p);
        for (std::size_t s = 0; s < S; ++s) row[s] = ctx.score(i, r, j, s);
        const std::size_t a = argmax_first(row.data(), S);
        const long dy = long(a / ctx.w) - long(tiles.tiles[p].cy);
        const long dx = long(a % ctx.w) - long(tiles.tiles[p].cx);
        c[p] = {long(tiles.tiles[p].cy) + dy, long(tiles.tiles[p].cx) + dx};
    }
    if (counter) counter->representative += N * S;
    return c;
}

// ---------------------------------------------------------------- window plan

enum class CenterMode { argmax, expectation, fixed };

inline const char* to_string(CenterMode m) {
    switch (m) {
        case CenterMode::argmax: return "argmax";
        case CenterMode::expectation: return "expectation";
        case CenterMode::fixed: return "fixed";
    }
    return "?";
}

inline CenterMode center_mode_from(const std::string& s) {
    if (s == "argmax") return CenterMode::argmax;
    if (s == "expectation") return CenterMode::expectation;
    if (s == "fixed") return CenterMode::fixed;
    throw std::invalid_argument("unknown center mode '" + s + "' (argmax|expectation|fixed)");
}

// Clamped l x l window around a center, row-major.
inline std::vector<std::uint32_t> window_indices(long cy, long cx, std::size_t l, std::size_t h, std::size_t w) {
    const long r = long(l / 2);
    const long y0 = std::max(0L, cy - r), y1 = std::min(long(h) - 1, cy + r);
    const long x0 = std::max(0L, cx - r), x1 = std::min(long(w) - 1, cx + r);
    std::vector<std::uint32_t> out;
    for (long y = y0; y <= y1; ++y)
        for (long x = x0; x <= x1; ++x) out.push_back(std::uint32_t(y * long(w) + x));
    return out;
}

struct WindowPlan {
    std::size_t span = 3, side = 9, h = 0, w = 0;
    CenterMode mode = CenterMode::argmax;
    std::vector<FramePair> pairs;
    TileGrid tiles;
    std::vector<std::array<long, 2>> centers;  // (pair, tile) slot order
    std::vector<std::size_t> offsets;          // CSR into indices, size slots+1
    std::vector<std::uint32_t> indices;

    std::size_t slots() const { return centers.size(); }
    std::size_t slot(std::size_t p, std::size_t t) const { return p * tiles.size() + t; }
    std::size_t window_size(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
    const std::uint32_t* window(std::size_t s) const { return indices.data() + offsets[s]; }
    std::uint64_t score_ops() const { return indices.size(); }
};

inline void validate_window_side(std::size_t l, std::size_t h, std::size_t w) {
    if (l % 2 == 0) throw std::invalid_argument("window side l must be odd");
    if (l > std::min(h, w)) throw std::invalid_argument("window side l exceeds min(h, w)");
}

// centers: (pair, tile) slot order, one per temporal pair of (F, span).
inline WindowPlan build_window_plan(const std::vector<std::array<long, 2>>& centers, std::size_t span, std::size_t l,
                                    std::size_t F, std::size_t h, std::size_t w, const TileGrid& tiles,
                                    CenterMode mode = CenterMode::argmax) {
    validate_window_side(l, h, w);
    WindowPlan plan;
    plan.span = span;
    plan.side = l;
    plan.h = h;
    plan.w = w;
    plan.mode = mode;
    plan.pairs = temporal_pairs(F, span);
    plan.tiles = tiles;
    if (centers.size() != plan.pairs.size() * tiles.size())
        throw std::invalid_argument("build_window_plan: expected one center per (pair, tile)");
    plan.centers = centers;
    plan.offsets.push_back(0);
    for (const auto& c : centers) {
        const long cy = std::clamp(c[0], 0L, long(h) - 1), cx = std::clamp(c[1], 0L, long(w) - 1);
        auto win = window_indices(cy, cx, l, h, w);
        plan.indices.insert(plan.indices.end(), win.begin(), win.end());
        plan.offsets.push_back(plan.indices.size());
    }
    return plan;
}

struct PlanParams {
    std::size_t span = 3;
    std::size_t side = 9;
    CenterMode mode = CenterMode::argmax;
};

inline WindowPlan make_window_plan(const AttentionContext& ctx, const TileGrid& tiles, const PlanParams& pp,
                                   ScoreCounter* counter = nullptr) {
    const auto pairs = temporal_pairs(ctx.frames, pp.span);
    std::vector<std::array<long, 2>> centers;
    centers.reserve(pairs.size() * tiles.size());
    for (const auto& pr : pairs) {
        switch (pp.mode) {
            case CenterMode::argmax: {
                auto c = estimate_center_argmax(ctx, tiles, pr.i, pr.j, counter);
                centers.insert(centers.end(), c.begin(), c.end());
                break;
            }
            case CenterMode::expectation: {
                auto e = estimate_center_expectation(representative_attention(ctx, tiles, pr.i, pr.j, counter), ctx.h,
                                                     ctx.w);
                for (const auto& v : e) centers.push_back({std::lround(v[0]), std::lround(v[1])});
                break;
            }
            case CenterMode::fixed:
                for (const auto& t : tiles.tiles) centers.push_back({long(t.cy), long(t.cx)});
                break;
        }
    }
    return build_window_plan(centers, pp.span, pp.side, ctx.frames, ctx.h, ctx.w, tiles, pp.mode);
}

// ---------------------------------------------------------------- accounting

struct ScoreOps {
    std::uint64_t full_pairs = 0, windowed_pairs = 0;
    std::uint64_t full_ops = 0;               // all-pairs, every token against every token
    std::uint64_t windowed_ops = 0;           // exact: sum of window sizes of the plan
    std::uint64_t windowed_ops_nominal = 0;   // pairs * N_tiles * l^2 (no border clamping)
    double ratio = 0.0;                       // full_ops / windowed_ops
};

inline std::uint64_t windowed_pair_count(std::size_t F, std::size_t span) {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < F; ++i) n += std::min(span, F - 1 - i);
    return n;
}

inline ScoreOps count_score_ops(std::size_t F, std::size_t h, std::size_t w, std::size_t span, std::size_t l,
                                std::size_t n_tiles) {
    ScoreOps o;
    const std::uint64_t S = std::uint64_t(h) * w;
    o.full_pairs = std::uint64_t(F) * (F - 1) / 2;
    o.windowed_pairs = windowed_pair_count(F, span);
    o.full_ops = o.full_pairs * S * S;
    o.windowed_ops_nominal = o.windowed_pairs * n_tiles * l * l;
    o.windowed_ops = o.windowed_ops_nominal;
    o.ratio = o.windowed_ops ? double(o.full_ops) / double(o.windowed_ops) : 0.0;
    return o;
}

inline ScoreOps count_score_ops(const WindowPlan& plan, std::size_t F) {
    ScoreOps o = count_score_ops(F, plan.h, plan.w, plan.span, plan.side, plan.tiles.size());
    o.windowed_ops = plan.score_ops();
    o.ratio = o.windowed_ops ? double(o.full_ops) / double(o.windowed_ops) : 0.0;
    return o;
}

}  // namespace amflow
