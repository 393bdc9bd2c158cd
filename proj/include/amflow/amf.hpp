#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "amflow/attention.hpp"
#include "amflow/autodiff.hpp"
#include "amflow/flow.hpp"

namespace amflow {

// Relative position of token s to (ry, rx), minimum image on the h x w torus.
inline std::array<double, 2> relative_position(std::size_t s, std::size_t ry, std::size_t rx, std::size_t h,
                                               std::size_t w) {
    return {wrap_offset(double(s / w) - double(ry), double(h)), wrap_offset(double(s % w) - double(rx), double(w))};
}

// ---------------------------------------------------------------- oracle

// Representative query of each tile against every token of the target frame.
inline MotionFlow extract_amf_full(const AttentionContext& ctx, const TileGrid& tiles,
                                   const std::vector<FramePair>& pairs, FlowMode mode,
                                   ScoreCounter* counter = nullptr) {
    const std::size_t S = ctx.tokens(), N = tiles.size();
    MotionFlow fl(pairs, N, mode);
    std::vector<double> row(S);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const auto [i, j] = pairs[p];
        if (j <= i || j >= ctx.frames) throw std::invalid_argument("extract_amf_full: pairs must satisfy i < j < F");
        for (std::size_t t = 0; t < N; ++t) {
            const std::size_t ry = tiles.tiles[t].cy, rx = tiles.tiles[t].cx;
            const std::size_t r = tiles.rep_index(t);
            for (std::size_t s = 0; s < S; ++s) row[s] = ctx.score(i, r, j, s) * ctx.scale();
            if (mode == FlowMode::hard) {
                const auto d = relative_position(argmax_first(row.data(), S), ry, rx, ctx.h, ctx.w);
                fl.set(p, t, d[0], d[1]);
            } else {
                const auto a = softmax(row);
                double y = 0.0, x = 0.0;
                for (std::size_t s = 0; s < S; ++s) {
                    const auto d = relative_position(s, ry, rx, ctx.h, ctx.w);
                    y += a[s] * d[0];
                    x += a[s] * d[1];
                }
                fl.set(p, t, y, x);
            }
        }
        if (counter) counter->representative += N * S;
    }
    return fl;
}

// Dense every-token-against-every-token attention scores over all frame pairs:
// the cost model of unrestricted AMF acquisition. Returns a checksum.
inline double full_attention_all_tokens(const AttentionContext& ctx, ScoreCounter* counter = nullptr) {
    const std::size_t S = ctx.tokens();
    double checksum = 0.0;
    for (std::size_t i = 0; i < ctx.frames; ++i)
        for (std::size_t j = i + 1; j < ctx.frames; ++j) {
            for (std::size_t a = 0; a < S; ++a) {
                double best = -std::numeric_limits<double>::infinity();
                for (std::size_t b = 0; b < S; ++b) best = std::max(best, ctx.score(i, a, j, b));
                checksum += best;
            }
            if (counter) counter->full += std::uint64_t(S) * S;
        }
    return checksum;
}

// ---------------------------------------------------------------- windowed

inline MotionFlow extract_amf_windowed_hard(const AttentionContext& ctx, const WindowPlan& plan,
                                            ScoreCounter* counter = nullptr) {
    const std::size_t N = plan.tiles.size();
    MotionFlow fl(plan.pairs, N, FlowMode::hard);
    std::vector<double> row;
    for (std::size_t p = 0; p < plan.pairs.size(); ++p)
        for (std::size_t t = 0; t < N; ++t) {
            const std::size_t s = plan.slot(p, t);
            const std::size_t n = plan.window_size(s);
            const std::uint32_t* win = plan.window(s);
            row.resize(n);
            const std::size_t r = plan.tiles.rep_index(t);
            for (std::size_t k = 0; k < n; ++k) row[k] = ctx.score(plan.pairs[p].i, r, plan.pairs[p].j, win[k]);
            // window indices ascend, so the first maximum is the smallest flat index
            const auto d = relative_position(win[argmax_first(row.data(), n)], plan.tiles.tiles[t].cy,
                                             plan.tiles.tiles[t].cx, plan.h, plan.w);
            fl.set(p, t, d[0], d[1]);
            if (counter) counter->windowed += n;
        }
    return fl;
}

// Gather layout shared by the differentiable window computations: every slot
// padded to l*l entries, padding masked out.
struct WindowGather {
    std::size_t slots = 0, width = 0, dim = 0;
    std::vector<std::size_t> key_index;      // (slots, width, dim) into a (F*S, dim) tensor
    std::vector<std::size_t> query_index;    // (slots, dim)
    std::vector<std::uint8_t> mask;          // (slots, width)
    Tensor mean_weights;                     // (slots, width): mask / |W|
    Tensor positions;                        // (slots, width, 2) minimum-image offsets from the representative
};

inline WindowGather make_window_gather(const WindowPlan& plan, std::size_t dim) {
    WindowGather g;
    const std::size_t S = plan.h * plan.w, N = plan.tiles.size();
    g.slots = plan.slots();
    g.width = plan.side * plan.side;
    g.dim = dim;
    g.key_index.resize(g.slots * g.width * dim);
    g.query_index.resize(g.slots * dim);
    g.mask.assign(g.slots * g.width, 0);
    g.mean_weights = Tensor(Shape{g.slots, g.width});
    g.positions = Tensor(Shape{g.slots, g.width, 2});
    for (std::size_t p = 0; p < plan.pairs.size(); ++p)
        for (std::size_t t = 0; t < N; ++t) {
            const std::size_t s = plan.slot(p, t);
            const std::size_t i = plan.pairs[p].i, j = plan.pairs[p].j;
            const std::size_t rq = i * S + plan.tiles.rep_index(t);
            for (std::size_t d = 0; d < dim; ++d) g.query_index[s * dim + d] = rq * dim + d;
            const std::size_t n = plan.window_size(s);
            const std::uint32_t* win = plan.window(s);
            for (std::size_t k = 0; k < g.width; ++k) {
                const bool valid = k < n;
                const std::size_t tok = j * S + (valid ? win[k] : win[0]);
                for (std::size_t d = 0; d < dim; ++d) g.key_index[(s * g.width + k) * dim + d] = tok * dim + d;
                if (!valid) continue;
                g.mask[s * g.width + k] = 1;
                g.mean_weights[s * g.width + k] = 1.0 / double(n);
                const auto rel = relative_position(win[k], plan.tiles.tiles[t].cy, plan.tiles.tiles[t].cx, plan.h, plan.w);
                g.positions[(s * g.width + k) * 2] = rel[0];
                g.positions[(s * g.width + k) * 2 + 1] = rel[1];
            }
        }
    return g;
}

// Soft windowed flow on the tape: softmax over each window, expectation of
// offsets. q, k are (F*S, D_h) nodes. Result has shape (P, N, 2).
inline Var soft_windowed_flow(Tape& tape, Var q, Var k, const WindowPlan& plan, const WindowGather& g, double scale,
                              ScoreCounter* counter = nullptr) {
    Var qs = tape.gather(q, g.query_index, Shape{g.slots, g.dim});
    Var ks = tape.gather(k, g.key_index, Shape{g.slots, g.width, g.dim});
    Var scores = tape.scale(tape.contract_last(ks, qs), scale);
    Var attn = tape.softmax_last(scores, &g.mask);
    Var delta = tape.contract_mid(attn, tape.constant(g.positions));
    if (counter) counter->windowed += plan.score_ops();
    return tape.reshape(delta, Shape{plan.pairs.size(), plan.tiles.size(), 2});
}

inline MotionFlow extract_amf_windowed(const AttentionContext& ctx, const WindowPlan& plan, FlowMode mode,
                                       ScoreCounter* counter = nullptr) {
    if (plan.h != ctx.h || plan.w != ctx.w) throw std::invalid_argument("extract_amf_windowed: plan grid differs");
    if (mode == FlowMode::hard) return extract_amf_windowed_hard(ctx, plan, counter);
    Tape tape;
    const Shape s{ctx.frames * ctx.tokens(), ctx.head_dim};
    Var q = tape.constant(ctx.q.reshaped(s));
    Var k = tape.constant(ctx.k.reshaped(s));
    const WindowGather g = make_window_gather(plan, ctx.head_dim);
    MotionFlow fl(plan.pairs, plan.tiles.size(), FlowMode::soft);
    fl.delta = tape.value(soft_windowed_flow(tape, q, k, plan, g, ctx.scale(), counter));
    return fl;
}

// ---------------------------------------------------------------- losses

inline double distance_weight(long d, std::size_t span, double alpha) {
    if (d <= 0) throw std::invalid_argument("distance_weight: d must be >= 1");
    if (std::size_t(d) > span) return 0.0;
    if (span == 1) return 1.0;
    return 1.0 - alpha * double(d - 1) / double(span - 1);
}

// Per-element weights w_d / (|pairs| * N) laid out like MotionFlow::delta.
inline Tensor amf_weights(const std::vector<FramePair>& pairs, std::size_t tiles, std::size_t span, double alpha) {
    Tensor w(Shape{pairs.size(), tiles, 2});
    if (pairs.empty() || tiles == 0) return w;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const double wd = distance_weight(long(pairs[p].distance()), span, alpha) / double(pairs.size() * tiles);
        for (std::size_t k = 0; k < tiles * 2; ++k) w[p * tiles * 2 + k] = wd;
    }
    return w;
}

// Mean over pairs of w_d times the mean over tiles of squared displacement error.
inline double amf_loss(const MotionFlow& ref, const MotionFlow& gen, std::size_t span, double alpha) {
    require_same_coverage(ref, gen, "amf_loss");
    const Tensor w = amf_weights(ref.pairs, ref.tiles, span, alpha);
    double s = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        const double e = ref.delta[k] - gen.delta[k];
        s += w[k] * e * e;
    }
    return s;
}

inline Var amf_loss(Tape& tape, const MotionFlow& ref, Var gen, std::size_t span, double alpha) {
    if (tape.shape(gen) != ref.delta.shape) throw std::invalid_argument("amf_loss: generated flow shape differs");
    Var diff = tape.sub(gen, tape.constant(ref.delta));
    Var sq = tape.mul(diff, diff);
    return tape.sum(tape.mul(sq, tape.constant(amf_weights(ref.pairs, ref.tiles, span, alpha))));
}

// Consecutive-target drift of mean window keys. k is (F*S, D_h).
inline Var window_loss(Tape& tape, Var k, const WindowPlan& plan, const WindowGather& g) {
    const std::size_t N = plan.tiles.size();
    std::vector<std::size_t> ia, ib;
    std::vector<double> wrow;
    // anchors in pair order; each anchor's targets are contiguous and ascending
    std::size_t p = 0, anchors = 0;
    struct Run { std::size_t first, count; };
    std::vector<Run> runs;
    while (p < plan.pairs.size()) {
        std::size_t q = p;
        while (q < plan.pairs.size() && plan.pairs[q].i == plan.pairs[p].i) ++q;
        if (q - p >= 2) {
            runs.push_back({p, q - p});
            ++anchors;
        }
        p = q;
    }
    if (runs.empty()) return tape.constant(Tensor(Shape{}, 0.0));
    for (const auto& r : runs)
        for (std::size_t t = 0; t < N; ++t)
            for (std::size_t u = 0; u + 1 < r.count; ++u) {
                ia.push_back(plan.slot(r.first + u, t));
                ib.push_back(plan.slot(r.first + u + 1, t));
                wrow.push_back(1.0 / (double(anchors) * double(N) * double(r.count - 1)));
            }
    Var kbar = tape.contract_mid(tape.constant(g.mean_weights), tape.gather(k, g.key_index, Shape{g.slots, g.width, g.dim}));
    const std::size_t D = g.dim, m = ia.size();
    std::vector<std::size_t> xa, xb;
    Tensor wt(Shape{m, D});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t d = 0; d < D; ++d) {
            xa.push_back(ia[r] * D + d);
            xb.push_back(ib[r] * D + d);
            wt[r * D + d] = wrow[r];
        }
    Var diff = tape.sub(tape.gather(kbar, std::move(xb), Shape{m, D}), tape.gather(kbar, std::move(xa), Shape{m, D}));
    return tape.sum(tape.mul(tape.mul(diff, diff), tape.constant(wt)));
}

inline double window_loss(const AttentionContext& ctx, const WindowPlan& plan) {
    Tape tape;
    Var k = tape.constant(ctx.k.reshaped(Shape{ctx.frames * ctx.tokens(), ctx.head_dim}));
    return tape.value(window_loss(tape, k, plan, make_window_gather(plan, ctx.head_dim)))[0];
}

struct LossWeights {
    double lambda_amf = 5.0;
    double lambda_window = 1.0;
    double alpha = 0.2;

    void validate() const {
        if (lambda_amf < 0 || lambda_window < 0) throw std::invalid_argument("loss weights must be non-negative");
    }
};

struct LossBreakdown {
    double amf = 0.0, window = 0.0, total = 0.0;
    std::vector<double> pair_weights;
};

inline LossBreakdown combine(double l_amf, double l_window, const LossWeights& lw) {
    lw.validate();
    return {l_amf, l_window, lw.lambda_amf * l_amf + lw.lambda_window * l_window, {}};
}

struct TotalLoss {
    Var total;
    LossBreakdown parts;
};

// L_total on the tape. The generated side reads its windows from `plan`.
inline TotalLoss total_loss(Tape& tape, const MotionFlow& ref, QKVars gen, const WindowPlan& plan,
                            const WindowGather& g, double scale, const LossWeights& lw,
                            ScoreCounter* counter = nullptr) {
    lw.validate();
    Var flow = soft_windowed_flow(tape, gen.q, gen.k, plan, g, scale, counter);
    Var la = amf_loss(tape, ref, flow, plan.span, lw.alpha);
    Var lwin = window_loss(tape, gen.k, plan, g);
    Var total = tape.add(tape.scale(la, lw.lambda_amf), tape.scale(lwin, lw.lambda_window));
    TotalLoss out{total, combine(tape.value(la)[0], tape.value(lwin)[0], lw)};
    for (const auto& pr : ref.pairs) out.parts.pair_weights.push_back(distance_weight(long(pr.distance()), plan.span, lw.alpha));
    out.parts.total = tape.value(total)[0];
    return out;
}

}  // namespace amflow
