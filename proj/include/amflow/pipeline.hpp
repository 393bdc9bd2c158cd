#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "amflow/amf.hpp"
#include "amflow/attention.hpp"
#include "amflow/autodiff.hpp"
#include "amflow/guidance.hpp"
#include "amflow/synth.hpp"

namespace amflow {

// ---------------------------------------------------------------- toy denoiser
//
// Clean-data prediction is the posterior mean over a small family of motion
// hypotheses for the content target: within each b x b block, frame f of
// hypothesis m is the content circularly shifted by f*m, m in [-R, R]^2.
// Block evidence is the Gaussian log-likelihood of the signal part of the
// latent (x - sigma*eps0) at noise level sigma, optionally pooled over
// neighbouring blocks, plus a log-prior `kappa` on the static hypothesis.
// With no guidance the static hypothesis wins and the sampler reproduces the
// content target exactly.

struct DenoiserParams {
    std::size_t block = 4;
    int radius = 1;
    double kappa = 0.25;
    double beta = 0.5;
    int pool = 1;
};

class HypothesisDenoiser {
public:
    HypothesisDenoiser(const LatentVideo& content, Tensor eps0, const DenoiserParams& p) : p_(p), eps0_(std::move(eps0)) {
        content.validate();
        const std::size_t F = content.frames(), C = content.channels(), h = content.height(), w = content.width();
        if (p.block == 0 || h % p.block || w % p.block)
            throw std::invalid_argument("denoiser: block size must divide the grid");
        if (p.radius < 0) throw std::invalid_argument("denoiser: hypothesis radius must be >= 0");
        if (!(p.beta > 0)) throw std::invalid_argument("denoiser: beta must be positive");
        if (p.pool < 0) throw std::invalid_argument("denoiser: pool radius must be >= 0");
        if (eps0_.shape != content.values.shape) throw std::invalid_argument("denoiser: noise shape differs");
        shape_ = content.values.shape;
        by_ = h / p.block;
        bx_ = w / p.block;
        blocks_ = by_ * bx_;
        len_ = F * C * p.block * p.block;

        velocities_.push_back({0, 0});
        for (int vy = -p.radius; vy <= p.radius; ++vy)
            for (int vx = -p.radius; vx <= p.radius; ++vx)
                if (vy || vx) velocities_.push_back({vy, vx});
        const std::size_t M = velocities_.size();

        // block-major gather: element l of block n
        block_index_.resize(blocks_ * len_);
        for (std::size_t n = 0; n < blocks_; ++n) {
            const std::size_t y0 = (n / bx_) * p.block, x0 = (n % bx_) * p.block;
            std::size_t l = 0;
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t y = 0; y < p.block; ++y)
                        for (std::size_t x = 0; x < p.block; ++x)
                            block_index_[n * len_ + l++] = ((f * C + c) * h + y0 + y) * w + x0 + x;
        }
        unblock_index_.resize(blocks_ * len_);
        for (std::size_t k = 0; k < block_index_.size(); ++k) unblock_index_[block_index_[k]] = k;

        bank_ = Tensor(Shape{blocks_, M, len_});
        sqnorm_ = Tensor(Shape{blocks_, M});
        for (std::size_t m = 0; m < M; ++m) {
            const LatentVideo vm = shifted(content, velocities_[m]);
            for (std::size_t n = 0; n < blocks_; ++n) {
                double s2 = 0.0;
                for (std::size_t l = 0; l < len_; ++l) {
                    const double v = vm.values[block_index_[n * len_ + l]];
                    bank_[(n * M + m) * len_ + l] = v;
                    s2 += v * v;
                }
                sqnorm_[n * M + m] = s2;
            }
        }
        // pooling matrix over the block grid (clamped neighbourhood)
        pool_ = Tensor(Shape{blocks_, blocks_});
        for (std::size_t a = 0; a < blocks_; ++a)
            for (std::size_t b = 0; b < blocks_; ++b) {
                const long dy = long(a / bx_) - long(b / bx_), dx = long(a % bx_) - long(b % bx_);
                if (std::abs(dy) <= p.pool && std::abs(dx) <= p.pool) pool_[a * blocks_ + b] = 1.0;
            }
    }

    const std::vector<std::array<int, 2>>& velocities() const { return velocities_; }
    std::size_t blocks() const { return blocks_; }
    const Tensor& noise() const { return eps0_; }

    // Posterior-mean clean estimate on the tape; `posterior` receives (blocks, M).
    Var predict(Tape& tape, Var x, double sigma, Tensor* posterior = nullptr) const {
        const std::size_t M = velocities_.size();
        const double a = 1.0 - sigma;
        Var sig = tape.sub(x, tape.constant(scaled(eps0_, sigma)));
        Var sb = tape.gather(sig, block_index_, Shape{blocks_, len_});
        Var logits = tape.scale(tape.contract_last(tape.constant(bank_), sb), p_.beta * a / (sigma * sigma));
        Tensor bias(Shape{blocks_, M});
        for (std::size_t k = 0; k < bias.size(); ++k) bias[k] = -p_.beta * a * a * sqnorm_[k] / (2.0 * sigma * sigma);
        logits = tape.add(logits, tape.constant(bias));
        if (p_.pool > 0) logits = tape.matmul(tape.constant(pool_), logits);
        Tensor prior(Shape{blocks_, M});
        for (std::size_t n = 0; n < blocks_; ++n) prior[n * M] = p_.kappa;
        Var pi = tape.softmax_last(tape.add(logits, tape.constant(prior)));
        if (posterior) *posterior = tape.value(pi);
        Var db = tape.contract_mid(pi, tape.constant(bank_));
        return tape.gather(tape.reshape(db, Shape{blocks_ * len_}), unblock_index_, shape_);
    }

    Tensor predict(const Tensor& x, double sigma, Tensor* posterior = nullptr) const {
        Tape tape;
        return tape.value(predict(tape, tape.constant(x), sigma, posterior));
    }

private:
    DenoiserParams p_;
    Tensor eps0_;
    Shape shape_;
    std::size_t by_ = 0, bx_ = 0, blocks_ = 0, len_ = 0;
    std::vector<std::array<int, 2>> velocities_;
    std::vector<std::size_t> block_index_, unblock_index_;
    Tensor bank_, sqnorm_, pool_;

    static Tensor scaled(const Tensor& t, double c) {
        Tensor o(t.shape);
        for (std::size_t k = 0; k < t.size(); ++k) o[k] = c * t[k];
        return o;
    }

    static LatentVideo shifted(const LatentVideo& v, std::array<int, 2> m) {
        const std::size_t F = v.frames(), C = v.channels(), h = v.height(), w = v.width();
        LatentVideo out(F, C, h, w);
        for (std::size_t f = 0; f < F; ++f) {
            const long sy = long(m[0]) * long(f), sx = long(m[1]) * long(f);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x) {
                        const std::size_t yy = std::size_t(((long(y) - sy) % long(h) + long(h)) % long(h));
                        const std::size_t xx = std::size_t(((long(x) - sx) % long(w) + long(w)) % long(w));
                        out.at(f, c, y, x) = v.at(f, c, yy, xx);
                    }
        }
        return out;
    }
};

// One step of the linear-interpolant sampler from sigma_t to sigma_{t+1}
// given a clean prediction d: eps_hat = (x - (1-sigma) d)/sigma.
inline Tensor interpolant_step(const Tensor& x, const Tensor& d, std::size_t t, const Schedule& sched) {
    const double s0 = sched.sigma(t), s1 = sched.sigma(t + 1);
    Tensor out(x.shape);
    if (s0 == 0.0) {
        out = d;  // endpoint: nothing left to remove
        return out;
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double eps = (x[k] - (1.0 - s0) * d[k]) / s0;
        out[k] = x[k] + (s0 - s1) * (d[k] - eps);
    }
    return out;
}

inline Tensor toy_denoise_step(const Tensor& x, std::size_t t, const HypothesisDenoiser& den, const Schedule& sched) {
    if (t >= sched.T) throw std::out_of_range("toy_denoise_step: t outside [0, T)");
    return interpolant_step(x, den.predict(x, sched.sigma(t)), t, sched);
}

// ---------------------------------------------------------------- jobs

struct TransferJob {
    LatentVideo reference;
    LatentVideo content_target;
    std::size_t outer_steps = 50;
    double guided_fraction = 0.2;
    std::uint64_t seed = 0;
    GuidanceConfig guidance{};
    LossWeights loss{};
    ProjectionParams projection{};
    PlanParams plan{};
    std::size_t tile = 4, tile_stride = 4;
    DenoiserParams denoiser{};
    bool windows_from_reference = true;  // generated side reuses the reference's corresponding windows
    bool keep_gradients = false;

    std::size_t guided_steps() const {
        return std::size_t(std::ceil(guided_fraction * double(outer_steps) - 1e-12));
    }

    void validate() const {
        reference.validate();
        content_target.validate();
        if (!(guided_fraction > 0.0 && guided_fraction <= 1.0)) throw std::invalid_argument("guided_fraction must lie in (0, 1]");
        if (outer_steps < 1) throw std::invalid_argument("outer_steps must be >= 1");
        const auto& a = reference.values.shape;
        const auto& b = content_target.values.shape;
        if (a != b) throw std::invalid_argument("reference and content target grids differ");
        guidance.validate();
        loss.validate();
        validate_window_side(plan.side, reference.height(), reference.width());
    }
};

struct CacheEntry {
    double sigma = 0.0;
    MotionFlow flow;
    WindowPlan plan;
};

struct ReferenceCache {
    std::vector<CacheEntry> entries;
    ScoreCounter ops;
};

// Guided step k reads the reference at noise level k/T, so entry 0 is the
// clean reference.
inline ReferenceCache invert_reference(const LatentVideo& reference, const TransferJob& job, const Projection& pr,
                                       const TileGrid& tiles) {
    ReferenceCache cache;
    const Schedule sched{job.outer_steps};
    for (std::size_t k = 0; k < job.guided_steps(); ++k) {
        const std::size_t t_index = job.outer_steps - k;
        const LatentVideo noised = add_inversion_noise(reference, t_index, sched, job.seed);
        const AttentionContext ctx = project_qk(noised, pr);
        CacheEntry e;
        e.sigma = sched.sigma(t_index);
        e.plan = make_window_plan(ctx, tiles, job.plan, &cache.ops);
        e.flow = extract_amf_windowed(ctx, e.plan, FlowMode::hard, &cache.ops);
        cache.entries.push_back(std::move(e));
    }
    return cache;
}

struct Fidelity {
    double mean_epe = 0.0;
    double cosine = 1.0;
    bool degenerate = false;
};

inline Fidelity motion_fidelity(const MotionFlow& gen, const MotionFlow& ref) {
    require_same_coverage(gen, ref, "motion_fidelity");
    Fidelity f;
    const std::size_t n = gen.pairs.size() * gen.tiles;
    double cos_sum = 0.0;
    std::size_t cos_n = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double gy = gen.delta[2 * k], gx = gen.delta[2 * k + 1];
        const double ry = ref.delta[2 * k], rx = ref.delta[2 * k + 1];
        f.mean_epe += std::hypot(gy - ry, gx - rx);
        const double ng = std::hypot(gy, gx), nr = std::hypot(ry, rx);
        if (ng > 0 && nr > 0) {
            cos_sum += (gy * ry + gx * rx) / (ng * nr);
            ++cos_n;
        }
    }
    f.mean_epe = n ? f.mean_epe / double(n) : 0.0;
    if (cos_n) {
        f.cosine = cos_sum / double(cos_n);
    } else {
        f.cosine = 1.0;
        f.degenerate = true;
    }
    return f;
}

struct GuidedStepReport {
    std::size_t t = 0;
    double sigma_ref = 0.0;
    double loss_first = 0.0, loss_last = 0.0;
    std::size_t computed = 0, reused = 0;
    std::vector<TraceRow> trace;
    SimilarityMatrix similarity;   // cosine similarity of the gradients computed in this step
    double median_adjacent = std::nan("");
};

struct TransferReport {
    std::vector<GuidedStepReport> guided;
    std::size_t gradient_computations = 0, evaluator_calls = 0;
    ScoreCounter reference_ops, generated_ops, evaluation_ops;
    std::uint64_t expected_generated_windowed_ops = 0;  // from the plans actually used
    double final_amf = 0.0, final_amf_soft = 0.0;
    Fidelity fidelity;
    double max_abs_from_content = 0.0;
    double wall_seconds = 0.0;
    std::vector<Tensor> gradients;  // every computed gradient when kept
};

struct TransferResult {
    LatentVideo generated;
    MotionFlow generated_flow, reference_flow;
    TransferReport report;
};

inline TransferResult run_transfer(const TransferJob& job) {
    job.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const LatentVideo& ref = job.reference;
    const std::size_t C = ref.channels(), h = ref.height(), w = ref.width();
    const Projection pr = make_projection(C, job.projection);
    const TileGrid tiles = make_tile_grid(h, w, job.tile, job.tile, job.tile_stride, job.tile_stride);
    const Schedule sched{job.outer_steps};

    TransferResult res;
    TransferReport& rep = res.report;
    const ReferenceCache cache = invert_reference(ref, job, pr, tiles);
    rep.reference_ops = cache.ops;

    Engine eng = make_engine(job.seed, "sampler");
    Tensor x = gaussian(ref.values.shape, eng);
    const HypothesisDenoiser den(job.content_target, x, job.denoiser);

    for (std::size_t t = 0; t < job.outer_steps; ++t) {
        const double sigma = sched.sigma(t);
        if (t < cache.entries.size()) {
            const CacheEntry& e = cache.entries[t];
            WindowPlan gen_plan = e.plan;
            if (!job.windows_from_reference) {
                const LatentVideo cur(den.predict(x, sigma));
                gen_plan = make_window_plan(project_qk(cur, pr), tiles, job.plan, &rep.generated_ops);
            }
            const WindowGather g = make_window_gather(gen_plan, pr.head_dim);
            LossEvaluator eval = [&](const Tensor& lat, Tensor& grad) {
                Tape tape;
                Var xv = tape.leaf(lat);
                Var d = den.predict(tape, xv, sigma);
                const TotalLoss L = total_loss(tape, e.flow, project_qk(tape, d, pr), gen_plan, g, pr.score_scale(),
                                               job.loss, &rep.generated_ops);
                tape.backward(L.total);
                grad = tape.grad(xv);
                return L.parts.total;
            };
            InnerResult ir = inner_optimize(x, eval, job.guidance, true);
            x = std::move(ir.latent);
            GuidedStepReport gs;
            gs.t = t;
            gs.sigma_ref = e.sigma;
            gs.computed = ir.cache.compute_count;
            gs.reused = ir.cache.reuse_count;
            bool first = true;
            for (const auto& row : ir.trace)
                if (row.computed) {
                    if (first) gs.loss_first = row.loss;
                    first = false;
                    gs.loss_last = row.loss;
                }
            gs.trace = ir.trace;
            rep.gradient_computations += ir.cache.compute_count;
            rep.evaluator_calls += ir.evaluator_calls;
            rep.expected_generated_windowed_ops += ir.evaluator_calls * gen_plan.score_ops();
            gs.similarity = gradient_similarity_diag(ir.gradients);
            gs.median_adjacent = median_adjacent_similarity(gs.similarity);
            if (job.keep_gradients)
                for (auto& gr : ir.gradients) rep.gradients.push_back(std::move(gr));
            rep.guided.push_back(std::move(gs));
        }
        x = toy_denoise_step(x, t, den, sched);
        if (!x.all_finite()) throw NumericalFailure("run_transfer: non-finite latent after step " + std::to_string(t), {});
    }
    res.generated = LatentVideo(x);

    // Evaluation: hard flows of clean reference and generated video, each on
    // its own argmax windows.
    const AttentionContext rctx = project_qk(ref, pr);
    const WindowPlan rplan = make_window_plan(rctx, tiles, job.plan, &rep.evaluation_ops);
    res.reference_flow = extract_amf_windowed(rctx, rplan, FlowMode::hard, &rep.evaluation_ops);
    const AttentionContext gctx = project_qk(res.generated, pr);
    const WindowPlan gplan = make_window_plan(gctx, tiles, job.plan, &rep.evaluation_ops);
    res.generated_flow = extract_amf_windowed(gctx, gplan, FlowMode::hard, &rep.evaluation_ops);
    rep.final_amf = amf_loss(res.reference_flow, res.generated_flow, job.plan.span, job.loss.alpha);
    rep.final_amf_soft = amf_loss(res.reference_flow, extract_amf_windowed(gctx, rplan, FlowMode::soft),
                                  job.plan.span, job.loss.alpha);
    rep.fidelity = motion_fidelity(res.generated_flow, res.reference_flow);
    rep.max_abs_from_content = max_abs_diff(x, job.content_target.values);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace amflow
