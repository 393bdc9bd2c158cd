#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "amflow/tensor.hpp"

namespace amflow {

struct GuidanceConfig {
    std::size_t inner_steps = 10;   // J
    std::size_t skip = 3;           // recompute the gradient every `skip` steps
    double lr_start = 0.003, lr_end = 0.002;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
    bool force_full_gradients = false;
    bool moments_on_reuse = true;

    void validate() const {
        if (inner_steps < 1) throw std::invalid_argument("inner_steps must be >= 1");
        if (skip < 1) throw std::invalid_argument("skip must be >= 1");
        if (!(lr_end > 0.0) || lr_start < lr_end) throw std::invalid_argument("need lr_start >= lr_end > 0");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in [0,1)");
        if (!(eps > 0)) throw std::invalid_argument("eps must be positive");
        if (weight_decay < 0) throw std::invalid_argument("weight_decay must be non-negative");
    }
};

inline double lr_at(std::size_t j, std::size_t J, double lr_start, double lr_end) {
    if (J == 0 || j >= J) throw std::out_of_range("lr_at: step " + std::to_string(j) + " outside [0, J)");
    if (J == 1) return lr_start;
    return lr_start + (lr_end - lr_start) * double(j) / double(J - 1);
}

inline bool should_compute_gradient(std::size_t j, std::size_t skip, bool force_full) {
    if (skip == 0) throw std::invalid_argument("skip must be >= 1");
    return force_full || j % skip == 0;
}

inline std::size_t gradient_computations(std::size_t J, std::size_t skip) { return (J + skip - 1) / skip; }

struct AdamState {
    Tensor m, v;
    std::size_t t = 0;  // completed updates
};

// Decoupled weight decay, bias-corrected moments.
inline void adamw_step(Tensor& x, const Tensor& g, AdamState& st, double lr, const GuidanceConfig& c,
                       bool update_moments = true) {
    if (x.shape != g.shape) throw std::invalid_argument("adamw_step: gradient shape differs from latent");
    if (st.m.size() != x.size()) {
        st.m = Tensor(x.shape);
        st.v = Tensor(x.shape);
        st.t = 0;
    }
    if (update_moments) {
        ++st.t;
        for (std::size_t k = 0; k < x.size(); ++k) {
            st.m[k] = c.beta1 * st.m[k] + (1 - c.beta1) * g[k];
            st.v[k] = c.beta2 * st.v[k] + (1 - c.beta2) * g[k] * g[k];
        }
    }
    const double bc1 = 1.0 - std::pow(c.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(c.beta2, double(st.t));
    for (std::size_t k = 0; k < x.size(); ++k) {
        x[k] -= lr * c.weight_decay * x[k];
        x[k] -= lr * (st.m[k] / bc1) / (std::sqrt(st.v[k] / bc2) + c.eps);
    }
}

struct GradientCache {
    Tensor g;
    long last_computed_step = -1;
    std::size_t compute_count = 0, reuse_count = 0;
    bool empty() const { return g.size() == 0; }
};

struct TraceRow {
    std::size_t step = 0;
    bool computed = false;
    double loss = std::nan("");
    double grad_norm = 0.0;
    double lr = 0.0;
    std::int64_t wall_time_ns = 0;
};

struct InnerResult {
    Tensor latent;
    GradientCache cache;
    std::vector<TraceRow> trace;
    std::vector<Tensor> gradients;  // every computed gradient, in order (kept when requested)
    std::size_t evaluator_calls = 0;
};

// Evaluates loss and gradient at a latent.
using LossEvaluator = std::function<double(const Tensor& latent, Tensor& grad)>;

struct NumericalFailure : std::runtime_error {
    std::vector<TraceRow> trace;
    NumericalFailure(const std::string& m, std::vector<TraceRow> t) : std::runtime_error(m), trace(std::move(t)) {}
};

inline InnerResult inner_optimize(Tensor latent, const LossEvaluator& eval, const GuidanceConfig& cfg,
                                  bool keep_gradients = false) {
    cfg.validate();
    InnerResult r;
    AdamState st;
    for (std::size_t j = 0; j < cfg.inner_steps; ++j) {
        const auto t0 = std::chrono::steady_clock::now();
        TraceRow row;
        row.step = j;
        row.lr = lr_at(j, cfg.inner_steps, cfg.lr_start, cfg.lr_end);
        const bool fresh = should_compute_gradient(j, cfg.skip, cfg.force_full_gradients);
        if (fresh) {
            Tensor g;
            row.loss = eval(latent, g);
            ++r.evaluator_calls;
            if (!std::isfinite(row.loss) || !g.all_finite()) {
                r.trace.push_back(row);
                throw NumericalFailure("inner_optimize: non-finite loss or gradient at step " + std::to_string(j), r.trace);
            }
            r.cache.g = std::move(g);
            r.cache.last_computed_step = long(j);
            ++r.cache.compute_count;
            if (keep_gradients) r.gradients.push_back(r.cache.g);
        } else {
            if (r.cache.empty()) throw std::logic_error("inner_optimize: reuse before any gradient was computed");
            ++r.cache.reuse_count;
        }
        row.computed = fresh;
        row.grad_norm = norm2(r.cache.g);
        adamw_step(latent, r.cache.g, st, row.lr, cfg, fresh || cfg.moments_on_reuse);
        row.wall_time_ns =
            std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
        r.trace.push_back(row);
    }
    r.latent = std::move(latent);
    return r;
}

struct SimilarityMatrix {
    std::size_t n = 0;
    std::vector<double> values;       // n x n
    std::vector<bool> zero_rows;
    double at(std::size_t a, std::size_t b) const { return values[a * n + b]; }
};

inline SimilarityMatrix gradient_similarity_diag(const std::vector<Tensor>& grads) {
    SimilarityMatrix m;
    m.n = grads.size();
    m.values.assign(m.n * m.n, 0.0);
    m.zero_rows.assign(m.n, false);
    std::vector<double> norms(m.n);
    for (std::size_t a = 0; a < m.n; ++a) {
        norms[a] = norm2(grads[a]);
        m.zero_rows[a] = norms[a] == 0.0;
    }
    for (std::size_t a = 0; a < m.n; ++a)
        for (std::size_t b = 0; b < m.n; ++b) {
            if (m.zero_rows[a] || m.zero_rows[b]) continue;
            m.values[a * m.n + b] = std::clamp(dot(grads[a], grads[b]) / (norms[a] * norms[b]), -1.0, 1.0);
        }
    return m;
}

inline double median_adjacent_similarity(const SimilarityMatrix& m) {
    if (m.n < 2) return std::nan("");
    std::vector<double> v;
    for (std::size_t a = 0; a + 1 < m.n; ++a) v.push_back(m.at(a, a + 1));
    std::sort(v.begin(), v.end());
    const std::size_t k = v.size();
    return k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
}

}  // namespace amflow
