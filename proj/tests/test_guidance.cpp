#include <gtest/gtest.h>

#include <cmath>

#include "amflow/guidance.hpp"
#include "amflow/rng.hpp"

using namespace amflow;

namespace {

// L = 0.5 * |x - target|^2
LossEvaluator quadratic(const Tensor& target, std::size_t* calls = nullptr) {
    return [target, calls](const Tensor& x, Tensor& g) {
        if (calls) ++*calls;
        g = Tensor(x.shape);
        double l = 0;
        for (std::size_t k = 0; k < x.size(); ++k) {
            g[k] = x[k] - target[k];
            l += 0.5 * g[k] * g[k];
        }
        return l;
    };
}

double half_sq_dist(const Tensor& a, const Tensor& b) {
    double l = 0;
    for (std::size_t k = 0; k < a.size(); ++k) l += 0.5 * (a[k] - b[k]) * (a[k] - b[k]);
    return l;
}

}  // namespace

TEST(Schedule, LearningRateEndpointsAndMidpoint) {
    EXPECT_EQ(lr_at(0, 10, 0.003, 0.002), 0.003);
    EXPECT_NEAR(lr_at(9, 10, 0.003, 0.002), 0.002, 1e-18);
    EXPECT_NEAR(lr_at(3, 7, 0.003, 0.002), 0.0025, 1e-18);
    EXPECT_EQ(lr_at(0, 1, 0.003, 0.002), 0.003);
    EXPECT_THROW(lr_at(10, 10, 0.003, 0.002), std::out_of_range);
    EXPECT_THROW(lr_at(0, 0, 0.003, 0.002), std::out_of_range);
    for (std::size_t j = 1; j < 10; ++j) EXPECT_LT(lr_at(j, 10, 0.003, 0.002), lr_at(j - 1, 10, 0.003, 0.002));
}

TEST(Schedule, GradientRecomputeSteps) {
    std::vector<std::size_t> on;
    for (std::size_t j = 0; j < 10; ++j)
        if (should_compute_gradient(j, 3, false)) on.push_back(j);
    EXPECT_EQ(on, (std::vector<std::size_t>{0, 3, 6, 9}));
    for (std::size_t j = 0; j < 10; ++j) EXPECT_TRUE(should_compute_gradient(j, 3, true));
    EXPECT_THROW(should_compute_gradient(0, 0, false), std::invalid_argument);
    EXPECT_EQ(gradient_computations(10, 3), 4u);
    EXPECT_EQ(gradient_computations(10, 1), 10u);
    EXPECT_EQ(gradient_computations(10, 10), 1u);
    EXPECT_EQ(gradient_computations(10, 20), 1u);
}

TEST(AdamW, FirstTwoStepsByHand) {
    GuidanceConfig c;
    Tensor x(Shape{3});
    x.data = {1.0, -2.0, 0.5};
    const Tensor x0 = x;
    Tensor g1(Shape{3}), g2(Shape{3});
    g1.data = {0.4, -1.0, 0.0};
    g2.data = {-0.2, 0.3, 2.0};
    AdamState st;
    adamw_step(x, g1, st, 0.003, c);
    for (std::size_t k = 0; k < 3; ++k) {
        // bias-corrected first step: m_hat = g, v_hat = g^2
        const double dec = x0[k] - 0.003 * 0.01 * x0[k];
        EXPECT_NEAR(x[k], dec - 0.003 * g1[k] / (std::abs(g1[k]) + 1e-8), 1e-15);
    }
    const Tensor x1 = x;
    adamw_step(x, g2, st, 0.002, c);
    EXPECT_EQ(st.t, 2u);
    for (std::size_t k = 0; k < 3; ++k) {
        const double m = 0.9 * 0.1 * g1[k] + 0.1 * g2[k];
        const double v = 0.999 * 0.001 * g1[k] * g1[k] + 0.001 * g2[k] * g2[k];
        const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
        const double want = x1[k] - 0.002 * 0.01 * x1[k] - 0.002 * mh / (std::sqrt(vh) + 1e-8);
        EXPECT_NEAR(x[k], want, 1e-15);
    }
    Tensor bad(Shape{2});
    EXPECT_THROW(adamw_step(x, bad, st, 0.1, c), std::invalid_argument);
}

TEST(InnerLoop, ComputeAndReuseCounts) {
    Tensor target(Shape{4}, 1.0), x(Shape{4});
    std::size_t calls = 0;
    GuidanceConfig c;
    const auto r = inner_optimize(x, quadratic(target, &calls), c, true);
    EXPECT_EQ(calls, 4u);
    EXPECT_EQ(r.evaluator_calls, 4u);
    EXPECT_EQ(r.cache.compute_count, 4u);
    EXPECT_EQ(r.cache.reuse_count, 6u);
    EXPECT_EQ(r.cache.last_computed_step, 9);
    EXPECT_EQ(r.gradients.size(), 4u);
    ASSERT_EQ(r.trace.size(), 10u);
    for (const auto& row : r.trace) {
        EXPECT_EQ(row.computed, row.step % 3 == 0);
        EXPECT_EQ(std::isnan(row.loss), !row.computed);
        EXPECT_EQ(row.lr, lr_at(row.step, 10, 0.003, 0.002));
    }
    c.force_full_gradients = true;
    calls = 0;
    EXPECT_EQ(inner_optimize(x, quadratic(target, &calls), c).cache.reuse_count, 0u);
    EXPECT_EQ(calls, 10u);
}

TEST(InnerLoop, SkipOneMatchesForcedFullBitwise) {
    Engine e = make_engine(3, "test");
    const Tensor target = gaussian(Shape{16}, e);
    const Tensor x = gaussian(Shape{16}, e);
    GuidanceConfig a;
    a.skip = 1;
    GuidanceConfig b;
    b.force_full_gradients = true;
    EXPECT_TRUE(bit_equal(inner_optimize(x, quadratic(target), a).latent, inner_optimize(x, quadratic(target), b).latent));
}

TEST(InnerLoop, FreshGradientsDoNotLoseToStaleOnes) {
    // Target close to the start, so a stale gradient overshoots.
    Tensor x(Shape{8}), target(Shape{8});
    for (std::size_t k = 0; k < 8; ++k) target[k] = 0.004 * (k % 2 ? 1.0 : -1.0);
    GuidanceConfig c;
    c.weight_decay = 0;
    c.skip = 1;
    const double l1 = half_sq_dist(inner_optimize(x, quadratic(target), c).latent, target);
    c.skip = 10;
    const double l10 = half_sq_dist(inner_optimize(x, quadratic(target), c).latent, target);
    EXPECT_LT(l1, l10);
}

TEST(InnerLoop, FrozenMomentsRepeatTheCachedDirection) {
    Engine e = make_engine(5, "test");
    const Tensor target = gaussian(Shape{6}, e);
    const Tensor x = gaussian(Shape{6}, e);
    GuidanceConfig c;
    c.weight_decay = 0;
    c.skip = 10;
    c.moments_on_reuse = false;
    const auto r = inner_optimize(x, quadratic(target), c);
    // with frozen moments every update is -lr_j * u for one fixed u, so the
    // total displacement is -sum(lr_j) * u and u comes from the first gradient
    double lr_sum = 0;
    for (std::size_t j = 0; j < 10; ++j) lr_sum += lr_at(j, 10, 0.003, 0.002);
    Tensor g;
    quadratic(target)(x, g);
    for (std::size_t k = 0; k < 6; ++k) {
        const double u = g[k] / (std::abs(g[k]) + 1e-8);
        EXPECT_NEAR(r.latent[k], x[k] - lr_sum * u, 1e-13);
    }
    c.moments_on_reuse = true;
    EXPECT_FALSE(bit_equal(inner_optimize(x, quadratic(target), c).latent, r.latent));
}

TEST(InnerLoop, DeterministicAndFailsLoudlyOnNaN) {
    Engine e = make_engine(6, "test");
    const Tensor target = gaussian(Shape{5}, e);
    const Tensor x = gaussian(Shape{5}, e);
    GuidanceConfig c;
    EXPECT_TRUE(bit_equal(inner_optimize(x, quadratic(target), c).latent, inner_optimize(x, quadratic(target), c).latent));

    std::size_t n = 0;
    const LossEvaluator bad = [&](const Tensor& v, Tensor& g) {
        g = Tensor(v.shape, 0.1);
        return ++n == 3 ? std::nan("") : 1.0;
    };
    try {
        inner_optimize(x, bad, c);
        FAIL() << "expected NumericalFailure";
    } catch (const NumericalFailure& f) {
        ASSERT_EQ(f.trace.size(), 7u);  // steps 0..6, failing at the third evaluation
        EXPECT_EQ(f.trace.back().step, 6u);
        EXPECT_TRUE(std::isnan(f.trace.back().loss));
    }
    GuidanceConfig z;
    z.skip = 0;
    EXPECT_THROW(inner_optimize(x, quadratic(target), z), std::invalid_argument);
    z = GuidanceConfig{};
    z.lr_start = 0.001;
    EXPECT_THROW(z.validate(), std::invalid_argument);
}

TEST(Similarity, MatrixAndMedian) {
    Tensor a(Shape{3});
    a.data = {1, 2, 2};
    Tensor b = a, c = a, z(Shape{3});
    for (auto& v : b.data) v *= 2;
    for (auto& v : c.data) v *= -1;
    const auto m = gradient_similarity_diag({a, b, c, z});
    ASSERT_EQ(m.n, 4u);
    EXPECT_NEAR(m.at(0, 1), 1.0, 1e-15);
    EXPECT_NEAR(m.at(1, 2), -1.0, 1e-15);
    EXPECT_EQ(m.at(2, 3), 0.0);
    EXPECT_TRUE(m.zero_rows[3]);
    EXPECT_FALSE(m.zero_rows[0]);
    for (double v : m.values) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.at(i, j), m.at(j, i));
    EXPECT_EQ(median_adjacent_similarity(m), 0.0);  // {1, -1, 0}
    EXPECT_NEAR(median_adjacent_similarity(gradient_similarity_diag({a, b, b})), 1.0, 1e-15);
    EXPECT_TRUE(std::isnan(median_adjacent_similarity(gradient_similarity_diag({a}))));
}
