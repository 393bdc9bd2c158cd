#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "amflow/pipeline.hpp"

using namespace amflow;

namespace {

// Static video of a layered texture, the kind of content the tool generates.
LatentVideo layered_static(std::size_t F, std::size_t C, std::size_t h, std::size_t w, std::uint64_t seed,
                           double amplitude = 3.0) {
    Engine e = make_engine(seed, "content");
    LayeredTextureParams p;
    p.amplitude = amplitude;
    return translate_image(make_layered_texture(C, h, w, e, p), F, {0, 0});
}

TransferJob small_job(std::uint64_t seed = 3) {
    TransferJob j;
    j.reference = generate_translating(5, 4, 16, 16, {0, 1}, 40).video;
    j.content_target = layered_static(5, 4, 16, 16, 41);
    j.outer_steps = 10;
    j.guided_fraction = 0.2;
    j.seed = seed;
    j.projection.head_dim = 4;
    j.plan = PlanParams{2, 5, CenterMode::argmax};
    return j;
}

Tensor noise_like(const LatentVideo& v, std::uint64_t seed) {
    Engine e = make_engine(seed, "test");
    return gaussian(v.values.shape, e);
}

}  // namespace

TEST(Sampler, StaysOnTheInterpolantForAConsistentPrediction) {
    const Schedule s{20};
    Engine e = make_engine(1, "test");
    const Tensor c = gaussian(Shape{2, 3}, e), eps = gaussian(Shape{2, 3}, e);
    for (std::size_t t : {0u, 7u, 19u}) {
        Tensor x(c.shape);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] = (1 - s.sigma(t)) * c[k] + s.sigma(t) * eps[k];
        const Tensor y = interpolant_step(x, c, t, s);
        for (std::size_t k = 0; k < x.size(); ++k)
            EXPECT_NEAR(y[k], (1 - s.sigma(t + 1)) * c[k] + s.sigma(t + 1) * eps[k], 1e-12);
    }
}

TEST(Denoiser, HypothesesAndValidation) {
    const auto c = generate_translating(3, 2, 8, 8, {0, 0}, 1).video;
    const HypothesisDenoiser d(c, noise_like(c, 2), DenoiserParams{4, 1, 0.25, 0.5, 1});
    ASSERT_EQ(d.velocities().size(), 9u);
    EXPECT_EQ(d.velocities()[0][0], 0);
    EXPECT_EQ(d.velocities()[0][1], 0);
    EXPECT_EQ(d.blocks(), 4u);
    EXPECT_THROW(HypothesisDenoiser(c, noise_like(c, 2), DenoiserParams{3, 1, 0, 1, 0}), std::invalid_argument);
    EXPECT_THROW(HypothesisDenoiser(c, Tensor(Shape{3, 2, 8, 9}), DenoiserParams{}), std::invalid_argument);
    EXPECT_THROW(HypothesisDenoiser(c, noise_like(c, 2), DenoiserParams{4, 1, 0, 0, 0}), std::invalid_argument);
}

TEST(Denoiser, PosteriorIsADistributionFavouringTheTruth) {
    const auto c = layered_static(4, 4, 16, 16, 5);
    const Tensor eps = noise_like(c, 6);
    const HypothesisDenoiser d(c, eps, DenoiserParams{});
    for (double sigma : {0.9, 0.5, 0.1}) {
        Tensor x(c.values.shape);
        for (std::size_t k = 0; k < x.size(); ++k) x[k] = (1 - sigma) * c.values[k] + sigma * eps[k];
        Tensor post;
        const Tensor out = d.predict(x, sigma, &post);
        const std::size_t M = d.velocities().size();
        for (std::size_t b = 0; b < d.blocks(); ++b) {
            double s = 0;
            std::size_t best = 0;
            for (std::size_t m = 0; m < M; ++m) {
                s += post[b * M + m];
                if (post[b * M + m] > post[b * M + best]) best = m;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
            EXPECT_EQ(best, 0u);
        }
        if (sigma < 0.2) {
            EXPECT_LT(max_abs_diff(out, c.values), 1e-6);
        }
    }
}

TEST(Denoiser, TapeMatchesPlainAndDifferentiates) {
    // low amplitude keeps the posterior away from saturation
    const auto c = layered_static(2, 2, 16, 16, 7, 0.1);
    const HypothesisDenoiser d(c, noise_like(c, 8), DenoiserParams{4, 1, 0.25, 0.5, 1});
    const Tensor x = noise_like(c, 9), r = noise_like(c, 10);
    Tape t;
    EXPECT_TRUE(bit_equal(t.value(d.predict(t, t.constant(x), 0.6)), d.predict(x, 0.6)));
    Tensor post;
    d.predict(x, 0.6, &post);
    EXPECT_LT(*std::max_element(post.data.begin(), post.data.end()), 0.9);

    const LossBuilder f = [&](Tape& tp, Var v) { return tp.sum(tp.mul(d.predict(tp, v, 0.6), tp.constant(r))); };
    const Tensor g = eval_gradient(f, x);
    const std::size_t frame = x.size() / 2;
    // frame 0 looks the same under every velocity hypothesis, so it only
    // shifts all logits together and the softmax cancels it
    for (std::size_t k = 0; k < frame; ++k) EXPECT_LT(std::abs(g[k]), 1e-12);
    Tensor xp = x;
    const double h = 1e-4;
    for (std::size_t k = frame; k < x.size(); k += 7) {
        xp[k] = x[k] + h;
        const double lp = eval_loss(f, xp);
        xp[k] = x[k] - h;
        const double lm = eval_loss(f, xp);
        xp[k] = x[k];
        const double num = (lp - lm) / (2 * h);
        EXPECT_LT(std::abs(num - g[k]) / std::max(std::abs(g[k]), 1e-3), 1e-5) << k;
    }
}

TEST(Sampler, UnguidedRunReproducesTheContent) {
    const Schedule s{50};
    for (std::uint64_t seed : {0u, 1u, 2u, 3u}) {
        const auto c = layered_static(5, 4, 16, 16, seed);
        Tensor x = noise_like(c, 12 + seed);
        const HypothesisDenoiser d(c, x, DenoiserParams{});
        for (std::size_t t = 0; t < 50; ++t) x = toy_denoise_step(x, t, d, s);
        EXPECT_LT(max_abs_diff(x, c.values), 1e-9) << seed;
        EXPECT_THROW(toy_denoise_step(x, 50, d, s), std::out_of_range);
    }
}

TEST(Job, GuidedStepsAndValidation) {
    TransferJob j = small_job();
    EXPECT_EQ(j.guided_steps(), 2u);
    j.outer_steps = 50;
    EXPECT_EQ(j.guided_steps(), 10u);
    j.outer_steps = 7;
    j.guided_fraction = 0.5;
    EXPECT_EQ(j.guided_steps(), 4u);
    EXPECT_NO_THROW(j.validate());
    j.guided_fraction = 0;
    EXPECT_THROW(j.validate(), std::invalid_argument);
    j = small_job();
    j.plan.side = 6;
    EXPECT_THROW(j.validate(), std::invalid_argument);
    j = small_job();
    j.content_target = generate_translating(5, 4, 16, 8, {0, 0}, 1).video;
    EXPECT_THROW(j.validate(), std::invalid_argument);
}

TEST(ReferenceCache, NoiseLevelsAndCleanFirstEntry) {
    TransferJob j = small_job();
    j.outer_steps = 20;
    j.guided_fraction = 0.25;
    const auto pr = make_projection(4, j.projection);
    const auto tiles = make_tile_grid(16, 16);
    const auto cache = invert_reference(j.reference, j, pr, tiles);
    ASSERT_EQ(cache.entries.size(), 5u);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(cache.entries[k].sigma, double(k) / 20.0, 1e-15);
    const auto ctx = project_qk(j.reference, pr);
    const auto clean = extract_amf_windowed(ctx, make_window_plan(ctx, tiles, j.plan), FlowMode::hard);
    EXPECT_TRUE(bit_equal(cache.entries[0].flow.delta, clean.delta));
    EXPECT_GT(cache.ops.windowed, 0u);
    EXPECT_EQ(cache.ops.representative, 5u * 7u * 16u * 256u);
}

TEST(Fidelity, HandComputed) {
    const auto pairs = temporal_pairs(2, 1);
    MotionFlow g(pairs, 3, FlowMode::hard), r(pairs, 3, FlowMode::hard);
    g.set(0, 0, 3, 4);
    r.set(0, 0, 3, 0);   // epe 4, cos 0.6
    g.set(0, 1, 0, 1);
    r.set(0, 1, 0, -1);  // epe 2, cos -1
    // tile 2: both zero, skipped by cosine
    const auto f = motion_fidelity(g, r);
    EXPECT_NEAR(f.mean_epe, 2.0, 1e-15);
    EXPECT_NEAR(f.cosine, (0.6 - 1.0) / 2.0, 1e-15);
    EXPECT_FALSE(f.degenerate);
    const auto z = motion_fidelity(MotionFlow(pairs, 2, FlowMode::hard), MotionFlow(pairs, 2, FlowMode::hard));
    EXPECT_TRUE(z.degenerate);
    EXPECT_EQ(z.mean_epe, 0.0);
}

TEST(Transfer, CountsAndDeterminism) {
    TransferJob j = small_job();
    j.keep_gradients = true;
    const auto a = run_transfer(j);
    const auto& rep = a.report;
    ASSERT_EQ(rep.guided.size(), 2u);
    EXPECT_EQ(rep.gradient_computations, 2u * gradient_computations(10, 3));
    EXPECT_EQ(rep.evaluator_calls, rep.gradient_computations);
    EXPECT_EQ(rep.gradients.size(), rep.gradient_computations);
    EXPECT_EQ(rep.generated_ops.windowed, rep.expected_generated_windowed_ops);
    for (const auto& g : rep.guided) {
        EXPECT_EQ(g.computed, 4u);
        EXPECT_EQ(g.reused, 6u);
        EXPECT_EQ(g.similarity.n, 4u);
        EXPECT_EQ(g.trace.size(), 10u);
    }
    EXPECT_NEAR(rep.guided[1].sigma_ref, 0.1, 1e-15);
    EXPECT_TRUE(a.generated.values.all_finite());

    const auto b = run_transfer(j);
    EXPECT_TRUE(bit_equal(a.generated.values, b.generated.values));
    EXPECT_TRUE(bit_equal(a.generated_flow.delta, b.generated_flow.delta));
    EXPECT_EQ(rep.final_amf, b.report.final_amf);

    j.seed = 4;
    EXPECT_FALSE(bit_equal(run_transfer(j).generated.values, a.generated.values));
}

TEST(Transfer, ReplannedWindowsAreChargedAndCounted) {
    TransferJob j = small_job();
    j.windows_from_reference = false;
    const auto a = run_transfer(j);
    EXPECT_EQ(a.report.generated_ops.windowed, a.report.expected_generated_windowed_ops);
    // one argmax plan per guided step, each a representative pass over every pair
    EXPECT_EQ(a.report.generated_ops.representative, 2u * 7u * 16u * 256u);
    EXPECT_TRUE(a.generated.values.all_finite());
    EXPECT_EQ(small_job().windows_from_reference, true);
    EXPECT_EQ(run_transfer(small_job()).report.generated_ops.representative, 0u);
}
