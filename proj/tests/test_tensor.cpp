#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "amflow/autodiff.hpp"
#include "amflow/io.hpp"
#include "amflow/rng.hpp"
#include "amflow/tensor.hpp"

using namespace amflow;

namespace {

Tensor seeded(Shape s, std::uint64_t seed) {
    Engine e = make_engine(seed, "test");
    return gaussian(s, e);
}

// Central differences written out here so the tape is checked against
// something that does not share its code.
Tensor numeric_grad(const LossBuilder& f, const Tensor& x, double h = 1e-6) {
    Tensor g(x.shape);
    Tensor xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double o = xp[i];
        xp[i] = o + h;
        Tape a;
        const double lp = a.value(f(a, a.constant(xp)))[0];
        xp[i] = o - h;
        Tape b;
        const double lm = b.value(f(b, b.constant(xp)))[0];
        xp[i] = o;
        g[i] = (lp - lm) / (2 * h);
    }
    return g;
}

void expect_grad_matches(const LossBuilder& f, const Tensor& x, double tol = 1e-6) {
    const Tensor an = eval_gradient(f, x);
    const Tensor nu = numeric_grad(f, x);
    ASSERT_EQ(an.shape, x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(an[i], nu[i], tol * std::max(1.0, std::abs(nu[i]))) << i;
}

}  // namespace

TEST(Tensor, RowMajorOffsets) {
    Tensor t(Shape{2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(i);
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(t.at({a, b, c}), double((a * 3 + b) * 4 + c));
    EXPECT_THROW(t.at({2, 0, 0}), std::out_of_range);
    EXPECT_THROW(t.at({0, 0}), std::out_of_range);
}

TEST(Tensor, ConstructionValidatesLength) {
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
    EXPECT_EQ(Tensor(Shape{}).size(), 1u);  // scalar
    EXPECT_EQ(Tensor(Shape{0, 5}).size(), 0u);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
    const Tensor t = seeded({3, 4}, 1);
    const Tensor r = t.reshaped({2, 6});
    EXPECT_EQ(r.data, t.data);
    EXPECT_THROW(t.reshaped({5}), std::invalid_argument);
}

TEST(Tensor, FiniteChecks) {
    Tensor t(Shape{3}, 1.0);
    EXPECT_TRUE(t.all_finite());
    t[1] = std::nan("");
    EXPECT_FALSE(t.all_finite());
    EXPECT_THROW(require_finite(t, "x"), std::domain_error);
    Tape tape;
    EXPECT_THROW(tape.leaf(t), std::domain_error);
}

TEST(Rng, StreamsAreIndependentAndReproducible) {
    Engine a = make_engine(7, "texture"), b = make_engine(7, "texture"), c = make_engine(7, "noise");
    const auto x = a(), y = b(), z = c();
    EXPECT_EQ(x, y);
    EXPECT_NE(x, z);
    EXPECT_NE(stream_seed(7, "texture", 0), stream_seed(7, "texture", 1));
    EXPECT_NE(stream_seed(7, "texture"), stream_seed(8, "texture"));
    EXPECT_TRUE(bit_equal(seeded({5}, 3), seeded({5}, 3)));
}

TEST(Rng, GaussianMoments) {
    Engine e = make_engine(11, "moments");
    const Tensor g = gaussian({20000}, e);
    double m = 0, v = 0;
    for (double x : g.data) m += x;
    m /= double(g.size());
    for (double x : g.data) v += (x - m) * (x - m);
    v /= double(g.size());
    EXPECT_NEAR(m, 0.0, 0.03);
    EXPECT_NEAR(v, 1.0, 0.05);
}

TEST(Autodiff, ElementwiseGradients) {
    const Tensor x = seeded({7}, 2);
    const Tensor c = seeded({7}, 3);
    expect_grad_matches(
        [&](Tape& t, Var v) {
            Var k = t.constant(c);
            return t.sum(t.mul(t.add(t.scale(v, 1.5), k), t.sub(v, k)));
        },
        x);
    expect_grad_matches([&](Tape& t, Var v) { return t.squared_l2(v); }, x);
}

TEST(Autodiff, MatmulAgainstNaive) {
    const Tensor a = seeded({3, 4}, 4), b = seeded({4, 5}, 5), bt = seeded({5, 4}, 6);
    Tape t;
    const Tensor ab = t.value(t.matmul(t.constant(a), t.constant(b)));
    const Tensor abt = t.value(t.matmul(t.constant(a), t.constant(bt), true));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0, st = 0;
            for (std::size_t k = 0; k < 4; ++k) {
                s += a.at({i, k}) * b.at({k, j});
                st += a.at({i, k}) * bt.at({j, k});
            }
            EXPECT_NEAR(ab.at({i, j}), s, 1e-12);
            EXPECT_NEAR(abt.at({i, j}), st, 1e-12);
        }
    expect_grad_matches([&](Tape& tp, Var v) { return tp.squared_l2(tp.matmul(v, tp.constant(b))); }, a);
    expect_grad_matches([&](Tape& tp, Var v) { return tp.squared_l2(tp.matmul(tp.constant(a), v, false)); }, b);
    expect_grad_matches([&](Tape& tp, Var v) { return tp.squared_l2(tp.matmul(tp.constant(a), v, true)); }, bt);
}

TEST(Autodiff, ContractionsAgainstNaive) {
    const Tensor w = seeded({2, 3}, 7), x = seeded({2, 3, 4}, 8), v = seeded({2, 4}, 9);
    Tape t;
    const Tensor mid = t.value(t.contract_mid(t.constant(w), t.constant(x)));
    const Tensor last = t.value(t.contract_last(t.constant(x), t.constant(v)));
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t d = 0; d < 4; ++d) {
            double s = 0;
            for (std::size_t l = 0; l < 3; ++l) s += w.at({n, l}) * x.at({n, l, d});
            EXPECT_NEAR(mid.at({n, d}), s, 1e-12);
        }
        for (std::size_t m = 0; m < 3; ++m) {
            double s = 0;
            for (std::size_t l = 0; l < 4; ++l) s += x.at({n, m, l}) * v.at({n, l});
            EXPECT_NEAR(last.at({n, m}), s, 1e-12);
        }
    }
    expect_grad_matches([&](Tape& tp, Var a) { return tp.squared_l2(tp.contract_mid(a, tp.constant(x))); }, w);
    expect_grad_matches([&](Tape& tp, Var a) { return tp.squared_l2(tp.contract_mid(tp.constant(w), a)); }, x);
    expect_grad_matches([&](Tape& tp, Var a) { return tp.squared_l2(tp.contract_last(a, tp.constant(v))); }, x);
    expect_grad_matches([&](Tape& tp, Var a) { return tp.squared_l2(tp.contract_last(tp.constant(x), a)); }, v);
}

TEST(Autodiff, GatherScatterAccumulates) {
    const Tensor x = seeded({5}, 10);
    // index 2 read three times: its gradient must be the sum of three paths
    const std::vector<std::size_t> idx{2, 0, 2, 4, 2};
    Tape t;
    Var leaf = t.leaf(x);
    Var g = t.gather(leaf, idx, {5});
    t.backward(t.sum(g));
    const Tensor& gr = t.grad(leaf);
    EXPECT_EQ(gr[2], 3.0);
    EXPECT_EQ(gr[0], 1.0);
    EXPECT_EQ(gr[1], 0.0);
    EXPECT_EQ(gr[3], 0.0);
    EXPECT_EQ(gr[4], 1.0);
    EXPECT_THROW(t.gather(leaf, {9}, {1}), std::out_of_range);
    expect_grad_matches(
        [&](Tape& tp, Var a) { return tp.squared_l2(tp.gather(a, idx, {5})); }, x);
}

TEST(Autodiff, SoftmaxStableAndMasked) {
    // huge logits: naive exp would overflow
    Tensor big(Shape{1, 3}, std::vector<double>{1000.0, 1001.0, 999.0});
    const Tensor s = softmax_last_axis(big);
    const double z = std::exp(-1.0) + 1.0 + std::exp(-2.0);
    EXPECT_NEAR(s[0], std::exp(-1.0) / z, 1e-14);
    EXPECT_NEAR(s[1], 1.0 / z, 1e-14);
    EXPECT_NEAR(s[2], std::exp(-2.0) / z, 1e-14);

    const Tensor x = seeded({2, 4}, 12);
    const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 1, 0};
    Tape t;
    const Tensor p = t.value(t.softmax_last(t.constant(x), &mask));
    for (std::size_t r = 0; r < 2; ++r) {
        double sum = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            if (!mask[r * 4 + k]) EXPECT_EQ(p[r * 4 + k], 0.0);
            sum += p[r * 4 + k];
        }
        EXPECT_NEAR(sum, 1.0, 1e-14);
    }
    const Tensor c = seeded({2, 4}, 13);
    expect_grad_matches(
        [&](Tape& tp, Var a) { return tp.sum(tp.mul(tp.softmax_last(a, &mask), tp.constant(c))); }, x);

    const std::vector<std::uint8_t> dead{0, 0, 0, 0, 1, 1, 1, 1};
    EXPECT_THROW(t.softmax_last(t.constant(x), &dead), std::invalid_argument);
    EXPECT_THROW(softmax({1.0, std::numeric_limits<double>::infinity()}), std::invalid_argument);
}

TEST(Autodiff, BackwardRequiresScalar) {
    Tape t;
    Var v = t.leaf(seeded({3}, 14));
    EXPECT_THROW(t.backward(v), std::invalid_argument);
    Var c = t.constant(seeded({3}, 15));
    EXPECT_THROW(t.grad(c), std::logic_error);
}

TEST(Autodiff, ReshapeAndSumGradients) {
    const Tensor x = seeded({2, 3}, 16);
    expect_grad_matches([](Tape& t, Var v) { return t.squared_l2(t.reshape(v, {3, 2})); }, x);
    EXPECT_THROW(
        {
            Tape t;
            t.reshape(t.constant(x), {4});
        },
        std::invalid_argument);
}

TEST(GradCheck, DetectsAWrongGradient) {
    // Correct builder passes.
    const Tensor x = seeded({6}, 17);
    const auto ok = check_gradient([](Tape& t, Var v) { return t.squared_l2(t.scale(v, 2.0)); }, x, 1e-4);
    EXPECT_LT(ok.max_error, 1e-8);
    EXPECT_FALSE(ok.absolute);
    // Detached copy of the input: the tape sees x . c, the true gradient is 2x.
    const auto bad = check_gradient([](Tape& t, Var v) { return t.sum(t.mul(v, t.constant(t.value(v)))); }, x, 1e-4);
    EXPECT_NEAR(bad.max_error, 1.0, 1e-6);  // |x - 2x| / |x|
    EXPECT_THROW(check_gradient([](Tape& t, Var v) { return t.sum(v); }, x, 0.0), std::invalid_argument);
}

TEST(GradCheck, CoordinateSamplingIsSeeded) {
    const Tensor x = seeded({500}, 18);
    auto f = [](Tape& t, Var v) { return t.squared_l2(v); };
    const auto a = check_gradient(f, x, 1e-4, 5, 10);
    const auto b = check_gradient(f, x, 1e-4, 5, 10);
    EXPECT_EQ(a.coordinates, 10u);
    EXPECT_EQ(a.max_error, b.max_error);
}

TEST(Io, ContainerRoundTripIsBitExact) {
    Tensor t = seeded({2, 3, 4}, 19);
    t[0] = -0.0;
    t[1] = 1e-310;  // subnormal
    std::stringstream ss;
    write_tensor(ss, t);
    const Tensor r = read_tensor(ss);
    EXPECT_TRUE(bit_equal(t, r));
    EXPECT_TRUE(std::signbit(r[0]));
}

TEST(Io, ContainerLayoutIsLittleEndian) {
    std::stringstream ss;
    write_tensor(ss, Tensor(Shape{1}, std::vector<double>{1.0}));
    const std::string b = ss.str();
    ASSERT_EQ(b.size(), 4u + 4 + 4 + 8 + 8);
    EXPECT_EQ(b.substr(0, 4), "AMFT");
    EXPECT_EQ(b[4], 1);          // version
    EXPECT_EQ(b[8], 1);          // rank
    EXPECT_EQ(b[12], 1);         // extent
    EXPECT_EQ(static_cast<unsigned char>(b[27]), 0x3f);  // 1.0 = 0x3ff0..., high byte last
}

TEST(Io, RejectsCorruptInput) {
    std::stringstream bad("NOPE");
    EXPECT_THROW(read_tensor(bad), std::runtime_error);
    std::stringstream ss;
    write_tensor(ss, seeded({4}, 20));
    std::string s = ss.str();
    s.resize(s.size() - 3);
    std::stringstream trunc(s);
    EXPECT_THROW(read_tensor(trunc), std::runtime_error);
}

TEST(Io, PgmHeaderAndScaling) {
    const auto p = std::filesystem::temp_directory_path() / "amflow_test.pgm";
    save_pgm(p.string(), 2, 3, {0, 1, 2, 3, 4, 8}, 4.0);
    std::ifstream in(p, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    const std::string header = "P5\n3 2\n255\n";
    ASSERT_EQ(all.substr(0, header.size()), header);
    const std::string px = all.substr(header.size());
    ASSERT_EQ(px.size(), 6u);
    EXPECT_EQ(static_cast<unsigned char>(px[0]), 0);
    EXPECT_EQ(static_cast<unsigned char>(px[2]), 128);  // 2/4 * 255 rounded
    EXPECT_EQ(static_cast<unsigned char>(px[4]), 255);
    EXPECT_EQ(static_cast<unsigned char>(px[5]), 255);  // clipped
    EXPECT_THROW(save_pgm(p.string(), 2, 2, {1, 2, 3}, 1.0), std::invalid_argument);
}
