#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "amflow/flow.hpp"
#include "amflow/rng.hpp"
#include "amflow/tensor.hpp"

namespace amflow {

// (F, C, h, w) latent grid.
struct LatentVideo {
    Tensor values;

    LatentVideo() = default;
    explicit LatentVideo(Tensor t) : values(std::move(t)) { validate(); }
    LatentVideo(std::size_t F, std::size_t C, std::size_t h, std::size_t w) : values(Shape{F, C, h, w}) { validate(); }

    std::size_t frames() const { return values.dim(0); }
    std::size_t channels() const { return values.dim(1); }
    std::size_t height() const { return values.dim(2); }
    std::size_t width() const { return values.dim(3); }
    std::size_t tokens() const { return height() * width(); }

    double& at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) {
        return values.data[((f * channels() + c) * height() + y) * width() + x];
    }
    double at(std::size_t f, std::size_t c, std::size_t y, std::size_t x) const {
        return values.data[((f * channels() + c) * height() + y) * width() + x];
    }

    void validate() const {
        if (values.rank() != 4) throw std::invalid_argument("latent video must be rank 4 (F,C,h,w)");
        if (values.dim(0) < 2) throw std::invalid_argument("latent video needs at least 2 frames");
        if (values.dim(1) == 0 || values.dim(2) == 0 || values.dim(3) == 0)
            throw std::invalid_argument("latent video: zero-area grid");
        require_finite(values, "latent video");
    }
};

struct Velocity {
    double vy = 0.0, vx = 0.0;
    bool integral() const { return vy == std::round(vy) && vx == std::round(vx); }
};

struct TextureBand {
    double lo = 0.2, hi = 0.5;  // band on max(|ky|/h, |kx|/w)
    int components = 12;
};

// Per-channel sum of random-phase sinusoids with integer frequencies, so the
// pattern tiles the torus exactly. Each token vector is rescaled to norm
// amplitude*sqrt(C); with an orthonormal projection this makes the self-match
// the strict score maximum.
inline Tensor band_texture(std::size_t C, std::size_t h, std::size_t w, Engine& eng, const TextureBand& band) {
    if (C == 0 || h == 0 || w == 0) throw std::invalid_argument("texture: zero-area grid");
    const int hy = static_cast<int>(h / 2), hx = static_cast<int>(w / 2);
    std::vector<std::array<int, 2>> freqs;
    for (int ky = -hy; ky <= hy; ++ky)
        for (int kx = -hx; kx <= hx; ++kx) {
            const double f = std::max(std::abs(ky) / double(h), std::abs(kx) / double(w));
            if (f >= band.lo && f <= band.hi) freqs.push_back({ky, kx});
        }
    if (freqs.empty()) throw std::invalid_argument("texture: frequency band is empty for this grid");
    std::uniform_int_distribution<std::size_t> pick(0, freqs.size() - 1);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    Tensor out(Shape{C, h, w});
    for (std::size_t c = 0; c < C; ++c)
        for (int k = 0; k < band.components; ++k) {
            const auto [ky, kx] = freqs[pick(eng)];
            const double ph = phase(eng);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    out[(c * h + y) * w + x] +=
                        std::cos(2.0 * std::numbers::pi * (ky * double(y) / h + kx * double(x) / w) + ph);
        }
    return out;
}

inline void normalize_tokens(Tensor& img, double amplitude) {
    const std::size_t C = img.dim(0), hw = img.dim(1) * img.dim(2);
    const double target = amplitude * std::sqrt(double(C));
    for (std::size_t s = 0; s < hw; ++s) {
        double n = 0.0;
        for (std::size_t c = 0; c < C; ++c) n += img[c * hw + s] * img[c * hw + s];
        n = std::sqrt(n);
        if (n == 0.0) throw std::domain_error("texture: zero token vector");
        for (std::size_t c = 0; c < C; ++c) img[c * hw + s] *= target / n;
    }
}

struct TextureParams {
    double amplitude = 3.0;
    TextureBand band{};
};

// Sharp texture used for reference videos.
inline Tensor make_texture(std::size_t C, std::size_t h, std::size_t w, Engine& eng, const TextureParams& p = {}) {
    Tensor t = band_texture(C, h, w, eng, p.band);
    normalize_tokens(t, p.amplitude);
    return t;
}

// Appearance for content targets: a coarse layout band blended with detail.
struct LayeredTextureParams {
    double amplitude = 3.0;
    double layout_weight = 0.7;
    TextureBand layout{0.03, 0.1, 4};
    TextureBand detail{0.2, 0.5, 12};
};

inline Tensor make_layered_texture(std::size_t C, std::size_t h, std::size_t w, Engine& eng,
                                   const LayeredTextureParams& p = {}) {
    Tensor lo = band_texture(C, h, w, eng, p.layout);
    Tensor hi = band_texture(C, h, w, eng, p.detail);
    normalize_tokens(lo, 1.0);
    normalize_tokens(hi, 1.0);
    Tensor out(lo.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = p.layout_weight * lo[i] + (1.0 - p.layout_weight) * hi[i];
    normalize_tokens(out, p.amplitude);
    return out;
}

// Periodic bilinear sample of a (C,h,w) image at real coordinates.
inline void sample_periodic(const Tensor& img, double y, double x, double* out) {
    const std::size_t C = img.dim(0), h = img.dim(1), w = img.dim(2);
    const double fy = std::floor(y), fx = std::floor(x);
    const double ty = y - fy, tx = x - fx;
    auto wrap = [](long v, std::size_t n) { return static_cast<std::size_t>(((v % long(n)) + long(n)) % long(n)); };
    const std::size_t y0 = wrap(long(fy), h), y1 = wrap(long(fy) + 1, h);
    const std::size_t x0 = wrap(long(fx), w), x1 = wrap(long(fx) + 1, w);
    for (std::size_t c = 0; c < C; ++c) {
        const double* p = &img.data[c * h * w];
        out[c] = (1 - ty) * ((1 - tx) * p[y0 * w + x0] + tx * p[y0 * w + x1]) +
                 ty * ((1 - tx) * p[y1 * w + x0] + tx * p[y1 * w + x1]);
    }
}

// Frame f = image circularly shifted by f*v (bilinear for fractional v).
inline LatentVideo translate_image(const Tensor& img, std::size_t F, Velocity v) {
    const std::size_t C = img.dim(0), h = img.dim(1), w = img.dim(2);
    LatentVideo out(F, C, h, w);
    std::vector<double> px(C);
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                if (v.integral()) {
                    const long sy = long(std::lround(v.vy)) * long(f), sx = long(std::lround(v.vx)) * long(f);
                    const std::size_t yy = std::size_t(((long(y) - sy) % long(h) + long(h)) % long(h));
                    const std::size_t xx = std::size_t(((long(x) - sx) % long(w) + long(w)) % long(w));
                    for (std::size_t c = 0; c < C; ++c) px[c] = img[(c * h + yy) * w + xx];
                } else {
                    sample_periodic(img, double(y) - v.vy * double(f), double(x) - v.vx * double(f), px.data());
                }
                for (std::size_t c = 0; c < C; ++c) out.at(f, c, y, x) = px[c];
            }
    return out;
}

// Analytic motion: rectangles (at frame 0) moving with constant velocity over
// a static background, all on the torus. A single region covering the whole
// grid is rigid translation.
struct MovingRegion {
    long y0 = 0, x0 = 0;
    std::size_t height = 0, width = 0;
    Velocity velocity{};
};

struct MotionModel {
    std::size_t h = 0, w = 0;
    std::vector<MovingRegion> regions;

    bool contains(const MovingRegion& r, std::size_t f, double y, double x) const {
        const double oy = wrap_pos(y - r.y0 - r.velocity.vy * double(f), double(h));
        const double ox = wrap_pos(x - r.x0 - r.velocity.vx * double(f), double(w));
        return oy < double(r.height) && ox < double(r.width);
    }

    // Displacement of the content at (y, x) in frame i when it reaches frame j.
    std::array<double, 2> displacement(std::size_t i, std::size_t j, double y, double x) const {
        for (const auto& r : regions)
            if (contains(r, i, y, x)) {
                const double d = double(j) - double(i);
                return {d * r.velocity.vy, d * r.velocity.vx};
            }
        return {0.0, 0.0};
    }

    static double wrap_pos(double v, double n) {
        double m = std::fmod(v, n);
        return m < 0 ? m + n : m;
    }
};

struct GroundTruth {
    MotionModel model;

    // Ground-truth flow sampled at tile representative positions.
    MotionFlow sample(const std::vector<FramePair>& pairs, const std::vector<std::array<double, 2>>& points) const {
        MotionFlow fl(pairs, points.size(), FlowMode::hard);
        for (std::size_t p = 0; p < pairs.size(); ++p)
            for (std::size_t t = 0; t < points.size(); ++t) {
                auto d = model.displacement(pairs[p].i, pairs[p].j, points[t][0], points[t][1]);
                fl.set(p, t, d[0], d[1]);
            }
        return fl;
    }
};

struct SynthResult {
    LatentVideo video;
    GroundTruth truth;
};

inline SynthResult generate_translating(std::size_t F, std::size_t C, std::size_t h, std::size_t w, Velocity v,
                                        std::uint64_t seed, const TextureParams& tex = {}) {
    if (F < 2 || C == 0 || h == 0 || w == 0) throw std::invalid_argument("generate_translating: zero-area grid");
    if (std::abs(v.vy) * double(F - 1) >= double(h) || std::abs(v.vx) * double(F - 1) >= double(w))
        throw std::invalid_argument("generate_translating: pattern would travel a full period");
    Engine eng = make_engine(seed, "texture", 0);
    Tensor img = make_texture(C, h, w, eng, tex);
    SynthResult r{translate_image(img, F, v), GroundTruth{MotionModel{h, w, {MovingRegion{0, 0, h, w, v}}}}};
    return r;
}

inline SynthResult generate_multi_object(std::size_t F, std::size_t C, std::size_t h, std::size_t w,
                                         const std::vector<MovingRegion>& objects, std::uint64_t seed,
                                         const TextureParams& tex = {}) {
    if (F < 2 || C == 0 || h == 0 || w == 0) throw std::invalid_argument("generate_multi_object: zero-area grid");
    MotionModel model{h, w, objects};
    for (const auto& o : objects) {
        if (!o.velocity.integral()) throw std::invalid_argument("generate_multi_object: integer velocities only");
        if (o.height == 0 || o.width == 0 || o.height > h || o.width > w)
            throw std::invalid_argument("generate_multi_object: region does not fit the grid");
    }
    // Reject any cell claimed by two regions in any frame.
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                int owners = 0;
                for (const auto& o : objects) owners += model.contains(o, f, double(y), double(x));
                if (owners > 1)
                    throw std::invalid_argument("generate_multi_object: overlapping trajectories at frame " +
                                                std::to_string(f));
            }

    LatentVideo out(F, C, h, w);
    Engine beng = make_engine(seed, "background");
    const Tensor bg = make_texture(C, h, w, beng, tex);
    std::vector<Tensor> textures;
    for (std::size_t k = 0; k < objects.size(); ++k) {
        Engine e = make_engine(seed, "texture", k);
        textures.push_back(make_texture(C, h, w, e, tex));
    }
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const Tensor* src = &bg;
                std::size_t sy = y, sx = x;
                for (std::size_t k = 0; k < objects.size(); ++k) {
                    const auto& o = objects[k];
                    if (!model.contains(o, f, double(y), double(x))) continue;
                    src = &textures[k];
                    sy = std::size_t(MotionModel::wrap_pos(double(y) - double(o.velocity.vy) * double(f), double(h)));
                    sx = std::size_t(MotionModel::wrap_pos(double(x) - double(o.velocity.vx) * double(f), double(w)));
                    break;
                }
                for (std::size_t c = 0; c < C; ++c) out.at(f, c, y, x) = (*src)[(c * h + sy) * w + sx];
            }
    return {out, GroundTruth{model}};
}

// Linear interpolant shared with the sampler: sigma_t = 1 - t/T.
struct Schedule {
    std::size_t T = 50;
    double sigma(std::size_t t) const {
        if (t > T) throw std::out_of_range("schedule: step " + std::to_string(t) + " beyond T=" + std::to_string(T));
        return 1.0 - double(t) / double(T);
    }
};

// x_t = (1 - sigma_t) clean + sigma_t eps, with eps fixed by the seed alone so
// every step of the same job sees one consistent noise draw.
inline LatentVideo add_inversion_noise(const LatentVideo& clean, std::size_t t_index, const Schedule& sched,
                                       std::uint64_t seed) {
    if (t_index > sched.T) throw std::out_of_range("add_inversion_noise: t_index outside schedule");
    const double s = sched.sigma(t_index);
    Engine eng = make_engine(seed, "inversion");
    const Tensor eps = gaussian(clean.values.shape, eng);
    Tensor out(clean.values.shape);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = (1.0 - s) * clean.values[k] + s * eps[k];
    return LatentVideo(std::move(out));
}

}  // namespace amflow
