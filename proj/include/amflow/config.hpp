#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "amflow/pipeline.hpp"

namespace amflow {

// Usage/config problems; the CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
    std::string key;
    ConfigError(std::string k, const std::string& msg) : std::runtime_error(msg), key(std::move(k)) {}
};

enum class Scene { translating, static_scene, multi };

inline const char* to_string(Scene s) {
    switch (s) {
        case Scene::translating: return "translating";
        case Scene::static_scene: return "static";
        case Scene::multi: return "multi";
    }
    return "?";
}

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "run";

    // scene
    std::size_t frames = 9, channels = 8, height = 32, width = 32;
    Scene scene = Scene::translating;
    double velocity_y = 0.0, velocity_x = 1.0;
    std::size_t multi_layout = 0;
    double texture_amplitude = 3.0;

    // attention / windows
    std::size_t tile = 4, tile_stride = 4;
    std::size_t span = 3, window = 9;
    CenterMode center_mode = CenterMode::argmax;
    FlowMode flow_mode = FlowMode::soft;
    bool windows_from_reference = true;  // false: plan generated-side windows from the generated latent
    std::size_t head_dim = 8;
    double tau = 1.0;
    bool identity_projection = false;

    // losses
    double lambda_amf = 5.0, lambda_window = 1.0, alpha = 0.2;

    // sampler + guidance
    std::size_t outer_steps = 50;
    double guided_fraction = 0.2;
    GuidanceConfig guidance{};

    DenoiserParams denoiser{};

    // gradcheck instance
    std::size_t gradcheck_frames = 2, gradcheck_size = 16;
    double gradcheck_step = 1e-3;
    std::size_t gradcheck_coords = 64;
};

// Built-in multi-object layouts (y0, x0, height, width, velocity), all on a
// 32x32 torus, trajectories disjoint for up to 9 frames.
inline std::vector<std::vector<MovingRegion>> multi_object_layouts() {
    return {
        {{2, 2, 12, 12, {0, 1}}, {18, 16, 12, 12, {0, -1}}},
        {{2, 2, 10, 10, {1, 0}}, {20, 14, 10, 10, {0, 1}}},
        {{0, 0, 16, 16, {0, 1}}},
        {{16, 0, 14, 14, {-1, 1}}, {2, 22, 8, 8, {1, 0}}},
    };
}

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || v.empty())
        throw ConfigError(key, "invalid value for '" + key + "': '" + v + "'");
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    // from_chars for double is missing in older libstdc++
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError(key, "invalid value for '" + key + "': '" + v + "'");
    }
    if (used != v.size() || !std::isfinite(d)) throw ConfigError(key, "invalid value for '" + key + "': '" + v + "'");
    return d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError(key, "invalid value for '" + key + "': '" + v + "' (expected true/false)");
}

inline std::string fmt_double(double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
}

}  // namespace detail

struct ConfigKey {
    std::string name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
    using namespace detail;
#define AMF_SIZE(NAME, EXPR)                                                                                       \
    ConfigKey{NAME, [](RunConfig& c, const std::string& v) { EXPR = parse_number<std::size_t>(NAME, v); },       \
              [](const RunConfig& c) { return std::to_string(EXPR); }}
#define AMF_DBL(NAME, EXPR)                                                                                        \
    ConfigKey{NAME, [](RunConfig& c, const std::string& v) { EXPR = parse_double(NAME, v); },                    \
              [](const RunConfig& c) { return fmt_double(EXPR); }}
#define AMF_BOOL(NAME, EXPR)                                                                                       \
    ConfigKey{NAME, [](RunConfig& c, const std::string& v) { EXPR = parse_bool(NAME, v); },                      \
              [](const RunConfig& c) { return std::string(EXPR ? "true" : "false"); }}
    static const std::vector<ConfigKey> keys = {
        ConfigKey{"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
                  [](const RunConfig& c) { return std::to_string(c.seed); }},
        ConfigKey{"out_dir",
                  [](RunConfig& c, const std::string& v) {
                      if (v.empty()) throw ConfigError("out_dir", "out_dir must not be empty");
                      c.out_dir = v;
                  },
                  [](const RunConfig& c) { return c.out_dir; }},
        AMF_SIZE("frames", c.frames),
        AMF_SIZE("channels", c.channels),
        AMF_SIZE("height", c.height),
        AMF_SIZE("width", c.width),
        ConfigKey{"scene",
                  [](RunConfig& c, const std::string& v) {
                      if (v == "translating") c.scene = Scene::translating;
                      else if (v == "static") c.scene = Scene::static_scene;
                      else if (v == "multi") c.scene = Scene::multi;
                      else throw ConfigError("scene", "invalid value for 'scene': '" + v + "' (translating|static|multi)");
                  },
                  [](const RunConfig& c) { return std::string(to_string(c.scene)); }},
        AMF_DBL("velocity_y", c.velocity_y),
        AMF_DBL("velocity_x", c.velocity_x),
        AMF_SIZE("multi_layout", c.multi_layout),
        AMF_DBL("texture_amplitude", c.texture_amplitude),
        AMF_SIZE("tile", c.tile),
        AMF_SIZE("tile_stride", c.tile_stride),
        AMF_SIZE("span", c.span),
        AMF_SIZE("window", c.window),
        ConfigKey{"center_mode",
                  [](RunConfig& c, const std::string& v) {
                      try {
                          c.center_mode = center_mode_from(v);
                      } catch (const std::exception&) {
                          throw ConfigError("center_mode",
                                            "invalid value for 'center_mode': '" + v + "' (argmax|expectation|fixed)");
                      }
                  },
                  [](const RunConfig& c) { return std::string(to_string(c.center_mode)); }},
        ConfigKey{"flow_mode",
                  [](RunConfig& c, const std::string& v) {
                      if (v == "hard") c.flow_mode = FlowMode::hard;
                      else if (v == "soft") c.flow_mode = FlowMode::soft;
                      else throw ConfigError("flow_mode", "invalid value for 'flow_mode': '" + v + "' (hard|soft)");
                  },
                  [](const RunConfig& c) { return std::string(to_string(c.flow_mode)); }},
        AMF_BOOL("windows_from_reference", c.windows_from_reference),
        AMF_SIZE("head_dim", c.head_dim),
        AMF_DBL("tau", c.tau),
        AMF_BOOL("identity_projection", c.identity_projection),
        AMF_DBL("lambda_amf", c.lambda_amf),
        AMF_DBL("lambda_window", c.lambda_window),
        AMF_DBL("alpha", c.alpha),
        AMF_SIZE("outer_steps", c.outer_steps),
        AMF_DBL("guided_fraction", c.guided_fraction),
        AMF_SIZE("inner_steps", c.guidance.inner_steps),
        AMF_SIZE("skip", c.guidance.skip),
        AMF_DBL("lr_start", c.guidance.lr_start),
        AMF_DBL("lr_end", c.guidance.lr_end),
        AMF_DBL("beta1", c.guidance.beta1),
        AMF_DBL("beta2", c.guidance.beta2),
        AMF_DBL("adam_eps", c.guidance.eps),
        AMF_DBL("weight_decay", c.guidance.weight_decay),
        AMF_BOOL("force_full_gradients", c.guidance.force_full_gradients),
        AMF_BOOL("moments_on_reuse", c.guidance.moments_on_reuse),
        AMF_SIZE("denoiser_block", c.denoiser.block),
        ConfigKey{"denoiser_radius",
                  [](RunConfig& c, const std::string& v) { c.denoiser.radius = parse_number<int>("denoiser_radius", v); },
                  [](const RunConfig& c) { return std::to_string(c.denoiser.radius); }},
        AMF_DBL("denoiser_kappa", c.denoiser.kappa),
        AMF_DBL("denoiser_beta", c.denoiser.beta),
        ConfigKey{"denoiser_pool",
                  [](RunConfig& c, const std::string& v) { c.denoiser.pool = parse_number<int>("denoiser_pool", v); },
                  [](const RunConfig& c) { return std::to_string(c.denoiser.pool); }},
        AMF_SIZE("gradcheck_frames", c.gradcheck_frames),
        AMF_SIZE("gradcheck_size", c.gradcheck_size),
        AMF_DBL("gradcheck_step", c.gradcheck_step),
        AMF_SIZE("gradcheck_coords", c.gradcheck_coords),
    };
#undef AMF_SIZE
#undef AMF_DBL
#undef AMF_BOOL
    return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (k.name == name) return &k;
    return nullptr;
}

inline std::string suggest_key(const std::string& name) {
    std::string best;
    std::size_t bd = ~std::size_t(0);
    for (const auto& k : config_keys()) {
        const std::size_t d = edit_distance(name, k.name);
        if (d < bd) {
            bd = d;
            best = k.name;
        }
    }
    return bd <= std::max<std::size_t>(2, name.size() / 3) ? best : "";
}

inline void set_key(RunConfig& c, const std::string& key, const std::string& value) {
    const ConfigKey* k = find_key(key);
    if (!k) {
        const std::string s = suggest_key(key);
        throw ConfigError(key, "unknown config key '" + key + "'" + (s.empty() ? "" : " (did you mean '" + s + "'?)"));
    }
    k->set(c, value);
}

// Cross-field checks; everything else is checked at parse time.
inline void validate(const RunConfig& c) {
    auto fail = [](const std::string& key, const std::string& m) { throw ConfigError(key, m); };
    if (c.frames < 2) fail("frames", "frames must be >= 2");
    if (c.channels < 1) fail("channels", "channels must be >= 1");
    if (c.height < 1 || c.width < 1) fail("height", "grid must be non-empty");
    if (c.head_dim < 1) fail("head_dim", "head_dim must be >= 1");
    if (!c.identity_projection && c.head_dim > c.channels) fail("head_dim", "head_dim must not exceed channels");
    if (c.identity_projection && c.head_dim != c.channels) fail("head_dim", "identity projection needs head_dim == channels");
    if (!(c.tau > 0)) fail("tau", "tau must be positive");
    if (c.tile < 1 || c.tile > std::min(c.height, c.width)) fail("tile", "tile must lie in [1, min(height, width)]");
    if (c.tile_stride < 1) fail("tile_stride", "tile_stride must be >= 1");
    if (c.span < 1) fail("span", "span must be >= 1");
    try {
        validate_window_side(c.window, c.height, c.width);
    } catch (const std::exception& e) {
        fail("window", e.what());
    }
    if (c.lambda_amf < 0) fail("lambda_amf", "lambda_amf must be >= 0");
    if (c.lambda_window < 0) fail("lambda_window", "lambda_window must be >= 0");
    if (c.alpha < 0 || c.alpha > 1) fail("alpha", "alpha must lie in [0, 1]");
    if (c.outer_steps < 1) fail("outer_steps", "outer_steps must be >= 1");
    if (!(c.guided_fraction > 0 && c.guided_fraction <= 1)) fail("guided_fraction", "guided_fraction must lie in (0, 1]");
    if (c.guidance.inner_steps < 1) fail("inner_steps", "inner_steps must be >= 1");
    if (c.guidance.skip < 1) fail("skip", "skip must be >= 1");
    if (!(c.guidance.lr_end > 0) || c.guidance.lr_start < c.guidance.lr_end)
        fail("lr_start", "need lr_start >= lr_end > 0");
    if (!(c.guidance.beta1 >= 0 && c.guidance.beta1 < 1)) fail("beta1", "beta1 must lie in [0, 1)");
    if (!(c.guidance.beta2 >= 0 && c.guidance.beta2 < 1)) fail("beta2", "beta2 must lie in [0, 1)");
    if (!(c.guidance.eps > 0)) fail("adam_eps", "adam_eps must be positive");
    if (c.guidance.weight_decay < 0) fail("weight_decay", "weight_decay must be >= 0");
    if (c.denoiser.block < 1 || c.height % c.denoiser.block || c.width % c.denoiser.block)
        fail("denoiser_block", "denoiser_block must divide height and width");
    if (c.denoiser.radius < 0) fail("denoiser_radius", "denoiser_radius must be >= 0");
    if (!(c.denoiser.beta > 0)) fail("denoiser_beta", "denoiser_beta must be positive");
    if (c.denoiser.pool < 0) fail("denoiser_pool", "denoiser_pool must be >= 0");
    if (c.scene == Scene::translating) {
        if (std::abs(c.velocity_y) * double(c.frames - 1) >= double(c.height) ||
            std::abs(c.velocity_x) * double(c.frames - 1) >= double(c.width))
            fail("velocity_x", "velocity too large: the pattern would travel a full period");
    }
    if (c.scene == Scene::multi) {
        if (c.multi_layout >= multi_object_layouts().size()) fail("multi_layout", "multi_layout out of range");
        if (c.height != 32 || c.width != 32) fail("height", "multi-object layouts are defined on a 32x32 grid");
    }
    if (!(c.texture_amplitude > 0)) fail("texture_amplitude", "texture_amplitude must be positive");
    if (c.gradcheck_frames < 2) fail("gradcheck_frames", "gradcheck_frames must be >= 2");
    if (c.gradcheck_size < c.window || c.gradcheck_size < c.tile || c.gradcheck_size % c.denoiser.block)
        fail("gradcheck_size", "gradcheck_size must fit the window and tile and be divisible by denoiser_block");
    if (!(c.gradcheck_step > 0)) fail("gradcheck_step", "gradcheck_step must be positive");
    if (c.gradcheck_coords < 1) fail("gradcheck_coords", "gradcheck_coords must be >= 1");
}

inline void apply_lines(RunConfig& c, std::istream& in, const std::string& origin) {
    std::string line;
    std::size_t no = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, line)) {
        ++no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("", origin + ":" + std::to_string(no) + ": expected key=value, got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        if (seen.count(key))
            throw ConfigError(key, origin + ":" + std::to_string(no) + ": key '" + key + "' repeated (first at line " +
                                       std::to_string(seen[key]) + ")");
        seen[key] = no;
        set_key(c, key, value);
    }
}

// Overrides are "key=value" strings; a key given twice with different values
// is a conflict.
inline RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    RunConfig c;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config", "cannot read config file '" + path + "'");
        apply_lines(c, in, path);
    }
    std::map<std::string, std::string> given;
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("", "override must be key=value, got '" + o + "'");
        const std::string key = detail::trim(o.substr(0, eq)), value = detail::trim(o.substr(eq + 1));
        auto it = given.find(key);
        if (it != given.end() && it->second != value)
            throw ConfigError(key, "conflicting values for '" + key + "': '" + it->second + "' vs '" + value + "'");
        given[key] = value;
        set_key(c, key, value);
    }
    validate(c);
    return c;
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    apply_lines(c, in, "<text>");
    validate(c);
    return c;
}

// Fully resolved config, one key=value per line in table order.
inline std::string echo_config(const RunConfig& c) {
    std::string out;
    for (const auto& k : config_keys()) out += k.name + "=" + k.get(c) + "\n";
    return out;
}

inline std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& c) {
    std::vector<std::pair<std::string, std::string>> v;
    for (const auto& k : config_keys()) v.emplace_back(k.name, k.get(c));
    return v;
}

}  // namespace amflow
