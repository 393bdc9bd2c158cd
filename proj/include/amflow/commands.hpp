#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "amflow/config.hpp"
#include "amflow/io.hpp"
#include "amflow/pipeline.hpp"

namespace amflow {

inline constexpr const char* kVersion = "0.1.0";

using json = nlohmann::json;  // std::map-backed: keys come out sorted

// ---------------------------------------------------------------- scene construction

inline SynthResult reference_scene(const RunConfig& c) {
    TextureParams tex;
    tex.amplitude = c.texture_amplitude;
    switch (c.scene) {
        case Scene::translating:
            return generate_translating(c.frames, c.channels, c.height, c.width, {c.velocity_y, c.velocity_x}, c.seed, tex);
        case Scene::static_scene:
            return generate_translating(c.frames, c.channels, c.height, c.width, {0, 0}, c.seed, tex);
        case Scene::multi:
            return generate_multi_object(c.frames, c.channels, c.height, c.width, multi_object_layouts()[c.multi_layout],
                                         c.seed, tex);
    }
    throw std::logic_error("unknown scene");
}

// Appearance stand-in: one layered texture held still over all frames.
inline LatentVideo content_target(std::size_t F, std::size_t C, std::size_t h, std::size_t w, std::uint64_t seed,
                                  double amplitude) {
    Engine eng = make_engine(seed, "content");
    LayeredTextureParams p;
    p.amplitude = amplitude;
    const Tensor img = make_layered_texture(C, h, w, eng, p);
    LatentVideo v(F, C, h, w);
    for (std::size_t f = 0; f < F; ++f) std::copy(img.data.begin(), img.data.end(), v.values.data.begin() + f * img.size());
    return v;
}

inline ProjectionParams projection_params(const RunConfig& c) {
    ProjectionParams p;
    p.head_dim = c.head_dim;
    p.tau = c.tau;
    p.seed = c.seed;
    p.identity = c.identity_projection;
    return p;
}

inline PlanParams plan_params(const RunConfig& c) { return {c.span, c.window, c.center_mode}; }

inline TransferJob make_job(const RunConfig& c) {
    TransferJob job;
    job.reference = reference_scene(c).video;
    job.content_target = content_target(c.frames, c.channels, c.height, c.width, c.seed, c.texture_amplitude);
    job.outer_steps = c.outer_steps;
    job.guided_fraction = c.guided_fraction;
    job.seed = c.seed;
    job.guidance = c.guidance;
    job.loss = {c.lambda_amf, c.lambda_window, c.alpha};
    job.projection = projection_params(c);
    job.plan = plan_params(c);
    job.tile = c.tile;
    job.tile_stride = c.tile_stride;
    job.denoiser = c.denoiser;
    job.windows_from_reference = c.windows_from_reference;
    return job;
}

// ---------------------------------------------------------------- output helpers

class RunDir {
public:
    RunDir(const RunConfig& c, const std::string& subcommand) : cfg_(c), sub_(subcommand), root_(c.out_dir) {
        std::filesystem::create_directories(root_);
    }

    std::string path(const std::string& name) {
        files_.push_back(name);
        return (root_ / name).string();
    }

    void text(const std::string& name, const std::string& body) {
        std::ofstream os(path(name), std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + name);
        os << body;
    }

    void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }
    void tensor(const std::string& name, const Tensor& t) { save_tensor(path(name), t); }

    // Written last so it lists every artifact.
    void manifest() {
        json m;
        m["tool"] = "amflow";
        m["version"] = kVersion;
        m["subcommand"] = sub_;
        m["seed"] = cfg_.seed;
        m["streams"] = {"texture", "background", "content", "projection", "inversion", "sampler", "gradcheck"};
        json cj;
        for (const auto& [k, v] : config_items(cfg_)) cj[k] = v;
        m["config"] = cj;
        text("config.txt", echo_config(cfg_));
        m["artifacts"] = files_;
        std::ofstream os((root_ / "manifest.json").string(), std::ios::binary);
        os << m.dump(2) << "\n";
    }

private:
    RunConfig cfg_;
    std::string sub_;
    std::filesystem::path root_;
    std::vector<std::string> files_;
};

inline json ops_json(const ScoreCounter& c) {
    return {{"windowed", c.windowed}, {"full", c.full}, {"representative", c.representative}};
}

inline json score_ops_json(const ScoreOps& o) {
    return {{"full_pairs", o.full_pairs},     {"windowed_pairs", o.windowed_pairs},
            {"full_ops", o.full_ops},         {"windowed_ops", o.windowed_ops},
            {"windowed_ops_nominal", o.windowed_ops_nominal}, {"ratio", o.ratio}};
}

inline json matrix_json(const SimilarityMatrix& m) {
    json rows = json::array();
    for (std::size_t a = 0; a < m.n; ++a) {
        json r = json::array();
        for (std::size_t b = 0; b < m.n; ++b) r.push_back(m.at(a, b));
        rows.push_back(r);
    }
    return rows;
}

inline double json_safe(double v) { return std::isfinite(v) ? v : 0.0; }

inline std::string similarity_csv(const SimilarityMatrix& m) {
    std::ostringstream os;
    os.precision(17);
    os << "row";
    for (std::size_t b = 0; b < m.n; ++b) os << ",g" << b;
    os << "\n";
    for (std::size_t a = 0; a < m.n; ++a) {
        os << "g" << a;
        for (std::size_t b = 0; b < m.n; ++b) os << "," << m.at(a, b);
        os << "\n";
    }
    return os.str();
}

// Magnitude of pair 0 laid out on the tile grid.
inline void flow_magnitude_pgm(RunDir& dir, const std::string& name, const MotionFlow& fl, const TileGrid& tiles,
                               double vmax) {
    const std::size_t ny = tiles_along(tiles.h, tiles.tile_h, tiles.stride_h);
    const std::size_t nx = tiles_along(tiles.w, tiles.tile_w, tiles.stride_w);
    std::vector<double> mag(ny * nx);
    for (std::size_t t = 0; t < fl.tiles; ++t) mag[t] = std::hypot(fl.dy(0, t), fl.dx(0, t));
    save_pgm(dir.path(name), ny, nx, mag, vmax);
}

inline double nominal_speedup(std::size_t J, std::size_t skip) {
    return double(J) / double(gradient_computations(J, skip));
}

// ---------------------------------------------------------------- subcommands

inline int cmd_synth(const RunConfig& c, std::ostream& out) {
    RunDir dir(c, "synth");
    const SynthResult s = reference_scene(c);
    const TileGrid tiles = make_tile_grid(c.height, c.width, c.tile, c.tile, c.tile_stride, c.tile_stride);
    const MotionFlow truth = s.truth.sample(temporal_pairs(c.frames, c.span), tiles.rep_points());
    dir.tensor("reference.amft", s.video.values);
    dir.tensor("truth_flow.amft", truth.delta);
    json side;
    side["scene"] = to_string(c.scene);
    side["shape"] = s.video.values.shape;
    side["torus"] = true;
    json regions = json::array();
    for (const auto& r : s.truth.model.regions)
        regions.push_back({{"y0", r.y0}, {"x0", r.x0}, {"height", r.height}, {"width", r.width},
                           {"velocity", {r.velocity.vy, r.velocity.vx}}});
    side["regions"] = regions;
    side["background_velocity"] = {0.0, 0.0};
    side["truth_flow"] = {{"pairs", truth.pairs.size()}, {"tiles", truth.tiles}, {"span", c.span},
                          {"points", "tile representatives"}};
    dir.json_file("synth.json", side);
    dir.manifest();
    out << json{{"status", "ok"}, {"subcommand", "synth"}, {"out_dir", c.out_dir}}.dump() << "\n";
    return 0;
}

inline json transfer_report_json(const RunConfig& c, const TransferJob& job, const TransferResult& r) {
    const TransferReport& rep = r.report;
    json j;
    j["guided_steps"] = rep.guided.size();
    j["inner_steps"] = c.guidance.inner_steps;
    j["skip"] = c.guidance.skip;
    j["gradient_computations"] = rep.gradient_computations;
    j["evaluator_calls"] = rep.evaluator_calls;
    j["nominal_speedup"] = nominal_speedup(c.guidance.inner_steps, c.guidance.skip);
    j["score_ops"] = {{"reference", ops_json(rep.reference_ops)},
                      {"generated", ops_json(rep.generated_ops)},
                      {"evaluation", ops_json(rep.evaluation_ops)},
                      {"generated_windowed_expected", rep.expected_generated_windowed_ops}};
    const TileGrid tiles = make_tile_grid(c.height, c.width, c.tile, c.tile, c.tile_stride, c.tile_stride);
    j["score_ops"]["analytic"] = score_ops_json(count_score_ops(c.frames, c.height, c.width, c.span, c.window, tiles.size()));
    j["final"] = {{"amf_hard", rep.final_amf},
                  {"amf_soft", rep.final_amf_soft},
                  {"mean_epe", rep.fidelity.mean_epe},
                  {"cosine", rep.fidelity.cosine},
                  {"cosine_degenerate", rep.fidelity.degenerate},
                  {"max_abs_from_content", rep.max_abs_from_content}};
    json steps = json::array();
    std::vector<double> medians;
    for (const auto& g : rep.guided) {
        steps.push_back({{"t", g.t},
                         {"sigma_reference", g.sigma_ref},
                         {"loss_first", g.loss_first},
                         {"loss_last", g.loss_last},
                         {"computed", g.computed},
                         {"reused", g.reused},
                         {"median_adjacent_similarity", json_safe(g.median_adjacent)}});
        if (std::isfinite(g.median_adjacent)) medians.push_back(g.median_adjacent);
    }
    j["guided"] = steps;
    json sim;
    if (!rep.guided.empty()) sim["first_step_matrix"] = matrix_json(rep.guided.front().similarity);
    std::sort(medians.begin(), medians.end());
    sim["median_adjacent"] =
        medians.empty() ? 0.0
                        : (medians.size() % 2 ? medians[medians.size() / 2]
                                              : 0.5 * (medians[medians.size() / 2 - 1] + medians[medians.size() / 2]));
    sim["steps_with_similarity"] = medians.size();
    j["gradient_similarity"] = sim;
    j["reference_shape"] = job.reference.values.shape;
    return j;
}

inline int cmd_transfer(const RunConfig& c, std::ostream& out) {
    RunDir dir(c, "transfer");
    const TransferJob job = make_job(c);
    const TransferResult r = run_transfer(job);
    const TransferReport& rep = r.report;
    dir.tensor("generated.amft", r.generated.values);
    dir.tensor("reference.amft", job.reference.values);
    dir.tensor("content.amft", job.content_target.values);
    dir.tensor("reference_flow.amft", r.reference_flow.delta);
    dir.tensor("generated_flow.amft", r.generated_flow.delta);
    const TileGrid tiles = make_tile_grid(c.height, c.width, c.tile, c.tile, c.tile_stride, c.tile_stride);
    const double vmax = double(c.window / 2);
    flow_magnitude_pgm(dir, "flow_mag_reference.pgm", r.reference_flow, tiles, vmax);
    flow_magnitude_pgm(dir, "flow_mag_generated.pgm", r.generated_flow, tiles, vmax);

    std::ostringstream trace;
    trace.precision(17);
    trace << "outer_step,step,computed,loss,grad_norm,lr,wall_time_ns\n";
    json timings;
    timings["wall_seconds"] = rep.wall_seconds;
    json inner = json::array();
    for (const auto& g : rep.guided) {
        std::int64_t ns = 0;
        for (const auto& row : g.trace) {
            trace << g.t << "," << row.step << "," << (row.computed ? 1 : 0) << ",";
            if (row.computed) trace << row.loss;
            trace << "," << row.grad_norm << "," << row.lr << "," << row.wall_time_ns << "\n";
            ns += row.wall_time_ns;
        }
        inner.push_back(ns);
    }
    timings["inner_loop_ns"] = inner;
    dir.text("trace.csv", trace.str());
    if (!rep.guided.empty()) dir.text("similarity.csv", similarity_csv(rep.guided.front().similarity));
    const json report = transfer_report_json(c, job, r);
    dir.json_file("report.json", report);
    dir.json_file("timings.json", timings);
    dir.manifest();
    out << json{{"status", "ok"},
                {"subcommand", "transfer"},
                {"mean_epe", rep.fidelity.mean_epe},
                {"final_amf", rep.final_amf},
                {"gradient_computations", rep.gradient_computations}}
               .dump()
        << "\n";
    return 0;
}

inline int cmd_bench(const RunConfig& c, std::ostream& out) {
    RunDir dir(c, "bench");
    using clock = std::chrono::steady_clock;
    const SynthResult s = reference_scene(c);
    const Projection pr = make_projection(c.channels, projection_params(c));
    const TileGrid tiles = make_tile_grid(c.height, c.width, c.tile, c.tile, c.tile_stride, c.tile_stride);
    const AttentionContext ctx = project_qk(s.video, pr);

    json table, timings;
    // full: every query against every key for every frame pair
    ScoreCounter full;
    auto t0 = clock::now();
    const double checksum = full_attention_all_tokens(ctx, &full);
    timings["full_attention_seconds"] = std::chrono::duration<double>(clock::now() - t0).count();
    // windowed: plan (representative queries) + windowed flow
    ScoreCounter win;
    t0 = clock::now();
    const WindowPlan plan = make_window_plan(ctx, tiles, plan_params(c), &win);
    const MotionFlow fl = extract_amf_windowed(ctx, plan, c.flow_mode, &win);
    timings["windowed_seconds"] = std::chrono::duration<double>(clock::now() - t0).count();
    const ScoreOps an = count_score_ops(plan, c.frames);
    table["attention"] = {{"full_counter", ops_json(full)},
                          {"windowed_counter", ops_json(win)},
                          {"analytic", score_ops_json(an)},
                          {"full_matches_analytic", full.full == an.full_ops},
                          {"windowed_matches_analytic", win.windowed == an.windowed_ops},
                          {"full_checksum", checksum},
                          {"flow_mode", to_string(fl.mode)}};

    json sweep = json::array(), sweep_t = json::array();
    for (std::size_t skip : {1, 2, 3, 5}) {
        RunConfig k = c;
        k.guidance.skip = skip;
        const TransferResult r = run_transfer(make_job(k));
        sweep.push_back({{"skip", skip},
                         {"gradient_computations", r.report.gradient_computations},
                         {"evaluator_calls", r.report.evaluator_calls},
                         {"nominal_speedup", nominal_speedup(k.guidance.inner_steps, skip)},
                         {"final_amf", r.report.final_amf},
                         {"final_amf_soft", r.report.final_amf_soft},
                         {"mean_epe", r.report.fidelity.mean_epe}});
        sweep_t.push_back({{"skip", skip}, {"wall_seconds", r.report.wall_seconds}});
    }
    table["skip_sweep"] = sweep;
    timings["skip_sweep"] = sweep_t;
    dir.json_file("bench.json", table);
    dir.json_file("timings.json", timings);
    dir.manifest();
    out << json{{"status", "ok"}, {"subcommand", "bench"}, {"op_ratio", an.ratio}}.dump() << "\n";
    return 0;
}

struct GradcheckOutcome {
    GradCheckResult result;
    double loss = 0.0;
};

// L_total against the latent fed to the projection, on a small instance whose
// reference flow and windows come from a translating reference.
inline GradcheckOutcome run_gradcheck(const RunConfig& c) {
    const std::size_t F = c.gradcheck_frames, n = c.gradcheck_size;
    TextureParams tex;
    tex.amplitude = c.texture_amplitude;
    const Velocity v = c.scene == Scene::translating ? Velocity{c.velocity_y, c.velocity_x} : Velocity{0, 0};
    const LatentVideo ref = generate_translating(F, c.channels, n, n, v, c.seed, tex).video;
    const Projection pr = make_projection(c.channels, projection_params(c));
    const TileGrid tiles = make_tile_grid(n, n, c.tile, c.tile, c.tile_stride, c.tile_stride);
    const AttentionContext rctx = project_qk(ref, pr);
    const WindowPlan plan = make_window_plan(rctx, tiles, plan_params(c));
    const MotionFlow rflow = extract_amf_windowed(rctx, plan, FlowMode::hard);
    const WindowGather g = make_window_gather(plan, pr.head_dim);
    const LossWeights lw{c.lambda_amf, c.lambda_window, c.alpha};

    Tensor x = content_target(F, c.channels, n, n, c.seed, c.texture_amplitude).values;
    Engine eng = make_engine(c.seed, "gradcheck", 1);
    const Tensor noise = gaussian(x.shape, eng);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += 0.5 * noise[k];

    const LossBuilder f = [&](Tape& tape, Var lat) {
        return total_loss(tape, rflow, project_qk(tape, lat, pr), plan, g, pr.score_scale(), lw).total;
    };
    GradcheckOutcome o;
    o.loss = eval_loss(f, x);
    o.result = check_gradient(f, x, c.gradcheck_step, c.seed, c.gradcheck_coords);
    return o;
}

inline constexpr double kGradcheckTolerance = 1e-4;

inline int cmd_gradcheck(const RunConfig& c, std::ostream& out) {
    RunDir dir(c, "gradcheck");
    const GradcheckOutcome o = run_gradcheck(c);
    const bool ok = o.result.max_error < kGradcheckTolerance;
    const json j = {{"max_error", o.result.max_error},
                    {"error_kind", o.result.absolute ? "absolute" : "relative"},
                    {"coordinates", o.result.coordinates},
                    {"step", c.gradcheck_step},
                    {"tolerance", kGradcheckTolerance},
                    {"loss", o.loss},
                    {"passed", ok}};
    dir.json_file("gradcheck.json", j);
    dir.manifest();
    out << j.dump() << "\n";
    return ok ? 0 : 1;
}

inline int cmd_diag(const RunConfig& c, const std::string& kind, std::ostream& out) {
    if (kind != "windows" && kind != "flow" && kind != "similarity")
        throw ConfigError("diag", "unknown diag kind '" + kind + "' (windows|flow|similarity)");
    RunDir dir(c, "diag " + kind);
    const SynthResult s = reference_scene(c);
    const Projection pr = make_projection(c.channels, projection_params(c));
    const TileGrid tiles = make_tile_grid(c.height, c.width, c.tile, c.tile, c.tile_stride, c.tile_stride);
    const AttentionContext ctx = project_qk(s.video, pr);
    json summary{{"kind", kind}};

    if (kind == "windows") {
        const WindowPlan plan = make_window_plan(ctx, tiles, plan_params(c));
        std::ostringstream csv;
        csv << "pair,i,j,tile,tile_y,tile_x,center_y,center_x,window_size\n";
        Tensor centers(Shape{plan.pairs.size(), tiles.size(), 2});
        for (std::size_t p = 0; p < plan.pairs.size(); ++p)
            for (std::size_t t = 0; t < tiles.size(); ++t) {
                const std::size_t sl = plan.slot(p, t);
                csv << p << "," << plan.pairs[p].i << "," << plan.pairs[p].j << "," << t << "," << tiles.tiles[t].cy << ","
                    << tiles.tiles[t].cx << "," << plan.centers[sl][0] << "," << plan.centers[sl][1] << ","
                    << plan.window_size(sl) << "\n";
                centers[sl * 2] = double(plan.centers[sl][0]);
                centers[sl * 2 + 1] = double(plan.centers[sl][1]);
            }
        dir.text("windows.csv", csv.str());
        dir.tensor("window_centers.amft", centers);
        json tj = json::array();
        for (const auto& t : tiles.tiles) tj.push_back({t.y0, t.x0, t.cy, t.cx});
        dir.json_file("windows.json", {{"span", plan.span},
                                       {"side", plan.side},
                                       {"mode", to_string(plan.mode)},
                                       {"grid", {c.height, c.width}},
                                       {"tile", {tiles.tile_h, tiles.tile_w}},
                                       {"stride", {tiles.stride_h, tiles.stride_w}},
                                       {"tiles", tj},
                                       {"score_ops", plan.score_ops()}});
        summary["slots"] = plan.slots();
    } else if (kind == "flow") {
        const WindowPlan plan = make_window_plan(ctx, tiles, plan_params(c));
        const MotionFlow wf = extract_amf_windowed(ctx, plan, c.flow_mode);
        const MotionFlow ff = extract_amf_full(ctx, tiles, plan.pairs, c.flow_mode);
        const MotionFlow gt = s.truth.sample(plan.pairs, tiles.rep_points());
        std::ostringstream csv;
        csv.precision(17);
        csv << "pair,i,j,tile,dy,dx,full_dy,full_dx,truth_dy,truth_dx\n";
        std::size_t agree = 0;
        for (std::size_t p = 0; p < plan.pairs.size(); ++p)
            for (std::size_t t = 0; t < tiles.size(); ++t) {
                csv << p << "," << plan.pairs[p].i << "," << plan.pairs[p].j << "," << t << "," << wf.dy(p, t) << ","
                    << wf.dx(p, t) << "," << ff.dy(p, t) << "," << ff.dx(p, t) << "," << gt.dy(p, t) << ","
                    << gt.dx(p, t) << "\n";
                agree += wf.dy(p, t) == ff.dy(p, t) && wf.dx(p, t) == ff.dx(p, t);
            }
        dir.text("flow.csv", csv.str());
        dir.tensor("flow.amft", wf.delta);
        flow_magnitude_pgm(dir, "flow_mag.pgm", wf, tiles, double(c.window / 2));
        summary["flow_mode"] = to_string(wf.mode);
        summary["windowed_full_agreement"] = double(agree) / double(plan.slots());
    } else {
        RunConfig k = c;
        k.guided_fraction = 1.0 / double(c.outer_steps);
        k.guidance.skip = 1;
        const TransferResult r = run_transfer(make_job(k));
        const SimilarityMatrix& m = r.report.guided.front().similarity;
        dir.text("similarity.csv", similarity_csv(m));
        summary["size"] = m.n;
        summary["median_adjacent"] = json_safe(r.report.guided.front().median_adjacent);
        summary["matrix"] = matrix_json(m);
    }
    dir.json_file("diag.json", summary);
    dir.manifest();
    out << json{{"status", "ok"}, {"subcommand", "diag"}, {"kind", kind}}.dump() << "\n";
    return 0;
}

// Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
inline int error_exit(const RunConfig* c, int code, const std::string& kind, const std::string& msg,
                      const std::string& key, std::ostream& err) {
    json e{{"error", kind}, {"message", msg}, {"exit_code", code}};
    if (!key.empty()) e["key"] = key;
    err << e.dump() << "\n";
    if (c) {
        std::error_code ec;
        std::filesystem::create_directories(c->out_dir, ec);
        if (!ec) std::ofstream(std::filesystem::path(c->out_dir) / "error.json") << e.dump(2) << "\n";
    }
    return code;
}

inline int run_subcommand(const std::string& name, const RunConfig& c, const std::string& diag_kind = "windows",
                          std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    try {
        if (name == "synth") return cmd_synth(c, out);
        if (name == "transfer") return cmd_transfer(c, out);
        if (name == "bench") return cmd_bench(c, out);
        if (name == "gradcheck") return cmd_gradcheck(c, out);
        if (name == "diag") return cmd_diag(c, diag_kind, out);
        return error_exit(nullptr, 2, "usage", "unknown subcommand '" + name + "'", "", err);
    } catch (const ConfigError& e) {
        return error_exit(&c, 2, "config", e.what(), e.key, err);
    } catch (const NumericalFailure& e) {
        return error_exit(&c, 1, "numerical", e.what(), "", err);
    } catch (const std::invalid_argument& e) {
        return error_exit(&c, 2, "invalid_argument", e.what(), "", err);
    } catch (const std::out_of_range& e) {
        return error_exit(&c, 2, "invalid_argument", e.what(), "", err);
    } catch (const std::exception& e) {
        return error_exit(&c, 1, "runtime", e.what(), "", err);
    }
}

}  // namespace amflow
