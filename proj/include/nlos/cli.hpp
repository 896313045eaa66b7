#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nlos/config.hpp"
#include "nlos/eval.hpp"
#include "nlos/forward.hpp"
#include "nlos/io.hpp"
#include "nlos/recon_factored.hpp"
#include "nlos/recon_linear.hpp"
#include "nlos/scene.hpp"

namespace nlos {

// Process exit statuses.
enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,        // solver or other runtime failure
    kExitUsage = 2,          // unknown flags, bad arguments
    kExitConfig = 3,         // malformed configuration
    kExitVersion = 4,        // file written by an incompatible format version
    kExitFormat = 5,         // wrong magic, truncated or oversized file, I/O error
    kExitShape = 6,          // inconsistent geometry or dimensions
};

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// FNV-1a, 64 bit, as 16 hex digits.
inline std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunManifest {
    std::vector<std::string> command_line;
    Json config = Json::object();
    std::uint64_t seed = 0;
    std::string started, finished;
    std::vector<std::string> outputs;

    // Keys are sorted by the JSON library, so equal configs give equal digests.
    std::string config_digest() const { return fnv1a_hex(config.dump()); }

    Json to_json() const {
        return {{"command_line", command_line},
                {"config", config},
                {"config_digest", config_digest()},
                {"seed", seed},
                {"format_versions",
                 {{"transient", kTransientMagic},
                  {"volume", kVolumeMagic},
                  {"visibility", kVisibilityMagic},
                  {"normals", kNormalsMagic},
                  {"histograms", kHistogramMagic},
                  {"scene_schema", kSceneSchema},
                  {"solver_schema", kSolverSchema}}},
                {"started", started},
                {"finished", finished},
                {"outputs", outputs}};
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw FormatError(FormatErrorKind::Io, "cannot write manifest " + path.string());
        out << to_json().dump(2) << "\n";
    }
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
    out << text;
}

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw FormatError(FormatErrorKind::Io, "cannot create directory " + dir.string());
}

inline int axis_from(const std::string& s) {
    if (s == "x") return 0;
    if (s == "y") return 1;
    if (s == "z") return 2;
    throw CLI::ValidationError("--axis", "must be x, y or z");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// Solver flags that may override a configuration file.
struct SolverFlags {
    std::string config_path;
    std::optional<std::uint32_t> iterations, outer, inner, vis_steps, normal_iters, cg_iters;
    std::optional<double> sparsity, tv, penalty, fbp_quantile, initial_step;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> shading, step_rule;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "solver configuration (JSON)")->check(CLI::ExistingFile);
        app->add_option("--iterations", iterations, "linear solver iterations");
        app->add_option("--sparsity", sparsity, "weight of the l1 prior");
        app->add_option("--tv", tv, "weight of the total-variation prior");
        app->add_option("--penalty", penalty, "ADMM penalty");
        app->add_option("--cg-iterations", cg_iters, "inner iterations per ADMM x-update");
        app->add_option("--outer", outer, "factored: outer iterations");
        app->add_option("--inner", inner, "factored: ADMM iterations per albedo step");
        app->add_option("--visibility-steps", vis_steps, "factored: gradient steps per visibility update");
        app->add_option("--normal-iterations", normal_iters, "factored: L-BFGS iterations per normal update");
        app->add_option("--step-rule", step_rule, "factored: fixed, backtracking or barzilai_borwein");
        app->add_option("--initial-step", initial_step, "factored: initial visibility step length");
        app->add_option("--shading", shading, "factored: isotropic or lambertian");
        app->add_option("--seed", seed, "factored: initialization seed");
        app->add_option("--fbp-quantile", fbp_quantile, "FBP threshold quantile in [0, 1)");
    }

    SolverSpec resolve() const {
        SolverSpec s = config_path.empty() ? default_solver_spec() : solver_from_json(load_json(config_path));
        for (LinearSolverConfig* c : {&s.linear, &s.factored.linear_config}) {
            if (sparsity) c->sparsity_weight = *sparsity;
            if (tv) c->tv_weight = *tv;
            if (penalty) c->admm_penalty = *penalty;
            if (cg_iters) c->cg_iterations = *cg_iters;
        }
        if (iterations) s.linear.iterations = *iterations;
        if (outer) s.factored.outer_iterations = *outer;
        if (inner) s.factored.albedo_inner_iterations = *inner;
        if (vis_steps) s.factored.visibility_gradient_steps = *vis_steps;
        if (normal_iters) s.factored.normal_solver_iterations = *normal_iters;
        if (initial_step) s.factored.initial_step = *initial_step;
        if (step_rule) s.factored.step_rule = step_rule_from(*step_rule);
        if (shading) s.factored.shading = shading_from(*shading);
        if (seed) s.factored.rng_seed = *seed;
        if (fbp_quantile) s.fbp_quantile = *fbp_quantile;
        try {
            s.linear.validate();
            s.factored.validate();
            if (!(s.fbp_quantile >= 0.0 && s.fbp_quantile < 1.0)) throw Error("fbp_quantile must lie in [0, 1)");
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
        return s;
    }
};

}  // namespace detail

/// Entry point of the `nlos` tool. Never throws; returns an ExitCode.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Non-line-of-sight reconstruction from confocal transient measurements", "nlos"};
    app.require_subcommand(1);

    RunManifest manifest;
    for (int k = 0; k < argc; ++k) manifest.command_line.emplace_back(argv[k]);
    std::string manifest_path;
    app.add_option("--manifest", manifest_path, "where to write the run manifest (default: next to the outputs)");

    // simulate
    auto* sim = app.add_subcommand("simulate", "render a scene description into a transient image and ground truth");
    std::string sim_scene, sim_out;
    std::optional<double> sim_photons;
    std::optional<std::uint64_t> sim_seed;
    sim->add_option("--scene", sim_scene, "scene configuration (JSON)")->required()->check(CLI::ExistingFile);
    sim->add_option("--out", sim_out, "output directory")->required();
    sim->add_option("--photons", sim_photons, "expected photon count at the peak bin (adds Poisson noise)");
    sim->add_option("--seed", sim_seed, "noise seed");

    // ingest
    auto* ing = app.add_subcommand("ingest", "turn a histogram bundle into a transient image");
    std::string ing_in, ing_out;
    PreprocessOptions ing_opt;
    ing->add_option("--histograms", ing_in, "histogram bundle")->required()->check(CLI::ExistingFile);
    ing->add_option("--out", ing_out, "output transient file")->required();
    ing->add_option("--bin-width", ing_opt.target_bin_width, "target bin width in seconds")->capture_default_str();
    ing->add_option("--direct-cut", ing_opt.direct_cut_bins, "leading output bins to zero")->capture_default_str();
    ing->add_option("--origin-z", ing_opt.volume_origin_z, "depth of the hidden volume's front face")->capture_default_str();
    ing->add_option("--depth-voxels", ing_opt.depth_voxels, "voxels along depth (0: same as lateral)");

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "reconstruct a hidden volume from a transient image");
    std::string rec_in, rec_out, rec_method;
    detail::SolverFlags rec_flags;
    rec->add_option("--input", rec_in, "transient image")->required()->check(CLI::ExistingFile);
    rec->add_option("--out", rec_out, "output directory")->required();
    rec->add_option("--method", rec_method, "bp, fbp, linear or factored")
        ->required()
        ->check(CLI::IsMember({"bp", "fbp", "linear", "factored"}));
    rec_flags.attach(rec);

    // eval
    auto* ev = app.add_subcommand("eval", "score a reconstruction against a ground-truth volume");
    std::string ev_est, ev_truth, ev_out, ev_label = "Lin";
    ev->add_option("--estimate", ev_est, "estimated volume")->required()->check(CLI::ExistingFile);
    ev->add_option("--truth", ev_truth, "ground-truth volume")->required()->check(CLI::ExistingFile);
    ev->add_option("--method", ev_label, "method label for the report")
        ->check(CLI::IsMember({"BP", "FBP", "Lin", "Factored", "Lin w/ V", "Lin w/ N+V"}))
        ->capture_default_str();
    ev->add_option("--out", ev_out, "report file (JSON lines)");

    // render
    auto* ren = app.add_subcommand("render", "maximum intensity projection of a volume as a PGM image");
    std::string ren_in, ren_out, ren_axis = "z";
    ren->add_option("--volume", ren_in, "volume file")->required()->check(CLI::ExistingFile);
    ren->add_option("--out", ren_out, "output image (.pgm)")->required();
    ren->add_option("--axis", ren_axis, "projection axis")->check(CLI::IsMember({"x", "y", "z"}))->capture_default_str();

    // bench
    auto* ben = app.add_subcommand("bench", "run the bundled scene suite and report PSNR per method");
    std::string ben_out, ben_scenes, ben_methods, ben_shading = "isotropic";
    std::uint32_t ben_n = 16;
    std::optional<double> ben_photons;
    std::uint64_t ben_seed = 0;
    detail::SolverFlags ben_flags;
    ben->add_option("--out", ben_out, "output directory")->required();
    ben->add_option("--n", ben_n, "samples per wall axis")->capture_default_str();
    ben->add_option("--scene-shading", ben_shading, "isotropic or lambertian")
        ->check(CLI::IsMember({"isotropic", "lambertian"}))
        ->capture_default_str();
    ben->add_option("--scenes", ben_scenes, "comma-separated scene names (default: all)");
    ben->add_option("--methods", ben_methods, "comma-separated method labels (default: all)");
    ben->add_option("--photons", ben_photons, "Poisson noise level (photons at peak)");
    ben->add_option("--bench-seed", ben_seed, "seed for noise and initialization")->capture_default_str();
    ben_flags.attach(ben);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    manifest.started = utc_timestamp();
    std::filesystem::path default_manifest;

    try {
        if (*sim) {
            const SceneSpec spec = scene_from_json(load_json(sim_scene));
            SceneSpec used = spec;
            if (sim_photons) used.photons_at_peak = *sim_photons;
            if (sim_seed) used.noise_seed = *sim_seed;
            const auto ras = rasterize_scene(used.scene, used.geometry);
            const auto vis = ground_truth_visibility(ras.albedo, used.geometry, used.scene.occluder_threshold,
                                                     used.rays_per_pair);
            TransientImage tau = forward_transient(FactoredModel{used.geometry, vis, ras.normals, used.shading}, ras.albedo);
            if (used.photons_at_peak) tau = add_poisson_noise(tau, *used.photons_at_peak, used.noise_seed);

            const std::filesystem::path dir(sim_out);
            detail::ensure_dir(dir);
            write_transient(dir / "transient.trn", tau);
            write_volume(dir / "truth.vol", ras.albedo);
            write_visibility(dir / "visibility.vis", used.geometry, vis);
            write_normals(dir / "normals.nrm", used.geometry, ras.normals);
            manifest.config = scene_to_json(used);
            manifest.seed = used.noise_seed;
            for (const char* f : {"transient.trn", "truth.vol", "visibility.vis", "normals.nrm"})
                manifest.outputs.push_back((dir / f).string());
            default_manifest = dir / "manifest.json";
            out << "simulated " << tau.geometry.sample_count() << " samples x " << tau.geometry.time_bins
                << " bins into " << dir.string() << "\n";
        } else if (*ing) {
            const auto res = preprocess_histograms(read_histograms(ing_in), ing_opt);
            write_transient(ing_out, res.transient);
            manifest.config = {{"target_bin_width", ing_opt.target_bin_width},
                               {"direct_cut_bins", ing_opt.direct_cut_bins},
                               {"volume_origin_z", ing_opt.volume_origin_z},
                               {"depth_voxels", ing_opt.depth_voxels},
                               {"input", ing_in}};
            manifest.outputs.push_back(ing_out);
            default_manifest = ing_out + ".manifest.json";
            out << "ingested " << res.transient.geometry.sample_count() << " samples, "
                << res.transient.geometry.time_bins << " bins";
            if (!res.flagged_samples.empty()) out << ", " << res.flagged_samples.size() << " empty samples zero-filled";
            out << "\n";
        } else if (*rec) {
            const SolverSpec solver = rec_flags.resolve();
            const TransientImage tau = read_transient(rec_in);
            const std::filesystem::path dir(rec_out);
            detail::ensure_dir(dir);
            manifest.config = solver_to_json(solver);
            manifest.config["method"] = rec_method;
            manifest.config["input"] = rec_in;
            AlbedoVolume vol;
            if (rec_method == "bp") {
                vol = backproject(tau);
            } else if (rec_method == "fbp") {
                vol = filtered_backproject(tau, solver.fbp_quantile);
            } else if (rec_method == "linear") {
                vol = admm_linear_solve(FactoredModel::unoccluded_isotropic(tau.geometry), tau, solver.linear);
            } else {
                manifest.seed = solver.factored.rng_seed;
                auto est = als_factorize(tau, solver.factored);
                vol = std::move(est.albedo);
                write_visibility(dir / "visibility.vis", tau.geometry, est.visibility);
                write_normals(dir / "normals.nrm", tau.geometry, est.normals);
                detail::write_text(dir / "objective_trace.json",
                                   Json{{"objective_trace", est.objective_trace}, {"diagnostics", est.diagnostics}}.dump(2) +
                                       "\n");
                for (const char* f : {"visibility.vis", "normals.nrm", "objective_trace.json"})
                    manifest.outputs.push_back((dir / f).string());
                out << "objective trace:";
                for (double j : est.objective_trace) out << ' ' << j;
                out << "\n";
            }
            write_volume(dir / "volume.vol", vol);
            manifest.outputs.insert(manifest.outputs.begin(), (dir / "volume.vol").string());
            default_manifest = dir / "manifest.json";
            out << "wrote " << (dir / "volume.vol").string() << "\n";
        } else if (*ev) {
            const auto est = read_volume(ev_est);
            const auto truth = read_volume(ev_truth);
            EvalReport rep;
            EvalRow row;
            row.scene = std::filesystem::path(ev_truth).stem().string();
            row.method = *method_from_label(ev_label);
            row.psnr = psnr(est, truth);
            rep.rows.push_back(row);
            rep.scaling_convention = "no rescaling";
            out << report_table(rep);
            manifest.config = {{"estimate", ev_est}, {"truth", ev_truth}, {"method", ev_label}};
            if (!ev_out.empty()) {
                detail::write_text(ev_out, report_jsonl(rep));
                manifest.outputs.push_back(ev_out);
                default_manifest = ev_out + ".manifest.json";
            }
        } else if (*ren) {
            render_mip(read_volume(ren_in), detail::axis_from(ren_axis), ren_out);
            manifest.config = {{"volume", ren_in}, {"axis", ren_axis}};
            manifest.outputs.push_back(ren_out);
            default_manifest = ren_out + ".manifest.json";
        } else if (*ben) {
            BenchmarkConfig bc;
            bc.solver = ben_flags.resolve();
            bc.photons_at_peak = ben_photons;
            auto scenes = benchmark_scenes(ben_n, detail::shading_from(ben_shading));
            if (!ben_scenes.empty()) {
                const auto wanted = detail::split_list(ben_scenes);
                std::vector<BenchmarkScene> picked;
                for (const auto& w : wanted) {
                    auto it = std::find_if(scenes.begin(), scenes.end(), [&](const auto& s) { return s.name == w; });
                    if (it == scenes.end()) throw CLI::ValidationError("--scenes", "unknown scene '" + w + "'");
                    picked.push_back(*it);
                }
                scenes = std::move(picked);
            }
            std::vector<Method> methods = all_methods();
            if (!ben_methods.empty()) {
                methods.clear();
                for (const auto& label : detail::split_list(ben_methods)) {
                    const auto m = method_from_label(label);
                    if (!m) throw CLI::ValidationError("--methods", "unknown method '" + label + "'");
                    methods.push_back(*m);
                }
            }
            const EvalReport rep = run_benchmark(scenes, methods, bc, ben_seed);
            const std::filesystem::path dir(ben_out);
            detail::ensure_dir(dir);
            detail::write_text(dir / "report.jsonl", report_jsonl(rep));
            detail::write_text(dir / "report.txt", report_table(rep));
            out << report_table(rep);
            manifest.config = solver_to_json(bc.solver);
            manifest.config["n"] = ben_n;
            manifest.config["scene_shading"] = ben_shading;
            manifest.config["photons_at_peak"] = ben_photons ? Json(*ben_photons) : Json(nullptr);
            manifest.seed = ben_seed;
            manifest.outputs = {(dir / "report.jsonl").string(), (dir / "report.txt").string()};
            default_manifest = dir / "manifest.json";
        }
        manifest.finished = utc_timestamp();
        const std::filesystem::path mpath = manifest_path.empty() ? default_manifest : std::filesystem::path(manifest_path);
        if (!mpath.empty()) manifest.save(mpath);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const FormatError& e) {
        err << "file error: " << e.what() << "\n";
        return e.kind == FormatErrorKind::VersionMismatch ? kExitVersion : kExitFormat;
    } catch (const ShapeError& e) {
        err << "shape error: " << e.what() << "\n";
        return kExitShape;
    } catch (const GeometryError& e) {
        err << "geometry error: " << e.what() << "\n";
        return kExitShape;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

}  // namespace nlos
