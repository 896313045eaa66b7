#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "nlos/config.hpp"
#include "nlos/core.hpp"
#include "nlos/forward.hpp"
#include "nlos/recon_factored.hpp"
#include "nlos/recon_linear.hpp"
#include "nlos/scene.hpp"

namespace nlos {

struct PsnrValue {
    double db = 0.0;
    bool infinite = false;
    double mse = 0.0;
};

/// 10 log10(peak^2 / MSE) with peak = max(truth).
inline PsnrValue psnr(const AlbedoVolume& estimate, const AlbedoVolume& truth) {
    if (estimate.size() != truth.size() || !(estimate.geometry.voxels == truth.geometry.voxels))
        throw ShapeError("estimate and truth volumes differ in shape");
    if (truth.size() == 0) throw ShapeError("empty volume");
    const double peak = *std::max_element(truth.data.begin(), truth.data.end());
    if (!(peak > 0.0)) throw Error("PSNR needs a truth volume with a positive peak");
    double sse = 0.0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
        const double d = estimate[j] - truth[j];
        sse += d * d;
    }
    PsnrValue p;
    p.mse = sse / static_cast<double>(truth.size());
    if (p.mse == 0.0) {
        p.infinite = true;
        p.db = std::numeric_limits<double>::infinity();
    } else {
        p.db = 10.0 * std::log10(peak * peak / p.mse);
    }
    return p;
}

/// Least-squares gain c minimizing ||c * estimate - truth||; used to put
/// unitless reconstructions (BP, FBP) on the albedo scale before scoring.
inline AlbedoVolume fit_scale(const AlbedoVolume& estimate, const AlbedoVolume& truth) {
    const double num = detail::dot(estimate.data, truth.data);
    const double den = detail::squared_norm(estimate.data);
    AlbedoVolume out = estimate;
    if (den > 0.0)
        for (double& v : out.data) v *= num / den;
    return out;
}

/// Linear reconstruction with the visibility (and optionally the normals)
/// fixed to their true values. Without normals the model is isotropic.
inline AlbedoVolume reference_solution(const TransientImage& tau, const ScanGeometry& geometry,
                                       const VisibilityField& gt_visibility, const NormalField* gt_normals,
                                       const LinearSolverConfig& cfg) {
    if (!(tau.geometry == geometry)) throw ShapeError("transient geometry differs from the reference geometry");
    FactoredModel model = FactoredModel::unoccluded_isotropic(geometry);
    model.visibility = gt_visibility;
    if (gt_normals) {
        model.normals = *gt_normals;
        model.shading = Shading::Lambertian;
    }
    return admm_linear_solve(model, tau, cfg);
}

// ---------------------------------------------------------------------------
// Benchmark scenes
// ---------------------------------------------------------------------------

struct BenchmarkScene {
    std::string name;
    SceneSpec spec;
    bool occluded = true;
};

namespace detail {

inline double angle_u(const Vec3& n) { return std::atan2(n.y, n.x); }
inline double angle_v(const Vec3& n) { return std::acos(std::clamp(n.z, -1.0, 1.0)); }

// Wall-facing hemispherical shell, one voxel thick, with radial normals.
inline std::vector<Primitive> shell_cap(const ScanGeometry& g, const Vec3& center, double radius) {
    std::vector<Primitive> out;
    for (std::size_t j = 0; j < g.voxel_count(); ++j) {
        const Vec3 d = g.voxel_center(j) - center;
        const double r = norm(d);
        if (d.z > 0.0 || r > radius || r <= radius - g.voxel_pitch) continue;
        const auto c = g.voxel_coords(j);
        const Vec3 n = d / r;
        out.push_back(VoxelImport{{{c.x, c.y, c.z}}, Surface{1.0, angle_u(n), angle_v(n)}});
    }
    return out;
}

}  // namespace detail

/// Desk-scale scene suite: single plane, two planes, plane and emblem, two
/// blobs and two interlocking patches, all sized relative to a unit wall.
inline constexpr double kBenchmarkBinsPerVoxel = 16.0;

inline std::vector<BenchmarkScene> benchmark_scenes(std::uint32_t n, Shading shading) {
    const ScanGeometry g = ScanGeometry::cube(n, 1.0, 0.5, kBenchmarkBinsPerVoxel);
    auto zc = [&](double frac) { return g.depth_center(static_cast<std::uint32_t>(frac * n)); };
    auto spec = [&](std::vector<Primitive> prims) {
        SceneSpec s;
        s.geometry = g;
        s.shading = shading;
        s.scene.primitives = std::move(prims);
        return s;
    };
    const double q = g.voxel_pitch;
    std::vector<BenchmarkScene> out;

    out.push_back({"single_plane", spec({RectPatch{{0.0, 0.0, zc(0.5)}, 0.6, 0.6, {}}}), false});

    out.push_back({"two_planes",
                   spec({RectPatch{{-0.1, 0.0, zc(0.25)}, 0.4, 0.5, {}},
                         RectPatch{{0.0, 0.0, zc(0.75)}, 0.75, 0.75, {}}}),
                   true});

    // A plus-shaped emblem in front of a backdrop.
    out.push_back({"plane_emblem",
                   spec({RectPatch{{0.0, 0.0, zc(0.75)}, 0.75, 0.75, {}},
                         RectPatch{{0.0, 0.0, zc(0.25)}, 0.5, 2.0 * q, {}},
                         RectPatch{{0.0, 0.0, zc(0.25)}, 2.0 * q, 0.5, {}}}),
                   true});

    {
        auto front = detail::shell_cap(g, {-0.12, -0.05, zc(0.25) + 0.2}, 0.2);
        auto rear = detail::shell_cap(g, {0.12, 0.08, zc(0.6) + 0.25}, 0.25);
        std::vector<Primitive> prims = std::move(rear);
        prims.insert(prims.end(), front.begin(), front.end());
        out.push_back({"two_blobs", spec(std::move(prims)), true});
    }

    // A wall-facing bar crossed by a bar tilted 45 degrees about the y axis.
    {
        const double tilt = std::numbers::pi - std::numbers::pi / 4.0;
        out.push_back({"interlocking",
                       spec({RectPatch{{0.0, 0.0, zc(0.5)}, 0.7, 0.25, {}},
                             RectPatch{{0.0, 0.0, zc(0.5)}, 0.6, 0.6, Surface{1.0, 0.0, tilt}}}),
                       true});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Benchmark runner
// ---------------------------------------------------------------------------

enum class Method { BP, FBP, Lin, Factored, LinWithV, LinWithNV };

inline const char* method_label(Method m) {
    switch (m) {
        case Method::BP: return "BP";
        case Method::FBP: return "FBP";
        case Method::Lin: return "Lin";
        case Method::Factored: return "Factored";
        case Method::LinWithV: return "Lin w/ V";
        default: return "Lin w/ N+V";
    }
}

inline std::optional<Method> method_from_label(const std::string& s) {
    for (Method m : {Method::BP, Method::FBP, Method::Lin, Method::Factored, Method::LinWithV, Method::LinWithNV})
        if (s == method_label(m)) return m;
    return std::nullopt;
}

inline std::vector<Method> all_methods() {
    return {Method::BP, Method::FBP, Method::Lin, Method::Factored, Method::LinWithV, Method::LinWithNV};
}

struct EvalRow {
    std::string scene;
    Method method = Method::BP;
    std::optional<double> photons_at_peak;
    bool ok = true;
    std::string error;
    PsnrValue psnr;
    double runtime_seconds = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::uint64_t seed = 0;
    std::string peak_convention = "max(truth)";
    std::string scaling_convention = "BP and FBP scaled by the least-squares gain against truth; others unscaled";

    const EvalRow* find(const std::string& scene, Method m, std::optional<double> photons = std::nullopt) const {
        for (const auto& r : rows)
            if (r.scene == scene && r.method == m && r.photons_at_peak == photons) return &r;
        return nullptr;
    }
};

struct BenchmarkConfig {
    SolverSpec solver = default_solver_spec();
    std::optional<double> photons_at_peak;
};

namespace detail {
inline std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    return h;
}
}  // namespace detail

/// Simulates every scene and scores each requested method against the
/// rasterized truth. Failures of a single method end up in its row.
inline EvalReport run_benchmark(const std::vector<BenchmarkScene>& scenes, const std::vector<Method>& methods,
                                const BenchmarkConfig& cfg, std::uint64_t seed) {
    EvalReport report;
    report.seed = seed;
    if (methods.empty()) return report;
    for (const auto& sc : scenes) {
        const auto& g = sc.spec.geometry;
        const auto ras = rasterize_scene(sc.spec.scene, g);
        const auto vis = ground_truth_visibility(ras.albedo, g, sc.spec.scene.occluder_threshold, sc.spec.rays_per_pair);
        const FactoredModel truth{g, vis, ras.normals, sc.spec.shading};
        TransientImage tau = forward_transient(truth, ras.albedo);
        if (cfg.photons_at_peak)
            tau = add_poisson_noise(tau, *cfg.photons_at_peak, seed ^ detail::name_hash(sc.name));

        for (Method m : methods) {
            EvalRow row;
            row.scene = sc.name;
            row.method = m;
            row.photons_at_peak = cfg.photons_at_peak;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                AlbedoVolume est;
                switch (m) {
                    case Method::BP: est = fit_scale(backproject(tau), ras.albedo); break;
                    case Method::FBP: est = fit_scale(filtered_backproject(tau, cfg.solver.fbp_quantile), ras.albedo); break;
                    case Method::Lin:
                        est = admm_linear_solve(FactoredModel::unoccluded_isotropic(g), tau, cfg.solver.linear);
                        break;
                    case Method::Factored: {
                        FactoredSolverConfig fc = cfg.solver.factored;
                        fc.shading = sc.spec.shading;
                        fc.rng_seed = seed;
                        est = als_factorize(tau, fc).albedo;
                        break;
                    }
                    case Method::LinWithV: est = reference_solution(tau, g, vis, nullptr, cfg.solver.linear); break;
                    case Method::LinWithNV:
                        est = reference_solution(tau, g, vis,
                                                 sc.spec.shading == Shading::Lambertian ? &ras.normals : nullptr,
                                                 cfg.solver.linear);
                        break;
                }
                row.psnr = psnr(est, ras.albedo);
            } catch (const std::exception& e) {
                row.ok = false;
                row.error = e.what();
            }
            row.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report formatting
// ---------------------------------------------------------------------------

inline Json row_to_json(const EvalRow& r) {
    Json j = {{"scene", r.scene},
              {"method", method_label(r.method)},
              {"ok", r.ok},
              {"runtime_s", r.runtime_seconds}};
    j["photons_at_peak"] = r.photons_at_peak ? Json(*r.photons_at_peak) : Json(nullptr);
    if (r.ok) {
        j["psnr_db"] = r.psnr.infinite ? Json(nullptr) : Json(r.psnr.db);
        j["psnr_infinite"] = r.psnr.infinite;
        j["mse"] = r.psnr.mse;
    } else {
        j["error"] = r.error;
    }
    return j;
}

/// One JSON object per line.
inline std::string report_jsonl(const EvalReport& rep) {
    std::string out;
    for (const auto& r : rep.rows) {
        Json j = row_to_json(r);
        j["seed"] = rep.seed;
        j["peak"] = rep.peak_convention;
        out += j.dump() + "\n";
    }
    return out;
}

inline std::string report_table(const EvalReport& rep) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-16s %-12s %-10s %10s %12s %9s\n", "scene", "method", "photons", "PSNR[dB]",
                  "MSE", "time[s]");
    out += line;
    for (const auto& r : rep.rows) {
        const std::string photons = r.photons_at_peak ? std::to_string(static_cast<long long>(*r.photons_at_peak)) : "-";
        if (!r.ok) {
            std::snprintf(line, sizeof line, "%-16s %-12s %-10s %10s %12s %9.2f  (%s)\n", r.scene.c_str(),
                          method_label(r.method), photons.c_str(), "failed", "-", r.runtime_seconds, r.error.c_str());
        } else if (r.psnr.infinite) {
            std::snprintf(line, sizeof line, "%-16s %-12s %-10s %10s %12.4e %9.2f\n", r.scene.c_str(),
                          method_label(r.method), photons.c_str(), "inf", r.psnr.mse, r.runtime_seconds);
        } else {
            std::snprintf(line, sizeof line, "%-16s %-12s %-10s %10.2f %12.4e %9.2f\n", r.scene.c_str(),
                          method_label(r.method), photons.c_str(), r.psnr.db, r.psnr.mse, r.runtime_seconds);
        }
        out += line;
    }
    out += "peak = " + rep.peak_convention + "; " + rep.scaling_convention + "\n";
    return out;
}

}  // namespace nlos
