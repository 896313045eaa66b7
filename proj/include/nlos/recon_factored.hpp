#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nlos/core.hpp"
#include "nlos/forward.hpp"
#include "nlos/parallel.hpp"
#include "nlos/recon_linear.hpp"

namespace nlos {

/// A dense visibility field would not fit in the configured memory budget.
struct ResourceError : Error {
    using Error::Error;
};

enum class StepRule { Fixed, Backtracking, BarzilaiBorwein };

struct FactoredSolverConfig {
    std::uint32_t outer_iterations = 5;
    std::uint32_t albedo_inner_iterations = 20;
    std::uint32_t visibility_gradient_steps = 10;
    std::uint32_t normal_solver_iterations = 10;
    StepRule step_rule = StepRule::BarzilaiBorwein;
    double initial_step = 1.0;
    std::uint64_t rng_seed = 0;
    Shading shading = Shading::Lambertian;
    std::size_t visibility_byte_budget = std::size_t{4} << 30;
    LinearSolverConfig linear_config{};

    void validate() const {
        if (outer_iterations < 1) throw Error("outer_iterations must be >= 1");
        if (albedo_inner_iterations < 1) throw Error("albedo_inner_iterations must be >= 1");
        if (!(initial_step > 0.0) || !std::isfinite(initial_step)) throw Error("initial_step must be > 0");
        linear_config.validate();
    }
};

struct FactoredEstimate {
    AlbedoVolume albedo;
    NormalField normals;
    VisibilityField visibility;
    std::vector<double> objective_trace;
    std::vector<std::string> diagnostics;
};

/// Per-voxel partial derivatives of the data term with respect to the normal angles.
struct NormalGradient {
    std::vector<double> du, dv;
};

/// Full cost: ||tau - A(V, n) rho||^2 + lambda_1 ||rho||_1 + lambda_tv TV(rho).
inline double objective(const FactoredModel& model, const TransientImage& tau, const AlbedoVolume& albedo,
                        const LinearSolverConfig& cfg) {
    model.validate();
    detail::check_transient(model, tau);
    detail::check_albedo(model, albedo.data);
    return data_term(model, tau, albedo.data) + prior_value(model.geometry.voxels, albedo.data, cfg);
}

namespace detail {

inline std::vector<double> residual(const FactoredModel& m, std::span<const double> vis, const TransientImage& tau,
                                    std::span<const double> albedo) {
    std::vector<double> r = apply_forward(m, vis, albedo);
    for (std::size_t k = 0; k < r.size(); ++k) r[k] = tau.data[k] - r[k];
    return r;
}

// d J / d V_ij = -2 rho_j shade_ij sum_t res[i, t] T[i, t, j]. Zero where rho_j = 0.
inline std::vector<double> visibility_gradient(const FactoredModel& m, std::span<const double> res,
                                               std::span<const double> albedo) {
    const auto& g = m.geometry;
    const PathTables tab(m);
    const std::size_t nv = g.voxel_count(), nt = g.time_bins;
    std::vector<std::size_t> active;
    for (std::size_t j = 0; j < nv; ++j)
        if (albedo[j] != 0.0) active.push_back(j);
    std::vector<double> grad(g.sample_count() * nv, 0.0);
    parallel_for(g.sample_count(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const double* row = res.data() + i * nt;
            for (std::size_t j : active) {
                const PathTerm p = tab.term(i, j);
                if (!p.in_range) continue;
                const double corr = p.coef_lo * row[p.bin_lo] + p.coef_hi * row[p.bin_lo + 1];
                grad[i * nv + j] = -2.0 * corr * tab.shade(p.omega, j) * albedo[j];
            }
        }
    });
    return grad;
}

// Chain rule through N_ij = max(0, omega . n(u, v)); the clamp contributes zero
// where omega . n <= 0.
inline NormalGradient normal_gradient(const FactoredModel& m, std::span<const double> vis,
                                      std::span<const double> res, std::span<const double> albedo) {
    const auto& g = m.geometry;
    const std::size_t nv = g.voxel_count(), nt = g.time_bins;
    NormalGradient out{std::vector<double>(nv, 0.0), std::vector<double>(nv, 0.0)};
    if (m.shading == Shading::Isotropic) return out;
    const PathTables tab(m);
    std::vector<Vec3> dn_du(nv), dn_dv(nv);
    for (std::size_t j = 0; j < nv; ++j) {
        dn_du[j] = normal_du(m.normals.u[j], m.normals.v[j]);
        dn_dv[j] = normal_dv(m.normals.u[j], m.normals.v[j]);
    }
    parallel_for(nv, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = 0; i < g.sample_count(); ++i) {
            const double* row = res.data() + i * nt;
            const double* vrow = vis.empty() ? nullptr : vis.data() + i * nv;
            for (std::size_t j = begin; j < end; ++j) {
                if (albedo[j] == 0.0) continue;
                const PathTerm p = tab.term(i, j);
                if (!p.in_range || dot(p.omega, tab.normals[j]) <= 0.0) continue;
                const double corr = p.coef_lo * row[p.bin_lo] + p.coef_hi * row[p.bin_lo + 1];
                const double w = -2.0 * corr * (vrow ? vrow[j] : 1.0) * albedo[j];
                out.du[j] += w * dot(p.omega, dn_du[j]);
                out.dv[j] += w * dot(p.omega, dn_dv[j]);
            }
        }
    });
    return out;
}

}  // namespace detail

/// Gradient of the data term with respect to every visibility entry, row-major [sample][voxel].
inline std::vector<double> grad_visibility(const FactoredModel& model, const TransientImage& tau,
                                           const AlbedoVolume& albedo) {
    model.validate();
    detail::check_transient(model, tau);
    detail::check_albedo(model, albedo.data);
    const auto res = detail::residual(model, model.visibility.data, tau, albedo.data);
    return detail::visibility_gradient(model, res, albedo.data);
}

inline NormalGradient grad_normals(const FactoredModel& model, const TransientImage& tau, const AlbedoVolume& albedo) {
    model.validate();
    detail::check_transient(model, tau);
    detail::check_albedo(model, albedo.data);
    const auto res = detail::residual(model, model.visibility.data, tau, albedo.data);
    return detail::normal_gradient(model, model.visibility.data, res, albedo.data);
}

struct VisibilityUpdate {
    VisibilityField visibility;
    std::vector<double> data_trace;  // data term after each accepted step, starting with the initial value
    std::vector<std::string> diagnostics;
};

/// Projected gradient descent on V over the box [0, 1] with rho and n fixed.
///
/// BarzilaiBorwein opens with the exact minimizer of the quadratic along the
/// feasible steepest-descent direction, then uses BB1 steps; it and Backtracking
/// both shrink the step (Armijo, c = 1e-4, factor 0.5) until the projected step
/// decreases J. Fixed takes initial_step unconditionally.
inline VisibilityUpdate update_visibility_detailed(const FactoredModel& model, const TransientImage& tau,
                                                   const AlbedoVolume& albedo, const FactoredSolverConfig& cfg) {
    model.validate();
    detail::check_transient(model, tau);
    detail::check_albedo(model, albedo.data);
    constexpr double kArmijo = 1e-4;
    constexpr double kShrink = 0.5;
    constexpr double kMinStep = 1e-14;

    VisibilityUpdate out;
    std::vector<double> vis = model.has_visibility() ? model.visibility.data
                                                     : std::vector<double>(model.geometry.sample_count() *
                                                                               model.geometry.voxel_count(),
                                                                           1.0);
    for (double& v : vis) v = std::clamp(v, 0.0, 1.0);
    auto project_step = [](std::span<const double> from, std::span<const double> grad, double alpha) {
        std::vector<double> to(from.size());
        for (std::size_t k = 0; k < from.size(); ++k) to[k] = std::clamp(from[k] - alpha * grad[k], 0.0, 1.0);
        return to;
    };

    std::vector<double> res = detail::residual(model, vis, tau, albedo.data);
    double value = detail::squared_norm(res);
    out.data_trace.push_back(value);
    std::vector<double> prev_vis, prev_grad;
    double alpha = cfg.initial_step;

    for (std::uint32_t step = 0; step < cfg.visibility_gradient_steps; ++step) {
        std::vector<double> grad = detail::visibility_gradient(model, res, albedo.data);
        // Components that would push past a bound do not move under projection.
        std::vector<double> free_grad = grad;
        for (std::size_t k = 0; k < vis.size(); ++k)
            if ((vis[k] >= 1.0 && grad[k] < 0.0) || (vis[k] <= 0.0 && grad[k] > 0.0)) free_grad[k] = 0.0;
        const double free_norm2 = detail::squared_norm(free_grad);
        if (!(free_norm2 > 0.0)) break;

        if (cfg.step_rule == StepRule::BarzilaiBorwein) {
            if (prev_vis.empty()) {
                // J(V - a g) = ||res + a d||^2 with d = A(g) rho, minimized at a = -<res, d> / <d, d>.
                const auto d = detail::apply_forward(model, free_grad, albedo.data);
                const double dd = detail::squared_norm(d);
                const double rd = detail::dot(res, d);
                alpha = dd > 0.0 && rd < 0.0 ? -rd / dd : cfg.initial_step;
            } else {
                double ss = 0.0, sy = 0.0;
                for (std::size_t k = 0; k < vis.size(); ++k) {
                    const double sk = vis[k] - prev_vis[k];
                    ss += sk * sk;
                    sy += sk * (grad[k] - prev_grad[k]);
                }
                if (sy > 0.0 && ss > 0.0) alpha = ss / sy;
            }
        } else {
            alpha = cfg.initial_step;
        }

        std::vector<double> trial, trial_res;
        double trial_value = 0.0;
        bool accepted = false;
        while (alpha >= kMinStep) {
            trial = project_step(vis, grad, alpha);
            trial_res = detail::residual(model, trial, tau, albedo.data);
            trial_value = detail::squared_norm(trial_res);
            if (cfg.step_rule == StepRule::Fixed) {
                accepted = true;
                break;
            }
            double decrease = 0.0;
            for (std::size_t k = 0; k < vis.size(); ++k) decrease += grad[k] * (trial[k] - vis[k]);
            if (trial_value <= value + kArmijo * decrease) {
                accepted = true;
                break;
            }
            alpha *= kShrink;
        }
        if (!accepted) {
            out.diagnostics.push_back("visibility step " + std::to_string(step + 1) +
                                      ": step length underflow, keeping current iterate");
            break;
        }
        prev_vis = std::move(vis);
        prev_grad = std::move(grad);
        vis = std::move(trial);
        res = std::move(trial_res);
        value = trial_value;
        out.data_trace.push_back(value);
    }
    out.visibility = VisibilityField(model.geometry.sample_count(), model.geometry.voxel_count());
    out.visibility.data = std::move(vis);
    return out;
}

inline VisibilityField update_visibility(const FactoredModel& model, const TransientImage& tau,
                                         const AlbedoVolume& albedo, const FactoredSolverConfig& cfg) {
    return update_visibility_detailed(model, tau, albedo, cfg).visibility;
}

struct NormalUpdate {
    NormalField normals;
    std::vector<double> data_trace;
    std::vector<std::string> diagnostics;
};

/// Limited-memory BFGS (history 5) over the angles of voxels with nonzero
/// albedo, with an Armijo backtracking line search. Other voxels do not
/// influence the objective and keep their angles.
inline NormalUpdate update_normals_detailed(const FactoredModel& model, const TransientImage& tau,
                                            const AlbedoVolume& albedo, const FactoredSolverConfig& cfg) {
    model.validate();
    detail::check_transient(model, tau);
    detail::check_albedo(model, albedo.data);
    constexpr std::size_t kHistory = 5;
    constexpr double kArmijo = 1e-4;
    constexpr double kShrink = 0.5;
    constexpr int kMaxShrinks = 40;
    constexpr double kFirstStepRadians = 0.1;

    NormalUpdate out;
    out.normals = model.normals;
    if (model.shading == Shading::Isotropic) return out;

    std::vector<std::size_t> active;
    for (std::size_t j = 0; j < albedo.size(); ++j)
        if (albedo[j] != 0.0) active.push_back(j);
    const std::size_t m = 2 * active.size();
    if (m == 0) return out;

    FactoredModel work = model;
    auto load = [&](std::span<const double> theta) {
        for (std::size_t a = 0; a < active.size(); ++a) {
            work.normals.u[active[a]] = theta[2 * a];
            work.normals.v[active[a]] = theta[2 * a + 1];
        }
    };
    auto evaluate = [&](std::span<const double> theta, std::vector<double>& grad) {
        load(theta);
        const auto res = detail::residual(work, work.visibility.data, tau, albedo.data);
        const auto full = detail::normal_gradient(work, work.visibility.data, res, albedo.data);
        grad.resize(m);
        for (std::size_t a = 0; a < active.size(); ++a) {
            grad[2 * a] = full.du[active[a]];
            grad[2 * a + 1] = full.dv[active[a]];
        }
        return detail::squared_norm(res);
    };

    std::vector<double> theta(m);
    for (std::size_t a = 0; a < active.size(); ++a) {
        theta[2 * a] = model.normals.u[active[a]];
        theta[2 * a + 1] = model.normals.v[active[a]];
    }
    std::vector<double> grad;
    double value = evaluate(theta, grad);
    out.data_trace.push_back(value);

    std::deque<std::vector<double>> s_hist, y_hist;
    std::deque<double> rho_hist;
    for (std::uint32_t it = 0; it < cfg.normal_solver_iterations; ++it) {
        if (!(detail::squared_norm(grad) > 0.0)) break;

        // Two-loop recursion for d = -H g.
        std::vector<double> d = grad;
        std::vector<double> alphas(s_hist.size());
        for (std::size_t k = s_hist.size(); k-- > 0;) {
            alphas[k] = rho_hist[k] * detail::dot(s_hist[k], d);
            for (std::size_t q = 0; q < m; ++q) d[q] -= alphas[k] * y_hist[k][q];
        }
        double gamma = 1.0;
        if (!s_hist.empty()) gamma = detail::dot(s_hist.back(), y_hist.back()) / detail::squared_norm(y_hist.back());
        for (double& q : d) q *= gamma;
        for (std::size_t k = 0; k < s_hist.size(); ++k) {
            const double beta = rho_hist[k] * detail::dot(y_hist[k], d);
            for (std::size_t q = 0; q < m; ++q) d[q] += (alphas[k] - beta) * s_hist[k][q];
        }
        for (double& q : d) q = -q;

        double slope = detail::dot(grad, d);
        if (s_hist.empty() || !(slope < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            double gmax = 0.0;
            for (double q : grad) gmax = std::max(gmax, std::abs(q));
            for (std::size_t q = 0; q < m; ++q) d[q] = -grad[q] * (kFirstStepRadians / gmax);
            slope = detail::dot(grad, d);
        }

        double step = 1.0;
        std::vector<double> trial(m), trial_grad;
        double trial_value = value;
        bool accepted = false;
        for (int shrink = 0; shrink <= kMaxShrinks; ++shrink) {
            for (std::size_t q = 0; q < m; ++q) trial[q] = theta[q] + step * d[q];
            trial_value = evaluate(trial, trial_grad);
            if (trial_value <= value + kArmijo * step * slope) {
                accepted = true;
                break;
            }
            step *= kShrink;
        }
        if (!accepted) {
            out.diagnostics.push_back("normal step " + std::to_string(it + 1) +
                                      ": line search failed, keeping current iterate");
            break;
        }

        std::vector<double> s(m), y(m);
        for (std::size_t q = 0; q < m; ++q) {
            s[q] = trial[q] - theta[q];
            y[q] = trial_grad[q] - grad[q];
        }
        const double sy = detail::dot(s, y);
        if (sy > 1e-300) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (s_hist.size() > kHistory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        theta = std::move(trial);
        grad = std::move(trial_grad);
        value = trial_value;
        out.data_trace.push_back(value);
    }
    load(theta);
    out.normals = work.normals;
    return out;
}

inline NormalField update_normals(const FactoredModel& model, const TransientImage& tau, const AlbedoVolume& albedo,
                                  const FactoredSolverConfig& cfg) {
    return update_normals_detailed(model, tau, albedo, cfg).normals;
}

namespace detail {
inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}
}  // namespace detail

/// Alternating minimization over albedo (ADMM), visibility (projected gradient)
/// and normals (L-BFGS), starting from V = 1 and random albedo and normals.
///
/// The ADMM state carries over between outer iterations and each sub-step only
/// accepts iterates that do not increase the objective, so objective_trace is
/// nonincreasing.
inline FactoredEstimate als_factorize(const TransientImage& tau, const FactoredSolverConfig& cfg) {
    cfg.validate();
    const ScanGeometry& g = tau.geometry;
    g.validate();
    detail::check_nonnegative(tau);
    const std::size_t vis_bytes = g.sample_count() * g.voxel_count() * sizeof(double);
    if (vis_bytes > cfg.visibility_byte_budget)
        throw ResourceError("visibility field needs " + std::to_string(vis_bytes) + " bytes, budget is " +
                            std::to_string(cfg.visibility_byte_budget));

    std::mt19937_64 rng(cfg.rng_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AlbedoVolume albedo(g);
    for (double& v : albedo.data) v = unit(rng);
    NormalField normals(g.voxels, 0.0, 0.0);
    for (std::size_t j = 0; j < normals.size(); ++j) {
        normals.u[j] = 2.0 * std::numbers::pi * unit(rng);
        normals.v[j] = 0.5 * std::numbers::pi * (1.0 + unit(rng));  // wall-facing hemisphere
    }
    FactoredModel model{g, VisibilityField::ones(g), std::move(normals), cfg.shading};

    LinearSolverConfig inner = cfg.linear_config;
    inner.iterations = cfg.albedo_inner_iterations;
    AdmmState admm;

    FactoredEstimate est;
    for (std::uint32_t k = 0; k < cfg.outer_iterations; ++k) {
        albedo = admm_linear_solve_detailed(model, tau, inner, &albedo, &admm).albedo;

        auto vis_step = update_visibility_detailed(model, tau, albedo, cfg);
        model.visibility = std::move(vis_step.visibility);
        for (auto& d : vis_step.diagnostics) est.diagnostics.push_back("outer " + std::to_string(k + 1) + ": " + d);

        if (cfg.shading == Shading::Lambertian) {
            auto n_step = update_normals_detailed(model, tau, albedo, cfg);
            model.normals = std::move(n_step.normals);
            for (auto& d : n_step.diagnostics) est.diagnostics.push_back("outer " + std::to_string(k + 1) + ": " + d);
        }

        const double j_value = objective(model, tau, albedo, cfg.linear_config);
        if (!std::isfinite(j_value) || !detail::all_finite(albedo.data) || !detail::all_finite(model.visibility.data) ||
            !detail::all_finite(model.normals.u) || !detail::all_finite(model.normals.v))
            throw DivergenceError("factored solver produced non-finite values at outer iteration " +
                                  std::to_string(k + 1));
        est.objective_trace.push_back(j_value);
    }
    est.albedo = std::move(albedo);
    est.normals = std::move(model.normals);
    est.visibility = std::move(model.visibility);
    return est;
}

}  // namespace nlos
