#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlos/core.hpp"
#include "nlos/forward.hpp"

namespace nlos {

/// The data-fidelity term blew up during an iterative solve.
struct DivergenceError : Error {
    using Error::Error;
};

struct LinearSolverConfig {
    std::uint32_t iterations = 150;
    double sparsity_weight = 0.1;
    double tv_weight = 0.001;
    double admm_penalty = 1.0;
    std::uint32_t cg_iterations = 10;
    bool nonnegativity = true;

    void validate() const {
        if (iterations < 1 || cg_iterations < 1) throw Error("linear solver iteration counts must be >= 1");
        if (!std::isfinite(sparsity_weight) || sparsity_weight < 0.0 || !std::isfinite(tv_weight) || tv_weight < 0.0)
            throw Error("linear solver weights must be finite and >= 0");
        if (!std::isfinite(admm_penalty) || !(admm_penalty > 0.0)) throw Error("admm_penalty must be > 0");
    }
};

// ---------------------------------------------------------------------------
// Vector helpers and the operators behind the priors
// ---------------------------------------------------------------------------

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = a[k] - b[k];
        s += d * d;
    }
    return s;
}

}  // namespace detail

/// Proximal operator of t * |x|.
inline double soft_threshold(double x, double t) {
    return x > t ? x - t : (x < -t ? x + t : 0.0);
}

/// Forward differences along x, y, z (zero at the far boundary); output is
/// three consecutive blocks of voxel_count entries.
inline std::vector<double> gradient_3d(const GridDims& d, std::span<const double> x) {
    const std::size_t n = d.count();
    std::vector<double> out(3 * n, 0.0);
    const std::size_t sx = static_cast<std::size_t>(d.ny) * d.nz, sy = d.nz;
    for (std::uint32_t a = 0; a < d.nx; ++a)
        for (std::uint32_t b = 0; b < d.ny; ++b)
            for (std::uint32_t c = 0; c < d.nz; ++c) {
                const std::size_t j = a * sx + b * sy + c;
                if (a + 1 < d.nx) out[j] = x[j + sx] - x[j];
                if (b + 1 < d.ny) out[n + j] = x[j + sy] - x[j];
                if (c + 1 < d.nz) out[2 * n + j] = x[j + 1] - x[j];
            }
    return out;
}

/// Transpose of gradient_3d.
inline std::vector<double> gradient_3d_adjoint(const GridDims& d, std::span<const double> g) {
    const std::size_t n = d.count();
    std::vector<double> out(n, 0.0);
    const std::size_t sx = static_cast<std::size_t>(d.ny) * d.nz, sy = d.nz;
    for (std::uint32_t a = 0; a < d.nx; ++a)
        for (std::uint32_t b = 0; b < d.ny; ++b)
            for (std::uint32_t c = 0; c < d.nz; ++c) {
                const std::size_t j = a * sx + b * sy + c;
                if (a + 1 < d.nx) {
                    out[j + sx] += g[j];
                    out[j] -= g[j];
                }
                if (b + 1 < d.ny) {
                    out[j + sy] += g[n + j];
                    out[j] -= g[n + j];
                }
                if (c + 1 < d.nz) {
                    out[j + 1] += g[2 * n + j];
                    out[j] -= g[2 * n + j];
                }
            }
    return out;
}

/// Anisotropic total variation: l1 norm of the forward differences.
inline double total_variation(const GridDims& d, std::span<const double> x) {
    double s = 0.0;
    for (double g : gradient_3d(d, x)) s += std::abs(g);
    return s;
}

/// Six-neighbour Laplacian with zero-flux boundaries.
inline std::vector<double> laplacian_3d(const GridDims& d, std::span<const double> x) {
    std::vector<double> out(d.count(), 0.0);
    const std::size_t sx = static_cast<std::size_t>(d.ny) * d.nz, sy = d.nz;
    for (std::uint32_t a = 0; a < d.nx; ++a)
        for (std::uint32_t b = 0; b < d.ny; ++b)
            for (std::uint32_t c = 0; c < d.nz; ++c) {
                const std::size_t j = a * sx + b * sy + c;
                double s = 0.0;
                if (a > 0) s += x[j - sx] - x[j];
                if (a + 1 < d.nx) s += x[j + sx] - x[j];
                if (b > 0) s += x[j - sy] - x[j];
                if (b + 1 < d.ny) s += x[j + sy] - x[j];
                if (c > 0) s += x[j - 1] - x[j];
                if (c + 1 < d.nz) s += x[j + 1] - x[j];
                out[j] = s;
            }
    return out;
}

/// Prior part of the objective: lambda_1 ||rho||_1 + lambda_tv TV(rho).
inline double prior_value(const GridDims& d, std::span<const double> x, const LinearSolverConfig& cfg) {
    double l1 = 0.0;
    for (double v : x) l1 += std::abs(v);
    double s = cfg.sparsity_weight * l1;
    if (cfg.tv_weight > 0.0) s += cfg.tv_weight * total_variation(d, x);
    return s;
}

/// ||tau - A rho||^2 for the given model.
inline double data_term(const FactoredModel& model, const TransientImage& tau, std::span<const double> albedo) {
    const auto pred = detail::apply_forward(model, model.visibility.data, albedo);
    return detail::squared_distance(pred, tau.data);
}

/// Conjugate residual iterations for a symmetric positive definite operator.
/// Unlike plain CG, the residual 2-norm is nonincreasing from one iteration to
/// the next. Returns the residual norms, starting with the initial one.
inline std::vector<double> conjugate_residual(const std::function<std::vector<double>(std::span<const double>)>& apply,
                                              std::span<const double> b, std::vector<double>& x,
                                              std::uint32_t iterations) {
    const std::size_t n = b.size();
    std::vector<double> mx = apply(x);
    std::vector<double> r(n);
    for (std::size_t k = 0; k < n; ++k) r[k] = b[k] - mx[k];
    std::vector<double> p = r;
    std::vector<double> mr = apply(r);
    std::vector<double> mp = mr;
    double r_mr = detail::dot(r, mr);
    std::vector<double> norms{std::sqrt(detail::squared_norm(r))};
    for (std::uint32_t it = 0; it < iterations; ++it) {
        const double mp_mp = detail::squared_norm(mp);
        if (!(mp_mp > 0.0) || !(r_mr > 0.0)) break;
        const double alpha = r_mr / mp_mp;
        for (std::size_t k = 0; k < n; ++k) {
            x[k] += alpha * p[k];
            r[k] -= alpha * mp[k];
        }
        norms.push_back(std::sqrt(detail::squared_norm(r)));
        if (it + 1 == iterations) break;
        mr = apply(r);
        const double next = detail::dot(r, mr);
        const double beta = next / r_mr;
        r_mr = next;
        for (std::size_t k = 0; k < n; ++k) {
            p[k] = r[k] + beta * p[k];
            mp[k] = mr[k] + beta * mp[k];
        }
    }
    return norms;
}

// ---------------------------------------------------------------------------
// Backprojection
// ---------------------------------------------------------------------------

namespace detail {
inline void check_nonnegative(const TransientImage& tau) {
    if (std::any_of(tau.data.begin(), tau.data.end(), [](double v) { return !(v >= 0.0); }))
        throw Error("transient image must be nonnegative");
}
}  // namespace detail

/// A^T tau under the unoccluded isotropic model, clamped at zero.
inline AlbedoVolume backproject(const TransientImage& tau) {
    detail::check_nonnegative(tau);
    const auto model = FactoredModel::unoccluded_isotropic(tau.geometry);
    return clamp_nonnegative(adjoint_transient(model, tau));
}

/// Backprojection sharpened by the negative Laplacian, then thresholded at the
/// given quantile of the remaining positive values.
inline AlbedoVolume filtered_backproject(const TransientImage& tau, double threshold_quantile = 0.0) {
    if (!(threshold_quantile >= 0.0 && threshold_quantile < 1.0))
        throw Error("threshold_quantile must lie in [0, 1)");
    const AlbedoVolume bp = backproject(tau);
    const auto lap = laplacian_3d(tau.geometry.voxels, bp.data);
    AlbedoVolume out(tau.geometry);
    std::vector<double> positive;
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = std::max(0.0, -lap[j]);
        if (out[j] > 0.0) positive.push_back(out[j]);
    }
    if (positive.empty() || threshold_quantile == 0.0) return out;
    const auto k = static_cast<std::size_t>(std::floor(threshold_quantile * static_cast<double>(positive.size() - 1)));
    std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(k), positive.end());
    const double cut = positive[k];
    for (double& v : out.data)
        if (v < cut) v = 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// ADMM
// ---------------------------------------------------------------------------

/// Primal, split and scaled dual variables of the ADMM iteration. Passing the
/// same state to consecutive solves continues the iteration instead of restarting it.
struct AdmmState {
    std::vector<double> x;
    std::vector<double> z1, u1;  // z1 = rho
    std::vector<double> z2, u2;  // z2 = D rho

    bool empty() const { return x.empty(); }

    static AdmmState start_at(const GridDims& dims, std::span<const double> rho, bool use_tv) {
        AdmmState s;
        s.x.assign(rho.begin(), rho.end());
        s.z1 = s.x;
        s.u1.assign(s.x.size(), 0.0);
        if (use_tv) {
            s.z2 = gradient_3d(dims, s.x);
            s.u2.assign(s.z2.size(), 0.0);
        }
        return s;
    }
};

struct LinearSolveResult {
    AlbedoVolume albedo;  // signed when the nonnegativity constraint is switched off
    double objective = 0.0;
    std::vector<double> objective_trace;  // objective of the prox iterate after each ADMM iteration
};

/// Minimizes ||tau - A rho||^2 + lambda_1 ||rho||_1 + lambda_tv TV(rho), optionally
/// subject to rho >= 0, by ADMM with splits z1 = rho and z2 = D rho. The x-update
/// solves (2 A^T A + p I + p D^T D) x = rhs with warm-started conjugate residual
/// iterations.
///
/// The returned estimate is the lowest-objective iterate seen, counting the
/// starting point and zero, so it never scores worse than either. `state`, when
/// given, seeds the iteration (an empty state starts from `warm_start` or zero)
/// and receives the final iterate.
inline LinearSolveResult admm_linear_solve_detailed(const FactoredModel& model, const TransientImage& tau,
                                                    const LinearSolverConfig& cfg,
                                                    const AlbedoVolume* warm_start = nullptr,
                                                    AdmmState* state = nullptr) {
    cfg.validate();
    model.validate();
    detail::check_transient(model, tau);
    const auto& g = model.geometry;
    const GridDims dims = g.voxels;
    const std::size_t n = g.voxel_count();
    const double pen = cfg.admm_penalty;
    const bool use_tv = cfg.tv_weight > 0.0;
    const std::span<const double> vis = model.visibility.data;

    auto objective_of = [&](std::span<const double> x, double& fidelity) {
        fidelity = data_term(model, tau, x);
        return fidelity + prior_value(dims, x, cfg);
    };

    std::vector<double> start(n, 0.0);
    if (warm_start) {
        if (warm_start->size() != n) throw ShapeError("warm start does not match geometry");
        start = warm_start->data;
    }
    double initial_fidelity = 0.0;
    double best_obj = objective_of(start, initial_fidelity);
    std::vector<double> best = start;
    if (std::any_of(start.begin(), start.end(), [](double v) { return v != 0.0; })) {
        double zero_fid = 0.0;
        const std::vector<double> zero(n, 0.0);
        const double zero_obj = objective_of(zero, zero_fid);
        if (zero_obj < best_obj) {
            best_obj = zero_obj;
            best = zero;
        }
    }

    AdmmState local;
    AdmmState& s = state ? *state : local;
    if (s.empty() || s.x.size() != n || s.z2.empty() == use_tv) s = AdmmState::start_at(dims, start, use_tv);

    const std::vector<double> at_tau = detail::apply_adjoint(model, vis, tau.data);
    auto normal_op = [&](std::span<const double> v) {
        std::vector<double> out = detail::apply_adjoint(model, vis, detail::apply_forward(model, vis, v));
        for (std::size_t k = 0; k < n; ++k) out[k] = 2.0 * out[k] + pen * v[k];
        if (use_tv) {
            const auto dtd = gradient_3d_adjoint(dims, gradient_3d(dims, v));
            for (std::size_t k = 0; k < n; ++k) out[k] += pen * dtd[k];
        }
        return out;
    };

    LinearSolveResult result;
    // Measured against the worse of the start and rho = 0 so a near-perfect warm start is not flagged.
    const double guard =
        10.0 * std::max({initial_fidelity, detail::squared_norm(tau.data), std::numeric_limits<double>::min()});
    std::vector<double> rhs(n);
    for (std::uint32_t it = 0; it < cfg.iterations; ++it) {
        for (std::size_t k = 0; k < n; ++k) rhs[k] = 2.0 * at_tau[k] + pen * (s.z1[k] - s.u1[k]);
        if (use_tv) {
            std::vector<double> diff(s.z2.size());
            for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = s.z2[k] - s.u2[k];
            const auto back = gradient_3d_adjoint(dims, diff);
            for (std::size_t k = 0; k < n; ++k) rhs[k] += pen * back[k];
        }
        conjugate_residual(normal_op, rhs, s.x, cfg.cg_iterations);

        const double t1 = cfg.sparsity_weight / pen;
        for (std::size_t k = 0; k < n; ++k) {
            double v = soft_threshold(s.x[k] + s.u1[k], t1);
            if (cfg.nonnegativity) v = std::max(0.0, v);
            s.z1[k] = v;
            s.u1[k] += s.x[k] - v;
        }
        if (use_tv) {
            const double t2 = cfg.tv_weight / pen;
            const auto dx = gradient_3d(dims, s.x);
            for (std::size_t k = 0; k < dx.size(); ++k) {
                s.z2[k] = soft_threshold(dx[k] + s.u2[k], t2);
                s.u2[k] += dx[k] - s.z2[k];
            }
        }

        double fidelity = 0.0;
        const double obj = objective_of(s.z1, fidelity);
        if (!std::isfinite(obj) || fidelity > guard)
            throw DivergenceError("ADMM data fidelity grew from " + std::to_string(initial_fidelity) + " to " +
                                  std::to_string(fidelity) + " at iteration " + std::to_string(it + 1));
        result.objective_trace.push_back(obj);
        if (obj < best_obj) {
            best_obj = obj;
            best = s.z1;
        }
    }
    result.albedo = AlbedoVolume(g, std::move(best));
    result.objective = best_obj;
    return result;
}

inline AlbedoVolume admm_linear_solve(const FactoredModel& model, const TransientImage& tau,
                                      const LinearSolverConfig& cfg, const AlbedoVolume* warm_start = nullptr) {
    return admm_linear_solve_detailed(model, tau, cfg, warm_start).albedo;
}

}  // namespace nlos
