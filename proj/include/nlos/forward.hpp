#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <vector>

#include "nlos/core.hpp"
#include "nlos/parallel.hpp"

namespace nlos {

/// How the per-path surface orientation factor is modelled.
enum class Shading {
    Isotropic,   // factor 1 for every path
    Lambertian,  // max(0, omega . n)
};

/// Raised when a dense construction would exceed its size guard.
struct SizeGuardError : Error {
    using Error::Error;
};

/// Geometry plus the visibility and normal factors of the light transport.
/// An empty visibility field stands for V = 1 everywhere.
struct FactoredModel {
    ScanGeometry geometry;
    VisibilityField visibility;
    NormalField normals;
    Shading shading = Shading::Lambertian;

    /// V = 1, isotropic scattering: the classic linear transport model.
    static FactoredModel unoccluded_isotropic(const ScanGeometry& g) {
        return {g, VisibilityField{}, NormalField::wall_facing(g.voxels), Shading::Isotropic};
    }

    bool has_visibility() const { return !visibility.data.empty(); }
    double vis(std::size_t i, std::size_t j) const { return has_visibility() ? visibility.at(i, j) : 1.0; }

    void validate() const {
        geometry.validate();
        if (has_visibility() &&
            (visibility.samples != geometry.sample_count() || visibility.voxels != geometry.voxel_count() ||
             visibility.data.size() != visibility.samples * visibility.voxels))
            throw ShapeError("visibility field does not match geometry");
        if (shading == Shading::Lambertian &&
            (normals.dims != geometry.voxels || normals.u.size() != geometry.voxel_count() ||
             normals.v.size() != geometry.voxel_count()))
            throw ShapeError("normal field does not match geometry");
    }
};

namespace detail {

// Per-path constants for one geometry, flattened [sample][voxel]. bin < 0
// marks paths that land outside the recorded window.
struct PathCache {
    std::vector<std::int32_t> bin;
    std::vector<double> coef_lo, coef_hi;
    std::vector<Vec3> omega;

    explicit PathCache(const ScanGeometry& g) {
        const std::size_t ns = g.sample_count(), nv = g.voxel_count();
        bin.resize(ns * nv);
        coef_lo.resize(ns * nv);
        coef_hi.resize(ns * nv);
        omega.resize(ns * nv);
        std::vector<Vec3> centers(nv);
        for (std::size_t j = 0; j < nv; ++j) centers[j] = g.voxel_center(j);
        parallel_for(ns, [&](std::size_t begin, std::size_t end) {
            for (std::size_t i = begin; i < end; ++i) {
                const Vec3 s = g.sample_position(i);
                for (std::size_t j = 0; j < nv; ++j) {
                    const PathTerm p = path_term_unchecked(g, s, centers[j]);
                    const std::size_t k = i * nv + j;
                    bin[k] = p.in_range ? static_cast<std::int32_t>(p.bin_lo) : -1;
                    coef_lo[k] = p.coef_lo;
                    coef_hi[k] = p.coef_hi;
                    omega[k] = p.omega;
                }
            }
        });
    }
};

// Above this many paths the tables are recomputed on the fly instead of cached.
inline constexpr std::size_t kMaxCachedPaths = std::size_t{1} << 24;

// Small process-wide memo so repeated operator applications on one geometry
// share a single table.
inline std::shared_ptr<const PathCache> path_cache(const ScanGeometry& g) {
    if (g.sample_count() * g.voxel_count() > kMaxCachedPaths) return nullptr;
    static std::mutex mutex;
    static std::vector<std::pair<ScanGeometry, std::shared_ptr<const PathCache>>> memo;
    std::lock_guard lock(mutex);
    for (const auto& [key, cache] : memo)
        if (key == g) return cache;
    auto cache = std::make_shared<const PathCache>(g);
    if (memo.size() >= 4) memo.erase(memo.begin());
    memo.emplace_back(g, cache);
    return cache;
}

// Geometry tables shared by every matrix-free kernel.
struct PathTables {
    const ScanGeometry& geometry;
    std::shared_ptr<const PathCache> cache;
    std::vector<Vec3> samples;
    std::vector<Vec3> voxels;
    std::vector<Vec3> normals;  // empty for isotropic shading

    explicit PathTables(const FactoredModel& m) : geometry(m.geometry), cache(path_cache(m.geometry)) {
        const auto& g = m.geometry;
        if (!cache) {
            samples.resize(g.sample_count());
            voxels.resize(g.voxel_count());
            for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = g.sample_position(i);
            for (std::size_t j = 0; j < voxels.size(); ++j) voxels[j] = g.voxel_center(j);
        }
        if (m.shading == Shading::Lambertian) {
            normals.resize(g.voxel_count());
            for (std::size_t j = 0; j < normals.size(); ++j) normals[j] = m.normals.normal(j);
        }
    }

    PathTerm term(std::size_t i, std::size_t j) const {
        if (cache) {
            const std::size_t k = i * geometry.voxel_count() + j;
            const std::int32_t b = cache->bin[k];
            return {cache->omega[k], b, cache->coef_lo[k], cache->coef_hi[k], b >= 0};
        }
        return path_term_unchecked(geometry, samples[i], voxels[j]);
    }

    double shade(const Vec3& omega, std::size_t j) const {
        return normals.empty() ? 1.0 : std::max(0.0, dot(omega, normals[j]));
    }
};

inline void check_albedo(const FactoredModel& m, std::span<const double> albedo) {
    if (albedo.size() != m.geometry.voxel_count()) throw ShapeError("albedo volume does not match geometry");
}

inline void check_transient(const FactoredModel& m, const TransientImage& t) {
    if (t.data.size() != m.geometry.transient_size()) throw ShapeError("transient image does not match geometry");
}

// tau = A(V, n) rho with V taken from `vis` (empty span = ones).
inline std::vector<double> apply_forward(const FactoredModel& m, std::span<const double> vis,
                                         std::span<const double> albedo) {
    const auto& g = m.geometry;
    const PathTables tab(m);
    const std::size_t nv = g.voxel_count();
    const std::size_t nt = g.time_bins;
    std::vector<std::size_t> active;
    for (std::size_t j = 0; j < nv; ++j)
        if (albedo[j] != 0.0) active.push_back(j);

    std::vector<double> out(g.transient_size(), 0.0);
    parallel_for(g.sample_count(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            double* row = out.data() + i * nt;
            const double* vrow = vis.empty() ? nullptr : vis.data() + i * nv;
            for (std::size_t j : active) {
                const PathTerm p = tab.term(i, j);
                if (!p.in_range) continue;
                const double a = (vrow ? vrow[j] : 1.0) * tab.shade(p.omega, j) * albedo[j];
                row[p.bin_lo] += p.coef_lo * a;
                row[p.bin_lo + 1] += p.coef_hi * a;
            }
        }
    });
    return out;
}

// A(V, n)^T y. Each voxel sums over samples in a fixed order, so the result
// is bit-identical for any worker count.
inline std::vector<double> apply_adjoint(const FactoredModel& m, std::span<const double> vis,
                                         std::span<const double> y) {
    const auto& g = m.geometry;
    const PathTables tab(m);
    const std::size_t nv = g.voxel_count();
    const std::size_t nt = g.time_bins;
    std::vector<double> out(nv, 0.0);
    parallel_for(nv, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = 0; i < g.sample_count(); ++i) {
            const double* row = y.data() + i * nt;
            const double* vrow = vis.empty() ? nullptr : vis.data() + i * nv;
            for (std::size_t j = begin; j < end; ++j) {
                const PathTerm p = tab.term(i, j);
                if (!p.in_range) continue;
                const double corr = p.coef_lo * row[p.bin_lo] + p.coef_hi * row[p.bin_lo + 1];
                out[j] += (vrow ? vrow[j] : 1.0) * tab.shade(p.omega, j) * corr;
            }
        }
    });
    return out;
}

}  // namespace detail

/// Matrix-free forward transport: every voxel adds a falloff-, visibility- and
/// shading-weighted spike at its round-trip time, split over two bins.
inline TransientImage forward_transient(const FactoredModel& model, const AlbedoVolume& albedo) {
    model.validate();
    detail::check_albedo(model, albedo.data);
    TransientImage out(model.geometry);
    out.data = detail::apply_forward(model, model.visibility.data, albedo.data);
    return out;
}

/// Exact transpose of forward_transient.
inline RealVolume adjoint_transient(const FactoredModel& model, const TransientImage& residual) {
    model.validate();
    detail::check_transient(model, residual);
    return RealVolume(model.geometry, detail::apply_adjoint(model, model.visibility.data, residual.data));
}

/// Row-major dense system matrix (transient entries x voxels).
struct DenseMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> values;
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Builds the system matrix entry by entry from the scalar path functions.
/// Only practical for tiny grids; refuses more than `max_entries` entries.
inline DenseMatrix dense_system_matrix(const FactoredModel& model, std::size_t max_entries = 100'000'000) {
    model.validate();
    const auto& g = model.geometry;
    DenseMatrix a;
    a.rows = g.transient_size();
    a.cols = g.voxel_count();
    if (a.cols != 0 && a.rows > max_entries / a.cols)
        throw SizeGuardError("dense system matrix would exceed the entry budget");
    a.values.assign(a.rows * a.cols, 0.0);
    for (std::size_t i = 0; i < g.sample_count(); ++i) {
        for (std::size_t j = 0; j < g.voxel_count(); ++j) {
            const auto [omega, r] = direction_voxel_to_sample(g, j, i);
            const BinWeights w = time_bin_weights(g, r);
            if (!w.in_range) continue;
            double shade = 1.0;
            if (model.shading == Shading::Lambertian)
                shade = std::max(0.0, dot(omega, normal_from_angles(model.normals.u[j], model.normals.v[j])));
            const double entry = falloff(g, r) * model.vis(i, j) * shade;
            const std::size_t row = i * g.time_bins + static_cast<std::size_t>(w.bin_lo);
            a.values[row * a.cols + j] += entry * w.w_lo;
            a.values[(row + 1) * a.cols + j] += entry * w.w_hi;
        }
    }
    return a;
}

/// Brute-force reference for forward_transient: explicit matrix times albedo.
inline TransientImage forward_dense_oracle(const FactoredModel& model, const AlbedoVolume& albedo,
                                           std::size_t max_entries = 100'000'000) {
    detail::check_albedo(model, albedo.data);
    const DenseMatrix a = dense_system_matrix(model, max_entries);
    TransientImage out(model.geometry);
    for (std::size_t r = 0; r < a.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols; ++c) s += a.values[r * a.cols + c] * albedo[c];
        out.data[r] = s;
    }
    return out;
}

/// Rescales tau so its peak holds `photons_at_peak` expected counts, draws
/// Poisson counts per bin and maps back to the original scale.
inline TransientImage add_poisson_noise(const TransientImage& tau, double photons_at_peak, std::uint64_t seed) {
    if (!(photons_at_peak >= 1.0)) throw Error("photons_at_peak must be >= 1");
    TransientImage out = tau;
    const double peak = tau.data.empty() ? 0.0 : *std::max_element(tau.data.begin(), tau.data.end());
    if (!(peak > 0.0)) return out;
    const double scale = photons_at_peak / peak;
    std::mt19937_64 rng(seed);
    for (double& x : out.data) {
        if (x <= 0.0) {
            x = 0.0;
            continue;
        }
        std::poisson_distribution<std::int64_t> draw(x * scale);
        x = static_cast<double>(draw(rng)) / scale;
    }
    return out;
}

}  // namespace nlos
