#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <variant>
#include <vector>

#include "nlos/core.hpp"
#include "nlos/parallel.hpp"

namespace nlos {

/// A primitive that does not fit inside the hidden volume.
struct BoundsError : Error {
    using Error::Error;
};

/// Reflectance shared by every primitive kind.
struct Surface {
    double albedo = 1.0;
    double normal_u = 0.0;
    double normal_v = kWallFacingPolar;
};

/// One-voxel-thick planar rectangle centred at `center`, perpendicular to its normal.
struct RectPatch {
    Vec3 center;
    double width = 0.0;
    double height = 0.0;
    Surface surface;
};

/// Solid box; covers every voxel whose center lies inside [lo, hi].
struct AxisAlignedBox {
    Vec3 lo, hi;
    Surface surface;
};

/// Explicit list of voxel indices.
struct VoxelImport {
    std::vector<std::array<std::uint32_t, 3>> voxels;
    Surface surface;
};

using Primitive = std::variant<RectPatch, AxisAlignedBox, VoxelImport>;

struct Scene {
    std::vector<Primitive> primitives;
    /// Voxels with albedo strictly above this level block rays.
    double occluder_threshold = 0.0;
};

struct RasterizedScene {
    AlbedoVolume albedo;
    NormalField normals;
};

namespace detail {

inline const Surface& surface_of(const Primitive& p) {
    return std::visit([](const auto& prim) -> const Surface& { return prim.surface; }, p);
}

// In-plane orthonormal axes for a patch with unit normal n.
inline std::pair<Vec3, Vec3> patch_axes(const Vec3& n) {
    const Vec3 helper = std::abs(n.y) > 0.999 ? Vec3{1.0, 0.0, 0.0} : Vec3{0.0, 1.0, 0.0};
    const Vec3 e1 = normalized(cross(n, helper));
    return {e1, cross(n, e1)};
}

inline bool inside_volume(const ScanGeometry& g, const Vec3& p) {
    const double tol = 1e-9 * (g.wall_extent + g.volume_max().z);
    const Vec3 lo = g.volume_min(), hi = g.volume_max();
    for (int a = 0; a < 3; ++a)
        if (p[a] < lo[a] - tol || p[a] > hi[a] + tol) return false;
    return true;
}

inline void check_surface(const Surface& s) {
    if (!(s.albedo > 0.0) || s.albedo > 1.0) throw BoundsError("primitive albedo must lie in (0, 1]");
    if (!std::isfinite(s.normal_u) || !std::isfinite(s.normal_v))
        throw BoundsError("primitive normal angles must be finite");
}

inline std::vector<std::size_t> covered_voxels(const ScanGeometry& g, const RectPatch& p) {
    const Vec3 n = normal_from_angles(p.surface.normal_u, p.surface.normal_v);
    const auto [e1, e2] = patch_axes(n);
    for (double sa : {-0.5, 0.5})
        for (double sb : {-0.5, 0.5})
            if (!inside_volume(g, p.center + e1 * (sa * p.width) + e2 * (sb * p.height)))
                throw BoundsError("rect patch extends outside the hidden volume");

    const double half = 0.5 * g.voxel_pitch;
    const double slack = 1e-9 * g.voxel_pitch;
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < g.voxel_count(); ++j) {
        const Vec3 d = g.voxel_center(j) - p.center;
        const double off = dot(d, n);
        if (off < -half - slack || off >= half - slack) continue;
        if (std::abs(dot(d, e1)) > 0.5 * p.width + slack) continue;
        if (std::abs(dot(d, e2)) > 0.5 * p.height + slack) continue;
        out.push_back(j);
    }
    return out;
}

inline std::vector<std::size_t> covered_voxels(const ScanGeometry& g, const AxisAlignedBox& b) {
    if (!inside_volume(g, b.lo) || !inside_volume(g, b.hi))
        throw BoundsError("box extends outside the hidden volume");
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < g.voxel_count(); ++j) {
        const Vec3 c = g.voxel_center(j);
        bool inside = true;
        for (int a = 0; a < 3; ++a) inside = inside && c[a] >= b.lo[a] && c[a] <= b.hi[a];
        if (inside) out.push_back(j);
    }
    return out;
}

inline std::vector<std::size_t> covered_voxels(const ScanGeometry& g, const VoxelImport& v) {
    std::vector<std::size_t> out;
    out.reserve(v.voxels.size());
    for (const auto& [x, y, z] : v.voxels) {
        if (x >= g.voxels.nx || y >= g.voxels.ny || z >= g.voxels.nz)
            throw BoundsError("imported voxel index outside the hidden volume");
        out.push_back(g.voxel_index(x, y, z));
    }
    return out;
}

}  // namespace detail

/// Voxelizes the scene. Later primitives overwrite earlier ones where they overlap.
inline RasterizedScene rasterize_scene(const Scene& scene, const ScanGeometry& g) {
    g.validate();
    RasterizedScene out{AlbedoVolume(g), NormalField::wall_facing(g.voxels)};
    for (const auto& prim : scene.primitives) {
        const Surface& s = detail::surface_of(prim);
        detail::check_surface(s);
        const auto covered = std::visit([&](const auto& p) { return detail::covered_voxels(g, p); }, prim);
        for (std::size_t j : covered) {
            out.albedo[j] = s.albedo;
            out.normals.u[j] = s.normal_u;
            out.normals.v[j] = s.normal_v;
        }
    }
    return out;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Walks the voxels pierced by the segment from `from` (on the wall) to `to`
// (inside voxel `target`) and reports whether any occupied voxel outside the
// target's 3x3x3 neighbourhood is crossed.
inline bool segment_blocked(const ScanGeometry& g, const std::vector<std::uint8_t>& occupied, const Vec3& from,
                            const Vec3& to, const ScanGeometry::Index3& target) {
    const Vec3 lo = g.volume_min(), hi = g.volume_max();
    const Vec3 d = to - from;
    double t0 = 0.0, t1 = 1.0;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(d[a]) < 1e-300) {
            if (from[a] < lo[a] || from[a] > hi[a]) return false;
            continue;
        }
        double ta = (lo[a] - from[a]) / d[a];
        double tb = (hi[a] - from[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (t0 > t1) return false;

    const std::array<std::uint32_t, 3> dims{g.voxels.nx, g.voxels.ny, g.voxels.nz};
    const std::array<std::uint32_t, 3> tgt{target.x, target.y, target.z};
    const Vec3 start = from + d * t0;
    std::array<std::int64_t, 3> cell{}, step{};
    std::array<double, 3> t_max{}, t_delta{};
    for (int a = 0; a < 3; ++a) {
        auto c = static_cast<std::int64_t>(std::floor((start[a] - lo[a]) / g.voxel_pitch));
        c = std::clamp<std::int64_t>(c, 0, dims[a] - 1);
        cell[a] = c;
        if (d[a] > 0) {
            step[a] = 1;
            t_max[a] = (lo[a] + (c + 1) * g.voxel_pitch - from[a]) / d[a];
            t_delta[a] = g.voxel_pitch / d[a];
        } else if (d[a] < 0) {
            step[a] = -1;
            t_max[a] = (lo[a] + c * g.voxel_pitch - from[a]) / d[a];
            t_delta[a] = -g.voxel_pitch / d[a];
        } else {
            step[a] = 0;
            t_max[a] = t_delta[a] = std::numeric_limits<double>::infinity();
        }
    }

    for (;;) {
        bool near_target = true;
        for (int a = 0; a < 3; ++a)
            near_target = near_target && std::abs(cell[a] - static_cast<std::int64_t>(tgt[a])) <= 1;
        // The 3x3x3 block is convex and contains the endpoint, so nothing past here can block.
        if (near_target) return false;
        const std::size_t k = g.voxel_index(static_cast<std::uint32_t>(cell[0]), static_cast<std::uint32_t>(cell[1]),
                                            static_cast<std::uint32_t>(cell[2]));
        if (occupied[k]) return true;

        const double t_next = std::min({t_max[0], t_max[1], t_max[2]});
        if (t_next > t1) return false;
        // Crossing an edge or corner steps all tied axes at once; cells touched at a single point do not block.
        const double tie = 1e-12 * std::max(1.0, t_next);
        for (int a = 0; a < 3; ++a) {
            if (t_max[a] - t_next > tie) continue;
            cell[a] += step[a];
            if (cell[a] < 0 || cell[a] >= static_cast<std::int64_t>(dims[a])) return false;
            t_max[a] += t_delta[a];
        }
    }
}

}  // namespace detail

/// Ray-marched occlusion between every wall sample and every voxel. With
/// rays_per_pair = 1 the single ray targets the voxel center and V is binary;
/// otherwise targets are jittered inside the voxel (deterministically per pair)
/// and V is the unblocked fraction.
inline VisibilityField ground_truth_visibility(const AlbedoVolume& albedo, const ScanGeometry& g,
                                               double occluder_threshold, std::uint32_t rays_per_pair = 1) {
    if (rays_per_pair < 1) throw Error("rays_per_pair must be >= 1");
    if (albedo.size() != g.voxel_count()) throw ShapeError("albedo volume does not match geometry");
    std::vector<std::uint8_t> occupied(g.voxel_count());
    bool any = false;
    for (std::size_t j = 0; j < occupied.size(); ++j) {
        occupied[j] = albedo[j] > occluder_threshold;
        any = any || occupied[j];
    }
    VisibilityField vis = VisibilityField::ones(g);
    if (!any) return vis;

    const std::size_t nv = g.voxel_count();
    parallel_for(g.sample_count(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const Vec3 from = g.sample_position(i);
            for (std::size_t j = 0; j < nv; ++j) {
                const auto idx = g.voxel_coords(j);
                const Vec3 center = g.voxel_center(j);
                if (rays_per_pair == 1) {
                    vis.at(i, j) = detail::segment_blocked(g, occupied, from, center, idx) ? 0.0 : 1.0;
                    continue;
                }
                std::mt19937_64 rng(detail::splitmix64(i * nv + j));
                std::uniform_real_distribution<double> jitter(-0.5 * g.voxel_pitch, 0.5 * g.voxel_pitch);
                std::uint32_t open = 0;
                for (std::uint32_t r = 0; r < rays_per_pair; ++r) {
                    const Vec3 to = center + Vec3{jitter(rng), jitter(rng), jitter(rng)};
                    if (!detail::segment_blocked(g, occupied, from, to, idx)) ++open;
                }
                vis.at(i, j) = static_cast<double>(open) / rays_per_pair;
            }
        }
    });
    return vis;
}

}  // namespace nlos
