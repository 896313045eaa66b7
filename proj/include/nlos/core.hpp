#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace nlos {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid scan geometry or degenerate path (voxel on the wall plane).
struct GeometryError : Error {
    using Error::Error;
};

/// Arrays whose dimensions disagree with each other or with the geometry.
struct ShapeError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Small vector type
// ---------------------------------------------------------------------------

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    constexpr Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    constexpr double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return a / norm(a); }

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct GridDims {
    std::uint32_t nx = 1, ny = 1, nz = 1;

    constexpr std::size_t count() const {
        return static_cast<std::size_t>(nx) * ny * nz;
    }
    constexpr bool operator==(const GridDims&) const = default;
};

/// Confocal scan over the wall plane z = 0 with a voxelized hidden volume
/// occupying z in [volume_origin_z, volume_origin_z + nz * voxel_pitch].
///
/// Wall samples sit on the (x, y) voxel centers, so the voxel grid must have
/// nx = ny = samples_per_axis and samples_per_axis * voxel_pitch = wall_extent.
/// Flat indices are row-major: sample i = ix * N + iy, voxel j = (x * ny + y) * nz + z.
struct ScanGeometry {
    std::uint32_t samples_per_axis = 1;
    GridDims voxels{};
    double wall_extent = 1.0;      // meters, per axis
    double volume_origin_z = 0.5;  // meters
    double voxel_pitch = 1.0;      // meters
    std::uint32_t time_bins = 1;
    double bin_width = 1e-9;  // seconds
    double light_speed = 299'792'458.0;
    int falloff_exponent = 4;

    bool operator==(const ScanGeometry&) const = default;

    std::size_t sample_count() const {
        return static_cast<std::size_t>(samples_per_axis) * samples_per_axis;
    }
    std::size_t voxel_count() const { return voxels.count(); }
    std::size_t transient_size() const { return sample_count() * time_bins; }

    std::size_t voxel_index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return (static_cast<std::size_t>(x) * voxels.ny + y) * voxels.nz + z;
    }

    struct Index3 {
        std::uint32_t x, y, z;
    };
    Index3 voxel_coords(std::size_t j) const {
        const auto z = static_cast<std::uint32_t>(j % voxels.nz);
        const auto rest = j / voxels.nz;
        return {static_cast<std::uint32_t>(rest / voxels.ny),
                static_cast<std::uint32_t>(rest % voxels.ny), z};
    }

    double lateral_center(std::uint32_t k) const {
        return -0.5 * wall_extent + (static_cast<double>(k) + 0.5) * voxel_pitch;
    }
    double depth_center(std::uint32_t k) const {
        return volume_origin_z + (static_cast<double>(k) + 0.5) * voxel_pitch;
    }

    Vec3 sample_position(std::size_t i) const {
        const auto ix = static_cast<std::uint32_t>(i / samples_per_axis);
        const auto iy = static_cast<std::uint32_t>(i % samples_per_axis);
        return {lateral_center(ix), lateral_center(iy), 0.0};
    }
    Vec3 voxel_center(std::size_t j) const {
        const auto c = voxel_coords(j);
        return {lateral_center(c.x), lateral_center(c.y), depth_center(c.z)};
    }

    /// Axis-aligned bounds of the hidden volume.
    Vec3 volume_min() const { return {-0.5 * wall_extent, -0.5 * wall_extent, volume_origin_z}; }
    Vec3 volume_max() const {
        return {0.5 * wall_extent, 0.5 * wall_extent, volume_origin_z + voxels.nz * voxel_pitch};
    }

    /// Path length r covered by one time bin (round trip is 2r).
    double bin_path_length() const { return 0.5 * light_speed * bin_width; }

    void validate() const {
        if (samples_per_axis < 1 || voxels.nx < 1 || voxels.ny < 1 || voxels.nz < 1 || time_bins < 1)
            throw GeometryError("all counts must be >= 1");
        if (voxels.nx != samples_per_axis || voxels.ny != samples_per_axis)
            throw GeometryError("voxel grid (nx, ny) must match the wall sampling grid");
        if (!(bin_width > 0.0) || !(light_speed > 0.0) || !(voxel_pitch > 0.0) || !(wall_extent > 0.0))
            throw GeometryError("bin_width, light_speed, voxel_pitch and wall_extent must be positive");
        if (!(volume_origin_z > 0.0))
            throw GeometryError("hidden volume must lie strictly behind the wall (volume_origin_z > 0)");
        if (std::abs(samples_per_axis * voxel_pitch - wall_extent) > 1e-9 * wall_extent)
            throw GeometryError("samples_per_axis * voxel_pitch must equal wall_extent");
        if (falloff_exponent != 2 && falloff_exponent != 4)
            throw GeometryError("falloff_exponent must be 2 or 4");
    }

    /// Cubic volume behind a square wall patch, with bins sized so one bin
    /// spans `bins_per_voxel`-th of a voxel in path length and the recorded
    /// window covers the longest sample-to-voxel path.
    static ScanGeometry cube(std::uint32_t n, double wall_extent = 1.0, double standoff = 0.5,
                             double bins_per_voxel = 2.0, int falloff_exponent = 4) {
        ScanGeometry g;
        g.samples_per_axis = n;
        g.voxels = {n, n, n};
        g.wall_extent = wall_extent;
        g.voxel_pitch = wall_extent / n;
        g.volume_origin_z = standoff;
        g.falloff_exponent = falloff_exponent;
        const double step = g.voxel_pitch / bins_per_voxel;
        g.bin_width = 2.0 * step / g.light_speed;
        const double lateral = wall_extent - g.voxel_pitch;
        const double deepest = g.depth_center(n - 1);
        const double r_max = std::sqrt(2.0 * lateral * lateral + deepest * deepest);
        g.time_bins = static_cast<std::uint32_t>(std::ceil(r_max / step)) + 2;
        g.validate();
        return g;
    }
};

// ---------------------------------------------------------------------------
// Data containers
// ---------------------------------------------------------------------------

/// Photon flux histograms, indexed [sample_x][sample_y][time_bin].
struct TransientImage {
    ScanGeometry geometry;
    std::vector<double> data;

    TransientImage() = default;
    explicit TransientImage(const ScanGeometry& g) : geometry(g), data(g.transient_size(), 0.0) {}

    double& at(std::size_t sample, std::size_t bin) { return data[sample * geometry.time_bins + bin]; }
    double at(std::size_t sample, std::size_t bin) const { return data[sample * geometry.time_bins + bin]; }
};

namespace detail {
struct AlbedoTag;
struct RealTag;
}  // namespace detail

/// Real-valued array over the voxel grid, indexed [x][y][z].
template <class Tag>
struct VoxelArray {
    ScanGeometry geometry;
    std::vector<double> data;

    VoxelArray() = default;
    explicit VoxelArray(const ScanGeometry& g, double fill = 0.0) : geometry(g), data(g.voxel_count(), fill) {}
    VoxelArray(const ScanGeometry& g, std::vector<double> values) : geometry(g), data(std::move(values)) {
        if (data.size() != g.voxel_count()) throw ShapeError("voxel array size does not match geometry");
    }

    double& operator[](std::size_t j) { return data[j]; }
    double operator[](std::size_t j) const { return data[j]; }
    double& at(std::uint32_t x, std::uint32_t y, std::uint32_t z) { return data[geometry.voxel_index(x, y, z)]; }
    double at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return data[geometry.voxel_index(x, y, z)];
    }
    std::size_t size() const { return data.size(); }
};

/// Nonnegative hidden albedos.
using AlbedoVolume = VoxelArray<detail::AlbedoTag>;
/// Unconstrained volume, e.g. the adjoint applied to a signed residual.
using RealVolume = VoxelArray<detail::RealTag>;

inline AlbedoVolume clamp_nonnegative(const RealVolume& v) {
    AlbedoVolume out(v.geometry);
    std::transform(v.data.begin(), v.data.end(), out.data.begin(), [](double x) { return std::max(0.0, x); });
    return out;
}

/// Unit normal from spherical angles (azimuth u, polar v).
inline Vec3 normal_from_angles(double u, double v) {
    const double sv = std::sin(v);
    return {std::cos(u) * sv, std::sin(u) * sv, std::cos(v)};
}

/// Partial derivatives of normal_from_angles with respect to u and v.
inline Vec3 normal_du(double u, double v) {
    return {-std::sin(u) * std::sin(v), std::cos(u) * std::sin(v), 0.0};
}
inline Vec3 normal_dv(double u, double v) {
    return {std::cos(u) * std::cos(v), std::sin(u) * std::cos(v), -std::sin(v)};
}

/// Polar angle of a normal that faces the wall, i.e. points along -z.
inline constexpr double kWallFacingPolar = std::numbers::pi;

/// Per-voxel surface normals stored as spherical angles.
struct NormalField {
    GridDims dims{};
    std::vector<double> u, v;

    NormalField() = default;
    NormalField(const GridDims& d, double u0, double v0) : dims(d), u(d.count(), u0), v(d.count(), v0) {}

    /// Every normal facing the wall.
    static NormalField wall_facing(const GridDims& d) { return NormalField(d, 0.0, kWallFacingPolar); }

    std::size_t size() const { return u.size(); }
    Vec3 normal(std::size_t j) const { return normal_from_angles(u[j], v[j]); }
};

/// Occlusion factor per (wall sample, voxel) pair, stored dense and row-major [i][j].
struct VisibilityField {
    std::size_t samples = 0;
    std::size_t voxels = 0;
    std::vector<double> data;

    VisibilityField() = default;
    VisibilityField(std::size_t n_samples, std::size_t n_voxels, double fill = 1.0)
        : samples(n_samples), voxels(n_voxels), data(n_samples * n_voxels, fill) {}

    static VisibilityField ones(const ScanGeometry& g) { return {g.sample_count(), g.voxel_count(), 1.0}; }

    double& at(std::size_t i, std::size_t j) { return data[i * voxels + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * voxels + j]; }
    std::size_t byte_size() const { return data.size() * sizeof(double); }

    bool within_unit_interval() const {
        return std::all_of(data.begin(), data.end(), [](double x) { return x >= 0.0 && x <= 1.0; });
    }
};

// ---------------------------------------------------------------------------
// Per-path quantities
// ---------------------------------------------------------------------------

/// Linear split of a continuous bin coordinate over bins bin_lo and bin_lo + 1.
struct BinWeights {
    std::int64_t bin_lo = 0;
    double w_lo = 1.0;
    double w_hi = 0.0;
    bool in_range = false;
};

struct DirectionAndDistance {
    Vec3 omega;  // unit vector from voxel to wall sample
    double r = 0.0;
};

inline DirectionAndDistance direction_voxel_to_sample(const ScanGeometry& g, std::size_t voxel,
                                                      std::size_t sample) {
    if (voxel >= g.voxel_count() || sample >= g.sample_count())
        throw GeometryError("voxel or sample index out of range");
    const Vec3 d = g.sample_position(sample) - g.voxel_center(voxel);
    const double r = norm(d);
    if (!(r > 0.0)) throw GeometryError("voxel center coincides with a wall sample");
    return {d / r, r};
}

inline BinWeights time_bin_weights(const ScanGeometry& g, double r) {
    const double b = 2.0 * r / (g.light_speed * g.bin_width);
    BinWeights w;
    if (!(b >= 0.0) || b >= static_cast<double>(g.time_bins) - 1.0) {
        w.in_range = false;
        w.bin_lo = b >= 0.0 ? static_cast<std::int64_t>(std::floor(b)) : -1;
        return w;
    }
    const double lo = std::floor(b);
    w.bin_lo = static_cast<std::int64_t>(lo);
    w.w_hi = b - lo;
    w.w_lo = 1.0 - w.w_hi;
    w.in_range = true;
    return w;
}

inline double falloff(const ScanGeometry& g, double r) {
    const double r2 = r * r;
    return g.falloff_exponent == 4 ? 1.0 / (r2 * r2) : 1.0 / r2;
}

/// Everything about one (sample, voxel) path that does not depend on the
/// unknowns: direction, bins and the falloff already folded into the bin weights.
struct PathTerm {
    Vec3 omega;
    std::int64_t bin_lo = 0;
    double coef_lo = 0.0;
    double coef_hi = 0.0;
    bool in_range = false;
};

namespace detail {

// Hot-loop variant of direction/bins/falloff without index validation.
inline PathTerm path_term_unchecked(const ScanGeometry& g, const Vec3& sample, const Vec3& voxel) {
    const Vec3 d = sample - voxel;
    const double r = norm(d);
    PathTerm p;
    p.omega = d / r;
    const BinWeights w = time_bin_weights(g, r);
    p.in_range = w.in_range;
    if (w.in_range) {
        const double f = falloff(g, r);
        p.bin_lo = w.bin_lo;
        p.coef_lo = f * w.w_lo;
        p.coef_hi = f * w.w_hi;
    }
    return p;
}

}  // namespace detail

inline PathTerm path_term(const ScanGeometry& g, std::size_t sample, std::size_t voxel) {
    direction_voxel_to_sample(g, voxel, sample);  // validates indices and r > 0
    return detail::path_term_unchecked(g, g.sample_position(sample), g.voxel_center(voxel));
}

}  // namespace nlos
