#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "nlos/core.hpp"

namespace nlos {

// ---------------------------------------------------------------------------
// Binary formats
//
// Every file is little-endian:
//   char[8]  magic ("TRNSIMG1", "NLOSVOL1", "NLOSVIS1", "NLOSNRM1")
//   u32 x 6  samples_per_axis, nx, ny, nz, time_bins, falloff_exponent
//   f64 x 5  wall_extent, volume_origin_z, voxel_pitch, bin_width, light_speed
//   f64[]    payload in the row-major order of the in-memory type
// Histogram bundles ("NLOSHST1") carry their own header, see HistogramBundle.
// ---------------------------------------------------------------------------

enum class FormatErrorKind { MagicMismatch, VersionMismatch, Truncated, DimensionOverflow, Io };

struct FormatError : Error {
    FormatErrorKind kind;
    FormatError(FormatErrorKind k, const std::string& what) : Error(what), kind(k) {}
};

inline constexpr std::string_view kTransientMagic = "TRNSIMG1";
inline constexpr std::string_view kVolumeMagic = "NLOSVOL1";
inline constexpr std::string_view kVisibilityMagic = "NLOSVIS1";
inline constexpr std::string_view kNormalsMagic = "NLOSNRM1";
inline constexpr std::string_view kHistogramMagic = "NLOSHST1";

// Largest payload (in 8-byte values) a reader will accept.
inline constexpr std::uint64_t kMaxPayloadValues = std::uint64_t{1} << 36;

namespace detail {

class ByteWriter {
public:
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    void u32(std::uint32_t v) {
        for (int k = 0; k < 4; ++k) bytes_.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int k = 0; k < 8; ++k) bytes_.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
        out.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
        if (!out) throw FormatError(FormatErrorKind::Io, "write failed for " + path.string());
    }

private:
    std::vector<char> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(const std::filesystem::path& path) : name_(path.string()) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + name_);
        bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

    void expect_magic(std::string_view magic) {
        need(magic.size(), "magic");
        const std::string_view got(bytes_.data() + pos_, magic.size());
        if (got != magic) {
            // Same family, different trailing version digit.
            if (got.substr(0, magic.size() - 1) == magic.substr(0, magic.size() - 1))
                throw FormatError(FormatErrorKind::VersionMismatch,
                                  name_ + ": unsupported format version " + std::string(got));
            throw FormatError(FormatErrorKind::MagicMismatch,
                              name_ + ": expected magic " + std::string(magic));
        }
        pos_ += magic.size();
    }
    std::uint32_t u32() {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n)
            throw FormatError(FormatErrorKind::Truncated, name_ + ": truncated while reading " + what);
    }
    void expect_payload(std::uint64_t values) const {
        if (values > kMaxPayloadValues)
            throw FormatError(FormatErrorKind::DimensionOverflow, name_ + ": declared dimensions are too large");
        if (remaining() < values * 8)
            throw FormatError(FormatErrorKind::Truncated, name_ + ": payload is truncated");
    }

private:
    std::string name_;
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

inline void write_geometry(ByteWriter& w, const ScanGeometry& g) {
    w.u32(g.samples_per_axis);
    w.u32(g.voxels.nx);
    w.u32(g.voxels.ny);
    w.u32(g.voxels.nz);
    w.u32(g.time_bins);
    w.u32(static_cast<std::uint32_t>(g.falloff_exponent));
    w.f64(g.wall_extent);
    w.f64(g.volume_origin_z);
    w.f64(g.voxel_pitch);
    w.f64(g.bin_width);
    w.f64(g.light_speed);
}

inline ScanGeometry read_geometry(ByteReader& r) {
    ScanGeometry g;
    g.samples_per_axis = r.u32();
    g.voxels.nx = r.u32();
    g.voxels.ny = r.u32();
    g.voxels.nz = r.u32();
    g.time_bins = r.u32();
    g.falloff_exponent = static_cast<int>(r.u32());
    g.wall_extent = r.f64();
    g.volume_origin_z = r.f64();
    g.voxel_pitch = r.f64();
    g.bin_width = r.f64();
    g.light_speed = r.f64();
    return g;
}

// Product of dimensions, or a DimensionOverflow when it leaves the accepted range.
inline std::uint64_t checked_product(std::initializer_list<std::uint64_t> dims) {
    std::uint64_t p = 1;
    for (std::uint64_t d : dims) {
        if (d != 0 && p > kMaxPayloadValues / d)
            throw FormatError(FormatErrorKind::DimensionOverflow, "declared dimensions are too large");
        p *= d;
    }
    return p;
}

inline std::vector<double> read_values(ByteReader& r, std::uint64_t count) {
    r.expect_payload(count);
    std::vector<double> v(count);
    for (auto& x : v) x = r.f64();
    return v;
}

}  // namespace detail

inline void write_transient(const std::filesystem::path& path, const TransientImage& t) {
    detail::ByteWriter w;
    w.raw(kTransientMagic);
    detail::write_geometry(w, t.geometry);
    for (double v : t.data) w.f64(v);
    w.save(path);
}

inline TransientImage read_transient(const std::filesystem::path& path) {
    detail::ByteReader r(path);
    r.expect_magic(kTransientMagic);
    const ScanGeometry g = detail::read_geometry(r);
    const auto n = detail::checked_product({g.samples_per_axis, g.samples_per_axis, g.time_bins});
    auto values = detail::read_values(r, n);
    g.validate();
    TransientImage t(g);
    t.data = std::move(values);
    return t;
}

inline void write_volume(const std::filesystem::path& path, const AlbedoVolume& v) {
    detail::ByteWriter w;
    w.raw(kVolumeMagic);
    detail::write_geometry(w, v.geometry);
    for (double x : v.data) w.f64(x);
    w.save(path);
}

inline AlbedoVolume read_volume(const std::filesystem::path& path) {
    detail::ByteReader r(path);
    r.expect_magic(kVolumeMagic);
    const ScanGeometry g = detail::read_geometry(r);
    const auto n = detail::checked_product({g.voxels.nx, g.voxels.ny, g.voxels.nz});
    auto values = detail::read_values(r, n);
    g.validate();
    return AlbedoVolume(g, std::move(values));
}

inline void write_visibility(const std::filesystem::path& path, const ScanGeometry& g, const VisibilityField& v) {
    if (v.samples != g.sample_count() || v.voxels != g.voxel_count())
        throw ShapeError("visibility field does not match geometry");
    detail::ByteWriter w;
    w.raw(kVisibilityMagic);
    detail::write_geometry(w, g);
    for (double x : v.data) w.f64(x);
    w.save(path);
}

struct VisibilityFile {
    ScanGeometry geometry;
    VisibilityField visibility;
};

inline VisibilityFile read_visibility(const std::filesystem::path& path) {
    detail::ByteReader r(path);
    r.expect_magic(kVisibilityMagic);
    VisibilityFile f;
    f.geometry = detail::read_geometry(r);
    const auto& g = f.geometry;
    const auto n = detail::checked_product({g.samples_per_axis, g.samples_per_axis, g.voxels.nx, g.voxels.ny,
                                            g.voxels.nz});
    auto values = detail::read_values(r, n);
    g.validate();
    f.visibility = VisibilityField(g.sample_count(), g.voxel_count());
    f.visibility.data = std::move(values);
    return f;
}

inline void write_normals(const std::filesystem::path& path, const ScanGeometry& g, const NormalField& n) {
    if (n.dims != g.voxels || n.u.size() != g.voxel_count() || n.v.size() != g.voxel_count())
        throw ShapeError("normal field does not match geometry");
    detail::ByteWriter w;
    w.raw(kNormalsMagic);
    detail::write_geometry(w, g);
    for (double x : n.u) w.f64(x);
    for (double x : n.v) w.f64(x);
    w.save(path);
}

struct NormalsFile {
    ScanGeometry geometry;
    NormalField normals;
};

inline NormalsFile read_normals(const std::filesystem::path& path) {
    detail::ByteReader r(path);
    r.expect_magic(kNormalsMagic);
    NormalsFile f;
    f.geometry = detail::read_geometry(r);
    const auto& g = f.geometry;
    const auto n = detail::checked_product({2, g.voxels.nx, g.voxels.ny, g.voxels.nz});
    auto values = detail::read_values(r, n);
    g.validate();
    f.normals.dims = g.voxels;
    const auto half = static_cast<std::ptrdiff_t>(n / 2);
    f.normals.u.assign(values.begin(), values.begin() + half);
    f.normals.v.assign(values.begin() + half, values.end());
    return f;
}

// ---------------------------------------------------------------------------
// Measured histograms
// ---------------------------------------------------------------------------

/// Raw photon-count histograms, one per wall sample, indexed [sample_x][sample_y][bin].
///
/// On disk: "NLOSHST1", u32 samples_per_axis, u32 bins, f64 native_bin_width
/// (seconds), f64 wall_extent (meters), then u64 counts.
struct HistogramBundle {
    std::uint32_t samples_per_axis = 1;
    std::uint32_t bins = 1;
    double native_bin_width = 4e-12;
    double wall_extent = 1.0;
    std::vector<std::uint64_t> counts;

    std::size_t sample_count() const { return static_cast<std::size_t>(samples_per_axis) * samples_per_axis; }
};

inline void write_histograms(const std::filesystem::path& path, const HistogramBundle& b) {
    if (b.counts.size() != b.sample_count() * b.bins) throw ShapeError("histogram counts do not match header");
    detail::ByteWriter w;
    w.raw(kHistogramMagic);
    w.u32(b.samples_per_axis);
    w.u32(b.bins);
    w.f64(b.native_bin_width);
    w.f64(b.wall_extent);
    for (auto c : b.counts) w.u64(c);
    w.save(path);
}

inline HistogramBundle read_histograms(const std::filesystem::path& path) {
    detail::ByteReader r(path);
    r.expect_magic(kHistogramMagic);
    HistogramBundle b;
    b.samples_per_axis = r.u32();
    b.bins = r.u32();
    b.native_bin_width = r.f64();
    b.wall_extent = r.f64();
    const auto n = detail::checked_product({b.samples_per_axis, b.samples_per_axis, b.bins});
    r.expect_payload(n);
    b.counts.resize(n);
    for (auto& c : b.counts) c = r.u64();
    return b;
}

struct PreprocessOptions {
    double target_bin_width = 16e-12;
    std::uint32_t direct_cut_bins = 600;
    /// Hidden-volume placement for the returned geometry; depth_voxels = 0 means samples_per_axis.
    double volume_origin_z = 0.5;
    std::uint32_t depth_voxels = 0;
    int falloff_exponent = 4;
};

struct PreprocessResult {
    TransientImage transient;
    std::vector<std::size_t> flagged_samples;  // all-zero histograms, left zero-filled
    double total_before_cut = 0.0;
};

/// Aligns each histogram so its peak (the direct reflection) sits in bin 0,
/// sums groups of native bins into bins of the target width (a trailing
/// partial group is kept, so counts are conserved) and zeroes the first
/// direct_cut_bins output bins.
inline PreprocessResult preprocess_histograms(const HistogramBundle& b, const PreprocessOptions& opt = {}) {
    if (b.counts.size() != b.sample_count() * b.bins) throw ShapeError("histogram counts do not match header");
    if (!(b.native_bin_width > 0.0) || !(opt.target_bin_width > 0.0)) throw Error("bin widths must be positive");
    const double ratio = opt.target_bin_width / b.native_bin_width;
    const double factor_d = std::round(ratio);
    if (factor_d < 1.0 || std::abs(ratio - factor_d) > 1e-9 * ratio)
        throw Error("target bin width must be an integer multiple of the native bin width");
    const auto factor = static_cast<std::uint32_t>(factor_d);
    const std::uint32_t out_bins = (b.bins + factor - 1) / factor;

    ScanGeometry g;
    g.samples_per_axis = b.samples_per_axis;
    const std::uint32_t nz = opt.depth_voxels == 0 ? b.samples_per_axis : opt.depth_voxels;
    g.voxels = {b.samples_per_axis, b.samples_per_axis, nz};
    g.wall_extent = b.wall_extent;
    g.voxel_pitch = b.wall_extent / b.samples_per_axis;
    g.volume_origin_z = opt.volume_origin_z;
    g.time_bins = out_bins;
    g.bin_width = opt.target_bin_width;
    g.falloff_exponent = opt.falloff_exponent;
    g.validate();

    PreprocessResult res{TransientImage(g), {}, 0.0};
    std::vector<std::uint64_t> aligned(b.bins);
    for (std::size_t i = 0; i < b.sample_count(); ++i) {
        const auto first = b.counts.begin() + static_cast<std::ptrdiff_t>(i * b.bins);
        const auto last = first + b.bins;
        const auto peak = std::max_element(first, last);
        if (*peak == 0) {
            res.flagged_samples.push_back(i);
            continue;
        }
        std::rotate_copy(first, peak, last, aligned.begin());
        for (std::uint32_t k = 0; k < b.bins; ++k) res.transient.at(i, k / factor) += static_cast<double>(aligned[k]);
    }
    for (double v : res.transient.data) res.total_before_cut += v;
    const std::uint32_t cut = std::min(opt.direct_cut_bins, out_bins);
    for (std::size_t i = 0; i < b.sample_count(); ++i)
        for (std::uint32_t k = 0; k < cut; ++k) res.transient.at(i, k) = 0.0;
    return res;
}

inline TransientImage preprocess_histograms(const HistogramBundle& b, double target_bin_width,
                                            std::uint32_t direct_cut_bins) {
    PreprocessOptions opt;
    opt.target_bin_width = target_bin_width;
    opt.direct_cut_bins = direct_cut_bins;
    return preprocess_histograms(b, opt).transient;
}

// ---------------------------------------------------------------------------
// Maximum intensity projections
// ---------------------------------------------------------------------------

struct GrayImage {
    std::uint32_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
    std::uint8_t at(std::uint32_t row, std::uint32_t col) const { return pixels[row * width + col]; }
};

/// Projects the maximum along `axis` (0 = x, 1 = y, 2 = z). The two remaining
/// axes, in increasing order, become rows and columns. Intensities are scaled
/// so the volume maximum maps to 255.
inline GrayImage mip_image(const AlbedoVolume& vol, int axis) {
    if (axis < 0 || axis > 2) throw Error("projection axis must be x, y or z");
    const auto& d = vol.geometry.voxels;
    const std::array<std::uint32_t, 3> dims{d.nx, d.ny, d.nz};
    const int ra = axis == 0 ? 1 : 0;
    const int ca = axis == 2 ? 1 : 2;
    GrayImage img;
    img.height = dims[ra];
    img.width = dims[ca];
    std::vector<double> proj(static_cast<std::size_t>(img.width) * img.height, 0.0);
    double vmax = 0.0;
    for (std::size_t j = 0; j < vol.size(); ++j) {
        const auto c = vol.geometry.voxel_coords(j);
        const std::array<std::uint32_t, 3> idx{c.x, c.y, c.z};
        double& p = proj[static_cast<std::size_t>(idx[ra]) * img.width + idx[ca]];
        p = std::max(p, vol[j]);
        vmax = std::max(vmax, vol[j]);
    }
    img.pixels.resize(proj.size());
    for (std::size_t k = 0; k < proj.size(); ++k)
        img.pixels[k] = vmax > 0.0 ? static_cast<std::uint8_t>(std::lround(255.0 * proj[k] / vmax)) : 0;
    return img;
}

/// Binary portable graymap (P5).
inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string() + " for writing");
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw FormatError(FormatErrorKind::Io, "write failed for " + path.string());
}

inline void render_mip(const AlbedoVolume& vol, int axis, const std::filesystem::path& path) {
    write_pgm(path, mip_image(vol, axis));
}

}  // namespace nlos
