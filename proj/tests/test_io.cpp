#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "nlos/io.hpp"
#include "nlos/scene.hpp"

using namespace nlos;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() / ("nlos_io_" + std::to_string(std::random_device{}()));
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

FormatErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.kind;
    }
    ADD_FAILURE() << "no FormatError thrown";
    return FormatErrorKind::Io;
}

ScanGeometry odd_geometry() {
    auto g = ScanGeometry::cube(3, 0.9, 0.37, 3.0, 2);
    g.light_speed = 299792458.0;
    return g;
}

}  // namespace

TEST(Formats, TransientRoundTripIsBitExact) {
    TempDir dir;
    TransientImage t(odd_geometry());
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (double& v : t.data) v = unit(rng) / 3.0;
    write_transient(dir / "a.trn", t);
    const auto back = read_transient(dir / "a.trn");
    EXPECT_TRUE(back.geometry == t.geometry);
    EXPECT_EQ(std::memcmp(back.data.data(), t.data.data(), t.data.size() * sizeof(double)), 0);
    write_transient(dir / "b.trn", back);
    EXPECT_EQ(slurp(dir / "a.trn"), slurp(dir / "b.trn"));
}

TEST(Formats, VolumeVisibilityAndNormalsRoundTrip) {
    TempDir dir;
    const auto g = odd_geometry();
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AlbedoVolume a(g);
    for (double& v : a.data) v = unit(rng);
    write_volume(dir / "v.vol", a);
    const auto a2 = read_volume(dir / "v.vol");
    EXPECT_TRUE(a2.geometry == g);
    EXPECT_EQ(a2.data, a.data);

    VisibilityField vis(g.sample_count(), g.voxel_count());
    for (double& v : vis.data) v = unit(rng);
    write_visibility(dir / "v.vis", g, vis);
    const auto vf = read_visibility(dir / "v.vis");
    EXPECT_TRUE(vf.geometry == g);
    EXPECT_EQ(vf.visibility.data, vis.data);
    EXPECT_EQ(vf.visibility.samples, g.sample_count());

    NormalField n(g.voxels, 0.0, 0.0);
    for (std::size_t j = 0; j < n.size(); ++j) {
        n.u[j] = 6.0 * unit(rng);
        n.v[j] = 3.0 * unit(rng);
    }
    write_normals(dir / "n.nrm", g, n);
    const auto nf = read_normals(dir / "n.nrm");
    EXPECT_EQ(nf.normals.u, n.u);
    EXPECT_EQ(nf.normals.v, n.v);
}

TEST(Formats, HistogramRoundTrip) {
    TempDir dir;
    HistogramBundle b;
    b.samples_per_axis = 2;
    b.bins = 5;
    b.counts.resize(20);
    std::iota(b.counts.begin(), b.counts.end(), std::uint64_t{1} << 40);
    write_histograms(dir / "h.hst", b);
    const auto b2 = read_histograms(dir / "h.hst");
    EXPECT_EQ(b2.counts, b.counts);
    EXPECT_EQ(b2.native_bin_width, b.native_bin_width);
}

TEST(Formats, ErrorsAreClassified) {
    TempDir dir;
    const auto g = odd_geometry();
    write_volume(dir / "v.vol", AlbedoVolume(g, 0.5));
    auto bytes = slurp(dir / "v.vol");

    EXPECT_EQ(kind_of([&] { read_transient(dir / "v.vol"); }), FormatErrorKind::MagicMismatch);

    auto versioned = bytes;
    versioned[7] = '2';
    spit(dir / "ver.vol", versioned);
    EXPECT_EQ(kind_of([&] { read_volume(dir / "ver.vol"); }), FormatErrorKind::VersionMismatch);

    auto cut = bytes;
    cut.resize(cut.size() - 3);
    spit(dir / "cut.vol", cut);
    EXPECT_EQ(kind_of([&] { read_volume(dir / "cut.vol"); }), FormatErrorKind::Truncated);

    auto header_only = bytes;
    header_only.resize(20);
    spit(dir / "hdr.vol", header_only);
    EXPECT_EQ(kind_of([&] { read_volume(dir / "hdr.vol"); }), FormatErrorKind::Truncated);

    auto huge = bytes;
    for (int axis = 0; axis < 3; ++axis) {
        const std::size_t off = 12 + 4 * axis;  // after magic and N
        huge[off] = 0;
        huge[off + 1] = 0;
        huge[off + 2] = 1;  // 65536 per axis
        huge[off + 3] = 0;
    }
    spit(dir / "huge.vol", huge);
    EXPECT_EQ(kind_of([&] { read_volume(dir / "huge.vol"); }), FormatErrorKind::DimensionOverflow);

    EXPECT_EQ(kind_of([&] { read_volume(dir / "missing.vol"); }), FormatErrorKind::Io);
}

TEST(Preprocess, PeakAlignedAndCountsConserved) {
    HistogramBundle b;
    b.samples_per_axis = 2;
    b.bins = 64;
    b.counts.assign(4 * 64, 0);
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> small(0, 5);
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::uint32_t k = 0; k < b.bins; ++k) b.counts[i * 64 + k] = static_cast<std::uint64_t>(small(rng));
        b.counts[i * 64 + 37 - i] = 1000;  // direct peak
    }
    for (auto c : b.counts) total += c;

    PreprocessOptions opt;
    opt.direct_cut_bins = 0;
    const auto res = preprocess_histograms(b, opt);
    EXPECT_EQ(res.transient.geometry.time_bins, 16u);
    EXPECT_DOUBLE_EQ(res.total_before_cut, static_cast<double>(total));
    for (std::size_t i = 0; i < 4; ++i) {
        // The peak lands at native bin 0 and its three successors share output bin 0.
        const std::size_t p = i * 64 + 37 - i;
        EXPECT_EQ(res.transient.at(i, 0),
                  static_cast<double>(b.counts[p] + b.counts[p + 1] + b.counts[p + 2] + b.counts[p + 3]));
        // Native bins before the peak wrap around to the end.
        const std::size_t s = i * 64;
        const std::uint32_t pre = 37 - static_cast<std::uint32_t>(i);
        std::vector<std::uint64_t> aligned(b.counts.begin() + static_cast<std::ptrdiff_t>(s + pre),
                                           b.counts.begin() + static_cast<std::ptrdiff_t>(s + 64));
        aligned.insert(aligned.end(), b.counts.begin() + static_cast<std::ptrdiff_t>(s),
                       b.counts.begin() + static_cast<std::ptrdiff_t>(s + pre));
        for (std::uint32_t k = 0; k < 16; ++k)
            EXPECT_EQ(res.transient.at(i, k),
                      static_cast<double>(aligned[4 * k] + aligned[4 * k + 1] + aligned[4 * k + 2] + aligned[4 * k + 3]));
    }

    opt.direct_cut_bins = 3;
    const auto cut = preprocess_histograms(b, opt);
    EXPECT_DOUBLE_EQ(cut.total_before_cut, static_cast<double>(total));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::uint32_t k = 0; k < 16; ++k)
            EXPECT_EQ(cut.transient.at(i, k), k < 3 ? 0.0 : res.transient.at(i, k));
}

TEST(Preprocess, DefaultsAndPartialTrailingBin) {
    PreprocessOptions opt;
    EXPECT_EQ(opt.target_bin_width, 16e-12);
    EXPECT_EQ(opt.direct_cut_bins, 600u);
    HistogramBundle b;
    b.samples_per_axis = 1;
    b.bins = 10;
    b.counts = {9, 1, 1, 1, 1, 1, 1, 1, 1, 2};
    const auto t = preprocess_histograms(b, 16e-12, 0);
    ASSERT_EQ(t.geometry.time_bins, 3u);
    EXPECT_EQ(t.at(0, 0), 12.0);
    EXPECT_EQ(t.at(0, 1), 4.0);
    EXPECT_EQ(t.at(0, 2), 3.0);
    // 600 cut bins exceed the histogram here; everything is cleared.
    const auto all = preprocess_histograms(b, opt).transient;
    for (double v : all.data) EXPECT_EQ(v, 0.0);
}

TEST(Preprocess, EmptySamplesAreFlagged) {
    HistogramBundle b;
    b.samples_per_axis = 2;
    b.bins = 8;
    b.counts.assign(32, 0);
    b.counts[3] = 5;
    b.counts[8 * 2 + 1] = 2;
    const auto res = preprocess_histograms(b, PreprocessOptions{16e-12, 0});
    EXPECT_EQ(res.flagged_samples, (std::vector<std::size_t>{1, 3}));
}

TEST(Preprocess, RejectsNonIntegerRatio) {
    HistogramBundle b;
    b.bins = 4;
    b.counts.assign(4, 1);
    EXPECT_THROW(preprocess_histograms(b, 10e-12, 0), Error);
    b.counts.pop_back();
    EXPECT_THROW(preprocess_histograms(b, 16e-12, 0), ShapeError);
}

TEST(Preprocess, RecoversPoissonSampledTransient) {
    // A transient at 16 ps is spread over 4 ps native bins as Poisson counts,
    // preceded by a strong direct peak at a random offset.
    const std::uint32_t n = 3, out_bins = 40, cut = 5;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> expect(n * n * out_bins, 0.0);
    for (std::size_t i = 0; i < n * n; ++i)
        for (std::uint32_t k = cut; k < out_bins; ++k) expect[i * out_bins + k] = 400.0 * unit(rng);

    HistogramBundle b;
    b.samples_per_axis = n;
    b.bins = 4 * out_bins;
    b.counts.assign(n * n * b.bins, 0);
    for (std::size_t i = 0; i < n * n; ++i) {
        std::vector<std::uint64_t> h(b.bins, 0);
        h[0] = 100000;
        for (std::uint32_t k = 0; k < out_bins; ++k)
            for (int q = 0; q < 4; ++q) {
                std::poisson_distribution<std::uint64_t> pd(expect[i * out_bins + k] / 4.0);
                h[4 * k + q] += expect[i * out_bins + k] > 0.0 ? pd(rng) : 0;
            }
        const auto shift = static_cast<std::ptrdiff_t>(rng() % b.bins);
        std::rotate_copy(h.begin(), h.end() - shift, h.end(), b.counts.begin() + static_cast<std::ptrdiff_t>(i * b.bins));
    }
    const auto t = preprocess_histograms(b, 16e-12, cut);
    for (std::size_t i = 0; i < n * n; ++i)
        for (std::uint32_t k = 0; k < out_bins; ++k) {
            const double mu = expect[i * out_bins + k];
            EXPECT_NEAR(t.at(i, k), mu, 5.0 * std::sqrt(mu) + 1e-9) << i << "," << k;
        }
}

TEST(Images, MaximumProjectionAxes) {
    const auto g = ScanGeometry::cube(4);
    AlbedoVolume v(g);
    v[g.voxel_index(1, 2, 3)] = 2.0;
    v[g.voxel_index(0, 0, 0)] = 1.0;
    const auto z = mip_image(v, 2);
    EXPECT_EQ(z.at(1, 2), 255);
    EXPECT_EQ(z.at(0, 0), 128);
    EXPECT_EQ(z.at(3, 3), 0);
    EXPECT_EQ(mip_image(v, 0).at(2, 3), 255);
    EXPECT_EQ(mip_image(v, 1).at(1, 3), 255);
    EXPECT_THROW(mip_image(v, 3), Error);
}

TEST(Images, TwoPlaneProjectionMatchesFootprints) {
    const auto g = ScanGeometry::cube(16);
    const RectPatch front{{-0.1, 0.0, g.depth_center(4)}, 0.4, 0.5, {}};
    const RectPatch rear{{0.0, 0.0, g.depth_center(12)}, 0.75, 0.75, {}};
    Scene s;
    s.primitives = {front, rear};
    const auto img = mip_image(rasterize_scene(s, g).albedo, 2);
    auto inside = [](const RectPatch& p, double x, double y) {
        return std::abs(x - p.center.x) < 0.5 * p.width && std::abs(y - p.center.y) < 0.5 * p.height;
    };
    for (std::uint32_t x = 0; x < 16; ++x)
        for (std::uint32_t y = 0; y < 16; ++y) {
            const Vec3 c = g.voxel_center(g.voxel_index(x, y, 0));
            const bool covered = inside(front, c.x, c.y) || inside(rear, c.x, c.y);
            EXPECT_EQ(img.at(x, y), covered ? 255 : 0) << x << "," << y;
        }
}

TEST(Images, PgmHeaderAndPayload) {
    TempDir dir;
    GrayImage img{3, 2, {0, 1, 2, 3, 4, 255}};
    write_pgm(dir / "a.pgm", img);
    const auto bytes = slurp(dir / "a.pgm");
    const std::string header = "P5\n3 2\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 6);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())), header);
    EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 255);
}
