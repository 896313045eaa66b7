#include <gtest/gtest.h>

#include <sstream>

#include "nlos/eval.hpp"

using namespace nlos;

namespace {

BenchmarkConfig quick_config() {
    BenchmarkConfig c;
    c.solver.linear.iterations = 10;
    c.solver.factored.outer_iterations = 1;
    c.solver.factored.albedo_inner_iterations = 5;
    c.solver.factored.visibility_gradient_steps = 2;
    c.solver.factored.normal_solver_iterations = 2;
    return c;
}

std::vector<BenchmarkScene> pick(std::uint32_t n, const std::string& name) {
    for (auto& s : benchmark_scenes(n, Shading::Isotropic))
        if (s.name == name) return {s};
    return {};
}

}  // namespace

TEST(Psnr, TwentyDecibelCase) {
    const auto g = ScanGeometry::cube(4);
    AlbedoVolume truth(g), est(g);
    truth[5] = 1.0;
    for (std::size_t j = 0; j < g.voxel_count(); ++j) est[j] = truth[j] + 0.1;
    const auto p = psnr(est, truth);
    EXPECT_FALSE(p.infinite);
    EXPECT_NEAR(p.mse, 0.01, 1e-15);
    EXPECT_NEAR(p.db, 20.0, 1e-9);
}

TEST(Psnr, ExactMatchIsInfinite) {
    const auto g = ScanGeometry::cube(2);
    AlbedoVolume truth(g, 0.25);
    const auto p = psnr(truth, truth);
    EXPECT_TRUE(p.infinite);
    EXPECT_EQ(p.mse, 0.0);
}

TEST(Psnr, InvariantUnderCommonScale) {
    const auto g = ScanGeometry::cube(3);
    AlbedoVolume truth(g), est(g);
    for (std::size_t j = 0; j < g.voxel_count(); ++j) {
        truth[j] = static_cast<double>(j % 5) / 4.0;
        est[j] = truth[j] + 0.01 * static_cast<double>(j % 3);
    }
    const double base = psnr(est, truth).db;
    for (double s : {2.0, 0.37, 1e3}) {
        AlbedoVolume ts = truth, es = est;
        for (double& v : ts.data) v *= s;
        for (double& v : es.data) v *= s;
        EXPECT_NEAR(psnr(es, ts).db, base, 1e-10);
    }
}

TEST(Psnr, Errors) {
    EXPECT_THROW(psnr(AlbedoVolume(ScanGeometry::cube(2)), AlbedoVolume(ScanGeometry::cube(3), 1.0)), ShapeError);
    EXPECT_THROW(psnr(AlbedoVolume(ScanGeometry::cube(2)), AlbedoVolume(ScanGeometry::cube(2))), Error);
}

TEST(Scaling, LeastSquaresGainRecoversMultiple) {
    const auto g = ScanGeometry::cube(3);
    AlbedoVolume truth(g);
    for (std::size_t j = 0; j < g.voxel_count(); j += 4) truth[j] = 0.5;
    AlbedoVolume est = truth;
    for (double& v : est.data) v *= 8.0;
    EXPECT_EQ(fit_scale(est, truth).data, truth.data);
    EXPECT_EQ(fit_scale(AlbedoVolume(g), truth).data, AlbedoVolume(g).data);
}

TEST(Reference, AllVisibleEqualsLinear) {
    const auto g = ScanGeometry::cube(6);
    Scene s;
    s.primitives.push_back(RectPatch{{0.0, 0.0, g.depth_center(2)}, 0.5, 0.34, {}});
    const auto r = rasterize_scene(s, g);
    const auto tau = forward_transient(FactoredModel::unoccluded_isotropic(g), r.albedo);
    LinearSolverConfig cfg;
    cfg.iterations = 20;
    const auto lin = admm_linear_solve(FactoredModel::unoccluded_isotropic(g), tau, cfg);
    const auto ref = reference_solution(tau, g, VisibilityField::ones(g), nullptr, cfg);
    EXPECT_EQ(ref.data, lin.data);
    EXPECT_THROW(reference_solution(tau, ScanGeometry::cube(4), VisibilityField::ones(g), nullptr, cfg), ShapeError);
}

TEST(Scenes, RosterRasterizesAndOccludes) {
    for (std::uint32_t n : {8u, 16u}) {
        const auto scenes = benchmark_scenes(n, Shading::Lambertian);
        ASSERT_EQ(scenes.size(), 5u);
        for (const auto& sc : scenes) {
            EXPECT_EQ(sc.spec.shading, Shading::Lambertian);
            const auto& g = sc.spec.geometry;
            const auto r = rasterize_scene(sc.spec.scene, g);
            std::size_t occupied = 0;
            for (double v : r.albedo.data) occupied += v > 0.0;
            EXPECT_GT(occupied, 0u) << sc.name;
            const auto vis = ground_truth_visibility(r.albedo, g, 0.0);
            // Shadowed occupied voxels exist exactly in the occluded scenes.
            bool shadowed = false;
            for (std::size_t i = 0; i < g.sample_count() && !shadowed; ++i)
                for (std::size_t j = 0; j < g.voxel_count(); ++j)
                    if (r.albedo[j] > 0.0 && vis.at(i, j) == 0.0) {
                        shadowed = true;
                        break;
                    }
            EXPECT_EQ(shadowed, sc.occluded) << sc.name;
        }
    }
}

TEST(Methods, LabelsRoundTrip) {
    for (Method m : all_methods()) EXPECT_EQ(method_from_label(method_label(m)), m);
    EXPECT_FALSE(method_from_label("LCT").has_value());
}

TEST(Benchmark, EmptyMethodListGivesEmptyReport) {
    const auto rep = run_benchmark(benchmark_scenes(8, Shading::Isotropic), {}, quick_config(), 3);
    EXPECT_TRUE(rep.rows.empty());
    EXPECT_EQ(rep.seed, 3u);
}

TEST(Benchmark, DeterministicAndRecordsFailures) {
    auto cfg = quick_config();
    cfg.photons_at_peak = 1e4;
    const auto scenes = pick(8, "two_planes");
    ASSERT_EQ(scenes.size(), 1u);
    const std::vector<Method> methods = {Method::BP, Method::FBP, Method::Lin, Method::Factored, Method::LinWithV};
    const auto a = run_benchmark(scenes, methods, cfg, 7);
    const auto b = run_benchmark(scenes, methods, cfg, 7);
    ASSERT_EQ(a.rows.size(), methods.size());
    for (std::size_t k = 0; k < a.rows.size(); ++k) {
        EXPECT_TRUE(a.rows[k].ok) << a.rows[k].error;
        EXPECT_EQ(a.rows[k].psnr.db, b.rows[k].psnr.db);
    }
    ASSERT_NE(a.find("two_planes", Method::Lin, 1e4), nullptr);
    EXPECT_EQ(a.find("two_planes", Method::Lin), nullptr);

    cfg.solver.factored.visibility_byte_budget = 16;
    const auto c = run_benchmark(scenes, {Method::Factored, Method::BP}, cfg, 7);
    EXPECT_FALSE(c.rows[0].ok);
    EXPECT_NE(c.rows[0].error.find("budget"), std::string::npos);
    EXPECT_TRUE(c.rows[1].ok);

    std::istringstream lines(report_jsonl(a));
    std::string line;
    std::size_t count = 0;
    while (std::getline(lines, line)) {
        const auto j = Json::parse(line);
        EXPECT_EQ(j.at("scene"), "two_planes");
        EXPECT_EQ(j.at("seed"), 7);
        EXPECT_EQ(j.at("photons_at_peak"), 1e4);
        ++count;
    }
    EXPECT_EQ(count, methods.size());
    EXPECT_NE(report_table(c).find("failed"), std::string::npos);
}
