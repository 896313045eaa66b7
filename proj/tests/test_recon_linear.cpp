#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "nlos/recon_linear.hpp"
#include "nlos/scene.hpp"

using namespace nlos;

namespace {

double sq(double x) { return x * x; }

TransientImage simulate(const FactoredModel& m, const AlbedoVolume& a) { return forward_transient(m, a); }

}  // namespace

TEST(Prox, SoftThreshold) {
    EXPECT_DOUBLE_EQ(soft_threshold(3.0, 1.0), 2.0);
    EXPECT_DOUBLE_EQ(soft_threshold(-3.0, 1.0), -2.0);
    EXPECT_DOUBLE_EQ(soft_threshold(0.5, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(soft_threshold(-1.0, 1.0), 0.0);
}

TEST(Operators, GradientAdjointIdentity) {
    const GridDims d{3, 4, 5};
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    std::vector<double> x(d.count()), y(3 * d.count());
    for (double& v : x) v = nd(rng);
    for (double& v : y) v = nd(rng);
    const auto gx = gradient_3d(d, x);
    const auto gty = gradient_3d_adjoint(d, y);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) lhs += gx[k] * y[k];
    for (std::size_t k = 0; k < x.size(); ++k) rhs += x[k] * gty[k];
    EXPECT_NEAR(lhs, rhs, 1e-12 * std::abs(lhs));
}

TEST(Operators, TotalVariationOfStep) {
    const GridDims d{2, 2, 2};
    // x = 1 on the x = 1 half: four unit jumps along x, nothing else.
    std::vector<double> x = {0, 0, 0, 0, 1, 1, 1, 1};
    EXPECT_DOUBLE_EQ(total_variation(d, x), 4.0);
    EXPECT_DOUBLE_EQ(total_variation(d, std::vector<double>(8, 3.0)), 0.0);
}

TEST(Operators, LaplacianAnnihilatesConstantsAndMatchesGradient) {
    const GridDims d{3, 3, 4};
    for (double v : laplacian_3d(d, std::vector<double>(d.count(), 2.5))) EXPECT_EQ(v, 0.0);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    std::vector<double> x(d.count());
    for (double& v : x) v = nd(rng);
    // With zero-flux boundaries the Laplacian is -D^T D.
    const auto dtd = gradient_3d_adjoint(d, gradient_3d(d, x));
    const auto lap = laplacian_3d(d, x);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(lap[k], -dtd[k], 1e-12);
}

TEST(ConjugateResidual, MonotoneAndConvergent) {
    const std::size_t n = 30;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd b(n, n);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) b(r, c) = nd(rng);
    const Eigen::MatrixXd m = b.transpose() * b + 0.1 * Eigen::MatrixXd::Identity(n, n);
    std::vector<double> rhs(n);
    for (double& v : rhs) v = nd(rng);
    auto apply = [&](std::span<const double> v) {
        const Eigen::VectorXd out = m * Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(n));
        return std::vector<double>(out.data(), out.data() + n);
    };
    std::vector<double> x(n, 0.0);
    const auto norms = conjugate_residual(apply, rhs, x, 200);
    for (std::size_t k = 1; k < norms.size(); ++k) EXPECT_LE(norms[k], norms[k - 1] * (1.0 + 1e-12));
    const Eigen::VectorXd exact = m.ldlt().solve(Eigen::Map<const Eigen::VectorXd>(rhs.data(), n));
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(x[k], exact[static_cast<Eigen::Index>(k)], 1e-6);
}

TEST(Admm, ApproachesDenseLeastSquares) {
    const auto g = ScanGeometry::cube(4);
    const auto model = FactoredModel::unoccluded_isotropic(g);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AlbedoVolume truth(g);
    for (double& v : truth.data) v = unit(rng);
    TransientImage tau = simulate(model, truth);
    std::normal_distribution<double> nd(0.0, 0.05);
    for (double& v : tau.data) v += nd(rng);  // keep the optimum off zero residual

    const auto a = dense_system_matrix(model);
    Eigen::MatrixXd m(a.rows, a.cols);
    for (std::size_t r = 0; r < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c) m(r, c) = a.at(r, c);
    const Eigen::Map<const Eigen::VectorXd> t(tau.data.data(), static_cast<Eigen::Index>(tau.data.size()));
    ASSERT_EQ(m.colPivHouseholderQr().rank(), m.cols());
    const Eigen::VectorXd ls = m.colPivHouseholderQr().solve(t);
    const double best = (m * ls - t).norm();

    LinearSolverConfig cfg;
    cfg.sparsity_weight = 0.0;
    cfg.tv_weight = 0.0;
    cfg.nonnegativity = false;
    cfg.iterations = 300;
    cfg.cg_iterations = 20;
    cfg.admm_penalty = 0.1;
    const auto est = admm_linear_solve(model, tau, cfg);
    const double got = std::sqrt(data_term(model, tau, est.data));
    EXPECT_LE(got, 1.01 * best);
}

TEST(Admm, NonnegativeAndNeverWorseThanZero) {
    const auto g = ScanGeometry::cube(6);
    Scene s;
    s.primitives.push_back(RectPatch{{0.0, 0.0, g.depth_center(3)}, 0.5, 0.5, {}});
    const auto r = rasterize_scene(s, g);
    const auto model = FactoredModel::unoccluded_isotropic(g);
    const auto tau = simulate(model, r.albedo);
    LinearSolverConfig cfg;
    cfg.iterations = 40;
    const auto res = admm_linear_solve_detailed(model, tau, cfg);
    for (double v : res.albedo.data) EXPECT_GE(v, 0.0);
    double tau_sq = 0.0;
    for (double v : tau.data) tau_sq += sq(v);
    EXPECT_LE(res.objective, tau_sq);
    const double recomputed = data_term(model, tau, res.albedo.data) + prior_value(g.voxels, res.albedo.data, cfg);
    EXPECT_NEAR(res.objective, recomputed, 1e-9 * recomputed);
    EXPECT_EQ(res.objective_trace.size(), 40u);
}

TEST(Admm, RecoversUnoccludedPlane) {
    const auto g = ScanGeometry::cube(8);
    Scene s;
    s.primitives.push_back(RectPatch{{0.0, 0.0, g.depth_center(4)}, 0.5, 0.5, {}});
    const auto r = rasterize_scene(s, g);
    const auto model = FactoredModel::unoccluded_isotropic(g);
    const auto est = admm_linear_solve(model, simulate(model, r.albedo), LinearSolverConfig{});
    double sse = 0.0, occupied = 0.0;
    int count = 0;
    for (std::size_t j = 0; j < g.voxel_count(); ++j) {
        sse += sq(est[j] - r.albedo[j]);
        if (r.albedo[j] > 0) {
            occupied += est[j];
            ++count;
        }
    }
    EXPECT_GT(occupied / count, 0.8);
    EXPECT_LT(sse / g.voxel_count(), 0.01);
}

TEST(Admm, WarmStartAtSolutionStaysPut) {
    const auto g = ScanGeometry::cube(4);
    AlbedoVolume truth(g);
    truth[g.voxel_index(1, 1, 2)] = 1.0;
    const auto model = FactoredModel::unoccluded_isotropic(g);
    const auto tau = simulate(model, truth);
    LinearSolverConfig cfg;
    cfg.sparsity_weight = 0.0;
    cfg.tv_weight = 0.0;
    cfg.iterations = 5;
    const auto res = admm_linear_solve_detailed(model, tau, cfg, &truth);
    EXPECT_EQ(res.objective, 0.0);
    EXPECT_EQ(res.albedo.data, truth.data);
}

TEST(Admm, RejectsBadConfig) {
    const auto g = ScanGeometry::cube(2);
    const auto model = FactoredModel::unoccluded_isotropic(g);
    LinearSolverConfig cfg;
    cfg.admm_penalty = 0.0;
    EXPECT_THROW(admm_linear_solve(model, TransientImage(g), cfg), Error);
    cfg = {};
    cfg.sparsity_weight = -1.0;
    EXPECT_THROW(admm_linear_solve(model, TransientImage(g), cfg), Error);
    cfg = {};
    cfg.iterations = 0;
    EXPECT_THROW(admm_linear_solve(model, TransientImage(g), cfg), Error);
}

TEST(Backprojection, EqualsClampedDenseTranspose) {
    const auto g = ScanGeometry::cube(3);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    TransientImage tau(g);
    for (double& v : tau.data) v = unit(rng);
    const auto a = dense_system_matrix(FactoredModel::unoccluded_isotropic(g));
    const auto bp = backproject(tau);
    for (std::size_t c = 0; c < a.cols; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < a.rows; ++r) s += a.at(r, c) * tau.data[r];
        EXPECT_NEAR(bp[c], std::max(0.0, s), 1e-12 * std::max(1.0, s));
    }
    TransientImage bad = tau;
    bad.data[0] = -1.0;
    EXPECT_THROW(backproject(bad), Error);
}

TEST(Backprojection, FilteredIsSharpenedAndThresholded) {
    const auto g = ScanGeometry::cube(8);
    Scene s;
    s.primitives.push_back(RectPatch{{0.0, 0.0, g.depth_center(4)}, 0.25, 0.25, {}});
    const auto r = rasterize_scene(s, g);
    const auto tau = simulate(FactoredModel::unoccluded_isotropic(g), r.albedo);
    const auto fbp = filtered_backproject(tau);
    const auto lap = laplacian_3d(g.voxels, backproject(tau).data);
    for (std::size_t j = 0; j < g.voxel_count(); ++j) EXPECT_DOUBLE_EQ(fbp[j], std::max(0.0, -lap[j]));
    const auto cut = filtered_backproject(tau, 0.9);
    std::size_t kept = 0, positive = 0;
    for (std::size_t j = 0; j < g.voxel_count(); ++j) {
        kept += cut[j] > 0.0;
        positive += fbp[j] > 0.0;
        if (cut[j] > 0.0) {
            EXPECT_EQ(cut[j], fbp[j]);
        }
    }
    EXPECT_LE(kept, positive / 10 + 2);
    EXPECT_GT(kept, 0u);
    EXPECT_THROW(filtered_backproject(tau, 1.0), Error);
}
