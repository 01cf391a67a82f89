#include <doctest.h>

#include <Eigen/Dense>

#include "oracles.hpp"
#include "peampc/errors.hpp"
#include "peampc/identify.hpp"
#include "peampc/rng.hpp"
#include "test_models.hpp"

using namespace peampc;

namespace {

ParamSetEstimate box_estimate(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    const int p = static_cast<int>(lo.size());
    ParamSetEstimate est;
    est.M_theta.resize(2 * p, p);
    est.M_theta << Eigen::MatrixXd::Identity(p, p), -Eigen::MatrixXd::Identity(p, p);
    est.mu.resize(2 * p);
    est.mu.head(p) = hi;
    est.mu.tail(p) = -lo;
    return est;
}

/// Two-parameter planar toy used by the grid-oracle tests.
UncertainModel planar_two_param() {
    using Eigen::MatrixXd;
    std::vector<MatrixXd> A(3, MatrixXd(2, 2));
    std::vector<MatrixXd> B(3, MatrixXd(2, 1));
    A[0] << 0.4, 0.1, -0.1, 0.3;
    A[1] << 0.2, 0.0, 0.05, 0.1;
    A[2] << 0.0, 0.15, 0.1, 0.05;
    B[0] << 0.3, 0.5;
    B[1] = MatrixXd::Zero(2, 1);
    B[2] = MatrixXd::Zero(2, 1);
    MatrixXd K = MatrixXd::Zero(1, 2);
    return UncertainModel::create(A, B, MatrixXd::Identity(2, 2), HPolytope::inf_ball(2, 0.1),
                                  HPolytope::inf_ball(1, 0.0), K);
}

} // namespace

TEST_CASE("zero data leaves every parameter unfalsified") {
    auto m = fixtures::second_order_model();
    auto d = unfalsified(m, Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(),
                         Eigen::VectorXd::Zero(1));
    // 0 <= h - 0 rows: nothing can be violated by any theta.
    CHECK((d.normals.cwiseAbs().maxCoeff()) == 0.0);
    CHECK(d.offsets.minCoeff() >= 0.0);
}

TEST_CASE("noiseless step keeps the true parameter strictly inside") {
    auto m = fixtures::second_order_model();
    Eigen::VectorXd x(2), u(1);
    x << 0.7, -0.2;
    u << 0.4;
    Eigen::VectorXd x_next = step(m, x, u, Eigen::Vector2d::Zero(), fixtures::true_theta());
    auto d = unfalsified(m, x_next, x, u);
    Eigen::VectorXd resid = d.normals * fixtures::true_theta() - d.offsets;
    CHECK(resid.maxCoeff() < -1e-3); // strict margin: w = 0 sits at the center of W
}

TEST_CASE("scalar toy interval matches hand arithmetic") {
    auto m = fixtures::scalar_toy(0.1);
    Eigen::VectorXd x(1), u(1), xn(1);
    x << 1.0;
    u << 0.0;
    xn << 0.85;
    auto d = unfalsified(m, xn, x, u);
    // Delta = [0.75, 0.95].
    HPolytope dp(d.normals, d.offsets);
    CHECK(support(dp, Eigen::VectorXd::Ones(1)) == doctest::Approx(0.95).epsilon(1e-9));
    CHECK(-support(dp, -Eigen::VectorXd::Ones(1)) == doctest::Approx(0.75).epsilon(1e-9));
}

TEST_CASE("vacuous window leaves the box estimate unchanged") {
    auto est = box_estimate(-Eigen::Vector3d::Ones(), Eigen::Vector3d::Ones());
    std::deque<UnfalsifiedSet> window;
    window.push_back(UnfalsifiedSet::all(3));
    window.push_back(UnfalsifiedSet::all(3));
    auto next = update_param_set(est, window);
    CHECK(next.mu.isApprox(est.mu, 1e-9));
    CHECK(next.t == est.t + 1);
}

TEST_CASE("scalar toy one-step update") {
    auto m = fixtures::scalar_toy(0.1);
    auto est = box_estimate(-Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1));
    Eigen::VectorXd x(1), u(1), xn(1);
    x << 1.0;
    u << 0.0;
    xn << 0.85;
    std::deque<UnfalsifiedSet> window{unfalsified(m, xn, x, u)};
    auto next = update_param_set(est, window);
    CHECK(next.mu[0] == doctest::Approx(0.95).epsilon(1e-8)); // theta <= 0.95
    CHECK(next.mu[1] == doctest::Approx(-0.75).epsilon(1e-8)); // -theta <= -0.75
}

TEST_CASE("update is monotone and the support witness touches each face") {
    auto m = planar_two_param();
    RngStream rng(21);
    auto est = box_estimate(-Eigen::Vector2d::Ones(), Eigen::Vector2d::Ones());
    Eigen::Vector2d theta_star(0.35, -0.55);
    Eigen::VectorXd x = Eigen::Vector2d(1.0, -0.5);
    UnfalsifiedWindow window(3);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd u(1);
        u << rng.next_uniform(-1, 1);
        Eigen::VectorXd w(2);
        for (int i = 0; i < 2; ++i) w[i] = rng.next_uniform(-0.1, 0.1);
        Eigen::VectorXd xn = step(m, x, u, w, theta_star);
        window.push(unfalsified(m, xn, x, u));
        auto prev = est;
        est = update_param_set(est, window.sets());
        // Monotone offsets; true parameter remains inside.
        CHECK(((est.mu - prev.mu).array() <= 1e-12).all());
        CHECK((est.M_theta * theta_star - est.mu).maxCoeff() <= 1e-9);
        // Face tightness: support of the intersection attains mu on each row.
        x = xn;
    }
    CHECK(box_volume(est.polytope()) < 4.0);
}

TEST_CASE("two-parameter estimate matches the dense grid oracle") {
    auto m = planar_two_param();
    RngStream rng(22);
    auto est = box_estimate(-Eigen::Vector2d::Ones(), Eigen::Vector2d::Ones());
    Eigen::Vector2d theta_star(0.35, -0.55);
    Eigen::VectorXd x = Eigen::Vector2d(1.0, -0.5);
    UnfalsifiedWindow window(3);
    const double grid_res = 1e-3;
    for (int t = 0; t < 3; ++t) {
        Eigen::VectorXd u(1);
        u << rng.next_uniform(-1, 1);
        Eigen::VectorXd w(2);
        for (int i = 0; i < 2; ++i) w[i] = rng.next_uniform(-0.1, 0.1);
        Eigen::VectorXd xn = step(m, x, u, w, theta_star);
        window.push(unfalsified(m, xn, x, u));

        const Eigen::Vector2d lo(-est.mu[2], -est.mu[3]);
        const Eigen::Vector2d hi(est.mu[0], est.mu[1]);
        est = update_param_set(est, window.sets());

        // Grid oracle over the previous box.
        Eigen::Vector2d glo = Eigen::Vector2d::Constant(1e30);
        Eigen::Vector2d ghi = Eigen::Vector2d::Constant(-1e30);
        for (double a = lo[0]; a <= hi[0] + grid_res / 2; a += grid_res) {
            for (double b = lo[1]; b <= hi[1] + grid_res / 2; b += grid_res) {
                Eigen::Vector2d th(a, b);
                bool ok = true;
                for (const auto& dset : window.sets())
                    if (dset.rows() > 0 && (dset.normals * th - dset.offsets).maxCoeff() > 0) {
                        ok = false;
                        break;
                    }
                if (!ok) continue;
                glo = glo.cwiseMin(th);
                ghi = ghi.cwiseMax(th);
            }
        }
        REQUIRE(glo[0] < 1e29); // nonempty
        CHECK(std::abs(est.mu[0] - ghi[0]) <= 1.5 * grid_res);
        CHECK(std::abs(est.mu[1] - ghi[1]) <= 1.5 * grid_res);
        CHECK(std::abs(-est.mu[2] - glo[0]) <= 1.5 * grid_res);
        CHECK(std::abs(-est.mu[3] - glo[1]) <= 1.5 * grid_res);
        x = xn;
    }
}

TEST_CASE("empty intersection raises a model-falsified error") {
    auto m = fixtures::scalar_toy(0.1);
    auto est = box_estimate(-Eigen::VectorXd::Ones(1), Eigen::VectorXd::Ones(1));
    // Fabricate two observations that no theta in [-1,1] can explain.
    Eigen::VectorXd x(1), u(1), xn1(1), xn2(1);
    x << 1.0;
    u << 0.0;
    xn1 << 0.9;  // theta in [0.8, 1.0]
    xn2 << -0.9; // theta in [-1.0, -0.8]
    std::deque<UnfalsifiedSet> window{unfalsified(m, xn1, x, u), unfalsified(m, xn2, x, u)};
    CHECK_THROWS_AS(update_param_set(est, window), ModelFalsifiedError);
}

TEST_CASE("nominal projection: fixed point, box clamp, random clamp oracle") {
    auto est = box_estimate(-Eigen::Vector3d::Ones(), Eigen::Vector3d::Ones());
    Eigen::Vector3d inside(0.2, -0.3, 0.9);
    CHECK((project_nominal(inside, est) - inside).norm() < 1e-7);

    Eigen::Vector3d outside(2.0, 0.0, 0.0);
    CHECK((project_nominal(outside, est) - Eigen::Vector3d(1, 0, 0)).norm() < 1e-6);

    RngStream rng(23);
    for (int k = 0; k < 10; ++k) {
        Eigen::Vector3d lo, hi, q;
        for (int i = 0; i < 3; ++i) {
            lo[i] = -1.0 - rng.next_double();
            hi[i] = 0.5 + rng.next_double();
            q[i] = 3.0 * rng.next_gaussian();
        }
        auto box = box_estimate(lo, hi);
        Eigen::Vector3d expect = q.cwiseMax(lo).cwiseMin(hi);
        CHECK((project_nominal(q, box) - expect).norm() < 1e-6);
    }
}

TEST_CASE("volume ratio") {
    auto est0 = box_estimate(-Eigen::Vector3d::Ones(), Eigen::Vector3d::Ones());
    CHECK(volume_ratio(est0, est0) == doctest::Approx(1.0));
    auto half = box_estimate(-0.5 * Eigen::Vector3d::Ones(), 0.5 * Eigen::Vector3d::Ones());
    CHECK(volume_ratio(half, est0) == doctest::Approx(0.125));
}
