#include <doctest.h>

#include <Eigen/Dense>

#include "peampc/errors.hpp"
#include "peampc/plant.hpp"
#include "peampc/rng.hpp"
#include "test_models.hpp"

using namespace peampc;

TEST_CASE("eval_AB at the affine base point and at the true parameter") {
    auto m = fixtures::second_order_model();
    auto [A0, B0] = eval_AB(m, Eigen::Vector3d::Zero());
    CHECK(A0.isApprox(m.A[0]));
    CHECK(B0.isApprox(m.B[0]));

    auto [Astar, Bstar] = eval_AB(m, fixtures::true_theta());
    CHECK(Astar(0, 0) == doctest::Approx(0.5366).epsilon(1e-12));
    CHECK(Astar(0, 1) == doctest::Approx(0.2038).epsilon(1e-12));
    CHECK(Astar(1, 0) == doctest::Approx(-0.0406).epsilon(1e-12));
    CHECK(Astar(1, 1) == doctest::Approx(0.631).epsilon(1e-12));
    CHECK(Bstar(0, 0) == doctest::Approx(-0.020).epsilon(1e-12));
    CHECK(Bstar(1, 0) == doctest::Approx(0.473).epsilon(1e-12));
}

TEST_CASE("eval_AB affinity") {
    auto m = fixtures::second_order_model();
    RngStream rng(3);
    for (int k = 0; k < 10; ++k) {
        Eigen::Vector3d t1, t2;
        for (int i = 0; i < 3; ++i) {
            t1[i] = rng.next_gaussian();
            t2[i] = rng.next_gaussian();
        }
        auto [A12, B12] = eval_AB(m, t1 + t2);
        auto [A2, B2] = eval_AB(m, t2);
        auto [A1, B1] = eval_AB(m, t1);
        auto [A00, B00] = eval_AB(m, Eigen::Vector3d::Zero());
        CHECK((A12 - A2 - (A1 - A00)).cwiseAbs().maxCoeff() < 1e-13);
        CHECK((B12 - B2 - (B1 - B00)).cwiseAbs().maxCoeff() < 1e-13);
    }
}

TEST_CASE("regressor columns and offset") {
    auto m = fixtures::second_order_model();
    Eigen::VectorXd x(2), u(1);
    x << 1, 0;
    u << 0;
    Eigen::MatrixXd Phi = regressor(m, x, u);
    Eigen::MatrixXd expected(2, 3);
    expected << 0.042, 0.015, 0, 0.072, 0.009, 0;
    CHECK(Phi.isApprox(expected, 1e-14));
    CHECK(regressor(m, Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1)).norm() == 0.0);
    CHECK(regressor_offset(m, x, u).isApprox(Eigen::Vector2d(0.5, -0.1)));
}

TEST_CASE("regressor identity A(theta)x + B(theta)u = phi + Phi theta") {
    auto m = fixtures::second_order_model();
    RngStream rng(4);
    for (int k = 0; k < 20; ++k) {
        Eigen::VectorXd x(2), u(1), th(3);
        for (int i = 0; i < 2; ++i) x[i] = rng.next_gaussian();
        u[0] = rng.next_gaussian();
        for (int i = 0; i < 3; ++i) th[i] = rng.next_gaussian();
        auto [Ath, Bth] = eval_AB(m, th);
        Eigen::VectorXd lhs = Ath * x + Bth * u;
        Eigen::VectorXd rhs = regressor_offset(m, x, u) + regressor(m, x, u) * th;
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("step: equilibrium, hand-evaluated step, superposition") {
    auto m = fixtures::second_order_model();
    const Eigen::VectorXd z2 = Eigen::VectorXd::Zero(2);
    const Eigen::VectorXd z1 = Eigen::VectorXd::Zero(1);
    CHECK(step(m, z2, z1, z2, fixtures::true_theta()).norm() == 0.0);

    Eigen::VectorXd x(2);
    x << 1, 0;
    // Oracle: A(theta*) evaluated through eval_AB.
    Eigen::VectorXd expected = eval_AB(m, fixtures::true_theta()).first * x;
    Eigen::VectorXd got = step(m, x, z1, z2, fixtures::true_theta());
    CHECK(got.isApprox(expected, 1e-14));
    CHECK(got[0] == doctest::Approx(0.5366));
    CHECK(got[1] == doctest::Approx(-0.0406));

    RngStream rng(5);
    for (int k = 0; k < 10; ++k) {
        Eigen::VectorXd xr(2), ur(1), wr(2);
        for (int i = 0; i < 2; ++i) xr[i] = rng.next_gaussian();
        ur[0] = rng.next_gaussian();
        for (int i = 0; i < 2; ++i) wr[i] = rng.next_uniform(-0.05, 0.05);
        Eigen::VectorXd lhs = step(m, xr, ur, wr, fixtures::true_theta());
        Eigen::VectorXd rhs = step(m, xr, z1, z2, fixtures::true_theta()) +
                              step(m, z2, ur, z2, fixtures::true_theta()) +
                              step(m, z2, z1, wr, fixtures::true_theta());
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("step rejects disturbances outside W") {
    auto m = fixtures::second_order_model();
    Eigen::VectorXd w(2);
    w << 0.06, 0.0;
    CHECK_THROWS_AS(step(m, Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1), w,
                         fixtures::true_theta()),
                    ContractViolation);
}

TEST_CASE("trajectory replay residual is zero for exact simulation") {
    auto m = fixtures::second_order_model();
    RngStream rng(6);
    Trajectory traj;
    Eigen::VectorXd x(2);
    x << 1.0, 0.3;
    traj.states.push_back(x);
    for (int t = 0; t < 30; ++t) {
        Eigen::VectorXd u = m.K * x;
        Eigen::VectorXd w(2);
        for (int i = 0; i < 2; ++i) w[i] = rng.next_uniform(-0.05, 0.05);
        x = step(m, x, u, w, fixtures::true_theta());
        traj.inputs.push_back(u);
        traj.disturbances.push_back(w);
        traj.noises.push_back(Eigen::VectorXd::Zero(1));
        traj.states.push_back(x);
    }
    CHECK(traj.replay_residual(m, fixtures::true_theta()) < 1e-14);
    // Regressor identity along the trajectory: x+ - phi - Phi theta* = F w.
    for (int t = 0; t < traj.length(); ++t) {
        Eigen::VectorXd resid = traj.states[t + 1] -
                                regressor_offset(m, traj.states[t], traj.inputs[t]) -
                                regressor(m, traj.states[t], traj.inputs[t]) * fixtures::true_theta();
        CHECK((resid - m.F * traj.disturbances[t]).cwiseAbs().maxCoeff() < 1e-13);
    }
}

TEST_CASE("quadratic stability certificate holds for the benchmark gain") {
    auto m = fixtures::second_order_model();
    auto cert = check_quadratic_stability(m, fixtures::theta0_vertices());
    CHECK(cert.holds);
    CHECK(cert.margin > 0.0);
    // Validate the witness directly.
    for (int v = 0; v < fixtures::theta0_vertices().count(); ++v) {
        Eigen::MatrixXd Ak = m.A_K(fixtures::theta0_vertices().vertex(v));
        Eigen::MatrixXd gap = cert.witness - Ak.transpose() * cert.witness * Ak;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gap, Eigen::EigenvaluesOnly);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }
}

TEST_CASE("construction-time stability check rejects a destabilizing gain") {
    using Eigen::MatrixXd;
    std::vector<MatrixXd> A(2, MatrixXd(2, 2));
    std::vector<MatrixXd> B(2, MatrixXd(2, 1));
    A[0] << 1.4, 0.0, 0.0, 1.2; // open-loop unstable
    A[1] = MatrixXd::Zero(2, 2);
    B[0] << 0.0, 0.0; // no control authority
    B[1] = MatrixXd::Zero(2, 1);
    MatrixXd K = MatrixXd::Zero(1, 2);
    auto verts = peampc::to_vertices(HPolytope::inf_ball(1, 1.0));
    CHECK_THROWS_AS(UncertainModel::create(A, B, MatrixXd::Identity(2, 2),
                                           HPolytope::inf_ball(2, 0.05),
                                           HPolytope::inf_ball(1, 0.005), K, &verts),
                    SynthesisError);
}

TEST_CASE("reachability and identifiability certificates on the benchmark model") {
    auto m = fixtures::second_order_model();
    auto verts = fixtures::theta0_vertices();
    CHECK(check_vertex_reachability(m, verts).holds);
    CHECK(check_disturbance_reachability(m, verts).holds);
    CHECK(check_identifiability(m).holds);
    CHECK(check_identifiability(m).margin > 1e-9);
}
