#include <doctest.h>

#include <Eigen/Dense>

#include "peampc/errors.hpp"
#include "peampc/excitation.hpp"
#include "test_models.hpp"

using namespace peampc;

namespace {

double lmin(const Eigen::MatrixXd& M) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

std::vector<VPolytope> singleton_tube(const std::vector<Eigen::VectorXd>& centers) {
    std::vector<VPolytope> tube;
    for (const auto& c : centers) tube.push_back(VPolytope::single(c));
    return tube;
}

} // namespace

TEST_CASE("pe window layout growth and saturation") {
    PEWindowLayout early{10, 3, 1};
    CHECK(early.n_pe() == 11);
    CHECK(early.window_starts().front() == -1);
    CHECK(early.window_starts().back() == 9);
    PEWindowLayout late{10, 3, 7};
    CHECK(late.n_pe() == 12);
    CHECK(late.window_starts().front() == -2);
    CHECK(static_cast<int>(late.window_starts().size()) == 12);
}

TEST_CASE("pe_matrix basics") {
    auto m = fixtures::second_order_model();
    std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> zeros(
        3, {Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1)});
    CHECK(pe_matrix(m, zeros).norm() == 0.0);

    std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> one = {
        {Eigen::Vector2d(1, 0), Eigen::VectorXd::Zero(1)}};
    Eigen::MatrixXd G = pe_matrix(m, one);
    Eigen::MatrixXd Phi(2, 3);
    Phi << 0.042, 0.015, 0, 0.072, 0.009, 0;
    CHECK(G.isApprox(Phi.transpose() * Phi, 1e-13));
    CHECK(lmin(G) == doctest::Approx(0.0).epsilon(1e-12)); // rank <= 2 < p = 3

    RngStream rng(31);
    for (int inst = 0; inst < 5; ++inst) {
        std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
        for (int k = 0; k < 4; ++k) {
            Eigen::Vector2d x(rng.next_gaussian(), rng.next_gaussian());
            Eigen::VectorXd u(1);
            u << rng.next_gaussian();
            pairs.push_back({x, u});
        }
        CHECK(lmin(pe_matrix(m, pairs)) >= -1e-10);
    }
}

TEST_CASE("closed loop epsilon on history") {
    auto m = fixtures::second_order_model();
    HistoryBuffer hist(10);
    CHECK(!closed_loop_epsilon(hist, 0, 3).has_value());
    // Zero trajectory.
    for (int t = 0; t < 5; ++t)
        hist.push(Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1),
                  Eigen::MatrixXd::Zero(3, 3));
    auto e = closed_loop_epsilon(hist, 4, 3);
    REQUIRE(e.has_value());
    CHECK(*e == 0.0);

    // Shared null vector: all Phi_k identical rank-2 => epsilon stays 0.
    HistoryBuffer h2(10);
    for (int t = 0; t < 4; ++t) {
        Eigen::Vector2d x(1, 0);
        Eigen::VectorXd u = Eigen::VectorXd::Zero(1);
        Eigen::MatrixXd Phi = regressor(m, x, u);
        h2.push(x, u, Phi.transpose() * Phi);
    }
    CHECK(*closed_loop_epsilon(h2, 3, 3) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("window history gram sums cached grams") {
    HistoryBuffer hist(5);
    for (int t = 0; t < 4; ++t)
        hist.push(Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1),
                  Eigen::MatrixXd::Constant(3, 3, static_cast<double>(t + 1)));
    // t = 4, kappa = -2: grams at times 2 and 3 -> 3 + 4 = 7.
    Eigen::MatrixXd sum = window_history_gram(hist, 4, -2, 3);
    CHECK(sum(0, 0) == doctest::Approx(7.0));
    CHECK(window_history_gram(hist, 4, 0, 3).norm() == 0.0);
    CHECK_THROWS_AS(window_history_gram(hist, 4, -5, 3), ContractViolation);
}

TEST_CASE("vertex bound linearization is exact at the expansion point") {
    auto m = fixtures::second_order_model();
    Eigen::Vector2d xhat(0.4, -0.2);
    Eigen::VectorXd vhat(1);
    vhat << 0.1;
    Eigen::VectorXd uhat = m.K * xhat + vhat;
    Eigen::MatrixXd PhiHat = regressor(m, xhat, uhat);

    // Fixed form with the vertex at the reference point.
    auto fixed = pe_vertex_bound(m, xhat, uhat, vhat, xhat, true);
    CHECK(fixed.constant.isApprox(PhiHat.transpose() * PhiHat, 1e-12));

    // Variable form evaluated at (z, alpha, v) = (xhat, 0, vhat).
    auto var = pe_vertex_bound(m, xhat, uhat, vhat, Eigen::Vector2d(1, 1), false);
    Eigen::MatrixXd C = var.constant;
    for (int j = 0; j < 2; ++j) C += xhat[j] * var.coef_z[j];
    C += vhat[0] * var.coef_v[0];
    CHECK(C.isApprox(PhiHat.transpose() * PhiHat, 1e-12));
}

TEST_CASE("linearization is a lower bound at any evaluated point") {
    auto m = fixtures::second_order_model();
    RngStream rng(32);
    for (int inst = 0; inst < 20; ++inst) {
        Eigen::Vector2d xhat(rng.next_gaussian(), rng.next_gaussian());
        Eigen::VectorXd vhat(1);
        vhat << rng.next_gaussian();
        Eigen::VectorXd uhat = m.K * xhat + vhat;
        Eigen::Vector2d point(rng.next_gaussian(), rng.next_gaussian());
        auto bound = pe_vertex_bound(m, xhat, uhat, vhat, point, true);
        Eigen::VectorXd u_pt = m.K * point + vhat; // same perturbation as reference
        Eigen::MatrixXd Phi = regressor(m, point, u_pt);
        // True Gram minus linearized bound is the dropped quadratic term.
        CHECK(lmin(Phi.transpose() * Phi - bound.constant) >= -1e-10);
    }
}

TEST_CASE("reference beta with zero data and zero reference is zero") {
    auto m = fixtures::second_order_model();
    PEWindowLayout layout{4, 3, 1};
    HistoryBuffer hist(4);
    hist.push(Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Zero(3, 3));
    const int horizon = layout.N + layout.N_u;
    std::vector<Eigen::VectorXd> xhat(horizon, Eigen::Vector2d::Zero());
    std::vector<Eigen::VectorXd> uhat(horizon, Eigen::VectorXd::Zero(1));
    std::vector<VPolytope> cs(horizon, VPolytope::single(Eigen::Vector2d::Zero()));
    auto res = reference_beta_prime(m, layout, hist, xhat, uhat, cs);
    REQUIRE(res.beta_hat.size() == layout.n_pe());
    for (int i = 0; i < res.beta_hat.size(); ++i)
        CHECK(std::abs(res.beta_hat[i]) < 1e-7);
}

TEST_CASE("reference beta never exceeds the reference-trajectory PE value") {
    auto m = fixtures::second_order_model();
    RngStream rng(33);
    PEWindowLayout layout{4, 3, 2};
    HistoryBuffer hist(4);
    const int horizon = layout.N + layout.N_u;
    std::vector<Eigen::VectorXd> xhat, uhat;
    std::vector<VPolytope> cs;
    // Past data.
    for (int t = 0; t < 2; ++t) {
        Eigen::Vector2d x(rng.next_gaussian(), rng.next_gaussian());
        Eigen::VectorXd u(1);
        u << rng.next_gaussian();
        Eigen::MatrixXd Phi = regressor(m, x, u);
        hist.push(x, u, Phi.transpose() * Phi);
    }
    // Reference trajectory and boxes around it.
    for (int k = 0; k < horizon; ++k) {
        Eigen::Vector2d x(rng.next_gaussian(), rng.next_gaussian());
        Eigen::VectorXd v(1);
        v << 0.3 * rng.next_gaussian();
        xhat.push_back(x);
        uhat.push_back(m.K * x + v);
        Eigen::MatrixXd verts(4, 2);
        const double r1 = 0.2 * rng.next_double() + 0.05;
        const double r2 = 0.2 * rng.next_double() + 0.05;
        verts << x[0] + r1, x[1] + r2, x[0] + r1, x[1] - r2, x[0] - r1, x[1] + r2, x[0] - r1,
            x[1] - r2;
        cs.push_back(VPolytope(verts));
    }
    auto res = reference_beta_prime(m, layout, hist, xhat, uhat, cs);
    auto starts = layout.window_starts();
    for (size_t wi = 0; wi < starts.size(); ++wi) {
        Eigen::MatrixXd truth = window_history_gram(hist, layout.t, starts[wi], 3);
        for (int k = std::max(0, starts[wi]); k <= starts[wi] + layout.N_u - 1; ++k) {
            Eigen::MatrixXd Phi = regressor(m, xhat[k], uhat[k]);
            truth += Phi.transpose() * Phi;
        }
        CHECK(res.beta_hat[wi] <= res.beta_hat_per_window[wi] + 1e-9);
        CHECK(res.beta_hat_per_window[wi] <= lmin(truth) + 1e-7);
        // The shared witness attains every returned bound simultaneously.
        Eigen::MatrixXd sum = window_history_gram(hist, layout.t, starts[wi], 3);
        for (int k = std::max(0, starts[wi]); k <= starts[wi] + layout.N_u - 1; ++k)
            sum += res.M.at(k);
        CHECK(lmin(sum) >= res.beta_hat[wi] - 1e-9);
    }
}

TEST_CASE("sampled betas with pinned singleton tubes reduce to the center trajectory") {
    auto m = fixtures::second_order_model();
    PEWindowLayout layout{4, 3, 5};
    HistoryBuffer hist(4);
    RngStream rng(34);
    for (int t = 0; t < 5; ++t) {
        Eigen::Vector2d x(rng.next_gaussian(), rng.next_gaussian());
        Eigen::VectorXd u(1);
        u << rng.next_gaussian();
        Eigen::MatrixXd Phi = regressor(m, x, u);
        hist.push(x, u, Phi.transpose() * Phi);
    }
    const int horizon = layout.N + layout.N_u;
    std::vector<Eigen::VectorXd> centers;
    std::vector<Eigen::VectorXd> v(layout.N, Eigen::VectorXd::Zero(1));
    std::vector<Eigen::VectorXd> s(horizon, Eigen::VectorXd::Zero(1));
    for (int k = 0; k < horizon; ++k)
        centers.push_back(Eigen::Vector2d(rng.next_gaussian(), rng.next_gaussian()));
    auto tube = singleton_tube(centers);
    auto betas = sampled_betas(m, layout, hist, tube, tube, v, v, s, 7, 99);
    // Oracle: center-trajectory PE matrices.
    auto starts = layout.window_starts();
    for (size_t wi = 0; wi < starts.size(); ++wi) {
        Eigen::MatrixXd sum = window_history_gram(hist, layout.t, starts[wi], 3);
        for (int k = std::max(0, starts[wi]); k <= starts[wi] + layout.N_u - 1; ++k) {
            Eigen::VectorXd q = k < layout.N ? v[k] : s[k];
            Eigen::MatrixXd Phi = regressor(m, centers[k], m.K * centers[k] + q);
            sum += Phi.transpose() * Phi;
        }
        CHECK(betas.beta_s[wi] == doctest::Approx(lmin(sum)).epsilon(1e-10));
        CHECK(betas.beta_hat_s[wi] == doctest::Approx(lmin(sum)).epsilon(1e-10));
    }
    // Independence from N_s and seed for singleton cross-sections.
    auto betas2 = sampled_betas(m, layout, hist, tube, tube, v, v, s, 3, 12345);
    CHECK(betas.beta_s.isApprox(betas2.beta_s, 1e-14));
}

TEST_CASE("sampled check is monotone in the sample set") {
    // More samples can only lower the combination minimum.
    auto m = fixtures::scalar_toy(0.1);
    PEWindowLayout layout{2, 2, 3};
    HistoryBuffer hist(2);
    for (int t = 0; t < 3; ++t) {
        Eigen::VectorXd x(1), u(1);
        x << 0.5 + 0.1 * t;
        u << 0.0;
        Eigen::MatrixXd Phi = regressor(m, x, u);
        hist.push(x, u, Phi.transpose() * Phi);
    }
    const int horizon = layout.N + layout.N_u;
    std::vector<VPolytope> tube;
    for (int k = 0; k < horizon; ++k) {
        Eigen::MatrixXd seg(2, 1);
        seg << 0.2, 0.9;
        tube.push_back(VPolytope(seg));
    }
    std::vector<Eigen::VectorXd> v(layout.N, Eigen::VectorXd::Zero(1));
    std::vector<Eigen::VectorXd> s(horizon, Eigen::VectorXd::Zero(1));

    std::vector<Eigen::VectorXd> small = {Eigen::VectorXd::Constant(1, 0.4),
                                          Eigen::VectorXd::Constant(1, 0.7)};
    std::vector<Eigen::VectorXd> large = small;
    large.push_back(Eigen::VectorXd::Constant(1, 0.25));
    large.push_back(Eigen::VectorXd::Constant(1, 0.85));
    SampleProvider p_small = [&](const VPolytope&, int, bool) { return small; };
    SampleProvider p_large = [&](const VPolytope&, int, bool) { return large; };
    auto b_small = sampled_betas(m, layout, hist, tube, tube, v, v, s, 2, 1, 1000000, &p_small);
    auto b_large = sampled_betas(m, layout, hist, tube, tube, v, v, s, 4, 1, 1000000, &p_large);
    for (int i = 0; i < b_small.beta_s.size(); ++i)
        CHECK(b_large.beta_s[i] <= b_small.beta_s[i] + 1e-14);
}

TEST_CASE("sampled betas match an exhaustive hand enumerator on a 1-parameter toy") {
    // N_s = 2, N_u = 2, p = 1: four combinations per window, enumerated by hand.
    auto m = fixtures::scalar_toy(0.1);
    PEWindowLayout layout{2, 2, 5};
    HistoryBuffer hist(2);
    for (int t = 0; t < 5; ++t) {
        Eigen::VectorXd x(1), u(1);
        x << 0.3 * (t + 1);
        u << 0.0;
        Eigen::MatrixXd Phi = regressor(m, x, u);
        hist.push(x, u, Phi.transpose() * Phi);
    }
    const int horizon = layout.N + layout.N_u;
    std::vector<VPolytope> tube;
    for (int k = 0; k < horizon; ++k) {
        Eigen::MatrixXd seg(2, 1);
        seg << -1.0, 1.0;
        tube.push_back(VPolytope(seg));
    }
    std::vector<Eigen::VectorXd> v(layout.N, Eigen::VectorXd::Zero(1));
    std::vector<Eigen::VectorXd> s(horizon, Eigen::VectorXd::Zero(1));
    // Pinned samples per step: x = 0.1 (k+1) and x = -0.2 (k+1).
    SampleProvider provider = [&](const VPolytope&, int k, bool) {
        std::vector<Eigen::VectorXd> out;
        out.push_back(Eigen::VectorXd::Constant(1, 0.1 * (k + 1)));
        out.push_back(Eigen::VectorXd::Constant(1, -0.2 * (k + 1)));
        return out;
    };
    auto betas = sampled_betas(m, layout, hist, tube, tube, v, v, s, 2, 7, 1000000, &provider);

    auto starts = layout.window_starts();
    for (size_t wi = 0; wi < starts.size(); ++wi) {
        const int kappa = starts[wi];
        double hist_part = 0.0;
        for (int k = kappa; k < 0; ++k) {
            const double x = 0.3 * (layout.t + k + 1);
            hist_part += x * x; // Phi = [x] for the scalar toy
        }
        double best = 1e300;
        const int k_lo = std::max(0, kappa);
        const int k_hi = kappa + layout.N_u - 1;
        // Exhaustive enumeration, independent of the library path.
        std::function<void(int, double)> rec = [&](int k, double acc) {
            if (k > k_hi) {
                best = std::min(best, acc);
                return;
            }
            for (double xv : {0.1 * (k + 1), -0.2 * (k + 1)}) rec(k + 1, acc + xv * xv);
        };
        rec(k_lo, hist_part);
        CHECK(betas.beta_s[wi] == doctest::Approx(best).epsilon(1e-14));
    }
}

TEST_CASE("posterior check accepts on the boundary and reports failures") {
    SampledBetas b;
    b.beta_s = Eigen::Vector3d(0.5, 0.2, 0.1);
    b.beta_hat_s = Eigen::Vector3d(0.5, 0.2, 0.1);
    CHECK(posterior_check(b).accept);

    b.beta_hat_s = Eigen::Vector3d::Zero();
    CHECK(posterior_check(b).accept);

    b.beta_hat_s = Eigen::Vector3d(0.5, 0.3, 0.1);
    auto d = posterior_check(b);
    CHECK(!d.accept);
    CHECK(d.first_failing_window == 1);
}

TEST_CASE("expected PE estimate: deterministic system gives zero") {
    auto m = fixtures::second_order_model();
    auto w0 = [](RngStream&) { return Eigen::VectorXd::Zero(2).eval(); };
    auto est = verify_expected_pe(m, fixtures::true_theta(), 3, 50, 11, w0, nullptr,
                                  Eigen::Vector2d::Zero());
    CHECK(est.lambda_min == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("expected PE estimate is positive with noise injection") {
    auto m = fixtures::second_order_model();
    auto wdraw = [](RngStream& r) {
        Eigen::VectorXd w(2);
        for (int i = 0; i < 2; ++i) {
            double v;
            do {
                v = 0.06 * r.next_gaussian();
            } while (std::abs(v) > 0.05);
            w[i] = v;
        }
        return w;
    };
    std::function<Eigen::VectorXd(RngStream&)> sdraw = [](RngStream& r) {
        Eigen::VectorXd s(1);
        s << r.next_uniform(-0.005, 0.005);
        return s;
    };
    auto est = verify_expected_pe(m, fixtures::true_theta(), 3, 3000, 12, wdraw, &sdraw,
                                  Eigen::Vector2d::Zero());
    CHECK(est.lambda_min > 0.0);
    CHECK(est.ci_low > 0.0);
    CHECK(est.ci_high >= est.lambda_min);
}

TEST_CASE("pe constants for the benchmark configuration") {
    auto m = fixtures::second_order_model();
    auto c = pe_constants(m, fixtures::theta0_vertices(), 3);
    CHECK(c.eps_s == doctest::Approx(8.3333e-6).epsilon(1e-3));
    CHECK(c.eps_B > 0.0);
    CHECK(c.sigma > 0.0);
    CHECK(c.eps_phi == doctest::Approx(c.eps_s * c.sigma * c.sigma));
    CHECK_THROWS_AS(pe_constants(m, fixtures::theta0_vertices(), 2), ContractViolation);
}
