#include "peampc/plant.hpp"

#include <cmath>
#include <limits>

#include "peampc/conic.hpp"
#include "peampc/errors.hpp"

namespace peampc {

Eigen::MatrixXd UncertainModel::A_of(const Eigen::VectorXd& theta) const {
    Eigen::MatrixXd out = A[0];
    for (int i = 0; i < np(); ++i) out += theta[i] * A[i + 1];
    return out;
}

Eigen::MatrixXd UncertainModel::B_of(const Eigen::VectorXd& theta) const {
    Eigen::MatrixXd out = B[0];
    for (int i = 0; i < np(); ++i) out += theta[i] * B[i + 1];
    return out;
}

Eigen::MatrixXd UncertainModel::A_K(const Eigen::VectorXd& theta) const {
    return A_of(theta) + B_of(theta) * K;
}

UncertainModel UncertainModel::create(std::vector<Eigen::MatrixXd> A,
                                      std::vector<Eigen::MatrixXd> B, Eigen::MatrixXd F,
                                      HPolytope W, HPolytope S, Eigen::MatrixXd K,
                                      const VPolytope* theta0_vertices) {
    if (A.empty() || A.size() != B.size())
        throw ContractViolation("A and B term lists must be nonempty and of equal length");
    const int nx = static_cast<int>(A[0].rows());
    const int nu = static_cast<int>(B[0].cols());
    for (const auto& Ai : A)
        if (Ai.rows() != nx || Ai.cols() != nx) throw ContractViolation("A term dimension mismatch");
    for (const auto& Bi : B)
        if (Bi.rows() != nx || Bi.cols() != nu) throw ContractViolation("B term dimension mismatch");
    if (F.rows() != nx) throw ContractViolation("F row count must match the state dimension");
    if (W.dim() != F.cols()) throw ContractViolation("W dimension must match F columns");
    if (S.dim() != nu) throw ContractViolation("S dimension must match the input dimension");
    if (K.rows() != nu || K.cols() != nx) throw ContractViolation("K must be nu x nx");

    UncertainModel m{std::move(A), std::move(B), std::move(F), std::move(W), std::move(S),
                     std::move(K)};
    if (theta0_vertices != nullptr) {
        auto cert = check_quadratic_stability(m, *theta0_vertices);
        if (!cert.holds)
            throw SynthesisError("closed loop is not quadratically stable over the parameter set: " +
                                 cert.detail);
    }
    return m;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> eval_AB(const UncertainModel& m,
                                                    const Eigen::VectorXd& theta) {
    if (theta.size() != m.np()) throw ContractViolation("theta length mismatch");
    return {m.A_of(theta), m.B_of(theta)};
}

Eigen::MatrixXd regressor(const UncertainModel& m, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u) {
    Eigen::MatrixXd Phi(m.nx(), m.np());
    for (int i = 0; i < m.np(); ++i) Phi.col(i) = m.A[i + 1] * x + m.B[i + 1] * u;
    return Phi;
}

Eigen::VectorXd regressor_offset(const UncertainModel& m, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& u) {
    return m.A[0] * x + m.B[0] * u;
}

Eigen::VectorXd step(const UncertainModel& m, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                     const Eigen::VectorXd& w, const Eigen::VectorXd& theta_star) {
    if ((m.W.normals * w - m.W.offsets).maxCoeff() > 1e-9)
        throw ContractViolation("disturbance sample lies outside W");
    return m.A_of(theta_star) * x + m.B_of(theta_star) * u + m.F * w;
}

double Trajectory::replay_residual(const UncertainModel& m,
                                   const Eigen::VectorXd& theta_star) const {
    double worst = 0.0;
    for (int t = 0; t < length(); ++t) {
        Eigen::VectorXd pred =
            m.A_of(theta_star) * states[t] + m.B_of(theta_star) * inputs[t] + m.F * disturbances[t];
        worst = std::max(worst, (states[t + 1] - pred).cwiseAbs().maxCoeff());
    }
    return worst;
}

CertificateReport check_quadratic_stability(const UncertainModel& m,
                                            const VPolytope& theta_vertices) {
    const int nx = m.nx();
    ConicProgram prog;
    prog.add_symmetric("P", nx);
    const int t = prog.add_scalar("t");
    prog.add_objective_linear(t, -1.0); // maximize margin

    const auto& Pblk = prog.block("P");
    {
        // P >= t I.
        ConicProgram::PsdBlock blk;
        blk.constant = Eigen::MatrixXd::Zero(nx, nx);
        ConicProgram::add_symmetric_block_terms(blk, Pblk, 1.0);
        blk.terms.push_back({t, -Eigen::MatrixXd::Identity(nx, nx)});
        prog.add_psd_block(std::move(blk));
    }
    {
        // I - P >= 0 (normalization).
        ConicProgram::PsdBlock blk;
        blk.constant = Eigen::MatrixXd::Identity(nx, nx);
        ConicProgram::add_symmetric_block_terms(blk, Pblk, -1.0);
        prog.add_psd_block(std::move(blk));
    }
    for (int v = 0; v < theta_vertices.count(); ++v) {
        // P - Ak' P Ak >= t I, linear in P per vertex.
        const Eigen::MatrixXd Ak = m.A_K(theta_vertices.vertex(v));
        ConicProgram::PsdBlock blk;
        blk.constant = Eigen::MatrixXd::Zero(nx, nx);
        // Expand through the svec basis of P.
        ConicProgram::PsdBlock basis_only;
        basis_only.constant = Eigen::MatrixXd::Zero(nx, nx);
        ConicProgram::add_symmetric_block_terms(basis_only, Pblk, 1.0);
        for (const auto& term : basis_only.terms) {
            Eigen::MatrixXd mapped = term.coef - Ak.transpose() * term.coef * Ak;
            blk.terms.push_back({term.var, mapped});
        }
        blk.terms.push_back({t, -Eigen::MatrixXd::Identity(nx, nx)});
        prog.add_psd_block(std::move(blk));
    }
    auto out = solve(prog);
    CertificateReport rep;
    if (out.status != SolveStatus::Optimal) {
        rep.detail = "stability SDP returned " + to_string(out.status);
        return rep;
    }
    rep.margin = out.x[t];
    rep.witness = prog.block_matrix(out.x, "P");
    rep.holds = rep.margin > 1e-9;
    rep.detail = rep.holds ? "common Lyapunov matrix found"
                           : "no common Lyapunov matrix with positive margin";
    return rep;
}

namespace {

CertificateReport reachability_report(const UncertainModel& m, const VPolytope& theta_vertices,
                                      bool use_F) {
    CertificateReport rep;
    rep.holds = true;
    rep.margin = std::numeric_limits<double>::infinity();
    const int nx = m.nx();
    for (int v = 0; v < theta_vertices.count(); ++v) {
        const Eigen::VectorXd theta = theta_vertices.vertex(v);
        const Eigen::MatrixXd Ak = m.A_K(theta);
        const Eigen::MatrixXd Bmat = use_F ? m.F : m.B_of(theta);
        Eigen::MatrixXd ctrb(nx, Bmat.cols() * nx);
        Eigen::MatrixXd Apow = Eigen::MatrixXd::Identity(nx, nx);
        for (int k = 0; k < nx; ++k) {
            ctrb.middleCols(k * Bmat.cols(), Bmat.cols()) = Apow * Bmat;
            Apow = Ak * Apow;
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(ctrb);
        const double smin = svd.singularValues().minCoeff();
        if (smin < rep.margin) rep.margin = smin;
        if (smin <= 1e-9) {
            rep.holds = false;
            rep.detail = "rank-deficient controllability matrix at vertex " + std::to_string(v);
        }
    }
    if (rep.holds) rep.detail = "controllability matrices full rank at all vertices";
    return rep;
}

} // namespace

CertificateReport check_vertex_reachability(const UncertainModel& m,
                                            const VPolytope& theta_vertices) {
    return reachability_report(m, theta_vertices, false);
}

CertificateReport check_disturbance_reachability(const UncertainModel& m,
                                                 const VPolytope& theta_vertices) {
    return reachability_report(m, theta_vertices, true);
}

CertificateReport check_identifiability(const UncertainModel& m) {
    const int rows = m.nx() * m.nx() + m.nx() * m.nu();
    Eigen::MatrixXd M(rows, m.np());
    for (int i = 0; i < m.np(); ++i) {
        Eigen::VectorXd col(rows);
        col.head(m.nx() * m.nx()) = Eigen::Map<const Eigen::VectorXd>(m.A[i + 1].data(),
                                                                      m.nx() * m.nx());
        col.tail(m.nx() * m.nu()) = Eigen::Map<const Eigen::VectorXd>(m.B[i + 1].data(),
                                                                      m.nx() * m.nu());
        M.col(i) = col;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    CertificateReport rep;
    rep.margin = svd.singularValues().minCoeff();
    rep.holds = rep.margin > 1e-9;
    rep.detail = rep.holds ? "parameterization is injective" : "parameter directions are degenerate";
    return rep;
}

} // namespace peampc
