#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "peampc/geometry.hpp"

namespace peampc {

/// Uncertain linear system x+ = A(theta) x + B(theta) u + F w with
/// (A(theta), B(theta)) = (A0, B0) + sum_i (Ai, Bi) [theta]_i, disturbance
/// set W, injected-noise set S and a stabilizing feedback gain K. Immutable
/// and shareable; all member queries are pure.
struct UncertainModel {
    std::vector<Eigen::MatrixXd> A; // p+1 matrices, nx x nx
    std::vector<Eigen::MatrixXd> B; // p+1 matrices, nx x nu
    Eigen::MatrixXd F;              // nx x nw
    HPolytope W;                    // disturbance set in R^nw
    HPolytope S;                    // injected-noise set in R^nu
    Eigen::MatrixXd K;              // nu x nx

    int nx() const { return static_cast<int>(A[0].rows()); }
    int nu() const { return static_cast<int>(B[0].cols()); }
    int np() const { return static_cast<int>(A.size()) - 1; }
    int nw() const { return static_cast<int>(F.cols()); }

    Eigen::MatrixXd A_of(const Eigen::VectorXd& theta) const;
    Eigen::MatrixXd B_of(const Eigen::VectorXd& theta) const;
    /// A(theta) + B(theta) K.
    Eigen::MatrixXd A_K(const Eigen::VectorXd& theta) const;
    /// A_i + B_i K for i in [0, p].
    Eigen::MatrixXd A_K_term(int i) const { return A[i] + B[i] * K; }

    /// Validates dimensions; when theta0_vertices is given, also certifies
    /// quadratic stability of the closed loop over those vertices and throws
    /// SynthesisError if the LMI system is infeasible.
    static UncertainModel create(std::vector<Eigen::MatrixXd> A, std::vector<Eigen::MatrixXd> B,
                                 Eigen::MatrixXd F, HPolytope W, HPolytope S, Eigen::MatrixXd K,
                                 const VPolytope* theta0_vertices = nullptr);
};

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> eval_AB(const UncertainModel& m,
                                                    const Eigen::VectorXd& theta);

/// Regressor Phi(x, u): column i is A_i x + B_i u.
Eigen::MatrixXd regressor(const UncertainModel& m, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u);
/// Offset phi(x, u) = A_0 x + B_0 u.
Eigen::VectorXd regressor_offset(const UncertainModel& m, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& u);

/// One exact step of the true system. w must lie in W (contract).
Eigen::VectorXd step(const UncertainModel& m, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                     const Eigen::VectorXd& w, const Eigen::VectorXd& theta_star);

/// Closed-loop record of one run.
struct Trajectory {
    std::vector<Eigen::VectorXd> states;       // length T+1
    std::vector<Eigen::VectorXd> inputs;       // length T
    std::vector<Eigen::VectorXd> disturbances; // length T
    std::vector<Eigen::VectorXd> noises;       // injected noise actually applied, length T

    int length() const { return static_cast<int>(inputs.size()); }
    /// Max violation of x+ = A x + B u + F w over all recorded steps.
    double replay_residual(const UncertainModel& m, const Eigen::VectorXd& theta_star) const;
};

struct CertificateReport {
    bool holds = false;
    double margin = 0.0;
    std::string detail;
    Eigen::MatrixXd witness;
};

/// Common quadratic Lyapunov certificate for A_K(theta) over the given
/// parameter vertices (LMI feasibility via one SDP).
CertificateReport check_quadratic_stability(const UncertainModel& m, const VPolytope& theta_vertices);

/// Reachability of (A_K(theta), B(theta)) at each vertex via the minimum
/// singular value of the nx-step controllability matrix.
CertificateReport check_vertex_reachability(const UncertainModel& m, const VPolytope& theta_vertices);

/// Reachability of (A_K(theta), F) at each vertex.
CertificateReport check_disturbance_reachability(const UncertainModel& m,
                                                 const VPolytope& theta_vertices);

/// Parameter identifiability: smallest singular value of the stacked
/// [vec(A_i); vec(B_i)] columns.
CertificateReport check_identifiability(const UncertainModel& m);

} // namespace peampc
