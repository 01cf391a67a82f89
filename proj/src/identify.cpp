#include "peampc/identify.hpp"

#include <cmath>

#include "peampc/conic.hpp"
#include "peampc/errors.hpp"

namespace peampc {

void UnfalsifiedWindow::push(UnfalsifiedSet set) {
    sets_.push_back(std::move(set));
    while (static_cast<int>(sets_.size()) > capacity_) sets_.pop_front();
}

HPolytope disturbance_image(const UncertainModel& m) {
    if (m.F.rows() == m.F.cols() && m.F.isIdentity(1e-14)) return m.W;
    VPolytope wv = to_vertices(m.W);
    VPolytope fw = affine_map(wv, m.F, Eigen::VectorXd::Zero(m.F.rows()));
    return to_halfspaces(prune_to_extreme(fw));
}

UnfalsifiedSet unfalsified(const UncertainModel& m, const HPolytope& fw,
                           const Eigen::VectorXd& x_next, const Eigen::VectorXd& x_prev,
                           const Eigen::VectorXd& u_prev) {
    const Eigen::MatrixXd Phi = regressor(m, x_prev, u_prev);
    const Eigen::VectorXd phi = regressor_offset(m, x_prev, u_prev);
    // H (x_next - phi - Phi theta) <= h  <=>  (-H Phi) theta <= h - H (x_next - phi).
    UnfalsifiedSet out;
    out.normals = -fw.normals * Phi;
    out.offsets = fw.offsets - fw.normals * (x_next - phi);
    return out;
}

UnfalsifiedSet unfalsified(const UncertainModel& m, const Eigen::VectorXd& x_next,
                           const Eigen::VectorXd& x_prev, const Eigen::VectorXd& u_prev) {
    return unfalsified(m, disturbance_image(m), x_next, x_prev, u_prev);
}

ParamSetEstimate update_param_set(const ParamSetEstimate& prev,
                                  const std::deque<UnfalsifiedSet>& window) {
    const int p = prev.p();
    const int r = static_cast<int>(prev.M_theta.rows());

    // Stack the intersection constraints once.
    int extra = 0;
    for (const auto& d : window) extra += d.rows();
    Eigen::MatrixXd A(r + extra, p);
    Eigen::VectorXd b(r + extra);
    A.topRows(r) = prev.M_theta;
    b.head(r) = prev.mu;
    int at = r;
    for (const auto& d : window) {
        A.middleRows(at, d.rows()) = d.normals;
        b.segment(at, d.rows()) = d.offsets;
        at += d.rows();
    }
    const HPolytope inter(A, b);

    ParamSetEstimate next = prev;
    next.t = prev.t + 1;
    for (int i = 0; i < r; ++i) {
        double s;
        try {
            s = support(inter, prev.M_theta.row(i).transpose());
        } catch (const EmptySetError&) {
            throw ModelFalsifiedError(
                "parameter update: unfalsified intersection is empty (data inconsistent with the "
                "model class)");
        }
        // Tightenings below solver precision are noise; keep the old offset.
        const double snap = 1e-7 * std::max(1.0, std::abs(prev.mu[i]));
        next.mu[i] = (s >= prev.mu[i] - snap) ? prev.mu[i] : s;
    }
    return next;
}

Eigen::VectorXd project_nominal(const Eigen::VectorXd& theta_prev, const ParamSetEstimate& set) {
    const int p = set.p();
    ConicProgram prog;
    prog.add_vector("theta", p);
    for (int i = 0; i < p; ++i) {
        prog.add_objective_quadratic(i, i, 2.0);
        prog.add_objective_linear(i, -2.0 * theta_prev[i]);
    }
    prog.add_objective_constant(theta_prev.squaredNorm());
    for (int rix = 0; rix < set.M_theta.rows(); ++rix) {
        ConicProgram::LinearRow row;
        for (int j = 0; j < p; ++j) {
            row.idx.push_back(j);
            row.coef.push_back(set.M_theta(rix, j));
        }
        row.rhs = set.mu[rix];
        prog.add_inequality(std::move(row));
    }
    auto out = solve(prog);
    if (out.status == SolveStatus::Infeasible)
        throw ModelFalsifiedError("nominal projection: parameter set is empty");
    if (out.status != SolveStatus::Optimal)
        throw SolverError("nominal projection failed: " + out.diagnostics);
    if ((set.M_theta * out.x - set.mu).maxCoeff() > 1e-8)
        throw SolverError("nominal projection violates the parameter set beyond tolerance");
    return out.x;
}

double volume_ratio(const ParamSetEstimate& current, const ParamSetEstimate& initial) {
    const double v0 = box_volume(initial.polytope());
    if (v0 <= 0.0) throw ContractViolation("initial parameter set has zero volume");
    return box_volume(current.polytope()) / v0;
}

} // namespace peampc
