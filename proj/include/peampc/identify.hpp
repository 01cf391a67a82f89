#pragma once

#include <Eigen/Dense>
#include <deque>
#include <vector>

#include "peampc/geometry.hpp"
#include "peampc/plant.hpp"

namespace peampc {

/// Linear constraints on theta implied by one observed transition. May be
/// unbounded (rank-deficient regressor); an empty row set means all of R^p is
/// unfalsified.
struct UnfalsifiedSet {
    Eigen::MatrixXd normals; // rows x p
    Eigen::VectorXd offsets;

    int rows() const { return static_cast<int>(normals.rows()); }
    static UnfalsifiedSet all(int p) {
        return UnfalsifiedSet{Eigen::MatrixXd::Zero(0, p), Eigen::VectorXd::Zero(0)};
    }
};

/// Fixed-normal parameter set estimate Theta(mu) = {theta : M theta <= mu}.
struct ParamSetEstimate {
    Eigen::MatrixXd M_theta; // r x p, fixed over time
    Eigen::VectorXd mu;      // r
    int t = 0;

    int p() const { return static_cast<int>(M_theta.cols()); }
    HPolytope polytope() const { return HPolytope(M_theta, mu); }
};

/// Sliding window of the most recent unfalsified sets.
class UnfalsifiedWindow {
public:
    explicit UnfalsifiedWindow(int capacity) : capacity_(capacity) {}
    void push(UnfalsifiedSet set);
    const std::deque<UnfalsifiedSet>& sets() const { return sets_; }
    int capacity() const { return capacity_; }

private:
    int capacity_;
    std::deque<UnfalsifiedSet> sets_;
};

/// Image F*W as a halfspace form (W itself when F is the identity).
HPolytope disturbance_image(const UncertainModel& m);

/// Parameters consistent with the transition (x_prev, u_prev) -> x_next under
/// the disturbance bound: {theta : x_next - A(theta) x_prev - B(theta) u_prev
/// in FW}.
UnfalsifiedSet unfalsified(const UncertainModel& m, const Eigen::VectorXd& x_next,
                           const Eigen::VectorXd& x_prev, const Eigen::VectorXd& u_prev);
UnfalsifiedSet unfalsified(const UncertainModel& m, const HPolytope& fw,
                           const Eigen::VectorXd& x_next, const Eigen::VectorXd& x_prev,
                           const Eigen::VectorXd& u_prev);

/// Fixed-complexity update: per row of M_theta, one support LP over the
/// intersection of the window with the previous estimate. Offsets never
/// increase. Throws ModelFalsifiedError when the intersection is empty.
ParamSetEstimate update_param_set(const ParamSetEstimate& prev,
                                  const std::deque<UnfalsifiedSet>& window);

/// Euclidean projection of theta_prev onto the estimate (QP).
Eigen::VectorXd project_nominal(const Eigen::VectorXd& theta_prev, const ParamSetEstimate& set);

/// box_volume(current) / box_volume(initial); both must be axis-aligned boxes.
double volume_ratio(const ParamSetEstimate& current, const ParamSetEstimate& initial);

} // namespace peampc
