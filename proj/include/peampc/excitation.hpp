#pragma once

#include <Eigen/Dense>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "peampc/geometry.hpp"
#include "peampc/plant.hpp"
#include "peampc/rng.hpp"

namespace peampc {

/// Bookkeeping for the overlapping PE windows covering the prediction horizon.
/// Window kappa spans prediction steps [kappa, kappa + N_u - 1]; negative k
/// refer to recorded history (k + t in absolute time).
struct PEWindowLayout {
    int N = 0;   // MPC horizon
    int N_u = 0; // PE window length
    int t = 0;   // current time, t >= 1

    int n_pe() const { return t < N_u - 1 ? N + t : N + N_u - 1; }
    std::vector<int> window_starts() const {
        std::vector<int> out;
        for (int k = N - n_pe(); k <= N - 1; ++k) out.push_back(k);
        return out;
    }
};

/// Rolling record of past states, applied inputs and cached regressor Grams.
/// Grams are cached once per step so the historical sums in the PE
/// constraints stay bit-stable across time.
class HistoryBuffer {
public:
    explicit HistoryBuffer(int capacity) : capacity_(capacity) {}

    void push(Eigen::VectorXd x, Eigen::VectorXd u, Eigen::MatrixXd gram);
    int earliest_time() const { return next_time_ - static_cast<int>(grams_.size()); }
    int next_time() const { return next_time_; }
    bool has(int abs_time) const {
        return abs_time >= earliest_time() && abs_time < next_time_;
    }
    const Eigen::MatrixXd& gram_at(int abs_time) const;
    const Eigen::VectorXd& state_at(int abs_time) const;
    const Eigen::VectorXd& input_at(int abs_time) const;

private:
    int capacity_;
    int next_time_ = 0;
    std::deque<Eigen::MatrixXd> grams_;
    std::deque<Eigen::VectorXd> xs_, us_;
};

/// Sum of Phi(x,u)' Phi(x,u) over the given pairs (symmetric PSD).
Eigen::MatrixXd pe_matrix(const UncertainModel& m,
                          const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& pairs);

/// Closed-loop PE coefficient at time t: smallest eigenvalue of the Gram sum
/// over [t - N_u + 1, t]. Empty when the buffer does not yet cover the window.
std::optional<double> closed_loop_epsilon(const HistoryBuffer& history, int t, int N_u);

/// Historical part of a PE window: sum of cached Grams for k in [kappa, -1].
/// Throws ContractViolation when the needed history is missing.
Eigen::MatrixXd window_history_gram(const HistoryBuffer& history, int t, int kappa, int p);

/// Affine expression of one vertex linearization bound
///   C(z, alpha, v) = PhiHat'PhiHat + PhiHat'D + D'PhiHat,
///   D = Phi(dx, K dx + dq), dx = z + alpha * vertex - xhat, dq = v - vhat,
/// split into a constant and per-decision coefficient matrices. Passing
/// fixed = true treats the vertex position and input as constants (tail
/// segment k >= N, and all reference problems).
struct PeVertexBound {
    Eigen::MatrixXd constant;
    std::vector<Eigen::MatrixXd> coef_z;     // nx entries (empty when fixed)
    Eigen::MatrixXd coef_alpha;              // zero-size when fixed
    std::vector<Eigen::MatrixXd> coef_v;     // nu entries (empty when fixed)
};

PeVertexBound pe_vertex_bound(const UncertainModel& m, const Eigen::VectorXd& xhat,
                              const Eigen::VectorXd& uhat, const Eigen::VectorXd& vhat,
                              const Eigen::VectorXd& vertex, bool fixed,
                              const Eigen::VectorXd* fixed_q = nullptr);

/// Reference PE coefficients with the perturbation sequence fixed to the
/// reference and the tube fixed to the shifted previous optimum. A first
/// stage solves one small SDP per window for the per-window maxima; because
/// the M blocks are shared between overlapping windows, those maxima are not
/// jointly attainable in general, so a second joint SDP computes the
/// returned bounds beta_hat together with one shared witness M. The bounds
/// are therefore simultaneously achievable by the shifted candidate, which
/// is what recursive feasibility of the online problem requires.
struct ReferenceBetaResult {
    Eigen::VectorXd beta_hat;            // jointly attainable, used in the MPC bound
    Eigen::VectorXd beta_hat_per_window; // stage-1 per-window maxima (diagnostics)
    std::map<int, Eigen::MatrixXd> M;    // shared witness: k -> M_k
};

ReferenceBetaResult reference_beta_prime(
    const UncertainModel& m, const PEWindowLayout& layout, const HistoryBuffer& history,
    const std::vector<Eigen::VectorXd>& xhat, const std::vector<Eigen::VectorXd>& uhat,
    const std::vector<VPolytope>& fixed_cross_sections);

/// Sampled posterior coefficients. For each window, beta_s is the minimum
/// over all sample-index combinations of lambda_min of the window Gram sum
/// along the solved tube with the optimal perturbations; beta_hat_s uses the
/// reference perturbations and the shifted previous cross-sections.
/// Deterministic for a given seed. Combination counts above the cap raise
/// ConfigError.
struct SampledBetas {
    Eigen::VectorXd beta_s;
    Eigen::VectorXd beta_hat_s;
};

/// Optional override of the cross-section sampler (prediction step k;
/// reference = true for the shifted-previous tube). Used by tests to pin
/// sample sets.
using SampleProvider =
    std::function<std::vector<Eigen::VectorXd>(const VPolytope&, int, bool)>;

SampledBetas sampled_betas(const UncertainModel& m, const PEWindowLayout& layout,
                           const HistoryBuffer& history,
                           const std::vector<VPolytope>& tube_current,
                           const std::vector<VPolytope>& tube_reference,
                           const std::vector<Eigen::VectorXd>& v_opt,
                           const std::vector<Eigen::VectorXd>& v_hat,
                           const std::vector<Eigen::VectorXd>& s_seq, int N_s,
                           std::uint64_t seed, std::size_t combination_cap = 1000000,
                           const SampleProvider* provider = nullptr);

/// Per-window acceptance test of Algorithm step (e): accept iff
/// beta_s >= beta_hat_s for every window (boundary inclusive).
struct PosteriorDecision {
    bool accept = true;
    int first_failing_window = -1;
};

PosteriorDecision posterior_check(const SampledBetas& betas);

/// Monte-Carlo estimate of lambda_min of the expected windowed Gram sum under
/// u = K x (+ injected noise when s_draw is provided), with a bootstrap
/// confidence interval over rollouts.
struct ExpectedPeEstimate {
    double lambda_min = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    int rollouts = 0;
};

ExpectedPeEstimate verify_expected_pe(
    const UncertainModel& m, const Eigen::VectorXd& theta_star, int N_u, int rollouts,
    std::uint64_t seed, const std::function<Eigen::VectorXd(RngStream&)>& w_draw,
    const std::function<Eigen::VectorXd(RngStream&)>* s_draw, const Eigen::VectorXd& x_start);

/// Closed-form constants of the closed-loop PE bound: eps_s from the noise
/// set, eps_B from the vertex reachability Gramians, sigma from the stacked
/// weighted [vec(A_K_i); vec(B_i)] matrix, and eps_phi = eps_s * sigma^2.
struct PeConstants {
    double eps_s = 0.0;
    double eps_B = 0.0;
    double sigma = 0.0;
    double eps_phi = 0.0;
};

PeConstants pe_constants(const UncertainModel& m, const VPolytope& theta_vertices, int N_u);

} // namespace peampc
