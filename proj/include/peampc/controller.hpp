#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "peampc/conic.hpp"
#include "peampc/excitation.hpp"
#include "peampc/geometry.hpp"
#include "peampc/identify.hpp"
#include "peampc/plant.hpp"

namespace peampc {

struct TerminalSynthOptions {
    /// Compactness box intersected into the seed set. The state and input
    /// constraints alone can leave the admissible region unbounded, in which
    /// case the fixed point would be useless as a tube cross-section shape;
    /// the box pins it to the operating scale.
    double bound_radius = 3.0;
    double tol = 1e-8;
    int max_iterations = 200;
};

/// Maximal-style robust invariant terminal set: start from
/// X ∩ {x : Kx + S ⊆ U} (intersected with a large box), then intersect with
/// one-step robust preimages over the parameter and disturbance vertices
/// until a fixed point.
HPolytope synth_terminal_set(const UncertainModel& m, const HPolytope& X, const HPolytope& U,
                             const VPolytope& theta_vertices,
                             const TerminalSynthOptions& opts = {});

/// Terminal cost from the discrete Lyapunov identity
/// P = A_K(theta)' P A_K(theta) + Q + K'RK. Throws when A_K(theta) is not
/// Schur stable.
Eigen::MatrixXd synth_terminal_cost(const UncertainModel& m, const Eigen::VectorXd& theta_bar,
                                    const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R);

struct TerminalIngredients {
    HPolytope X_T;        // halfspace form; also the fixed tube shape X0
    VPolytope X_T_verts;  // vertex form (nu tube vertices)
    Eigen::MatrixXd P;    // terminal cost, refreshed each step
    Eigen::MatrixXd Q, R; // stage cost weights
};

/// Index layout of the per-step decision vector [v_0..v_{N-1}, z_1..z_{N-1},
/// alpha_1..alpha_{N-1}]; the PE extension appends M blocks and beta'.
struct TubeVarLayout {
    int N = 0;
    int nx = 0;
    int nu = 0;

    int v_index(int k, int j) const { return k * nu + j; }
    int z_index(int k, int j) const { return N * nu + (k - 1) * nx + j; } // k in [1, N-1]
    int alpha_index(int k) const { return N * nu + (N - 1) * nx + (k - 1); }
    int size() const { return N * nu + (N - 1) * (nx + 1); }
};

/// Homothetic tube solution: cross-section k is z_k + alpha_k * X0 for
/// k < N and X_T afterwards, with z_0 = x_t and alpha_0 = 0.
struct TubeSolution {
    Eigen::VectorXd x_t;
    std::vector<Eigen::VectorXd> centers; // k = 0..N-1
    Eigen::VectorXd alphas;               // k = 0..N-1
    std::vector<Eigen::VectorXd> v;       // k = 0..N-1
    Eigen::VectorXd beta_prime;           // per PE window (empty without PE constraints)
    double objective = 0.0;
    int iterations = 0;
    double solve_seconds = 0.0;

    /// Vertex form of cross-section k (k in [0, N+N_u-1]).
    VPolytope cross_section(int k, const TerminalIngredients& ing) const;
    std::vector<VPolytope> cross_sections(int horizon, const TerminalIngredients& ing) const;
};

/// Reference trajectory of the linearization (shifted previous optimum).
struct ReferenceTrajectory {
    std::vector<Eigen::VectorXd> xhat; // length N+N_u
    std::vector<Eigen::VectorXd> uhat; // length N+N_u
    std::vector<Eigen::VectorXd> vhat; // length N
    std::vector<Eigen::VectorXd> s;    // length N+N_u
};

ReferenceTrajectory build_reference(const UncertainModel& m, const Eigen::VectorXd& theta_bar,
                                    const Eigen::VectorXd& x_t,
                                    const std::vector<Eigen::VectorXd>& v_prev,
                                    const std::vector<Eigen::VectorXd>& s_seq, int N, int N_u);

/// All linear rows of the tube constraints (12)-(15) in the TubeVarLayout
/// coordinates: state/input containment per tube vertex plus the robust
/// one-step recursion per (parameter vertex, tube vertex, disturbance
/// vertex), and alpha >= 0.
std::vector<ConicProgram::LinearRow> build_tube_constraints(
    const UncertainModel& m, const VPolytope& theta_vertices, const HPolytope& X,
    const HPolytope& U, const TerminalIngredients& ing, const TubeVarLayout& layout,
    const Eigen::VectorXd& x_t);

/// Nominal quadratic cost J(v) = v'H v + 2 g'v + c0 obtained by eliminating
/// the nominal states.
struct NominalCost {
    Eigen::MatrixXd H;
    Eigen::VectorXd g;
    double c0 = 0.0;

    double eval(const Eigen::VectorXd& vflat) const {
        return vflat.dot(H * vflat) + 2.0 * g.dot(vflat) + c0;
    }
};

NominalCost nominal_cost(const UncertainModel& m, const Eigen::VectorXd& theta_bar,
                         const Eigen::VectorXd& x_t, const TerminalIngredients& ing, int N);

struct ControllerConfig {
    int N = 10;
    int N_u = 3;
    int N_mu = 3;
    int N_s = 10;
    Eigen::MatrixXd Q, R;
    HPolytope X, U;
    SolverSettings solver;
    std::size_t combination_cap = 1000000;
    bool check_candidate = true;     // recursive-feasibility witness each step
    bool check_linearization = true; // vertex lower-bound check each step
    std::string dump_dir;            // solver-failure program dumps (empty: off)
    std::uint64_t sample_seed_base = 0; // keyed per (master seed, run) by the harness
    /// The tube containments leave (z, alpha) non-unique at a given optimal
    /// perturbation sequence; this tiny quadratic weight tie-breaks toward
    /// the smallest cross-sections (and keeps the KKT systems definite).
    double tube_regularization = 1e-6;
};

/// Quadratic program at t = 0 (no PE constraints). Throws InfeasibleError
/// when x0 is outside the feasible region.
TubeSolution solve_P0(const Eigen::VectorXd& x0, const UncertainModel& m,
                      const TerminalIngredients& ing, const VPolytope& theta_vertices,
                      const ControllerConfig& cfg, const Eigen::VectorXd& theta_bar,
                      const std::vector<ConicProgram::LinearRow>* prebuilt_rows = nullptr);

/// Semidefinite program at t >= 1 with the linearized PE constraints and the
/// per-window lower bounds beta_hat. Infeasibility is a contract violation
/// (recursive feasibility) and raises InfeasibleError after dumping the
/// program when a dump directory is configured.
TubeSolution solve_Pgt0(const Eigen::VectorXd& x_t, const UncertainModel& m,
                        const TerminalIngredients& ing, const VPolytope& theta_vertices,
                        const ControllerConfig& cfg, const Eigen::VectorXd& theta_bar,
                        const ReferenceTrajectory& ref, const Eigen::VectorXd& beta_hat,
                        const PEWindowLayout& layout, const HistoryBuffer& history,
                        const std::vector<ConicProgram::LinearRow>* prebuilt_rows = nullptr);

/// Per-step record streamed to the run CSV.
struct StepDiagnostics {
    int t = 0;
    double objective = 0.0;
    bool fallback = false;
    bool pe_active = false;
    std::string solver_status;
    int solver_iterations = 0;
    double solve_seconds = 0.0;
    double beta_prime_min = 0.0;
    double beta_hat_prime_min = 0.0;
    double beta_s_min = 0.0;
    double beta_hat_s_min = 0.0;
    double beta_margin_min = 0.0;        // min over windows of beta_s - beta_hat_s
    Eigen::VectorXd beta_prime, beta_hat_prime, beta_s, beta_hat_s; // per window
    double candidate_margin = 0.0;       // witness feasibility margin (>= 0 expected)
    double candidate_violation = 0.0;    // max linear-row violation of the candidate
    double linearization_min = 0.0;      // min eig of (true window Gram - linearized bound)
    double theta_update_seconds = 0.0;
    double reference_seconds = 0.0;
    double posterior_seconds = 0.0;
};

/// One closed-loop adaptive MPC instance (one per simulated run, strictly
/// sequential in t).
class AdaptiveController {
public:
    /// use_pe_constraints = true runs the PE-constrained pipeline; false runs
    /// the plain robust-adaptive variant (QP, no posterior check).
    AdaptiveController(UncertainModel model, TerminalIngredients ingredients,
                       ControllerConfig config, ParamSetEstimate theta0,
                       bool use_pe_constraints,
                       std::function<std::vector<Eigen::VectorXd>(int)> noise_source);

    /// Solve the initial problem and return u_0 = K x_0 + v_{0|0}.
    Eigen::VectorXd initialize(const Eigen::VectorXd& x0);

    /// Execute one step at t >= 1 and return u_t.
    Eigen::VectorXd step(const Eigen::VectorXd& x_t);

    const ParamSetEstimate& theta_set() const { return theta_; }
    const Eigen::VectorXd& theta_bar() const { return theta_bar_; }
    const StepDiagnostics& diagnostics() const { return diag_; }
    const HistoryBuffer& history() const { return history_; }
    const TerminalIngredients& ingredients() const { return ing_; }
    const TubeSolution& last_solution() const { return solution_; }
    int time() const { return t_; }

private:
    void update_parameter_estimate(const Eigen::VectorXd& x_t);
    double candidate_pe_margin(const ReferenceTrajectory& ref, const Eigen::VectorXd& beta_hat,
                               const PEWindowLayout& layout,
                               const std::vector<VPolytope>& candidate_sections);
    double linearization_margin(const PEWindowLayout& layout, const ReferenceTrajectory& ref,
                                const TubeSolution& sol);

    UncertainModel model_;
    TerminalIngredients ing_;
    ControllerConfig cfg_;
    bool use_pe_;
    std::function<std::vector<Eigen::VectorXd>(int)> noise_source_;

    ParamSetEstimate theta_;
    Eigen::VectorXd theta_bar_;
    HPolytope fw_;
    UnfalsifiedWindow window_;
    HistoryBuffer history_;
    TubeSolution solution_;
    std::vector<VPolytope> solution_sections_; // applied tube, length N+N_u
    Eigen::VectorXd x_prev_, u_prev_;
    int t_ = 0;
    StepDiagnostics diag_;
};

} // namespace peampc
