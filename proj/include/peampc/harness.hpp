#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "peampc/controller.hpp"
#include "peampc/excitation.hpp"
#include "peampc/identify.hpp"
#include "peampc/plant.hpp"
#include "peampc/rng.hpp"

namespace peampc {

enum class ControllerKind { Alg1, Alg2, NoisyK };

std::string to_string(ControllerKind k);
ControllerKind controller_kind_from_string(const std::string& name);

/// Fully resolved experiment description. Every default that the benchmark
/// description leaves open (x0, Q, R, F, N_mu, sampler and terminal-set
/// settings) is materialized here so the serialized form has no hidden
/// defaults.
struct ExperimentConfig {
    // Model.
    std::vector<Eigen::MatrixXd> A, B;
    Eigen::MatrixXd F;
    Eigen::MatrixXd K;
    Eigen::VectorXd theta_star;
    double disturbance_bound = 0.05;
    double disturbance_sigma = 0.06;
    double noise_bound = 0.005;

    // Constraints and the initial parameter set.
    HPolytope X, U;
    Eigen::MatrixXd M_theta;
    Eigen::VectorXd mu0;

    // Horizons.
    int N = 10;
    int N_u = 3;
    int N_mu = 3;

    // Experiment.
    int run_length = 500; // N_av
    int num_runs = 30;    // N_w (seed count)
    int N_s = 30;
    Eigen::VectorXd x0;
    Eigen::MatrixXd Q, R;
    std::uint64_t master_seed = 1;
    std::string profile = "paper";

    // Synthesis / sampling / solver knobs.
    double terminal_bound_radius = 3.0;
    int sampler_burn_in_factor = 50; // hit-and-run steps per dimension
    int sampler_thinning = 10;
    bool loose_solver = true;
    bool check_candidate = true;
    bool check_linearization = true;
    std::size_t combination_cap = 1000000;

    int nx() const { return static_cast<int>(A.at(0).rows()); }
    int nu() const { return static_cast<int>(B.at(0).cols()); }
    int np() const { return static_cast<int>(A.size()) - 1; }

    /// The benchmark configuration (second-order system, three parameters).
    static ExperimentConfig example();
    /// desk: short runs for CI; paper: full-scale reproduction.
    void apply_profile(const std::string& profile_name);
    /// Throws ConfigError naming the violated bound.
    void validate() const;

    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;

    UncertainModel model() const;
    ParamSetEstimate theta0() const;
    ControllerConfig controller_config(int run_index, const std::string& dump_dir) const;
};

Eigen::VectorXd draw_disturbance(const ExperimentConfig& cfg, RngStream& rng);
Eigen::VectorXd draw_noise(const ExperimentConfig& cfg, RngStream& rng);

/// Per-run series and invariant counters.
struct RunMetrics {
    std::vector<double> eps_t;        // 0 before the first full window
    std::vector<double> vol_ratio;
    std::vector<double> stage_cost;
    std::vector<double> objective;
    std::vector<double> beta_prime_min, beta_hat_prime_min, beta_s_min, beta_hat_s_min,
        beta_margin_min;
    std::vector<int> fallback;
    std::vector<Eigen::VectorXd> mu;
    std::vector<double> candidate_violation, candidate_margin, linearization_min;
    std::vector<int> solver_iterations;
    std::vector<double> solve_seconds, step_seconds; // wall clock; not in the CSV

    double cumulative_cost = 0.0;
    double sup_state_norm = 0.0;
    int state_violations = 0;
    int input_violations = 0;
    int membership_violations = 0;
    int monotonicity_violations = 0;
    int candidate_violations = 0;
    int linearization_violations = 0;
    int fallback_count = 0;
};

struct RunResult {
    ControllerKind kind = ControllerKind::Alg1;
    int run_index = 0;
    bool completed = false;
    std::string error;
    Trajectory trajectory;
    RunMetrics metrics;
};

/// Terminal ingredients shared by every run of an experiment (synthesized
/// once from Theta_0).
TerminalIngredients synthesize_ingredients(const ExperimentConfig& cfg);

/// Simulate one closed-loop run. The disturbance stream depends only on
/// (master seed, run index, step), never on the controller, so cross-
/// controller comparisons share sequences exactly.
RunResult run_closed_loop(const ExperimentConfig& cfg, ControllerKind kind, int run_index,
                          const TerminalIngredients& ingredients,
                          const std::string& dump_dir = "");

struct ControllerAggregate {
    std::string controller;
    int completed_runs = 0;
    int failed_runs = 0;
    double eps_hat = 0.0;
    std::map<int, double> volume_ratio_at; // t -> mean ratio
    double mean_cost = 0.0;
    double fallback_rate = 0.0;
    double sup_state_norm = 0.0;
    long long state_violations = 0, input_violations = 0, membership_violations = 0,
              monotonicity_violations = 0, candidate_violations = 0, linearization_violations = 0;
    double mean_solve_seconds = 0.0;
    double mean_step_seconds = 0.0;
};

struct AggregateReport {
    std::vector<ControllerAggregate> controllers;
    std::vector<std::string> failures;
    bool clean() const;
};

/// Run the full Monte-Carlo study for the given controllers, write
/// run_<controller>_<i>.csv (deterministic), timings, figure data and
/// summary.json under out_dir, and return the aggregates. workers <= 0 uses
/// the hardware concurrency; the PEAMPC_WORKERS environment variable caps it.
AggregateReport monte_carlo(const ExperimentConfig& cfg,
                            const std::vector<ControllerKind>& controllers,
                            const std::string& out_dir, int workers = 0);

/// Write one run's deterministic CSV series to the given stream.
void write_run_csv(std::ostream& os, const ExperimentConfig& cfg, const RunResult& run);

} // namespace peampc
