#include "peampc/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "peampc/errors.hpp"

namespace peampc {

namespace {

using nlohmann::json;

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

json matrix_to_json(const Eigen::MatrixXd& M) {
    json out = json::array();
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
        out.push_back(row);
    }
    return out;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
    const size_t rows = j.size();
    const size_t cols = rows == 0 ? 0 : j[0].size();
    Eigen::MatrixXd M(rows, cols);
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < cols; ++c) M(r, c) = j[r][c].get<double>();
    return M;
}

json vector_to_json(const Eigen::VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

Eigen::VectorXd vector_from_json(const json& j) {
    Eigen::VectorXd v(j.size());
    for (size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
    return v;
}

void format_double(std::string& line, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    line += buf;
}

} // namespace

std::string to_string(ControllerKind k) {
    switch (k) {
        case ControllerKind::Alg1: return "alg1";
        case ControllerKind::Alg2: return "alg2";
        case ControllerKind::NoisyK: return "noisyK";
    }
    return "unknown";
}

ControllerKind controller_kind_from_string(const std::string& name) {
    if (name == "alg1") return ControllerKind::Alg1;
    if (name == "alg2") return ControllerKind::Alg2;
    if (name == "noisyK" || name == "noisyk") return ControllerKind::NoisyK;
    throw ConfigError("unknown controller '" + name + "' (expected alg1, alg2 or noisyK)");
}

ExperimentConfig ExperimentConfig::example() {
    ExperimentConfig cfg;
    using Eigen::MatrixXd;
    cfg.A.assign(4, MatrixXd(2, 2));
    cfg.B.assign(4, MatrixXd(2, 1));
    cfg.A[0] << 0.5, 0.2, -0.1, 0.6;
    cfg.A[1] << 0.042, 0.0, 0.072, 0.03;
    cfg.A[2] << 0.015, 0.019, 0.009, 0.035;
    cfg.A[3] << 0.0, 0.0, 0.0, 0.0;
    cfg.B[0] << 0.0, 0.5;
    cfg.B[1] << 0.0, 0.0;
    cfg.B[2] << 0.0, 0.0;
    cfg.B[3] << 0.040, 0.054;
    cfg.F = MatrixXd::Identity(2, 2);
    cfg.K = MatrixXd(1, 2);
    cfg.K << 0.017, -0.41;
    cfg.theta_star = Eigen::Vector3d(0.8, 0.2, -0.5);

    Eigen::MatrixXd hx(1, 2);
    hx << 0, -1; // [x]_2 >= -0.3
    cfg.X = HPolytope(hx, Eigen::VectorXd::Constant(1, 0.3));
    Eigen::MatrixXd hu(1, 1);
    hu << 1; // u <= 1
    cfg.U = HPolytope(hu, Eigen::VectorXd::Constant(1, 1.0));

    cfg.M_theta.resize(6, 3);
    cfg.M_theta << Eigen::MatrixXd::Identity(3, 3), -Eigen::MatrixXd::Identity(3, 3);
    cfg.mu0 = Eigen::VectorXd::Ones(6);

    cfg.x0 = Eigen::Vector2d(1.0, 0.3);
    cfg.Q = MatrixXd::Identity(2, 2);
    cfg.R = MatrixXd::Identity(1, 1);
    return cfg;
}

void ExperimentConfig::apply_profile(const std::string& profile_name) {
    if (profile_name == "desk") {
        run_length = 100;
        num_runs = 5;
        N_s = 10;
        loose_solver = true;
    } else if (profile_name == "paper") {
        run_length = 500;
        num_runs = 30;
        N_s = 30;
        loose_solver = true;
    } else {
        throw ConfigError("unknown profile '" + profile_name + "' (expected desk or paper)");
    }
    profile = profile_name;
}

void ExperimentConfig::validate() const {
    if (A.empty() || A.size() != B.size())
        throw ConfigError("model must provide equally many A and B terms");
    if (N <= 0) throw ConfigError("prediction horizon N must be positive");
    if (N_u <= nx())
        throw ConfigError("PE window length N_u must exceed the state dimension n_x (N_u > " +
                          std::to_string(nx()) + " required)");
    if (N_mu < N_u)
        throw ConfigError("parameter update window N_mu must be at least N_u");
    if (N_s < 1) throw ConfigError("sample count N_s must be positive");
    if (run_length < 1) throw ConfigError("run length must be positive");
    if (num_runs < 1) throw ConfigError("seed count must be positive");
    if (x0.size() != nx()) throw ConfigError("x0 dimension must match the state dimension");
    if (M_theta.cols() != np())
        throw ConfigError("M_theta column count must match the parameter dimension");
    if ((M_theta * theta_star - mu0).maxCoeff() > 0)
        throw ConfigError("theta_star must lie inside the initial parameter set");
    if (disturbance_bound <= 0) throw ConfigError("disturbance bound must be positive");
    if (noise_bound < 0) throw ConfigError("noise bound must be nonnegative");
    const double combos = std::pow(static_cast<double>(N_s), N_u);
    if (combos > static_cast<double>(combination_cap))
        throw ConfigError("N_s^N_u exceeds the sampled-check combination cap");
}

UncertainModel ExperimentConfig::model() const {
    return UncertainModel::create(A, B, F, HPolytope::inf_ball(nx(), disturbance_bound),
                                  HPolytope::inf_ball(nu(), noise_bound), K);
}

ParamSetEstimate ExperimentConfig::theta0() const {
    ParamSetEstimate est;
    est.M_theta = M_theta;
    est.mu = mu0;
    est.t = 0;
    return est;
}

ControllerConfig ExperimentConfig::controller_config(int run_index,
                                                     const std::string& dump_dir) const {
    ControllerConfig c;
    c.N = N;
    c.N_u = N_u;
    c.N_mu = N_mu;
    c.N_s = N_s;
    c.Q = Q;
    c.R = R;
    c.X = X;
    c.U = U;
    c.solver = loose_solver ? SolverSettings::loose() : SolverSettings::strict();
    c.combination_cap = combination_cap;
    c.check_candidate = check_candidate;
    c.check_linearization = check_linearization;
    c.dump_dir = dump_dir;
    c.sample_seed_base =
        RngStream::keyed(master_seed, static_cast<std::uint64_t>(run_index), 0,
                         RngPurpose::TubeSampling)
            .next_u64();
    return c;
}

std::string ExperimentConfig::to_json_text() const {
    json j;
    json model;
    model["A"] = json::array();
    for (const auto& Ai : A) model["A"].push_back(matrix_to_json(Ai));
    model["B"] = json::array();
    for (const auto& Bi : B) model["B"].push_back(matrix_to_json(Bi));
    model["F"] = matrix_to_json(F);
    model["K"] = matrix_to_json(K);
    model["theta_star"] = vector_to_json(theta_star);
    model["disturbance"] = {{"bound", disturbance_bound}, {"sigma", disturbance_sigma}};
    model["noise"] = {{"bound", noise_bound}};
    j["model"] = model;
    j["constraints"] = {{"state", {{"normals", matrix_to_json(X.normals)},
                                   {"offsets", vector_to_json(X.offsets)}}},
                        {"input", {{"normals", matrix_to_json(U.normals)},
                                   {"offsets", vector_to_json(U.offsets)}}}};
    j["theta0"] = {{"M", matrix_to_json(M_theta)}, {"mu", vector_to_json(mu0)}};
    j["horizons"] = {{"N", N}, {"N_u", N_u}, {"N_mu", N_mu}};
    j["experiment"] = {{"run_length", run_length}, {"num_runs", num_runs},     {"N_s", N_s},
                       {"x0", vector_to_json(x0)}, {"Q", matrix_to_json(Q)},   {"R", matrix_to_json(R)},
                       {"master_seed", master_seed}, {"profile", profile}};
    j["terminal"] = {{"bound_radius", terminal_bound_radius}};
    j["sampler"] = {{"burn_in_factor", sampler_burn_in_factor}, {"thinning", sampler_thinning}};
    j["solver"] = {{"loose", loose_solver}};
    j["checks"] = {{"candidate", check_candidate},
                   {"linearization", check_linearization},
                   {"combination_cap", combination_cap}};
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    ExperimentConfig cfg = example();
    json j = json::parse(text);
    if (j.contains("model")) {
        const auto& m = j["model"];
        if (m.contains("A")) {
            cfg.A.clear();
            for (const auto& a : m["A"]) cfg.A.push_back(matrix_from_json(a));
        }
        if (m.contains("B")) {
            cfg.B.clear();
            for (const auto& b : m["B"]) cfg.B.push_back(matrix_from_json(b));
        }
        if (m.contains("F")) cfg.F = matrix_from_json(m["F"]);
        if (m.contains("K")) cfg.K = matrix_from_json(m["K"]);
        if (m.contains("theta_star")) cfg.theta_star = vector_from_json(m["theta_star"]);
        if (m.contains("disturbance")) {
            if (m["disturbance"].contains("bound"))
                cfg.disturbance_bound = m["disturbance"]["bound"].get<double>();
            if (m["disturbance"].contains("sigma"))
                cfg.disturbance_sigma = m["disturbance"]["sigma"].get<double>();
        }
        if (m.contains("noise") && m["noise"].contains("bound"))
            cfg.noise_bound = m["noise"]["bound"].get<double>();
    }
    if (j.contains("constraints")) {
        const auto& c = j["constraints"];
        if (c.contains("state"))
            cfg.X = HPolytope(matrix_from_json(c["state"]["normals"]),
                              vector_from_json(c["state"]["offsets"]));
        if (c.contains("input"))
            cfg.U = HPolytope(matrix_from_json(c["input"]["normals"]),
                              vector_from_json(c["input"]["offsets"]));
    }
    if (j.contains("theta0")) {
        cfg.M_theta = matrix_from_json(j["theta0"]["M"]);
        cfg.mu0 = vector_from_json(j["theta0"]["mu"]);
    }
    if (j.contains("horizons")) {
        const auto& h = j["horizons"];
        if (h.contains("N")) cfg.N = h["N"].get<int>();
        if (h.contains("N_u")) cfg.N_u = h["N_u"].get<int>();
        if (h.contains("N_mu")) cfg.N_mu = h["N_mu"].get<int>();
    }
    if (j.contains("experiment")) {
        const auto& e = j["experiment"];
        if (e.contains("run_length")) cfg.run_length = e["run_length"].get<int>();
        if (e.contains("num_runs")) cfg.num_runs = e["num_runs"].get<int>();
        if (e.contains("N_s")) cfg.N_s = e["N_s"].get<int>();
        if (e.contains("x0")) cfg.x0 = vector_from_json(e["x0"]);
        if (e.contains("Q")) cfg.Q = matrix_from_json(e["Q"]);
        if (e.contains("R")) cfg.R = matrix_from_json(e["R"]);
        if (e.contains("master_seed")) cfg.master_seed = e["master_seed"].get<std::uint64_t>();
        if (e.contains("profile")) cfg.profile = e["profile"].get<std::string>();
    }
    if (j.contains("terminal") && j["terminal"].contains("bound_radius"))
        cfg.terminal_bound_radius = j["terminal"]["bound_radius"].get<double>();
    if (j.contains("sampler")) {
        if (j["sampler"].contains("burn_in_factor"))
            cfg.sampler_burn_in_factor = j["sampler"]["burn_in_factor"].get<int>();
        if (j["sampler"].contains("thinning"))
            cfg.sampler_thinning = j["sampler"]["thinning"].get<int>();
    }
    if (j.contains("solver") && j["solver"].contains("loose"))
        cfg.loose_solver = j["solver"]["loose"].get<bool>();
    if (j.contains("checks")) {
        if (j["checks"].contains("candidate"))
            cfg.check_candidate = j["checks"]["candidate"].get<bool>();
        if (j["checks"].contains("linearization"))
            cfg.check_linearization = j["checks"]["linearization"].get<bool>();
        if (j["checks"].contains("combination_cap"))
            cfg.combination_cap = j["checks"]["combination_cap"].get<std::size_t>();
    }
    return cfg;
}

Eigen::VectorXd draw_disturbance(const ExperimentConfig& cfg, RngStream& rng) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(cfg.F.cols());
    if (cfg.disturbance_bound <= 0.0 || cfg.disturbance_sigma <= 0.0) return w;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        double v;
        do {
            v = cfg.disturbance_sigma * rng.next_gaussian();
        } while (std::abs(v) > cfg.disturbance_bound);
        w[i] = v;
    }
    return w;
}

Eigen::VectorXd draw_noise(const ExperimentConfig& cfg, RngStream& rng) {
    Eigen::VectorXd s(cfg.nu());
    for (Eigen::Index i = 0; i < s.size(); ++i)
        s[i] = rng.next_uniform(-cfg.noise_bound, cfg.noise_bound);
    return s;
}

TerminalIngredients synthesize_ingredients(const ExperimentConfig& cfg) {
    const VPolytope theta_verts = to_vertices(HPolytope(cfg.M_theta, cfg.mu0));
    UncertainModel m = UncertainModel::create(cfg.A, cfg.B, cfg.F,
                                              HPolytope::inf_ball(cfg.nx(), cfg.disturbance_bound),
                                              HPolytope::inf_ball(cfg.nu(), cfg.noise_bound),
                                              cfg.K, &theta_verts);
    TerminalIngredients ing;
    ing.Q = cfg.Q;
    ing.R = cfg.R;
    TerminalSynthOptions opts;
    opts.bound_radius = cfg.terminal_bound_radius;
    ing.X_T = synth_terminal_set(m, cfg.X, cfg.U, theta_verts, opts);
    ing.X_T_verts = prune_to_extreme(to_vertices(ing.X_T));
    Eigen::VectorXd center = Eigen::VectorXd::Zero(cfg.np());
    ing.P = synth_terminal_cost(m, center, cfg.Q, cfg.R);
    return ing;
}

namespace {

struct StepRecorder {
    const ExperimentConfig& cfg;
    RunResult& run;
    Eigen::VectorXd mu_prev;
    ParamSetEstimate initial;

    StepRecorder(const ExperimentConfig& c, RunResult& r)
        : cfg(c), run(r), initial(c.theta0()) {
        mu_prev = initial.mu;
    }

    void state_input(const Eigen::VectorXd& x, const Eigen::VectorXd& u) {
        if ((cfg.X.normals * x - cfg.X.offsets).maxCoeff() > 1e-9) ++run.metrics.state_violations;
        if ((cfg.U.normals * u - cfg.U.offsets).maxCoeff() > 1e-9) ++run.metrics.input_violations;
        run.metrics.sup_state_norm = std::max(run.metrics.sup_state_norm, x.norm());
        const double stage = x.dot(cfg.Q * x) + u.dot(cfg.R * u);
        run.metrics.stage_cost.push_back(stage);
        run.metrics.cumulative_cost += stage;
    }

    void parameters(const ParamSetEstimate& est) {
        if (((est.mu - mu_prev).array() > 1e-9).any()) ++run.metrics.monotonicity_violations;
        if ((est.M_theta * cfg.theta_star - est.mu).maxCoeff() > 1e-9)
            ++run.metrics.membership_violations;
        mu_prev = est.mu;
        run.metrics.mu.push_back(est.mu);
        run.metrics.vol_ratio.push_back(volume_ratio(est, initial));
    }

    void epsilon(const HistoryBuffer& hist, int t) {
        auto e = closed_loop_epsilon(hist, t, cfg.N_u);
        run.metrics.eps_t.push_back(e.value_or(0.0));
    }
};

} // namespace

RunResult run_closed_loop(const ExperimentConfig& cfg, ControllerKind kind, int run_index,
                          const TerminalIngredients& ingredients, const std::string& dump_dir) {
    RunResult run;
    run.kind = kind;
    run.run_index = run_index;
    UncertainModel m = cfg.model();
    StepRecorder rec(cfg, run);
    const int T = cfg.run_length;

    auto disturbance_at = [&](int t) {
        RngStream rng = RngStream::keyed(cfg.master_seed, run_index, t, RngPurpose::Disturbance);
        return draw_disturbance(cfg, rng);
    };
    auto noise_seq_at = [&](int t) {
        RngStream rng = RngStream::keyed(cfg.master_seed, run_index, t, RngPurpose::InjectedNoise);
        std::vector<Eigen::VectorXd> seq(cfg.N + cfg.N_u);
        for (auto& s : seq) s = draw_noise(cfg, rng);
        return seq;
    };

    try {
        Eigen::VectorXd x = cfg.x0;
        Eigen::VectorXd u;
        run.trajectory.states.push_back(x);

        if (kind == ControllerKind::NoisyK) {
            ParamSetEstimate est = cfg.theta0();
            UnfalsifiedWindow window(cfg.N_mu);
            HistoryBuffer hist(cfg.N_u + 1);
            const HPolytope fw = disturbance_image(m);
            Eigen::VectorXd x_prev, u_prev;
            for (int t = 0; t < T; ++t) {
                const double t0 = now_seconds();
                if (t > 0) {
                    window.push(unfalsified(m, fw, x, x_prev, u_prev));
                    est = update_param_set(est, window.sets());
                }
                const Eigen::VectorXd s = noise_seq_at(t).front();
                u = m.K * x + s;
                const Eigen::MatrixXd Phi = regressor(m, x, u);
                hist.push(x, u, Phi.transpose() * Phi);
                rec.state_input(x, u);
                rec.parameters(est);
                rec.epsilon(hist, t);
                run.metrics.objective.push_back(0.0);
                run.metrics.beta_prime_min.push_back(0.0);
                run.metrics.beta_hat_prime_min.push_back(0.0);
                run.metrics.beta_s_min.push_back(0.0);
                run.metrics.beta_hat_s_min.push_back(0.0);
                run.metrics.beta_margin_min.push_back(0.0);
                run.metrics.fallback.push_back(0);
                run.metrics.candidate_violation.push_back(0.0);
                run.metrics.candidate_margin.push_back(0.0);
                run.metrics.linearization_min.push_back(0.0);
                run.metrics.solver_iterations.push_back(0);
                run.metrics.solve_seconds.push_back(0.0);
                run.metrics.step_seconds.push_back(now_seconds() - t0);

                const Eigen::VectorXd w = disturbance_at(t);
                x_prev = x;
                u_prev = u;
                run.trajectory.inputs.push_back(u);
                run.trajectory.disturbances.push_back(w);
                run.trajectory.noises.push_back(s);
                x = step(m, x, u, w, cfg.theta_star);
                run.trajectory.states.push_back(x);
            }
        } else {
            const bool use_pe = kind == ControllerKind::Alg1;
            AdaptiveController ctrl(m, ingredients, cfg.controller_config(run_index, dump_dir),
                                    cfg.theta0(), use_pe, noise_seq_at);
            for (int t = 0; t < T; ++t) {
                const double t0 = now_seconds();
                u = t == 0 ? ctrl.initialize(x) : ctrl.step(x);
                const auto& d = ctrl.diagnostics();
                rec.state_input(x, u);
                rec.parameters(ctrl.theta_set());
                rec.epsilon(ctrl.history(), t);
                run.metrics.objective.push_back(d.objective);
                run.metrics.beta_prime_min.push_back(d.beta_prime_min);
                run.metrics.beta_hat_prime_min.push_back(d.beta_hat_prime_min);
                run.metrics.beta_s_min.push_back(d.beta_s_min);
                run.metrics.beta_hat_s_min.push_back(d.beta_hat_s_min);
                run.metrics.beta_margin_min.push_back(d.beta_margin_min);
                run.metrics.fallback.push_back(d.fallback ? 1 : 0);
                run.metrics.candidate_violation.push_back(d.candidate_violation);
                run.metrics.candidate_margin.push_back(d.candidate_margin);
                run.metrics.linearization_min.push_back(d.linearization_min);
                run.metrics.solver_iterations.push_back(d.solver_iterations);
                run.metrics.solve_seconds.push_back(d.solve_seconds);
                run.metrics.step_seconds.push_back(now_seconds() - t0);
                if (d.fallback) ++run.metrics.fallback_count;
                if (t >= 1) {
                    if (d.candidate_violation > 1e-6) ++run.metrics.candidate_violations;
                    if (use_pe && d.candidate_margin < -1e-6) ++run.metrics.candidate_violations;
                    if (use_pe && d.linearization_min < -1e-8)
                        ++run.metrics.linearization_violations;
                }

                const Eigen::VectorXd w = disturbance_at(t);
                run.trajectory.inputs.push_back(u);
                run.trajectory.disturbances.push_back(w);
                run.trajectory.noises.push_back(Eigen::VectorXd::Zero(cfg.nu()));
                x = step(m, x, u, w, cfg.theta_star);
                run.trajectory.states.push_back(x);
            }
        }
        run.completed = true;
    } catch (const std::exception& e) {
        run.completed = false;
        run.error = e.what();
    }
    return run;
}

void write_run_csv(std::ostream& os, const ExperimentConfig& cfg, const RunResult& run) {
    const int nx = cfg.nx();
    const int nu = cfg.nu();
    const int nw = static_cast<int>(cfg.F.cols());
    const int r = static_cast<int>(cfg.mu0.size());
    std::string header = "t";
    for (int i = 0; i < nx; ++i) header += ",x" + std::to_string(i);
    for (int i = 0; i < nu; ++i) header += ",u" + std::to_string(i);
    for (int i = 0; i < nw; ++i) header += ",w" + std::to_string(i);
    header +=
        ",stage_cost,cumulative_cost,objective,eps_t,vol_ratio,beta_prime_min,beta_hat_prime_min,"
        "beta_s_min,beta_hat_s_min,beta_margin_min,fallback,candidate_violation,candidate_margin,"
        "linearization_min,solver_iterations";
    for (int i = 0; i < r; ++i) header += ",mu" + std::to_string(i);
    os << header << "\n";

    double cum = 0.0;
    const int T = static_cast<int>(run.metrics.stage_cost.size());
    for (int t = 0; t < T; ++t) {
        std::string line = std::to_string(t);
        auto push = [&](double v) {
            line += ",";
            format_double(line, v);
        };
        for (int i = 0; i < nx; ++i) push(run.trajectory.states[t][i]);
        for (int i = 0; i < nu; ++i) push(run.trajectory.inputs[t][i]);
        for (int i = 0; i < nw; ++i) push(run.trajectory.disturbances[t][i]);
        cum += run.metrics.stage_cost[t];
        push(run.metrics.stage_cost[t]);
        push(cum);
        push(run.metrics.objective[t]);
        push(run.metrics.eps_t[t]);
        push(run.metrics.vol_ratio[t]);
        push(run.metrics.beta_prime_min[t]);
        push(run.metrics.beta_hat_prime_min[t]);
        push(run.metrics.beta_s_min[t]);
        push(run.metrics.beta_hat_s_min[t]);
        push(run.metrics.beta_margin_min[t]);
        line += "," + std::to_string(run.metrics.fallback[t]);
        push(run.metrics.candidate_violation[t]);
        push(run.metrics.candidate_margin[t]);
        push(run.metrics.linearization_min[t]);
        line += "," + std::to_string(run.metrics.solver_iterations[t]);
        for (int i = 0; i < r; ++i) push(run.metrics.mu[t][i]);
        os << line << "\n";
    }
}

bool AggregateReport::clean() const {
    if (!failures.empty()) return false;
    for (const auto& c : controllers) {
        if (c.failed_runs > 0) return false;
        if (c.state_violations || c.input_violations || c.membership_violations ||
            c.monotonicity_violations || c.candidate_violations || c.linearization_violations)
            return false;
    }
    return true;
}

AggregateReport monte_carlo(const ExperimentConfig& cfg,
                            const std::vector<ControllerKind>& controllers,
                            const std::string& out_dir, int workers) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    fs::create_directories(out_dir + "/figures");
    fs::create_directories(out_dir + "/timings");
    const std::string dump_dir = out_dir + "/failures";

    const TerminalIngredients ingredients = synthesize_ingredients(cfg);

    struct Task {
        ControllerKind kind;
        int run_index;
    };
    std::vector<Task> tasks;
    for (auto kind : controllers)
        for (int i = 0; i < cfg.num_runs; ++i) tasks.push_back({kind, i});
    std::vector<RunResult> results(tasks.size());

    int nworkers = workers > 0 ? workers : static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PEAMPC_WORKERS")) {
        const int cap = std::atoi(env);
        if (cap > 0) nworkers = std::min(nworkers, cap);
    }
    nworkers = std::max(1, std::min<int>(nworkers, static_cast<int>(tasks.size())));

    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            results[i] =
                run_closed_loop(cfg, tasks[i].kind, tasks[i].run_index, ingredients, dump_dir);
        }
    };
    std::vector<std::thread> pool;
    for (int i = 0; i < nworkers; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    // Deterministic per-run outputs, ordered by (controller, run index).
    AggregateReport report;
    json summary;
    summary["config"] = json::parse(cfg.to_json_text());
    for (auto kind : controllers) {
        ControllerAggregate agg;
        agg.controller = to_string(kind);
        double eps_sum = 0.0;
        long long eps_count = 0;
        double cost_sum = 0.0;
        long long fallback_steps = 0, steps = 0;
        double solve_sum = 0.0, step_sum = 0.0;
        std::map<int, std::pair<double, int>> vols;
        const std::vector<int> marks = {100, 200, 500, cfg.run_length - 1};

        for (size_t i = 0; i < tasks.size(); ++i) {
            if (tasks[i].kind != kind) continue;
            const RunResult& run = results[i];
            const std::string base =
                out_dir + "/run_" + to_string(kind) + "_" + std::to_string(run.run_index);
            {
                std::ofstream f(base + ".csv", std::ios::trunc);
                write_run_csv(f, cfg, run);
            }
            {
                std::ofstream f(out_dir + "/timings/run_" + to_string(kind) + "_" +
                                std::to_string(run.run_index) + "_timing.csv");
                f << "t,solve_seconds,step_seconds\n";
                for (size_t t = 0; t < run.metrics.step_seconds.size(); ++t)
                    f << t << "," << run.metrics.solve_seconds[t] << ","
                      << run.metrics.step_seconds[t] << "\n";
            }
            if (!run.completed) {
                ++agg.failed_runs;
                report.failures.push_back(to_string(kind) + " run " +
                                          std::to_string(run.run_index) + ": " + run.error);
                continue;
            }
            ++agg.completed_runs;
            for (double e : run.metrics.eps_t) {
                eps_sum += e;
                ++eps_count;
            }
            cost_sum += run.metrics.cumulative_cost;
            fallback_steps += run.metrics.fallback_count;
            steps += static_cast<long long>(run.metrics.stage_cost.size());
            agg.sup_state_norm = std::max(agg.sup_state_norm, run.metrics.sup_state_norm);
            agg.state_violations += run.metrics.state_violations;
            agg.input_violations += run.metrics.input_violations;
            agg.membership_violations += run.metrics.membership_violations;
            agg.monotonicity_violations += run.metrics.monotonicity_violations;
            agg.candidate_violations += run.metrics.candidate_violations;
            agg.linearization_violations += run.metrics.linearization_violations;
            for (int mark : marks) {
                if (mark >= 0 && mark < static_cast<int>(run.metrics.vol_ratio.size())) {
                    vols[mark].first += run.metrics.vol_ratio[mark];
                    vols[mark].second += 1;
                }
            }
            for (double v : run.metrics.solve_seconds) solve_sum += v;
            for (double v : run.metrics.step_seconds) step_sum += v;
        }
        if (eps_count > 0) agg.eps_hat = eps_sum / static_cast<double>(eps_count);
        if (agg.completed_runs > 0) agg.mean_cost = cost_sum / agg.completed_runs;
        if (steps > 0) {
            agg.fallback_rate = static_cast<double>(fallback_steps) / static_cast<double>(steps);
            agg.mean_solve_seconds = solve_sum / static_cast<double>(steps);
            agg.mean_step_seconds = step_sum / static_cast<double>(steps);
        }
        for (const auto& [mark, acc] : vols)
            if (acc.second > 0) agg.volume_ratio_at[mark] = acc.first / acc.second;
        report.controllers.push_back(agg);

        json jc;
        jc["controller"] = agg.controller;
        jc["completed_runs"] = agg.completed_runs;
        jc["failed_runs"] = agg.failed_runs;
        jc["eps_hat"] = agg.eps_hat;
        for (const auto& [mark, v] : agg.volume_ratio_at)
            jc["volume_ratio_at"][std::to_string(mark)] = v;
        jc["mean_closed_loop_cost"] = agg.mean_cost;
        jc["fallback_rate"] = agg.fallback_rate;
        jc["sup_state_norm"] = agg.sup_state_norm;
        jc["violations"] = {{"state", agg.state_violations},
                            {"input", agg.input_violations},
                            {"membership", agg.membership_violations},
                            {"monotonicity", agg.monotonicity_violations},
                            {"candidate", agg.candidate_violations},
                            {"linearization", agg.linearization_violations}};
        jc["mean_solve_seconds"] = agg.mean_solve_seconds;
        jc["mean_step_seconds"] = agg.mean_step_seconds;
        summary["controllers"].push_back(jc);
    }
    summary["failures"] = report.failures;
    summary["clean"] = report.clean();

    // Figure data: per-step means across completed runs.
    auto mean_series = [&](ControllerKind kind, auto getter) {
        std::vector<double> sum(cfg.run_length, 0.0);
        int count = 0;
        for (size_t i = 0; i < tasks.size(); ++i) {
            if (tasks[i].kind != kind || !results[i].completed) continue;
            const auto& series = getter(results[i].metrics);
            for (int t = 0; t < cfg.run_length && t < static_cast<int>(series.size()); ++t)
                sum[t] += series[t];
            ++count;
        }
        if (count > 0)
            for (auto& v : sum) v /= count;
        return sum;
    };
    {
        std::ofstream f(out_dir + "/figures/fig1_volume_ratio.csv");
        f << "t";
        for (auto kind : controllers) f << "," << to_string(kind);
        f << "\n";
        std::vector<std::vector<double>> cols;
        for (auto kind : controllers)
            cols.push_back(mean_series(kind, [](const RunMetrics& m) { return m.vol_ratio; }));
        for (int t = 0; t < cfg.run_length; ++t) {
            f << t;
            for (const auto& col : cols) f << "," << col[t];
            f << "\n";
        }
    }
    {
        std::ofstream f(out_dir + "/figures/fig2_pe_coefficient.csv");
        f << "t";
        for (auto kind : controllers) f << "," << to_string(kind);
        f << "\n";
        std::vector<std::vector<double>> cols;
        for (auto kind : controllers)
            cols.push_back(mean_series(kind, [](const RunMetrics& m) { return m.eps_t; }));
        for (int t = 0; t < cfg.run_length; ++t) {
            f << t;
            for (const auto& col : cols) f << "," << col[t];
            f << "\n";
        }
    }
    {
        std::ofstream f(out_dir + "/summary.json");
        f << summary.dump(2) << "\n";
    }
    return report;
}

} // namespace peampc
