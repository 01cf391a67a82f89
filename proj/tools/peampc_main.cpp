#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "peampc/errors.hpp"
#include "peampc/harness.hpp"

using namespace peampc;
using nlohmann::json;

namespace {

ExperimentConfig load_config(const std::string& path, const std::string& profile,
                             std::uint64_t seed, bool seed_set, int seeds_override) {
    ExperimentConfig cfg = ExperimentConfig::example();
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        cfg = ExperimentConfig::from_json_text(ss.str());
    }
    if (!profile.empty()) cfg.apply_profile(profile);
    if (seed_set) cfg.master_seed = seed;
    if (seeds_override > 0) cfg.num_runs = seeds_override;
    cfg.validate();
    return cfg;
}

json certificate_json(const std::string& name, const CertificateReport& rep) {
    json j;
    j["assumption"] = name;
    j["holds"] = rep.holds;
    j["margin"] = rep.margin;
    j["detail"] = rep.detail;
    return j;
}

int cmd_check_assumptions(const ExperimentConfig& cfg, const std::string& out_dir) {
    const VPolytope theta_verts = to_vertices(HPolytope(cfg.M_theta, cfg.mu0));
    UncertainModel m = cfg.model();
    json report;
    bool all_hold = true;
    auto add = [&](const std::string& name, const CertificateReport& rep) {
        report["assumptions"].push_back(certificate_json(name, rep));
        std::printf("%-34s %s (margin %.3e) %s\n", name.c_str(), rep.holds ? "PASS" : "FAIL",
                    rep.margin, rep.detail.c_str());
        all_hold = all_hold && rep.holds;
    };

    // Disturbance statistics: zero mean, full-rank covariance, boundary mass.
    {
        CertificateReport rep;
        RngStream rng = RngStream::keyed(cfg.master_seed, 0, 0, RngPurpose::Generic);
        const int n = 100000;
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(cfg.F.cols());
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(cfg.F.cols(), cfg.F.cols());
        Eigen::VectorXd corner = Eigen::VectorXd::Constant(cfg.F.cols(), cfg.disturbance_bound);
        int near_boundary = 0;
        for (int i = 0; i < n; ++i) {
            Eigen::VectorXd w = draw_disturbance(cfg, rng);
            mean += w;
            cov += w * w.transpose();
            if ((w - corner).norm() < 0.01) ++near_boundary;
        }
        mean /= n;
        cov = cov / n - mean * mean.transpose();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
        const double eps_w = es.eigenvalues().minCoeff();
        rep.holds = mean.cwiseAbs().maxCoeff() < 5.0 * cfg.disturbance_sigma / std::sqrt(n) &&
                    eps_w > 0 && near_boundary > 0;
        rep.margin = eps_w;
        rep.detail = "empirical mean " + std::to_string(mean.cwiseAbs().maxCoeff()) +
                     ", boundary hits " + std::to_string(near_boundary);
        add("disturbance (iid, eps_w, boundary)", rep);
    }
    {
        CertificateReport rep;
        rep.holds = (cfg.M_theta * cfg.theta_star - cfg.mu0).maxCoeff() <= 0;
        rep.margin = -(cfg.M_theta * cfg.theta_star - cfg.mu0).maxCoeff();
        rep.detail = rep.holds ? "theta_star inside Theta_0" : "theta_star outside Theta_0";
        add("parameters (theta_star in Theta_0)", rep);
    }
    {
        VPolytope star(cfg.theta_star.transpose());
        add("parameters (reachability at theta*)", check_vertex_reachability(m, star));
    }
    add("parameters (identifiability)", check_identifiability(m));
    add("stability (common Lyapunov LMIs)", check_quadratic_stability(m, theta_verts));
    add("gain (disturbance reachability)", check_disturbance_reachability(m, theta_verts));
    {
        CertificateReport rep;
        const double var = cfg.noise_bound * cfg.noise_bound / 3.0;
        rep.holds = var > 0;
        rep.margin = var;
        rep.detail = "eps_s for the uniform noise";
        add("noise (eps_s > 0)", rep);
    }
    add("reachability over Theta_0 vertices", check_vertex_reachability(m, theta_verts));

    report["all_hold"] = all_hold;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream f(out_dir + "/assumptions.json");
        f << report.dump(2) << "\n";
    }
    return 0;
}

int cmd_synth(const ExperimentConfig& cfg, const std::string& out_dir) {
    TerminalIngredients ing = synthesize_ingredients(cfg);
    std::printf("terminal set: %d facets, %d vertices\n", ing.X_T.rows(), ing.X_T_verts.count());
    std::printf("terminal cost P:\n");
    for (int i = 0; i < ing.P.rows(); ++i) {
        for (int j = 0; j < ing.P.cols(); ++j) std::printf("  % .6f", ing.P(i, j));
        std::printf("\n");
    }
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        json j;
        j["X_T"] = json::parse(polytope_to_json(ing.X_T));
        j["X_T_vertices"] = json::parse(polytope_to_json(ing.X_T_verts));
        json P = json::array();
        for (int i = 0; i < ing.P.rows(); ++i) {
            json row = json::array();
            for (int c = 0; c < ing.P.cols(); ++c) row.push_back(ing.P(i, c));
            P.push_back(row);
        }
        j["P"] = P;
        std::ofstream f(out_dir + "/ingredients.json");
        f << j.dump(2) << "\n";
        std::printf("wrote %s/ingredients.json\n", out_dir.c_str());
    }
    return 0;
}

int cmd_run(const ExperimentConfig& cfg, const std::vector<std::string>& controllers,
            const std::string& out_dir, bool force) {
    // Preflight assumption check unless forced.
    if (!force) {
        const VPolytope theta_verts = to_vertices(HPolytope(cfg.M_theta, cfg.mu0));
        UncertainModel m = cfg.model();
        if (!check_quadratic_stability(m, theta_verts).holds) {
            std::fprintf(stderr,
                         "assumption check failed (quadratic stability); rerun with --force to "
                         "override\n");
            return 2;
        }
    }
    std::vector<ControllerKind> kinds;
    for (const auto& name : controllers) kinds.push_back(controller_kind_from_string(name));

    AggregateReport report = monte_carlo(cfg, kinds, out_dir);
    for (const auto& c : report.controllers) {
        std::printf("%-7s runs %d/%d  eps_hat %.4e  cost %.4f  fallback %.3f", c.controller.c_str(),
                    c.completed_runs, c.completed_runs + c.failed_runs, c.eps_hat, c.mean_cost,
                    c.fallback_rate);
        for (const auto& [mark, v] : c.volume_ratio_at)
            std::printf("  vol@%d %.4f", mark, v);
        std::printf("\n");
    }
    if (!report.clean()) {
        json manifest;
        manifest["failures"] = report.failures;
        for (const auto& c : report.controllers) {
            manifest["violations"][c.controller] = {
                {"state", c.state_violations},
                {"input", c.input_violations},
                {"membership", c.membership_violations},
                {"monotonicity", c.monotonicity_violations},
                {"candidate", c.candidate_violations},
                {"linearization", c.linearization_violations},
                {"failed_runs", c.failed_runs}};
        }
        std::ofstream f(out_dir + "/failure_manifest.json");
        f << manifest.dump(2) << "\n";
        std::fprintf(stderr, "experiment finished with failures; see %s/failure_manifest.json\n",
                     out_dir.c_str());
        return 1;
    }
    std::printf("all runs completed; invariant suite clean\n");
    return 0;
}

int cmd_verify_pe(const ExperimentConfig& cfg, int rollouts) {
    UncertainModel m = cfg.model();
    const VPolytope theta_verts = to_vertices(HPolytope(cfg.M_theta, cfg.mu0));
    auto w_draw = [&cfg](RngStream& rng) { return draw_disturbance(cfg, rng); };
    std::function<Eigen::VectorXd(RngStream&)> s_draw = [&cfg](RngStream& rng) {
        return draw_noise(cfg, rng);
    };

    auto with_noise = verify_expected_pe(m, cfg.theta_star, cfg.N_u, rollouts, cfg.master_seed,
                                         w_draw, &s_draw, Eigen::VectorXd::Zero(cfg.nx()));
    auto without_noise = verify_expected_pe(m, cfg.theta_star, cfg.N_u, rollouts, cfg.master_seed,
                                            w_draw, nullptr, Eigen::VectorXd::Zero(cfg.nx()));
    std::printf("expected PE (u = Kx + s): lambda_min %.4e  CI [%.4e, %.4e]  (%d rollouts)\n",
                with_noise.lambda_min, with_noise.ci_low, with_noise.ci_high, rollouts);
    std::printf("expected PE (u = Kx):     lambda_min %.4e  CI [%.4e, %.4e]\n",
                without_noise.lambda_min, without_noise.ci_low, without_noise.ci_high);

    auto c = pe_constants(m, theta_verts, cfg.N_u);
    std::printf("constants: eps_s %.4e  eps_B %.4e  sigma %.4e  eps_phi %.4e\n", c.eps_s, c.eps_B,
                c.sigma, c.eps_phi);
    return with_noise.ci_low > 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Robust adaptive MPC with persistent-excitation constraints"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs/experiment", profile, controller = "alg1";
    std::string controllers_csv = "alg1,alg2,noisyK";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int seeds = 0, rollouts = 10000;
    bool force = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config JSON");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--seed", seed, "master seed")->each([&](const std::string&) {
            seed_set = true;
        });
        cmd->add_option("--profile", profile, "desk or paper profile");
    };

    auto* check = app.add_subcommand("check-assumptions", "verify the standing assumptions");
    add_common(check);

    auto* synth = app.add_subcommand("synth", "synthesize terminal set and cost");
    add_common(synth);

    auto* run = app.add_subcommand("run", "run the closed-loop experiment");
    add_common(run);
    run->add_option("--controller", controller, "alg1, alg2 or noisyK");
    run->add_option("--seeds", seeds, "number of disturbance sequences");
    run->add_flag("--force", force, "skip the assumption preflight");

    auto* compare = app.add_subcommand("compare", "run several controllers on shared streams");
    add_common(compare);
    compare->add_option("--controllers", controllers_csv, "comma-separated controller list");
    compare->add_option("--seeds", seeds, "number of disturbance sequences");
    compare->add_flag("--force", force, "skip the assumption preflight");

    auto* verify = app.add_subcommand("verify-pe", "Monte-Carlo check of the expected PE bound");
    add_common(verify);
    verify->add_option("--rollouts", rollouts, "number of rollouts");

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = load_config(config_path, profile, seed, seed_set, seeds);
        if (check->parsed()) return cmd_check_assumptions(cfg, out_dir);
        if (synth->parsed()) return cmd_synth(cfg, out_dir);
        if (run->parsed()) return cmd_run(cfg, {controller}, out_dir, force);
        if (compare->parsed()) {
            std::vector<std::string> names;
            std::stringstream ss(controllers_csv);
            std::string item;
            while (std::getline(ss, item, ',')) names.push_back(item);
            return cmd_run(cfg, names, out_dir, force);
        }
        if (verify->parsed()) return cmd_verify_pe(cfg, rollouts);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
