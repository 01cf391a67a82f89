#include "peampc/excitation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "peampc/conic.hpp"
#include "peampc/errors.hpp"

namespace peampc {

namespace {

double lambda_min(const Eigen::MatrixXd& M) {
    if (M.rows() == 1) return M(0, 0);
    if (M.rows() == 2) {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es2;
        es2.computeDirect(Eigen::Matrix2d(M), Eigen::EigenvaluesOnly);
        return es2.eigenvalues().minCoeff();
    }
    if (M.rows() == 3) {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es3;
        es3.computeDirect(Eigen::Matrix3d(M), Eigen::EigenvaluesOnly);
        return es3.eigenvalues().minCoeff();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

Eigen::MatrixXd sym2(const Eigen::MatrixXd& M) { return M + M.transpose(); }

} // namespace

void HistoryBuffer::push(Eigen::VectorXd x, Eigen::VectorXd u, Eigen::MatrixXd gram) {
    xs_.push_back(std::move(x));
    us_.push_back(std::move(u));
    grams_.push_back(std::move(gram));
    ++next_time_;
    while (static_cast<int>(grams_.size()) > capacity_) {
        grams_.pop_front();
        xs_.pop_front();
        us_.pop_front();
    }
}

const Eigen::MatrixXd& HistoryBuffer::gram_at(int abs_time) const {
    if (!has(abs_time)) throw ContractViolation("history does not cover the requested time");
    return grams_[abs_time - earliest_time()];
}

const Eigen::VectorXd& HistoryBuffer::state_at(int abs_time) const {
    if (!has(abs_time)) throw ContractViolation("history does not cover the requested time");
    return xs_[abs_time - earliest_time()];
}

const Eigen::VectorXd& HistoryBuffer::input_at(int abs_time) const {
    if (!has(abs_time)) throw ContractViolation("history does not cover the requested time");
    return us_[abs_time - earliest_time()];
}

Eigen::MatrixXd pe_matrix(const UncertainModel& m,
                          const std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>>& pairs) {
    if (pairs.empty()) throw ContractViolation("pe_matrix needs at least one (x, u) pair");
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(m.np(), m.np());
    for (const auto& [x, u] : pairs) {
        const Eigen::MatrixXd Phi = regressor(m, x, u);
        sum += Phi.transpose() * Phi;
    }
    return 0.5 * (sum + sum.transpose());
}

std::optional<double> closed_loop_epsilon(const HistoryBuffer& history, int t, int N_u) {
    if (!history.has(t) || !history.has(t - N_u + 1)) return std::nullopt;
    Eigen::MatrixXd sum = history.gram_at(t);
    for (int k = t - N_u + 1; k < t; ++k) sum += history.gram_at(k);
    return lambda_min(sum);
}

Eigen::MatrixXd window_history_gram(const HistoryBuffer& history, int t, int kappa, int p) {
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(p, p);
    for (int k = kappa; k < 0; ++k) sum += history.gram_at(t + k);
    return sum;
}

PeVertexBound pe_vertex_bound(const UncertainModel& m, const Eigen::VectorXd& xhat,
                              const Eigen::VectorXd& uhat, const Eigen::VectorXd& vhat,
                              const Eigen::VectorXd& vertex, bool fixed,
                              const Eigen::VectorXd* fixed_q) {
    const Eigen::MatrixXd PhiHat = regressor(m, xhat, uhat);
    PeVertexBound out;
    auto cross = [&](const Eigen::VectorXd& dx, const Eigen::VectorXd& du) {
        return sym2(PhiHat.transpose() * regressor(m, dx, du));
    };
    if (fixed) {
        const Eigen::VectorXd dx = vertex - xhat;
        Eigen::VectorXd dq = Eigen::VectorXd::Zero(m.nu());
        if (fixed_q != nullptr) dq = *fixed_q - vhat;
        out.constant = PhiHat.transpose() * PhiHat + cross(dx, m.K * dx + dq);
        return out;
    }
    // Variable case: dx = z + alpha * vertex - xhat, dq = v - vhat.
    const Eigen::VectorXd zero_x = Eigen::VectorXd::Zero(m.nx());
    out.constant =
        PhiHat.transpose() * PhiHat + cross(-xhat, m.K * (-xhat) - vhat);
    out.coef_z.resize(m.nx());
    for (int j = 0; j < m.nx(); ++j) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(m.nx());
        e[j] = 1.0;
        out.coef_z[j] = cross(e, m.K * e);
    }
    out.coef_alpha = cross(vertex, m.K * vertex);
    out.coef_v.resize(m.nu());
    for (int j = 0; j < m.nu(); ++j) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(m.nu());
        e[j] = 1.0;
        out.coef_v[j] = cross(zero_x, e);
    }
    return out;
}

ReferenceBetaResult reference_beta_prime(const UncertainModel& m, const PEWindowLayout& layout,
                                         const HistoryBuffer& history,
                                         const std::vector<Eigen::VectorXd>& xhat,
                                         const std::vector<Eigen::VectorXd>& uhat,
                                         const std::vector<VPolytope>& fixed_cross_sections) {
    const int p = m.np();
    const auto starts = layout.window_starts();
    const int n_w = static_cast<int>(starts.size());
    const int k_max = layout.N + layout.N_u - 2;
    ReferenceBetaResult res;
    res.beta_hat_per_window.resize(n_w);

    std::vector<Eigen::MatrixXd> hists(n_w);
    for (int wi = 0; wi < n_w; ++wi)
        hists[wi] = window_history_gram(history, layout.t, starts[wi], p);

    // References below solver precision make the bounds collapse to M <= 0;
    // treat them as exactly zero (their maximum is the history alone). This
    // also sidesteps empty-interior SDPs at exact equilibria.
    const auto ref_norm = [&](int k_lo, int k_hi) {
        double n = 0.0;
        for (int k = std::max(0, k_lo); k <= k_hi; ++k)
            n += regressor(m, xhat.at(k), uhat.at(k)).norm();
        return n;
    };
    const bool all_zero = ref_norm(0, k_max) <= 1e-8;

    // Stage 1: per-window maxima.
    for (int wi = 0; wi < n_w; ++wi) {
        const int kappa = starts[wi];
        const int k_lo = std::max(0, kappa);
        const int k_hi = kappa + layout.N_u - 1;
        if (k_hi < 0 || all_zero || ref_norm(k_lo, k_hi) <= 1e-8) {
            res.beta_hat_per_window[wi] = lambda_min(hists[wi]);
            continue;
        }
        ConicProgram prog;
        const int beta = prog.add_scalar("beta");
        prog.add_objective_linear(beta, -1.0);
        std::vector<std::string> m_names;
        for (int k = k_lo; k <= k_hi; ++k) {
            m_names.push_back("M" + std::to_string(k));
            prog.add_symmetric(m_names.back(), p);
        }
        {
            ConicProgram::PsdBlock window;
            window.constant = hists[wi];
            for (const auto& name : m_names)
                ConicProgram::add_symmetric_block_terms(window, prog.block(name), 1.0);
            window.terms.push_back({beta, -Eigen::MatrixXd::Identity(p, p)});
            prog.add_psd_block(std::move(window));
        }
        for (int k = k_lo; k <= k_hi; ++k) {
            const auto& cs = fixed_cross_sections.at(k);
            for (int j = 0; j < cs.count(); ++j) {
                PeVertexBound bound =
                    pe_vertex_bound(m, xhat.at(k), uhat.at(k), Eigen::VectorXd::Zero(m.nu()),
                                    cs.vertex(j), /*fixed=*/true);
                ConicProgram::PsdBlock blk;
                blk.constant = bound.constant;
                ConicProgram::add_symmetric_block_terms(blk, prog.block(m_names[k - k_lo]), -1.0);
                prog.add_psd_block(std::move(blk));
            }
        }
        auto out = solve(prog);
        if (out.status != SolveStatus::Optimal)
            throw SolverError("reference PE coefficient SDP failed (" + to_string(out.status) +
                              "): " + out.diagnostics + "\nprogram: " + prog.to_json());
        res.beta_hat_per_window[wi] = out.x[beta];
    }

    if (all_zero) {
        res.beta_hat = res.beta_hat_per_window;
        return res;
    }

    // Stage 2: one joint SDP over shared M blocks. Maximizes the worst
    // shortfall against the per-window maxima and returns the per-window
    // values the shared witness actually attains.
    ConicProgram prog;
    const int tvar = prog.add_scalar("t");
    const int beta0 = prog.add_vector("beta", n_w);
    prog.add_objective_linear(tvar, -1.0);
    std::vector<std::string> m_names(k_max + 1);
    for (int k = 0; k <= k_max; ++k) {
        m_names[k] = "M" + std::to_string(k);
        prog.add_symmetric(m_names[k], p);
    }
    for (int wi = 0; wi < n_w; ++wi) {
        const int kappa = starts[wi];
        ConicProgram::PsdBlock window;
        window.constant = hists[wi];
        for (int k = std::max(0, kappa); k <= kappa + layout.N_u - 1; ++k)
            ConicProgram::add_symmetric_block_terms(window, prog.block(m_names[k]), 1.0);
        window.terms.push_back({beta0 + wi, -Eigen::MatrixXd::Identity(p, p)});
        prog.add_psd_block(std::move(window));
        ConicProgram::LinearRow row; // beta_wi >= per-window max + t
        row.idx = {beta0 + wi, tvar};
        row.coef = {-1.0, 1.0};
        row.rhs = -res.beta_hat_per_window[wi];
        prog.add_inequality(std::move(row));
    }
    for (int k = 0; k <= k_max; ++k) {
        const auto& cs = fixed_cross_sections.at(k);
        for (int j = 0; j < cs.count(); ++j) {
            PeVertexBound bound = pe_vertex_bound(m, xhat.at(k), uhat.at(k),
                                                  Eigen::VectorXd::Zero(m.nu()), cs.vertex(j),
                                                  /*fixed=*/true);
            ConicProgram::PsdBlock blk;
            blk.constant = bound.constant;
            ConicProgram::add_symmetric_block_terms(blk, prog.block(m_names[k]), -1.0);
            prog.add_psd_block(std::move(blk));
        }
    }
    {
        ConicProgram::LinearRow cap; // keeps the objective bounded
        cap.idx = {tvar};
        cap.coef = {1.0};
        cap.rhs = 1.0;
        prog.add_inequality(std::move(cap));
    }
    auto out = solve(prog);
    if (out.status != SolveStatus::Optimal)
        throw SolverError("joint reference PE SDP failed (" + to_string(out.status) +
                          "): " + out.diagnostics);
    for (int k = 0; k <= k_max; ++k) res.M[k] = prog.block_matrix(out.x, m_names[k]);
    res.beta_hat.resize(n_w);
    for (int wi = 0; wi < n_w; ++wi) {
        Eigen::MatrixXd sum = hists[wi];
        for (int k = std::max(0, starts[wi]); k <= starts[wi] + layout.N_u - 1; ++k)
            sum += res.M.at(k);
        // The value the witness attains, capped by the per-window maximum.
        res.beta_hat[wi] = std::min(lambda_min(sum), res.beta_hat_per_window[wi]);
    }
    return res;
}

SampledBetas sampled_betas(const UncertainModel& m, const PEWindowLayout& layout,
                           const HistoryBuffer& history,
                           const std::vector<VPolytope>& tube_current,
                           const std::vector<VPolytope>& tube_reference,
                           const std::vector<Eigen::VectorXd>& v_opt,
                           const std::vector<Eigen::VectorXd>& v_hat,
                           const std::vector<Eigen::VectorXd>& s_seq, int N_s,
                           std::uint64_t seed, std::size_t combination_cap,
                           const SampleProvider* provider) {
    if (N_s < 1) throw ContractViolation("N_s must be at least 1");
    const int p = m.np();
    const int horizon = layout.N + layout.N_u;
    const auto starts = layout.window_starts();

    // Draw the per-step sample points first. When the two tubes share a
    // cross-section (the terminal segments are the same set), the same points
    // serve both estimators, so identical tail terms cancel in the comparison
    // instead of injecting independent sampling noise. Singleton sections
    // collapse to one sample.
    std::vector<std::vector<Eigen::VectorXd>> pts_cur(horizon), pts_ref(horizon);
    for (int k = 0; k < horizon - 1; ++k) {
        const VPolytope& cur = tube_current.at(k);
        const VPolytope& ref = tube_reference.at(k);
        auto draw = [&](const VPolytope& cs, bool reference) {
            const RngPurpose purpose =
                reference ? RngPurpose::ReferenceTubeSampling : RngPurpose::TubeSampling;
            std::vector<Eigen::VectorXd> samples;
            if (provider != nullptr) {
                samples = (*provider)(cs, k, reference);
            } else if (cs.count() == 1) {
                samples.push_back(cs.vertex(0));
            } else {
                const std::uint64_t sk =
                    RngStream::keyed(seed, static_cast<std::uint64_t>(purpose), k, purpose)
                        .next_u64();
                samples = sample_uniform(cs, N_s, sk);
            }
            return samples;
        };
        pts_cur[k] = draw(cur, false);
        const bool same_set = cur.vertices.rows() == ref.vertices.rows() &&
                              cur.vertices.isApprox(ref.vertices, 1e-12);
        pts_ref[k] = same_set ? pts_cur[k] : draw(ref, true);
    }
    auto products = [&](const std::vector<std::vector<Eigen::VectorXd>>& pts,
                        const std::vector<Eigen::VectorXd>& v) {
        std::vector<std::vector<Eigen::MatrixXd>> psi(horizon);
        for (int k = 0; k < horizon - 1; ++k) {
            const Eigen::VectorXd q = k < layout.N ? v.at(k) : s_seq.at(k);
            for (const auto& x : pts[k]) {
                const Eigen::MatrixXd Phi = regressor(m, x, m.K * x + q);
                psi[k].push_back(Phi.transpose() * Phi);
            }
        }
        return psi;
    };
    const auto psi_cur = products(pts_cur, v_opt);
    const auto psi_ref = products(pts_ref, v_hat);

    auto window_min = [&](const std::vector<std::vector<Eigen::MatrixXd>>& psi, int kappa) {
        const Eigen::MatrixXd hist = window_history_gram(history, layout.t, kappa, p);
        const int k_lo = std::max(0, kappa);
        const int k_hi = kappa + layout.N_u - 1;
        if (k_hi < 0) return lambda_min(hist);
        std::size_t combos = 1;
        for (int k = k_lo; k <= k_hi; ++k) {
            combos *= psi[k].size();
            if (combos > combination_cap)
                throw ConfigError("sampled PE check would enumerate more than the combination cap");
        }
        double best = std::numeric_limits<double>::infinity();
        // Depth-first over sample index combinations with running sums.
        std::function<void(int, const Eigen::MatrixXd&)> rec = [&](int k,
                                                                   const Eigen::MatrixXd& sum) {
            if (k > k_hi) {
                best = std::min(best, lambda_min(sum));
                return;
            }
            for (const auto& Psi : psi[k]) rec(k + 1, sum + Psi);
        };
        rec(k_lo, hist);
        return best;
    };

    SampledBetas out;
    out.beta_s.resize(starts.size());
    out.beta_hat_s.resize(starts.size());
    for (size_t wi = 0; wi < starts.size(); ++wi) {
        out.beta_s[wi] = window_min(psi_cur, starts[wi]);
        out.beta_hat_s[wi] = window_min(psi_ref, starts[wi]);
    }
    return out;
}

PosteriorDecision posterior_check(const SampledBetas& betas) {
    PosteriorDecision d;
    for (int i = 0; i < betas.beta_s.size(); ++i) {
        if (betas.beta_s[i] < betas.beta_hat_s[i]) {
            d.accept = false;
            d.first_failing_window = i;
            return d;
        }
    }
    return d;
}

ExpectedPeEstimate verify_expected_pe(const UncertainModel& m, const Eigen::VectorXd& theta_star,
                                      int N_u, int rollouts, std::uint64_t seed,
                                      const std::function<Eigen::VectorXd(RngStream&)>& w_draw,
                                      const std::function<Eigen::VectorXd(RngStream&)>* s_draw,
                                      const Eigen::VectorXd& x_start) {
    if (N_u <= m.nx()) throw ContractViolation("PE window N_u must exceed the state dimension");
    std::vector<Eigen::MatrixXd> grams;
    grams.reserve(rollouts);
    for (int r = 0; r < rollouts; ++r) {
        RngStream rng = RngStream::keyed(seed, r, 0, RngPurpose::Rollout);
        Eigen::VectorXd x = x_start;
        Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(m.np(), m.np());
        for (int k = 0; k < N_u; ++k) {
            Eigen::VectorXd u = m.K * x;
            if (s_draw != nullptr) u += (*s_draw)(rng);
            const Eigen::MatrixXd Phi = regressor(m, x, u);
            sum += Phi.transpose() * Phi;
            x = m.A_of(theta_star) * x + m.B_of(theta_star) * u + m.F * w_draw(rng);
        }
        grams.push_back(sum);
    }
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(m.np(), m.np());
    for (const auto& g : grams) mean += g;
    mean /= rollouts;

    ExpectedPeEstimate est;
    est.rollouts = rollouts;
    est.lambda_min = lambda_min(mean);

    const int B = 1000;
    std::vector<double> boot(B);
    RngStream brng = RngStream::keyed(seed, 0, 0, RngPurpose::Bootstrap);
    for (int b = 0; b < B; ++b) {
        Eigen::MatrixXd bm = Eigen::MatrixXd::Zero(m.np(), m.np());
        for (int r = 0; r < rollouts; ++r) bm += grams[brng.next_below(rollouts)];
        boot[b] = lambda_min(bm / rollouts);
    }
    std::sort(boot.begin(), boot.end());
    est.ci_low = boot[static_cast<int>(0.025 * B)];
    est.ci_high = boot[static_cast<int>(0.975 * B) - 1];
    return est;
}

PeConstants pe_constants(const UncertainModel& m, const VPolytope& theta_vertices, int N_u) {
    if (N_u <= m.nx()) throw ContractViolation("PE window N_u must exceed the state dimension");
    PeConstants c;
    // eps_s: smallest eigenvalue of E[s s'] for s uniform on the box S.
    const auto box = axis_box(m.S);
    if (!box) throw UnsupportedShapeError("noise covariance bound requires a box-shaped S");
    double eps_s = std::numeric_limits<double>::infinity();
    for (int j = 0; j < m.nu(); ++j) {
        const double side = box->second[j] - box->first[j];
        eps_s = std::min(eps_s, side * side / 12.0);
    }
    c.eps_s = eps_s;

    // eps_B over the parameter vertices.
    double eps_B = std::numeric_limits<double>::infinity();
    for (int v = 0; v < theta_vertices.count(); ++v) {
        const Eigen::VectorXd theta = theta_vertices.vertex(v);
        const Eigen::MatrixXd Ak = m.A_K(theta);
        const Eigen::MatrixXd Bm = m.B_of(theta);
        Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(m.nx(), m.nx());
        Eigen::MatrixXd Apow = Eigen::MatrixXd::Identity(m.nx(), m.nx());
        for (int j = 0; j < m.nx(); ++j) {
            gram += Apow * Bm * Bm.transpose() * Apow.transpose();
            Apow = Ak * Apow;
        }
        eps_B = std::min(eps_B, lambda_min(gram));
    }
    c.eps_B = eps_B;

    const double epsB_w = std::sqrt(std::max(0.0, (N_u - m.nx()) * eps_B));
    const int rows = m.nx() * m.nx() + m.nx() * m.nu();
    Eigen::MatrixXd M(rows, m.np());
    for (int i = 0; i < m.np(); ++i) {
        const Eigen::MatrixXd Aki = m.A_K_term(i + 1);
        Eigen::VectorXd col(rows);
        col.head(m.nx() * m.nx()) =
            epsB_w * Eigen::Map<const Eigen::VectorXd>(Aki.data(), m.nx() * m.nx());
        col.tail(m.nx() * m.nu()) =
            std::sqrt(static_cast<double>(N_u)) *
            Eigen::Map<const Eigen::VectorXd>(m.B[i + 1].data(), m.nx() * m.nu());
        M.col(i) = col;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    c.sigma = svd.singularValues().minCoeff();
    c.eps_phi = c.eps_s * c.sigma * c.sigma;
    return c;
}

} // namespace peampc
