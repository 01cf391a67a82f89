#include "peampc/controller.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "peampc/errors.hpp"

namespace peampc {

namespace {

double lambda_min(const Eigen::MatrixXd& M) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()),
                                                      Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

double support_over_vertices(const Eigen::RowVectorXd& a, const VPolytope& V) {
    return (V.vertices * a.transpose()).maxCoeff();
}

Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& A, Eigen::VectorXd& b) {
    Eigen::MatrixXd out = A;
    for (int r = 0; r < out.rows(); ++r) {
        const double n = out.row(r).norm();
        if (n > 1e-14) {
            out.row(r) /= n;
            b[r] /= n;
        }
    }
    return out;
}

HPolytope remove_redundant_rows(const HPolytope& P, double tol) {
    Eigen::VectorXd b = P.offsets;
    Eigen::MatrixXd A = normalize_rows(P.normals, b);
    const int m = static_cast<int>(A.rows());
    std::vector<bool> keep(m, true);
    // Merge near-identical normals, keeping the tightest offset.
    for (int i = 0; i < m; ++i) {
        if (!keep[i]) continue;
        for (int j = i + 1; j < m; ++j) {
            if (!keep[j]) continue;
            if ((A.row(i) - A.row(j)).norm() < 1e-9) {
                if (b[j] < b[i]) b[i] = b[j];
                keep[j] = false;
            }
        }
    }
    for (int i = 0; i < m; ++i) {
        if (!keep[i]) continue;
        std::vector<int> others;
        for (int j = 0; j < m; ++j)
            if (keep[j] && j != i) others.push_back(j);
        if (others.empty()) continue;
        Eigen::MatrixXd Ao(others.size(), A.cols());
        Eigen::VectorXd bo(others.size());
        for (size_t k = 0; k < others.size(); ++k) {
            Ao.row(k) = A.row(others[k]);
            bo[k] = b[others[k]];
        }
        try {
            if (support(HPolytope(Ao, bo), A.row(i).transpose()) <= b[i] + tol) keep[i] = false;
        } catch (const UnboundedError&) {
            // Dropping this row would unbound the set; definitely keep it.
        }
    }
    std::vector<int> rows;
    for (int i = 0; i < m; ++i)
        if (keep[i]) rows.push_back(i);
    Eigen::MatrixXd Ak(rows.size(), A.cols());
    Eigen::VectorXd bk(rows.size());
    for (size_t k = 0; k < rows.size(); ++k) {
        Ak.row(k) = A.row(rows[k]);
        bk[k] = b[rows[k]];
    }
    return HPolytope(Ak, bk);
}

} // namespace

HPolytope synth_terminal_set(const UncertainModel& m, const HPolytope& X, const HPolytope& U,
                             const VPolytope& theta_vertices, const TerminalSynthOptions& opts) {
    const int nx = m.nx();
    const VPolytope s_verts = to_vertices(m.S);
    const VPolytope w_verts = to_vertices(m.W);
    const VPolytope fw_verts = affine_map(w_verts, m.F, Eigen::VectorXd::Zero(nx));

    // Base set: X, input admissibility of the terminal law, compactness box.
    const int base_rows = X.rows() + U.rows() + 2 * nx;
    Eigen::MatrixXd A(base_rows, nx);
    Eigen::VectorXd b(base_rows);
    A.topRows(X.rows()) = X.normals;
    b.head(X.rows()) = X.offsets;
    for (int i = 0; i < U.rows(); ++i) {
        A.row(X.rows() + i) = U.normals.row(i) * m.K;
        b[X.rows() + i] =
            U.offsets[i] - support_over_vertices(U.normals.row(i), s_verts);
    }
    const HPolytope box = HPolytope::inf_ball(nx, opts.bound_radius);
    A.bottomRows(2 * nx) = box.normals;
    b.tail(2 * nx) = box.offsets;

    HPolytope T = remove_redundant_rows(HPolytope(A, b), 1e-9);
    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        if (is_empty(T))
            throw SynthesisError("terminal set iteration became empty; constraints too tight");
        // One-step robust preimage rows over all parameter vertices.
        const int r = T.rows();
        Eigen::MatrixXd Ap(r * theta_vertices.count(), nx);
        Eigen::VectorXd bp(r * theta_vertices.count());
        int at = 0;
        for (int v = 0; v < theta_vertices.count(); ++v) {
            const Eigen::VectorXd theta = theta_vertices.vertex(v);
            const Eigen::MatrixXd Ak = m.A_K(theta);
            const VPolytope bs_verts =
                affine_map(s_verts, m.B_of(theta), Eigen::VectorXd::Zero(nx));
            for (int i = 0; i < r; ++i) {
                Ap.row(at) = T.normals.row(i) * Ak;
                bp[at] = T.offsets[i] -
                         support_over_vertices(T.normals.row(i), bs_verts) -
                         support_over_vertices(T.normals.row(i), fw_verts);
                ++at;
            }
        }
        const HPolytope pre(Ap, bp);
        // Fixed point when the current iterate already lies inside its preimage.
        const VPolytope T_verts = to_vertices(T);
        if (contains(pre, T_verts, opts.tol)) return T;

        Eigen::MatrixXd An(T.rows() + pre.rows(), nx);
        Eigen::VectorXd bn(T.rows() + pre.rows());
        An << T.normals, pre.normals;
        bn << T.offsets, pre.offsets;
        T = remove_redundant_rows(HPolytope(An, bn), 1e-9);
    }
    throw SynthesisError("terminal set iteration did not reach a fixed point");
}

Eigen::MatrixXd synth_terminal_cost(const UncertainModel& m, const Eigen::VectorXd& theta_bar,
                                    const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R) {
    const Eigen::MatrixXd Ak = m.A_K(theta_bar);
    const int n = m.nx();
    const Eigen::VectorXcd eigs = Ak.eigenvalues();
    double rho = 0.0;
    for (int i = 0; i < n; ++i) rho = std::max(rho, std::abs(eigs[i]));
    if (rho >= 1.0 - 1e-12)
        throw SynthesisError("terminal cost: closed loop is not Schur stable at theta_bar");
    const Eigen::MatrixXd W = Q + m.K.transpose() * R * m.K;
    // vec(P) - (Ak' (x) Ak') vec(P) = vec(W).
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(n * n, n * n);
    const Eigen::MatrixXd At = Ak.transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            lhs.block(i * n, j * n, n, n) -= At(i, j) * At; // (At (x) At) block form
    Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(W.data(), n * n);
    Eigen::VectorXd vecP = lhs.fullPivLu().solve(rhs);
    Eigen::MatrixXd P = Eigen::Map<const Eigen::MatrixXd>(vecP.data(), n, n);
    return 0.5 * (P + P.transpose());
}

VPolytope TubeSolution::cross_section(int k, const TerminalIngredients& ing) const {
    const int N = static_cast<int>(centers.size());
    if (k == 0) return VPolytope::single(x_t);
    if (k >= N) return ing.X_T_verts;
    Eigen::MatrixXd verts = ing.X_T_verts.vertices * alphas[k];
    verts.rowwise() += centers[k].transpose();
    return VPolytope(verts);
}

std::vector<VPolytope> TubeSolution::cross_sections(int horizon,
                                                    const TerminalIngredients& ing) const {
    std::vector<VPolytope> out;
    out.reserve(horizon);
    for (int k = 0; k < horizon; ++k) out.push_back(cross_section(k, ing));
    return out;
}

ReferenceTrajectory build_reference(const UncertainModel& m, const Eigen::VectorXd& theta_bar,
                                    const Eigen::VectorXd& x_t,
                                    const std::vector<Eigen::VectorXd>& v_prev,
                                    const std::vector<Eigen::VectorXd>& s_seq, int N, int N_u) {
    ReferenceTrajectory ref;
    ref.s = s_seq;
    ref.vhat.resize(N);
    for (int k = 0; k + 1 < N; ++k) ref.vhat[k] = v_prev.at(k + 1);
    ref.vhat[N - 1] = s_seq.at(N - 1);

    const auto [Ab, Bb] = eval_AB(m, theta_bar);
    ref.xhat.resize(N + N_u);
    ref.uhat.resize(N + N_u);
    ref.xhat[0] = x_t;
    for (int k = 0; k < N + N_u; ++k) {
        ref.uhat[k] = m.K * ref.xhat[k] + (k < N ? ref.vhat[k] : s_seq.at(k));
        if (k + 1 < N + N_u) ref.xhat[k + 1] = Ab * ref.xhat[k] + Bb * ref.uhat[k];
    }
    return ref;
}

std::vector<ConicProgram::LinearRow> build_tube_constraints(
    const UncertainModel& m, const VPolytope& theta_vertices, const HPolytope& X,
    const HPolytope& U, const TerminalIngredients& ing, const TubeVarLayout& layout,
    const Eigen::VectorXd& x_t) {
    const int N = layout.N;
    const int nx = layout.nx;
    const int nu = layout.nu;
    const HPolytope& X0 = ing.X_T;
    const VPolytope& X0v = ing.X_T_verts;
    const VPolytope w_verts = to_vertices(m.W);
    std::vector<ConicProgram::LinearRow> rows;

    auto add_term = [](ConicProgram::LinearRow& row, int idx, double c) {
        if (c == 0.0) return;
        row.idx.push_back(idx);
        row.coef.push_back(c);
    };

    for (int k = 0; k < N; ++k) {
        const bool k0 = (k == 0);
        for (int j = 0; j < X0v.count(); ++j) {
            const Eigen::VectorXd vert = X0v.vertex(j);
            // State containment H_X (z_k + alpha_k vert) <= h_X.
            for (int i = 0; i < X.rows(); ++i) {
                ConicProgram::LinearRow row;
                row.rhs = X.offsets[i];
                if (k0) {
                    row.rhs -= X.normals.row(i).dot(x_t);
                } else {
                    for (int c = 0; c < nx; ++c)
                        add_term(row, layout.z_index(k, c), X.normals(i, c));
                    add_term(row, layout.alpha_index(k), X.normals.row(i).dot(vert));
                }
                rows.push_back(std::move(row));
            }
            // Input containment H_U (K (z_k + alpha_k vert) + v_k) <= h_U.
            for (int i = 0; i < U.rows(); ++i) {
                ConicProgram::LinearRow row;
                row.rhs = U.offsets[i];
                const Eigen::RowVectorXd uK = U.normals.row(i) * m.K;
                if (k0) {
                    row.rhs -= uK.dot(x_t);
                } else {
                    for (int c = 0; c < nx; ++c) add_term(row, layout.z_index(k, c), uK[c]);
                    add_term(row, layout.alpha_index(k), uK.dot(vert));
                }
                for (int c = 0; c < nu; ++c)
                    add_term(row, layout.v_index(k, c), U.normals(i, c));
                rows.push_back(std::move(row));
            }
            // Robust recursion into cross-section k+1 (X_T for k = N-1).
            for (int l = 0; l < theta_vertices.count(); ++l) {
                const Eigen::VectorXd theta = theta_vertices.vertex(l);
                const Eigen::MatrixXd Ak = m.A_K(theta);
                const Eigen::MatrixXd Bt = m.B_of(theta);
                for (int wv = 0; wv < w_verts.count(); ++wv) {
                    const Eigen::VectorXd fw = m.F * w_verts.vertex(wv);
                    for (int i = 0; i < X0.rows(); ++i) {
                        ConicProgram::LinearRow row;
                        const Eigen::RowVectorXd aA = X0.normals.row(i) * Ak;
                        row.rhs = -X0.normals.row(i).dot(fw);
                        if (k0) {
                            row.rhs -= aA.dot(x_t);
                        } else {
                            for (int c = 0; c < nx; ++c)
                                add_term(row, layout.z_index(k, c), aA[c]);
                            add_term(row, layout.alpha_index(k), aA.dot(vert));
                        }
                        const Eigen::RowVectorXd aB = X0.normals.row(i) * Bt;
                        for (int c = 0; c < nu; ++c)
                            add_term(row, layout.v_index(k, c), aB[c]);
                        if (k + 1 < N) {
                            for (int c = 0; c < nx; ++c)
                                add_term(row, layout.z_index(k + 1, c), -X0.normals(i, c));
                            add_term(row, layout.alpha_index(k + 1), -X0.offsets[i]);
                        } else {
                            row.rhs += X0.offsets[i]; // successor is X_T itself
                        }
                        rows.push_back(std::move(row));
                    }
                }
            }
        }
    }
    // Nonnegative scalings.
    for (int k = 1; k < N; ++k) {
        ConicProgram::LinearRow row;
        add_term(row, layout.alpha_index(k), -1.0);
        row.rhs = 0.0;
        rows.push_back(std::move(row));
    }
    return rows;
}

NominalCost nominal_cost(const UncertainModel& m, const Eigen::VectorXd& theta_bar,
                         const Eigen::VectorXd& x_t, const TerminalIngredients& ing, int N) {
    const int nx = m.nx();
    const int nu = m.nu();
    const auto [Ab, Bb] = eval_AB(m, theta_bar);
    const Eigen::MatrixXd Ak = Ab + Bb * m.K;

    NominalCost out;
    out.H = Eigen::MatrixXd::Zero(N * nu, N * nu);
    out.g = Eigen::VectorXd::Zero(N * nu);
    out.c0 = 0.0;

    Eigen::MatrixXd E = Eigen::MatrixXd::Zero(nx, N * nu); // xbar_k = base + E v
    Eigen::VectorXd base = x_t;
    for (int k = 0; k < N; ++k) {
        out.H += E.transpose() * ing.Q * E;
        out.g += E.transpose() * ing.Q * base;
        out.c0 += base.dot(ing.Q * base);

        Eigen::MatrixXd Eu = m.K * E;
        Eu.middleCols(k * nu, nu) += Eigen::MatrixXd::Identity(nu, nu);
        const Eigen::VectorXd bu = m.K * base;
        out.H += Eu.transpose() * ing.R * Eu;
        out.g += Eu.transpose() * ing.R * bu;
        out.c0 += bu.dot(ing.R * bu);

        Eigen::MatrixXd Enext = Ak * E;
        Enext.middleCols(k * nu, nu) += Bb;
        E = Enext;
        base = Ak * base;
    }
    out.H += E.transpose() * ing.P * E;
    out.g += E.transpose() * ing.P * base;
    out.c0 += base.dot(ing.P * base);
    out.H = 0.5 * (out.H + out.H.transpose()).eval();
    return out;
}

namespace {

struct TubeProgram {
    ConicProgram prog;
    TubeVarLayout layout;
};

// Collapse rows with identical coefficient patterns to their tightest offset.
// The vertex enumeration in the tube constraints produces many such rows
// (the initial singleton cross-section repeats per tube vertex and the
// disturbance vertices only shift offsets), and duplicated rows both bloat
// and degrade the interior-point solve.
std::vector<ConicProgram::LinearRow> dedupe_rows(std::vector<ConicProgram::LinearRow> rows) {
    struct Key {
        std::vector<std::pair<int, std::uint64_t>> entries;
        bool operator<(const Key& o) const { return entries < o.entries; }
    };
    std::map<Key, double> tightest;
    for (auto& row : rows) {
        std::map<int, double> acc;
        for (size_t i = 0; i < row.idx.size(); ++i) acc[row.idx[i]] += row.coef[i];
        Key key;
        for (const auto& [idx, c] : acc) {
            if (c == 0.0) continue;
            std::uint64_t bits;
            std::memcpy(&bits, &c, sizeof(bits));
            key.entries.emplace_back(idx, bits);
        }
        auto it = tightest.find(key);
        if (it == tightest.end())
            tightest.emplace(std::move(key), row.rhs);
        else
            it->second = std::min(it->second, row.rhs);
    }
    std::vector<ConicProgram::LinearRow> out;
    out.reserve(tightest.size());
    for (const auto& [key, rhs] : tightest) {
        ConicProgram::LinearRow row;
        row.rhs = rhs;
        for (const auto& [idx, bits] : key.entries) {
            double c;
            std::memcpy(&c, &bits, sizeof(c));
            row.idx.push_back(idx);
            row.coef.push_back(c);
        }
        out.push_back(std::move(row));
    }
    return out;
}

TubeProgram build_tube_program(const Eigen::VectorXd& x_t, const UncertainModel& m,
                               const TerminalIngredients& ing, const VPolytope& theta_vertices,
                               const ControllerConfig& cfg, const Eigen::VectorXd& theta_bar,
                               const std::vector<ConicProgram::LinearRow>* prebuilt_rows) {
    TubeProgram tp;
    tp.layout = TubeVarLayout{cfg.N, m.nx(), m.nu()};
    tp.prog.add_vector("v", cfg.N * m.nu());
    if (cfg.N > 1) {
        tp.prog.add_vector("z", (cfg.N - 1) * m.nx());
        tp.prog.add_vector("alpha", cfg.N - 1);
    }
    const NominalCost cost = nominal_cost(m, theta_bar, x_t, ing, cfg.N);
    // J = v'Hv + 2g'v + c0 mapped onto the solver's 0.5 x'Qx + c'x + c0 form.
    for (int i = 0; i < cost.H.rows(); ++i) {
        for (int j = i; j < cost.H.cols(); ++j) {
            const double q = (i == j ? 2.0 : 4.0) * cost.H(i, j);
            if (q != 0.0) tp.prog.add_objective_quadratic(i, j, q);
        }
    }
    for (int i = 0; i < cost.g.size(); ++i)
        if (cost.g[i] != 0.0) tp.prog.add_objective_linear(i, 2.0 * cost.g[i]);
    tp.prog.add_objective_constant(cost.c0);
    if (cfg.tube_regularization > 0.0 && cfg.N > 1) {
        for (int i = tp.layout.z_index(1, 0); i < tp.layout.size(); ++i)
            tp.prog.add_objective_quadratic(i, i, 2.0 * cfg.tube_regularization);
    }

    if (prebuilt_rows != nullptr) {
        for (const auto& row : *prebuilt_rows) tp.prog.add_inequality(row);
    } else {
        for (auto& row : dedupe_rows(
                 build_tube_constraints(m, theta_vertices, cfg.X, cfg.U, ing, tp.layout, x_t)))
            tp.prog.add_inequality(std::move(row));
    }
    return tp;
}

TubeSolution extract_solution(const TubeProgram& tp, const Eigen::VectorXd& x_t,
                              const SolveOutcome& out, int N, int nx, int nu) {
    TubeSolution sol;
    sol.x_t = x_t;
    sol.objective = out.objective;
    sol.iterations = out.iterations;
    sol.solve_seconds = out.solve_seconds;
    sol.centers.resize(N);
    sol.alphas.resize(N);
    sol.v.resize(N);
    sol.centers[0] = x_t;
    sol.alphas[0] = 0.0;
    double vmax = 0.0;
    for (int k = 0; k < N; ++k)
        for (int c = 0; c < nu; ++c)
            vmax = std::max(vmax, std::abs(out.x[tp.layout.v_index(k, c)]));
    // A whole plan below solver precision is noise, not content; zeroing it
    // keeps an exact equilibrium exactly at rest.
    const bool zero_plan = vmax < 1e-7;
    for (int k = 0; k < N; ++k) {
        sol.v[k] = Eigen::VectorXd(nu);
        for (int c = 0; c < nu; ++c)
            sol.v[k][c] = zero_plan ? 0.0 : out.x[tp.layout.v_index(k, c)];
        if (k >= 1) {
            Eigen::VectorXd z(nx);
            for (int c = 0; c < nx; ++c) z[c] = out.x[tp.layout.z_index(k, c)];
            sol.centers[k] = z;
            sol.alphas[k] = std::max(0.0, out.x[tp.layout.alpha_index(k)]);
        }
    }
    return sol;
}

void dump_program(const ConicProgram& prog, const std::string& dir, const std::string& name) {
    if (dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    std::ofstream f(dir + "/" + name);
    f << prog.to_json();
}

} // namespace

TubeSolution solve_P0(const Eigen::VectorXd& x0, const UncertainModel& m,
                      const TerminalIngredients& ing, const VPolytope& theta_vertices,
                      const ControllerConfig& cfg, const Eigen::VectorXd& theta_bar,
                      const std::vector<ConicProgram::LinearRow>* prebuilt_rows) {
    TubeProgram tp = build_tube_program(x0, m, ing, theta_vertices, cfg, theta_bar, prebuilt_rows);
    SolveOutcome out = solve(tp.prog, cfg.solver);
    if (out.status == SolveStatus::Infeasible)
        throw InfeasibleError("initial state is outside the feasible region of the tube program");
    if (out.status != SolveStatus::Optimal) {
        dump_program(tp.prog, cfg.dump_dir, "P0_failure.json");
        throw SolverError("tube QP failed (" + to_string(out.status) + "): " + out.diagnostics);
    }
    return extract_solution(tp, x0, out, cfg.N, m.nx(), m.nu());
}

TubeSolution solve_Pgt0(const Eigen::VectorXd& x_t, const UncertainModel& m,
                        const TerminalIngredients& ing, const VPolytope& theta_vertices,
                        const ControllerConfig& cfg, const Eigen::VectorXd& theta_bar,
                        const ReferenceTrajectory& ref, const Eigen::VectorXd& beta_hat,
                        const PEWindowLayout& layout, const HistoryBuffer& history,
                        const std::vector<ConicProgram::LinearRow>* prebuilt_rows) {
    const int p = m.np();
    const int N = cfg.N;
    const int N_u = cfg.N_u;
    const auto starts = layout.window_starts();

    // Exact-equilibrium degeneracy: a zero reference collapses every vertex
    // bound to M <= 0, making the PE constraints independent of the decisions
    // and attaining beta_hat with M = 0. Solve the plain tube program then.
    {
        double ref_norm = 0.0;
        for (int k = 0; k <= N + N_u - 2; ++k)
            ref_norm += regressor(m, ref.xhat[k], ref.uhat[k]).norm();
        if (ref_norm <= 1e-8) {
            TubeSolution sol = solve_P0(x_t, m, ing, theta_vertices, cfg, theta_bar, prebuilt_rows);
            sol.beta_prime = beta_hat;
            return sol;
        }
    }

    TubeProgram tp =
        build_tube_program(x_t, m, ing, theta_vertices, cfg, theta_bar, prebuilt_rows);

    std::vector<std::string> m_names(N + N_u - 1);
    for (int k = 0; k <= N + N_u - 2; ++k) {
        m_names[k] = "M" + std::to_string(k);
        tp.prog.add_symmetric(m_names[k], p);
    }
    const int beta0 = tp.prog.add_vector("beta", static_cast<int>(starts.size()));

    // Window constraints (historical Gram + sum of M blocks >= beta' I).
    for (size_t wi = 0; wi < starts.size(); ++wi) {
        const int kappa = starts[wi];
        ConicProgram::PsdBlock blk;
        blk.constant = window_history_gram(history, layout.t, kappa, p);
        for (int k = std::max(0, kappa); k <= kappa + N_u - 1; ++k)
            ConicProgram::add_symmetric_block_terms(blk, tp.prog.block(m_names[k]), 1.0);
        blk.terms.push_back({beta0 + static_cast<int>(wi),
                             -Eigen::MatrixXd::Identity(p, p)});
        tp.prog.add_psd_block(std::move(blk));
        // beta'_kappa >= beta_hat_kappa.
        ConicProgram::LinearRow row;
        row.idx = {beta0 + static_cast<int>(wi)};
        row.coef = {-1.0};
        row.rhs = -beta_hat[wi];
        tp.prog.add_inequality(std::move(row));
    }

    // Vertex linearization bounds on each M_k.
    for (int k = 0; k <= N + N_u - 2; ++k) {
        if (k == 0) {
            // Cross-section is {x_t}; only v_0 stays free.
            PeVertexBound b = pe_vertex_bound(m, ref.xhat[0], ref.uhat[0], ref.vhat[0],
                                              Eigen::VectorXd::Zero(m.nx()), false);
            ConicProgram::PsdBlock blk;
            blk.constant = b.constant;
            for (int c = 0; c < m.nx(); ++c) blk.constant += x_t[c] * b.coef_z[c];
            for (int c = 0; c < m.nu(); ++c)
                blk.terms.push_back({tp.layout.v_index(0, c), b.coef_v[c]});
            ConicProgram::add_symmetric_block_terms(blk, tp.prog.block(m_names[0]), -1.0);
            tp.prog.add_psd_block(std::move(blk));
        } else if (k < N) {
            for (int j = 0; j < ing.X_T_verts.count(); ++j) {
                PeVertexBound b = pe_vertex_bound(m, ref.xhat[k], ref.uhat[k], ref.vhat[k],
                                                  ing.X_T_verts.vertex(j), false);
                ConicProgram::PsdBlock blk;
                blk.constant = b.constant;
                for (int c = 0; c < m.nx(); ++c)
                    blk.terms.push_back({tp.layout.z_index(k, c), b.coef_z[c]});
                blk.terms.push_back({tp.layout.alpha_index(k), b.coef_alpha});
                for (int c = 0; c < m.nu(); ++c)
                    blk.terms.push_back({tp.layout.v_index(k, c), b.coef_v[c]});
                ConicProgram::add_symmetric_block_terms(blk, tp.prog.block(m_names[k]), -1.0);
                tp.prog.add_psd_block(std::move(blk));
            }
        } else {
            for (int j = 0; j < ing.X_T_verts.count(); ++j) {
                PeVertexBound b = pe_vertex_bound(m, ref.xhat[k], ref.uhat[k], ref.s[k],
                                                  ing.X_T_verts.vertex(j), true);
                ConicProgram::PsdBlock blk;
                blk.constant = b.constant;
                ConicProgram::add_symmetric_block_terms(blk, tp.prog.block(m_names[k]), -1.0);
                tp.prog.add_psd_block(std::move(blk));
            }
        }
    }

    SolveOutcome out = solve(tp.prog, cfg.solver);
    if (out.status == SolveStatus::Infeasible) {
        dump_program(tp.prog, cfg.dump_dir, "Pgt0_infeasible_t" + std::to_string(layout.t) + ".json");
        throw InfeasibleError(
            "PE-constrained tube program infeasible at t=" + std::to_string(layout.t) +
            " (recursive feasibility breach)");
    }
    if (out.status != SolveStatus::Optimal) {
        dump_program(tp.prog, cfg.dump_dir, "Pgt0_failure_t" + std::to_string(layout.t) + ".json");
        throw SolverError("PE-constrained tube program failed (" + to_string(out.status) +
                          "): " + out.diagnostics);
    }
    TubeSolution sol = extract_solution(tp, x_t, out, N, m.nx(), m.nu());
    sol.beta_prime = out.x.segment(beta0, starts.size());
    return sol;
}

AdaptiveController::AdaptiveController(UncertainModel model, TerminalIngredients ingredients,
                                       ControllerConfig config, ParamSetEstimate theta0,
                                       bool use_pe_constraints,
                                       std::function<std::vector<Eigen::VectorXd>(int)> noise_source)
    : model_(std::move(model)),
      ing_(std::move(ingredients)),
      cfg_(std::move(config)),
      use_pe_(use_pe_constraints),
      noise_source_(std::move(noise_source)),
      theta_(std::move(theta0)),
      fw_(disturbance_image(model_)),
      window_(cfg_.N_mu),
      history_(cfg_.N_u + 1) {
    // Nominal parameter starts at the center of the initial box.
    const auto box = axis_box(theta_.polytope());
    if (box) {
        theta_bar_ = 0.5 * (box->first + box->second);
    } else {
        theta_bar_ = to_vertices(theta_.polytope()).vertices.colwise().mean().transpose();
    }
    ing_.P = synth_terminal_cost(model_, theta_bar_, ing_.Q, ing_.R);
}

Eigen::VectorXd AdaptiveController::initialize(const Eigen::VectorXd& x0) {
    diag_ = StepDiagnostics{};
    diag_.t = 0;
    const VPolytope theta_verts = to_vertices(theta_.polytope());
    solution_ = solve_P0(x0, model_, ing_, theta_verts, cfg_, theta_bar_);
    solution_sections_ = solution_.cross_sections(cfg_.N + cfg_.N_u, ing_);
    diag_.objective = solution_.objective;
    diag_.solver_status = "optimal";
    diag_.solver_iterations = solution_.iterations;
    diag_.solve_seconds = solution_.solve_seconds;

    const Eigen::VectorXd u = model_.K * x0 + solution_.v[0];
    const Eigen::MatrixXd Phi = regressor(model_, x0, u);
    history_.push(x0, u, Phi.transpose() * Phi);
    x_prev_ = x0;
    u_prev_ = u;
    t_ = 1;
    return u;
}

void AdaptiveController::update_parameter_estimate(const Eigen::VectorXd& x_t) {
    window_.push(unfalsified(model_, fw_, x_t, x_prev_, u_prev_));
    theta_ = update_param_set(theta_, window_.sets());
    theta_bar_ = project_nominal(theta_bar_, theta_);
    ing_.P = synth_terminal_cost(model_, theta_bar_, ing_.Q, ing_.R);
}

double AdaptiveController::candidate_pe_margin(const ReferenceTrajectory& ref,
                                               const Eigen::VectorXd& beta_hat,
                                               const PEWindowLayout& layout,
                                               const std::vector<VPolytope>& candidate_sections) {
    const int p = model_.np();
    const auto starts = layout.window_starts();
    ConicProgram prog;
    const int t = prog.add_scalar("t");
    prog.add_objective_linear(t, -1.0);
    const int k_max = cfg_.N + cfg_.N_u - 2;
    std::vector<std::string> names(k_max + 1);
    for (int k = 0; k <= k_max; ++k) {
        names[k] = "M" + std::to_string(k);
        prog.add_symmetric(names[k], p);
    }
    for (size_t wi = 0; wi < starts.size(); ++wi) {
        ConicProgram::PsdBlock blk;
        blk.constant = window_history_gram(history_, layout.t, starts[wi], p) -
                       beta_hat[wi] * Eigen::MatrixXd::Identity(p, p);
        for (int k = std::max(0, starts[wi]); k <= starts[wi] + cfg_.N_u - 1; ++k)
            ConicProgram::add_symmetric_block_terms(blk, prog.block(names[k]), 1.0);
        blk.terms.push_back({t, -Eigen::MatrixXd::Identity(p, p)});
        prog.add_psd_block(std::move(blk));
    }
    for (int k = 0; k <= k_max; ++k) {
        const VPolytope& cs = candidate_sections.at(k);
        for (int j = 0; j < cs.count(); ++j) {
            PeVertexBound b = pe_vertex_bound(model_, ref.xhat[k], ref.uhat[k],
                                              Eigen::VectorXd::Zero(model_.nu()), cs.vertex(j),
                                              true);
            ConicProgram::PsdBlock blk;
            blk.constant = b.constant;
            ConicProgram::add_symmetric_block_terms(blk, prog.block(names[k]), -1.0);
            prog.add_psd_block(std::move(blk));
        }
    }
    // Keep the margin problem bounded.
    ConicProgram::LinearRow cap;
    cap.idx = {t};
    cap.coef = {1.0};
    cap.rhs = 1.0;
    prog.add_inequality(std::move(cap));
    auto out = solve(prog, cfg_.solver);
    if (out.status != SolveStatus::Optimal) return -std::numeric_limits<double>::infinity();
    return out.x[t];
}

double AdaptiveController::linearization_margin(const PEWindowLayout& layout,
                                                const ReferenceTrajectory& ref,
                                                const TubeSolution& sol) {
    const auto starts = layout.window_starts();
    double worst = std::numeric_limits<double>::infinity();
    for (int j = 0; j < ing_.X_T_verts.count(); ++j) {
        for (size_t wi = 0; wi < starts.size(); ++wi) {
            Eigen::MatrixXd truth = Eigen::MatrixXd::Zero(model_.np(), model_.np());
            Eigen::MatrixXd bound = truth;
            for (int k = std::max(0, starts[wi]); k <= starts[wi] + cfg_.N_u - 1; ++k) {
                Eigen::VectorXd x_j;
                Eigen::VectorXd q = k < cfg_.N ? sol.v[k] : ref.s[k];
                if (k == 0) {
                    x_j = sol.x_t;
                } else if (k < cfg_.N) {
                    x_j = sol.centers[k] + sol.alphas[k] * ing_.X_T_verts.vertex(j);
                } else {
                    x_j = ing_.X_T_verts.vertex(j);
                }
                const Eigen::MatrixXd Phi = regressor(model_, x_j, model_.K * x_j + q);
                truth += Phi.transpose() * Phi;
                Eigen::VectorXd vq = k < cfg_.N ? sol.v[k] : ref.s[k];
                Eigen::VectorXd vhat_k =
                    k < cfg_.N ? ref.vhat[k] : ref.s[k];
                PeVertexBound b = pe_vertex_bound(model_, ref.xhat[k], ref.uhat[k], vhat_k, x_j,
                                                  true, &vq);
                bound += b.constant;
            }
            worst = std::min(worst, lambda_min(truth - bound));
        }
    }
    return worst;
}

Eigen::VectorXd AdaptiveController::step(const Eigen::VectorXd& x_t) {
    const int t = t_;
    diag_ = StepDiagnostics{};
    diag_.t = t;
    diag_.pe_active = use_pe_;

    double t0 = now_seconds();
    update_parameter_estimate(x_t);
    diag_.theta_update_seconds = now_seconds() - t0;

    const VPolytope theta_verts = to_vertices(theta_.polytope());
    const PEWindowLayout layout{cfg_.N, cfg_.N_u, t};
    const int horizon = cfg_.N + cfg_.N_u;

    // Reference trajectory and shifted candidate tube.
    const std::vector<Eigen::VectorXd> s_seq = noise_source_(t);
    const ReferenceTrajectory ref =
        build_reference(model_, theta_bar_, x_t, solution_.v, s_seq, cfg_.N, cfg_.N_u);
    std::vector<VPolytope> candidate_sections;
    candidate_sections.reserve(horizon);
    candidate_sections.push_back(VPolytope::single(x_t));
    for (int k = 1; k < horizon; ++k) {
        if (k + 1 < horizon)
            candidate_sections.push_back(solution_sections_.at(k + 1));
        else
            candidate_sections.push_back(ing_.X_T_verts);
    }

    Eigen::VectorXd beta_hat = Eigen::VectorXd::Zero(layout.n_pe());
    if (use_pe_) {
        t0 = now_seconds();
        auto refbeta = reference_beta_prime(model_, layout, history_, ref.xhat, ref.uhat,
                                            candidate_sections);
        beta_hat = refbeta.beta_hat;
        diag_.reference_seconds = now_seconds() - t0;
        diag_.beta_hat_prime_min = beta_hat.minCoeff();
        diag_.beta_hat_prime = beta_hat;
    }

    // Tube rows are shared between the witness check and the online solve.
    const TubeVarLayout lay{cfg_.N, model_.nx(), model_.nu()};
    const std::vector<ConicProgram::LinearRow> tube_rows = dedupe_rows(
        build_tube_constraints(model_, theta_verts, cfg_.X, cfg_.U, ing_, lay, x_t));

    // Candidate (recursive-feasibility) witness.
    if (cfg_.check_candidate) {
        Eigen::VectorXd cand = Eigen::VectorXd::Zero(lay.size());
        for (int k = 0; k < cfg_.N; ++k)
            for (int c = 0; c < model_.nu(); ++c) cand[lay.v_index(k, c)] = ref.vhat[k][c];
        for (int k = 1; k < cfg_.N; ++k) {
            Eigen::VectorXd z;
            double alpha;
            if (k + 1 < cfg_.N) {
                z = solution_.centers[k + 1];
                alpha = solution_.alphas[k + 1];
            } else {
                z = Eigen::VectorXd::Zero(model_.nx());
                alpha = 1.0; // X_T
            }
            for (int c = 0; c < model_.nx(); ++c) cand[lay.z_index(k, c)] = z[c];
            cand[lay.alpha_index(k)] = alpha;
        }
        double viol = 0.0;
        for (const auto& row : tube_rows) {
            double vrow = -row.rhs;
            for (size_t i = 0; i < row.idx.size(); ++i) vrow += row.coef[i] * cand[row.idx[i]];
            viol = std::max(viol, vrow);
        }
        diag_.candidate_violation = viol;
        if (use_pe_)
            diag_.candidate_margin = candidate_pe_margin(ref, beta_hat, layout, candidate_sections);
    }

    // Online optimization.
    TubeSolution sol =
        use_pe_ ? solve_Pgt0(x_t, model_, ing_, theta_verts, cfg_, theta_bar_, ref, beta_hat,
                             layout, history_, &tube_rows)
                : solve_P0(x_t, model_, ing_, theta_verts, cfg_, theta_bar_, &tube_rows);
    diag_.objective = sol.objective;
    diag_.solver_status = "optimal";
    diag_.solver_iterations = sol.iterations;
    diag_.solve_seconds = sol.solve_seconds;
    if (use_pe_ && sol.beta_prime.size() > 0) {
        diag_.beta_prime_min = sol.beta_prime.minCoeff();
        diag_.beta_prime = sol.beta_prime;
    }

    if (use_pe_ && cfg_.check_linearization)
        diag_.linearization_min = linearization_margin(layout, ref, sol);

    // Posterior sampled check with fallback to the shifted candidate. The
    // exact condition compares the two perturbation sequences over the same
    // solved tube, so both sampled coefficients use the same cross-sections
    // (and hence the same sample points); only the inputs differ.
    bool fallback = false;
    if (use_pe_) {
        t0 = now_seconds();
        const std::vector<VPolytope> solved_sections = sol.cross_sections(horizon, ing_);
        const std::uint64_t sample_seed =
            RngStream::keyed(cfg_.sample_seed_base, static_cast<std::uint64_t>(t), 0,
                             RngPurpose::TubeSampling)
                .next_u64();
        SampledBetas betas =
            sampled_betas(model_, layout, history_, solved_sections, solved_sections, sol.v,
                          ref.vhat, ref.s, cfg_.N_s, sample_seed, cfg_.combination_cap);
        diag_.beta_s_min = betas.beta_s.minCoeff();
        diag_.beta_hat_s_min = betas.beta_hat_s.minCoeff();
        diag_.beta_margin_min = (betas.beta_s - betas.beta_hat_s).minCoeff();
        diag_.beta_s = betas.beta_s;
        diag_.beta_hat_s = betas.beta_hat_s;
        const PosteriorDecision decision = posterior_check(betas);
        diag_.posterior_seconds = now_seconds() - t0;
        if (!decision.accept) {
            fallback = true;
            sol.v = ref.vhat;
            for (int k = 1; k < cfg_.N; ++k) {
                if (k + 1 < cfg_.N) {
                    sol.centers[k] = solution_.centers[k + 1];
                    sol.alphas[k] = solution_.alphas[k + 1];
                } else {
                    sol.centers[k] = Eigen::VectorXd::Zero(model_.nx());
                    sol.alphas[k] = 1.0;
                }
            }
            sol.objective = nominal_cost(model_, theta_bar_, x_t, ing_, cfg_.N)
                                .eval([&] {
                                    Eigen::VectorXd vf(cfg_.N * model_.nu());
                                    for (int k = 0; k < cfg_.N; ++k)
                                        vf.segment(k * model_.nu(), model_.nu()) = ref.vhat[k];
                                    return vf;
                                }());
        }
    }
    diag_.fallback = fallback;

    solution_ = sol;
    solution_sections_ = solution_.cross_sections(horizon, ing_);

    const Eigen::VectorXd u = model_.K * x_t + solution_.v[0];
    const Eigen::MatrixXd Phi = regressor(model_, x_t, u);
    history_.push(x_t, u, Phi.transpose() * Phi);
    x_prev_ = x_t;
    u_prev_ = u;
    ++t_;
    return u;
}

} // namespace peampc
