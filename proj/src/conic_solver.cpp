#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "peampc/conic.hpp"
#include "peampc/errors.hpp"

// Primal-dual interior-point solver over the cone R+^l x PSD^{n_1} x ... with
// Nesterov-Todd scaling and a Mehrotra predictor-corrector. Quadratic
// objectives run on the standard central path (requires a feasible problem;
// infeasibility is classified afterwards through a phase-1 program). Linear
// objectives run on the homogeneous self-dual embedding, which yields
// certificates of primal infeasibility and unboundedness.

namespace peampc {

namespace {

constexpr double kStaticReg = 1e-10;

struct SparseRows {
    // Row-compressed storage of the inequality part of G.
    std::vector<std::vector<int>> idx;
    std::vector<std::vector<double>> coef;
    int rows = 0;

    void add(const ConicProgram::LinearRow& r) {
        idx.push_back(r.idx);
        coef.push_back(r.coef);
        ++rows;
    }
};

struct PsdCone {
    int size = 0;              // matrix dimension
    int sdim = 0;              // svec dimension
    int offset = 0;            // offset into the stacked cone vector
    std::vector<int> vars;     // program variables touched by this block
    Eigen::MatrixXd G;         // sdim x vars.size(); column v is -svec(F_v)
    Eigen::VectorXd h;         // svec(F0)
};

// Standard-form data: minimize 0.5 x'Qx + c'x  s.t.  Aeq x = beq,
// G x + s = h, s in K.
struct ConeData {
    int n = 0;
    Eigen::MatrixXd Q;
    Eigen::VectorXd c;
    Eigen::MatrixXd Aeq;
    Eigen::VectorXd beq;
    SparseRows Glin;
    Eigen::VectorXd hlin;
    std::vector<PsdCone> psd;
    int lin_dim = 0;
    int cone_dim = 0;  // lin_dim + sum of svec dims
    double degree = 0; // lin_dim + sum of matrix sizes

    Eigen::VectorXd gemv(const Eigen::VectorXd& x) const {
        Eigen::VectorXd out(cone_dim);
        for (int r = 0; r < Glin.rows; ++r) {
            double v = 0.0;
            const auto& ix = Glin.idx[r];
            const auto& cf = Glin.coef[r];
            for (size_t k = 0; k < ix.size(); ++k) v += cf[k] * x[ix[k]];
            out[r] = v;
        }
        for (const auto& b : psd) {
            Eigen::VectorXd xv(b.vars.size());
            for (size_t k = 0; k < b.vars.size(); ++k) xv[k] = x[b.vars[k]];
            out.segment(b.offset, b.sdim) = b.G * xv;
        }
        return out;
    }

    Eigen::VectorXd gemv_t(const Eigen::VectorXd& z) const {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
        for (int r = 0; r < Glin.rows; ++r) {
            const auto& ix = Glin.idx[r];
            const auto& cf = Glin.coef[r];
            for (size_t k = 0; k < ix.size(); ++k) out[ix[k]] += cf[k] * z[r];
        }
        for (const auto& b : psd) {
            Eigen::VectorXd contrib = b.G.transpose() * z.segment(b.offset, b.sdim);
            for (size_t k = 0; k < b.vars.size(); ++k) out[b.vars[k]] += contrib[k];
        }
        return out;
    }

    Eigen::VectorXd cone_h() const {
        Eigen::VectorXd h(cone_dim);
        h.head(lin_dim) = hlin;
        for (const auto& b : psd) h.segment(b.offset, b.sdim) = b.h;
        return h;
    }

    Eigen::VectorXd cone_identity() const {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(cone_dim);
        e.head(lin_dim).setOnes();
        for (const auto& b : psd)
            e.segment(b.offset, b.sdim) = svec(Eigen::MatrixXd::Identity(b.size, b.size));
        return e;
    }
};

ConeData build_cone_data(const ConicProgram& p) {
    ConeData d;
    d.n = p.num_variables();
    d.Q = p.dense_hessian();
    d.c = p.linear_cost();
    d.Aeq.resize(p.num_equalities(), d.n);
    d.Aeq.setZero();
    d.beq.resize(p.num_equalities());
    for (int r = 0; r < p.num_equalities(); ++r) {
        const auto& row = p.equalities()[r];
        for (size_t k = 0; k < row.idx.size(); ++k) d.Aeq(r, row.idx[k]) += row.coef[k];
        d.beq[r] = row.rhs;
    }
    d.hlin.resize(p.num_inequalities());
    for (int r = 0; r < p.num_inequalities(); ++r) {
        d.Glin.add(p.inequalities()[r]);
        d.hlin[r] = p.inequalities()[r].rhs;
    }
    d.lin_dim = d.Glin.rows;
    int offset = d.lin_dim;
    for (const auto& blk : p.psd_blocks()) {
        PsdCone b;
        b.size = static_cast<int>(blk.constant.rows());
        b.sdim = svec_dim(b.size);
        b.offset = offset;
        offset += b.sdim;
        for (const auto& t : blk.terms) {
            auto it = std::find(b.vars.begin(), b.vars.end(), t.var);
            if (it == b.vars.end()) b.vars.push_back(t.var);
        }
        b.G.resize(b.sdim, static_cast<int>(b.vars.size()));
        b.G.setZero();
        b.h = svec(blk.constant);
        for (const auto& t : blk.terms) {
            const int col = static_cast<int>(std::find(b.vars.begin(), b.vars.end(), t.var) -
                                             b.vars.begin());
            b.G.col(col) -= svec(t.coef);
        }
        d.psd.push_back(std::move(b));
    }
    d.cone_dim = offset;
    d.degree = d.lin_dim;
    for (const auto& b : d.psd) d.degree += b.size;
    return d;
}

// Nesterov-Todd scaling. For the nonnegative part w_i = sqrt(s_i / z_i) and
// lambda_i = sqrt(s_i z_i). For a PSD block the scaling point is encoded by r
// and rti = r^{-T} with r' Z r = r^{-1} S r^{-T} = diag(lambda_eigs).
struct Scaling {
    Eigen::VectorXd w;
    Eigen::VectorXd lambda_lin;
    struct Blk {
        Eigen::MatrixXd r, rti;
        Eigen::VectorXd eigs;
    };
    std::vector<Blk> blk;
};

bool compute_scaling(const ConeData& d, const Eigen::VectorXd& s, const Eigen::VectorXd& z,
                     Scaling& W) {
    W.w.resize(d.lin_dim);
    W.lambda_lin.resize(d.lin_dim);
    for (int i = 0; i < d.lin_dim; ++i) {
        if (s[i] <= 0.0 || z[i] <= 0.0) return false;
        W.w[i] = std::sqrt(s[i] / z[i]);
        W.lambda_lin[i] = std::sqrt(s[i] * z[i]);
    }
    W.blk.assign(d.psd.size(), {});
    for (size_t bi = 0; bi < d.psd.size(); ++bi) {
        const auto& b = d.psd[bi];
        Eigen::MatrixXd S = smat(s.segment(b.offset, b.sdim));
        Eigen::MatrixXd Z = smat(z.segment(b.offset, b.sdim));
        Eigen::LLT<Eigen::MatrixXd> Ls(S), Lz(Z);
        if (Ls.info() != Eigen::Success || Lz.info() != Eigen::Success) return false;
        Eigen::MatrixXd L_s = Ls.matrixL();
        Eigen::MatrixXd L_z = Lz.matrixL();
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(L_z.transpose() * L_s,
                                              Eigen::ComputeFullU | Eigen::ComputeFullV);
        Eigen::VectorXd sig = svd.singularValues();
        if (sig.minCoeff() <= 0.0) return false;
        Eigen::VectorXd isqrt = sig.cwiseSqrt().cwiseInverse();
        auto& w = W.blk[bi];
        w.r = L_s * svd.matrixV() * isqrt.asDiagonal();
        w.rti = L_z * svd.matrixU() * isqrt.asDiagonal();
        w.eigs = sig;
    }
    return true;
}

// Apply lambda o x = rhs solve, i.e. x = lambda \ rhs in the Jordan algebra.
Eigen::VectorXd jordan_div_lambda(const ConeData& d, const Scaling& W, const Eigen::VectorXd& rhs) {
    Eigen::VectorXd out(d.cone_dim);
    out.head(d.lin_dim) = rhs.head(d.lin_dim).cwiseQuotient(W.lambda_lin);
    for (size_t bi = 0; bi < d.psd.size(); ++bi) {
        const auto& b = d.psd[bi];
        const Eigen::VectorXd& sig = W.blk[bi].eigs;
        Eigen::MatrixXd R = smat(rhs.segment(b.offset, b.sdim));
        Eigen::MatrixXd X(b.size, b.size);
        for (int i = 0; i < b.size; ++i)
            for (int j = 0; j < b.size; ++j) X(i, j) = 2.0 * R(i, j) / (sig[i] + sig[j]);
        out.segment(b.offset, b.sdim) = svec(X);
    }
    return out;
}

// Jordan product u o v (u, v in scaled coordinates of the same cone).
Eigen::VectorXd jordan_prod(const ConeData& d, const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
    Eigen::VectorXd out(d.cone_dim);
    out.head(d.lin_dim) = u.head(d.lin_dim).cwiseProduct(v.head(d.lin_dim));
    for (const auto& b : d.psd) {
        Eigen::MatrixXd U = smat(u.segment(b.offset, b.sdim));
        Eigen::MatrixXd V = smat(v.segment(b.offset, b.sdim));
        out.segment(b.offset, b.sdim) = svec(0.5 * (U * V + V * U));
    }
    return out;
}

Eigen::VectorXd lambda_vec(const ConeData& d, const Scaling& W) {
    Eigen::VectorXd out(d.cone_dim);
    out.head(d.lin_dim) = W.lambda_lin;
    for (size_t bi = 0; bi < d.psd.size(); ++bi) {
        const auto& b = d.psd[bi];
        out.segment(b.offset, b.sdim) = svec(Eigen::MatrixXd(W.blk[bi].eigs.asDiagonal()));
    }
    return out;
}

// W z (scale dual into lambda space).
Eigen::VectorXd scale_z(const ConeData& d, const Scaling& W, const Eigen::VectorXd& z) {
    Eigen::VectorXd out(d.cone_dim);
    out.head(d.lin_dim) = W.w.cwiseProduct(z.head(d.lin_dim));
    for (size_t bi = 0; bi < d.psd.size(); ++bi) {
        const auto& b = d.psd[bi];
        const auto& r = W.blk[bi].r;
        Eigen::MatrixXd Z = smat(z.segment(b.offset, b.sdim));
        out.segment(b.offset, b.sdim) = svec(r.transpose() * Z * r);
    }
    return out;
}

// W^{-T} s (scale primal slack into lambda space).
Eigen::VectorXd scale_s(const ConeData& d, const Scaling& W, const Eigen::VectorXd& s) {
    Eigen::VectorXd out(d.cone_dim);
    out.head(d.lin_dim) = s.head(d.lin_dim).cwiseQuotient(W.w);
    for (size_t bi = 0; bi < d.psd.size(); ++bi) {
        const auto& b = d.psd[bi];
        const auto& rti = W.blk[bi].rti;
        Eigen::MatrixXd S = smat(s.segment(b.offset, b.sdim));
        out.segment(b.offset, b.sdim) = svec(rti.transpose() * S * rti);
    }
    return out;
}

// W' u, mapping a lambda-space vector back to primal slack space.
Eigen::VectorXd scale_back_s(const ConeData& d, const Scaling& W, const Eigen::VectorXd& u) {
    Eigen::VectorXd out(d.cone_dim);
    out.head(d.lin_dim) = W.w.cwiseProduct(u.head(d.lin_dim));
    for (size_t bi = 0; bi < d.psd.size(); ++bi) {
        const auto& b = d.psd[bi];
        const auto& r = W.blk[bi].r;
        Eigen::MatrixXd U = smat(u.segment(b.offset, b.sdim));
        out.segment(b.offset, b.sdim) = svec(r * U * r.transpose());
    }
    return out;
}

// Largest step length alpha such that v + alpha dv stays in the cone
// (v strictly interior).
double max_step(const ConeData& d, const Eigen::VectorXd& v, const Eigen::VectorXd& dv) {
    double alpha = std::numeric_limits<double>::infinity();
    for (int i = 0; i < d.lin_dim; ++i)
        if (dv[i] < 0.0) alpha = std::min(alpha, -v[i] / dv[i]);
    for (const auto& b : d.psd) {
        Eigen::MatrixXd V = smat(v.segment(b.offset, b.sdim));
        Eigen::MatrixXd D = smat(dv.segment(b.offset, b.sdim));
        Eigen::LLT<Eigen::MatrixXd> llt(V);
        if (llt.info() != Eigen::Success) return 0.0;
        Eigen::MatrixXd L = llt.matrixL();
        Eigen::MatrixXd M = L.triangularView<Eigen::Lower>().solve(D);
        M = L.triangularView<Eigen::Lower>().solve(M.transpose().eval());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()),
                                                          Eigen::EigenvaluesOnly);
        const double lmin = es.eigenvalues().minCoeff();
        if (lmin < 0.0) alpha = std::min(alpha, -1.0 / lmin);
    }
    return alpha;
}

double cone_min_eig(const ConeData& d, const Eigen::VectorXd& v) {
    double m = std::numeric_limits<double>::infinity();
    if (d.lin_dim > 0) m = v.head(d.lin_dim).minCoeff();
    for (const auto& b : d.psd) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(smat(v.segment(b.offset, b.sdim)),
                                                          Eigen::EigenvaluesOnly);
        m = std::min(m, es.eigenvalues().minCoeff());
    }
    return m;
}

// KKT factorization of [Q + G'(W'W)^{-1}G, Aeq'; Aeq, 0] with static
// regularization. Solutions recover dz from dx.
class KktSolver {
public:
    KktSolver(const ConeData& d) : d_(d) {}

    bool factor(const Scaling& W, bool identity_scaling) {
        const int n = d_.n;
        Eigen::MatrixXd H = d_.Q;
        H.diagonal().array() += kStaticReg;
        // Linear rows: H += g_r d_r g_r' with d_r = (w_r)^{-2} (or 1).
        for (int r = 0; r < d_.Glin.rows; ++r) {
            const double dr = identity_scaling ? 1.0 : 1.0 / (W.w[r] * W.w[r]);
            const auto& ix = d_.Glin.idx[r];
            const auto& cf = d_.Glin.coef[r];
            for (size_t a = 0; a < ix.size(); ++a) {
                const double va = dr * cf[a];
                for (size_t b = 0; b < ix.size(); ++b) H(ix[a], ix[b]) += va * cf[b];
            }
        }
        // PSD blocks: H(J,J) += Gb' Op Gb with Op the (W'W)^{-1} operator.
        op_.assign(d_.psd.size(), Eigen::MatrixXd());
        for (size_t bi = 0; bi < d_.psd.size(); ++bi) {
            const auto& b = d_.psd[bi];
            Eigen::MatrixXd Op;
            if (identity_scaling) {
                Op = Eigen::MatrixXd::Identity(b.sdim, b.sdim);
            } else {
                // (W'W)^{-1} U = (rti rti') U (rti rti').
                const Eigen::MatrixXd P = W.blk[bi].rti * W.blk[bi].rti.transpose();
                Op.resize(b.sdim, b.sdim);
                for (int k = 0; k < b.sdim; ++k) {
                    Eigen::VectorXd e = Eigen::VectorXd::Zero(b.sdim);
                    e[k] = 1.0;
                    Op.col(k) = svec(P * smat(e) * P);
                }
            }
            op_[bi] = Op;
            Eigen::MatrixXd Hb = b.G.transpose() * Op * b.G;
            for (size_t a = 0; a < b.vars.size(); ++a)
                for (size_t c = 0; c < b.vars.size(); ++c) H(b.vars[a], b.vars[c]) += Hb(a, c);
        }
        llt_.compute(H);
        if (llt_.info() != Eigen::Success) {
            H.diagonal().array() += 1e-8 * (1.0 + H.diagonal().cwiseAbs().maxCoeff());
            llt_.compute(H);
            if (llt_.info() != Eigen::Success) return false;
        }
        const int p = static_cast<int>(d_.Aeq.rows());
        if (p > 0) {
            Eigen::MatrixXd HinvAt = llt_.solve(d_.Aeq.transpose());
            Eigen::MatrixXd S = d_.Aeq * HinvAt;
            S.diagonal().array() += kStaticReg;
            schur_ = S.ldlt();
            if (schur_.info() != Eigen::Success) return false;
        }
        identity_ = identity_scaling;
        return true;
    }

    // Solve [Q+G'DG  Aeq'; Aeq 0] (dx,dy) = (bx + G'D bz, by); dz = D(G dx - bz).
    // One round of iterative refinement compensates the static regularization.
    void solve(const Scaling& W, const Eigen::VectorXd& bx, const Eigen::VectorXd& by,
               const Eigen::VectorXd& bz, Eigen::VectorXd& dx, Eigen::VectorXd& dy,
               Eigen::VectorXd& dz) const {
        const Eigen::VectorXd rhs = bx + d_.gemv_t(apply_inv_ww(W, bz));
        const int p = static_cast<int>(d_.Aeq.rows());
        auto base_solve = [&](const Eigen::VectorXd& r, const Eigen::VectorXd& ry,
                              Eigen::VectorXd& ox, Eigen::VectorXd& oy) {
            if (p == 0) {
                ox = llt_.solve(r);
                oy.resize(0);
            } else {
                Eigen::VectorXd Hinv_rhs = llt_.solve(r);
                oy = schur_.solve(d_.Aeq * Hinv_rhs - ry);
                ox = llt_.solve(r - d_.Aeq.transpose() * oy);
            }
        };
        base_solve(rhs, by, dx, dy);
        // Residual of the reduced system: (Q + G'DG) dx + Aeq' dy = rhs.
        Eigen::VectorXd resid =
            rhs - d_.Q * dx - d_.gemv_t(apply_inv_ww(W, d_.gemv(dx)));
        Eigen::VectorXd resy;
        if (p > 0) {
            resid -= d_.Aeq.transpose() * dy;
            resy = by - d_.Aeq * dx;
        }
        Eigen::VectorXd cx, cy;
        base_solve(resid, p > 0 ? resy : Eigen::VectorXd(), cx, cy);
        dx += cx;
        if (p > 0) dy += cy;
        dz = apply_inv_ww(W, d_.gemv(dx) - bz);
    }

    Eigen::VectorXd apply_inv_ww(const Scaling& W, const Eigen::VectorXd& u) const {
        Eigen::VectorXd out(d_.cone_dim);
        if (identity_) {
            out = u;
            return out;
        }
        for (int r = 0; r < d_.lin_dim; ++r) out[r] = u[r] / (W.w[r] * W.w[r]);
        for (size_t bi = 0; bi < d_.psd.size(); ++bi) {
            const auto& b = d_.psd[bi];
            out.segment(b.offset, b.sdim) = op_[bi] * u.segment(b.offset, b.sdim);
        }
        return out;
    }

private:
    const ConeData& d_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::LDLT<Eigen::MatrixXd> schur_;
    std::vector<Eigen::MatrixXd> op_;
    bool identity_ = true;
};

struct IpmResult {
    SolveStatus status = SolveStatus::NumericalFailure;
    Eigen::VectorXd x;
    int iterations = 0;
    std::string diagnostics;
};

// ---------------------------------------------------------------------------
// Quadratic-objective path (standard central path, feasible problems).
// ---------------------------------------------------------------------------
IpmResult solve_qp_path(const ConeData& d, const SolverSettings& st) {
    IpmResult res;
    const bool trace = std::getenv("PEAMPC_SOLVER_TRACE") != nullptr;
    double t_factor = 0, t_solve = 0, t_step = 0, t_misc = 0;
    auto tick = []() {
        return std::chrono::duration<double>(
                   std::chrono::steady_clock::now().time_since_epoch())
            .count();
    };
    const int n = d.n;
    const int p = static_cast<int>(d.Aeq.rows());
    const Eigen::VectorXd h = d.cone_h();
    const Eigen::VectorXd e = d.cone_identity();

    if (d.cone_dim == 0) {
        // Equality-constrained (or unconstrained) QP: one linear solve.
        Eigen::MatrixXd K(n + p, n + p);
        K.setZero();
        K.topLeftCorner(n, n) = d.Q;
        K.topLeftCorner(n, n).diagonal().array() += kStaticReg;
        if (p > 0) {
            K.topRightCorner(n, p) = d.Aeq.transpose();
            K.bottomLeftCorner(p, n) = d.Aeq;
            K.bottomRightCorner(p, p).diagonal().array() -= kStaticReg;
        }
        Eigen::VectorXd rhs(n + p);
        rhs.head(n) = -d.c;
        rhs.tail(p) = d.beq;
        Eigen::VectorXd sol = K.ldlt().solve(rhs);
        res.x = sol.head(n);
        res.status = SolveStatus::Optimal;
        return res;
    }

    KktSolver kkt(d);
    Scaling W;

    // Initialization: solve the W = I system, then push (s, z) into the cone.
    if (!kkt.factor(W, true)) {
        res.diagnostics = "initial KKT factorization failed";
        return res;
    }
    Eigen::VectorXd x, y, z;
    kkt.solve(W, -d.c, d.beq, -h, x, y, z);
    Eigen::VectorXd s = -(d.gemv(x) - h) ; // = h - Gx
    const double ms = cone_min_eig(d, s);
    if (ms <= 0) s += (1.0 - ms) * e;
    const double mz = cone_min_eig(d, z);
    if (mz <= 0) z += (1.0 - mz) * e;
    if (p == 0) y.resize(0);

    double prev_gap = std::numeric_limits<double>::infinity();
    int stall = 0;
    double best_pres = 1e300, best_dres = 1e300, best_relgap = 1e300;
    Eigen::VectorXd best_x;

    // Accept a mildly degraded iterate when the path stalls near the optimum
    // (degenerate problems with weak strict feasibility).
    auto loose_accept = [&]() {
        if (best_x.size() == n && best_pres <= 1e-6 && best_dres <= 1e-6 && best_relgap <= 1e-4) {
            res.status = SolveStatus::Optimal;
            res.x = best_x;
            res.diagnostics += " (loose acceptance)";
            return true;
        }
        return false;
    };

    for (int iter = 0; iter < st.max_iterations; ++iter) {
        res.iterations = iter + 1;
        // Residuals.
        Eigen::VectorXd rx = d.Q * x + d.c + d.gemv_t(z);
        if (p > 0) rx += d.Aeq.transpose() * y;
        Eigen::VectorXd ry = p > 0 ? Eigen::VectorXd(d.Aeq * x - d.beq) : Eigen::VectorXd();
        Eigen::VectorXd rz = d.gemv(x) + s - h;
        const double gap = s.dot(z);
        const double pcost = 0.5 * x.dot(d.Q * x) + d.c.dot(x);
        const double relgap = gap / std::max(1.0, std::abs(pcost));
        const double pres = std::max(p > 0 ? ry.norm() / std::max(1.0, d.beq.norm()) : 0.0,
                                     rz.norm() / std::max(1.0, h.norm()));
        const double dres = rx.norm() / std::max(1.0, d.c.norm());
        if (std::max({pres, dres, relgap}) < std::max({best_pres, best_dres, best_relgap})) {
            best_pres = pres;
            best_dres = dres;
            best_relgap = relgap;
            best_x = x;
        }

        if (pres <= st.feas_tol && dres <= st.feas_tol &&
            (gap <= st.gap_tol || relgap <= st.gap_tol)) {
            res.status = SolveStatus::Optimal;
            res.x = x;
            if (trace)
                std::fprintf(stderr, "[qp] n=%d cone=%d iters=%d factor=%.3f solve=%.3f step=%.3f\n",
                             n, d.cone_dim, res.iterations, t_factor, t_solve, t_step);
            return res;
        }
        if (!std::isfinite(gap) || !std::isfinite(pres) || !std::isfinite(dres)) {
            res.diagnostics = "non-finite iterate";
            loose_accept();
            return res;
        }
        if (gap > st.gap_tol * 10 && gap > prev_gap * 0.9999) {
            if (++stall > 12) {
                res.diagnostics = "progress stalled (possible infeasibility)";
                loose_accept();
                return res;
            }
        } else {
            stall = 0;
        }
        prev_gap = std::min(prev_gap, gap);

        double tk = tick();
        if (!compute_scaling(d, s, z, W)) {
            res.diagnostics = "scaling breakdown";
            loose_accept();
            return res;
        }
        if (!kkt.factor(W, false)) {
            res.diagnostics = "KKT factorization failed";
            loose_accept();
            return res;
        }
        t_factor += tick() - tk;
        const Eigen::VectorXd lam = lambda_vec(d, W);
        const double mu = gap / d.degree;

        // Affine direction: ds_hat + dz_hat = -lambda (in lambda space).
        double ts = tick();
        Eigen::VectorXd g1 = jordan_div_lambda(d, W, -jordan_prod(d, lam, lam));
        Eigen::VectorXd dx, dy, dz;
        kkt.solve(W, -rx, p > 0 ? Eigen::VectorXd(-ry) : Eigen::VectorXd(), -rz - scale_back_s(d, W, g1),
                  dx, dy, dz);
        Eigen::VectorXd ds = -rz - d.gemv(dx);
        t_solve += tick() - ts;

        ts = tick();
        const double a_s = max_step(d, s, ds);
        const double a_z = max_step(d, z, dz);
        t_step += tick() - ts;
        const double alpha_aff = std::min({1.0, a_s, a_z});
        const double mu_aff = (s + alpha_aff * ds).dot(z + alpha_aff * dz) / d.degree;
        double sigma = std::pow(std::max(0.0, mu_aff / mu), 3.0);
        sigma = std::min(1.0, sigma);

        // Combined direction with Mehrotra correction.
        Eigen::VectorXd ds_hat = scale_s(d, W, ds);
        Eigen::VectorXd dz_hat = scale_z(d, W, dz);
        Eigen::VectorXd compl_rhs =
            -jordan_prod(d, lam, lam) - jordan_prod(d, ds_hat, dz_hat) + sigma * mu * e;
        ts = tick();
        Eigen::VectorXd g2 = jordan_div_lambda(d, W, compl_rhs);
        kkt.solve(W, -rx, p > 0 ? Eigen::VectorXd(-ry) : Eigen::VectorXd(), -rz - scale_back_s(d, W, g2),
                  dx, dy, dz);
        ds = -rz - d.gemv(dx);
        t_solve += tick() - ts;

        ts = tick();
        const double step =
            0.99 * std::min({1.0, max_step(d, s, ds), max_step(d, z, dz)});
        t_step += tick() - ts;
        if (step < 1e-10) {
            res.diagnostics = "step length collapsed";
            loose_accept();
            return res;
        }
        x += step * dx;
        if (p > 0) y += step * dy;
        z += step * dz;
        s += step * ds;
    }
    res.diagnostics = "iteration limit reached";
    loose_accept();
    return res;
}

// ---------------------------------------------------------------------------
// Homogeneous self-dual embedding for linear objectives.
// ---------------------------------------------------------------------------
IpmResult solve_hsde(const ConeData& d, const SolverSettings& st) {
    IpmResult res;
    const int n = d.n;
    const int p = static_cast<int>(d.Aeq.rows());
    const Eigen::VectorXd h = d.cone_h();
    const Eigen::VectorXd e = d.cone_identity();
    const double nu = d.degree + 1.0;

    if (d.cone_dim == 0) {
        // Pure equality LP: solve least squares; unbounded unless c in range(Aeq').
        Eigen::VectorXd x = d.Aeq.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(d.beq);
        if ((d.Aeq * x - d.beq).norm() > st.feas_tol * std::max(1.0, d.beq.norm())) {
            res.status = SolveStatus::Infeasible;
            return res;
        }
        Eigen::VectorXd y = d.Aeq.transpose()
                                .jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV)
                                .solve(-d.c);
        if ((d.Aeq.transpose() * y + d.c).norm() > st.feas_tol * std::max(1.0, d.c.norm())) {
            res.status = SolveStatus::Unbounded;
            res.x = x;
            return res;
        }
        res.status = SolveStatus::Optimal;
        res.x = x;
        return res;
    }

    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd s = e, z = e;
    double tau = 1.0, kappa = 1.0;

    KktSolver kkt(d);
    Scaling W;
    double best_pres = 1e300, best_dres = 1e300, best_relgap = 1e300;
    Eigen::VectorXd best_x;
    auto loose_accept = [&]() {
        if (best_x.size() == n && best_pres <= 1e-6 && best_dres <= 1e-6 && best_relgap <= 1e-4) {
            res.status = SolveStatus::Optimal;
            res.x = best_x;
            res.diagnostics += " (loose acceptance)";
            return true;
        }
        return false;
    };

    for (int iter = 0; iter < st.max_iterations; ++iter) {
        res.iterations = iter + 1;
        // Residuals of the embedding.
        Eigen::VectorXd rx = d.gemv_t(z) + d.c * tau;  // + Aeq'y
        if (p > 0) rx += d.Aeq.transpose() * y;
        Eigen::VectorXd ry = p > 0 ? Eigen::VectorXd(d.Aeq * x - d.beq * tau) : Eigen::VectorXd();
        Eigen::VectorXd rz = d.gemv(x) + s - h * tau;
        const double rtau = kappa + d.c.dot(x) + h.dot(z) + (p > 0 ? d.beq.dot(y) : 0.0);
        const double mu = (s.dot(z) + tau * kappa) / nu;

        // Convergence and certificate tests on the de-homogenized point.
        const double cx = d.c.dot(x);
        const double by = p > 0 ? d.beq.dot(y) : 0.0;
        const double hz = h.dot(z);
        {
            const double pres = std::max(p > 0 ? (d.Aeq * x / tau - d.beq).norm() /
                                                     std::max(1.0, d.beq.norm())
                                               : 0.0,
                                         (d.gemv(x) / tau + s / tau - h).norm() /
                                             std::max(1.0, h.norm()));
            const double dres = rx.norm() / tau / std::max(1.0, d.c.norm());
            const double gap = s.dot(z) / (tau * tau);
            const double relgap = gap / std::max(1.0, std::abs(cx / tau));
            if (pres <= st.feas_tol && dres <= st.feas_tol &&
                (gap <= st.gap_tol || relgap <= st.gap_tol)) {
                res.status = SolveStatus::Optimal;
                res.x = x / tau;
                return res;
            }
            if (std::max({pres, dres, relgap}) < std::max({best_pres, best_dres, best_relgap})) {
                best_pres = pres;
                best_dres = dres;
                best_relgap = relgap;
                best_x = x / tau;
            }
        }
        // Infeasibility certificates (valid once tau has collapsed vs kappa).
        const bool tau_small = tau <= 1e-2 * kappa;
        if (tau_small && -(by + hz) > 1e-12) {
            const double scale = -(by + hz);
            Eigen::VectorXd dual_res = d.gemv_t(z);
            if (p > 0) dual_res += d.Aeq.transpose() * y;
            if (dual_res.norm() <= st.feas_tol * scale && cone_min_eig(d, z) > -1e-12 * scale) {
                res.status = SolveStatus::Infeasible;
                return res;
            }
        }
        if (tau_small && -cx > 1e-12) {
            const double scale = -cx;
            const double pr = (d.gemv(x) + s).norm();
            const double er = p > 0 ? (d.Aeq * x).norm() : 0.0;
            if (pr <= st.feas_tol * scale && er <= st.feas_tol * scale) {
                res.status = SolveStatus::Unbounded;
                res.x = x / std::max(scale, 1e-300);
                return res;
            }
        }
        if (!std::isfinite(mu)) {
            res.diagnostics = "non-finite iterate";
            loose_accept();
            return res;
        }

        if (!compute_scaling(d, s, z, W)) {
            res.diagnostics = "scaling breakdown";
            loose_accept();
            return res;
        }
        if (!kkt.factor(W, false)) {
            res.diagnostics = "KKT factorization failed";
            loose_accept();
            return res;
        }
        const Eigen::VectorXd lam = lambda_vec(d, W);

        // Constant-column solve, reused for both predictor and corrector.
        Eigen::VectorXd x1, y1, z1;
        kkt.solve(W, -d.c, p > 0 ? Eigen::VectorXd(d.beq) : Eigen::VectorXd(), h, x1, y1, z1);

        auto directions = [&](double gamma, const Eigen::VectorXd& compl_rhs, double rhs_taukappa,
                              Eigen::VectorXd& dx, Eigen::VectorXd& dy, Eigen::VectorXd& dz,
                              Eigen::VectorXd& ds, double& dtau, double& dkappa) {
            const double f = 1.0 - gamma;
            Eigen::VectorXd g = jordan_div_lambda(d, W, compl_rhs);
            Eigen::VectorXd bz = -f * rz - scale_back_s(d, W, g);
            Eigen::VectorXd x2, y2, z2;
            kkt.solve(W, -f * rx, p > 0 ? Eigen::VectorXd(-f * ry) : Eigen::VectorXd(), bz, x2, y2,
                      z2);
            // tau row: c'dx + b'dy + h'dz - (kappa/tau) dtau = -f*rtau - rhs_tk/tau.
            const double num = -f * rtau - rhs_taukappa / tau -
                               (d.c.dot(x2) + (p > 0 ? d.beq.dot(y2) : 0.0) + h.dot(z2));
            const double den =
                d.c.dot(x1) + (p > 0 ? d.beq.dot(y1) : 0.0) + h.dot(z1) - kappa / tau;
            dtau = num / den;
            dx = x2 + dtau * x1;
            if (p > 0) dy = y2 + dtau * y1;
            dz = z2 + dtau * z1;
            ds = -f * rz - d.gemv(dx) + h * dtau;
            dkappa = (rhs_taukappa - kappa * dtau) / tau;
        };

        // Predictor.
        Eigen::VectorXd dx, dy, dz, ds;
        double dtau, dkappa;
        directions(0.0, -jordan_prod(d, lam, lam), -tau * kappa, dx, dy, dz, ds, dtau, dkappa);

        double alpha = std::min({1.0, max_step(d, s, ds), max_step(d, z, dz)});
        if (dtau < 0.0) alpha = std::min(alpha, -tau / dtau);
        if (dkappa < 0.0) alpha = std::min(alpha, -kappa / dkappa);
        const double mu_aff = ((s + alpha * ds).dot(z + alpha * dz) +
                               (tau + alpha * dtau) * (kappa + alpha * dkappa)) /
                              nu;
        double sigma = std::min(1.0, std::pow(std::max(0.0, mu_aff / mu), 3.0));

        // Corrector.
        Eigen::VectorXd ds_hat = scale_s(d, W, ds);
        Eigen::VectorXd dz_hat = scale_z(d, W, dz);
        Eigen::VectorXd compl_rhs =
            -jordan_prod(d, lam, lam) - jordan_prod(d, ds_hat, dz_hat) + sigma * mu * e;
        const double rhs_tk = -tau * kappa - dtau * dkappa + sigma * mu;
        directions(sigma, compl_rhs, rhs_tk, dx, dy, dz, ds, dtau, dkappa);

        alpha = std::min({1.0, max_step(d, s, ds), max_step(d, z, dz)});
        if (dtau < 0.0) alpha = std::min(alpha, -tau / dtau);
        if (dkappa < 0.0) alpha = std::min(alpha, -kappa / dkappa);
        alpha *= 0.98;
        if (alpha < 1e-10) {
            res.diagnostics = "step length collapsed";
            loose_accept();
            return res;
        }
        x += alpha * dx;
        if (p > 0) y += alpha * dy;
        z += alpha * dz;
        s += alpha * ds;
        tau += alpha * dtau;
        kappa += alpha * dkappa;
    }
    res.diagnostics = "iteration limit reached";
    loose_accept();
    return res;
}

// Phase-1 feasibility program: minimize t subject to the shifted constraints;
// strictly feasible by construction. Negative optimum => original feasible.
SolveStatus classify_feasibility(const ConeData& d, const ConicProgram& p,
                                 const SolverSettings& st, std::string& note) {
    ConicProgram ph;
    ph.add_vector("x", p.num_variables());
    const int t = ph.add_scalar("t");
    ph.add_objective_linear(t, 1.0);
    for (const auto& row : p.equalities()) ph.add_equality(row);
    for (const auto& row : p.inequalities()) {
        ConicProgram::LinearRow r = row;
        r.idx.push_back(t);
        r.coef.push_back(-std::max(1.0, std::abs(row.rhs)));
        ph.add_inequality(std::move(r));
    }
    for (const auto& blk : p.psd_blocks()) {
        ConicProgram::PsdBlock b = blk;
        const int nsz = static_cast<int>(blk.constant.rows());
        b.terms.push_back({t, Eigen::MatrixXd::Identity(nsz, nsz)});
        ph.add_psd_block(std::move(b));
    }
    {
        ConicProgram::LinearRow lower;
        lower.idx = {t};
        lower.coef = {-1.0};
        lower.rhs = 1.0;
        ph.add_inequality(std::move(lower));
    }
    ConeData dph = build_cone_data(ph);
    SolverSettings st1 = st;
    st1.feas_tol = std::max(st.feas_tol, 1e-8);
    IpmResult r = solve_hsde(dph, st1);
    if (r.status == SolveStatus::Optimal) {
        const double tstar = r.x[t];
        note = "phase-1 optimum t = " + std::to_string(tstar);
        if (tstar > 1e-7) return SolveStatus::Infeasible;
        return SolveStatus::NumericalFailure; // feasible but main path failed
    }
    if (r.status == SolveStatus::Infeasible) {
        // Only the copied equalities can be infeasible in phase 1.
        note = "inconsistent equality constraints";
        return SolveStatus::Infeasible;
    }
    note = "phase-1 inconclusive: " + r.diagnostics;
    return SolveStatus::NumericalFailure;
}

} // namespace

SolveOutcome solve(const ConicProgram& program, const SolverSettings& settings) {
    const auto t0 = std::chrono::steady_clock::now();
    SolveOutcome out;

    // Validate the Hessian is PSD before doing anything else.
    if (program.has_quadratic_objective()) {
        Eigen::MatrixXd Q = program.dense_hessian();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() < -1e-9 * std::max(1.0, Q.cwiseAbs().maxCoeff()))
            throw ContractViolation("objective Hessian is not positive semidefinite");
    }

    ConeData d = build_cone_data(program);
    IpmResult r;
    if (program.has_quadratic_objective()) {
        r = solve_qp_path(d, settings);
        if (r.status == SolveStatus::NumericalFailure) {
            std::string note;
            const SolveStatus cls = classify_feasibility(d, program, settings, note);
            if (cls == SolveStatus::Infeasible) {
                r.status = SolveStatus::Infeasible;
            }
            r.diagnostics += "; " + note;
        }
    } else {
        r = solve_hsde(d, settings);
    }

    out.status = r.status;
    out.iterations = r.iterations;
    out.diagnostics = r.diagnostics;
    if (r.x.size() == program.num_variables()) out.x = r.x;
    if (r.status == SolveStatus::Optimal) {
        out.objective = program.eval_objective(r.x);
        out.residuals = verify_solution(program, r.x);
        const double scale = std::max(1.0, out.x.cwiseAbs().maxCoeff());
        if (out.residuals.max_equality_residual > settings.verify_tol * scale ||
            out.residuals.max_inequality_violation > settings.verify_tol * scale ||
            out.residuals.min_psd_eigenvalue < -settings.verify_tol * scale) {
            out.status = SolveStatus::NumericalFailure;
            out.diagnostics = "residual check failed after nominal convergence";
        }
    }
    out.solve_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

} // namespace peampc
