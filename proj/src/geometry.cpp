#include "peampc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>

#include <nlohmann/json.hpp>

#include "peampc/errors.hpp"

namespace peampc {

namespace {

constexpr double kMergeTol = 1e-9;
constexpr double kZeroTol = 1e-9;

Eigen::MatrixXd merge_duplicate_rows(const Eigen::MatrixXd& V, double tol) {
    std::vector<int> keep;
    for (int i = 0; i < V.rows(); ++i) {
        bool dup = false;
        for (int j : keep) {
            if ((V.row(i) - V.row(j)).norm() < tol) {
                dup = true;
                break;
            }
        }
        if (!dup) keep.push_back(i);
    }
    Eigen::MatrixXd out(keep.size(), V.cols());
    for (size_t k = 0; k < keep.size(); ++k) out.row(k) = V.row(keep[k]);
    return out;
}

} // namespace

HPolytope::HPolytope(Eigen::MatrixXd A, Eigen::VectorXd b)
    : normals(std::move(A)), offsets(std::move(b)) {
    if (normals.rows() != offsets.size())
        throw ContractViolation("halfspace count mismatch between normals and offsets");
}

HPolytope HPolytope::bounded(Eigen::MatrixXd A, Eigen::VectorXd b) {
    HPolytope P(std::move(A), std::move(b));
    if (is_empty(P)) throw EmptySetError("polytope is empty");
    if (!is_bounded(P)) throw UnboundedError("polytope is unbounded");
    return P;
}

HPolytope HPolytope::box(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
    const int n = static_cast<int>(lo.size());
    Eigen::MatrixXd A(2 * n, n);
    A.topRows(n) = Eigen::MatrixXd::Identity(n, n);
    A.bottomRows(n) = -Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd b(2 * n);
    b.head(n) = hi;
    b.tail(n) = -lo;
    return HPolytope(A, b);
}

HPolytope HPolytope::inf_ball(int n, double radius) {
    return box(Eigen::VectorXd::Constant(n, -radius), Eigen::VectorXd::Constant(n, radius));
}

VPolytope::VPolytope(Eigen::MatrixXd verts) : vertices(std::move(verts)) {
    if (vertices.rows() == 0) throw ContractViolation("vertex list must be nonempty");
    vertices = merge_duplicate_rows(vertices, kMergeTol);
}

VPolytope VPolytope::single(const Eigen::VectorXd& v) {
    Eigen::MatrixXd m(1, v.size());
    m.row(0) = v.transpose();
    return VPolytope(m);
}

double support(const HPolytope& P, const Eigen::VectorXd& d) {
    if (d.size() != P.dim()) throw ContractViolation("direction dimension mismatch");
    ConicProgram prog;
    prog.add_vector("x", P.dim());
    for (int i = 0; i < P.dim(); ++i) prog.add_objective_linear(i, -d[i]);
    for (int r = 0; r < P.rows(); ++r) {
        ConicProgram::LinearRow row;
        for (int j = 0; j < P.dim(); ++j) {
            row.idx.push_back(j);
            row.coef.push_back(P.normals(r, j));
        }
        row.rhs = P.offsets[r];
        prog.add_inequality(std::move(row));
    }
    auto out = solve(prog);
    switch (out.status) {
        case SolveStatus::Optimal: return -out.objective;
        case SolveStatus::Infeasible: throw EmptySetError("support of an empty polytope");
        case SolveStatus::Unbounded: throw UnboundedError("support is unbounded in this direction");
        default: throw SolverError("support LP failed: " + out.diagnostics);
    }
}

double support(const VPolytope& P, const Eigen::VectorXd& d) {
    return (P.vertices * d).maxCoeff();
}

bool is_empty(const HPolytope& P) {
    ConicProgram prog;
    prog.add_vector("x", P.dim());
    for (int r = 0; r < P.rows(); ++r) {
        ConicProgram::LinearRow row;
        for (int j = 0; j < P.dim(); ++j) {
            row.idx.push_back(j);
            row.coef.push_back(P.normals(r, j));
        }
        row.rhs = P.offsets[r];
        prog.add_inequality(std::move(row));
    }
    auto out = solve(prog);
    if (out.status == SolveStatus::Infeasible) return true;
    if (out.status == SolveStatus::Optimal) return false;
    throw SolverError("emptiness check failed: " + out.diagnostics);
}

bool is_bounded(const HPolytope& P) {
    for (int j = 0; j < P.dim(); ++j) {
        for (double sgn : {1.0, -1.0}) {
            Eigen::VectorXd d = Eigen::VectorXd::Zero(P.dim());
            d[j] = sgn;
            try {
                support(P, d);
            } catch (const UnboundedError&) {
                return false;
            }
        }
    }
    return true;
}

VPolytope affine_map(const VPolytope& P, const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
    if (A.cols() != P.dim() || A.rows() != b.size())
        throw ContractViolation("affine map dimension mismatch");
    Eigen::MatrixXd out(P.count(), A.rows());
    for (int i = 0; i < P.count(); ++i)
        out.row(i) = (A * P.vertex(i) + b).transpose();
    return VPolytope(out);
}

VPolytope prune_to_extreme(const VPolytope& P) {
    const int m = P.count();
    if (m <= P.dim() + 1) return P;
    std::vector<int> keep;
    for (int i = 0; i < m; ++i) {
        // i is redundant iff it is a convex combination of the other vertices.
        ConicProgram prog;
        prog.add_vector("lambda", m - 1);
        for (int j = 0; j < m - 1; ++j) {
            ConicProgram::LinearRow nn;
            nn.idx = {j};
            nn.coef = {-1.0};
            nn.rhs = 0.0;
            prog.add_inequality(std::move(nn));
        }
        ConicProgram::LinearRow sum1;
        for (int j = 0; j < m - 1; ++j) {
            sum1.idx.push_back(j);
            sum1.coef.push_back(1.0);
        }
        sum1.rhs = 1.0;
        prog.add_equality(std::move(sum1));
        for (int d = 0; d < P.dim(); ++d) {
            ConicProgram::LinearRow eq;
            int col = 0;
            for (int j = 0; j < m; ++j) {
                if (j == i) continue;
                eq.idx.push_back(col);
                eq.coef.push_back(P.vertices(j, d));
                ++col;
            }
            eq.rhs = P.vertices(i, d);
            prog.add_equality(std::move(eq));
        }
        auto out = solve(prog);
        if (out.status == SolveStatus::Infeasible) keep.push_back(i);
        else if (out.status != SolveStatus::Optimal)
            throw SolverError("extremality LP failed: " + out.diagnostics);
    }
    if (keep.empty()) {
        // All vertices coincide within tolerance.
        return VPolytope::single(P.vertex(0));
    }
    Eigen::MatrixXd verts(keep.size(), P.dim());
    for (size_t k = 0; k < keep.size(); ++k) verts.row(k) = P.vertices.row(keep[k]);
    return VPolytope(verts);
}

VPolytope minkowski_sum(const VPolytope& P, const VPolytope& Q) {
    if (P.dim() != Q.dim()) throw ContractViolation("Minkowski sum dimension mismatch");
    Eigen::MatrixXd sums(P.count() * Q.count(), P.dim());
    int k = 0;
    for (int i = 0; i < P.count(); ++i)
        for (int j = 0; j < Q.count(); ++j) sums.row(k++) = P.vertices.row(i) + Q.vertices.row(j);
    return prune_to_extreme(VPolytope(sums));
}

bool contains(const HPolytope& P, const VPolytope& Q, double tol) {
    if (P.dim() != Q.dim()) throw ContractViolation("containment dimension mismatch");
    for (int i = 0; i < Q.count(); ++i) {
        Eigen::VectorXd resid = P.normals * Q.vertex(i) - P.offsets;
        if (resid.maxCoeff() > tol) return false;
    }
    return true;
}

double box_volume(const HPolytope& P) {
    const int n = P.dim();
    Eigen::VectorXd upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    Eigen::VectorXd lower = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
    for (int r = 0; r < P.rows(); ++r) {
        int axis = -1;
        for (int j = 0; j < n; ++j) {
            if (P.normals(r, j) != 0.0) {
                if (axis >= 0) throw UnsupportedShapeError("box volume requires axis-aligned normals");
                axis = j;
            }
        }
        if (axis < 0) {
            if (P.offsets[r] < 0) return 0.0; // 0 <= negative: empty
            continue;
        }
        const double a = P.normals(r, axis);
        if (a > 0)
            upper[axis] = std::min(upper[axis], P.offsets[r] / a);
        else
            lower[axis] = std::max(lower[axis], P.offsets[r] / a);
    }
    double vol = 1.0;
    for (int j = 0; j < n; ++j) {
        if (!std::isfinite(upper[j]) || !std::isfinite(lower[j]))
            throw UnboundedError("box volume of an unbounded box");
        const double side = upper[j] - lower[j];
        if (side <= 0.0) return 0.0;
        vol *= side;
    }
    return vol;
}

std::optional<std::pair<Eigen::VectorXd, Eigen::VectorXd>> axis_box(const HPolytope& P) {
    const int n = P.dim();
    Eigen::VectorXd lo = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
    Eigen::VectorXd hi = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    for (int r = 0; r < P.rows(); ++r) {
        int axis = -1;
        for (int j = 0; j < n; ++j) {
            if (P.normals(r, j) != 0.0) {
                if (axis >= 0) return std::nullopt;
                axis = j;
            }
        }
        if (axis < 0) continue;
        const double a = P.normals(r, axis);
        if (a > 0)
            hi[axis] = std::min(hi[axis], P.offsets[r] / a);
        else
            lo[axis] = std::max(lo[axis], P.offsets[r] / a);
    }
    for (int j = 0; j < n; ++j)
        if (!std::isfinite(lo[j]) || !std::isfinite(hi[j])) return std::nullopt;
    return std::make_pair(lo, hi);
}

// ---------------------------------------------------------------------------
// Double description on the homogenization cone {y : C y <= 0}.
// ---------------------------------------------------------------------------
namespace {

struct DdResult {
    std::vector<Eigen::VectorXd> generators; // unit norm
};

// Generators of the pointed cone {y in R^d : C y <= 0}.
DdResult dd_cone(Eigen::MatrixXd C) {
    const int d = static_cast<int>(C.cols());
    for (int r = 0; r < C.rows(); ++r) {
        const double nr = C.row(r).norm();
        if (nr < kZeroTol) throw ContractViolation("zero row in cone description");
        C.row(r) /= nr;
    }
    // Initial basis: d rows of rank d.
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(C.transpose());
    if (qr.rank() < d)
        throw UnsupportedShapeError("cone is not pointed (polyhedron unbounded or degenerate)");
    // Greedy row selection for a well-conditioned basis.
    std::vector<int> basis;
    {
        Eigen::MatrixXd B(d, d);
        int count = 0;
        for (int r = 0; r < C.rows() && count < d; ++r) {
            B.row(count) = C.row(r);
            Eigen::FullPivLU<Eigen::MatrixXd> lu(B.topRows(count + 1) *
                                                 B.topRows(count + 1).transpose());
            if (lu.rank() == count + 1) {
                basis.push_back(r);
                ++count;
            }
        }
        if (count < d) throw UnsupportedShapeError("could not find a full-rank initial basis");
    }
    Eigen::MatrixXd B(d, d);
    for (int i = 0; i < d; ++i) B.row(i) = C.row(basis[i]);
    Eigen::MatrixXd R0 = -B.inverse();

    std::vector<Eigen::VectorXd> gen;
    for (int j = 0; j < d; ++j) gen.push_back(R0.col(j).normalized());
    std::vector<int> processed = basis;

    auto zero_set = [&](const Eigen::VectorXd& r) {
        std::vector<int> zs;
        for (int h : processed)
            if (std::abs(C.row(h).dot(r)) <= kZeroTol) zs.push_back(h);
        std::sort(zs.begin(), zs.end());
        return zs;
    };

    for (int r = 0; r < C.rows(); ++r) {
        if (std::find(processed.begin(), processed.end(), r) != processed.end()) continue;
        Eigen::VectorXd a = C.row(r).transpose();
        std::vector<double> val(gen.size());
        std::vector<int> pos, neg, zero;
        for (size_t g = 0; g < gen.size(); ++g) {
            val[g] = a.dot(gen[g]);
            if (val[g] > kZeroTol)
                pos.push_back(static_cast<int>(g));
            else if (val[g] < -kZeroTol)
                neg.push_back(static_cast<int>(g));
            else
                zero.push_back(static_cast<int>(g));
        }
        processed.push_back(r);
        if (pos.empty()) continue;

        std::vector<std::vector<int>> zsets(gen.size());
        for (size_t g = 0; g < gen.size(); ++g) zsets[g] = zero_set(gen[g]);

        std::vector<Eigen::VectorXd> next;
        for (int g : neg) next.push_back(gen[g]);
        for (int g : zero) next.push_back(gen[g]);
        for (int pg : pos) {
            for (int ng : neg) {
                // Combinatorial adjacency: no third generator's zero set
                // contains the common zero set of (pg, ng).
                std::vector<int> common;
                std::set_intersection(zsets[pg].begin(), zsets[pg].end(), zsets[ng].begin(),
                                      zsets[ng].end(), std::back_inserter(common));
                bool adjacent = true;
                for (size_t g = 0; g < gen.size(); ++g) {
                    if (static_cast<int>(g) == pg || static_cast<int>(g) == ng) continue;
                    if (std::includes(zsets[g].begin(), zsets[g].end(), common.begin(),
                                      common.end())) {
                        adjacent = false;
                        break;
                    }
                }
                if (!adjacent) continue;
                Eigen::VectorXd fresh = val[pg] * gen[ng] - val[ng] * gen[pg];
                const double nrm = fresh.norm();
                if (nrm < kZeroTol) continue;
                next.push_back(fresh / nrm);
            }
        }
        // Deduplicate.
        std::vector<Eigen::VectorXd> dedup;
        for (const auto& g : next) {
            bool found = false;
            for (const auto& u : dedup)
                if ((g - u).norm() < 1e-8 || (g + u).norm() < 1e-8) {
                    found = true;
                    break;
                }
            if (!found) dedup.push_back(g);
        }
        gen = std::move(dedup);
        if (gen.empty()) break; // cone is {0}: empty polytope after homogenization
    }

    // Drop non-extreme rays: extreme iff active rows have rank d-1.
    DdResult out;
    for (const auto& g : gen) {
        std::vector<int> act;
        for (int h = 0; h < C.rows(); ++h)
            if (std::abs(C.row(h).dot(g)) <= 10 * kZeroTol) act.push_back(h);
        if (act.size() < static_cast<size_t>(d - 1)) continue;
        Eigen::MatrixXd Act(act.size(), d);
        for (size_t i = 0; i < act.size(); ++i) Act.row(i) = C.row(act[i]);
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> aqr(Act);
        aqr.setThreshold(1e-7);
        if (aqr.rank() == d - 1) out.generators.push_back(g);
    }
    return out;
}

bool axis_box_bounds(const HPolytope& P, Eigen::VectorXd& lo, Eigen::VectorXd& hi) {
    const int n = P.dim();
    lo = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
    hi = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    for (int r = 0; r < P.rows(); ++r) {
        int axis = -1;
        for (int j = 0; j < n; ++j) {
            if (P.normals(r, j) != 0.0) {
                if (axis >= 0) return false;
                axis = j;
            }
        }
        if (axis < 0) {
            if (P.offsets[r] < 0) throw EmptySetError("empty box polytope");
            continue;
        }
        const double a = P.normals(r, axis);
        if (a > 0)
            hi[axis] = std::min(hi[axis], P.offsets[r] / a);
        else
            lo[axis] = std::max(lo[axis], P.offsets[r] / a);
    }
    for (int j = 0; j < n; ++j)
        if (!std::isfinite(lo[j]) || !std::isfinite(hi[j])) return false;
    return true;
}

} // namespace

VPolytope to_vertices(const HPolytope& P) {
    const int n = P.dim();
    if (n > 4)
        throw UnsupportedShapeError("vertex enumeration restricted to dimension <= 4");
    // Fast path for axis-aligned boxes (the parameter-set case).
    Eigen::VectorXd lo, hi;
    if (axis_box_bounds(P, lo, hi)) {
        for (int j = 0; j < n; ++j)
            if (lo[j] > hi[j] + kMergeTol) throw EmptySetError("empty box polytope");
        const int corners = 1 << n;
        Eigen::MatrixXd verts(corners, n);
        for (int c = 0; c < corners; ++c)
            for (int j = 0; j < n; ++j) verts(c, j) = (c >> j) & 1 ? hi[j] : std::min(lo[j], hi[j]);
        return VPolytope(verts);
    }

    Eigen::MatrixXd C(P.rows() + 1, n + 1);
    C.topLeftCorner(P.rows(), n) = P.normals;
    C.topRightCorner(P.rows(), 1) = -P.offsets;
    C.bottomLeftCorner(1, n).setZero();
    C(P.rows(), n) = -1.0;

    DdResult dd = dd_cone(C);
    std::vector<Eigen::VectorXd> verts;
    for (const auto& g : dd.generators) {
        const double t = g[n];
        if (t > 1e-7) {
            verts.push_back(g.head(n) / t);
        } else if (t > -1e-7) {
            throw UnboundedError("polytope has a recession direction; no vertex form");
        }
    }
    if (verts.empty()) throw EmptySetError("vertex enumeration of an empty polytope");
    Eigen::MatrixXd m(verts.size(), n);
    for (size_t i = 0; i < verts.size(); ++i) m.row(i) = verts[i].transpose();
    return VPolytope(m);
}

HPolytope to_halfspaces(const VPolytope& P) {
    const int n = P.dim();
    if (n > 4)
        throw UnsupportedShapeError("facet enumeration restricted to dimension <= 4");
    if (P.count() == 1) {
        // Singleton: degenerate box at the point.
        return HPolytope::box(P.vertex(0), P.vertex(0));
    }
    Eigen::VectorXd c = P.vertices.colwise().mean().transpose();
    Eigen::MatrixXd U = P.vertices.rowwise() - c.transpose();
    // Full-dimensionality check.
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(U);
    qr.setThreshold(1e-9);
    if (qr.rank() < n)
        throw UnsupportedShapeError("facet enumeration requires a full-dimensional vertex set");
    // Facets of conv(P) are vertices of the polar {a : U a <= 1}.
    VPolytope polar = to_vertices(HPolytope(U, Eigen::VectorXd::Ones(P.count())));
    Eigen::MatrixXd A = polar.vertices;
    Eigen::VectorXd b = Eigen::VectorXd::Ones(A.rows()) + A * c;
    return HPolytope(A, b);
}

std::vector<Eigen::VectorXd> sample_uniform(const HPolytope& P, const Eigen::VectorXd& start,
                                            int count, RngStream& rng) {
    const int n = P.dim();
    const int burn_in = 50 * n;
    const int thinning = 10;
    std::vector<Eigen::VectorXd> out;
    out.reserve(count);
    Eigen::VectorXd x = start;
    int needed_steps = burn_in + count * thinning;
    for (int step = 0; step < needed_steps; ++step) {
        Eigen::VectorXd dvec(n);
        for (int j = 0; j < n; ++j) dvec[j] = rng.next_gaussian();
        const double nrm = dvec.norm();
        if (nrm < 1e-14) continue;
        dvec /= nrm;
        double lob = -std::numeric_limits<double>::infinity();
        double hib = std::numeric_limits<double>::infinity();
        const Eigen::VectorXd ax = P.normals * x;
        const Eigen::VectorXd ad = P.normals * dvec;
        for (int r = 0; r < P.rows(); ++r) {
            const double slack = P.offsets[r] - ax[r];
            if (ad[r] > 1e-14)
                hib = std::min(hib, slack / ad[r]);
            else if (ad[r] < -1e-14)
                lob = std::max(lob, slack / ad[r]);
        }
        if (!std::isfinite(lob) || !std::isfinite(hib))
            throw UnboundedError("hit-and-run on an unbounded polytope");
        if (hib < lob) {
            // Numerical corner: stay put this step.
            hib = lob = 0.0;
        }
        x += rng.next_uniform(lob, hib) * dvec;
        if (step >= burn_in && (step - burn_in) % thinning == thinning - 1) out.push_back(x);
    }
    while (static_cast<int>(out.size()) < count) out.push_back(x);
    return out;
}

std::vector<Eigen::VectorXd> sample_uniform(const VPolytope& P, int count, std::uint64_t seed) {
    RngStream rng(seed);
    if (P.count() == 1) return std::vector<Eigen::VectorXd>(count, P.vertex(0));
    Eigen::VectorXd start = P.vertices.colwise().mean().transpose();
    // Degenerate (flat) vertex sets collapse to their mean; full-dimensional
    // sets run the chain on the facet form.
    HPolytope H = [&] {
        try {
            return to_halfspaces(P);
        } catch (const UnsupportedShapeError&) {
            return HPolytope::box(start, start);
        }
    }();
    if ((H.normals * start - H.offsets).maxCoeff() > -1e-15) {
        // Start must be interior; fall back to repeating the mean.
        return std::vector<Eigen::VectorXd>(count, start);
    }
    return sample_uniform(H, start, count, rng);
}

std::string polytope_to_json(const HPolytope& P) {
    nlohmann::json j;
    j["normals"] = nlohmann::json::array();
    for (int r = 0; r < P.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < P.dim(); ++c) row.push_back(P.normals(r, c));
        j["normals"].push_back(row);
    }
    j["offsets"] = std::vector<double>(P.offsets.data(), P.offsets.data() + P.offsets.size());
    return j.dump();
}

std::string polytope_to_json(const VPolytope& P) {
    nlohmann::json j;
    j["vertices"] = nlohmann::json::array();
    for (int r = 0; r < P.count(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < P.dim(); ++c) row.push_back(P.vertices(r, c));
        j["vertices"].push_back(row);
    }
    return j.dump();
}

HPolytope hpolytope_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    const auto& rows = j.at("normals");
    const auto& offs = j.at("offsets");
    Eigen::MatrixXd A(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c) A(r, c) = rows[r][c].get<double>();
    Eigen::VectorXd b(offs.size());
    for (size_t r = 0; r < offs.size(); ++r) b[r] = offs[r].get<double>();
    return HPolytope(A, b);
}

VPolytope vpolytope_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    const auto& rows = j.at("vertices");
    Eigen::MatrixXd V(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c) V(r, c) = rows[r][c].get<double>();
    return VPolytope(V);
}

} // namespace peampc
