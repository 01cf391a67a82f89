#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "peampc/conic.hpp"
#include "peampc/rng.hpp"

namespace peampc {

/// Halfspace representation {x : normals * x <= offsets}. Values are
/// immutable after construction and safe to share across threads; all
/// operations below are pure functions.
struct HPolytope {
    Eigen::MatrixXd normals; // r x n
    Eigen::VectorXd offsets; // r

    HPolytope() = default;
    HPolytope(Eigen::MatrixXd A, Eigen::VectorXd b);

    int dim() const { return static_cast<int>(normals.cols()); }
    int rows() const { return static_cast<int>(normals.rows()); }

    /// Construction path for sets that must be compact (tube cross-sections,
    /// parameter sets): verifies finite support in +-every coordinate
    /// direction and nonemptiness.
    static HPolytope bounded(Eigen::MatrixXd A, Eigen::VectorXd b);

    /// Axis-aligned box [lo, hi] with rows ordered [I; -I].
    static HPolytope box(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);
    /// Symmetric infinity-norm ball of the given radius.
    static HPolytope inf_ball(int n, double radius);
};

/// Vertex representation; one vertex per row. Duplicates within 1e-9 are
/// merged on construction and the list must be nonempty.
struct VPolytope {
    Eigen::MatrixXd vertices; // m x n

    VPolytope() = default;
    explicit VPolytope(Eigen::MatrixXd verts);
    static VPolytope single(const Eigen::VectorXd& v);

    int dim() const { return static_cast<int>(vertices.cols()); }
    int count() const { return static_cast<int>(vertices.rows()); }
    Eigen::VectorXd vertex(int i) const { return vertices.row(i).transpose(); }
};

/// max_{x in P} d'x. Throws EmptySetError / UnboundedError.
double support(const HPolytope& P, const Eigen::VectorXd& d);
double support(const VPolytope& P, const Eigen::VectorXd& d);

bool is_empty(const HPolytope& P);
bool is_bounded(const HPolytope& P);

/// Image {A x + b : x in P}.
VPolytope affine_map(const VPolytope& P, const Eigen::MatrixXd& A, const Eigen::VectorXd& b);

/// P + Q with redundant (non-extreme) vertices pruned.
VPolytope minkowski_sum(const VPolytope& P, const VPolytope& Q);

/// True iff every vertex of Q satisfies P's inequalities within tol.
bool contains(const HPolytope& P, const VPolytope& Q, double tol = 1e-8);

/// Volume of an axis-aligned box given in halfspace form. Throws
/// UnsupportedShapeError for anything that is not a box.
double box_volume(const HPolytope& P);

/// [lo, hi] bounds when P is an axis-aligned bounded box, empty otherwise.
std::optional<std::pair<Eigen::VectorXd, Eigen::VectorXd>> axis_box(const HPolytope& P);

/// Vertex enumeration via double description (dimensions <= 4).
VPolytope to_vertices(const HPolytope& P);
/// Facet enumeration of a full-dimensional vertex set (dimensions <= 4).
HPolytope to_halfspaces(const VPolytope& P);

/// Remove vertices that are convex combinations of the others.
VPolytope prune_to_extreme(const VPolytope& P);

/// `count` points approximately uniform on P: hit-and-run chain with 50*n
/// burn-in steps and thinning 10, deterministic for a given seed. Singletons
/// return the point repeated.
std::vector<Eigen::VectorXd> sample_uniform(const VPolytope& P, int count, std::uint64_t seed);
/// Same chain directly on a halfspace form with a known interior start.
std::vector<Eigen::VectorXd> sample_uniform(const HPolytope& P, const Eigen::VectorXd& start,
                                            int count, RngStream& rng);

std::string polytope_to_json(const HPolytope& P);
std::string polytope_to_json(const VPolytope& P);
HPolytope hpolytope_from_json(const std::string& text);
VPolytope vpolytope_from_json(const std::string& text);

} // namespace peampc
