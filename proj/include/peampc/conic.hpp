#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

namespace peampc {

/// Dimension of svec(S) for an n x n symmetric matrix.
inline int svec_dim(int n) { return n * (n + 1) / 2; }

/// Symmetric-to-vector embedding that preserves inner products:
/// svec(X)' svec(Y) = tr(XY). Lower triangle, column major, off-diagonal
/// entries scaled by sqrt(2).
Eigen::VectorXd svec(const Eigen::MatrixXd& X);
Eigen::MatrixXd smat(const Eigen::VectorXd& v);

enum class SolveStatus { Optimal, Infeasible, Unbounded, NumericalFailure };

std::string to_string(SolveStatus s);

struct SolverSettings {
    double feas_tol = 1e-8;
    double gap_tol = 1e-8;
    int max_iterations = 100;
    /// Residual bound an "optimal" outcome must satisfy in the independent
    /// post-solve check; failing it downgrades the status.
    double verify_tol = 1e-6;

    static SolverSettings strict() { return SolverSettings{}; }
    /// Loose profile for long Monte-Carlo runs.
    static SolverSettings loose() { return SolverSettings{1e-6, 1e-6, 100, 1e-4}; }
};

struct ResidualReport {
    double max_equality_residual = 0.0;
    double max_inequality_violation = 0.0;
    /// Minimum eigenvalue over all PSD blocks (+inf when there are none).
    double min_psd_eigenvalue = 0.0;
};

struct SolveOutcome {
    SolveStatus status = SolveStatus::NumericalFailure;
    Eigen::VectorXd x;         // primal values, flat layout
    double objective = 0.0;    // includes the program's constant term
    int iterations = 0;
    double solve_seconds = 0.0;
    std::string diagnostics;   // backend notes on failure paths
    ResidualReport residuals;  // filled when status == Optimal
};

/// One convex program: quadratic (PSD Hessian) + linear objective over
/// scalar/vector/symmetric variable blocks, with linear equalities, linear
/// inequalities and affine PSD constraints. This is the single solver boundary
/// used by every optimization in the project.
class ConicProgram {
public:
    struct VariableBlock {
        std::string name;
        int offset = 0;
        int size = 0;        // flat size (svec size for symmetric blocks)
        int matrix_size = 0; // 0 unless symmetric
    };

    struct LinearRow {
        std::vector<int> idx;
        std::vector<double> coef;
        double rhs = 0.0;
    };

    struct PsdTerm {
        int var = 0;
        Eigen::MatrixXd coef; // symmetric
    };

    /// Affine matrix expression constant + sum_i x_i * coef_i required PSD.
    struct PsdBlock {
        Eigen::MatrixXd constant;
        std::vector<PsdTerm> terms;
    };

    int add_scalar(const std::string& name);
    int add_vector(const std::string& name, int dim);
    /// Adds an n x n symmetric matrix block stored as svec coordinates.
    int add_symmetric(const std::string& name, int n);

    int num_variables() const { return n_; }
    const std::vector<VariableBlock>& blocks() const { return blocks_; }
    const VariableBlock& block(const std::string& name) const;

    /// Objective is 0.5 x'Qx + c'x + constant. Quadratic terms accumulate
    /// symmetrically; Q must end up PSD (validated in solve()).
    void add_objective_quadratic(int i, int j, double q);
    void add_objective_linear(int i, double c);
    void add_objective_constant(double c) { obj_const_ += c; }
    void set_objective_linear_block(const std::string& name, const Eigen::VectorXd& c);

    void add_equality(LinearRow row);
    /// Row means sum coef_k x_{idx_k} <= rhs.
    void add_inequality(LinearRow row);
    void add_psd_block(PsdBlock block);

    /// Bind an entire symmetric variable block into a PSD expression with a
    /// sign, i.e. expression += sign * M.
    static void add_symmetric_block_terms(PsdBlock& blk, const VariableBlock& m, double sign);

    int num_equalities() const { return static_cast<int>(equalities_.size()); }
    int num_inequalities() const { return static_cast<int>(inequalities_.size()); }
    int num_psd_blocks() const { return static_cast<int>(psd_blocks_.size()); }

    const std::vector<LinearRow>& equalities() const { return equalities_; }
    const std::vector<LinearRow>& inequalities() const { return inequalities_; }
    const std::vector<PsdBlock>& psd_blocks() const { return psd_blocks_; }

    bool has_quadratic_objective() const { return !q_triplets_.empty(); }
    Eigen::MatrixXd dense_hessian() const;
    const Eigen::VectorXd linear_cost() const;
    double objective_constant() const { return obj_const_; }

    double eval_objective(const Eigen::VectorXd& x) const;

    /// Extract the slice of a flat primal vector belonging to a block; for
    /// symmetric blocks returns the matrix (smat of the slice).
    Eigen::VectorXd block_values(const Eigen::VectorXd& x, const std::string& name) const;
    Eigen::MatrixXd block_matrix(const Eigen::VectorXd& x, const std::string& name) const;

    /// JSON debug dump for post-mortem reproduction of solver failures.
    std::string to_json() const;

private:
    friend class ConicSolver;
    struct QTerm {
        int i, j;
        double v;
    };
    int n_ = 0;
    std::vector<VariableBlock> blocks_;
    std::vector<QTerm> q_triplets_;
    std::vector<std::pair<int, double>> c_terms_;
    double obj_const_ = 0.0;
    std::vector<LinearRow> equalities_;
    std::vector<LinearRow> inequalities_;
    std::vector<PsdBlock> psd_blocks_;
};

/// Solve the program. Quadratic objectives run on a Nesterov-Todd scaled
/// primal-dual path; linear objectives run on the homogeneous self-dual
/// embedding, which also produces infeasibility/unboundedness certificates.
/// An "optimal" outcome has passed the independent residual check.
SolveOutcome solve(const ConicProgram& program, const SolverSettings& settings = {});

/// Independent residual check of a primal point against the program.
ResidualReport verify_solution(const ConicProgram& program, const Eigen::VectorXd& x);

} // namespace peampc
