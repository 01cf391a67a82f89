#include "peampc/conic.hpp"

#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "peampc/errors.hpp"

namespace peampc {

Eigen::VectorXd svec(const Eigen::MatrixXd& X) {
    const int n = static_cast<int>(X.rows());
    Eigen::VectorXd v(svec_dim(n));
    const double rt2 = std::sqrt(2.0);
    int k = 0;
    for (int j = 0; j < n; ++j) {
        v[k++] = X(j, j);
        for (int i = j + 1; i < n; ++i) v[k++] = rt2 * 0.5 * (X(i, j) + X(j, i));
    }
    return v;
}

Eigen::MatrixXd smat(const Eigen::VectorXd& v) {
    // Invert m = n(n+1)/2.
    const int m = static_cast<int>(v.size());
    int n = static_cast<int>((std::sqrt(8.0 * m + 1.0) - 1.0) / 2.0 + 0.5);
    Eigen::MatrixXd X(n, n);
    const double inv_rt2 = 1.0 / std::sqrt(2.0);
    int k = 0;
    for (int j = 0; j < n; ++j) {
        X(j, j) = v[k++];
        for (int i = j + 1; i < n; ++i) {
            X(i, j) = X(j, i) = inv_rt2 * v[k++];
        }
    }
    return X;
}

std::string to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::Optimal: return "optimal";
        case SolveStatus::Infeasible: return "infeasible";
        case SolveStatus::Unbounded: return "unbounded";
        case SolveStatus::NumericalFailure: return "numerical-failure";
    }
    return "unknown";
}

int ConicProgram::add_scalar(const std::string& name) { return add_vector(name, 1); }

int ConicProgram::add_vector(const std::string& name, int dim) {
    if (dim <= 0) throw ContractViolation("variable block '" + name + "' must have positive size");
    blocks_.push_back({name, n_, dim, 0});
    n_ += dim;
    return blocks_.back().offset;
}

int ConicProgram::add_symmetric(const std::string& name, int n) {
    if (n <= 0) throw ContractViolation("symmetric block '" + name + "' must have positive size");
    blocks_.push_back({name, n_, svec_dim(n), n});
    n_ += svec_dim(n);
    return blocks_.back().offset;
}

const ConicProgram::VariableBlock& ConicProgram::block(const std::string& name) const {
    for (const auto& b : blocks_)
        if (b.name == name) return b;
    throw ContractViolation("unknown variable block '" + name + "'");
}

void ConicProgram::add_objective_quadratic(int i, int j, double q) {
    if (i < 0 || j < 0 || i >= n_ || j >= n_) throw ContractViolation("objective index out of range");
    q_triplets_.push_back({i, j, q});
}

void ConicProgram::add_objective_linear(int i, double c) {
    if (i < 0 || i >= n_) throw ContractViolation("objective index out of range");
    c_terms_.emplace_back(i, c);
}

void ConicProgram::set_objective_linear_block(const std::string& name, const Eigen::VectorXd& c) {
    const auto& b = block(name);
    if (c.size() != b.size) throw ContractViolation("objective block size mismatch");
    for (int k = 0; k < b.size; ++k) add_objective_linear(b.offset + k, c[k]);
}

void ConicProgram::add_equality(LinearRow row) {
    for (int i : row.idx)
        if (i < 0 || i >= n_) throw ContractViolation("equality index out of range");
    equalities_.push_back(std::move(row));
}

void ConicProgram::add_inequality(LinearRow row) {
    for (int i : row.idx)
        if (i < 0 || i >= n_) throw ContractViolation("inequality index out of range");
    inequalities_.push_back(std::move(row));
}

void ConicProgram::add_psd_block(PsdBlock block) {
    const auto sym_err = [](const Eigen::MatrixXd& M) {
        return (M - M.transpose()).cwiseAbs().maxCoeff();
    };
    if (block.constant.rows() != block.constant.cols())
        throw ContractViolation("PSD block constant must be square");
    if (sym_err(block.constant) > 1e-12 * std::max(1.0, block.constant.cwiseAbs().maxCoeff()))
        throw ContractViolation("PSD block constant must be symmetric");
    for (auto& t : block.terms) {
        if (t.var < 0 || t.var >= n_) throw ContractViolation("PSD term index out of range");
        if (t.coef.rows() != block.constant.rows() || t.coef.cols() != block.constant.cols())
            throw ContractViolation("PSD term dimension mismatch");
        if (sym_err(t.coef) > 1e-12 * std::max(1.0, t.coef.cwiseAbs().maxCoeff()))
            throw ContractViolation("PSD term coefficient must be symmetric");
        t.coef = 0.5 * (t.coef + t.coef.transpose()).eval();
    }
    block.constant = 0.5 * (block.constant + block.constant.transpose()).eval();
    psd_blocks_.push_back(std::move(block));
}

void ConicProgram::add_symmetric_block_terms(PsdBlock& blk, const VariableBlock& m, double sign) {
    if (m.matrix_size == 0) throw ContractViolation("block '" + m.name + "' is not symmetric");
    const int n = m.matrix_size;
    const double inv_rt2 = 1.0 / std::sqrt(2.0);
    int k = 0;
    for (int j = 0; j < n; ++j) {
        for (int i = j; i < n; ++i) {
            Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(n, n);
            if (i == j) {
                basis(i, i) = 1.0;
            } else {
                basis(i, j) = basis(j, i) = inv_rt2;
            }
            blk.terms.push_back({m.offset + k, sign * basis});
            ++k;
        }
    }
}

Eigen::MatrixXd ConicProgram::dense_hessian() const {
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(n_, n_);
    for (const auto& t : q_triplets_) {
        Q(t.i, t.j) += 0.5 * t.v;
        Q(t.j, t.i) += 0.5 * t.v;
    }
    return Q;
}

const Eigen::VectorXd ConicProgram::linear_cost() const {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(n_);
    for (const auto& [i, v] : c_terms_) c[i] += v;
    return c;
}

double ConicProgram::eval_objective(const Eigen::VectorXd& x) const {
    Eigen::MatrixXd Q = dense_hessian();
    return 0.5 * x.dot(Q * x) + linear_cost().dot(x) + obj_const_;
}

Eigen::VectorXd ConicProgram::block_values(const Eigen::VectorXd& x, const std::string& name) const {
    const auto& b = block(name);
    return x.segment(b.offset, b.size);
}

Eigen::MatrixXd ConicProgram::block_matrix(const Eigen::VectorXd& x, const std::string& name) const {
    const auto& b = block(name);
    if (b.matrix_size == 0) throw ContractViolation("block '" + name + "' is not symmetric");
    return smat(x.segment(b.offset, b.size));
}

ResidualReport verify_solution(const ConicProgram& program, const Eigen::VectorXd& x) {
    ResidualReport report;
    report.min_psd_eigenvalue = std::numeric_limits<double>::infinity();
    for (const auto& row : program.equalities()) {
        double v = -row.rhs;
        for (size_t k = 0; k < row.idx.size(); ++k) v += row.coef[k] * x[row.idx[k]];
        report.max_equality_residual = std::max(report.max_equality_residual, std::abs(v));
    }
    for (const auto& row : program.inequalities()) {
        double v = -row.rhs;
        for (size_t k = 0; k < row.idx.size(); ++k) v += row.coef[k] * x[row.idx[k]];
        report.max_inequality_violation = std::max(report.max_inequality_violation, v);
    }
    for (const auto& blk : program.psd_blocks()) {
        Eigen::MatrixXd S = blk.constant;
        for (const auto& t : blk.terms) S += x[t.var] * t.coef;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
        report.min_psd_eigenvalue = std::min(report.min_psd_eigenvalue, es.eigenvalues().minCoeff());
    }
    return report;
}

std::string ConicProgram::to_json() const {
    nlohmann::json j;
    j["num_variables"] = n_;
    for (const auto& b : blocks_)
        j["blocks"].push_back({{"name", b.name},
                               {"offset", b.offset},
                               {"size", b.size},
                               {"matrix_size", b.matrix_size}});
    for (const auto& t : q_triplets_) j["objective"]["quadratic"].push_back({t.i, t.j, t.v});
    for (const auto& [i, v] : c_terms_) j["objective"]["linear"].push_back({i, v});
    j["objective"]["constant"] = obj_const_;
    auto row_json = [](const LinearRow& r) {
        nlohmann::json jr;
        jr["idx"] = r.idx;
        jr["coef"] = r.coef;
        jr["rhs"] = r.rhs;
        return jr;
    };
    for (const auto& r : equalities_) j["equalities"].push_back(row_json(r));
    for (const auto& r : inequalities_) j["inequalities"].push_back(row_json(r));
    auto mat_json = [](const Eigen::MatrixXd& M) {
        nlohmann::json jm = nlohmann::json::array();
        for (Eigen::Index i = 0; i < M.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(M(i, c));
            jm.push_back(row);
        }
        return jm;
    };
    for (const auto& blk : psd_blocks_) {
        nlohmann::json jb;
        jb["constant"] = mat_json(blk.constant);
        for (const auto& t : blk.terms) jb["terms"].push_back({{"var", t.var}, {"coef", mat_json(t.coef)}});
        j["psd_blocks"].push_back(jb);
    }
    return j.dump();
}

} // namespace peampc
