#pragma once

#include <stdexcept>
#include <string>

namespace peampc {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// An operation required a nonempty set but the set is empty.
class EmptySetError : public Error {
public:
    explicit EmptySetError(const std::string& what) : Error(what) {}
};

/// A support function or optimum is unbounded.
class UnboundedError : public Error {
public:
    explicit UnboundedError(const std::string& what) : Error(what) {}
};

/// Shape-restricted operation (e.g. box volume) applied to an unsupported shape.
class UnsupportedShapeError : public Error {
public:
    explicit UnsupportedShapeError(const std::string& what) : Error(what) {}
};

/// Observed data is inconsistent with the assumed model class and disturbance bound.
class ModelFalsifiedError : public Error {
public:
    explicit ModelFalsifiedError(const std::string& what) : Error(what) {}
};

/// An optimization problem that is required to be feasible was not.
class InfeasibleError : public Error {
public:
    explicit InfeasibleError(const std::string& what) : Error(what) {}
};

/// Numerical failure inside a solver; carries backend diagnostics.
class SolverError : public Error {
public:
    explicit SolverError(const std::string& what) : Error(what) {}
};

/// A documented precondition was violated by the caller.
class ContractViolation : public Error {
public:
    explicit ContractViolation(const std::string& what) : Error(what) {}
};

/// Offline synthesis (terminal set, terminal cost) failed.
class SynthesisError : public Error {
public:
    explicit SynthesisError(const std::string& what) : Error(what) {}
};

/// Invalid experiment configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

} // namespace peampc
