#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace biaslab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A parameter is outside the domain of the operation (e.g. rho > 1, beta <= 0).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Two templates coincide, violating x_i != x_j.
class DegenerateTemplatesError : public Error {
public:
    using Error::Error;
};

/// A circulant correlation sequence has a non-positive eigenvalue.
class SpectrumError : public Error {
public:
    SpectrumError(const std::string& what, Index index, double eigenvalue)
        : Error(what), index_(index), eigenvalue_(eigenvalue) {}

    Index index() const noexcept { return index_; }
    double eigenvalue() const noexcept { return eigenvalue_; }

private:
    Index index_;
    double eigenvalue_;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

/// The Gram matrix could not be factorized (indefinite or singular where inversion is needed).
class FactorizationError : public Error {
public:
    using Error::Error;
};

class RankError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

/// A closed-form prediction was requested outside the hypotheses it was derived under.
class HypothesisError : public Error {
public:
    using Error::Error;
};

/// An approximation formula is undefined for the given input (e.g. C_l <= 0).
class ApproximationBreakdownError : public Error {
public:
    using Error::Error;
};

/// The requested oracle precision could not be reached within the node or sample budget.
class BudgetError : public Error {
public:
    BudgetError(const std::string& what, double achieved) : Error(what), achieved_(achieved) {}
    double achieved_bound() const noexcept { return achieved_; }

private:
    double achieved_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace biaslab
