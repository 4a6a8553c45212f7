#pragma once

#include "biaslab/common.hpp"
#include "biaslab/rng.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace biaslab {

inline constexpr double kNormTolerance = 1e-9;
inline constexpr double kDistinctTolerance = 1e-12;

/// L templates in R^d sharing one Euclidean norm. Column l is template x_l.
class TemplateSet {
public:
    explicit TemplateSet(Matrix data, std::vector<std::string> labels = {})
        : data_(std::move(data)), labels_(std::move(labels)) {
        validate();
    }

    const Matrix& data() const noexcept { return data_; }
    Index dim() const noexcept { return data_.rows(); }
    Index count() const noexcept { return data_.cols(); }
    double common_norm() const noexcept { return norm_; }
    const std::vector<std::string>& labels() const noexcept { return labels_; }
    auto column(Index l) const { return data_.col(l); }

    std::string label(Index l) const {
        if (static_cast<std::size_t>(l) < labels_.size()) return labels_[static_cast<std::size_t>(l)];
        return "x" + std::to_string(l);
    }

private:
    void validate() {
        if (data_.cols() < 2) throw DimensionError("a template set needs at least 2 templates");
        if (data_.rows() < 1) throw DimensionError("templates must have dimension d >= 1");
        if (!data_.allFinite()) throw DomainError("template entries must be finite");
        if (!labels_.empty() && labels_.size() != static_cast<std::size_t>(data_.cols()))
            throw DimensionError("label count does not match template count");

        const Vector norms = data_.colwise().norm().transpose();
        norm_ = norms.mean();
        if (!(norm_ > 0.0)) throw DomainError("templates must have positive norm");
        for (Index l = 0; l < norms.size(); ++l) {
            if (std::abs(norms[l] - norm_) > kNormTolerance * norm_) {
                std::ostringstream msg;
                msg << "template " << l << " has norm " << norms[l] << ", expected common norm " << norm_;
                throw DomainError(msg.str());
            }
        }
        const Matrix g = data_.transpose() * data_;
        for (Index i = 0; i < g.rows(); ++i) {
            for (Index j = i + 1; j < g.cols(); ++j) {
                const double r = g(i, j) / (norms[i] * norms[j]);
                if (r >= 1.0 - kDistinctTolerance) {
                    std::ostringstream msg;
                    msg << "templates " << i << " and " << j << " coincide (normalized correlation " << r << ")";
                    throw DegenerateTemplatesError(msg.str());
                }
            }
        }
    }

    Matrix data_;
    std::vector<std::string> labels_;
    double norm_ = 0.0;
};

namespace detail {

inline void rescale_columns(Matrix& x, double norm) {
    for (Index l = 0; l < x.cols(); ++l) {
        const double n = x.col(l).norm();
        if (n > 0.0 && n != norm) x.col(l) *= norm / n;
    }
}

inline void require_positive_norm(double norm) {
    if (!(norm > 0.0) || !std::isfinite(norm)) throw DomainError("norm must be a positive finite number");
}

/// Eigenvalues of the symmetric circulant matrix with first row `c`, by direct DFT.
inline std::vector<double> circulant_spectrum(std::span<const double> c) {
    const std::size_t n = c.size();
    std::vector<double> lambda(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t m = 0; m < n; ++m)
            s += c[m] * std::cos(2.0 * std::numbers::pi * static_cast<double>((j * m) % n) / static_cast<double>(n));
        lambda[j] = s;
    }
    return lambda;
}

inline void validate_circulant_sequence(std::span<const double> rho_seq) {
    const std::size_t n = rho_seq.size();
    if (n < 2) throw DimensionError("a circulant sequence needs at least 2 entries");
    for (double r : rho_seq)
        if (!std::isfinite(r)) throw DomainError("circulant sequence entries must be finite");
    if (std::abs(rho_seq[0] - 1.0) > 1e-12) throw DomainError("circulant sequence must start with 1");
    for (std::size_t m = 1; m < n; ++m) {
        if (std::abs(rho_seq[m] - rho_seq[n - m]) > 1e-12) {
            std::ostringstream msg;
            msg << "circulant sequence is not symmetric: rho[" << m << "]=" << rho_seq[m] << " but rho[" << n - m
                << "]=" << rho_seq[n - m];
            throw DomainError(msg.str());
        }
    }
}

/// Returns the spectrum, throwing SpectrumError on the first non-positive eigenvalue.
inline std::vector<double> checked_circulant_spectrum(std::span<const double> rho_seq) {
    auto lambda = circulant_spectrum(rho_seq);
    for (std::size_t j = 0; j < lambda.size(); ++j) {
        if (!(lambda[j] > 0.0)) {
            std::ostringstream msg;
            msg << "circulant correlation is not positive definite: eigenvalue " << j << " = " << lambda[j];
            throw SpectrumError(msg.str(), static_cast<Index>(j), lambda[j]);
        }
    }
    return lambda;
}

/// Lower-triangular factor F with F F^T = a for a positive semidefinite `a`. Zero pivots
/// (within `tol`) produce zero columns; a clearly negative pivot is an error.
inline Matrix semidefinite_cholesky(const Matrix& a, double tol = 1e-10) {
    const Index n = a.rows();
    Matrix f = Matrix::Zero(n, n);
    for (Index j = 0; j < n; ++j) {
        double d = a(j, j) - f.row(j).head(j).squaredNorm();
        if (d < -tol) throw FactorizationError("Gram matrix is not positive semidefinite");
        if (d <= tol) continue;
        const double pivot = std::sqrt(d);
        f(j, j) = pivot;
        for (Index i = j + 1; i < n; ++i) f(i, j) = (a(i, j) - f.row(i).head(j).dot(f.row(j).head(j))) / pivot;
    }
    return f;
}

}  // namespace detail

/// Normalized cross-correlation of the templates, i.e. the covariance of the Gram-space
/// Gaussian S/||x||, together with a lower-triangular factor used for sampling.
class GramModel {
public:
    /// Validates `rho` (symmetric, unit diagonal, entries in [-1,1], positive semidefinite).
    static GramModel from_correlation(Matrix rho, double scale) {
        detail::require_positive_norm(scale);
        const Index n = rho.rows();
        if (n < 2 || rho.cols() != n) throw DimensionError("correlation matrix must be square with L >= 2");
        if (!rho.allFinite()) throw DomainError("correlation matrix must be finite");
        if ((rho - rho.transpose()).cwiseAbs().maxCoeff() > 1e-12)
            throw DomainError("correlation matrix must be symmetric");
        for (Index i = 0; i < n; ++i) {
            if (std::abs(rho(i, i) - 1.0) > kNormTolerance) throw DomainError("correlation matrix needs a unit diagonal");
            rho(i, i) = 1.0;
        }
        if (rho.cwiseAbs().maxCoeff() > 1.0 + 1e-12) throw DomainError("correlation entries must lie in [-1, 1]");
        rho = (0.5 * (rho + rho.transpose())).cwiseMax(-1.0).cwiseMin(1.0);

        GramModel g;
        g.rho_ = std::move(rho);
        g.scale_ = scale;
        g.size_ = n;
        g.min_eigenvalue_ = Eigen::SelfAdjointEigenSolver<Matrix>(g.rho_, Eigen::EigenvaluesOnly).eigenvalues()(0);
        g.factorize();
        return g;
    }

    static GramModel identity(Index size, double scale) {
        detail::require_positive_norm(scale);
        if (size < 2) throw DimensionError("identity Gram needs L >= 2");
        GramModel g;
        g.identity_ = true;
        g.size_ = size;
        g.scale_ = scale;
        g.min_eigenvalue_ = 1.0;
        return g;
    }

    /// Gram of a circulant template family; spectrum checked by DFT. rho_seq = e_0 yields the
    /// dense-free identity model.
    static GramModel circulant(std::span<const double> rho_seq, double scale) {
        detail::validate_circulant_sequence(rho_seq);
        const bool is_identity = std::all_of(rho_seq.begin() + 1, rho_seq.end(), [](double r) { return r == 0.0; });
        if (is_identity) return identity(static_cast<Index>(rho_seq.size()), scale);
        const auto lambda = detail::checked_circulant_spectrum(rho_seq);
        const Index n = static_cast<Index>(rho_seq.size());
        Matrix rho(n, n);
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j) rho(i, j) = rho_seq[static_cast<std::size_t>(((j - i) % n + n) % n)];
        detail::require_positive_norm(scale);
        GramModel g;
        g.rho_ = std::move(rho);
        g.scale_ = scale;
        g.size_ = n;
        g.min_eigenvalue_ = *std::min_element(lambda.begin(), lambda.end());
        g.factorize();
        return g;
    }

    Index size() const noexcept { return size_; }
    double scale() const noexcept { return scale_; }
    bool is_identity() const noexcept { return identity_; }
    /// False when the Gram is only positive semidefinite (e.g. x_1 = -x_0).
    bool full_rank() const noexcept { return full_rank_; }
    double min_eigenvalue() const noexcept { return min_eigenvalue_; }

    double rho(Index i, Index j) const {
        if (identity_) return i == j ? 1.0 : 0.0;
        return rho_(i, j);
    }

    Matrix rho() const { return identity_ ? Matrix::Identity(size_, size_) : rho_; }

    /// Lower-triangular F with F F^T = rho.
    Matrix factor() const { return identity_ ? Matrix::Identity(size_, size_) : factor_; }

    /// Covariance of the unnormalized inner products <n, x_k>: scale^2 * rho.
    Matrix covariance() const { return scale_ * scale_ * rho(); }

private:
    GramModel() = default;

    void factorize() {
        if (min_eigenvalue_ < -1e-10) {
            std::ostringstream msg;
            msg << "Gram matrix is indefinite (smallest eigenvalue " << min_eigenvalue_ << ")";
            throw FactorizationError(msg.str());
        }
        Eigen::LLT<Matrix> llt(rho_);
        if (min_eigenvalue_ > 1e-12 && llt.info() == Eigen::Success) {
            factor_ = llt.matrixL();
            full_rank_ = true;
        } else {
            factor_ = detail::semidefinite_cholesky(rho_);
            full_rank_ = false;
        }
        const double err = (factor_ * factor_.transpose() - rho_).cwiseAbs().maxCoeff();
        if (err > 1e-10) {
            std::ostringstream msg;
            msg << "Gram factorization residual " << err << " exceeds 1e-10";
            throw FactorizationError(msg.str());
        }
    }

    Matrix rho_;
    Matrix factor_;
    double scale_ = 1.0;
    double min_eigenvalue_ = 1.0;
    Index size_ = 0;
    bool identity_ = false;
    bool full_rank_ = true;
};

/// Gram model of a template set: rho_ij = <x_i, x_j> / (||x_i|| ||x_j||).
inline GramModel gram(const TemplateSet& set) {
    const Vector norms = set.data().colwise().norm().transpose();
    Matrix rho = set.data().transpose() * set.data();
    for (Index i = 0; i < rho.rows(); ++i)
        for (Index j = 0; j < rho.cols(); ++j) rho(i, j) /= norms[i] * norms[j];
    return GramModel::from_correlation(std::move(rho), set.common_norm());
}

// ---------------------------------------------------------------------------------------------
// Constructors
// ---------------------------------------------------------------------------------------------

/// Two templates with normalized correlation rho: x_0 = norm e_0, x_1 = norm (rho e_0 + sqrt(1-rho^2) e_1).
/// rho = -1 is admitted (x_1 = -x_0); rho = 1 is rejected as degenerate.
inline TemplateSet make_pair(double rho, Index d, double norm = 1.0) {
    if (!std::isfinite(rho) || rho < -1.0 || rho > 1.0) throw DomainError("rho must lie in [-1, 1]");
    if (rho == 1.0) throw DegenerateTemplatesError("rho = 1 makes the two templates identical");
    if (d < 2) throw DimensionError("make_pair needs d >= 2");
    detail::require_positive_norm(norm);
    Matrix x = Matrix::Zero(d, 2);
    x(0, 0) = norm;
    x(0, 1) = norm * rho;
    x(1, 1) = norm * std::sqrt(std::max(0.0, 1.0 - rho * rho));
    return TemplateSet(std::move(x));
}

/// L templates whose Gram is norm^2 * circulant(rho_seq), realized by the symmetric square root
/// of the circulant placed in coordinates 0..L-1.
inline TemplateSet make_circulant(std::span<const double> rho_seq, Index d, double norm = 1.0) {
    detail::validate_circulant_sequence(rho_seq);
    detail::require_positive_norm(norm);
    const Index n = static_cast<Index>(rho_seq.size());
    if (d < n) throw DimensionError("make_circulant needs d >= L for an exact Gram embedding");
    const auto lambda = detail::checked_circulant_spectrum(rho_seq);

    std::vector<double> root(static_cast<std::size_t>(n), 0.0);
    for (Index m = 0; m < n; ++m) {
        double s = 0.0;
        for (Index j = 0; j < n; ++j)
            s += std::sqrt(lambda[static_cast<std::size_t>(j)]) *
                 std::cos(2.0 * std::numbers::pi * static_cast<double>((j * m) % n) / static_cast<double>(n));
        root[static_cast<std::size_t>(m)] = s / static_cast<double>(n);
    }
    Matrix x = Matrix::Zero(d, n);
    for (Index l = 0; l < n; ++l)
        for (Index i = 0; i < n; ++i) x(i, l) = norm * root[static_cast<std::size_t>(((i - l) % n + n) % n)];
    detail::rescale_columns(x, norm);
    return TemplateSet(std::move(x));
}

/// L orthonormal (times `norm`) templates: the circulant with rho_seq = e_0.
inline TemplateSet make_orthonormal(Index count, Index d, double norm = 1.0) {
    if (count < 2) throw DimensionError("need at least 2 templates");
    if (d < count) throw DimensionError("orthonormal templates need d >= L");
    detail::require_positive_norm(norm);
    Matrix x = Matrix::Zero(d, count);
    for (Index l = 0; l < count; ++l) x(l, l) = norm;
    return TemplateSet(std::move(x));
}

enum class HaarMethod {
    /// x_l = U_l x_0 with U_l a Haar orthogonal matrix from sign-corrected QR of a Gaussian matrix.
    rotation,
    /// x_l = ||x_0|| g / ||g||: same law as U_l x_0, O(d) per template.
    sphere,
};

/// Template 0 is x0; templates 1..L-1 are independent Haar rotations of x0.
inline TemplateSet make_haar_family(const Vector& x0, Index count, std::uint64_t seed,
                                    HaarMethod method = HaarMethod::rotation) {
    const Index d = x0.size();
    if (d < 2) throw DimensionError("make_haar_family needs d >= 2");
    if (count < 2) throw DimensionError("make_haar_family needs L >= 2");
    if (!x0.allFinite()) throw DomainError("x0 must be finite");
    const double norm = x0.norm();
    if (!(norm > 0.0)) throw DomainError("x0 must be nonzero");

    Matrix x(d, count);
    x.col(0) = x0;
    for (Index l = 1; l < count; ++l) {
        NormalStream rng(seed, static_cast<std::uint64_t>(l), StreamFamily::templates);
        if (method == HaarMethod::sphere) {
            Vector g(d);
            rng.fill({g.data(), static_cast<std::size_t>(d)});
            x.col(l) = g * (norm / g.norm());
            continue;
        }
        Matrix g(d, d);
        rng.fill({g.data(), static_cast<std::size_t>(g.size())});
        Eigen::HouseholderQR<Matrix> qr(g);
        Matrix q = qr.householderQ();
        const auto r = qr.matrixQR();
        for (Index j = 0; j < d; ++j)
            if (r(j, j) < 0.0) q.col(j) = -q.col(j);
        x.col(l) = q * x0;
    }
    detail::rescale_columns(x, norm);
    return TemplateSet(std::move(x));
}

/// Entry m is exp(-alpha m) before scaling to Euclidean norm `norm`.
inline Vector make_exponential(Index d, double alpha, double norm = 1.0) {
    if (d < 1) throw DimensionError("make_exponential needs d >= 1");
    if (!std::isfinite(alpha) || alpha < 0.0) throw DomainError("alpha must be a finite non-negative number");
    detail::require_positive_norm(norm);
    Vector v(d);
    for (Index m = 0; m < d; ++m) v[m] = std::exp(-alpha * static_cast<double>(m));
    v *= norm / v.norm();
    return v;
}

// ---------------------------------------------------------------------------------------------
// Declarative template specifications (consumed by the CLI and by ExperimentConfig)
// ---------------------------------------------------------------------------------------------

struct PairSpec {
    double rho = 0.0;
    Index d = 2;
    double norm = 1.0;
};

struct CirculantSpec {
    std::vector<double> rho_seq;
    Index d = 0;  ///< 0 means d = L
    double norm = 1.0;
};

/// Haar family around an exponential reference template.
struct HaarSpec {
    Index count = 2;
    Index d = 2;
    double alpha = 1.0 / 30.0;
    double norm = 1.0;
    std::uint64_t seed = 0;
    HaarMethod method = HaarMethod::rotation;
};

enum class TemplateFormat { csv, pgm };

struct FileSpec {
    std::filesystem::path path;
    TemplateFormat format = TemplateFormat::csv;
};

using TemplateSpec = std::variant<PairSpec, CirculantSpec, HaarSpec, FileSpec>;

}  // namespace biaslab
