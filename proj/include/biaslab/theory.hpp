#pragma once

#include "biaslab/common.hpp"
#include "biaslab/templates.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

namespace biaslab {

enum class FormulaId { HardPair, SoftPairApprox, SoftFiniteLApprox, BetaZeroLimit, GumbelScale };

inline const char* to_string(FormulaId id) {
    switch (id) {
        case FormulaId::HardPair: return "HardPair";
        case FormulaId::SoftPairApprox: return "SoftPairApprox";
        case FormulaId::SoftFiniteLApprox: return "SoftFiniteLApprox";
        case FormulaId::BetaZeroLimit: return "BetaZeroLimit";
        case FormulaId::GumbelScale: return "GumbelScale";
    }
    return "unknown";
}

/// Closed-form coefficients alpha (x_hat_l = sum_k alpha(l,k) x_k) and the implied correlations
/// predicted_corr = alpha * scale^2 * rho. Scalar-only formulas fill `scalars` instead.
struct TheoryPrediction {
    FormulaId formula_id = FormulaId::HardPair;
    Matrix alpha;
    Matrix predicted_corr;
    std::string validity_note;
    bool exact = false;
    std::map<std::string, double> scalars;
};

namespace detail {

inline void require_pair_rho(double rho) {
    if (!std::isfinite(rho) || rho < -1.0) throw DomainError("rho must lie in [-1, 1)");
    if (rho >= 1.0) throw HypothesisError("the pair formulas need rho < 1 (distinct templates)");
}

inline Matrix pair_gram(double rho, double norm) {
    Matrix g(2, 2);
    g << 1.0, rho, rho, 1.0;
    return norm * norm * g;
}

inline Matrix antisymmetric_pair(double c) {
    Matrix a(2, 2);
    a << c, -c, -c, c;
    return a;
}

}  // namespace detail

/// Exact large-M limit of hard assignment with two templates:
/// alpha = c [[1,-1],[-1,1]], c = 1 / sqrt(pi (1 - rho) norm^2).
inline TheoryPrediction hard_pair_prediction(double rho, double norm = 1.0) {
    detail::require_pair_rho(rho);
    detail::require_positive_norm(norm);
    TheoryPrediction p;
    p.formula_id = FormulaId::HardPair;
    p.exact = true;
    const double c = 1.0 / std::sqrt(std::numbers::pi * (1.0 - rho) * norm * norm);
    p.alpha = detail::antisymmetric_pair(c);
    p.predicted_corr = p.alpha * detail::pair_gram(rho, norm);
    // Same value written directly, so the diagonal carries no rounding from the product above.
    const double diag = norm * std::sqrt((1.0 - rho) / std::numbers::pi);
    p.predicted_corr(0, 0) = p.predicted_corr(1, 1) = diag;
    p.predicted_corr(0, 1) = p.predicted_corr(1, 0) = -diag;
    p.scalars["c"] = c;
    p.validity_note = "exact M -> infinity limit of hard assignment for L = 2, any rho < 1, pure Gaussian noise";
    return p;
}

/// Logistic-via-normal-CDF approximation for soft assignment (beta = 1) with two templates:
/// alpha = (1/2) [[1,-1],[-1,1]] / sqrt(1 + (pi/4)(1 - rho) norm^2).
inline TheoryPrediction soft_pair_prediction(double rho, double norm = 1.0) {
    detail::require_pair_rho(rho);
    detail::require_positive_norm(norm);
    TheoryPrediction p;
    p.formula_id = FormulaId::SoftPairApprox;
    const double root = std::sqrt(1.0 + 0.25 * std::numbers::pi * (1.0 - rho) * norm * norm);
    const double c = 0.5 / root;
    p.alpha = detail::antisymmetric_pair(c);
    p.predicted_corr = p.alpha * detail::pair_gram(rho, norm);
    const double diag = 0.5 * (1.0 - rho) * norm * norm / root;
    p.predicted_corr(0, 0) = p.predicted_corr(1, 1) = diag;
    p.predicted_corr(0, 1) = p.predicted_corr(1, 0) = -diag;
    p.scalars["c"] = c;
    p.validity_note =
        "approximation: logistic function replaced by a scaled normal CDF; soft assignment with beta = 1, L = 2";
    return p;
}

/// Second-order approximation of the soft estimator for finite L (beta = 1):
///   alpha(l,l) = 1 - e^{<x_l,x_l>} / C_l,  alpha(l,r) = -e^{<x_l,x_r>} / C_l,
///   C_l = L - sum_r e^{<x_l,x_r>} + (1/L) sum_{r1,r2} e^{<x_r1,x_r2>}.
/// Inner products are unnormalized (scale^2 rho).
inline TheoryPrediction soft_finite_prediction(const GramModel& g) {
    const Index L = g.size();
    const Matrix cov = g.covariance();
    const Matrix e = cov.array().exp().matrix();
    const double grand = e.sum() / static_cast<double>(L);
    TheoryPrediction p;
    p.formula_id = FormulaId::SoftFiniteLApprox;
    p.alpha.resize(L, L);
    bool large = false;
    for (Index l = 0; l < L; ++l) {
        const double c = static_cast<double>(L) - e.row(l).sum() + grand;
        if (!(c > 0.0)) {
            std::ostringstream msg;
            msg << "finite-L approximation breaks down: C_" << l << " = " << c << " <= 0";
            throw ApproximationBreakdownError(msg.str());
        }
        p.scalars["C_" + std::to_string(l)] = c;
        for (Index r = 0; r < L; ++r) p.alpha(l, r) = -e(l, r) / c;
        p.alpha(l, l) += 1.0;
        if (p.alpha.row(l).cwiseAbs().maxCoeff() > 1.0) large = true;
    }
    p.predicted_corr = p.alpha * cov;
    p.validity_note =
        "approximation: second-order expansion of the softmax ratio, beta = 1; no error bound available";
    if (large) p.validity_note += "; large-coefficient regime (|alpha| > 1), expansion unreliable";
    return p;
}

/// Linear response as beta -> 0: x_hat_l / beta -> x_l - (1/L) sum_r x_r.
/// predicted_corr is the limit of corr / beta.
inline TheoryPrediction beta_zero_limit(const GramModel& g) {
    const Index L = g.size();
    TheoryPrediction p;
    p.formula_id = FormulaId::BetaZeroLimit;
    p.exact = true;
    p.alpha = Matrix::Identity(L, L) - Matrix::Constant(L, L, 1.0 / static_cast<double>(L));
    p.predicted_corr = p.alpha * g.covariance();
    p.validity_note = "exact limit of x_hat_l / beta as beta -> 0 for soft assignment; corr is divided by beta";
    return p;
}

inline TheoryPrediction beta_zero_limit(const TemplateSet& set) { return beta_zero_limit(gram(set)); }

struct GumbelConstants {
    double a = 0.0;
    double b = 0.0;
    double asymptotic_scale = 0.0;  ///< sqrt(2 log n)
};

/// a_n = sqrt(2 log n), b_n = a_n - (log log n + log 4 pi) / (2 a_n).
inline GumbelConstants gumbel_constants(long long n) {
    if (n < 2) throw DomainError("Gumbel constants need n >= 2");
    const double ln = std::log(static_cast<double>(n));
    GumbelConstants c;
    c.a = std::sqrt(2.0 * ln);
    c.b = c.a - (std::log(ln) + std::log(4.0 * std::numbers::pi)) / (2.0 * c.a);
    c.asymptotic_scale = c.a;
    return c;
}

/// Growth of <x_hat_l, x_l> / ||x|| for hard assignment with L weakly correlated templates in R^d.
/// Both normalizations are exposed: b_L and b_L / sqrt(d).
inline TheoryPrediction gumbel_prediction(long long L, long long d) {
    if (d < 1) throw DomainError("d must be positive");
    const GumbelConstants c = gumbel_constants(L);
    TheoryPrediction p;
    p.formula_id = FormulaId::GumbelScale;
    p.scalars["a_L"] = c.a;
    p.scalars["b_L"] = c.b;
    p.scalars["sqrt_2_log_L"] = c.asymptotic_scale;
    p.scalars["b_L_over_sqrt_d"] = c.b / std::sqrt(static_cast<double>(d));
    p.validity_note =
        "asymptotic: d, L -> infinity with weakly correlated templates; a_L and b_L are the Gumbel "
        "normalizing constants of the maximum of L standard normals";
    return p;
}

/// E[max(X, Y)] for standard normals with correlation rho: sqrt((1 - rho) / pi).
inline double max_two_gaussians_mean(double rho) {
    if (!std::isfinite(rho) || rho < -1.0 || rho > 1.0) throw DomainError("rho must lie in [-1, 1]");
    return std::sqrt((1.0 - rho) / std::numbers::pi);
}

}  // namespace biaslab
