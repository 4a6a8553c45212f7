#pragma once

#include "biaslab/common.hpp"
#include "biaslab/parallel.hpp"
#include "biaslab/rng.hpp"
#include "biaslab/template_io.hpp"
#include "biaslab/templates.hpp"

#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace biaslab {

enum class Mode {
    full,  ///< draw n_i ~ N(0, I_d) and keep the estimate vectors
    gram,  ///< draw S = scale * F z in R^L directly; correlations only
};

enum class Scope {
    full,  ///< every corr[l][k]
    own,   ///< only corr[l][l]; O(L) work per observation instead of O(L^2)
};

inline constexpr double kHardBeta = std::numeric_limits<double>::infinity();

/// Everything that determines an estimator run.
struct ExperimentConfig {
    Index L = 0;  ///< 0: taken from the templates
    Index d = 0;  ///< 0: taken from the templates
    std::uint64_t M = 1'000'000;
    Mode mode = Mode::gram;
    double beta = kHardBeta;  ///< infinity selects hard assignment
    std::uint64_t seed = 0;
    std::uint64_t chunks = 64;
    Scope scope = Scope::full;
    unsigned threads = 0;  ///< 0: hardware concurrency; never changes results
    TemplateSpec template_spec = PairSpec{};

    bool hard() const noexcept { return std::isinf(beta) && beta > 0.0; }

    void validate() const {
        if (M < 1) throw ConfigError("M must be at least 1");
        if (chunks < 1) throw ConfigError("chunks must be at least 1");
        if (chunks > M) throw ConfigError("chunks must not exceed M");
        if (std::isnan(beta) || beta <= 0.0) throw DomainError("beta must be positive (infinity selects hard assignment)");
    }
};

/// Result of one estimator run. Rows of undefined clusters (no observations) hold NaN and are
/// flagged in `defined` with a warning. In Scope::own only the diagonal of corr/std_error is
/// computed; off-diagonal entries are NaN.
struct AssignmentEstimate {
    Mode mode = Mode::gram;
    Scope scope = Scope::full;
    double beta = kHardBeta;
    Matrix estimates;  ///< d x L, column l is x_hat_l (full mode only)
    Matrix corr;       ///< corr(l, k) = <x_hat_l, x_k>
    Matrix std_error;  ///< Monte Carlo standard error of corr
    Vector mass;       ///< hard: |A_l| / M, soft: mean of p^(l)
    std::vector<bool> defined;
    double pooled = 0.0;  ///< (1/M) sum_i sum_l w_il <n_i, x_l> = sum_l mass_l corr_ll
    double pooled_std_error = 0.0;
    std::uint64_t M = 0;
    std::uint64_t seed = 0;
    std::uint64_t chunks = 0;
    std::vector<std::string> warnings;

    bool hard() const noexcept { return std::isinf(beta); }
    Index size() const noexcept { return mass.size(); }
    bool all_defined() const {
        for (bool b : defined)
            if (!b) return false;
        return true;
    }
};

namespace detail {

#ifdef BIASLAB_MUTATION_SOFTMAX_SIGN
inline constexpr double kSoftmaxSign = -1.0;
#else
inline constexpr double kSoftmaxSign = 1.0;
#endif

/// Row-wise softmax of beta * s with the row maximum subtracted before exponentiation.
inline void softmax_rows(const RowMatrix& s, double beta, RowMatrix& p) {
    p.resize(s.rows(), s.cols());
    const double b = kSoftmaxSign * beta;
    for (Index i = 0; i < s.rows(); ++i) {
        const auto row = s.row(i);
        double top = -std::numeric_limits<double>::infinity();
        for (Index k = 0; k < row.size(); ++k) top = std::max(top, b * row[k]);
        double total = 0.0;
        for (Index k = 0; k < row.size(); ++k) {
            const double e = std::exp(b * row[k] - top);
            p(i, k) = e;
            total += e;
        }
        p.row(i) /= total;
    }
}

/// Index of the largest entry; the lowest index wins ties.
template <class Row>
inline Index argmax_lowest(const Row& row) {
    const double top = row.maxCoeff();
    Index k = 0;
    while (row[k] != top) ++k;
    return k;
}

inline constexpr Index kBatch = 256;

/// Flat layout of the per-run accumulators.
struct Layout {
    Index L = 0;
    Index d = 0;
    bool own = false;
    bool vectors = false;

    Index pair_count() const { return own ? L : L * L; }
    Index w() const { return 0; }
    Index w2() const { return L; }
    Index a() const { return 2 * L; }
    Index b() const { return a() + pair_count(); }
    Index c() const { return b() + pair_count(); }
    Index q() const { return c() + pair_count(); }
    Index q2() const { return q() + 1; }
    Index num() const { return q2() + 1; }
    Index total() const { return num() + (vectors ? L * d : 0); }
};

/// Sample source: either full d-dimensional noise or the L-dimensional Gram-space Gaussian.
struct Sampler {
    const Matrix* templates = nullptr;  ///< full mode
    const GramModel* gram = nullptr;    ///< Gram mode
    Matrix factor_t;                    ///< scale * F^T for dense Gram sampling

    Index draw_width() const { return templates ? templates->rows() : gram->size(); }

    /// Fills `s` (rows x L) and, in full mode, `noise` (rows x d).
    void draw(NormalStream& rng, Index rows, RowMatrix& noise, RowMatrix& s) const {
        if (!templates && gram->is_identity()) {
            s.resize(rows, gram->size());
            rng.fill({s.data(), static_cast<std::size_t>(s.size())});
            if (gram->scale() != 1.0) s *= gram->scale();
            return;
        }
        noise.resize(rows, draw_width());
        rng.fill({noise.data(), static_cast<std::size_t>(noise.size())});
        if (templates)
            s.noalias() = noise * (*templates);
        else
            s.noalias() = noise * factor_t;
    }
};

inline AssignmentEstimate run_estimator(const Sampler& sampler, Index L, const ExperimentConfig& cfg, Mode mode) {
    cfg.validate();
    const bool hard = cfg.hard();
    Layout lay;
    lay.L = L;
    lay.d = mode == Mode::full ? sampler.templates->rows() : 0;
    lay.own = cfg.scope == Scope::own;
    lay.vectors = mode == Mode::full;

    CompensatedArray total(static_cast<std::size_t>(lay.total()));
    ordered_chunk_reduce<CompensatedArray>(
        cfg.chunks, cfg.threads,
        [&](std::size_t chunk) {
            const std::uint64_t begin = cfg.M * chunk / cfg.chunks;
            const std::uint64_t end = cfg.M * (chunk + 1) / cfg.chunks;
            NormalStream rng(cfg.seed, chunk, StreamFamily::engine);
            CompensatedArray acc(static_cast<std::size_t>(lay.total()));
            std::vector<double> batch(static_cast<std::size_t>(lay.total()));
            RowMatrix noise, s, p;
            for (std::uint64_t at = begin; at < end; at += kBatch) {
                const Index rows = static_cast<Index>(std::min<std::uint64_t>(kBatch, end - at));
                sampler.draw(rng, rows, noise, s);
                std::fill(batch.begin(), batch.end(), 0.0);
                double* w = batch.data() + lay.w();
                double* w2 = batch.data() + lay.w2();
                double* a = batch.data() + lay.a();
                double* b = batch.data() + lay.b();
                double* c = batch.data() + lay.c();
                double& q = batch[static_cast<std::size_t>(lay.q())];
                double& q2 = batch[static_cast<std::size_t>(lay.q2())];
                if (hard) {
                    for (Index i = 0; i < rows; ++i) {
                        const auto row = s.row(i);
                        const Index l = argmax_lowest(row);
                        w[l] += 1.0;
                        w2[l] += 1.0;
                        q += row[l];
                        q2 += row[l] * row[l];
                        if (lay.own) {
                            a[l] += row[l];
                            b[l] += row[l];
                            c[l] += row[l] * row[l];
                        } else {
                            for (Index k = 0; k < L; ++k) {
                                a[l * L + k] += row[k];
                                b[l * L + k] += row[k];
                                c[l * L + k] += row[k] * row[k];
                            }
                        }
                        if (lay.vectors) {
                            double* num = batch.data() + lay.num() + l * lay.d;
                            const double* n = noise.row(i).data();
                            for (Index j = 0; j < lay.d; ++j) num[j] += n[j];
                        }
                    }
                } else {
                    softmax_rows(s, cfg.beta, p);
                    for (Index i = 0; i < rows; ++i) {
                        double qi = 0.0;
                        for (Index l = 0; l < L; ++l) {
                            const double pl = p(i, l);
                            w[l] += pl;
                            w2[l] += pl * pl;
                            qi += pl * s(i, l);
                            if (lay.own) {
                                const double sl = s(i, l);
                                a[l] += pl * sl;
                                b[l] += pl * pl * sl;
                                c[l] += pl * pl * sl * sl;
                            }
                        }
                        q += qi;
                        q2 += qi * qi;
                    }
                    if (!lay.own) {
                        // Row-major L x L blocks: entry (l, k) at l * L + k.
                        const RowMatrix p2 = p.cwiseProduct(p);
                        Eigen::Map<RowMatrix>(a, L, L).noalias() = p.transpose() * s;
                        Eigen::Map<RowMatrix>(b, L, L).noalias() = p2.transpose() * s;
                        Eigen::Map<RowMatrix>(c, L, L).noalias() = p2.transpose() * s.cwiseProduct(s);
                    }
                    if (lay.vectors)
                        Eigen::Map<RowMatrix>(batch.data() + lay.num(), L, lay.d).noalias() = p.transpose() * noise;
                }
                acc.add_all(batch);
            }
            return acc;
        },
        [&](const CompensatedArray& part) { total.merge(part); });

    AssignmentEstimate est;
    est.mode = mode;
    est.scope = cfg.scope;
    est.beta = cfg.beta;
    est.M = cfg.M;
    est.seed = cfg.seed;
    est.chunks = cfg.chunks;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double inf = std::numeric_limits<double>::infinity();
    const double m = static_cast<double>(cfg.M);
    est.mass.resize(L);
    est.defined.assign(static_cast<std::size_t>(L), true);
    est.corr = Matrix::Constant(L, L, nan);
    est.std_error = Matrix::Constant(L, L, nan);
    auto value = [&](Index i) { return total.value(static_cast<std::size_t>(i)); };
    for (Index l = 0; l < L; ++l) {
        const double wl = value(lay.w() + l);
        const double w2l = value(lay.w2() + l);
        est.mass[l] = wl / m;
        if (!(wl > 0.0)) {
            est.defined[static_cast<std::size_t>(l)] = false;
            std::ostringstream msg;
            msg << "empty cluster: template " << l << " received no observations (M=" << cfg.M
                << "); its row is undefined";
            est.warnings.push_back(msg.str());
            continue;
        }
        for (Index k = 0; k < L; ++k) {
            if (lay.own && k != l) continue;
            const Index idx = lay.own ? l : l * L + k;
            const double r = value(lay.a() + idx) / wl;
            const double var = (value(lay.c() + idx) - 2.0 * r * value(lay.b() + idx) + r * r * w2l) / (wl * wl);
            est.corr(l, k) = r;
            est.std_error(l, k) = (hard && wl < 2.0) ? inf : std::sqrt(std::max(var, 0.0));
        }
    }
    est.pooled = value(lay.q()) / m;
    const double pooled_var = std::max(value(lay.q2()) / m - est.pooled * est.pooled, 0.0);
    est.pooled_std_error = cfg.M > 1 ? std::sqrt(pooled_var / (m - 1.0)) : inf;

    if (lay.vectors) {
        const Matrix& x = *sampler.templates;
        est.estimates = Matrix::Constant(lay.d, L, nan);
        for (Index l = 0; l < L; ++l) {
            if (!est.defined[static_cast<std::size_t>(l)]) continue;
            const double wl = value(lay.w() + l);
            for (Index j = 0; j < lay.d; ++j) est.estimates(j, l) = value(lay.num() + l * lay.d + j) / wl;
            for (Index k = 0; k < L; ++k)
                if (!lay.own || k == l) est.corr(l, k) = est.estimates.col(l).dot(x.col(k));
        }
    }
    return est;
}

inline void check_shape(const ExperimentConfig& cfg, Index L, Index d) {
    if (cfg.L != 0 && cfg.L != L) throw ConfigError("config L does not match the template count");
    if (cfg.d != 0 && d != 0 && cfg.d != d) throw ConfigError("config d does not match the template dimension");
}

inline AssignmentEstimate assign(const TemplateSet& set, const ExperimentConfig& cfg) {
    check_shape(cfg, set.count(), set.dim());
    if (cfg.mode == Mode::full) {
        Sampler sampler;
        sampler.templates = &set.data();
        return run_estimator(sampler, set.count(), cfg, Mode::full);
    }
    const GramModel g = gram(set);
    Sampler sampler;
    sampler.gram = &g;
    sampler.factor_t = g.scale() * g.factor().transpose();
    return run_estimator(sampler, set.count(), cfg, Mode::gram);
}

inline AssignmentEstimate assign(const GramModel& g, const ExperimentConfig& cfg) {
    if (cfg.mode == Mode::full) throw ConfigError("full mode needs templates, not only a Gram model");
    check_shape(cfg, g.size(), 0);
    Sampler sampler;
    sampler.gram = &g;
    if (!g.is_identity()) sampler.factor_t = g.scale() * g.factor().transpose();
    return run_estimator(sampler, g.size(), cfg, Mode::gram);
}

inline void require_soft_beta(double beta) {
    if (std::isnan(beta) || beta <= 0.0 || std::isinf(beta))
        throw DomainError("soft assignment needs a finite beta > 0");
}

}  // namespace detail

/// One K-means step on pure noise: label each observation by its best-matching template and
/// average per label.
inline AssignmentEstimate hard_assign(const TemplateSet& set, ExperimentConfig cfg) {
    cfg.beta = kHardBeta;
    return detail::assign(set, cfg);
}

inline AssignmentEstimate hard_assign(const GramModel& g, ExperimentConfig cfg) {
    cfg.beta = kHardBeta;
    return detail::assign(g, cfg);
}

/// One EM step with softmax(beta <n, x_l>) responsibilities.
inline AssignmentEstimate soft_assign(const TemplateSet& set, const ExperimentConfig& cfg) {
    detail::require_soft_beta(cfg.beta);
    return detail::assign(set, cfg);
}

inline AssignmentEstimate soft_assign(const GramModel& g, const ExperimentConfig& cfg) {
    detail::require_soft_beta(cfg.beta);
    return detail::assign(g, cfg);
}

/// Hard when cfg.beta is infinite, soft otherwise.
inline AssignmentEstimate run_assignment(const TemplateSet& set, const ExperimentConfig& cfg) {
    return cfg.hard() ? hard_assign(set, cfg) : soft_assign(set, cfg);
}

inline AssignmentEstimate run_assignment(const GramModel& g, const ExperimentConfig& cfg) {
    return cfg.hard() ? hard_assign(g, cfg) : soft_assign(g, cfg);
}

/// <x_hat_l, x_k> recomputed from the estimate vectors; undefined rows stay NaN.
inline Matrix correlation_matrix(const AssignmentEstimate& est, const TemplateSet& set) {
    if (est.mode != Mode::full || est.estimates.cols() != set.count() || est.estimates.rows() != set.dim())
        throw ConfigError("correlation_matrix needs a full-mode estimate for this template set");
    Matrix c = est.estimates.transpose() * set.data();
    for (Index l = 0; l < c.rows(); ++l)
        if (!est.defined[static_cast<std::size_t>(l)]) c.row(l).setConstant(std::numeric_limits<double>::quiet_NaN());
    return c;
}

/// Relative distance of each estimate vector from span{x_0..x_{L-1}}:
/// ||x_hat - P x_hat|| / ||x_hat||.
inline Vector span_residual(const Matrix& estimates, const TemplateSet& set) {
    const Index L = set.count();
    if (set.dim() <= L) throw DimensionError("span_residual needs d > L");
    if (estimates.rows() != set.dim()) throw DimensionError("estimate vectors do not match the template dimension");
    Eigen::ColPivHouseholderQR<Matrix> qr(set.data());
    qr.setThreshold(1e-10);
    if (qr.rank() < L) throw RankError("template matrix is rank deficient");
    const Matrix q = Matrix(qr.householderQ()).leftCols(L);
    Vector out(estimates.cols());
    for (Index l = 0; l < estimates.cols(); ++l) {
        const Vector v = estimates.col(l);
        const Vector r = v - q * (q.transpose() * v);
        const double n = v.norm();
        out[l] = n > 0.0 ? r.norm() / n : 0.0;
    }
    return out;
}

inline Vector span_residual(const AssignmentEstimate& est, const TemplateSet& set) {
    if (est.mode != Mode::full) throw ConfigError("span_residual needs a full-mode estimate");
    return span_residual(est.estimates, set);
}

/// Coefficients alpha with x_hat_l = sum_k alpha(l,k) x_k in the least-squares sense:
/// alpha = corr * (scale^2 rho)^-1.
inline Matrix extract_coefficients(const Matrix& corr, const GramModel& g) {
    if (!g.full_rank() || g.min_eigenvalue() <= 1e-12)
        throw FactorizationError("Gram matrix is singular; coefficients are not identifiable");
    const Eigen::LLT<Matrix> llt(g.covariance());
    if (llt.info() != Eigen::Success) throw FactorizationError("Gram matrix is not positive definite");
    return llt.solve(corr.transpose()).transpose();
}

inline Matrix extract_coefficients(const AssignmentEstimate& est, const TemplateSet& set) {
    return extract_coefficients(est.corr, gram(set));
}

}  // namespace biaslab
