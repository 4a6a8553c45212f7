#pragma once

#include "biaslab/common.hpp"
#include "biaslab/parallel.hpp"
#include "biaslab/quadrature.hpp"
#include "biaslab/rng.hpp"
#include "biaslab/templates.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <sstream>
#include <vector>

namespace biaslab {

enum class OracleMethod { exact, quadrature, ref_mc };

inline const char* to_string(OracleMethod m) {
    switch (m) {
        case OracleMethod::exact: return "exact";
        case OracleMethod::quadrature: return "quadrature";
        case OracleMethod::ref_mc: return "refMC";
    }
    return "unknown";
}

/// Which integration route to use; `automatic` picks the most accurate one available.
enum class OracleRoute { automatic, quadrature, ref_mc };

struct OracleOptions {
    double precision = 1e-6;  ///< required error bound
    OracleRoute route = OracleRoute::automatic;
    int nodes = 0;       ///< starting nodes per axis; 0: 80 for <= 3 axes, 40 otherwise
    int max_nodes = 0;   ///< node budget per axis; 0: derived from a 4e7-point tensor budget
    std::uint64_t samples = 100'000'000;  ///< refMC draws (antithetic pairs count twice)
    std::uint64_t seed = 0;
    std::uint64_t chunks = 64;
    unsigned threads = 0;
};

/// Reference value of (E[S_k w_l(S)])_k and E[w_l(S)], where w_l is the hard indicator
/// 1{argmax S = l} or the softmax weight p_l(beta S), S ~ N(0, scale^2 rho).
struct OracleResult {
    Vector moments;
    double mass = 0.0;
    double error_bound = 0.0;  ///< bound on every entry of moments and on mass
    OracleMethod method = OracleMethod::quadrature;
    OracleMethod mass_method = OracleMethod::quadrature;
    std::uint64_t nodes_or_samples = 0;

    /// Limit of <x_hat_l, x_k>: moments / mass.
    Vector ratio() const { return moments / mass; }

    /// First-order bound on the error of ratio().
    double ratio_error_bound() const {
        return error_bound * (1.0 + ratio().cwiseAbs().maxCoeff()) / mass;
    }
};

inline constexpr double kExactBound = 1e-14;

namespace detail {

inline void check_template_index(const GramModel& g, Index l) {
    if (l < 0 || l >= g.size()) throw DomainError("template index out of range");
}

inline void check_beta(double beta) {
    if (!std::isfinite(beta) || beta <= 0.0) throw DomainError("beta must be a finite positive number");
}

inline int default_nodes(int dims, const OracleOptions& opt) {
    if (opt.nodes > 0) return opt.nodes;
    return dims <= 3 ? 80 : 40;
}

inline int node_budget(int dims, const OracleOptions& opt) {
    if (opt.max_nodes > 0) return opt.max_nodes;
    const int n = static_cast<int>(std::floor(std::pow(4e7, 1.0 / dims)));
    return std::clamp(n, 40, 2560);
}

/// Rows e_l - e_j for every j != l, in increasing j.
inline Matrix difference_operator(Index L, Index l) {
    Matrix t = Matrix::Zero(L - 1, L);
    Index r = 0;
    for (Index j = 0; j < L; ++j) {
        if (j == l) continue;
        t(r, l) = 1.0;
        t(r, j) = -1.0;
        ++r;
    }
    return t;
}

inline Matrix drop_index(const Matrix& a, Index i) {
    const Index n = a.rows();
    Matrix out(n - 1, n - 1);
    for (Index r = 0, rr = 0; r < n; ++r) {
        if (r == i) continue;
        for (Index c = 0, cc = 0; c < n; ++c) {
            if (c == i) continue;
            out(rr, cc++) = a(r, c);
        }
        ++rr;
    }
    return out;
}

/// L = 2 closed form via the folded normal: E[S_l 1] = scale sqrt((1-rho)/pi) / 2, P = 1/2.
inline OracleResult hard_pair_exact(const GramModel& g, Index l) {
    const double rho = g.rho(0, 1);
    if (rho >= 1.0) throw DegenerateTemplatesError("rho = 1: the two templates coincide");
    const double half = 0.5 * g.scale() * std::sqrt((1.0 - rho) / std::numbers::pi);
    OracleResult r;
    r.moments = Vector::Constant(2, -half);
    r.moments[l] = half;
    r.mass = 0.5;
    r.error_bound = kExactBound;
    r.method = OracleMethod::exact;
    r.mass_method = OracleMethod::exact;
    r.nodes_or_samples = 0;
    return r;
}

/// Gaussian integration by parts: with D = T S (T rows e_l - e_j), {argmax = l} = {D > 0} and
///   E[S 1{D > 0}] = Sigma T^T g,  g_i = f_{D_i}(0) P(D_{-i} > 0 | D_i = 0).
/// Everything reduces to orthant probabilities of dimension L-1 and L-2.
inline OracleResult hard_orthant_at(const GramModel& g, Index l, int nodes) {
    const Index L = g.size();
    const Matrix sigma = g.covariance();
    const Matrix t = difference_operator(L, l);
    const Matrix sd = t * sigma * t.transpose();

    double error = 0.0;
    bool exact = true;
    const OrthantValue p = orthant_probability(sd, nodes);
    error = std::max(error, p.error);
    exact = exact && p.exact;

    Vector gvec(L - 1);
    for (Index i = 0; i < L - 1; ++i) {
        const double vii = sd(i, i);
        if (!(vii > 0.0)) throw FactorizationError("degenerate difference variance");
        Matrix cond = drop_index(sd, i);
        Vector cross(L - 2);
        for (Index r = 0, rr = 0; r < L - 1; ++r)
            if (r != i) cross[rr++] = sd(r, i);
        cond -= cross * cross.transpose() / vii;
        const OrthantValue q = orthant_probability(cond, nodes);
        const double density = 1.0 / std::sqrt(2.0 * std::numbers::pi * vii);
        gvec[i] = density * q.value;
        error = std::max(error, density * q.error);
        exact = exact && q.exact;
    }
    OracleResult r;
    r.moments = sigma * t.transpose() * gvec;
    r.mass = p.value;
    const double spread = (sigma * t.transpose()).cwiseAbs().rowwise().sum().maxCoeff();
    r.error_bound = exact ? kExactBound : std::max(error * std::max(1.0, spread), p.error);
    r.method = exact ? OracleMethod::exact : OracleMethod::quadrature;
    r.mass_method = p.exact ? OracleMethod::exact : OracleMethod::quadrature;
    r.nodes_or_samples = exact ? 0 : static_cast<std::uint64_t>(nodes);
    return r;
}

/// hard_orthant_at with Gauss-Legendre nodes doubled (from 48) until the bound meets the precision.
inline OracleResult hard_orthant(const GramModel& g, Index l, const OracleOptions& opt) {
    const Index L = g.size();
    if (L > 6) throw DimensionError("orthant route supports L <= 6");
    int nodes = opt.nodes > 0 ? opt.nodes : 48;
    const int dims = std::max(static_cast<int>(L) - 2, 1);
    const int budget = std::max(node_budget(dims, opt), nodes);
    for (;;) {
        OracleResult r = hard_orthant_at(g, l, nodes);
        if (r.error_bound <= opt.precision) return r;
        if (2 * nodes > budget) {
            std::ostringstream msg;
            msg << "orthant route reached bound " << r.error_bound << " at " << nodes << " nodes > requested "
                << opt.precision;
            throw BudgetError(msg.str(), r.error_bound);
        }
        nodes *= 2;
    }
}

/// Tensor Gauss-Hermite over z_0..z_{L-2} of S = scale F z, with z_{L-1} integrated in closed
/// form (normal CDF/density). Ties between node values split the indicator evenly.
inline std::vector<double> hard_gh_sum(const GramModel& g, Index l, int n, unsigned threads) {
    const Index L = g.size();
    const Matrix f = g.scale() * g.factor();
    const double last = f(L - 1, L - 1);
    const int dims = static_cast<int>(L - 1);
    const auto& rule = gauss_hermite(n);
    auto body = [&](const double* z, double w, double* acc) {
        std::array<double, 8> s{};
        for (Index k = 0; k < L; ++k) {
            double v = 0.0;
            for (Index j = 0; j <= std::min(k, L - 2); ++j) v += f(k, j) * z[j];
            s[static_cast<std::size_t>(k)] = v;  // for k = L-1 this is the offset a
        }
        const double a = s[static_cast<std::size_t>(L - 1)];
        if (!(last > 1e-300)) {
            // Semidefinite Gram: the last coordinate is a deterministic function of the others.
            double top = -std::numeric_limits<double>::infinity();
            for (Index k = 0; k < L; ++k) top = std::max(top, s[static_cast<std::size_t>(k)]);
            if (s[static_cast<std::size_t>(l)] < top) return;
            int ties = 0;
            for (Index k = 0; k < L; ++k) ties += s[static_cast<std::size_t>(k)] == top;
            const double ww = w / ties;
            for (Index k = 0; k < L; ++k) acc[k] += ww * s[static_cast<std::size_t>(k)];
            acc[L] += ww;
            return;
        }
        if (l < L - 1) {
            const double sl = s[static_cast<std::size_t>(l)];
            int ties = 1;
            for (Index k = 0; k < L - 1; ++k) {
                if (k == l) continue;
                if (s[static_cast<std::size_t>(k)] > sl) return;
                if (s[static_cast<std::size_t>(k)] == sl) ++ties;
            }
            const double ww = w / ties;
            const double t = (sl - a) / last;
            const double cdf = normal_cdf(t);
            for (Index k = 0; k < L - 1; ++k) acc[k] += ww * s[static_cast<std::size_t>(k)] * cdf;
            acc[L - 1] += ww * (a * cdf - last * normal_pdf(t));
            acc[L] += ww * cdf;
        } else {
            double top = -std::numeric_limits<double>::infinity();
            for (Index k = 0; k < L - 1; ++k) top = std::max(top, s[static_cast<std::size_t>(k)]);
            const double t = (top - a) / last;
            const double upper = normal_cdf(-t);
            for (Index k = 0; k < L - 1; ++k) acc[k] += w * s[static_cast<std::size_t>(k)] * upper;
            acc[L - 1] += w * (a * upper + last * normal_pdf(t));
            acc[L] += w * upper;
        }
    };
    return tensor_sum(dims, rule, static_cast<std::size_t>(L + 1), threads, body);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Runs `eval(n)` at n and n/2 nodes, doubling n until the difference meets the precision.
template <class Eval>
std::pair<std::vector<double>, std::pair<double, int>> adaptive_nodes(int dims, const OracleOptions& opt,
                                                                      Eval&& eval) {
    int n = default_nodes(dims, opt);
    const int budget = std::max(node_budget(dims, opt), n);
    std::vector<double> coarse = eval(std::max(n / 2, 1));
    for (;;) {
        std::vector<double> fine = eval(n);
        const double err = std::max(max_abs_diff(fine, coarse), 1e-15);
        if (err <= opt.precision) return {std::move(fine), {err, n}};
        if (2 * n > budget) {
            std::ostringstream msg;
            msg << "quadrature bound " << err << " at " << n << " nodes per axis exceeds requested "
                << opt.precision;
            throw BudgetError(msg.str(), err);
        }
        coarse = std::move(fine);
        n *= 2;
    }
}

inline OracleResult hard_quadrature(const GramModel& g, Index l, const OracleOptions& opt) {
    const Index L = g.size();
    if (L > 6) throw DimensionError("quadrature oracle supports L <= 6");
    const int dims = static_cast<int>(L - 1);
    auto [sums, info] = adaptive_nodes(dims, opt, [&](int n) { return hard_gh_sum(g, l, n, opt.threads); });
    OracleResult r;
    r.moments = Eigen::Map<const Vector>(sums.data(), L);
    r.mass = sums[static_cast<std::size_t>(L)];
    r.error_bound = info.first;
    r.method = OracleMethod::quadrature;
    r.mass_method = OracleMethod::quadrature;
    r.nodes_or_samples = static_cast<std::uint64_t>(info.second);
    return r;
}

/// Monte Carlo reference with antithetic pairs (z, -z); the bound is 3 standard errors.
template <class Weight>
OracleResult reference_mc(const GramModel& g, Index l, const OracleOptions& opt, Weight&& weight) {
    const Index L = g.size();
    const std::uint64_t pairs = std::max<std::uint64_t>(opt.samples / 2, 2);
    const std::uint64_t chunks = std::min<std::uint64_t>(std::max<std::uint64_t>(opt.chunks, 1), pairs);
    const Matrix f = g.scale() * g.factor();
    const bool identity = g.is_identity();
    const std::size_t width = static_cast<std::size_t>(L + 1);
    CompensatedArray total(2 * width);
    ordered_chunk_reduce<CompensatedArray>(
        chunks, opt.threads,
        [&](std::size_t c) {
            const std::uint64_t begin = pairs * c / chunks;
            const std::uint64_t end = pairs * (c + 1) / chunks;
            NormalStream rng(opt.seed, c, StreamFamily::oracle);
            CompensatedArray acc(2 * width);
            std::vector<double> batch(2 * width);
            Vector z(L), s(L), neg(L);
            std::vector<double> v(width);
            std::uint64_t in_batch = 0;
            for (std::uint64_t i = begin; i < end; ++i) {
                rng.fill({z.data(), static_cast<std::size_t>(L)});
                if (identity)
                    s = g.scale() * z;
                else
                    s.noalias() = f * z;
                neg = -s;
                const double wp = weight(s, l);
                const double wn = weight(neg, l);
                for (Index k = 0; k < L; ++k) v[static_cast<std::size_t>(k)] = 0.5 * (wp - wn) * s[k];
                v[static_cast<std::size_t>(L)] = 0.5 * (wp + wn);
                for (std::size_t k = 0; k < width; ++k) {
                    batch[k] += v[k];
                    batch[width + k] += v[k] * v[k];
                }
                if (++in_batch == 1024) {
                    acc.add_all(batch);
                    std::fill(batch.begin(), batch.end(), 0.0);
                    in_batch = 0;
                }
            }
            acc.add_all(batch);
            return acc;
        },
        [&](const CompensatedArray& part) { total.merge(part); });

    const double n = static_cast<double>(pairs);
    OracleResult r;
    r.moments.resize(L);
    double worst = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
        const double mean = total.value(k) / n;
        const double var = std::max(total.value(width + k) / n - mean * mean, 0.0);
        worst = std::max(worst, 3.0 * std::sqrt(var / (n - 1.0)));
        if (k < static_cast<std::size_t>(L))
            r.moments[static_cast<Index>(k)] = mean;
        else
            r.mass = mean;
    }
    r.error_bound = std::max(worst, 1e-15);
    r.method = OracleMethod::ref_mc;
    r.mass_method = OracleMethod::ref_mc;
    r.nodes_or_samples = 2 * pairs;
    if (r.error_bound > opt.precision) {
        std::ostringstream msg;
        msg << "reference Monte Carlo bound " << r.error_bound << " with " << 2 * pairs
            << " samples exceeds requested " << opt.precision;
        throw BudgetError(msg.str(), r.error_bound);
    }
    return r;
}

inline double hard_weight(const Vector& s, Index l) {
    const double top = s.maxCoeff();
    Index k = 0;
    while (s[k] != top) ++k;
    return k == l ? 1.0 : 0.0;
}

/// Softmax of beta * s, written independently of the estimator code.
inline void softmax(const double* s, Index L, double beta, double* p) {
    double top = -std::numeric_limits<double>::infinity();
    for (Index k = 0; k < L; ++k) top = std::max(top, beta * s[k]);
    double total = 0.0;
    for (Index k = 0; k < L; ++k) {
        p[k] = std::exp(beta * s[k] - top);
        total += p[k];
    }
    for (Index k = 0; k < L; ++k) p[k] /= total;
}

/// All softmax moments at once: rows of `moments` are E[S p_l], plus E[p_l] and E[p_l p_k].
struct SoftTable {
    Matrix moments;  ///< (l, k) = E[S_k p_l]
    Vector mass;     ///< E[p_l]
    Matrix cross;    ///< (l, k) = E[p_l p_k]
    double error_bound = 0.0;
    int nodes = 0;
};

/// Quadrature over the L-1 logit differences D_j = S_j - S_0, whitened as D = C y. Since S
/// given D is Gaussian with mean Cov(S, D) Sigma_D^-1 D, E[S p] = Sigma T^T C^-T E[y p].
inline SoftTable soft_table(const GramModel& g, double beta, const OracleOptions& opt) {
    const Index L = g.size();
    if (L > 6) throw DimensionError("quadrature oracle supports L <= 6");
    const Matrix sigma = g.covariance();
    Matrix t = Matrix::Zero(L - 1, L);
    for (Index j = 1; j < L; ++j) {
        t(j - 1, 0) = -1.0;
        t(j - 1, j) = 1.0;
    }
    const Matrix sd = t * sigma * t.transpose();
    const Eigen::LLT<Matrix> llt(sd);
    if (llt.info() != Eigen::Success) throw FactorizationError("logit differences have a singular covariance");
    const Matrix c = llt.matrixL();
    const int dims = static_cast<int>(L - 1);
    const std::size_t out = static_cast<std::size_t>(L + L * L + (L - 1) * L);

    auto eval = [&](int n) {
        const auto& rule = gauss_hermite(n);
        auto body = [&](const double* y, double w, double* acc) {
            std::array<double, 8> logits{};
            std::array<double, 8> p{};
            for (Index j = 0; j < L - 1; ++j) {
                double v = 0.0;
                for (Index i = 0; i <= j; ++i) v += c(j, i) * y[i];
                logits[static_cast<std::size_t>(j + 1)] = v;
            }
            softmax(logits.data(), L, beta, p.data());
            for (Index l = 0; l < L; ++l) {
                const double wp = w * p[static_cast<std::size_t>(l)];
                acc[l] += wp;
                for (Index k = 0; k < L; ++k) acc[L + l * L + k] += wp * p[static_cast<std::size_t>(k)];
                for (Index j = 0; j < L - 1; ++j) acc[L + L * L + l * (L - 1) + j] += wp * y[j];
            }
        };
        return tensor_sum(dims, rule, out, opt.threads, body);
    };

    const Matrix map = sigma * t.transpose() * c.transpose().triangularView<Eigen::Upper>().solve(
                                                   Matrix::Identity(L - 1, L - 1));
    auto to_moments = [&](const std::vector<double>& v) {
        Matrix ey(L, L - 1);
        for (Index l = 0; l < L; ++l)
            for (Index j = 0; j < L - 1; ++j) ey(l, j) = v[static_cast<std::size_t>(L + L * L + l * (L - 1) + j)];
        return Matrix(ey * map.transpose());
    };
    // The bound covers the mapped moments, not only the raw integrals.
    auto eval_mapped = [&](int n) {
        std::vector<double> raw = eval(n);
        const Matrix m = to_moments(raw);
        raw.resize(static_cast<std::size_t>(L + L * L));
        raw.insert(raw.end(), m.data(), m.data() + m.size());
        return raw;
    };
    auto [v, info] = adaptive_nodes(dims, opt, eval_mapped);
    SoftTable table;
    table.mass = Eigen::Map<const Vector>(v.data(), L);
    table.cross = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        v.data() + L, L, L);
    table.moments = Eigen::Map<const Matrix>(v.data() + L + L * L, L, L);
    table.error_bound = info.first;
    table.nodes = info.second;
    return table;
}

}  // namespace detail

/// Reference (E[S_k 1{argmax S = l}])_k and P[argmax S = l].
///   L = 2: closed form. L <= 6: integration by parts onto orthant probabilities (closed form
///   up to L = 4). route = quadrature forces tensor Gauss-Hermite; L > 6 or route = ref_mc uses
///   antithetic Monte Carlo. The Gauss-Hermite route (also used for singular Grams) reports the
///   difference of successive rules; with the argmax indicator for L >= 3 this converges slowly
///   and erratically and is an estimate, not a guaranteed bound.
inline OracleResult hard_moments(const GramModel& g, Index l, const OracleOptions& opt = {}) {
    detail::check_template_index(g, l);
    const Index L = g.size();
    switch (opt.route) {
        case OracleRoute::quadrature: return detail::hard_quadrature(g, l, opt);
        case OracleRoute::ref_mc: return detail::reference_mc(g, l, opt, detail::hard_weight);
        case OracleRoute::automatic: break;
    }
    if (L == 2) return detail::hard_pair_exact(g, l);
    if (L <= 6 && g.full_rank()) return detail::hard_orthant(g, l, opt);
    if (L <= 6) return detail::hard_quadrature(g, l, opt);
    return detail::reference_mc(g, l, opt, detail::hard_weight);
}

/// Reference (E[S_k p_l(beta S)])_k and E[p_l(beta S)].
inline OracleResult soft_moments(const GramModel& g, double beta, Index l, const OracleOptions& opt = {}) {
    detail::check_template_index(g, l);
    detail::check_beta(beta);
    const Index L = g.size();
    if (opt.route == OracleRoute::ref_mc || (opt.route == OracleRoute::automatic && L > 6)) {
        return detail::reference_mc(g, l, opt, [beta](const Vector& s, Index j) {
            std::vector<double> p(static_cast<std::size_t>(s.size()));
            detail::softmax(s.data(), s.size(), beta, p.data());
            return p[static_cast<std::size_t>(j)];
        });
    }
    const detail::SoftTable table = detail::soft_table(g, beta, opt);
    OracleResult r;
    r.moments = table.moments.row(l).transpose();
    r.mass = table.mass[l];
    r.error_bound = table.error_bound;
    r.method = OracleMethod::quadrature;
    r.mass_method = OracleMethod::quadrature;
    r.nodes_or_samples = static_cast<std::uint64_t>(table.nodes);
    if (L == 2) {
        // p_0(beta S) and p_1(beta S) = p_0(-beta S) have the same law.
        r.mass = 0.5;
        r.mass_method = OracleMethod::exact;
    }
    return r;
}

/// |E[S_l p_l] - beta (Sigma_ll E[p_l] - sum_k Sigma_lk E[p_l p_k])| from one quadrature table;
/// zero up to integration error by Gaussian integration by parts.
inline double ibp_residual(const GramModel& g, double beta, Index l, const OracleOptions& opt = {}) {
    detail::check_template_index(g, l);
    detail::check_beta(beta);
    const detail::SoftTable table = detail::soft_table(g, beta, opt);
    const Matrix sigma = g.covariance();
    double rhs = sigma(l, l) * table.mass[l];
    for (Index k = 0; k < g.size(); ++k) rhs -= sigma(l, k) * table.cross(l, k);
    return std::abs(table.moments(l, l) - beta * rhs);
}

/// w_{l,j} = E[p_l p_j] / E[p_l].
inline Vector softmax_weights(const GramModel& g, double beta, Index l, const OracleOptions& opt = {}) {
    detail::check_template_index(g, l);
    detail::check_beta(beta);
    const detail::SoftTable table = detail::soft_table(g, beta, opt);
    return table.cross.row(l).transpose() / table.mass[l];
}

struct ScalarReference {
    double value = 0.0;
    double error_bound = 0.0;
};

/// E[max of n iid standard normals] = integral of x n phi(x) Phi(x)^(n-1), adaptive Gauss-Kronrod.
inline ScalarReference expected_max_iid_normals(long long n) {
    if (n < 1) throw DomainError("n must be positive");
    if (n == 1) return {0.0, kExactBound};
    const double m = static_cast<double>(n);
    auto density = [m](double x) {
        const double cdf = normal_cdf(x);
        if (cdf <= 0.0) return 0.0;
        return x * m * normal_pdf(x) * std::exp((m - 1.0) * std::log(cdf));
    };
    double total = 0.0;
    double error = 0.0;
    const std::array<double, 5> cuts{-12.0, -2.0, 2.0, 5.0, 12.0};
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        double e = 0.0;
        total += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(density, cuts[i], cuts[i + 1], 15,
                                                                                1e-14, &e);
        error += std::abs(e);
    }
    return {total, std::max(error, 1e-13)};
}

}  // namespace biaslab
