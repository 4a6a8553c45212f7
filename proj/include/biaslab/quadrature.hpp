#pragma once

#include "biaslab/common.hpp"
#include "biaslab/parallel.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <boost/math/special_functions/erf.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <vector>

namespace biaslab {

/// Standard normal density.
inline double normal_pdf(double x) noexcept {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

/// Standard normal distribution function, accurate in both tails.
inline double normal_cdf(double x) noexcept {
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double normal_quantile(double p) {
    p = std::clamp(p, 1e-300, 1.0 - 1e-16);
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

/// Nodes and weights of a Gauss rule; weights sum to the total mass of the weight function.
struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
    std::size_t size() const noexcept { return nodes.size(); }
};

namespace detail {

/// Golub-Welsch: nodes are eigenvalues of the Jacobi matrix, weights mass * (first eigenvector
/// component)^2. Implicit QL on the tridiagonal matrix, rotating only the first eigenvector row,
/// so a rule costs O(n^2) instead of the O(n^3) of a full eigendecomposition.
inline QuadratureRule golub_welsch(const Vector& diag, const Vector& offdiag, double mass) {
    const Index n = diag.size();
    std::vector<double> d(diag.data(), diag.data() + n);
    std::vector<double> e(static_cast<std::size_t>(n), 0.0);
    for (Index i = 0; i + 1 < n; ++i) e[static_cast<std::size_t>(i)] = offdiag[i];
    std::vector<double> z(static_cast<std::size_t>(n), 0.0);
    if (n > 0) z[0] = 1.0;
    const double eps = std::numeric_limits<double>::epsilon();
    for (std::size_t l = 0; l < d.size(); ++l) {
        int iter = 0;
        std::size_t m = l;
        do {
            for (m = l; m + 1 < d.size(); ++m)
                if (std::abs(e[m]) <= eps * (std::abs(d[m]) + std::abs(d[m + 1]))) break;
            if (m == l) break;
            if (++iter > 60) throw Error("Golub-Welsch QL iteration did not converge");
            double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            double r = std::hypot(g, 1.0);
            g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
            double s = 1.0, c = 1.0, p = 0.0;
            bool underflow = false;
            for (std::size_t i = m; i-- > l;) {
                const double f = s * e[i];
                const double b = c * e[i];
                r = std::hypot(f, g);
                e[i + 1] = r;
                if (r == 0.0) {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                const double zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if (underflow) continue;
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        } while (m != l);
    }
    std::vector<std::size_t> order(d.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
    QuadratureRule rule;
    for (const std::size_t i : order) {
        rule.nodes.push_back(d[i]);
        rule.weights.push_back(mass * z[i] * z[i]);
    }
    return rule;
}

template <class Build>
const QuadratureRule& cached_rule(std::map<int, QuadratureRule>& cache, std::mutex& mutex, int n, Build&& build) {
    std::lock_guard lock(mutex);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, build(n)).first;
    return it->second;
}

}  // namespace detail

/// n-point Gauss-Hermite rule for the standard normal weight: sum_i w_i f(x_i) ~ E[f(Z)].
inline const QuadratureRule& gauss_hermite(int n) {
    if (n < 1) throw DomainError("Gauss-Hermite rule needs n >= 1");
    static std::map<int, QuadratureRule> cache;
    static std::mutex mutex;
    return detail::cached_rule(cache, mutex, n, [](int m) {
        Vector off(std::max(m - 1, 0));
        for (int k = 1; k < m; ++k) off[k - 1] = std::sqrt(static_cast<double>(k));
        return detail::golub_welsch(Vector::Zero(m), off, 1.0);
    });
}

/// n-point Gauss-Legendre rule on [0, 1].
inline const QuadratureRule& gauss_legendre_unit(int n) {
    if (n < 1) throw DomainError("Gauss-Legendre rule needs n >= 1");
    static std::map<int, QuadratureRule> cache;
    static std::mutex mutex;
    return detail::cached_rule(cache, mutex, n, [](int m) {
        Vector off(std::max(m - 1, 0));
        for (int k = 1; k < m; ++k) off[k - 1] = k / std::sqrt(4.0 * k * k - 1.0);
        QuadratureRule r = detail::golub_welsch(Vector::Zero(m), off, 1.0);
        for (double& x : r.nodes) x = 0.5 * (x + 1.0);
        return r;
    });
}

/// Tensor-product sum over `dims` copies of `rule`:
///   out[j] = sum_{i_1..i_dims} (prod w) * f(z)[j]
/// `f(z, w, acc)` must add w * f(z) into acc[0..out_size). The outer index is distributed over
/// threads; the result is independent of the thread count.
template <class F>
std::vector<double> tensor_sum(int dims, const QuadratureRule& rule, std::size_t out_size, unsigned threads, F&& f) {
    if (dims < 1 || dims > 8) throw DimensionError("tensor_sum supports 1..8 dimensions");
    const std::size_t n = rule.size();
    CompensatedArray total(out_size);
    ordered_chunk_reduce<std::vector<double>>(
        n, threads,
        [&](std::size_t outer) {
            std::vector<double> acc(out_size, 0.0);
            std::array<std::size_t, 8> idx{};
            std::array<double, 8> z{};
            idx[0] = outer;
            z[0] = rule.nodes[outer];
            for (;;) {
                double w = rule.weights[outer];
                for (int k = 1; k < dims; ++k) {
                    z[static_cast<std::size_t>(k)] = rule.nodes[idx[static_cast<std::size_t>(k)]];
                    w *= rule.weights[idx[static_cast<std::size_t>(k)]];
                }
                f(z.data(), w, acc.data());
                int k = dims - 1;
                while (k >= 1 && ++idx[static_cast<std::size_t>(k)] == n) idx[static_cast<std::size_t>(k--)] = 0;
                if (k < 1) break;
            }
            return acc;
        },
        [&](std::vector<double> part) { total.add_all(part); });
    std::vector<double> out(out_size);
    for (std::size_t j = 0; j < out_size; ++j) out[j] = total.value(j);
    return out;
}

/// Value of an orthant probability together with a truncation estimate (0 for closed forms).
struct OrthantValue {
    double value = 0.0;
    double error = 0.0;
    bool exact = true;
};

namespace detail {

/// P(Y <= 0) for Y ~ N(0, cov) by Genz separation of variables on [0,1]^{m-1}, n nodes per axis.
inline double genz_orthant(const Matrix& chol, int n) {
    const Index m = chol.rows();
    const QuadratureRule& rule = gauss_legendre_unit(n);
    const double e1 = 0.5;  // Phi(0 / c_11)
    // u = t^3 (10 - 15 t + 6 t^2) flattens the quantile's endpoint singularities
    auto f = [&](const double* t, double w, double* acc) {
        std::array<double, 8> y{};
        double prod = e1;
        double e = e1;
        for (Index i = 1; i < m; ++i) {
            const double ti = t[i - 1];
            const double u = ti * ti * ti * (10.0 - 15.0 * ti + 6.0 * ti * ti);
            w *= 30.0 * ti * ti * (1.0 - ti) * (1.0 - ti);
            y[static_cast<std::size_t>(i - 1)] = normal_quantile(u * e);
            double s = 0.0;
            for (Index j = 0; j < i; ++j) s += chol(i, j) * y[static_cast<std::size_t>(j)];
            e = normal_cdf(-s / chol(i, i));
            prod *= e;
        }
        acc[0] += w * prod;
    };
    return tensor_sum(static_cast<int>(m - 1), rule, 1, 1, f)[0];
}

}  // namespace detail

/// P(Y > 0 componentwise) for Y ~ N(0, cov). Closed forms up to dimension 3; separation of
/// variables with tensor Gauss-Legendre (n and n/2 nodes, difference as error) for 4..6.
inline OrthantValue orthant_probability(const Matrix& cov, int nodes = 48) {
    const Index m = cov.rows();
    if (m == 0) return {1.0, 0.0, true};
    for (Index i = 0; i < m; ++i)
        if (!(cov(i, i) > 0.0)) throw FactorizationError("orthant covariance needs a positive diagonal");
    auto corr = [&](Index i, Index j) {
        return std::clamp(cov(i, j) / std::sqrt(cov(i, i) * cov(j, j)), -1.0, 1.0);
    };
    constexpr double pi = std::numbers::pi;
    if (m == 1) return {0.5, 0.0, true};
    if (m == 2) return {0.25 + std::asin(corr(0, 1)) / (2.0 * pi), 0.0, true};
    if (m == 3)
        return {0.125 + (std::asin(corr(0, 1)) + std::asin(corr(0, 2)) + std::asin(corr(1, 2))) / (4.0 * pi), 0.0,
                true};
    if (m > 7) throw DimensionError("orthant probabilities are supported up to dimension 7");
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) throw FactorizationError("orthant covariance is not positive definite");
    const Matrix chol = llt.matrixL();
    const double fine = detail::genz_orthant(chol, nodes);
    const double coarse = detail::genz_orthant(chol, nodes / 2);
    return {fine, std::max(std::abs(fine - coarse), 1e-15), false};
}

}  // namespace biaslab
