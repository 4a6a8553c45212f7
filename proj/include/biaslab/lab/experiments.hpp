#pragma once

#include "biaslab/engine.hpp"
#include "biaslab/oracle.hpp"
#include "biaslab/template_io.hpp"
#include "biaslab/templates.hpp"
#include "biaslab/theory.hpp"
#include "biaslab/lab/config.hpp"
#include "biaslab/lab/report.hpp"
#include "biaslab/lab/synthetic.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace biaslab::lab {

namespace fs = std::filesystem;

/// Command-line level settings that never change results.
struct RunOptions {
    unsigned threads = 0;
    fs::path out_dir = "bias_lab_out";
    std::optional<std::uint64_t> seed_override;  ///< e.g. from BIAS_LAB_SEED
};

/// The config requested an experiment that does not exist.
class UnknownExperimentError : public Error {
public:
    using Error::Error;
};

/// One experiment invocation: its config, the shared report and the row helpers.
class Context {
public:
    Context(const KeyValueConfig& config, RunReport& rep, std::string experiment_id, const RunOptions& opts)
        : cfg(config), report(rep), id(std::move(experiment_id)), threads(opts.threads), out_dir(opts.out_dir) {
        seed = opts.seed_override ? *opts.seed_override : cfg.get_u64("seed", 1);
        chunks = cfg.get_u64("chunks", 64);
        sigma = cfg.get_double("sigma_factor", 3.0);
        if (chunks < 1) throw ConfigError("chunks must be at least 1");
        if (!(sigma > 0.0)) throw ConfigError("sigma_factor must be positive");
    }

    const KeyValueConfig& cfg;
    RunReport& report;
    std::string id;
    unsigned threads = 0;
    fs::path out_dir;
    std::uint64_t seed = 1;
    std::uint64_t chunks = 64;
    double sigma = 3.0;

    ExperimentConfig engine(std::uint64_t M, double beta, std::uint64_t run_seed, Mode mode = Mode::gram,
                            Scope scope = Scope::full) const {
        ExperimentConfig e;
        e.M = M;
        e.beta = beta;
        e.seed = run_seed;
        e.chunks = std::min<std::uint64_t>(chunks, M);
        e.threads = threads;
        e.mode = mode;
        e.scope = scope;
        e.validate();
        return e;
    }

    ExperimentConfig engine(std::uint64_t M, double beta, Mode mode = Mode::gram, Scope scope = Scope::full) const {
        return engine(M, beta, seed, mode, scope);
    }

    Table& table(const std::string& suffix, std::vector<std::string> columns) {
        return report.table(suffix.empty() ? id : id + "_" + suffix, std::move(columns));
    }

    void absorb(const AssignmentEstimate& est, const std::string& params) {
        for (const auto& w : est.warnings) report.warnings.push_back(id + " (" + params + "): " + w);
    }

    /// |measured - reference| <= sigma * (stderr + bound).
    CheckRow& close(const std::string& check, const std::string& params, double measured, double se,
                    double reference, double bound, const std::string& provenance, double factor = 0.0) {
        const double f = factor > 0.0 ? factor : sigma;
        return add(row(check, params, measured, se, reference, bound, f * (se + bound),
                       fmt(f) + "*(stderr+bound)", provenance, Comparison::close));
    }

    /// |measured - reference| <= tol, tol given with its rule.
    CheckRow& close_abs(const std::string& check, const std::string& params, double measured, double se,
                        double reference, double bound, double tol, const std::string& rule,
                        const std::string& provenance) {
        return add(row(check, params, measured, se, reference, bound, tol, rule, provenance, Comparison::close));
    }

    /// measured - reference > tol.
    CheckRow& greater(const std::string& check, const std::string& params, double measured, double se,
                      double reference, double tol, const std::string& rule, const std::string& provenance) {
        return add(row(check, params, measured, se, reference, 0.0, tol, rule, provenance, Comparison::greater));
    }

    /// measured <= limit.
    CheckRow& at_most(const std::string& check, const std::string& params, double measured, double limit,
                      const std::string& provenance) {
        return add(row(check, params, measured, 0.0, limit, 0.0, 0.0, "measured<=" + fmt(limit), provenance,
                       Comparison::at_most));
    }

    CheckRow& info(const std::string& check, const std::string& params, double measured, double se,
                   double reference, double bound, const std::string& provenance) {
        return add(row(check, params, measured, se, reference, bound, 0.0, "none", provenance,
                       Comparison::informational));
    }

private:
    CheckRow row(const std::string& check, const std::string& params, double measured, double se, double reference,
                 double bound, double tol, std::string rule, const std::string& provenance, Comparison cmp) const {
        CheckRow r;
        r.experiment = id;
        r.check = check;
        r.params = params;
        r.measured = measured;
        r.measured_stderr = se;
        r.reference = reference;
        r.reference_bound = bound;
        r.tolerance = tol;
        r.tolerance_rule = std::move(rule);
        r.provenance = provenance;
        r.comparison = cmp;
        return r;
    }

    CheckRow& add(CheckRow r) {
        const std::string key = "tolerance." + r.check;
        if (r.comparison != Comparison::informational && r.comparison != Comparison::at_most && cfg.has(key)) {
            r.tolerance = cfg.get_double(key);
            r.tolerance_rule = "override " + key;
        }
        return report.add(std::move(r));
    }
};

// ---------------------------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------------------------

inline Mode parse_mode(const std::string& s) {
    if (s == "gram") return Mode::gram;
    if (s == "full") return Mode::full;
    throw ConfigError("mode must be 'gram' or 'full', got '" + s + "'");
}

inline std::string param(const std::string& key, double v) { return key + "=" + fmt(v); }
inline std::string param(const std::string& key, long long v) { return key + "=" + std::to_string(v); }

inline std::string join(std::initializer_list<std::string> parts) {
    std::string out;
    for (const auto& p : parts) out += (out.empty() ? "" : ";") + p;
    return out;
}

/// L random unit-norm (times `norm`) templates in R^d with every |rho_ij| <= max_abs_rho, drawn
/// by rejection from Gaussian directions.
inline TemplateSet random_templates(Index L, Index d, double max_abs_rho, std::uint64_t seed, double norm = 1.0,
                                    double min_eigenvalue = 0.0) {
    if (L < 2 || d < L) throw DimensionError("random templates need 2 <= L <= d");
    if (!(max_abs_rho > 0.0) || max_abs_rho >= 1.0) throw ConfigError("max_abs_rho must lie in (0, 1)");
    for (std::uint64_t attempt = 0; attempt < 100000; ++attempt) {
        NormalStream rng(seed, attempt, StreamFamily::templates);
        Matrix x(d, L);
        rng.fill({x.data(), static_cast<std::size_t>(x.size())});
        x = x.colwise().normalized();
        Matrix g = x.transpose() * x;
        g.diagonal().setZero();
        if (g.cwiseAbs().maxCoeff() > max_abs_rho) continue;
        g.diagonal().setOnes();
        if (min_eigenvalue > 0.0 &&
            Eigen::SelfAdjointEigenSolver<Matrix>(g, Eigen::EigenvaluesOnly).eigenvalues()(0) < min_eigenvalue)
            continue;
        return TemplateSet(norm * x);
    }
    throw ConfigError("could not draw templates with |rho| <= " + fmt(max_abs_rho));
}

inline GramModel equicorrelated(Index L, double rho, double norm) {
    Matrix r = Matrix::Constant(L, L, rho);
    r.diagonal().setOnes();
    return GramModel::from_correlation(r, norm);
}

/// Template set described by the `template` key and its parameters.
inline TemplateSet templates_from_config(const KeyValueConfig& cfg, std::uint64_t seed) {
    const std::string kind = cfg.get_string("template", "pair");
    const double norm = cfg.get_double("norm", 1.0);
    if (kind == "pair") return make_pair(cfg.get_double("rho", 0.0), cfg.get_int("d", 2), norm);
    if (kind == "circulant") {
        const auto seq = cfg.get_doubles("rho_seq");
        return make_circulant(seq, cfg.get_int("d", static_cast<std::int64_t>(seq.size())), norm);
    }
    if (kind == "orthonormal") {
        const auto L = cfg.get_int("L");
        return make_orthonormal(L, cfg.get_int("d", L), norm);
    }
    if (kind == "haar") {
        const std::string method = cfg.get_string("haar_method", "rotation");
        if (method != "rotation" && method != "sphere") throw ConfigError("haar_method must be rotation or sphere");
        const Vector x0 = make_exponential(cfg.get_int("d"), cfg.get_double("alpha", 1.0 / 30.0), norm);
        return make_haar_family(x0, cfg.get_int("L"), cfg.get_u64("template_seed", seed),
                                method == "sphere" ? HaarMethod::sphere : HaarMethod::rotation);
    }
    if (kind == "random") {
        const auto L = cfg.get_int("L");
        return random_templates(L, cfg.get_int("d", 2 * L), cfg.get_double("max_abs_rho", 0.8),
                                cfg.get_u64("template_seed", seed), norm);
    }
    if (kind == "csv" || kind == "pgm") {
        LoadOptions opts;
        opts.header = cfg.get_bool("header", false);
        opts.normalize = cfg.get_bool("normalize", true);
        opts.subtract_mean = cfg.get_bool("subtract_mean", true);
        if (cfg.has("norm")) opts.target_norm = norm;
        return load_templates(cfg.get_string("template_path"),
                              kind == "csv" ? TemplateFormat::csv : TemplateFormat::pgm, opts);
    }
    throw ConfigError("unknown template kind '" + kind + "'");
}

inline double pearson(const Vector& a, const Vector& b) {
    const Vector ca = a.array() - a.mean();
    const Vector cb = b.array() - b.mean();
    const double n = ca.norm() * cb.norm();
    return n > 0.0 ? ca.dot(cb) / n : 0.0;
}

inline std::vector<std::string> row_strings(std::initializer_list<double> values) {
    std::vector<std::string> out;
    for (double v : values) out.push_back(fmt(v));
    return out;
}

inline double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

// ---------------------------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------------------------

/// Hard assignment with two templates against the closed form, antisymmetry and the oracle.
inline void pair_hard(Context& c) {
    const auto rhos = c.cfg.get_doubles("rho", std::vector<double>{-1.0, -0.5, 0.0, 0.5, 0.9, 0.99});
    const double norm = c.cfg.get_double("norm", 1.0);
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const Mode mode = parse_mode(c.cfg.get_string("mode", "gram"));
    const Index d = c.cfg.get_int("d", mode == Mode::full ? 64 : 2);
    const bool with_oracle = c.cfg.get_bool("oracle", true);
    auto& t = c.table("", {"rho[1]", "M[samples]", "corr00[sigma*norm]", "stderr00[sigma*norm]",
                           "corr01[sigma*norm]", "corr10[sigma*norm]", "corr11[sigma*norm]", "mass0[1]",
                           "predicted00[sigma*norm]", "oracle00[sigma*norm]", "oracle_bound[sigma*norm]",
                           "alpha00[1/norm]", "alpha01[1/norm]", "predicted_alpha00[1/norm]"});
    for (double rho : rhos) {
        const TemplateSet set = make_pair(rho, d, norm);
        const auto est = hard_assign(set, c.engine(M, kHardBeta, mode));
        const std::string params = join({param("rho", rho), param("M", static_cast<long long>(M))});
        c.absorb(est, params);
        const TheoryPrediction th = hard_pair_prediction(rho, norm);
        c.close("closed_form", params, est.corr(0, 0), est.std_error(0, 0), th.predicted_corr(0, 0), 0.0,
                "HardPair");
        for (Index k = 0; k < 2; ++k)
            c.close("antisymmetry_" + std::to_string(k), params, est.corr(1, k) + est.corr(0, k),
                    est.std_error(0, k) + est.std_error(1, k), 0.0, 0.0, "HardPair row sum x_hat_0 + x_hat_1 = 0");
        double oracle = std::numeric_limits<double>::quiet_NaN();
        double bound = 0.0;
        if (with_oracle) {
            const OracleResult o = hard_moments(gram(set), 0);
            oracle = o.ratio()[0];
            bound = o.ratio_error_bound();
            c.close("oracle", params, est.corr(0, 0), est.std_error(0, 0), oracle, bound,
                    std::string("oracle ") + to_string(o.method));
        }
        double a00 = std::numeric_limits<double>::quiet_NaN();
        double a01 = a00;
        const GramModel g = gram(set);
        if (g.full_rank() && g.min_eigenvalue() > 1e-12) {
            const Matrix alpha = extract_coefficients(est.corr, g);
            a00 = alpha(0, 0);
            a01 = alpha(0, 1);
        }
        t.add(row_strings({rho, double(M), est.corr(0, 0), est.std_error(0, 0), est.corr(0, 1), est.corr(1, 0),
                           est.corr(1, 1), est.mass[0], th.predicted_corr(0, 0), oracle, bound, a00, a01,
                           th.alpha(0, 0)}));
    }
}

/// Soft assignment with two templates against the logistic approximation and the oracle.
inline void pair_soft(Context& c) {
    const auto rhos = c.cfg.get_doubles("rho", std::vector<double>{0.0, 0.5, 0.9});
    const double norm = c.cfg.get_double("norm", 1.0);
    const double beta = c.cfg.get_double("beta", 1.0);
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const double gap = c.cfg.get_double("approximation_gap", 0.015);
    auto& t = c.table("", {"rho[1]", "beta[1/sigma]", "corr00[sigma*norm]", "stderr00[sigma*norm]",
                           "corr10[sigma*norm]", "mass0[1]", "approx00[sigma*norm]", "oracle00[sigma*norm]",
                           "oracle_bound[sigma*norm]"});
    for (double rho : rhos) {
        const TemplateSet set = make_pair(rho, 2, norm);
        const GramModel g = gram(set);
        const auto est = soft_assign(g, c.engine(M, beta));
        const std::string params = join({param("rho", rho), param("beta", beta), param("M", (long long)M)});
        c.absorb(est, params);
        for (Index k = 0; k < 2; ++k)
            c.close("antisymmetry_" + std::to_string(k), params, est.corr(1, k) + est.corr(0, k),
                    est.std_error(0, k) + est.std_error(1, k), 0.0, 0.0, "SoftPairApprox row sum = 0");
        double approx = std::numeric_limits<double>::quiet_NaN();
        if (beta == 1.0 && rho < 1.0) {
            approx = soft_pair_prediction(rho, norm).predicted_corr(0, 0);
            c.close_abs("approximation", params, est.corr(0, 0), est.std_error(0, 0), approx, 0.0,
                        c.sigma * est.std_error(0, 0) + gap,
                        fmt(c.sigma) + "*stderr+approximation_gap(" + fmt(gap) + ")", "SoftPairApprox");
        }
        const OracleResult o = soft_moments(g, beta, 0);
        c.close("oracle", params, est.corr(0, 0), est.std_error(0, 0), o.ratio()[0], o.ratio_error_bound(),
                std::string("oracle ") + to_string(o.method));
        c.close_abs("mass_sum", params, est.mass[0] + est.mass[1], 0.0, 1.0, 0.0, 1e-9, "abs<=1e-9",
                    "softmax weights sum to one")
            .unit = "1";
        t.add(row_strings({rho, beta, est.corr(0, 0), est.std_error(0, 0), est.corr(1, 0), est.mass[0], approx,
                           o.ratio()[0], o.ratio_error_bound()}));
    }
}

/// Finite-L soft approximation vs the oracle, with the engine as a third opinion.
inline void soft_finite(Context& c) {
    const Index L = c.cfg.get_int("L", 3);
    const double norm = c.cfg.get_double("norm", 1.0);
    const double beta = c.cfg.get_double("beta", 1.0);
    const auto M = c.cfg.get_u64("M", 1'000'000);
    std::optional<double> rel_tol;
    if (c.cfg.has("theory_rel_tolerance")) rel_tol = c.cfg.get_double("theory_rel_tolerance");
    const GramModel g = gram(make_orthonormal(L, L, norm));
    const auto est = soft_assign(g, c.engine(M, beta));
    const std::string base = join({param("L", (long long)L), param("beta", beta), param("norm", norm)});
    c.absorb(est, base);
    std::optional<TheoryPrediction> th;
    if (beta == 1.0) {
        try {
            th = soft_finite_prediction(g);
        } catch (const ApproximationBreakdownError& e) {
            c.report.warnings.push_back(c.id + ": " + e.what());
        }
    }
    auto& t = c.table("", {"l[index]", "corr_ll[sigma*norm]", "stderr_ll[sigma*norm]", "oracle_ll[sigma*norm]",
                           "oracle_bound[sigma*norm]", "eq_predicted_ll[sigma*norm]", "rel_gap_theory_oracle[1]"});
    for (Index l = 0; l < L; ++l) {
        const OracleResult o = soft_moments(g, beta, l);
        const double oracle = o.ratio()[l];
        const double bound = o.ratio_error_bound();
        const std::string params = base + ";l=" + std::to_string(l);
        c.close("oracle", params, est.corr(l, l), est.std_error(l, l), oracle, bound,
                std::string("oracle ") + to_string(o.method));
        double pred = std::numeric_limits<double>::quiet_NaN();
        double rel = pred;
        if (th) {
            pred = th->predicted_corr(l, l);
            rel = std::abs(pred - oracle) / std::abs(oracle);
            if (rel_tol) {
                c.at_most("theory_rel_gap", params, rel, *rel_tol, "SoftFiniteLApprox vs oracle").unit = "1";
            } else {
                c.info("theory_rel_gap", params, rel, 0.0, 0.0, 0.0, "SoftFiniteLApprox vs oracle").unit = "1";
            }
        }
        t.add(row_strings({double(l), est.corr(l, l), est.std_error(l, l), oracle, bound, pred, rel}));
    }
}

/// Soft assignment approaches hard assignment as beta grows.
inline void beta_bridge(Context& c) {
    const Index L = c.cfg.get_int("L", 3);
    const auto betas = c.cfg.get_doubles("beta", std::vector<double>{1.0, 5.0, 20.0, 100.0});
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const double floor = c.cfg.get_double("coincidence_floor", 0.01);
    const TemplateSet set = random_templates(L, 2 * L, c.cfg.get_double("max_abs_rho", 0.8),
                                             c.cfg.get_u64("template_seed", c.seed));
    const GramModel g = gram(set);
    const auto hard = hard_assign(g, c.engine(M, kHardBeta));
    c.absorb(hard, "hard");
    auto& t = c.table("", {"beta[1/sigma]", "max_abs_diff[sigma*norm]", "max_combined_stderr[sigma*norm]"});
    std::vector<double> dist;
    std::vector<double> ses;
    for (double beta : betas) {
        const auto soft = soft_assign(g, c.engine(M, beta));
        c.absorb(soft, param("beta", beta));
        const Matrix se = (soft.std_error.array().square() + hard.std_error.array().square()).sqrt().matrix();
        dist.push_back(max_abs(soft.corr - hard.corr));
        ses.push_back(se.maxCoeff());
        t.add(row_strings({beta, dist.back(), ses.back()}));
    }
    const std::string base = param("L", (long long)L);
    for (std::size_t i = 0; i + 1 < betas.size(); ++i) {
        const std::string params =
            join({base, "beta=" + fmt(betas[i]) + "->" + fmt(betas[i + 1])});
        c.greater("decreasing", params, dist[i], ses[i], dist[i + 1], 0.0, "diff>0", "beta to infinity limit");
    }
    const std::size_t last = betas.size() - 1;
    const double tol = std::max(floor, 5.0 * ses[last]);
    c.close_abs("coincidence", join({base, param("beta", betas[last])}), dist[last], ses[last], 0.0, 0.0, tol,
                "max(" + fmt(floor) + ",5*stderr)", "beta to infinity limit");
}

/// corr / beta against the linear-response limit as beta -> 0.
inline void beta_zero(Context& c) {
    const Index L = c.cfg.get_int("L", 4);
    const double norm = c.cfg.get_double("norm", 1.0);
    const double beta = c.cfg.get_double("beta", 1e-3);
    const auto M = c.cfg.get_u64("M", 10'000'000);
    const double factor = c.cfg.get_double("stderr_factor", 5.0);
    const GramModel g = gram(make_orthonormal(L, L, norm));
    const auto est = soft_assign(g, c.engine(M, beta));
    const TheoryPrediction th = beta_zero_limit(g);
    c.absorb(est, "beta_zero");
    auto& t = c.table("", {"l[index]", "k[index]", "corr_over_beta[sigma*norm/beta]", "stderr_over_beta[sigma*norm/beta]",
                           "predicted[sigma*norm/beta]"});
    for (Index l = 0; l < L; ++l)
        for (Index k = 0; k < L; ++k) {
            const std::string params = join({param("L", (long long)L), param("beta", beta),
                                             "l=" + std::to_string(l), "k=" + std::to_string(k)});
            const double m = est.corr(l, k) / beta;
            const double se = est.std_error(l, k) / beta;
            c.close("limit", params, m, se, th.predicted_corr(l, k), 0.0, "BetaZeroLimit", factor).unit =
                "sigma*norm/beta";
            t.add(row_strings({double(l), double(k), m, se, th.predicted_corr(l, k)}));
        }
}

/// Positive correlation (both estimators) and consistency (hard) on random template sets.
inline void positive_correlation(Context& c) {
    const auto sets = c.cfg.get_int("sets", 50);
    const Index L_min = c.cfg.get_int("L_min", 2);
    const Index L_max = c.cfg.get_int("L_max", 6);
    const double max_rho = c.cfg.get_double("max_abs_rho", 0.8);
    const double beta = c.cfg.get_double("beta", 1.0);
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const auto tseed = c.cfg.get_u64("template_seed", c.seed);
    if (L_min < 2 || L_max < L_min) throw ConfigError("need 2 <= L_min <= L_max");
    auto& t = c.table("", {"set[index]", "L[count]", "estimator", "max_abs_rho[1]", "min_z_positive[sigma]",
                           "min_z_consistency[sigma]"});
    for (std::int64_t i = 0; i < sets; ++i) {
        const Index L = L_min + static_cast<Index>(i % (L_max - L_min + 1));
        const TemplateSet set = random_templates(L, 2 * L, max_rho, stream_seed(tseed, static_cast<std::uint64_t>(i)));
        const GramModel g = gram(set);
        Matrix off = g.rho();
        off.diagonal().setZero();
        const double rho_max = max_abs(off);
        for (const bool hard : {true, false}) {
            const auto est = run_assignment(g, c.engine(M, hard ? kHardBeta : beta,
                                                        stream_seed(c.seed, static_cast<std::uint64_t>(i))));
            const std::string params = join({"set=" + std::to_string(i), param("L", (long long)L),
                                             hard ? "hard" : "soft;beta=" + fmt(beta)});
            c.absorb(est, params);
            Index wl = 0;
            double wz = std::numeric_limits<double>::infinity();
            for (Index l = 0; l < L; ++l) {
                const double z = est.corr(l, l) / est.std_error(l, l);
                if (!(z >= wz)) {
                    wz = z;
                    wl = l;
                }
            }
            c.greater("positive", params + ";l=" + std::to_string(wl), est.corr(wl, wl), est.std_error(wl, wl), 0.0,
                      c.sigma * est.std_error(wl, wl), fmt(c.sigma) + "*stderr", "positive correlation");
            Index cl = 0;
            Index ck = 1;
            double cz = std::numeric_limits<double>::infinity();
            for (Index l = 0; l < L; ++l)
                for (Index k = 0; k < L; ++k) {
                    if (k == l) continue;
                    const double z = (est.corr(l, l) - est.corr(l, k)) / (est.std_error(l, l) + est.std_error(l, k));
                    if (!(z >= cz)) {
                        cz = z;
                        cl = l;
                        ck = k;
                    }
                }
            const std::string cparams = params + ";l=" + std::to_string(cl) + ";k=" + std::to_string(ck);
            const double diff = est.corr(cl, cl) - est.corr(cl, ck);
            const double se = est.std_error(cl, cl) + est.std_error(cl, ck);
            if (hard) {
                c.greater("consistency", cparams, diff, se, 0.0, c.sigma * se, fmt(c.sigma) + "*(stderr_ll+stderr_lk)",
                          "consistency");
            } else {
                c.info("consistency_soft", cparams, diff, se, 0.0, 0.0, "consistency (not claimed for soft)");
            }
            t.add({std::to_string(i), std::to_string(L), hard ? "hard" : "soft", fmt(rho_max), fmt(wz), fmt(cz)});
        }
    }
}

/// Hard cluster masses of a circulant Gram are uniform.
inline void mass_sanity(Context& c) {
    const auto seq = c.cfg.get_doubles("rho_seq", std::vector<double>{1.0, 0.3, 0.1, 0.3});
    const double norm = c.cfg.get_double("norm", 1.0);
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const GramModel g = GramModel::circulant(seq, norm);
    const Index L = g.size();
    const auto est = hard_assign(g, c.engine(M, kHardBeta));
    c.absorb(est, "mass");
    const double p = 1.0 / static_cast<double>(L);
    const double tol = 4.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(M));
    auto& t = c.table("", {"l[index]", "mass[1]", "expected[1]"});
    for (Index l = 0; l < L; ++l) {
        c.close_abs("uniform_mass", join({param("L", (long long)L), "l=" + std::to_string(l)}), est.mass[l],
                    std::sqrt(p * (1.0 - p) / double(M)), p, 0.0, tol, "4*sqrt(p(1-p)/M)", "cyclic invariance")
            .unit = "1";
        t.add(row_strings({double(l), est.mass[l], p}));
    }
}

/// Average (equicorrelated pairs) and individual (circulant pairs) inverse dependency.
inline void inverse_dependency(Context& c) {
    const auto Ls = c.cfg.get_ints("L", std::vector<std::int64_t>{2, 3, 4});
    const double lo = c.cfg.get_double("rho_low", 0.0);
    const double hi = c.cfg.get_double("rho_high", 0.5);
    const double beta = c.cfg.get_double("beta", 1.0);
    const double norm = c.cfg.get_double("norm", 1.0);
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const auto seq_lo = c.cfg.get_doubles("rho_seq_low", std::vector<double>{1.0, 0.0, 0.0, 0.0});
    const auto seq_hi = c.cfg.get_doubles("rho_seq_high", std::vector<double>{1.0, 0.4, 0.4, 0.4});
    if (!(lo <= hi)) throw ConfigError("rho_low must not exceed rho_high");
    if (seq_lo.size() != seq_hi.size()) throw ConfigError("rho_seq_low and rho_seq_high need the same length");
    for (std::size_t i = 0; i < seq_lo.size(); ++i)
        if (seq_lo[i] > seq_hi[i]) throw ConfigError("rho_seq_low must be entrywise <= rho_seq_high");

    auto& t = c.table("average", {"L[count]", "estimator", "pooled_low[sigma*norm]", "stderr_low[sigma*norm]",
                                  "pooled_high[sigma*norm]", "stderr_high[sigma*norm]"});
    for (const auto L64 : Ls) {
        const Index L = static_cast<Index>(L64);
        const GramModel glo = equicorrelated(L, lo, norm);
        const GramModel ghi = equicorrelated(L, hi, norm);
        for (const bool hard : {true, false}) {
            const double b = hard ? kHardBeta : beta;
            const auto elo = run_assignment(glo, c.engine(M, b));
            const auto ehi = run_assignment(ghi, c.engine(M, b));
            const std::string params = join({param("L", (long long)L), hard ? "hard" : "soft;beta=" + fmt(beta),
                                             "rho=" + fmt(lo) + "vs" + fmt(hi)});
            c.absorb(elo, params);
            c.absorb(ehi, params);
            const double se = elo.pooled_std_error + ehi.pooled_std_error;
            c.greater("average_order", params, elo.pooled, se, ehi.pooled, c.sigma * se,
                      fmt(c.sigma) + "*(stderr_low+stderr_high)", "average inverse dependency");
            if (hard && L == 2) {
                c.close("pair_value_low", params, elo.pooled, elo.pooled_std_error, max_two_gaussians_mean(lo) * norm,
                        0.0, "HardPair");
                c.close("pair_value_high", params, ehi.pooled, ehi.pooled_std_error,
                        max_two_gaussians_mean(hi) * norm, 0.0, "HardPair");
            }
            t.add({std::to_string(L), hard ? "hard" : "soft", fmt(elo.pooled), fmt(elo.pooled_std_error),
                   fmt(ehi.pooled), fmt(ehi.pooled_std_error)});
        }
    }

    const GramModel clo = GramModel::circulant(seq_lo, norm);
    const GramModel chi = GramModel::circulant(seq_hi, norm);
    auto& ti = c.table("individual", {"l[index]", "estimator", "corr_low[sigma*norm]", "stderr_low[sigma*norm]",
                                      "corr_high[sigma*norm]", "stderr_high[sigma*norm]"});
    for (const bool hard : {true, false}) {
        const double b = hard ? kHardBeta : beta;
        const auto elo = run_assignment(clo, c.engine(M, b));
        const auto ehi = run_assignment(chi, c.engine(M, b));
        c.absorb(elo, "circulant low");
        c.absorb(ehi, "circulant high");
        for (Index l = 0; l < clo.size(); ++l) {
            const std::string params = join({param("L", (long long)clo.size()), hard ? "hard" : "soft;beta=" + fmt(beta),
                                             "l=" + std::to_string(l)});
            const double se = elo.std_error(l, l) + ehi.std_error(l, l);
            c.greater("individual_order", params, elo.corr(l, l), se, ehi.corr(l, l), c.sigma * se,
                      fmt(c.sigma) + "*(stderr_low+stderr_high)", "individual inverse dependency");
            ti.add({std::to_string(l), hard ? "hard" : "soft", fmt(elo.corr(l, l)), fmt(elo.std_error(l, l)),
                    fmt(ehi.corr(l, l)), fmt(ehi.std_error(l, l))});
        }
    }
}

/// Estimate vectors approach span{x_l}: the out-of-span part shrinks like 1/sqrt(M).
inline void span(Context& c) {
    const auto seq = c.cfg.get_doubles("rho_seq", std::vector<double>{1.0, 0.2, 0.2});
    const Index d = c.cfg.get_int("d", 50);
    const double norm = c.cfg.get_double("norm", 1.0);
    const double beta = c.cfg.get_double("beta", kHardBeta);
    const auto M1 = c.cfg.get_u64("M_small", 10'000);
    const auto M2 = c.cfg.get_u64("M_large", 1'000'000);
    const double limit = c.cfg.get_double("residual_limit", 0.1);
    const double rel = c.cfg.get_double("ratio_tolerance", 0.3);
    const TemplateSet set = make_circulant(seq, d, norm);
    const Index L = set.count();
    auto& t = c.table("", {"M[samples]", "mean_residual[1]", "max_residual[1]"});
    std::vector<double> mean;
    for (const auto M : {M1, M2}) {
        const auto est = run_assignment(set, c.engine(M, beta, Mode::full));
        c.absorb(est, param("M", (long long)M));
        const Vector r = span_residual(est, set);
        mean.push_back(r.mean());
        t.add(row_strings({double(M), r.mean(), r.maxCoeff()}));
    }
    const std::string base = join({param("L", (long long)L), param("d", (long long)d),
                                   std::isinf(beta) ? std::string("hard") : "soft;beta=" + fmt(beta)});
    const double expected = std::sqrt(static_cast<double>(M2) / static_cast<double>(M1));
    c.close_abs("residual_scaling", base + ";M=" + std::to_string(M1) + "->" + std::to_string(M2),
                mean[0] / mean[1], 0.0, expected, 0.0, rel * expected, "relative " + fmt(rel), "span property")
        .unit = "1";
    c.at_most("residual_small", base + ";M=" + std::to_string(M2), mean[1], limit, "span property").unit = "1";
}

/// Bias of hard assignment with many orthogonal templates: E[max of L normals] and sqrt(2 log L).
inline void gumbel_sweep(Context& c) {
    const auto Ls = c.cfg.get_ints("L", std::vector<std::int64_t>{16, 64, 256, 1024, 4096});
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const double norm = c.cfg.get_double("norm", 1.0);
    const auto d = c.cfg.get_int("d", *std::max_element(Ls.begin(), Ls.end()));
    const double ratio_tol = c.cfg.get_double("ratio_tolerance", 0.15);
    const auto ratio_at = c.cfg.get_int("ratio_at_L", 4096);
    auto& t = c.table("", {"L[count]", "measured[norm]", "stderr[norm]", "mean_own_corr[norm]", "oracle[norm]",
                           "oracle_bound[norm]", "a_L[1]", "b_L[1]", "b_L_over_sqrt_d[1]", "ratio[1]"});
    std::vector<double> dev;
    std::vector<double> dev_se;
    std::vector<std::int64_t> done;
    for (const auto L : Ls) {
        if (L < 2) throw ConfigError("gumbel_sweep needs L >= 2");
        const GramModel g = GramModel::identity(static_cast<Index>(L), norm);
        const auto est = hard_assign(g, c.engine(M, kHardBeta, Mode::gram, Scope::own));
        const std::string params = join({param("L", (long long)L), param("M", (long long)M)});
        c.absorb(est, params);
        const double measured = est.pooled / norm;
        const double se = est.pooled_std_error / norm;
        const ScalarReference ref = expected_max_iid_normals(L);
        c.close("oracle", params, measured, se, ref.value, ref.error_bound, "oracle expected max of L normals").unit =
            "norm";
        const TheoryPrediction th = gumbel_prediction(L, d);
        const double a = th.scalars.at("a_L");
        const double ratio = measured / a;
        double own = 0.0;
        Index defined = 0;
        for (Index l = 0; l < est.size(); ++l)
            if (est.defined[static_cast<std::size_t>(l)]) {
                own += est.corr(l, l);
                ++defined;
            }
        own = defined ? own / double(defined) / norm : std::numeric_limits<double>::quiet_NaN();
        t.add(row_strings({double(L), measured, se, own, ref.value, ref.error_bound, a, th.scalars.at("b_L"),
                           th.scalars.at("b_L_over_sqrt_d"), ratio}));
        dev.push_back(std::abs(ratio - 1.0));
        dev_se.push_back(se / a);
        done.push_back(L);
        if (L == ratio_at)
            c.at_most("ratio_near_one", params, std::abs(ratio - 1.0), ratio_tol, "GumbelScale sqrt(2 log L)").unit =
                "1";
    }
    for (std::size_t i = 0; i + 1 < dev.size(); ++i) {
        const std::string params = "L=" + std::to_string(done[i]) + "->" + std::to_string(done[i + 1]);
        const double se = dev_se[i] + dev_se[i + 1];
        c.greater("ratio_approaches_one", params, dev[i], se, dev[i + 1], c.sigma * se, fmt(c.sigma) + "*stderr",
                  "GumbelScale sqrt(2 log L)")
            .unit = "1";
    }
}

/// Soft assignment with many orthonormal templates recovers the templates.
inline void soft_asymptotic(Context& c) {
    const Index L = c.cfg.get_int("L", 256);
    const double beta = c.cfg.get_double("beta", 1.0);
    const double norm = c.cfg.get_double("norm", 1.0);
    const auto M = c.cfg.get_u64("M", 10'000'000);
    const double lo = c.cfg.get_double("range_low", 0.95);
    const double hi = c.cfg.get_double("range_high", 1.01);
    const GramModel g = GramModel::identity(L, norm);
    const auto est = soft_assign(g, c.engine(M, beta, Mode::gram, Scope::own));
    const std::string params = join({param("L", (long long)L), param("beta", beta), param("M", (long long)M)});
    c.absorb(est, params);
    const Vector diag = est.corr.diagonal() / (norm * norm);
    const double mean = diag.mean();
    const double mean_se = est.std_error.diagonal().norm() / double(L) / (norm * norm);
    const std::string rule = "interval [" + fmt(lo) + "," + fmt(hi) + "]";
    const double mid = 0.5 * (lo + hi);
    const double half = 0.5 * (hi - lo);
    c.close_abs("mean_in_range", params, mean, mean_se, mid, 0.0, half, rule, "soft consistency as d,L grow")
        .unit = "norm^2";
    Index lmin = 0;
    Index lmax = 0;
    diag.minCoeff(&lmin);
    diag.maxCoeff(&lmax);
    c.close_abs("min_in_range", params + ";l=" + std::to_string(lmin), diag[lmin], est.std_error(lmin, lmin), mid,
                0.0, half, rule, "soft consistency as d,L grow")
        .unit = "norm^2";
    c.close_abs("max_in_range", params + ";l=" + std::to_string(lmax), diag[lmax], est.std_error(lmax, lmax), mid,
                0.0, half, rule, "soft consistency as d,L grow")
        .unit = "norm^2";
    double predicted = std::numeric_limits<double>::quiet_NaN();
    if (beta == 1.0) {
        try {
            predicted = soft_finite_prediction(g).predicted_corr(0, 0) / (norm * norm);
        } catch (const ApproximationBreakdownError& e) {
            c.report.warnings.push_back(c.id + ": " + e.what());
        }
    }
    c.info("finite_L_approximation", params, mean, mean_se, predicted, 0.0, "SoftFiniteLApprox").unit = "norm^2";
    auto& t = c.table("", {"L[count]", "mean_corr_ll[norm^2]", "stderr_mean[norm^2]", "min_corr_ll[norm^2]",
                           "max_corr_ll[norm^2]", "eq_predicted[norm^2]", "pooled[norm]"});
    t.add(row_strings({double(L), mean, mean_se, diag[lmin], diag[lmax], predicted, est.pooled / norm}));
}

/// Internal consistency of the oracle.
inline void oracle_checks(Context& c) {
    const auto grams = c.cfg.get_int("grams", 10);
    const double beta_max = c.cfg.get_double("beta_max", 5.0);
    const double ibp_limit = c.cfg.get_double("ibp_limit", 1e-6);
    const double exact_limit = c.cfg.get_double("exact_vs_quadrature_limit", 1e-8);
    const auto tseed = c.cfg.get_u64("template_seed", c.seed);
    const auto pair_rhos = c.cfg.get_doubles("pair_rho", std::vector<double>{-0.5, 0.0, 0.5, 0.9});

    for (std::int64_t i = 0; i < grams; ++i) {
        const Index L = 2 + static_cast<Index>(i % 2);
        NormalStream rng(tseed, static_cast<std::uint64_t>(i), StreamFamily::oracle);
        const double beta = 0.5 + (beta_max - 0.5) * rng.uniform();
        const GramModel g = gram(random_templates(L, L + 2, 0.9, stream_seed(tseed, 1000 + i), 1.0, 0.05));
        const std::string params = join({"gram=" + std::to_string(i), param("L", (long long)L), param("beta", beta)});
        c.at_most("ibp_residual", params, ibp_residual(g, beta, 0), ibp_limit, "integration by parts identity");

        // sum rules
        double mass = 0.0;
        double bound = 0.0;
        Vector total = Vector::Zero(L);
        for (Index l = 0; l < L; ++l) {
            const OracleResult o = hard_moments(g, l);
            mass += o.mass;
            total += o.moments;
            bound += o.error_bound;
        }
        c.close_abs("hard_mass_sum", params, mass, 0.0, 1.0, bound, std::max(bound, 1e-12), "sum of bounds",
                    "hard oracle sum rule")
            .unit = "1";
        c.close_abs("hard_moment_sum", params, total.cwiseAbs().maxCoeff(), 0.0, 0.0, bound, std::max(bound, 1e-12),
                    "sum of bounds", "hard oracle sum rule");
        double soft_mass = 0.0;
        double soft_bound = 0.0;
        for (Index l = 0; l < L; ++l) {
            const OracleResult o = soft_moments(g, beta, l);
            soft_mass += o.mass;
            soft_bound += o.error_bound;
        }
        c.close_abs("soft_mass_sum", params, soft_mass, 0.0, 1.0, soft_bound, std::max(soft_bound, 1e-12),
                    "sum of bounds", "soft oracle sum rule")
            .unit = "1";
    }

    for (double rho : pair_rhos) {
        const GramModel g = gram(make_pair(rho, 2, 1.0));
        OracleOptions quad;
        quad.route = OracleRoute::quadrature;
        quad.precision = 1e-10;
        const OracleResult exact = hard_moments(g, 0);
        const OracleResult q = hard_moments(g, 0, quad);
        const std::string params = param("rho", rho);
        const double diff = std::max((exact.moments - q.moments).cwiseAbs().maxCoeff(), std::abs(exact.mass - q.mass));
        c.at_most("exact_vs_quadrature", params, diff, exact_limit,
                  std::string("oracle exact vs ") + to_string(q.method));
        c.close_abs("exact_vs_theory", params, exact.ratio()[0], 0.0, hard_pair_prediction(rho).predicted_corr(0, 0),
                    exact.ratio_error_bound(), 1e-12, "abs<=1e-12", "HardPair");
    }

    const std::vector<std::vector<double>> seqs{{1.0, 0.3, 0.3}, {1.0, 0.3, 0.1, 0.3}, {1.0, 0.2, -0.1, -0.1, 0.2}};
    for (const auto& seq : seqs) {
        const GramModel g = GramModel::circulant(seq, 1.0);
        const Index L = g.size();
        const double p = 1.0 / static_cast<double>(L);
        OracleOptions opt;
        opt.precision = L >= 5 ? 1e-4 : 1e-6;  // 4-D tensor grids stop at 40-80 nodes per axis
        for (double beta : {1.0, 2.0}) {
            const std::string params = join({param("L", (long long)L), param("beta", beta)});
            for (Index l : {Index(0), L - 1}) {
                const OracleResult o = soft_moments(g, beta, l, opt);
                c.close_abs("circulant_mass", params + ";l=" + std::to_string(l), o.mass, 0.0, p, o.error_bound,
                            std::max(o.error_bound, 1e-12), "oracle bound",
                            std::string("oracle ") + to_string(o.method) + " cyclic invariance")
                    .unit = "1";
            }
            const Vector w = softmax_weights(g, beta, 0, opt);
            c.close_abs("weights_sum", params, w.sum(), 0.0, 1.0, 0.0, 1e-9, "abs<=1e-9", "softmax weights").unit = "1";
        }
        const OracleResult h = hard_moments(g, 0);
        c.close_abs("circulant_hard_mass", param("L", (long long)L), h.mass, 0.0, p, h.error_bound,
                    std::max(h.error_bound, 1e-12), "oracle bound",
                    std::string("oracle ") + to_string(h.method) + " cyclic invariance")
            .unit = "1";
    }
}

/// Engine against oracle on random Grams, both estimators.
inline void oracle_engine(Context& c) {
    const auto grams = c.cfg.get_int("grams", 20);
    const auto M = c.cfg.get_u64("M", 10'000'000);
    const double beta = c.cfg.get_double("beta", 1.0);
    const auto tseed = c.cfg.get_u64("template_seed", c.seed);
    auto& t = c.table("", {"gram[index]", "L[count]", "estimator", "l[index]", "k[index]", "corr[sigma*norm]",
                           "stderr[sigma*norm]", "oracle[sigma*norm]", "oracle_bound[sigma*norm]"});
    for (std::int64_t i = 0; i < grams; ++i) {
        const Index L = 2 + static_cast<Index>(i % 2);
        const GramModel g = gram(random_templates(L, L + 2, 0.8, stream_seed(tseed, 2000 + i)));
        for (const bool hard : {true, false}) {
            const auto est = run_assignment(g, c.engine(M, hard ? kHardBeta : beta,
                                                        stream_seed(c.seed, 2000 + static_cast<std::uint64_t>(i))));
            const std::string params = join({"gram=" + std::to_string(i), param("L", (long long)L),
                                             hard ? "hard" : "soft;beta=" + fmt(beta)});
            c.absorb(est, params);
            double worst = -1.0;
            Index wl = 0;
            Index wk = 0;
            double wref = 0.0;
            double wbound = 0.0;
            for (Index l = 0; l < L; ++l) {
                const OracleResult o = hard ? hard_moments(g, l) : soft_moments(g, beta, l);
                const Vector r = o.ratio();
                const double b = o.ratio_error_bound();
                for (Index k = 0; k < L; ++k) {
                    const double z = std::abs(est.corr(l, k) - r[k]) / (est.std_error(l, k) + b);
                    if (z > worst) {
                        worst = z;
                        wl = l;
                        wk = k;
                        wref = r[k];
                        wbound = b;
                    }
                    t.add({std::to_string(i), std::to_string(L), hard ? "hard" : "soft", std::to_string(l),
                           std::to_string(k), fmt(est.corr(l, k)), fmt(est.std_error(l, k)), fmt(r[k]), fmt(b)});
                }
            }
            c.close("oracle_agreement", params + ";l=" + std::to_string(wl) + ";k=" + std::to_string(wk),
                    est.corr(wl, wk), est.std_error(wl, wk), wref, wbound, "oracle (worst entry of the Gram)");
        }
    }
}

/// Closed forms against independently known values.
inline void theory_checks(Context& c) {
    // 30-digit evaluations
    const std::vector<std::pair<long long, std::pair<double, double>>> gumbel{
        {1000, {3.7169221888498384, 3.1164698852913140}}, {4096, {4.0786679606752359, 3.5087002627646291}}};
    for (const auto& [n, ab] : gumbel) {
        const GumbelConstants g = gumbel_constants(n);
        c.close_abs("gumbel_a", param("n", n), g.a, 0.0, ab.first, 0.0, 1e-12, "abs<=1e-12", "GumbelScale").unit = "1";
        c.close_abs("gumbel_b", param("n", n), g.b, 0.0, ab.second, 0.0, 1e-12, "abs<=1e-12", "GumbelScale").unit = "1";
    }
    for (double rho : {-1.0, -0.5, 0.0, 0.5, 0.9, 0.99}) {
        c.close_abs("pair_equals_max_of_two", param("rho", rho), hard_pair_prediction(rho).predicted_corr(0, 0), 0.0,
                    max_two_gaussians_mean(rho), 0.0, 0.0, "exact", "HardPair");
    }
    const std::vector<std::pair<double, double>> gaps{{10.0, 0.08}, {30.0, 0.03}, {100.0, 0.01}};
    for (const auto& [norm, limit] : gaps) {
        const double soft = soft_pair_prediction(0.0, norm).alpha(0, 0);
        const double hard = hard_pair_prediction(0.0, norm).alpha(0, 0);
        c.at_most("soft_hard_coefficient_gap", param("norm", norm), std::abs(soft / hard - 1.0), limit,
                  "SoftPairApprox vs HardPair")
            .unit = "1";
    }
    const TheoryPrediction eq = soft_finite_prediction(GramModel::identity(256, 1.0));
    c.close_abs("finite_L_orthonormal_256", "L=256", eq.predicted_corr(0, 0), 0.0, 0.98938, 5e-6, 5e-6, "abs<=5e-6",
                "SoftFiniteLApprox")
        .unit = "norm^2";
    for (Index L : {2, 4, 7}) {
        const TheoryPrediction z = beta_zero_limit(GramModel::identity(L, 1.0));
        c.close_abs("beta_zero_row_sum", param("L", (long long)L), z.alpha.rowwise().sum().cwiseAbs().maxCoeff(), 0.0,
                    0.0, 0.0, 1e-15, "abs<=1e-15", "BetaZeroLimit")
            .unit = "1";
    }
}

/// Image templates: estimates of pure noise resemble their own template most.
inline void bias_demo(Context& c) {
    const auto M = c.cfg.get_u64("M", 200'000);
    const double beta = c.cfg.get_double("beta", kHardBeta);
    LoadOptions opts;
    opts.subtract_mean = c.cfg.get_bool("subtract_mean", true);
    fs::path dir;
    if (c.cfg.has("template_dir")) {
        dir = c.cfg.get_string("template_dir");
    } else {
        const auto count = c.cfg.get_int("count", 12);
        const auto width = c.cfg.get_int("width", 32);
        const auto height = c.cfg.get_int("height", 32);
        dir = c.out_dir / (c.id + "_templates");
        fs::create_directories(dir);
        const auto images = synthetic_images(count, width, height, c.cfg.get_u64("template_seed", c.seed));
        for (std::size_t i = 0; i < images.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "template_%02zu.pgm", i);
            write_pgm(images[i], dir / name);
        }
    }
    const ImageTemplates img = load_pgm_templates(dir, opts);
    const TemplateSet& set = img.set;
    const auto est = run_assignment(set, c.engine(M, beta, Mode::full));
    c.absorb(est, "bias_demo");
    const fs::path est_dir = c.out_dir / (c.id + "_estimates");
    fs::create_directories(est_dir);
    auto& t = c.table("", {"template", "mass[1]", "pearson_own[1]", "pearson_best_other[1]", "best_other",
                           "estimate_pgm"});
    const Index L = set.count();
    for (Index l = 0; l < L; ++l) {
        if (!est.defined[static_cast<std::size_t>(l)]) {
            c.greater("pearson_own_exceeds_others", set.label(l), std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0,
                      0.0, "diff>0", "consistency on images");
            continue;
        }
        const Vector xh = est.estimates.col(l);
        const double own = pearson(xh, set.column(l));
        double best = -2.0;
        Index bk = 0;
        for (Index k = 0; k < L; ++k) {
            if (k == l) continue;
            const double p = pearson(xh, set.column(k));
            if (p > best) {
                best = p;
                bk = k;
            }
        }
        const fs::path pgm = est_dir / (set.label(l) + ".pgm");
        render_pgm(xh, img.width, img.height, pgm);
        c.report.artifacts.push_back(pgm.string());
        c.greater("pearson_own_exceeds_others", set.label(l) + ";vs=" + set.label(bk), own, 0.0, best, 0.0, "diff>0",
                  "consistency on images")
            .unit = "1";
        t.add({set.label(l), fmt(est.mass[l]), fmt(own), fmt(best), set.label(bk), pgm.filename().string()});
    }
}

/// Generic run: one estimator on one template set; writes corr, stderr, mass and (full mode)
/// the estimate vectors, and compares with the oracle when it applies.
inline void estimate(Context& c) {
    const TemplateSet set = templates_from_config(c.cfg, c.seed);
    const auto M = c.cfg.get_u64("M", 1'000'000);
    const double beta = c.cfg.get_double("beta", kHardBeta);
    const Mode mode = parse_mode(c.cfg.get_string("mode", "gram"));
    const bool with_oracle = c.cfg.get_bool("oracle", set.count() <= 6);
    const Index width = c.cfg.get_int("image_width", 0);
    const Index height = c.cfg.get_int("image_height", 0);
    const auto est = run_assignment(set, c.engine(M, beta, mode));
    c.absorb(est, "estimate");
    const Index L = set.count();
    std::vector<std::string> cols{"template", "mass[1]"};
    for (Index k = 0; k < L; ++k) cols.push_back("corr_" + set.label(k) + "[sigma*norm]");
    for (Index k = 0; k < L; ++k) cols.push_back("stderr_" + set.label(k) + "[sigma*norm]");
    auto& t = c.table("corr", cols);
    for (Index l = 0; l < L; ++l) {
        std::vector<std::string> row{set.label(l), fmt(est.mass[l])};
        for (Index k = 0; k < L; ++k) row.push_back(fmt(est.corr(l, k)));
        for (Index k = 0; k < L; ++k) row.push_back(fmt(est.std_error(l, k)));
        t.add(std::move(row));
    }
    const GramModel g = gram(set);
    if (with_oracle) {
        for (Index l = 0; l < L; ++l) {
            if (!est.defined[static_cast<std::size_t>(l)]) continue;
            const OracleResult o = est.hard() ? hard_moments(g, l) : soft_moments(g, beta, l);
            const Vector r = o.ratio();
            for (Index k = 0; k < L; ++k)
                c.close("oracle", "l=" + set.label(l) + ";k=" + set.label(k), est.corr(l, k), est.std_error(l, k), r[k],
                        o.ratio_error_bound(), std::string("oracle ") + to_string(o.method));
        }
    }
    if (L == 2 && est.hard() && g.rho(0, 1) < 1.0) {
        c.close("closed_form", "l=0", est.corr(0, 0), est.std_error(0, 0),
                hard_pair_prediction(g.rho(0, 1), set.common_norm()).predicted_corr(0, 0), 0.0, "HardPair");
    }
    if (mode == Mode::full) {
        const fs::path path = c.out_dir / (c.id + "_estimates.csv");
        std::ofstream out(path);
        for (Index l = 0; l < L; ++l) out << (l ? "," : "") << "xhat_" << set.label(l) << "[sigma]";
        out << '\n';
        for (Index i = 0; i < est.estimates.rows(); ++i) {
            for (Index l = 0; l < L; ++l) out << (l ? "," : "") << fmt(est.estimates(i, l));
            out << '\n';
        }
        if (!out) throw Error("failed writing " + path.string());
        c.report.artifacts.push_back(path.string());
        if (width > 0 && height > 0) {
            const fs::path dir = c.out_dir / (c.id + "_estimates");
            fs::create_directories(dir);
            for (Index l = 0; l < L; ++l) {
                if (!est.defined[static_cast<std::size_t>(l)]) continue;
                const fs::path pgm = dir / (set.label(l) + ".pgm");
                render_pgm(est.estimates.col(l), width, height, pgm);
                c.report.artifacts.push_back(pgm.string());
            }
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Registry and suites
// ---------------------------------------------------------------------------------------------

struct ExperimentInfo {
    std::function<void(Context&)> run;
    std::vector<std::string> keys;  ///< accepted keys besides the common ones
    std::string summary;
};

inline const std::map<std::string, ExperimentInfo>& experiments() {
    static const std::map<std::string, ExperimentInfo> table{
        {"pair_hard", {pair_hard, {"rho", "norm", "M", "mode", "d", "oracle"}, "hard assignment, two templates"}},
        {"pair_soft", {pair_soft, {"rho", "norm", "beta", "M", "approximation_gap"}, "soft assignment, two templates"}},
        {"soft_finite",
         {soft_finite, {"L", "norm", "beta", "M", "theory_rel_tolerance"}, "finite-L soft approximation vs oracle"}},
        {"beta_bridge",
         {beta_bridge, {"L", "beta", "M", "coincidence_floor", "max_abs_rho", "template_seed"},
          "soft -> hard as beta grows"}},
        {"beta_zero", {beta_zero, {"L", "norm", "beta", "M", "stderr_factor"}, "linear response as beta -> 0"}},
        {"positive_correlation",
         {positive_correlation, {"sets", "L_min", "L_max", "max_abs_rho", "beta", "M", "template_seed"},
          "positive correlation and consistency on random sets"}},
        {"mass_sanity", {mass_sanity, {"rho_seq", "norm", "M"}, "uniform hard masses for circulant Grams"}},
        {"inverse_dependency",
         {inverse_dependency, {"L", "rho_low", "rho_high", "beta", "norm", "M", "rho_seq_low", "rho_seq_high"},
          "less template correlation, more bias"}},
        {"span",
         {span, {"rho_seq", "d", "norm", "beta", "M_small", "M_large", "residual_limit", "ratio_tolerance"},
          "estimates converge into the template span"}},
        {"gumbel_sweep",
         {gumbel_sweep, {"L", "M", "norm", "d", "ratio_tolerance", "ratio_at_L"}, "sqrt(2 log L) growth of the bias"}},
        {"soft_asymptotic",
         {soft_asymptotic, {"L", "beta", "norm", "M", "range_low", "range_high"}, "soft assignment with many templates"}},
        {"oracle_checks",
         {oracle_checks, {"grams", "beta_max", "ibp_limit", "exact_vs_quadrature_limit", "template_seed", "pair_rho"},
          "oracle self-consistency"}},
        {"oracle_engine", {oracle_engine, {"grams", "M", "beta", "template_seed"}, "engine vs oracle on random Grams"}},
        {"theory_checks", {theory_checks, {}, "closed forms vs known values"}},
        {"bias_demo",
         {bias_demo, {"M", "beta", "subtract_mean", "template_dir", "count", "width", "height", "template_seed"},
          "image templates from pure noise"}},
        {"estimate",
         {estimate, {"template", "rho", "rho_seq", "d", "L", "norm", "alpha", "haar_method", "template_seed",
                     "max_abs_rho", "template_path", "header", "normalize", "subtract_mean", "M", "beta", "mode",
                     "oracle", "image_width", "image_height"},
          "one estimator run on a configured template set"}},
    };
    return table;
}

inline const std::vector<std::string>& common_keys() {
    static const std::vector<std::string> keys{"experiment", "seed", "chunks", "sigma_factor", "out_dir"};
    return keys;
}

/// Rejects keys the experiment does not know (typos would otherwise be silently ignored).
inline void validate_keys(const KeyValueConfig& cfg, const ExperimentInfo& info) {
    for (const auto& [key, value] : cfg.entries()) {
        if (key.rfind("tolerance.", 0) == 0) continue;
        const bool known = std::find(common_keys().begin(), common_keys().end(), key) != common_keys().end() ||
                           std::find(info.keys.begin(), info.keys.end(), key) != info.keys.end();
        if (!known) throw ConfigError("unknown key '" + key + "'");
    }
}

inline const ExperimentInfo& find_experiment(const std::string& name) {
    const auto& table = experiments();
    const auto it = table.find(name);
    if (it == table.end()) throw UnknownExperimentError("unknown experiment '" + name + "'");
    return it->second;
}

/// Runs one experiment into `report` under the row label `id`.
inline void run_into(RunReport& report, const KeyValueConfig& cfg, const std::string& id, const RunOptions& opts) {
    const ExperimentInfo& info = find_experiment(cfg.get_string("experiment"));
    validate_keys(cfg, info);
    Context ctx(cfg, report, id, opts);
    info.run(ctx);
}

inline RunReport run_config(const KeyValueConfig& cfg, const RunOptions& opts) {
    const auto start = std::chrono::steady_clock::now();
    RunReport report;
    const std::string name = cfg.get_string("experiment");
    find_experiment(name);
    report.config = cfg.entries();
    if (opts.seed_override) {
        bool replaced = false;
        for (auto& [k, v] : report.config)
            if (k == "seed") {
                v = std::to_string(*opts.seed_override);
                replaced = true;
            }
        if (!replaced) report.config.emplace_back("seed", std::to_string(*opts.seed_override));
    }
    run_into(report, cfg, name, opts);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

struct SuiteItem {
    std::string id;
    std::vector<std::pair<std::string, std::string>> config;
};

/// fast: every property at M <= 1e6 and L <= 64. full: M = 1e7 where it matters, the L = 4096
/// Gumbel sweep, L = 256 soft, 50 random sets and 20 random Grams.
inline std::vector<SuiteItem> suite(const std::string& name) {
    if (name == "fast") {
        return {
            {"pair_hard", {{"experiment", "pair_hard"}, {"M", "1000000"}}},
            {"pair_soft", {{"experiment", "pair_soft"}, {"M", "1000000"}}},
            {"soft_finite", {{"experiment", "soft_finite"}, {"M", "1000000"}}},
            {"beta_bridge", {{"experiment", "beta_bridge"}, {"M", "1000000"}}},
            {"beta_zero", {{"experiment", "beta_zero"}, {"M", "1000000"}}},
            {"positive_correlation", {{"experiment", "positive_correlation"}, {"sets", "50"}, {"M", "1000000"}}},
            {"mass_sanity", {{"experiment", "mass_sanity"}, {"M", "1000000"}}},
            {"inverse_dependency", {{"experiment", "inverse_dependency"}, {"M", "1000000"}}},
            {"span", {{"experiment", "span"}, {"M_small", "10000"}, {"M_large", "1000000"}}},
            {"gumbel_sweep", {{"experiment", "gumbel_sweep"}, {"L", "16,32,64"}, {"M", "1000000"}}},
            {"soft_asymptotic", {{"experiment", "soft_asymptotic"}, {"L", "64"}, {"M", "1000000"},
                                 {"range_low", "0.85"}, {"range_high", "1.01"}}},
            {"oracle_checks", {{"experiment", "oracle_checks"}}},
            {"oracle_engine", {{"experiment", "oracle_engine"}, {"grams", "6"}, {"M", "1000000"}}},
            {"theory_checks", {{"experiment", "theory_checks"}}},
            {"bias_demo", {{"experiment", "bias_demo"}, {"count", "12"}, {"width", "24"}, {"height", "24"},
                           {"M", "100000"}}},
        };
    }
    if (name == "full") {
        return {
            {"pair_hard", {{"experiment", "pair_hard"}, {"M", "10000000"}}},
            {"pair_soft", {{"experiment", "pair_soft"}, {"M", "10000000"}}},
            {"soft_finite", {{"experiment", "soft_finite"}, {"M", "10000000"}}},
            {"beta_bridge", {{"experiment", "beta_bridge"}, {"M", "10000000"}}},
            {"beta_zero", {{"experiment", "beta_zero"}, {"M", "10000000"}}},
            {"positive_correlation", {{"experiment", "positive_correlation"}, {"sets", "50"}, {"M", "1000000"}}},
            {"mass_sanity", {{"experiment", "mass_sanity"}, {"M", "10000000"}}},
            {"inverse_dependency", {{"experiment", "inverse_dependency"}, {"M", "10000000"}}},
            {"span", {{"experiment", "span"}, {"M_small", "10000"}, {"M_large", "1000000"}}},
            {"gumbel_sweep", {{"experiment", "gumbel_sweep"}, {"L", "16,64,256,1024,4096"}, {"M", "1000000"}}},
            {"soft_asymptotic", {{"experiment", "soft_asymptotic"}, {"L", "256"}, {"M", "10000000"}}},
            {"oracle_checks", {{"experiment", "oracle_checks"}}},
            {"oracle_engine", {{"experiment", "oracle_engine"}, {"grams", "20"}, {"M", "10000000"}}},
            {"theory_checks", {{"experiment", "theory_checks"}}},
            {"bias_demo", {{"experiment", "bias_demo"}, {"count", "12"}, {"width", "48"}, {"height", "48"},
                           {"M", "1000000"}}},
        };
    }
    throw ConfigError("unknown suite '" + name + "' (expected fast or full)");
}

inline RunReport run_suite(const std::string& name, std::uint64_t seed, const RunOptions& opts) {
    const auto start = std::chrono::steady_clock::now();
    RunReport report;
    report.config = {{"suite", name}, {"seed", std::to_string(seed)}};
    RunOptions o = opts;
    o.seed_override = seed;
    for (const auto& item : suite(name)) {
        KeyValueConfig cfg;
        for (const auto& [k, v] : item.config) {
            cfg.set(k, v);
            report.config.emplace_back(item.id + "." + k, v);
        }
        run_into(report, cfg, item.id, o);
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace biaslab::lab
