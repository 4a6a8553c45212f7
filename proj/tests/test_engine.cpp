#include "biaslab/engine.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

using namespace biaslab;

namespace {

ExperimentConfig config(std::uint64_t M, double beta = kHardBeta, std::uint64_t seed = 11) {
    ExperimentConfig c;
    c.M = M;
    c.beta = beta;
    c.seed = seed;
    c.chunks = 32;
    return c;
}

// E[D sigmoid(D)] for D ~ N(0, 2), composite Simpson on [-40, 40].
double soft_pair_orthogonal_reference() {
    const int n = 20000;
    const double a = -40.0;
    const double h = 80.0 / n;
    double s = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = a + i * h;
        const double f = x / (1.0 + std::exp(-x)) * std::exp(-x * x / 4.0) / std::sqrt(4.0 * std::numbers::pi);
        s += f * (i == 0 || i == n ? 1.0 : (i % 2 ? 4.0 : 2.0));
    }
    return s * h / 3.0;
}

TemplateSet three_templates() {
    const std::vector<double> seq{1.0, 0.3, 0.3};
    return make_circulant(seq, 6, 1.0);
}

}  // namespace

TEST(HardAssign, OrthogonalPairMatchesMaxOfTwo) {
    const auto est = hard_assign(make_pair(0.0, 2), config(1'000'000));
    const double expected = 1.0 / std::sqrt(std::numbers::pi);
    EXPECT_NEAR(est.corr(0, 0), expected, 0.004);
    // Var(max of two iid normals) = 1 - 1/pi, half the samples per cluster
    const double se = std::sqrt((1.0 - 1.0 / std::numbers::pi) / 500'000.0);
    EXPECT_NEAR(est.std_error(0, 0), se, 0.05 * se);
    EXPECT_NEAR(est.mass.sum(), 1.0, 1e-9);
    EXPECT_TRUE(est.all_defined());
    EXPECT_TRUE(est.warnings.empty());
}

TEST(HardAssign, HighCorrelationPair) {
    const auto est = hard_assign(make_pair(0.99, 2), config(5'000'000));
    EXPECT_NEAR(est.corr(0, 0), std::sqrt(0.01 / std::numbers::pi), 0.002);
}

TEST(HardAssign, TotalAverageIsZero) {
    const TemplateSet set = three_templates();
    const std::uint64_t M = 1'000'000;
    for (const double beta : {kHardBeta, 1.0}) {
        const auto est = run_assignment(set, config(M, beta));
        for (Index k = 0; k < 3; ++k) {
            double total = 0.0;
            for (Index l = 0; l < 3; ++l) total += est.mass[l] * est.corr(l, k);
            // the total is the plain mean of <n_i, x_k> ~ N(0, 1)
            EXPECT_NEAR(total, 0.0, 3.0 / std::sqrt(double(M))) << "beta " << beta << " k " << k;
        }
    }
}

TEST(HardAssign, AntisymmetricPair) {
    const auto est = hard_assign(make_pair(0.5, 2), config(1'000'000));
    for (Index k = 0; k < 2; ++k)
        EXPECT_NEAR(est.corr(1, k), -est.corr(0, k), 3.0 * (est.std_error(0, k) + est.std_error(1, k)));
}

TEST(HardAssign, PooledIsMassWeightedDiagonal) {
    const auto est = hard_assign(three_templates(), config(200'000));
    double pooled = 0.0;
    for (Index l = 0; l < 3; ++l) pooled += est.mass[l] * est.corr(l, l);
    EXPECT_NEAR(est.pooled, pooled, 1e-12);
    EXPECT_GT(est.pooled_std_error, 0.0);
}

TEST(HardAssign, CirculantMassIsUniform) {
    const std::vector<double> seq{1.0, 0.3, 0.1, 0.3};
    const std::uint64_t M = 1'000'000;
    const auto est = hard_assign(make_circulant(seq, 4), config(M));
    const double p = 0.25;
    for (Index l = 0; l < 4; ++l) EXPECT_NEAR(est.mass[l], p, 4.0 * std::sqrt(p * (1 - p) / double(M)));
}

TEST(HardAssign, EmptyClustersAreFlagged) {
    ExperimentConfig c = config(1);
    c.chunks = 1;
    const auto est = hard_assign(make_orthonormal(3, 3), c);
    int undefined = 0;
    for (Index l = 0; l < 3; ++l) {
        if (!est.defined[static_cast<std::size_t>(l)]) {
            ++undefined;
            EXPECT_TRUE(std::isnan(est.corr(l, 0)));
            EXPECT_EQ(est.mass[l], 0.0);
        }
    }
    EXPECT_EQ(undefined, 2);
    EXPECT_FALSE(est.all_defined());
    EXPECT_FALSE(est.warnings.empty());
}

TEST(HardAssign, ConsistencyOnCorrelatedSet) {
    const auto est = hard_assign(three_templates(), config(1'000'000));
    for (Index l = 0; l < 3; ++l) {
        EXPECT_GT(est.corr(l, l), 3.0 * est.std_error(l, l));
        for (Index k = 0; k < 3; ++k)
            if (k != l) EXPECT_GT(est.corr(l, l), est.corr(l, k) + 3.0 * (est.std_error(l, l) + est.std_error(l, k)));
    }
}

TEST(SoftAssign, OrthogonalPairBetaOne) {
    const auto est = soft_assign(make_pair(0.0, 2), config(1'000'000, 1.0));
    const double approx = 0.5 / std::sqrt(1.0 + std::numbers::pi / 4.0);
    EXPECT_NEAR(est.corr(0, 0), approx, 0.015);
    EXPECT_NEAR(est.corr(0, 0), soft_pair_orthogonal_reference(), 3.0 * est.std_error(0, 0));
    EXPECT_NEAR(est.mass.sum(), 1.0, 1e-9);
}

TEST(SoftAssign, LargeBetaMatchesHard) {
    const TemplateSet set = three_templates();
    const auto hard = hard_assign(set, config(1'000'000));
    const auto soft = soft_assign(set, config(1'000'000, 100.0));
    for (Index l = 0; l < 3; ++l)
        for (Index k = 0; k < 3; ++k) {
            const double se = std::hypot(hard.std_error(l, k), soft.std_error(l, k));
            EXPECT_NEAR(soft.corr(l, k), hard.corr(l, k), std::max(0.01, 5.0 * se));
        }
}

TEST(SoftAssign, BridgeToHardShrinks) {
    const TemplateSet set = three_templates();
    const auto hard = hard_assign(set, config(500'000));
    double previous = std::numeric_limits<double>::infinity();
    for (const double beta : {1.0, 5.0, 20.0, 100.0}) {
        const auto soft = soft_assign(set, config(500'000, beta));
        const double gap = (soft.corr - hard.corr).cwiseAbs().maxCoeff();
        EXPECT_LT(gap, previous) << "beta " << beta;
        previous = gap;
    }
}

TEST(SoftAssign, SmallBetaLinearResponse) {
    const double beta = 1e-3;
    const auto est = soft_assign(make_orthonormal(3, 3), config(10'000'000, beta));
    const double expected[3] = {2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0};
    for (Index k = 0; k < 3; ++k)
        EXPECT_NEAR(est.corr(0, k) / beta, expected[k], 5.0 * est.std_error(0, k) / beta);
}

TEST(SoftAssign, HugeBetaStaysFinite) {
    const auto est = soft_assign(make_pair(0.2, 2, 10.0), config(50'000, 1000.0));
    EXPECT_TRUE(est.corr.allFinite());
    EXPECT_TRUE(est.mass.allFinite());
    EXPECT_NEAR(est.mass.sum(), 1.0, 1e-9);
}

TEST(SoftAssign, RejectsBadBeta) {
    EXPECT_THROW(soft_assign(make_pair(0.0, 2), config(10, 0.0)), DomainError);
    EXPECT_THROW(soft_assign(make_pair(0.0, 2), config(10, -1.0)), DomainError);
    EXPECT_THROW(soft_assign(make_pair(0.0, 2), config(10, kHardBeta)), DomainError);
}

TEST(ExperimentConfig, Validation) {
    ExperimentConfig c = config(10);
    c.chunks = 11;
    EXPECT_THROW(c.validate(), ConfigError);
    c.chunks = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = config(0);
    EXPECT_THROW(c.validate(), ConfigError);
    c = config(10, std::numeric_limits<double>::quiet_NaN());
    c.chunks = 1;
    EXPECT_THROW(c.validate(), DomainError);
    ExperimentConfig full = config(10);
    full.mode = Mode::full;
    EXPECT_THROW(hard_assign(gram(make_pair(0.0, 2)), full), ConfigError);
}

TEST(Determinism, ThreadCountDoesNotChangeResults) {
    const TemplateSet set = three_templates();
    for (const double beta : {kHardBeta, 2.0}) {
        ExperimentConfig a = config(300'000, beta, 99);
        a.chunks = 16;
        a.threads = 1;
        ExperimentConfig b = a;
        b.threads = 3;
        const auto ra = run_assignment(set, a);
        const auto rb = run_assignment(set, b);
        EXPECT_EQ(ra.corr, rb.corr);
        EXPECT_EQ(ra.std_error, rb.std_error);
        EXPECT_EQ(ra.mass, rb.mass);
        EXPECT_EQ(ra.pooled, rb.pooled);
        const auto rc = run_assignment(set, a);
        EXPECT_EQ(ra.corr, rc.corr);
    }
}

TEST(Determinism, FullModeThreadIndependent) {
    ExperimentConfig a = config(20'000, kHardBeta, 5);
    a.mode = Mode::full;
    a.chunks = 8;
    a.threads = 1;
    ExperimentConfig b = a;
    b.threads = 4;
    const TemplateSet set = make_pair(0.3, 16);
    EXPECT_EQ(hard_assign(set, a).estimates, hard_assign(set, b).estimates);
}

TEST(Determinism, SeedsDiffer) {
    const auto a = hard_assign(make_pair(0.0, 2), config(10'000, kHardBeta, 1));
    const auto b = hard_assign(make_pair(0.0, 2), config(10'000, kHardBeta, 2));
    EXPECT_NE(a.corr(0, 0), b.corr(0, 0));
}

TEST(FullMode, CorrelationMatrixAgrees) {
    ExperimentConfig c = config(1'000'000);
    c.mode = Mode::full;
    const TemplateSet set = make_pair(0.0, 64);
    const auto est = hard_assign(set, c);
    const Matrix cm = correlation_matrix(est, set);
    for (Index l = 0; l < 2; ++l)
        for (Index k = 0; k < 2; ++k) EXPECT_NEAR(cm(l, k), est.corr(l, k), 1e-9 * std::abs(est.corr(l, k)) + 1e-15);
    EXPECT_NEAR(cm(0, 0), 1.0 / std::sqrt(std::numbers::pi), 0.004);
    EXPECT_NEAR(cm(0, 0), -cm(0, 1), 3.0 * (est.std_error(0, 0) + est.std_error(0, 1)));
}

TEST(FullMode, SoftRowsMaximalOnOwnTemplate) {
    ExperimentConfig c = config(200'000, 1.0);
    c.mode = Mode::full;
    const TemplateSet set = three_templates();
    const auto est = soft_assign(set, c);
    const Matrix cm = correlation_matrix(est, set);
    EXPECT_TRUE(cm.allFinite());
    for (Index l = 0; l < 3; ++l) {
        Index arg = 0;
        cm.row(l).maxCoeff(&arg);
        EXPECT_EQ(arg, l);
    }
}

TEST(FullMode, MatchesGramModeInDistribution) {
    const TemplateSet set = make_pair(0.3, 16);
    double full_mean = 0.0;
    double gram_mean = 0.0;
    double var = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        ExperimentConfig c = config(50'000, kHardBeta, 100 + s);
        const auto g = hard_assign(set, c);
        c.mode = Mode::full;
        c.seed = 200 + s;
        const auto f = hard_assign(set, c);
        full_mean += f.corr(0, 0) / 10.0;
        gram_mean += g.corr(0, 0) / 10.0;
        var += (f.std_error(0, 0) * f.std_error(0, 0) + g.std_error(0, 0) * g.std_error(0, 0)) / 100.0;
    }
    EXPECT_NEAR(full_mean, gram_mean, 3.0 * std::sqrt(var));
}

TEST(Scope, OwnMatchesFullDiagonal) {
    const TemplateSet set = three_templates();
    for (const double beta : {kHardBeta, 1.0}) {
        ExperimentConfig c = config(100'000, beta);
        const auto full = run_assignment(set, c);
        c.scope = Scope::own;
        const auto own = run_assignment(set, c);
        for (Index l = 0; l < 3; ++l) {
            EXPECT_NEAR(own.corr(l, l), full.corr(l, l), 1e-12);
            EXPECT_NEAR(own.std_error(l, l), full.std_error(l, l), 1e-12);
            EXPECT_TRUE(std::isnan(own.corr(l, (l + 1) % 3)));
        }
        EXPECT_NEAR(own.pooled, full.pooled, 1e-12);
    }
}

TEST(GramModes, IdentityModelMatchesDenseOrthonormal) {
    ExperimentConfig c = config(100'000);
    const auto dense = hard_assign(gram(make_orthonormal(4, 4)), c);
    const auto ident = hard_assign(GramModel::identity(4, 1.0), c);
    EXPECT_TRUE(ident.corr.isApprox(dense.corr, 1e-12));
    EXPECT_EQ(ident.mass, dense.mass);
}

TEST(SpanResidual, VectorsInSpanHaveZeroResidual) {
    const TemplateSet set = three_templates();
    const Vector r = span_residual(set.data(), set);
    for (Index l = 0; l < 3; ++l) EXPECT_NEAR(r[l], 0.0, 1e-12);
}

TEST(SpanResidual, ShrinksLikeInverseRootM) {
    const std::vector<double> seq{1.0, 0.2, 0.2};
    const TemplateSet set = make_circulant(seq, 100);
    ExperimentConfig c = config(10'000);
    c.mode = Mode::full;
    const double r1 = span_residual(hard_assign(set, c), set).mean();
    c.M = 100'000;
    const double r2 = span_residual(hard_assign(set, c), set).mean();
    EXPECT_NEAR(r1 / r2, std::sqrt(10.0), 0.3 * std::sqrt(10.0));
}

TEST(SpanResidual, SmallAtLargeM) {
    const std::vector<double> seq{1.0, 0.2, 0.2};
    const TemplateSet set = make_circulant(seq, 50);
    ExperimentConfig c = config(1'000'000);
    c.mode = Mode::full;
    const Vector r = span_residual(hard_assign(set, c), set);
    EXPECT_LT(r.maxCoeff(), 0.1);
}

TEST(SpanResidual, Errors) {
    Matrix x = Matrix::Zero(5, 3);
    x(0, 0) = 1.0;
    x(1, 1) = 1.0;
    x(0, 2) = x(1, 2) = std::sqrt(0.5);
    const TemplateSet dependent(x);
    EXPECT_THROW(span_residual(dependent.data(), dependent), RankError);
    const TemplateSet square = make_orthonormal(3, 3);
    EXPECT_THROW(span_residual(square.data(), square), DimensionError);
    const auto gram_est = hard_assign(square, config(100));
    EXPECT_THROW(span_residual(gram_est, square), ConfigError);
}

TEST(ExtractCoefficients, HardPairOrthogonal) {
    const TemplateSet set = make_pair(0.0, 2);
    const auto est = hard_assign(set, config(1'000'000));
    const Matrix a = extract_coefficients(est, set);
    const double c = 1.0 / std::sqrt(std::numbers::pi);
    EXPECT_NEAR(a(0, 0), c, 0.006);
    EXPECT_NEAR(a(0, 1), -c, 0.006);
}

TEST(ExtractCoefficients, HardPairCorrelated) {
    const TemplateSet set = make_pair(0.5, 2);
    const auto est = hard_assign(set, config(1'000'000));
    const Matrix a = extract_coefficients(est, set);
    const double c = 1.0 / std::sqrt(std::numbers::pi * 0.5);
    EXPECT_NEAR(a(0, 0), c, 0.01);
    EXPECT_NEAR(a(0, 1), -c, 0.01);
}

TEST(ExtractCoefficients, TemplatesThemselvesGiveIdentity) {
    const TemplateSet set = three_templates();
    const Matrix corr = set.data().transpose() * set.data();
    const Matrix a = extract_coefficients(corr, gram(set));
    EXPECT_TRUE(a.isApprox(Matrix::Identity(3, 3), 1e-9));
    EXPECT_LT((a * gram(set).covariance() - corr).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(ExtractCoefficients, SingularGram) {
    const TemplateSet set = make_pair(-1.0, 2);
    EXPECT_THROW(extract_coefficients(Matrix::Identity(2, 2), gram(set)), FactorizationError);
}
