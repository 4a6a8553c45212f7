#include "biaslab/template_io.hpp"
#include "biaslab/templates.hpp"

#include <gtest/gtest.h>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

using namespace biaslab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("biaslab_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void expect_unit_diagonal(const GramModel& g) {
    for (Index i = 0; i < g.size(); ++i) EXPECT_NEAR(g.rho(i, i), 1.0, 1e-12);
}

}  // namespace

TEST(MakePair, OrthogonalPair) {
    const auto set = make_pair(0.0, 4, 1.0);
    EXPECT_EQ(set.count(), 2);
    EXPECT_EQ(set.dim(), 4);
    EXPECT_EQ(gram(set).rho(0, 1), 0.0);
}

TEST(MakePair, AntipodalPair) {
    const auto set = make_pair(-1.0, 4, 1.0);
    EXPECT_TRUE(set.column(1).isApprox(-set.column(0)));
    EXPECT_EQ((set.column(1) + set.column(0)).cwiseAbs().maxCoeff(), 0.0);
    const auto g = gram(set);
    EXPECT_FALSE(g.full_rank());
    EXPECT_NEAR(g.rho(0, 1), -1.0, 1e-15);
}

TEST(MakePair, HighCorrelationImageScale) {
    const auto set = make_pair(0.99, 150 * 150, 1.0);
    EXPECT_NEAR(gram(set).rho(0, 1), 0.99, 1e-12);
}

TEST(MakePair, Errors) {
    EXPECT_THROW(make_pair(1.5, 4), DomainError);
    EXPECT_THROW(make_pair(-1.01, 4), DomainError);
    EXPECT_THROW(make_pair(1.0, 4), DegenerateTemplatesError);
    EXPECT_THROW(make_pair(0.5, 1), DimensionError);
}

TEST(MakePair, RandomRhoRoundTrip) {
    boost::random::mt19937_64 gen(7);
    boost::random::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        const double rho = u(gen);
        const auto g = gram(make_pair(rho, 3, 2.5));
        EXPECT_NEAR(g.rho(0, 1), rho, 1e-12);
        expect_unit_diagonal(g);
    }
}

TEST(MakeCirculant, IdentitySequence) {
    const std::vector<double> seq{1, 0, 0, 0};
    const auto set = make_circulant(seq, 8, 1.0);
    const Matrix gm = set.data().transpose() * set.data();
    EXPECT_LT((gm - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MakeCirculant, PrescribedCorrelations) {
    const std::vector<double> seq{1, 0.3, 0.1, 0.3};
    const auto set = make_circulant(seq, 16, 1.0);
    const auto g = gram(set);
    EXPECT_NEAR(g.rho(0, 1), 0.3, 1e-9);
    EXPECT_NEAR(g.rho(0, 2), 0.1, 1e-9);
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) EXPECT_NEAR(g.rho(i, j), seq[static_cast<std::size_t>((j - i + 4) % 4)], 1e-9);
    expect_unit_diagonal(g);
}

TEST(MakeCirculant, StrongCorrelationStillValid) {
    // Eigenvalues of circulant [1,.9,.9,.9]: 1 + 3(.9) = 3.7 and 1 - .9 = 0.1 (three times).
    const std::vector<double> seq{1, 0.9, 0.9, 0.9};
    const auto spectrum = detail::circulant_spectrum(seq);
    EXPECT_NEAR(spectrum[0], 3.7, 1e-12);
    for (std::size_t j = 1; j < 4; ++j) EXPECT_NEAR(spectrum[j], 0.1, 1e-12);
    const auto set = make_circulant(seq, 8, 1.0);
    EXPECT_NEAR(gram(set).rho(1, 3), 0.9, 1e-9);
}

TEST(MakeCirculant, Errors) {
    const std::vector<double> bad{1, -0.6, -0.6, -0.6};  // eigenvalue 1 - 1.8 < 0
    try {
        make_circulant(bad, 8, 1.0);
        FAIL() << "expected SpectrumError";
    } catch (const SpectrumError& e) {
        EXPECT_EQ(e.index(), 0);
        EXPECT_NEAR(e.eigenvalue(), -0.8, 1e-12);
    }
    const std::vector<double> ok{1, 0.3, 0.1, 0.3};
    EXPECT_THROW(make_circulant(ok, 3, 1.0), DimensionError);
    const std::vector<double> asym{1, 0.3, 0.1, 0.2};
    EXPECT_THROW(make_circulant(asym, 8, 1.0), DomainError);
}

TEST(MakeCirculant, GramIsCirculant) {
    const std::vector<double> seq{1, 0.4, 0.2, 0.1, 0.2, 0.4};
    const auto g = gram(make_circulant(seq, 10, 3.0));
    for (Index i = 0; i < 6; ++i)
        for (Index j = 0; j < 6; ++j) EXPECT_NEAR(g.rho(i, j), g.rho(0, (j - i + 6) % 6), 1e-9);
}

TEST(MakeExponential, ConstantAtZeroRate) {
    const Vector v = make_exponential(3, 0.0, std::sqrt(3.0));
    for (Index i = 0; i < 3; ++i) EXPECT_NEAR(v[i], 1.0, 1e-15);
}

TEST(MakeExponential, RatioAndNorm) {
    const Vector v = make_exponential(40, 1.0 / 30.0, 1.0);
    EXPECT_NEAR(v.norm(), 1.0, 1e-14);
    for (Index m = 0; m + 1 < 40; ++m) EXPECT_NEAR(v[m + 1] / v[m], 0.9672161004820059, 1e-12);
}

TEST(MakeExponential, LeadingEntry) {
    // 1 / sqrt(sum_{m<300} exp(-2m/30)), summed independently.
    const Vector v = make_exponential(300, 1.0 / 30.0, 1.0);
    EXPECT_NEAR(v[0], 0.2539547501058255, 1e-12);
}

TEST(MakeHaarFamily, PreservesNorm) {
    Vector x0 = Vector::Zero(3);
    x0[0] = 1.0;
    const auto set = make_haar_family(x0, 2, 99);
    EXPECT_NEAR(set.column(0).norm(), 1.0, 1e-12);
    EXPECT_NEAR(set.column(1).norm(), 1.0, 1e-12);
    EXPECT_LE(std::abs(set.column(0).dot(set.column(1))), 1.0);
}

TEST(MakeHaarFamily, OffDiagonalMagnitude) {
    // For independent uniform unit vectors in R^d, E|<u,v>| ~ sqrt(2/(pi d)) = 0.046 at d=300.
    const Vector x0 = make_exponential(300, 1.0 / 30.0, 1.0);
    const auto set = make_haar_family(x0, 64, 2024);
    const Matrix gm = set.data().transpose() * set.data();
    double sum = 0.0;
    int pairs = 0;
    for (Index i = 0; i < 64; ++i) {
        EXPECT_NEAR(set.column(i).norm(), 1.0, 1e-12);
        for (Index j = i + 1; j < 64; ++j, ++pairs) sum += std::abs(gm(i, j));
    }
    EXPECT_NEAR(sum / pairs, std::sqrt(2.0 / (std::numbers::pi * 300.0)), 0.01);
}

TEST(MakeHaarFamily, Deterministic) {
    const Vector x0 = make_exponential(30, 0.1, 1.0);
    const auto a = make_haar_family(x0, 5, 11);
    const auto b = make_haar_family(x0, 5, 11);
    EXPECT_TRUE((a.data().array() == b.data().array()).all());
    const auto c = make_haar_family(x0, 5, 12);
    EXPECT_FALSE((a.data().array() == c.data().array()).all());
}

TEST(MakeHaarFamily, SphereMethod) {
    const Vector x0 = make_exponential(500, 1.0 / 30.0, 2.0);
    const auto set = make_haar_family(x0, 8, 3, HaarMethod::sphere);
    for (Index l = 0; l < 8; ++l) EXPECT_NEAR(set.column(l).norm(), 2.0, 1e-12);
    EXPECT_TRUE(set.column(0).isApprox(x0));
}

TEST(MakeHaarFamily, Errors) {
    EXPECT_THROW(make_haar_family(Vector::Zero(4), 3, 1), DomainError);
    EXPECT_THROW(make_haar_family(Vector::Ones(1), 3, 1), DimensionError);
}

TEST(GramModel, Shapes) {
    const auto g = gram(make_orthonormal(3, 5, 2.0));
    EXPECT_TRUE(g.rho().isApprox(Matrix::Identity(3, 3)));
    EXPECT_DOUBLE_EQ(g.scale(), 2.0);
    EXPECT_TRUE(g.covariance().isApprox(4.0 * Matrix::Identity(3, 3)));
    const auto p = gram(make_pair(0.5, 3));
    EXPECT_NEAR(p.rho(0, 1), 0.5, 1e-15);
    const Matrix f = p.factor();
    EXPECT_LT((f * f.transpose() - p.rho()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(f(0, 1), 0.0);
}

TEST(GramModel, IdentityKind) {
    const std::vector<double> seq{1, 0, 0, 0, 0};
    const auto g = GramModel::circulant(seq, 1.0);
    EXPECT_TRUE(g.is_identity());
    EXPECT_EQ(g.size(), 5);
    EXPECT_EQ(g.rho(2, 2), 1.0);
    EXPECT_EQ(g.rho(2, 3), 0.0);
}

TEST(GramModel, RejectsInvalid) {
    Matrix bad(2, 2);
    bad << 1, 0.5, 0.4, 1;
    EXPECT_THROW(GramModel::from_correlation(bad, 1.0), DomainError);
    Matrix indefinite(3, 3);
    indefinite << 1, 0.9, -0.9, 0.9, 1, 0.9, -0.9, 0.9, 1;
    EXPECT_THROW(GramModel::from_correlation(indefinite, 1.0), FactorizationError);
}

TEST(TemplateSet, Validation) {
    Matrix x(2, 2);
    x << 1, 0, 0, 2;
    EXPECT_THROW(TemplateSet{x}, DomainError);
    x << 1, 1, 0, 0;
    EXPECT_THROW(TemplateSet{x}, DegenerateTemplatesError);
    EXPECT_THROW(TemplateSet{Matrix::Identity(3, 1)}, DimensionError);
}

TEST(TemplateIo, CsvOrthonormal) {
    const fs::path dir = scratch_dir("csv_basic");
    std::ofstream(dir / "t.csv") << "1,0\n0,1\n";
    const auto set = load_templates(dir / "t.csv", TemplateFormat::csv);
    EXPECT_EQ(set.dim(), 2);
    EXPECT_EQ(set.count(), 2);
    EXPECT_TRUE(gram(set).rho().isApprox(Matrix::Identity(2, 2)));
}

TEST(TemplateIo, CsvRoundTrip) {
    const fs::path dir = scratch_dir("csv_roundtrip");
    const auto set = make_haar_family(make_exponential(40, 1.0 / 30.0, 1.7), 6, 5);
    save_templates(set, dir / "h.csv", TemplateFormat::csv);
    const auto back = load_templates(dir / "h.csv", TemplateFormat::csv);
    EXPECT_LT((back.data() - set.data()).cwiseAbs().maxCoeff(), 1e-12);

    SaveOptions so;
    so.header = true;
    save_templates(set, dir / "hh.csv", TemplateFormat::csv, so);
    LoadOptions lo;
    lo.header = true;
    lo.normalize = false;
    const auto labelled = load_templates(dir / "hh.csv", TemplateFormat::csv, lo);
    EXPECT_EQ(labelled.label(3), "x3");
    EXPECT_LT((labelled.data() - set.data()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TemplateIo, CsvErrors) {
    const fs::path dir = scratch_dir("csv_errors");
    std::ofstream(dir / "ragged.csv") << "1,0\n0,1,2\n";
    EXPECT_THROW(load_templates(dir / "ragged.csv", TemplateFormat::csv), ParseError);
    std::ofstream(dir / "nan.csv") << "1,nan\n0,1\n";
    EXPECT_THROW(load_templates(dir / "nan.csv", TemplateFormat::csv), ParseError);
    std::ofstream(dir / "word.csv") << "1,abc\n0,1\n";
    EXPECT_THROW(load_templates(dir / "word.csv", TemplateFormat::csv), ParseError);
    std::ofstream(dir / "norms.csv") << "1,0\n0,2\n";
    LoadOptions raw;
    raw.normalize = false;
    EXPECT_THROW(load_templates(dir / "norms.csv", TemplateFormat::csv, raw), ParseError);
    EXPECT_NO_THROW(load_templates(dir / "norms.csv", TemplateFormat::csv));
    EXPECT_THROW(load_templates(dir / "missing.csv", TemplateFormat::csv), ParseError);
}

TEST(TemplateIo, PgmRoundTripWithinQuantization) {
    const fs::path dir = scratch_dir("pgm_roundtrip");
    const Index w = 20, h = 15;
    Matrix x(w * h, 3);
    for (Index i = 0; i < w * h; ++i) {
        x(i, 0) = std::sin(0.1 * static_cast<double>(i));
        x(i, 1) = std::cos(0.07 * static_cast<double>(i));
        x(i, 2) = std::sin(0.013 * static_cast<double>(i * i % 97));
    }
    for (Index l = 0; l < 3; ++l) x.col(l).array() -= x.col(l).mean();
    detail::rescale_columns(x, 1.0);
    const TemplateSet set(x, {"a", "b", "c"});
    SaveOptions so;
    so.width = w;
    so.height = h;
    save_templates(set, dir, TemplateFormat::pgm, so);
    const auto loaded = load_pgm_templates(dir);
    EXPECT_EQ(loaded.width, w);
    EXPECT_EQ(loaded.height, h);
    EXPECT_EQ(loaded.set.labels(), (std::vector<std::string>{"a", "b", "c"}));
    // One grey level is 1/255 of the range; after renormalization the error per entry stays
    // within a few quantization steps.
    for (Index l = 0; l < 3; ++l) {
        const double step = (x.col(l).maxCoeff() - x.col(l).minCoeff()) / 255.0;
        EXPECT_LT((loaded.set.column(l) - x.col(l)).cwiseAbs().maxCoeff(), 2.0 * step);
    }
}

TEST(TemplateIo, PgmImageShapeAndMean) {
    const fs::path dir = scratch_dir("pgm_shape");
    PgmImage a{100, 100, std::vector<std::uint8_t>(10000)};
    PgmImage b = a;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        a.pixels[i] = static_cast<std::uint8_t>(i % 256);
        b.pixels[i] = static_cast<std::uint8_t>((i / 100) * 2);
    }
    write_pgm(a, dir / "a.pgm");
    write_pgm(b, dir / "b.pgm");
    const auto loaded = load_pgm_templates(dir);
    EXPECT_EQ(loaded.set.dim(), 10000);
    EXPECT_NEAR(loaded.set.column(0).sum(), 0.0, 1e-9);
    EXPECT_NEAR(loaded.set.column(1).norm(), 1.0, 1e-12);
}

TEST(TemplateIo, PgmErrors) {
    const fs::path dir = scratch_dir("pgm_errors");
    write_pgm(PgmImage{4, 4, std::vector<std::uint8_t>(16, 3)}, dir / "a.pgm");
    write_pgm(PgmImage{5, 4, std::vector<std::uint8_t>(20, 9)}, dir / "b.pgm");
    EXPECT_THROW(load_pgm_templates(dir), ParseError);
    std::ofstream(dir / "c.txt") << "P2\n";
    EXPECT_THROW(read_pgm(dir / "c.txt"), ParseError);
    std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n4 4\n255\nabc";
    EXPECT_THROW(read_pgm(dir / "short.pgm"), ParseError);
}

TEST(RenderPgm, ConstantVectorIsMidGrey) {
    const auto img = to_pgm(Vector::Constant(12, 3.5), 4, 3);
    for (auto p : img.pixels) EXPECT_EQ(p, 128);
}

TEST(RenderPgm, NegationComplementsSymmetricRange) {
    Vector v(6);
    v << -2, -1.3, 0.2, 0.7, 1.1, 2;
    const auto a = to_pgm(v, 3, 2);
    const auto b = to_pgm(-v, 3, 2);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(static_cast<int>(a.pixels[i]) + b.pixels[i], 255);
}

TEST(RenderPgm, RoundTripIdempotent) {
    const fs::path dir = scratch_dir("render");
    Vector v(30);
    for (Index i = 0; i < 30; ++i) v[i] = std::sin(0.3 * static_cast<double>(i));
    render_pgm(v, 6, 5, dir / "v.pgm");
    const PgmImage first = read_pgm(dir / "v.pgm");
    Vector again(30);
    for (Index i = 0; i < 30; ++i) again[i] = first.pixels[static_cast<std::size_t>(i)];
    render_pgm(again, 6, 5, dir / "w.pgm");
    EXPECT_EQ(read_pgm(dir / "w.pgm").pixels, first.pixels);
}

TEST(RenderPgm, DimensionMismatch) {
    EXPECT_THROW(to_pgm(Vector::Ones(10), 3, 3), DimensionError);
}

TEST(BuildTemplates, FromSpecs) {
    EXPECT_EQ(build_templates(PairSpec{0.2, 5, 1.0}).count(), 2);
    EXPECT_EQ(build_templates(CirculantSpec{{1, 0.2, 0.2}, 0, 1.0}).dim(), 3);
    HaarSpec h;
    h.count = 4;
    h.d = 20;
    h.seed = 8;
    EXPECT_EQ(build_templates(h).count(), 4);
}
