#include "biaslab/lab/experiments.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace biaslab;
using namespace biaslab::lab;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("biaslab_lab_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

KeyValueConfig parse(const std::string& text) {
    std::istringstream in(text);
    return KeyValueConfig::parse(in);
}

RunReport run(std::initializer_list<std::pair<std::string, std::string>> pairs, std::uint64_t seed = 1) {
    RunOptions opts;
    opts.seed_override = seed;
    return run_config(KeyValueConfig::from_pairs(pairs), opts);
}

}  // namespace

TEST(KeyValueConfig, ParsesCommentsListsAndNumbers) {
    const auto cfg = parse("# header\nexperiment = pair_hard\n  rho = -0.5, 0, 0.9  # trailing\n\nM = 1e6\nbeta = hard\n");
    EXPECT_EQ(cfg.get_string("experiment"), "pair_hard");
    EXPECT_EQ(cfg.get_doubles("rho"), (std::vector<double>{-0.5, 0.0, 0.9}));
    EXPECT_EQ(cfg.get_u64("M"), 1'000'000u);
    EXPECT_TRUE(std::isinf(cfg.get_double("beta")));
    EXPECT_EQ(cfg.get_int("missing", 7), 7);
    EXPECT_TRUE(cfg.unused_keys().empty());
}

TEST(KeyValueConfig, Errors) {
    EXPECT_THROW(parse("no equals sign\n"), ConfigError);
    EXPECT_THROW(parse("a = 1\na = 2\n"), ConfigError);
    EXPECT_THROW(parse(" = 3\n"), ConfigError);
    const auto cfg = parse("M = 1.5\nx = abc\nneg = -3\nflag = maybe\n");
    EXPECT_THROW(cfg.get_u64("M"), ConfigError);
    EXPECT_THROW(cfg.get_double("x"), ConfigError);
    EXPECT_THROW(cfg.get_u64("neg"), ConfigError);
    EXPECT_THROW(cfg.get_bool("flag", false), ConfigError);
    EXPECT_THROW(cfg.get_string("absent"), ConfigError);
}

TEST(KeyValueConfig, UnusedKeysAreReported) {
    const auto cfg = parse("a = 1\nb = 2\n");
    cfg.get_int("a");
    EXPECT_EQ(cfg.unused_keys(), std::vector<std::string>{"b"});
}

TEST(Registry, UnknownExperimentAndKeys) {
    EXPECT_THROW(find_experiment("nope"), UnknownExperimentError);
    const auto& info = find_experiment("pair_hard");
    EXPECT_NO_THROW(validate_keys(parse("experiment = pair_hard\nrho = 0\ntolerance.closed_form = 0.01\n"), info));
    EXPECT_THROW(validate_keys(parse("experiment = pair_hard\nrhoo = 0\n"), info), ConfigError);
    for (const char* name : {"pair_hard", "pair_soft", "soft_finite", "beta_bridge", "beta_zero",
                             "positive_correlation", "mass_sanity", "inverse_dependency", "span", "gumbel_sweep",
                             "soft_asymptotic", "oracle_checks", "oracle_engine", "theory_checks", "bias_demo",
                             "estimate"})
        EXPECT_NO_THROW(find_experiment(name)) << name;
}

TEST(Report, PassRules) {
    RunReport r;
    CheckRow row;
    row.measured = 1.0;
    row.reference = 1.05;
    row.tolerance = 0.1;
    EXPECT_TRUE(r.add(row).pass);
    row.tolerance = 0.01;
    EXPECT_FALSE(r.add(row).pass);
    row.comparison = Comparison::greater;
    row.reference = 0.5;
    row.tolerance = 0.4;
    EXPECT_TRUE(r.add(row).pass);
    row.comparison = Comparison::at_most;
    row.reference = 0.9;
    EXPECT_FALSE(r.add(row).pass);
    row.comparison = Comparison::close;
    row.measured = std::nan("");
    row.tolerance = 1e9;
    EXPECT_FALSE(r.add(row).pass);
    row.comparison = Comparison::informational;
    EXPECT_TRUE(r.add(row).pass);
    EXPECT_EQ(r.failures(), 3u);
    EXPECT_FALSE(r.passed());
}

TEST(Report, WritesCsvWithHeadersAndQuoting) {
    const fs::path dir = scratch_dir("report");
    RunReport r;
    CheckRow row;
    row.experiment = "x";
    row.check = "c";
    row.params = "a=1;b=2";
    row.provenance = "formula, quoted";
    r.add(row);
    r.table("x", {"v[1]", "w[1]"}).add({"1", "two, three"});
    r.config = {{"experiment", "x"}};
    r.write(dir);
    const std::string checks = slurp(dir / "checks.csv");
    EXPECT_EQ(checks.rfind("experiment,check,params,unit,measured[unit]", 0), 0u);
    EXPECT_NE(checks.find("\"formula, quoted\""), std::string::npos);
    EXPECT_EQ(slurp(dir / "x.csv"), "v[1],w[1]\n1,\"two, three\"\n");
    EXPECT_EQ(slurp(dir / "config.txt"), "experiment = x\n");
    EXPECT_TRUE(fs::exists(dir / "timing.txt"));
}

TEST(Report, FixedNumberFormat) {
    EXPECT_EQ(fmt(0.5), "0.5");
    EXPECT_EQ(fmt(1.0 / 3.0), "0.3333333333");
    EXPECT_EQ(fmt(std::nan("")), "nan");
    EXPECT_EQ(fmt(-std::numeric_limits<double>::infinity()), "-inf");
    EXPECT_EQ(fmt(12LL), "12");
}

TEST(Experiments, PairHardHighCorrelation) {
    const RunReport r = run({{"experiment", "pair_hard"}, {"rho", "0.99"}, {"M", "5000000"}});
    ASSERT_TRUE(r.passed());
    ASSERT_EQ(r.tables.size(), 1u);
    const auto& row = r.tables[0].rows.at(0);
    EXPECT_NEAR(std::stod(row[2]), 0.0564, 0.002);
    EXPECT_NEAR(std::stod(row[8]), 0.056419, 1e-6);
}

TEST(Experiments, ToleranceOverrideApplies) {
    const RunReport r =
        run({{"experiment", "pair_hard"}, {"rho", "0"}, {"M", "10000"}, {"tolerance.closed_form", "1e-12"}});
    bool seen = false;
    for (const auto& row : r.rows)
        if (row.check == "closed_form") {
            seen = true;
            EXPECT_EQ(row.tolerance, 1e-12);
            EXPECT_FALSE(row.pass);
        }
    EXPECT_TRUE(seen);
}

TEST(Experiments, DeterministicRows) {
    const auto a = run({{"experiment", "pair_soft"}, {"M", "100000"}}, 5);
    const auto b = run({{"experiment", "pair_soft"}, {"M", "100000"}}, 5);
    const auto c = run({{"experiment", "pair_soft"}, {"M", "100000"}}, 6);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].measured, b.rows[i].measured);
    EXPECT_NE(a.rows[0].measured, c.rows[0].measured);
}

TEST(Experiments, EstimateWithOracle) {
    const RunReport r = run({{"experiment", "estimate"}, {"template", "circulant"}, {"rho_seq", "1,0.3,0.3"},
                             {"M", "200000"}, {"beta", "2"}});
    EXPECT_TRUE(r.passed());
    bool oracle = false;
    for (const auto& row : r.rows) oracle = oracle || row.provenance.find("oracle") != std::string::npos;
    EXPECT_TRUE(oracle);
}

TEST(Experiments, BiasDemoWritesImages) {
    const fs::path dir = scratch_dir("demo");
    RunOptions opts;
    opts.seed_override = 1;
    opts.out_dir = dir;
    const RunReport r = run_config(KeyValueConfig::from_pairs({{"experiment", "bias_demo"},
                                                               {"count", "4"},
                                                               {"width", "12"},
                                                               {"height", "12"},
                                                               {"M", "20000"}}),
                                   opts);
    EXPECT_TRUE(r.passed());
    int pgm = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) pgm += e.path().extension() == ".pgm";
    EXPECT_EQ(pgm, 8);
}

TEST(Suites, Composition) {
    EXPECT_THROW(suite("medium"), ConfigError);
    bool engine_rows = false;
    for (const auto& item : suite("full"))
        if (item.id == "oracle_engine")
            for (const auto& [k, v] : item.config) engine_rows = engine_rows || (k == "grams" && v == "20");
    EXPECT_TRUE(engine_rows);
    for (const auto& item : suite("fast")) {
        for (const auto& [k, v] : item.config)
            if (k == "M" || k == "M_large") EXPECT_LE(std::stoull(v), 1'000'000ull) << item.id;
    }
}

TEST(Synthetic, ImagesAreDeterministic) {
    const auto a = synthetic_images(3, 8, 6, 4);
    const auto b = synthetic_images(3, 8, 6, 4);
    ASSERT_EQ(a.size(), 3u);
    EXPECT_EQ(a[1].pixels, b[1].pixels);
    EXPECT_NE(a[0].pixels, a[1].pixels);
    EXPECT_THROW(synthetic_images(0, 8, 8, 1), DimensionError);
}
