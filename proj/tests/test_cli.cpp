// Drives the bias_lab executable end to end.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string exe = BIAS_LAB_EXE;

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("biaslab_cli_" + name);
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

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// exit status of `bias_lab args`, output captured to `log`
int run(const std::string& args, const fs::path& log, const std::string& env = "") {
    const std::string cmd = env + " '" + exe + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, RunPairHardWritesCsv) {
    const fs::path dir = scratch_dir("pair");
    write(dir / "c.conf", "experiment = pair_hard\nrho = 0.99\nM = 5e6\n");
    ASSERT_EQ(run("run --config " + (dir / "c.conf").string() + " --out " + (dir / "out").string(), dir / "log"), 0)
        << slurp(dir / "log");
    const std::string table = slurp(dir / "out" / "pair_hard.csv");
    EXPECT_EQ(table.rfind("rho[1],M[samples],corr00[sigma*norm]", 0), 0u);
    EXPECT_NE(table.find("0.05641895835"), std::string::npos);
    EXPECT_NE(slurp(dir / "log").find("checks passed"), std::string::npos);
}

TEST(Cli, RunIsByteIdentical) {
    const fs::path dir = scratch_dir("repeat");
    write(dir / "c.conf", "experiment = pair_soft\nM = 200000\nseed = 4\n");
    const std::string conf = (dir / "c.conf").string();
    ASSERT_EQ(run("run --config " + conf + " --out " + (dir / "a").string() + " --threads 1", dir / "log"), 0);
    ASSERT_EQ(run("run --config " + conf + " --out " + (dir / "b").string() + " --threads 3", dir / "log"), 0);
    for (const char* f : {"checks.csv", "pair_soft.csv", "config.txt"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(Cli, SeedEnvironmentOverride) {
    const fs::path dir = scratch_dir("seed");
    write(dir / "c.conf", "experiment = pair_soft\nM = 100000\nseed = 4\n");
    const std::string conf = (dir / "c.conf").string();
    ASSERT_EQ(run("run --config " + conf + " --out " + (dir / "a").string(), dir / "log"), 0);
    ASSERT_EQ(run("run --config " + conf + " --out " + (dir / "b").string(), dir / "log", "BIAS_LAB_SEED=9"), 0);
    ASSERT_EQ(run("run --config " + conf + " --out " + (dir / "c").string(), dir / "log", "BIAS_LAB_SEED=4"), 0);
    EXPECT_NE(slurp(dir / "a" / "pair_soft.csv"), slurp(dir / "b" / "pair_soft.csv"));
    EXPECT_EQ(slurp(dir / "a" / "pair_soft.csv"), slurp(dir / "c" / "pair_soft.csv"));
    EXPECT_NE(slurp(dir / "b" / "config.txt").find("seed = 9"), std::string::npos);
}

TEST(Cli, ExitCodes) {
    const fs::path dir = scratch_dir("codes");
    write(dir / "unknown.conf", "experiment = not_an_experiment\n");
    EXPECT_EQ(run("run --config " + (dir / "unknown.conf").string() + " --out " + (dir / "o").string(), dir / "log"),
              2);
    write(dir / "badkey.conf", "experiment = pair_hard\nrhoo = 0\n");
    EXPECT_EQ(run("run --config " + (dir / "badkey.conf").string() + " --out " + (dir / "o").string(), dir / "log"),
              3);
    write(dir / "badvalue.conf", "experiment = pair_hard\nM = lots\n");
    EXPECT_EQ(run("run --config " + (dir / "badvalue.conf").string() + " --out " + (dir / "o").string(), dir / "log"),
              3);
    EXPECT_EQ(run("run --config " + (dir / "missing.conf").string(), dir / "log"), 3);
    EXPECT_EQ(run("bogus", dir / "log"), 3);
    write(dir / "ok.conf", "experiment = pair_hard\nrho = 0\nM = 1000\n");
    write(dir / "blocker", "a file, not a directory");
    EXPECT_EQ(run("run --config " + (dir / "ok.conf").string() + " --out " + (dir / "blocker" / "sub").string(),
                  dir / "log"),
              4);
    write(dir / "fail.conf", "experiment = pair_hard\nrho = 0\nM = 1000\ntolerance.closed_form = 1e-15\n");
    EXPECT_EQ(run("run --config " + (dir / "fail.conf").string() + " --out " + (dir / "o").string(), dir / "log"), 1);
    EXPECT_NE(slurp(dir / "log").find("FAIL"), std::string::npos);
}

TEST(Cli, TemplatesMakeAndInspect) {
    const fs::path dir = scratch_dir("templates");
    const std::string csv = (dir / "c.csv").string();
    ASSERT_EQ(run("templates make --kind circulant --rho-seq 1,0.4,0.4 --d 8 --out " + csv, dir / "log"), 0)
        << slurp(dir / "log");
    ASSERT_EQ(run("templates inspect " + csv, dir / "log"), 0);
    const std::string text = slurp(dir / "log");
    EXPECT_NE(text.find("L = 3"), std::string::npos);
    EXPECT_NE(text.find("d = 8"), std::string::npos);
    EXPECT_NE(text.find("circulant = yes"), std::string::npos);
    EXPECT_NE(text.find("0.4"), std::string::npos);

    const fs::path pgm = dir / "pgm";
    ASSERT_EQ(run("templates make --kind synthetic --L 3 --width 10 --height 8 --out " + pgm.string(), dir / "log"),
              0);
    int count = 0;
    for (const auto& e : fs::directory_iterator(pgm)) count += e.path().extension() == ".pgm";
    EXPECT_EQ(count, 3);
    ASSERT_EQ(run("templates inspect " + pgm.string(), dir / "log"), 0);
    EXPECT_NE(slurp(dir / "log").find("d = 80"), std::string::npos);

    EXPECT_EQ(run("templates make --kind circulant --rho-seq 1,0.9,0.9,0.9,0.9,0.9,-0.9 --d 8 --out " + csv,
                  dir / "log"),
              3);
}

TEST(Cli, RunUsesTemplatesFromFile) {
    const fs::path dir = scratch_dir("estimate");
    const std::string csv = (dir / "pair.csv").string();
    ASSERT_EQ(run("templates make --kind pair --rho 0.5 --d 4 --out " + csv, dir / "log"), 0);
    write(dir / "e.conf", "experiment = estimate\ntemplate = csv\ntemplate_path = " + csv + "\nM = 200000\n");
    EXPECT_EQ(run("run --config " + (dir / "e.conf").string() + " --out " + (dir / "o").string(), dir / "log"), 0)
        << slurp(dir / "log");
}
