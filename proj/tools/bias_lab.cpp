// bias_lab: run experiments from config files, verify the property suites, make/inspect templates.
//
// exit codes: 0 all checks pass, 1 some check failed, 2 unknown experiment,
//             3 invalid config or arguments, 4 output directory not writable, 5 other error

#include "biaslab/lab/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace biaslab;
using namespace biaslab::lab;

namespace {

enum Exit : int { ok = 0, check_failed = 1, unknown_experiment = 2, invalid_config = 3, unwritable = 4, other = 5 };

struct OutputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void probe_output(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw OutputError("cannot create output directory " + dir.string() + ": " + ec.message());
    const fs::path probe = dir / ".bias_lab_probe";
    {
        std::ofstream out(probe);
        if (!out || !(out << "probe")) throw OutputError("output directory " + dir.string() + " is not writable");
    }
    fs::remove(probe, ec);
}

std::optional<std::uint64_t> env_seed() {
    const char* s = std::getenv("BIAS_LAB_SEED");
    if (!s || !*s) return std::nullopt;
    return KeyValueConfig::to_u64(s, "BIAS_LAB_SEED");
}

int finish(RunReport& report, const fs::path& out) {
    try {
        report.write(out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return unwritable;
    }
    report.print_summary(std::cout);
    std::cout << "artifacts in " << out.string() << "\n";
    return report.passed() ? ok : check_failed;
}

// Runs `body`, mapping exceptions onto the documented exit codes.
template <class F>
int guarded(F&& body) {
    try {
        return body();
    } catch (const UnknownExperimentError& e) {
        std::cerr << "error: " << e.what() << "\navailable:";
        for (const auto& [name, info] : experiments()) std::cerr << ' ' << name;
        std::cerr << '\n';
        return unknown_experiment;
    } catch (const OutputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return unwritable;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return invalid_config;
    } catch (const ParseError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return invalid_config;
    } catch (const DomainError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return invalid_config;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return invalid_config;
    } catch (const SpectrumError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return invalid_config;
    } catch (const DegenerateTemplatesError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return invalid_config;
    } catch (const HypothesisError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return invalid_config;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return other;
    }
}

void print_matrix(const Matrix& m) {
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) std::cout << (j ? " " : "  ") << std::setw(10) << fmt(m(i, j));
        std::cout << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Monte Carlo laboratory for confirmation bias of one-step hard/soft assignment on pure noise"};
    app.require_subcommand(1);

    unsigned threads = 0;

    auto* run = app.add_subcommand("run", "run the experiment described by a key = value config file");
    std::string config_path;
    std::string run_out;
    run->add_option("--config", config_path, "config file")->required();
    run->add_option("--out", run_out, "output directory (default: out_dir key, else bias_lab_out)");
    run->add_option("--threads", threads, "worker threads (0: all cores); never changes results");

    auto* verify = app.add_subcommand("verify", "run a property suite");
    std::string suite_name = "fast";
    std::string verify_out = "bias_lab_verify";
    std::uint64_t verify_seed = 1;
    verify->add_option("--suite", suite_name, "fast or full")->check(CLI::IsMember({"fast", "full"}));
    verify->add_option("--out", verify_out, "output directory");
    verify->add_option("--seed", verify_seed, "base seed (BIAS_LAB_SEED overrides)");
    verify->add_option("--threads", threads, "worker threads (0: all cores); never changes results");

    auto* templates = app.add_subcommand("templates", "create or inspect template sets");
    templates->require_subcommand(1);
    auto* make = templates->add_subcommand("make", "build a template set and save it");
    std::string kind = "pair";
    std::string make_out;
    std::string format = "csv";
    std::string rho;
    std::string rho_seq;
    std::string d;
    std::string L;
    std::string norm;
    std::string alpha;
    std::string seed;
    std::string haar_method;
    std::string max_abs_rho;
    Index width = 0;
    Index height = 0;
    bool header = false;
    make->add_option("--kind", kind, "pair, circulant, orthonormal, haar, random or synthetic")
        ->check(CLI::IsMember({"pair", "circulant", "orthonormal", "haar", "random", "synthetic"}));
    make->add_option("--out", make_out, "CSV file, or directory for PGM output")->required();
    make->add_option("--format", format, "csv or pgm")->check(CLI::IsMember({"csv", "pgm"}));
    make->add_option("--rho", rho, "pair correlation");
    make->add_option("--rho-seq", rho_seq, "circulant first row, comma separated");
    make->add_option("--d", d, "dimension");
    make->add_option("--L", L, "number of templates");
    make->add_option("--norm", norm, "common norm");
    make->add_option("--alpha", alpha, "exponential decay of the haar reference template");
    make->add_option("--seed", seed, "seed (haar, random, synthetic)");
    make->add_option("--haar-method", haar_method, "rotation or sphere");
    make->add_option("--max-abs-rho", max_abs_rho, "random: bound on |rho|");
    make->add_option("--width", width, "PGM width (width * height = d)");
    make->add_option("--height", height, "PGM height");
    make->add_flag("--header", header, "CSV header line with labels");

    auto* inspect = templates->add_subcommand("inspect", "print the Gram matrix of a template set");
    std::string inspect_path;
    std::string inspect_format;
    bool no_normalize = false;
    bool inspect_header = false;
    inspect->add_option("path", inspect_path, "CSV file, PGM file or directory of PGMs")->required();
    inspect->add_option("--format", inspect_format, "csv or pgm (default: from the path)")
        ->check(CLI::IsMember({"csv", "pgm"}));
    inspect->add_flag("--no-normalize", no_normalize, "keep the stored norms");
    inspect->add_flag("--header", inspect_header, "CSV has a header line");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return invalid_config;
    }

    if (*run) {
        return guarded([&] {
            const KeyValueConfig cfg = KeyValueConfig::load(config_path);
            RunOptions opts;
            opts.threads = threads;
            opts.seed_override = env_seed();
            fs::path out = run_out;
            if (out.empty()) out = cfg.get_string("out_dir", std::string("bias_lab_out"));
            opts.out_dir = out;
            find_experiment(cfg.get_string("experiment"));
            validate_keys(cfg, find_experiment(cfg.get_string("experiment")));
            probe_output(out);
            RunReport report = run_config(cfg, opts);
            return finish(report, out);
        });
    }

    if (*verify) {
        return guarded([&] {
            RunOptions opts;
            opts.threads = threads;
            opts.out_dir = verify_out;
            const std::uint64_t seed = env_seed().value_or(verify_seed);
            probe_output(verify_out);
            RunReport report = run_suite(suite_name, seed, opts);
            return finish(report, verify_out);
        });
    }

    if (*make) {
        return guarded([&] {
            const fs::path out = make_out;
            if (kind == "synthetic") {
                const Index count = L.empty() ? 12 : KeyValueConfig::to_int(L, "L");
                const Index w = width > 0 ? width : 32;
                const Index h = height > 0 ? height : 32;
                probe_output(out);
                const auto images =
                    synthetic_images(count, w, h, seed.empty() ? 1 : KeyValueConfig::to_u64(seed, "seed"));
                for (std::size_t i = 0; i < images.size(); ++i) {
                    char name[32];
                    std::snprintf(name, sizeof name, "template_%02zu.pgm", i);
                    write_pgm(images[i], out / name);
                }
                std::cout << "wrote " << images.size() << " images to " << out.string() << '\n';
                return int(ok);
            }
            KeyValueConfig cfg;
            cfg.set("template", kind);
            const std::pair<const char*, const std::string*> keys[] = {
                {"rho", &rho},     {"rho_seq", &rho_seq}, {"d", &d},
                {"L", &L},         {"norm", &norm},       {"alpha", &alpha},
                {"template_seed", &seed}, {"haar_method", &haar_method}, {"max_abs_rho", &max_abs_rho}};
            for (const auto& [k, v] : keys)
                if (!v->empty()) cfg.set(k, *v);
            const TemplateSet set = templates_from_config(cfg, 1);
            for (const auto& k : cfg.unused_keys())
                if (k != "template") std::cerr << "warning: option for '" << k << "' does not apply to " << kind << '\n';
            if (out.has_parent_path()) probe_output(format == "pgm" ? out : out.parent_path());
            SaveOptions so;
            so.header = header;
            so.width = width;
            so.height = height;
            save_templates(set, out, format == "pgm" ? TemplateFormat::pgm : TemplateFormat::csv, so);
            std::cout << "wrote " << set.count() << " templates (d = " << set.dim() << ") to " << out.string()
                      << '\n';
            return int(ok);
        });
    }

    if (*inspect) {
        return guarded([&] {
            const fs::path path = inspect_path;
            std::string f = inspect_format;
            if (f.empty()) f = (fs::is_directory(path) || path.extension() == ".pgm") ? "pgm" : "csv";
            LoadOptions lo;
            lo.header = inspect_header;
            lo.normalize = !no_normalize;
            const TemplateSet set = load_templates(path, f == "pgm" ? TemplateFormat::pgm : TemplateFormat::csv, lo);
            const GramModel g = gram(set);
            std::cout << "L = " << set.count() << "\nd = " << set.dim() << "\ncommon_norm = " << fmt(set.common_norm())
                      << "\nlabels =";
            for (Index l = 0; l < set.count(); ++l) std::cout << ' ' << set.label(l);
            std::cout << "\nrho =\n";
            print_matrix(g.rho());
            bool circulant = true;
            const Index n = g.size();
            for (Index i = 0; i < n && circulant; ++i)
                for (Index j = 0; j < n; ++j)
                    if (std::abs(g.rho(i, j) - g.rho(0, ((j - i) % n + n) % n)) > 1e-9) {
                        circulant = false;
                        break;
                    }
            std::cout << "min_eigenvalue = " << fmt(g.min_eigenvalue()) << "\ncirculant = "
                      << (circulant ? "yes" : "no") << '\n';
            return int(ok);
        });
    }
    return other;
}
