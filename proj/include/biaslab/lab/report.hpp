#pragma once

#include "biaslab/common.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <algorithm>
#include <string>
#include <vector>

namespace biaslab::lab {

/// Fixed formatting used in every CSV so that equal doubles give equal bytes.
inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string fmt(long long v) { return std::to_string(v); }

enum class Comparison {
    close,          ///< |measured - reference| <= tolerance
    greater,        ///< measured - reference > tolerance
    at_most,        ///< measured <= reference
    informational,  ///< reported, never fails
};

inline const char* to_string(Comparison c) {
    switch (c) {
        case Comparison::close: return "abs_diff<=tol";
        case Comparison::greater: return "diff>tol";
        case Comparison::at_most: return "measured<=reference";
        case Comparison::informational: return "informational";
    }
    return "unknown";
}

/// One pass/fail line. `tolerance_rule` spells out how `tolerance` was obtained and
/// `provenance` names the reference (theory formula or oracle method).
struct CheckRow {
    std::string experiment;
    std::string check;
    std::string params;
    std::string unit = "sigma*norm";  ///< unit of measured/reference/tolerance
    double measured = 0.0;
    double measured_stderr = 0.0;
    double reference = 0.0;
    double reference_bound = 0.0;
    double tolerance = 0.0;
    Comparison comparison = Comparison::close;
    std::string tolerance_rule;
    std::string provenance;
    bool pass = true;
};

/// A named CSV table; column names carry units in brackets.
struct Table {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }
};

class RunReport {
public:
    std::vector<std::pair<std::string, std::string>> config;
    std::vector<CheckRow> rows;
    std::vector<Table> tables;
    std::vector<std::string> artifacts;
    std::vector<std::string> warnings;
    double wall_seconds = 0.0;

    bool passed() const {
        for (const auto& r : rows)
            if (!r.pass) return false;
        return true;
    }

    std::size_t failures() const {
        std::size_t n = 0;
        for (const auto& r : rows) n += r.pass ? 0 : 1;
        return n;
    }

    CheckRow& add(CheckRow row) {
        switch (row.comparison) {
            case Comparison::close:
                row.pass = std::abs(row.measured - row.reference) <= row.tolerance;
                break;
            case Comparison::greater:
                row.pass = row.measured - row.reference > row.tolerance;
                break;
            case Comparison::at_most:
                row.pass = row.measured <= row.reference;
                break;
            case Comparison::informational:
                row.pass = true;
                break;
        }
        if (std::isnan(row.measured) && row.comparison != Comparison::informational) row.pass = false;
        rows.push_back(std::move(row));
        return rows.back();
    }

    Table& table(const std::string& name, std::vector<std::string> columns) {
        for (auto& t : tables)
            if (t.name == name) return t;
        tables.push_back(Table{name, std::move(columns), {}});
        return tables.back();
    }

    /// Writes checks.csv, one CSV per table, config.txt and timing.txt into `dir`. Only
    /// timing.txt depends on the wall clock.
    void write(const std::filesystem::path& dir) {
        std::filesystem::create_directories(dir);
        {
            std::ofstream out(dir / "checks.csv");
            // numeric columns are in the row's `unit`
            out << "experiment,check,params,unit,measured[unit],measured_stderr[unit],reference[unit],"
                   "reference_bound[unit],tolerance[unit],comparison,tolerance_rule,provenance,pass\n";
            for (const auto& r : rows) {
                out << r.experiment << ',' << r.check << ',' << quote(r.params) << ',' << r.unit << ',' << fmt(r.measured) << ','
                    << fmt(r.measured_stderr) << ',' << fmt(r.reference) << ',' << fmt(r.reference_bound) << ','
                    << fmt(r.tolerance) << ',' << to_string(r.comparison) << ',' << quote(r.tolerance_rule) << ','
                    << quote(r.provenance) << ',' << (r.pass ? "pass" : "FAIL") << '\n';
            }
            check_stream(out, dir / "checks.csv");
        }
        artifacts.push_back((dir / "checks.csv").string());
        for (const auto& t : tables) {
            const auto path = dir / (t.name + ".csv");
            std::ofstream out(path);
            for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
            out << '\n';
            for (const auto& row : t.rows) {
                for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << quote(row[i]);
                out << '\n';
            }
            check_stream(out, path);
            artifacts.push_back(path.string());
        }
        {
            std::ofstream out(dir / "config.txt");
            for (const auto& [k, v] : config) out << k << " = " << v << '\n';
            check_stream(out, dir / "config.txt");
        }
        {
            std::ofstream out(dir / "timing.txt");
            out << "wall_seconds = " << std::fixed << std::setprecision(3) << wall_seconds << '\n';
            check_stream(out, dir / "timing.txt");
        }
    }

    void print_summary(std::ostream& os) const {
        std::size_t width = 0;
        for (const auto& r : rows) width = std::max(width, r.experiment.size() + r.check.size() + 1);
        for (const auto& r : rows) {
            const std::string name = r.experiment + "/" + r.check;
            os << (r.pass ? "pass " : "FAIL ") << std::left << std::setw(static_cast<int>(width)) << name << "  "
               << r.params << "  measured=" << fmt(r.measured) << " reference=" << fmt(r.reference)
               << " tol=" << fmt(r.tolerance) << " [" << r.provenance << "]\n";
        }
        for (const auto& w : warnings) os << "warning: " << w << '\n';
        os << rows.size() - failures() << "/" << rows.size() << " checks passed\n";
    }

private:
    static std::string quote(const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string out = "\"";
        for (char c : s) {
            if (c == '"') out += '"';
            out += c;
        }
        return out + "\"";
    }

    static void check_stream(const std::ofstream& out, const std::filesystem::path& path) {
        if (!out) throw Error("failed writing " + path.string());
    }
};

}  // namespace biaslab::lab
