#pragma once

#include "biaslab/common.hpp"
#include "biaslab/templates.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace biaslab {

namespace fs = std::filesystem;

/// 8-bit grayscale image, row-major.
struct PgmImage {
    Index width = 0;
    Index height = 0;
    std::vector<std::uint8_t> pixels;
};

struct LoadOptions {
    bool header = false;                ///< CSV: first line holds labels
    bool normalize = true;              ///< rescale every template to a common norm
    std::optional<double> target_norm;  ///< default: 1 for PGM, RMS column norm for CSV
    bool subtract_mean = true;          ///< PGM: remove the DC offset before normalizing
};

struct SaveOptions {
    bool header = false;  ///< CSV: write labels as the first line
    Index width = 0;      ///< PGM: image shape, width * height must equal d
    Index height = 0;
};

// ---------------------------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------------------------

namespace detail {

inline void skip_pgm_space(std::istream& in) {
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
        } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            in.get();
        } else {
            return;
        }
    }
}

inline long read_pgm_int(std::istream& in, const fs::path& path, const char* what) {
    skip_pgm_space(in);
    long v = -1;
    if (!(in >> v) || v <= 0) throw ParseError(path.string() + ": invalid PGM " + what);
    return v;
}

}  // namespace detail

inline PgmImage read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    char magic[2] = {0, 0};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || magic[1] != '5') throw ParseError(path.string() + ": not a binary P5 PGM");
    PgmImage img;
    img.width = detail::read_pgm_int(in, path, "width");
    img.height = detail::read_pgm_int(in, path, "height");
    const long maxval = detail::read_pgm_int(in, path, "maxval");
    if (maxval > 255) throw ParseError(path.string() + ": only 8-bit PGM (maxval <= 255) is supported");
    in.get();  // single whitespace before the raster
    img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw ParseError(path.string() + ": truncated PGM raster");
    return img;
}

inline void write_pgm(const PgmImage& img, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw Error("failed writing " + path.string());
}

/// Affine map of [min, max] onto [0, 255]; a constant vector maps to 128.
inline PgmImage to_pgm(const Vector& v, Index width, Index height) {
    if (width <= 0 || height <= 0 || width * height != v.size())
        throw DimensionError("image shape " + std::to_string(width) + "x" + std::to_string(height) +
                             " does not match vector length " + std::to_string(v.size()));
    if (!v.allFinite()) throw DomainError("cannot render non-finite entries");
    PgmImage img{width, height, std::vector<std::uint8_t>(static_cast<std::size_t>(v.size()), 128)};
    const double lo = v.minCoeff();
    const double hi = v.maxCoeff();
    if (hi > lo) {
        for (Index i = 0; i < v.size(); ++i)
            img.pixels[static_cast<std::size_t>(i)] =
                static_cast<std::uint8_t>(std::lround(255.0 * (v[i] - lo) / (hi - lo)));
    }
    return img;
}

inline void render_pgm(const Vector& v, Index width, Index height, const fs::path& path) {
    write_pgm(to_pgm(v, width, height), path);
}

// ---------------------------------------------------------------------------------------------
// Template sets
// ---------------------------------------------------------------------------------------------

namespace detail {

inline double rms_column_norm(const Matrix& x) {
    return std::sqrt(x.colwise().squaredNorm().mean());
}

inline TemplateSet finish_loaded(Matrix x, std::vector<std::string> labels, const LoadOptions& opts,
                                 double default_norm, const std::string& source) {
    for (Index l = 0; l < x.cols(); ++l)
        if (!(x.col(l).norm() > 0.0))
            throw ParseError(source + ": template " + std::to_string(l) + " is identically zero");
    if (opts.normalize) detail::rescale_columns(x, opts.target_norm.value_or(default_norm));
    try {
        return TemplateSet(std::move(x), std::move(labels));
    } catch (const DomainError& e) {
        throw ParseError(source + ": " + e.what());
    } catch (const DimensionError& e) {
        throw ParseError(source + ": " + e.what());
    }
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline double parse_double(std::string_view token, const std::string& where) {
    token = trim(token);
    if (!token.empty() && token.front() == '+') token.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (ec != std::errc() || ptr != token.data() + token.size())
        throw ParseError(where + ": cannot parse '" + std::string(token) + "' as a number");
    if (!std::isfinite(v)) throw ParseError(where + ": non-finite entry");
    return v;
}

inline TemplateSet load_csv(const fs::path& path, const LoadOptions& opts) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    std::vector<std::string> labels;
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t line_no = 0;
    std::size_t cols = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto tokens = split_commas(line);
        if (opts.header && labels.empty() && rows.empty()) {
            for (auto t : tokens) labels.emplace_back(trim(t));
            cols = labels.size();
            continue;
        }
        if (cols == 0) cols = tokens.size();
        if (tokens.size() != cols) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": row has " +
                             std::to_string(tokens.size()) + " columns, expected " + std::to_string(cols));
        }
        std::vector<double> row;
        row.reserve(cols);
        for (auto t : tokens) row.push_back(parse_double(t, path.string() + ":" + std::to_string(line_no)));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ParseError(path.string() + ": no data rows");
    if (cols < 2) throw ParseError(path.string() + ": need at least 2 template columns");
    Matrix x(static_cast<Index>(rows.size()), static_cast<Index>(cols));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols; ++j) x(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    const double rms = rms_column_norm(x);
    return finish_loaded(std::move(x), std::move(labels), opts, rms, path.string());
}

}  // namespace detail

/// Templates loaded from PGM images plus the common image shape.
struct ImageTemplates {
    TemplateSet set;
    Index width;
    Index height;
};

/// Loads every `<label>.pgm` in `dir` (sorted by name), or a single `.pgm` file. Images are
/// flattened row-major, mean-subtracted (optional) and scaled to the target norm (default 1).
inline ImageTemplates load_pgm_templates(const fs::path& dir, const LoadOptions& opts = {}) {
    std::vector<fs::path> files;
    if (fs::is_directory(dir)) {
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
        std::sort(files.begin(), files.end());
    } else if (fs::is_regular_file(dir)) {
        files.push_back(dir);
    }
    if (files.size() < 2) throw ParseError(dir.string() + ": need at least 2 PGM templates");

    Index width = 0;
    Index height = 0;
    Matrix x;
    std::vector<std::string> labels;
    for (std::size_t l = 0; l < files.size(); ++l) {
        const PgmImage img = read_pgm(files[l]);
        if (l == 0) {
            width = img.width;
            height = img.height;
            x.resize(width * height, static_cast<Index>(files.size()));
        } else if (img.width != width || img.height != height) {
            throw ParseError(files[l].string() + ": image shape differs from " + files[0].string());
        }
        for (Index i = 0; i < x.rows(); ++i) x(i, static_cast<Index>(l)) = img.pixels[static_cast<std::size_t>(i)];
        if (opts.subtract_mean) x.col(static_cast<Index>(l)).array() -= x.col(static_cast<Index>(l)).mean();
        labels.push_back(files[l].stem().string());
    }
    return {detail::finish_loaded(std::move(x), std::move(labels), opts, 1.0, dir.string()), width, height};
}

inline TemplateSet load_templates(const fs::path& path, TemplateFormat format, const LoadOptions& opts = {}) {
    if (format == TemplateFormat::csv) return detail::load_csv(path, opts);
    return load_pgm_templates(path, opts).set;
}

/// CSV: one row per coordinate, one column per template, 17 significant digits.
/// PGM: `path` is a directory receiving `<label>.pgm` per template.
inline void save_templates(const TemplateSet& set, const fs::path& path, TemplateFormat format,
                           const SaveOptions& opts = {}) {
    if (format == TemplateFormat::pgm) {
        fs::create_directories(path);
        for (Index l = 0; l < set.count(); ++l)
            render_pgm(set.column(l), opts.width, opts.height, path / (set.label(l) + ".pgm"));
        return;
    }
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    if (opts.header) {
        for (Index l = 0; l < set.count(); ++l) out << (l ? "," : "") << set.label(l);
        out << '\n';
    }
    char buf[32];
    for (Index i = 0; i < set.dim(); ++i) {
        for (Index l = 0; l < set.count(); ++l) {
            std::snprintf(buf, sizeof buf, "%.17g", set.data()(i, l));
            out << (l ? "," : "") << buf;
        }
        out << '\n';
    }
    if (!out) throw Error("failed writing " + path.string());
}

/// Builds the template set named by a declarative spec.
inline TemplateSet build_templates(const TemplateSpec& spec) {
    return std::visit(
        [](const auto& s) -> TemplateSet {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, PairSpec>) {
                return make_pair(s.rho, s.d, s.norm);
            } else if constexpr (std::is_same_v<T, CirculantSpec>) {
                return make_circulant(s.rho_seq, s.d == 0 ? static_cast<Index>(s.rho_seq.size()) : s.d, s.norm);
            } else if constexpr (std::is_same_v<T, HaarSpec>) {
                return make_haar_family(make_exponential(s.d, s.alpha, s.norm), s.count, s.seed, s.method);
            } else {
                return load_templates(s.path, s.format);
            }
        },
        spec);
}

}  // namespace biaslab
