#pragma once

#include "biaslab/common.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace biaslab::lab {

/// Flat `key = value` configuration. `#` starts a comment; blank lines are ignored; lists are
/// comma separated. Every key must be read by the experiment, otherwise `unused_keys()` names it.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(std::istream& in, const std::string& source = "<config>") {
        KeyValueConfig cfg;
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string_view text = trim(line);
            if (text.empty()) continue;
            const auto eq = text.find('=');
            if (eq == std::string_view::npos)
                throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
            const std::string key(trim(text.substr(0, eq)));
            const std::string value(trim(text.substr(eq + 1)));
            if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
            if (cfg.values_.count(key))
                throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
            cfg.values_[key] = value;
            cfg.order_.push_back(key);
        }
        return cfg;
    }

    static KeyValueConfig load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path.string());
        return parse(in, path.string());
    }

    static KeyValueConfig from_pairs(std::initializer_list<std::pair<std::string, std::string>> pairs) {
        KeyValueConfig cfg;
        for (const auto& [k, v] : pairs) cfg.set(k, v);
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::optional<std::string>& fallback = std::nullopt) const {
        used_.insert(key);
        const auto it = values_.find(key);
        if (it != values_.end()) return it->second;
        if (fallback) return *fallback;
        throw ConfigError("missing required key '" + key + "'");
    }

    double get_double(const std::string& key, std::optional<double> fallback = std::nullopt) const {
        if (!has(key)) {
            used_.insert(key);
            if (fallback) return *fallback;
            throw ConfigError("missing required key '" + key + "'");
        }
        return to_double(get_string(key), key);
    }

    std::int64_t get_int(const std::string& key, std::optional<std::int64_t> fallback = std::nullopt) const {
        if (!has(key)) {
            used_.insert(key);
            if (fallback) return *fallback;
            throw ConfigError("missing required key '" + key + "'");
        }
        return to_int(get_string(key), key);
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        const std::string v = get_string(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
    }

    std::vector<double> get_doubles(const std::string& key, std::optional<std::vector<double>> fallback = std::nullopt) const {
        if (!has(key)) {
            used_.insert(key);
            if (fallback) return *fallback;
            throw ConfigError("missing required key '" + key + "'");
        }
        std::vector<double> out;
        for (const auto& item : split(get_string(key))) out.push_back(to_double(item, key));
        if (out.empty()) throw ConfigError("key '" + key + "' has an empty list");
        return out;
    }

    std::vector<std::int64_t> get_ints(const std::string& key,
                                       std::optional<std::vector<std::int64_t>> fallback = std::nullopt) const {
        if (!has(key)) {
            used_.insert(key);
            if (fallback) return *fallback;
            throw ConfigError("missing required key '" + key + "'");
        }
        std::vector<std::int64_t> out;
        for (const auto& item : split(get_string(key))) out.push_back(to_int(item, key));
        if (out.empty()) throw ConfigError("key '" + key + "' has an empty list");
        return out;
    }

    /// Keys present in the file that no getter asked for (likely typos).
    std::vector<std::string> unused_keys() const {
        std::vector<std::string> out;
        for (const auto& k : order_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

    /// Keys in first-appearance order with their values.
    std::vector<std::pair<std::string, std::string>> entries() const {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& k : order_) out.emplace_back(k, values_.at(k));
        return out;
    }

    static double to_double(std::string_view text, const std::string& key) {
        text = trim(text);
        if (text == "inf" || text == "infinity" || text == "hard") return std::numeric_limits<double>::infinity();
        if (!text.empty() && text.front() == '+') text.remove_prefix(1);
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || ptr != text.data() + text.size() || std::isnan(v))
            throw ConfigError("key '" + key + "': cannot parse '" + std::string(text) + "' as a number");
        return v;
    }

    std::uint64_t get_u64(const std::string& key, std::optional<std::uint64_t> fallback = std::nullopt) const {
        if (!has(key)) {
            used_.insert(key);
            if (fallback) return *fallback;
            throw ConfigError("missing required key '" + key + "'");
        }
        return to_u64(get_string(key), key);
    }

    static std::uint64_t to_u64(std::string_view text, const std::string& key) {
        text = trim(text);
        std::uint64_t u = 0;
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), u);
        if (ec == std::errc() && ptr == text.data() + text.size()) return u;
        const std::int64_t v = to_int(text, key);
        if (v < 0) throw ConfigError("key '" + key + "': expected a non-negative integer");
        return static_cast<std::uint64_t>(v);
    }

    static std::int64_t to_int(std::string_view text, const std::string& key) {
        text = trim(text);
        std::int64_t exact = 0;
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), exact);
        if (ec == std::errc() && ptr == text.data() + text.size()) return exact;
        // Integral values may be written in scientific notation, e.g. M = 1e6.
        const double v = to_double(text, key);
        if (!std::isfinite(v) || v != std::floor(v) || std::abs(v) > 9.0e18)
            throw ConfigError("key '" + key + "': expected an integer, got '" + std::string(text) + "'");
        return static_cast<std::int64_t>(v);
    }

private:
    static std::string_view trim(std::string_view s) {
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        return s;
    }

    static std::vector<std::string> split(const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto t = trim(item);
            if (!t.empty()) out.emplace_back(t);
        }
        return out;
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
    mutable std::set<std::string> used_;
};

}  // namespace biaslab::lab
