#pragma once

#include "kerneltheory/common.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string_view>

#include <unistd.h>

namespace kt {

// One declared key of a command: name, default text, one-line help.
struct ConfigKey {
    std::string name;
    std::string fallback;
    std::string help;
};

using Schema = std::vector<ConfigKey>;

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool valid_key(std::string_view k) {
    if (k.empty() || k.front() == '.' || k.back() == '.') return false;
    for (char c : k)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) return false;
    return k.find("..") == std::string_view::npos;
}

}  // namespace detail

// Flat `key = value` record. Values stay text until a typed getter reads them.
class Config {
public:
    // Lines are `key = value` or `key: value`; '#' starts a comment.
    static Config parse(std::string_view text, std::string_view origin = "config") {
        Config cfg;
        std::size_t lineno = 0;
        while (!text.empty()) {
            ++lineno;
            const auto nl = text.find('\n');
            std::string_view line = text.substr(0, nl);
            text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
            if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto where = std::string(origin) + ":" + std::to_string(lineno);
            auto sep = line.find('=');
            if (sep == std::string_view::npos) sep = line.find(':');
            if (sep == std::string_view::npos) throw InvalidArgument(where + ": expected `key = value`");
            const auto key = detail::trim(line.substr(0, sep));
            const auto value = detail::trim(line.substr(sep + 1));
            if (!detail::valid_key(key)) throw InvalidArgument(where + ": malformed key '" + std::string(key) + "'");
            if (value.empty()) throw InvalidArgument(where + ": empty value for '" + std::string(key) + "'");
            if (!cfg.values_.emplace(std::string(key), std::string(value)).second)
                throw InvalidArgument(where + ": duplicate key '" + std::string(key) + "'");
        }
        return cfg;
    }

    static Config load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw InvalidArgument("cannot read config file " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path.string());
    }

    // `key=value` from the command line; replaces any file value.
    void apply_override(std::string_view kv) {
        const auto sep = kv.find('=');
        if (sep == std::string_view::npos) throw InvalidArgument("override must be key=value: " + std::string(kv));
        const auto key = detail::trim(kv.substr(0, sep));
        const auto value = detail::trim(kv.substr(sep + 1));
        if (!detail::valid_key(key)) throw InvalidArgument("malformed override key '" + std::string(key) + "'");
        if (value.empty()) throw InvalidArgument("empty override value for '" + std::string(key) + "'");
        values_[std::string(key)] = std::string(value);
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    // Rejects any key outside the schema and fills defaults for the rest.
    void bind(const Schema& schema) {
        for (const auto& [k, v] : values_) {
            const bool known = std::any_of(schema.begin(), schema.end(), [&](const ConfigKey& c) { return c.name == k; });
            if (!known) throw InvalidArgument("unknown config key '" + k + "'");
        }
        for (const auto& c : schema) values_.try_emplace(c.name, c.fallback);
    }

    // Keys under `prefix.` with the prefix removed.
    Config scoped(const std::string& prefix) const {
        Config out;
        const auto p = prefix + ".";
        for (const auto& [k, v] : values_)
            if (k.rfind(p, 0) == 0) out.values_.emplace(k.substr(p.size()), v);
        return out;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    const std::string& text(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw InvalidArgument("missing config key '" + key + "'");
        return it->second;
    }

    double real(const std::string& key) const {
        const auto& s = text(key);
        double v = 0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v))
            throw InvalidArgument("config key '" + key + "' is not a finite number: " + s);
        return v;
    }

    long long integer(const std::string& key) const {
        const auto& s = text(key);
        long long v = 0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec == std::errc{} && p == s.data() + s.size()) return v;
        // 1e6-style integers
        const double d = real(key);
        if (d != std::floor(d) || std::abs(d) > 9e18) throw InvalidArgument("config key '" + key + "' is not an integer: " + s);
        return static_cast<long long>(d);
    }

    std::size_t count(const std::string& key) const {
        const auto v = integer(key);
        if (v < 0) throw InvalidArgument("config key '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    }

    bool flag(const std::string& key) const {
        const auto& s = text(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw InvalidArgument("config key '" + key + "' is not a boolean: " + s);
    }

    // Comma- or space-separated list of numbers.
    std::vector<double> reals(const std::string& key) const {
        std::string s = text(key);
        std::replace(s.begin(), s.end(), ',', ' ');
        std::istringstream in(s);
        std::vector<double> out;
        std::string tok;
        while (in >> tok) {
            double v = 0;
            const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (ec != std::errc{} || p != tok.data() + tok.size() || !std::isfinite(v))
                throw InvalidArgument("config key '" + key + "' has a non-numeric entry: " + tok);
            out.push_back(v);
        }
        if (out.empty()) throw InvalidArgument("config key '" + key + "' is an empty list");
        return out;
    }

    // Sorted `key = value` lines.
    std::string dump() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

// Shortest text that round-trips through strtod.
inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Table with a fixed header, emitted as comma-separated text with LF line ends.
class ResultTable {
public:
    explicit ResultTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void add(std::vector<std::string> row) {
        require(row.size() == columns_.size(), "result row width differs from the header");
        rows_.push_back(std::move(row));
    }

    void add_reals(std::span<const double> row) {
        std::vector<std::string> cells;
        cells.reserve(row.size());
        for (double v : row) cells.push_back(format_real(v));
        add(std::move(cells));
    }

    std::string csv() const {
        std::string out;
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i) out += ',';
                out += cells[i];
            }
            out += '\n';
        };
        line(columns_);
        for (const auto& r : rows_) line(r);
        return out;
    }

    std::size_t rows() const { return rows_.size(); }

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> rows_;
};

// Ordered key/value summary.
class Summary {
public:
    void put(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }
    void put(const std::string& key, double value) { put(key, format_real(value)); }
    void put(const std::string& key, long long value) { put(key, std::to_string(value)); }
    void put(const std::string& key, std::size_t value) { put(key, std::to_string(value)); }
    void put(const std::string& key, int value) { put(key, std::to_string(value)); }
    void put(const std::string& key, bool value) { put(key, std::string(value ? "true" : "false")); }
    void put(const std::string& key, const char* value) { put(key, std::string(value)); }

    std::string kv() const {
        std::string out;
        for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
        return out;
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Writes each file to a temporary sibling, then renames it into place.
inline void write_atomic(const std::filesystem::path& path, std::string_view content) {
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// Everything a run leaves behind, written only once the run has finished.
struct RunArtifacts {
    std::string command;
    std::uint64_t seed = 0;
    ResultTable results{{}};
    Summary summary;
    Config resolved;
    std::vector<std::pair<std::string, std::string>> extra_files;

    void write(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        std::vector<std::pair<std::string, std::string>> files = {
            {"results.csv", results.csv()},
            {"summary.kv", summary.kv()},
            {"config.resolved.kv", resolved.dump()},
        };
        files.insert(files.end(), extra_files.begin(), extra_files.end());
        std::string manifest = "command = " + command + "\nseed = " + std::to_string(seed) + "\n";
        for (const auto& [name, body] : files) {
            char hash[17];
            std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(body)));
            manifest += "file." + name + " = " + std::to_string(body.size()) + " bytes fnv1a64 " + hash + "\n";
            write_atomic(dir / name, body);
        }
        write_atomic(dir / "manifest.kv", manifest);
    }
};

}  // namespace kt
