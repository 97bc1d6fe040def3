#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncmc {

/// Bad or unknown configuration input.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat `section.key = value` configuration. `#` starts a comment. Every key
/// must be consumed by the command reading it.
class Config {
public:
    static Config parse(std::istream& in, const std::string& origin = "config") {
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            if (cfg.values_.count(key))
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
            cfg.values_[key] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    static Config parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        return parse(in, path);
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        used_.insert(key);
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string require_string(const std::string& key) const {
        if (!has(key)) throw ConfigError("missing config key " + key);
        return get_string(key, {});
    }

    double get_double(const std::string& key, double fallback) const {
        return has(key) ? to_double(key, get_string(key, {})) : (used_.insert(key), fallback);
    }

    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
        return has(key) ? to_uint(key, get_string(key, {})) : (used_.insert(key), fallback);
    }

    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
        if (!has(key)) {
            used_.insert(key);
            return fallback;
        }
        std::vector<double> out;
        for (const auto& item : split(get_string(key, {}), ',')) out.push_back(to_double(key, item));
        return out;
    }

    std::vector<std::string> get_list(const std::string& key) const {
        return has(key) ? split(get_string(key, {}), ',') : (used_.insert(key), std::vector<std::string>{});
    }

    /// Throws naming the first key no reader asked for.
    void reject_unknown() const {
        for (const auto& [key, value] : values_)
            if (!used_.count(key)) throw ConfigError("unknown config key " + key);
    }

    /// Sorted `key=value` lines.
    std::string canonical() const {
        std::string out;
        for (const auto& [key, value] : values_) out += key + "=" + value + "\n";
        return out;
    }

    /// FNV-1a over the canonical text, as 16 hex digits.
    std::string digest() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    static std::vector<std::string> split(const std::string& s, char sep) {
        std::vector<std::string> out;
        std::string item;
        std::istringstream in(s);
        while (std::getline(in, item, sep))
            if (!trim(item).empty()) out.push_back(trim(item));
        return out;
    }

private:
    static double to_double(const std::string& key, const std::string& text) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(text, &pos);
            if (pos == text.size()) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError("config key " + key + ": not a number: " + text);
    }

    static std::uint64_t to_uint(const std::string& key, const std::string& text) {
        std::uint64_t v = 0;
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || ptr != text.data() + text.size())
            throw ConfigError("config key " + key + ": not a non-negative integer: " + text);
        return v;
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

} // namespace ncmc
