#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinfilt/model.hpp"

namespace kinfilt::config {

/// Flat key-value config with [section] headers, UTF-8, '#' comments,
/// decimal numbers with exponent form allowed. Keys address as section.key.
class KeyValues {
public:
    static KeyValues parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("config: cannot open " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    static KeyValues parse(const std::string& text, const std::string& origin = "<string>") {
        KeyValues kv;
        kv.origin_ = origin;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                const auto b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                             ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            kv.values_[section.empty() ? key : section + "." + key] = val;
        }
        return kv;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw std::runtime_error(origin_ + ": missing key '" + key + "'");
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& dflt) const {
        const auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    double get_double(const std::string& key) const { return to_double(key, get_string(key)); }
    double get_double(const std::string& key, double dflt) const {
        return has(key) ? get_double(key) : dflt;
    }

    long long get_int(const std::string& key) const {
        const double v = get_double(key);
        return static_cast<long long>(v);
    }
    long long get_int(const std::string& key, long long dflt) const {
        return has(key) ? get_int(key) : dflt;
    }

    std::vector<double> get_doubles(const std::string& key) const {
        std::vector<double> out;
        std::istringstream ss(get_string(key));
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) out.push_back(to_double(key, tok));
        return out;
    }

    const std::map<std::string, std::string>& items() const { return values_; }

    /// Canonical resolved-config text (sorted), used for manifests and hashing.
    std::string canonical() const {
        std::string s;
        for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
        return s;
    }

private:
    double to_double(const std::string& key, const std::string& s) const {
        std::size_t pos = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &pos);
        } catch (...) {
            throw std::runtime_error(origin_ + ": key '" + key + "': not a number: " + s);
        }
        while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
        if (pos != s.size())
            throw std::runtime_error(origin_ + ": key '" + key + "': trailing junk: " + s);
        return v;
    }

    std::string origin_;
    std::map<std::string, std::string> values_;
};

/// Fully resolved experiment scenario. All referenced ids must resolve in the
/// registries and a seed must be present (no implicit entropy).
struct ScenarioConfig {
    std::string preset_id = "constant";
    std::vector<double> preset_params;
    double t = 0.0, T = 0.5;
    int n_steps = 512;
    double lattice_lo_xi = -6.0, lattice_hi_xi = 6.0;
    double lattice_lo_nu = -6.0, lattice_hi_nu = 6.0;
    int lattice_n = 129;
    double x0 = 0.0, v0 = 0.0, y0 = 0.0;
    std::string observable_id = "v";
    int n_particles = 100000;
    int truncation_N = 3;
    std::uint64_t seed = 0;
    std::string out_dir = ".";

    static ScenarioConfig from(const KeyValues& kv) {
        ScenarioConfig sc;
        sc.preset_id = kv.get_string("scenario.preset", "constant");
        if (kv.has("scenario.params")) sc.preset_params = kv.get_doubles("scenario.params");
        sc.t = kv.get_double("scenario.t", 0.0);
        sc.T = kv.get_double("scenario.T", 0.5);
        sc.n_steps = static_cast<int>(kv.get_int("scenario.n_steps", 512));
        sc.lattice_lo_xi = kv.get_double("lattice.lo_xi", -6.0);
        sc.lattice_hi_xi = kv.get_double("lattice.hi_xi", 6.0);
        sc.lattice_lo_nu = kv.get_double("lattice.lo_nu", -6.0);
        sc.lattice_hi_nu = kv.get_double("lattice.hi_nu", 6.0);
        sc.lattice_n = static_cast<int>(kv.get_int("lattice.n", 129));
        sc.x0 = kv.get_double("scenario.x0", 0.0);
        sc.v0 = kv.get_double("scenario.v0", 0.0);
        sc.y0 = kv.get_double("scenario.y0", 0.0);
        sc.observable_id = kv.get_string("scenario.observable", "v");
        sc.n_particles = static_cast<int>(kv.get_int("scenario.n_particles", 100000));
        sc.truncation_N = static_cast<int>(kv.get_int("scenario.N", 3));
        if (!kv.has("scenario.seed"))
            throw std::runtime_error("config: scenario.seed is required (no implicit entropy)");
        sc.seed = static_cast<std::uint64_t>(kv.get_int("scenario.seed"));
        sc.out_dir = kv.get_string("output.dir", ".");
        // validate registries now so failures carry the config location
        (void)model::make_preset(sc.preset_id, sc.preset_params);
        (void)model::make_observable(sc.observable_id);
        if (!(sc.t < sc.T)) throw std::runtime_error("config: scenario.t < scenario.T required");
        if (sc.lattice_n < 9) throw std::runtime_error("config: lattice.n >= 9 required");
        return sc;
    }

    std::vector<std::pair<std::string, std::string>> manifest() const {
        std::vector<std::pair<std::string, std::string>> m;
        m.emplace_back("preset", preset_id);
        std::string ps;
        for (std::size_t i = 0; i < preset_params.size(); ++i)
            ps += (i ? "," : "") + std::to_string(preset_params[i]);
        m.emplace_back("params", ps);
        m.emplace_back("t", std::to_string(t));
        m.emplace_back("T", std::to_string(T));
        m.emplace_back("n_steps", std::to_string(n_steps));
        m.emplace_back("lattice_n", std::to_string(lattice_n));
        m.emplace_back("observable", observable_id);
        m.emplace_back("n_particles", std::to_string(n_particles));
        m.emplace_back("N", std::to_string(truncation_N));
        m.emplace_back("seed", std::to_string(seed));
        return m;
    }
};

}  // namespace kinfilt::config
