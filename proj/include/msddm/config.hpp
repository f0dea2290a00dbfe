#pragma once

// Structured configuration documents for the command-line front end.
//
// A document is JSON with the sections model, simulation, reward, analysis,
// compare, surface and output. Every object is checked against a fixed key
// set; errors carry the path of the offending field, e.g.
// "model.stages[2].t_start: must exceed model.stages[1].t_start".

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msddm/montecarlo.hpp"
#include "msddm/numerics.hpp"
#include "msddm/ou.hpp"
#include "msddm/reward.hpp"

namespace msddm::config {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct RandomSwitchTimes {
    std::uint64_t seed = 0;
    double low = 0.0;
    double high = 1.0;
};

struct AnalysisSection {
    std::size_t grid_size = kDefaultGridSize;
    std::size_t pieces = 32;
    OuTransform transform = OuTransform::ScaledEvidence;
    std::vector<double> time_grid; ///< empty: default grid
};

struct CompareSection {
    double ks_coefficient = 1.63; ///< pass when KS < coefficient / sqrt(n)
    std::size_t cdf_points = 4096;
};

struct SurfaceSection {
    std::vector<double> a1;
    std::vector<double> t1;
    SurfaceFixed fixed;
    unsigned workers = 1;
};

struct OutputSection {
    std::string directory = ".";
    bool csv = true;
    bool json = true;
};

struct Document {
    OuModelSpec model;
    bool has_leak = false;
    std::optional<RandomSwitchTimes> random_switch_times;
    std::vector<double> switch_times; ///< generated start times of stages 1..n-1
    SimConfig simulation;
    RewardConfig reward;
    AnalysisSection analysis;
    CompareSection compare;
    std::optional<SurfaceSection> surface;
    OutputSection output;
};

namespace detail {

inline std::string at(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

inline std::string item(const std::string& path, std::size_t i) {
    return path + "[" + std::to_string(i) + "]";
}

inline void require_object(const json& j, const std::string& path) {
    if (!j.is_object()) {
        throw ConfigError(path + ": expected an object");
    }
}

inline void allow_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
    require_object(j, path.empty() ? "document" : path);
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, v] : j.items()) {
        if (!allowed.count(k)) {
            throw ConfigError(at(path, k) + ": unknown key");
        }
    }
}

inline double number(const json& j, const std::string& path) {
    if (!j.is_number()) {
        throw ConfigError(path + ": expected a number");
    }
    const double v = j.get<double>();
    if (!std::isfinite(v)) {
        throw ConfigError(path + ": must be finite");
    }
    return v;
}

inline std::uint64_t count(const json& j, const std::string& path) {
    // documents built in code hold signed integers
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
        throw ConfigError(path + ": expected a nonnegative integer");
    }
    return j.get<std::uint64_t>();
}

inline double number_or(const json& obj, const std::string& path, const char* key, double fallback) {
    return obj.contains(key) ? number(obj.at(key), at(path, key)) : fallback;
}

inline const json& required(const json& obj, const std::string& path, const char* key) {
    if (!obj.contains(key)) {
        throw ConfigError(at(path, key) + ": required");
    }
    return obj.at(key);
}

/// Either an explicit array or {"from", "to", "count"} (inclusive ends).
inline std::vector<double> grid(const json& j, const std::string& path) {
    std::vector<double> out;
    if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            out.push_back(number(j[i], item(path, i)));
        }
    } else {
        allow_keys(j, path, {"from", "to", "count"});
        const double from = number(required(j, path, "from"), at(path, "from"));
        const double to = number(required(j, path, "to"), at(path, "to"));
        const auto n = count(required(j, path, "count"), at(path, "count"));
        if (n < 1) {
            throw ConfigError(at(path, "count") + ": must be at least 1");
        }
        if (n == 1) {
            out.push_back(from);
        } else {
            if (!(to > from)) {
                throw ConfigError(at(path, "to") + ": must exceed " + at(path, "from"));
            }
            for (std::uint64_t k = 0; k < n; ++k) {
                out.push_back(k + 1 == n ? to : from + (to - from) * static_cast<double>(k) / static_cast<double>(n - 1));
            }
        }
    }
    if (out.empty()) {
        throw ConfigError(path + ": must not be empty");
    }
    return out;
}

/// Sorted uniform draws on (low, high) from a seeded stream.
inline std::vector<double> draw_switch_times(const RandomSwitchTimes& r, std::size_t n) {
    std::mt19937_64 eng(numerics::splitmix64(r.seed));
    std::vector<double> t;
    for (std::size_t i = 0; i < n; ++i) {
        t.push_back(r.low + (r.high - r.low) * numerics::unit_interval(eng()));
    }
    std::sort(t.begin(), t.end());
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (!(t[i] > t[i - 1])) {
            throw ConfigError("model.random_switch_times: drew coinciding switch times; pick another seed");
        }
    }
    return t;
}

inline void parse_model(const json& j, Document& doc, bool thresholds_required) {
    const std::string path = "model";
    allow_keys(j, path, {"x0", "stages", "random_switch_times"});
    const double x0 = number(required(j, path, "x0"), at(path, "x0"));
    const json& stages = required(j, path, "stages");
    const std::string sp = at(path, "stages");
    if (!stages.is_array() || stages.empty()) {
        throw ConfigError(sp + ": expected a nonempty array");
    }
    if (j.contains("random_switch_times")) {
        const std::string rp = at(path, "random_switch_times");
        const json& r = j.at("random_switch_times");
        allow_keys(r, rp, {"seed", "low", "high"});
        RandomSwitchTimes rs;
        rs.seed = count(required(r, rp, "seed"), at(rp, "seed"));
        rs.low = number(required(r, rp, "low"), at(rp, "low"));
        rs.high = number(required(r, rp, "high"), at(rp, "high"));
        if (!(rs.high > rs.low)) {
            throw ConfigError(at(rp, "high") + ": must exceed " + at(rp, "low"));
        }
        doc.random_switch_times = rs;
        doc.switch_times = draw_switch_times(rs, stages.size() - 1);
    }
    doc.model.x0 = x0;
    doc.model.stages.clear();
    doc.has_leak = false;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const std::string p = item(sp, i);
        const json& s = stages[i];
        allow_keys(s, p, {"t_start", "drift", "leak", "diffusion", "z_upper", "z_lower"});
        OuStage st;
        if (doc.random_switch_times && i > 0) {
            if (s.contains("t_start")) {
                throw ConfigError(at(p, "t_start") + ": not allowed together with model.random_switch_times");
            }
            st.start_time = doc.switch_times[i - 1];
        } else {
            st.start_time = number(required(s, p, "t_start"), at(p, "t_start"));
        }
        st.drift = number(required(s, p, "drift"), at(p, "drift"));
        st.leak = number_or(s, p, "leak", 0.0);
        st.diffusion = number(required(s, p, "diffusion"), at(p, "diffusion"));
        if (thresholds_required || s.contains("z_upper")) {
            st.upper = number(required(s, p, "z_upper"), at(p, "z_upper"));
            st.lower = number_or(s, p, "z_lower", -st.upper);
        } else {
            if (s.contains("z_lower")) {
                throw ConfigError(at(p, "z_lower") + ": given without z_upper");
            }
            st.upper = 1.0;
            st.lower = -1.0;
        }
        if (!(st.diffusion > 0.0)) {
            throw ConfigError(at(p, "diffusion") + ": must be positive");
        }
        if (st.leak < 0.0) {
            throw ConfigError(at(p, "leak") + ": must be nonnegative");
        }
        if (st.leak != 0.0) {
            doc.has_leak = true;
        }
        if (i == 0 && !(st.start_time >= 0.0)) {
            throw ConfigError(at(p, "t_start") + ": must be nonnegative");
        }
        if (i > 0 && !(st.start_time > doc.model.stages[i - 1].start_time)) {
            throw ConfigError(at(p, "t_start") + ": must exceed " + at(item(sp, i - 1), "t_start"));
        }
        if (!(st.lower < st.upper) && (i == 0 || i + 1 != stages.size())) {
            throw ConfigError(p + ": z_upper must exceed z_lower (crossed thresholds only in the last stage)");
        }
        doc.model.stages.push_back(st);
    }
    if (doc.random_switch_times && !(doc.random_switch_times->low >= doc.model.stages[0].start_time)) {
        throw ConfigError("model.random_switch_times.low: must not precede model.stages[0].t_start");
    }
    const auto& first = doc.model.stages[0];
    if (!(first.lower < x0 && x0 < first.upper)) {
        throw ConfigError("model.x0: must lie strictly between the thresholds of model.stages[0]");
    }
}

inline void parse_simulation(const json& j, Document& doc) {
    const std::string p = "simulation";
    allow_keys(j, p, {"n_paths", "dt", "seed", "max_time", "workers", "bridge"});
    auto& c = doc.simulation;
    if (j.contains("n_paths")) {
        c.n_paths = count(j.at("n_paths"), at(p, "n_paths"));
    }
    c.dt = number_or(j, p, "dt", c.dt);
    if (j.contains("seed")) {
        c.seed = count(j.at("seed"), at(p, "seed"));
    }
    c.max_time = number_or(j, p, "max_time", c.max_time);
    if (j.contains("workers")) {
        c.workers = static_cast<unsigned>(count(j.at("workers"), at(p, "workers")));
    }
    if (j.contains("bridge")) {
        if (!j.at("bridge").is_boolean()) {
            throw ConfigError(at(p, "bridge") + ": expected true or false");
        }
        c.bridge = j.at("bridge").get<bool>();
    }
    if (c.n_paths < 1) {
        throw ConfigError(at(p, "n_paths") + ": must be at least 1");
    }
    if (!(c.dt > 0.0)) {
        throw ConfigError(at(p, "dt") + ": must be positive");
    }
}

inline void parse_reward(const json& j, Document& doc) {
    const std::string p = "reward";
    allow_keys(j, p, {"t_nd", "z_min", "z_max", "resolution"});
    auto& r = doc.reward;
    r.t_nd = number_or(j, p, "t_nd", r.t_nd);
    r.z_min = number_or(j, p, "z_min", r.z_min);
    r.z_max = number_or(j, p, "z_max", r.z_max);
    if (j.contains("resolution")) {
        r.resolution = count(j.at("resolution"), at(p, "resolution"));
    }
    if (!(r.t_nd >= 0.0)) {
        throw ConfigError(at(p, "t_nd") + ": must be nonnegative");
    }
    if (!(r.z_min > 0.0)) {
        throw ConfigError(at(p, "z_min") + ": must be positive");
    }
    if (!(r.z_max > r.z_min)) {
        throw ConfigError(at(p, "z_max") + ": must exceed reward.z_min");
    }
    if (r.resolution < 3) {
        throw ConfigError(at(p, "resolution") + ": must be at least 3");
    }
}

inline void parse_analysis(const json& j, Document& doc) {
    const std::string p = "analysis";
    allow_keys(j, p, {"grid_size", "pieces", "transform", "time_grid"});
    auto& a = doc.analysis;
    if (j.contains("grid_size")) {
        a.grid_size = count(j.at("grid_size"), at(p, "grid_size"));
    }
    if (j.contains("pieces")) {
        a.pieces = count(j.at("pieces"), at(p, "pieces"));
    }
    if (j.contains("transform")) {
        const json& t = j.at("transform");
        const std::string v = t.is_string() ? t.get<std::string>() : "";
        if (v == "scaled") {
            a.transform = OuTransform::ScaledEvidence;
        } else if (v == "centered") {
            a.transform = OuTransform::CenteredThresholds;
        } else {
            throw ConfigError(at(p, "transform") + ": expected \"scaled\" or \"centered\"");
        }
    }
    if (j.contains("time_grid")) {
        a.time_grid = grid(j.at("time_grid"), at(p, "time_grid"));
        for (std::size_t i = 0; i < a.time_grid.size(); ++i) {
            if (!(a.time_grid[i] > 0.0) || (i > 0 && !(a.time_grid[i] > a.time_grid[i - 1]))) {
                throw ConfigError(at(p, "time_grid") + ": must be positive and strictly increasing");
            }
        }
    }
    if (a.grid_size < 2) {
        throw ConfigError(at(p, "grid_size") + ": must be at least 2");
    }
    if (a.pieces < 1) {
        throw ConfigError(at(p, "pieces") + ": must be at least 1");
    }
}

inline void parse_compare(const json& j, Document& doc) {
    const std::string p = "compare";
    allow_keys(j, p, {"ks_coefficient", "cdf_points"});
    auto& c = doc.compare;
    c.ks_coefficient = number_or(j, p, "ks_coefficient", c.ks_coefficient);
    if (j.contains("cdf_points")) {
        c.cdf_points = count(j.at("cdf_points"), at(p, "cdf_points"));
    }
    if (!(c.ks_coefficient > 0.0)) {
        throw ConfigError(at(p, "ks_coefficient") + ": must be positive");
    }
    if (c.cdf_points < 2) {
        throw ConfigError(at(p, "cdf_points") + ": must be at least 2");
    }
}

inline void parse_surface(const json& j, Document& doc) {
    const std::string p = "surface";
    allow_keys(j, p, {"a1", "t1", "a2", "sigma", "x0", "t_nd", "workers"});
    SurfaceSection s;
    s.a1 = grid(required(j, p, "a1"), at(p, "a1"));
    s.t1 = grid(required(j, p, "t1"), at(p, "t1"));
    for (std::size_t i = 0; i < s.t1.size(); ++i) {
        if (s.t1[i] < 0.0) {
            throw ConfigError(item(at(p, "t1"), i) + ": must be nonnegative");
        }
    }
    s.fixed.a2 = number_or(j, p, "a2", s.fixed.a2);
    s.fixed.sigma = number_or(j, p, "sigma", s.fixed.sigma);
    s.fixed.x0 = number_or(j, p, "x0", s.fixed.x0);
    s.fixed.t_nd = number_or(j, p, "t_nd", doc.reward.t_nd);
    if (j.contains("workers")) {
        s.workers = static_cast<unsigned>(count(j.at("workers"), at(p, "workers")));
    }
    if (!(s.fixed.sigma > 0.0)) {
        throw ConfigError(at(p, "sigma") + ": must be positive");
    }
    if (!(s.fixed.t_nd >= 0.0)) {
        throw ConfigError(at(p, "t_nd") + ": must be nonnegative");
    }
    doc.surface = s;
}

inline void parse_output(const json& j, Document& doc) {
    const std::string p = "output";
    allow_keys(j, p, {"directory", "formats"});
    if (j.contains("directory")) {
        if (!j.at("directory").is_string()) {
            throw ConfigError(at(p, "directory") + ": expected a string");
        }
        doc.output.directory = j.at("directory").get<std::string>();
    }
    if (j.contains("formats")) {
        const json& f = j.at("formats");
        if (!f.is_array() || f.empty()) {
            throw ConfigError(at(p, "formats") + ": expected a nonempty array");
        }
        doc.output.csv = doc.output.json = false;
        for (std::size_t i = 0; i < f.size(); ++i) {
            const std::string v = f[i].is_string() ? f[i].get<std::string>() : "";
            if (v == "csv") {
                doc.output.csv = true;
            } else if (v == "json") {
                doc.output.json = true;
            } else {
                throw ConfigError(item(at(p, "formats"), i) + ": expected \"csv\" or \"json\"");
            }
        }
    }
}

} // namespace detail

/// Validates and converts a configuration document. Thresholds may be left
/// out of the stages only when they are set by the caller (reward sweeps).
inline Document parse(const json& j, bool thresholds_required = true) {
    detail::allow_keys(j, "", {"model", "simulation", "reward", "analysis", "compare", "surface", "output"});
    Document doc;
    if (j.contains("reward")) {
        detail::parse_reward(j.at("reward"), doc);
    }
    if (j.contains("model")) {
        detail::parse_model(j.at("model"), doc, thresholds_required);
    }
    if (j.contains("simulation")) {
        detail::parse_simulation(j.at("simulation"), doc);
    }
    if (j.contains("analysis")) {
        detail::parse_analysis(j.at("analysis"), doc);
    }
    if (j.contains("compare")) {
        detail::parse_compare(j.at("compare"), doc);
    }
    if (j.contains("surface")) {
        detail::parse_surface(j.at("surface"), doc);
    }
    if (j.contains("output")) {
        detail::parse_output(j.at("output"), doc);
    }
    return doc;
}

inline json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(path + ": cannot open");
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

/// The model with leaks dropped; throws if any stage has a nonzero leak.
inline ModelSpec leak_free_model(const Document& doc) {
    for (std::size_t i = 0; i < doc.model.stages.size(); ++i) {
        if (doc.model.stages[i].leak != 0.0) {
            throw ConfigError("model.stages[" + std::to_string(i) + "].leak: nonzero leak needs the ou command");
        }
    }
    return doc.model.without_leak();
}

} // namespace msddm::config
