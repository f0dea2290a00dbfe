// Command-line front end: metrics, simulate, compare, reward, surface, ou.
//
// Exit codes: 0 success, 1 computation/domain error, 2 configuration error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msddm/config.hpp"
#include "msddm/msddm.hpp"

namespace {

using msddm::config::ConfigError;
using msddm::config::Document;
using json = nlohmann::json;
using msddm::format_double;

struct Flags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> grid;
    std::optional<std::size_t> pieces;
    std::optional<unsigned> workers;
};

void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("cannot write " + p.string());
    }
    os << text;
}

json number(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

class Output {
public:
    Output(const Document& doc, const Flags& f) : dir_(f.out.empty() ? doc.output.directory : f.out), doc_(doc) {
        std::filesystem::create_directories(dir_);
    }

    void csv(const std::string& name, const std::string& text) const {
        if (doc_.output.csv) {
            write_file(dir_ / name, text);
        }
    }

    void json_doc(const std::string& name, const json& j) const {
        if (doc_.output.json) {
            write_file(dir_ / name, j.dump(2) + "\n");
        }
    }

private:
    std::filesystem::path dir_;
    const Document& doc_;
};

Document load(const Flags& f, bool thresholds_required, bool needs_model = true) {
    Document doc = msddm::config::parse(msddm::config::read_json(f.config), thresholds_required);
    if (f.seed) {
        doc.simulation.seed = *f.seed;
    }
    if (f.grid) {
        if (*f.grid < 2) {
            throw ConfigError("--grid: must be at least 2");
        }
        doc.analysis.grid_size = *f.grid;
        doc.reward.grid_size = *f.grid;
    }
    if (f.pieces) {
        if (*f.pieces < 1) {
            throw ConfigError("--pieces: must be at least 1");
        }
        doc.analysis.pieces = *f.pieces;
    }
    if (f.workers) {
        doc.simulation.workers = *f.workers;
        if (doc.surface) {
            doc.surface->workers = std::max(1u, *f.workers);
        }
    }
    if (needs_model && doc.model.stages.empty()) {
        throw ConfigError("model: required");
    }
    return doc;
}

json header(const std::string& command, const Document& doc) {
    json h;
    h["command"] = command;
    h["x0"] = doc.model.x0;
    h["stage_count"] = doc.model.stages.size();
    if (doc.random_switch_times) {
        h["random_switch_times"] = {{"seed", doc.random_switch_times->seed},
                                    {"low", doc.random_switch_times->low},
                                    {"high", doc.random_switch_times->high}};
        h["switch_times"] = doc.switch_times;
    }
    return h;
}

json stage_json(const msddm::StageMetrics& m) {
    return json{{"start_time", m.start_time},
                {"end_time", number(m.end_time)},
                {"entry_probability", number(m.entry_probability)},
                {"stage_survival", number(m.stage_survival)},
                {"p_decide", number(m.p_decide)},
                {"p_upper", number(m.p_upper)},
                {"p_lower", number(m.p_lower)},
                {"er", number(m.er_i)},
                {"mdt", number(m.mdt_i)},
                {"cond_mdt_upper", number(m.cond_mdt_upper)},
                {"cond_mdt_lower", number(m.cond_mdt_lower)},
                {"atom_upper", number(m.atom_upper)},
                {"atom_lower", number(m.atom_lower)},
                {"collapsed", m.collapsed}};
}

json result_json(const std::string& command, const Document& doc, const msddm::FptResult& r) {
    json j;
    j["header"] = header(command, doc);
    j["overall_er"] = number(r.overall_er);
    j["p_upper"] = number(r.p_upper);
    j["p_lower"] = number(r.p_lower);
    j["overall_mdt"] = number(r.overall_mdt);
    j["cond_mdt_upper"] = number(r.cond_mdt_upper);
    j["cond_mdt_lower"] = number(r.cond_mdt_lower);
    j["atoms"] = json::array();
    for (const auto& a : r.atoms) {
        j["atoms"].push_back({{"time", a.time}, {"mass", a.mass}, {"boundary", msddm::to_string(a.boundary)}});
    }
    j["per_stage"] = json::array();
    for (const auto& m : r.per_stage) {
        j["per_stage"].push_back(stage_json(m));
    }
    return j;
}

/// t, cdf, cdf_upper, cdf_lower, atom; the second of two rows sharing a time
/// carries the jump and is flagged.
std::string cdf_csv(const msddm::FptResult& r) {
    std::ostringstream os;
    os << "t,cdf,cdf_upper,cdf_lower,atom\n";
    for (std::size_t i = 0; i < r.cdf.t.size(); ++i) {
        const bool jump = i > 0 && r.cdf.t[i] == r.cdf.t[i - 1];
        os << format_double(r.cdf.t[i]) << ',' << format_double(r.cdf.value[i]) << ','
           << format_double(r.cond_cdf_upper.value[i]) << ',' << format_double(r.cond_cdf_lower.value[i]) << ','
           << (jump ? 1 : 0) << '\n';
    }
    return os.str();
}

msddm::OuOptions ou_options(const Document& doc) {
    msddm::OuOptions o;
    o.pieces = doc.analysis.pieces;
    o.grid_size = doc.analysis.grid_size;
    o.time_grid = doc.analysis.time_grid;
    o.transform = doc.analysis.transform;
    return o;
}

int cmd_metrics(const Flags& f) {
    const Document doc = load(f, true);
    const msddm::ModelSpec spec = msddm::config::leak_free_model(doc);
    const msddm::MultistageSolution sol(spec, doc.analysis.grid_size);
    msddm::AnalyzeOptions opt;
    opt.grid_size = doc.analysis.grid_size;
    opt.time_grid = doc.analysis.time_grid;
    const auto r = sol.result(opt);
    const Output out(doc, f);
    out.json_doc("result.json", result_json("metrics", doc, r));
    out.csv("cdf.csv", cdf_csv(r));
    std::printf("ER %s  mDT %s\n", format_double(r.overall_er).c_str(), format_double(r.overall_mdt).c_str());
    return 0;
}

int cmd_ou(const Flags& f) {
    const Document doc = load(f, true);
    const msddm::OuSolution sol(doc.model, ou_options(doc));
    const auto r = sol.result();
    const Output out(doc, f);
    json j = result_json("ou", doc, r);
    j["pieces"] = doc.analysis.pieces;
    j["piece_count"] = sol.piece_count();
    out.json_doc("result.json", j);
    out.csv("cdf.csv", cdf_csv(r));
    std::printf("ER %s  mDT %s\n", format_double(r.overall_er).c_str(), format_double(r.overall_mdt).c_str());
    return 0;
}

json estimate(const msddm::Estimate& e) {
    return json{{"value", number(e.value)}, {"se", number(e.se)}};
}

json empirical_json(const msddm::EmpiricalMetrics& m) {
    return json{{"n", m.n},
                {"n_upper", m.n_upper},
                {"n_lower", m.n_lower},
                {"n_censored", m.n_censored},
                {"censored_fraction", m.censored_fraction},
                {"er", estimate(m.er)},
                {"mdt", estimate(m.mdt)},
                {"mdt_upper", estimate(m.mdt_upper)},
                {"mdt_lower", estimate(m.mdt_lower)}};
}

json simulation_json(const msddm::SimConfig& c) {
    return json{{"n_paths", c.n_paths}, {"dt", c.dt}, {"seed", c.seed}, {"max_time", c.max_time}, {"bridge", c.bridge}};
}

int cmd_simulate(const Flags& f) {
    const Document doc = load(f, true);
    const auto outcomes = msddm::simulate(doc.model, doc.simulation);
    const auto m = msddm::empirical_metrics(outcomes);
    const Output out(doc, f);
    std::ostringstream os;
    msddm::write_outcomes_csv(os, outcomes);
    out.csv("outcomes.csv", os.str());
    json j;
    j["header"] = header("simulate", doc);
    j["simulation"] = simulation_json(doc.simulation);
    j["empirical"] = empirical_json(m);
    out.json_doc("summary.json", j);
    std::printf("ER %s +- %s  mDT %s +- %s  censored %zu\n", format_double(m.er.value).c_str(),
                format_double(m.er.se).c_str(), format_double(m.mdt.value).c_str(), format_double(m.mdt.se).c_str(),
                m.n_censored);
    return 0;
}

/// Log grid of the default layout merged with a uniform grid of `points`
/// over the same horizon, dense enough for KS comparisons.
template <class Cdf>
std::vector<double> compare_grid(const Cdf& cdf, const msddm::OuModelSpec& spec, std::size_t points) {
    std::vector<double> starts;
    for (const auto& s : spec.stages) {
        starts.push_back(s.start_time);
    }
    const double t0 = spec.stages.front().start_time;
    auto grid = msddm::detail::default_time_grid(cdf, t0, spec.stages.back().start_time, starts, 512);
    const double hi = grid.back();
    for (std::size_t k = 1; k <= points; ++k) {
        grid.push_back(t0 + (hi - t0) * static_cast<double>(k) / static_cast<double>(points));
    }
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

json ks_entry(double d, std::size_t n, double coefficient) {
    const double threshold = n > 0 ? coefficient / std::sqrt(static_cast<double>(n)) : msddm::undefined();
    return json{{"ks", d}, {"n", n}, {"threshold", number(threshold)}, {"pass", n > 0 && d < threshold}};
}

json metric_entry(double analytic, const msddm::Estimate& e) {
    const double z = e.se > 0.0 ? (e.value - analytic) / e.se : msddm::undefined();
    return json{{"analytic", number(analytic)}, {"mc", number(e.value)}, {"se", number(e.se)}, {"z_score", number(z)}};
}

int cmd_compare(const Flags& f) {
    const Document doc = load(f, true);
    msddm::FptResult r;
    if (doc.has_leak) {
        const msddm::OuSolution sol(doc.model, ou_options(doc));
        auto o = ou_options(doc);
        o.time_grid = compare_grid([&](double t) { return sol.cdf(t); }, doc.model, doc.compare.cdf_points);
        r = msddm::OuSolution(doc.model, o).result();
    } else {
        const msddm::ModelSpec spec = doc.model.without_leak();
        const msddm::MultistageSolution sol(spec, doc.analysis.grid_size);
        msddm::AnalyzeOptions opt;
        opt.grid_size = doc.analysis.grid_size;
        opt.time_grid = compare_grid([&](double t) { return sol.cdf(t); }, doc.model, doc.compare.cdf_points);
        r = sol.result(opt);
    }
    const auto outcomes = msddm::simulate(doc.model, doc.simulation);
    const auto m = msddm::empirical_metrics(outcomes);
    const double c = doc.compare.ks_coefficient;
    json curves;
    curves["cdf"] = ks_entry(msddm::ks_distance(m.ecdf, r.cdf), m.n, c);
    curves["cdf_upper"] = ks_entry(msddm::ks_distance(m.ecdf_upper, r.cond_cdf_upper), m.n_upper, c);
    curves["cdf_lower"] = ks_entry(msddm::ks_distance(m.ecdf_lower, r.cond_cdf_lower), m.n_lower, c);
    bool pass = true;
    for (const auto& [k, v] : curves.items()) {
        // a boundary nobody reached has no curve to compare
        if (v["n"].get<std::size_t>() > 0) {
            pass = pass && v["pass"].get<bool>();
        }
    }
    json j;
    j["header"] = header("compare", doc);
    j["simulation"] = simulation_json(doc.simulation);
    j["ks_coefficient"] = c;
    j["curves"] = curves;
    j["metrics"] = {{"er", metric_entry(r.overall_er, m.er)},
                    {"mdt", metric_entry(r.overall_mdt, m.mdt)},
                    {"mdt_upper", metric_entry(r.cond_mdt_upper, m.mdt_upper)},
                    {"mdt_lower", metric_entry(r.cond_mdt_lower, m.mdt_lower)}};
    j["censored_fraction"] = m.censored_fraction;
    j["pass"] = pass;
    const Output out(doc, f);
    out.json_doc("compare.json", j);
    out.csv("cdf.csv", cdf_csv(r));
    for (const auto& [k, v] : curves.items()) {
        std::printf("%-10s KS %.6f threshold %.6f %s\n", k.c_str(), v["ks"].get<double>(),
                    v["threshold"].is_null() ? 0.0 : v["threshold"].get<double>(),
                    v["pass"].get<bool>() ? "pass" : "fail");
    }
    return 0;
}

int cmd_reward(const Flags& f) {
    const Document doc = load(f, false);
    const msddm::ModelSpec spec = msddm::config::leak_free_model(doc);
    const auto o = msddm::optimize_threshold(spec, doc.reward);
    std::ostringstream os;
    os << "z,rr\n";
    for (std::size_t k = 0; k < o.z_grid.size(); ++k) {
        os << format_double(o.z_grid[k]) << ',' << format_double(o.rr_grid[k]) << '\n';
    }
    json j;
    j["header"] = header("reward", doc);
    j["reward"] = {{"t_nd", doc.reward.t_nd},
                   {"z_min", doc.reward.z_min},
                   {"z_max", doc.reward.z_max},
                   {"resolution", doc.reward.resolution}};
    j["z_star"] = number(o.z_star);
    j["rr_star"] = number(o.rr_star);
    j["boundary"] = o.boundary;
    j["local_maxima"] = json::array();
    for (const auto& m : o.local_maxima) {
        j["local_maxima"].push_back({{"z", m.z}, {"rr", m.rr}});
    }
    const Output out(doc, f);
    out.csv("rr_curve.csv", os.str());
    out.json_doc("maxima.json", j);
    std::printf("z* %s  RR* %s  local maxima %zu%s\n", format_double(o.z_star).c_str(),
                format_double(o.rr_star).c_str(), o.local_maxima.size(), o.boundary ? "  (boundary)" : "");
    return 0;
}

double median(std::vector<double> v) {
    if (v.empty()) {
        return msddm::undefined();
    }
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

int cmd_surface(const Flags& f) {
    // the surface section defines its own two-stage models
    const Document doc = load(f, false, false);
    if (!doc.surface) {
        throw ConfigError("surface: required by the surface command");
    }
    const auto& s = *doc.surface;
    const auto cells = msddm::threshold_surface(s.a1, s.t1, s.fixed, doc.reward, s.workers);
    std::ostringstream lf, mx;
    lf << "a1,t1,z_star,rr_star,n_local_maxima,boundary,error\n";
    mx << "a1\\t1";
    for (double t : s.t1) {
        mx << ',' << format_double(t);
    }
    mx << '\n';
    json slices = json::array();
    std::size_t failures = 0;
    for (std::size_t i = 0; i < s.a1.size(); ++i) {
        mx << format_double(s.a1[i]);
        std::vector<double> z;
        for (std::size_t k = 0; k < s.t1.size(); ++k) {
            const auto& c = cells[i * s.t1.size() + k];
            std::string err = c.error;
            std::replace(err.begin(), err.end(), ',', ';');
            std::replace(err.begin(), err.end(), '\n', ' ');
            failures += c.error.empty() ? 0 : 1;
            lf << format_double(c.a1) << ',' << format_double(c.t1) << ',' << format_double(c.z_star) << ','
               << format_double(c.rr_star) << ',' << c.n_local_maxima << ',' << (c.boundary ? 1 : 0) << ',' << err
               << '\n';
            mx << ',' << format_double(c.z_star);
            z.push_back(c.z_star);
        }
        mx << '\n';
        // Largest downward step of z*(t1) against the median step size.
        std::vector<double> steps;
        double drop = 0.0;
        double drop_at = msddm::undefined();
        for (std::size_t k = 1; k < z.size(); ++k) {
            const double d = z[k] - z[k - 1];
            if (!std::isfinite(d)) {
                continue;
            }
            steps.push_back(std::abs(d));
            if (-d > drop) {
                drop = -d;
                drop_at = s.t1[k];
            }
        }
        const double med = median(steps);
        slices.push_back({{"a1", s.a1[i]},
                          {"max_drop", drop},
                          {"drop_t1", number(drop_at)},
                          {"median_step", number(med)},
                          {"jump", drop > 0.0 && drop > 10.0 * med}});
    }
    json j;
    j["header"] = header("surface", doc);
    j["fixed"] = {{"a2", s.fixed.a2}, {"sigma", s.fixed.sigma}, {"x0", s.fixed.x0}, {"t_nd", s.fixed.t_nd}};
    j["a1"] = s.a1;
    j["t1"] = s.t1;
    j["failed_cells"] = failures;
    j["slices"] = slices;
    const Output out(doc, f);
    out.csv("surface_long.csv", lf.str());
    out.csv("surface_matrix.csv", mx.str());
    out.json_doc("surface.json", j);
    std::size_t jumps = 0;
    for (const auto& sl : slices) {
        jumps += sl["jump"].get<bool>() ? 1 : 0;
    }
    std::printf("%zu cells, %zu failed, %zu slices with a downward jump\n", cells.size(), failures, jumps);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multistage drift-diffusion first-passage analysis"};
    app.require_subcommand(1);
    Flags flags;
    std::uint64_t seed = 0;
    std::size_t grid = 0, pieces = 0;
    unsigned workers = 0;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "configuration file (JSON)")->required();
        sub->add_option("--out", flags.out, "output directory (overrides output.directory)");
        sub->add_option("--seed", seed, "simulation seed (overrides simulation.seed)");
        sub->add_option("--grid", grid, "density grid size (overrides analysis.grid_size)");
        sub->add_option("--pieces", pieces, "O-U pieces per characteristic time (overrides analysis.pieces)");
        sub->add_option("--workers", workers, "worker threads for simulation and surfaces");
    };
    struct Verb {
        const char* name;
        const char* help;
        int (*run)(const Flags&);
    };
    const Verb verbs[] = {
        {"metrics", "first-passage statistics of a leak-free multistage model", cmd_metrics},
        {"simulate", "Monte-Carlo simulation with outcome dump", cmd_simulate},
        {"compare", "analytic CDFs against simulation (KS report)", cmd_compare},
        {"reward", "reward rate curve and its local maxima", cmd_reward},
        {"surface", "optimal threshold over an (a1, t1) grid", cmd_surface},
        {"ou", "first-passage statistics of a multistage O-U model", cmd_ou},
    };
    std::vector<std::pair<CLI::App*, const Verb*>> subs;
    for (const auto& v : verbs) {
        auto* sub = app.add_subcommand(v.name, v.help);
        add_common(sub);
        subs.emplace_back(sub, &v);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    for (const auto& [sub, verb] : subs) {
        if (!sub->parsed()) {
            continue;
        }
        if (sub->count("--seed")) {
            flags.seed = seed;
        }
        if (sub->count("--grid")) {
            flags.grid = grid;
        }
        if (sub->count("--pieces")) {
            flags.pieces = pieces;
        }
        if (sub->count("--workers")) {
            flags.workers = workers;
        }
        try {
            return verb->run(flags);
        } catch (const ConfigError& e) {
            std::cerr << "config error: " << e.what() << '\n';
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 1;
        }
    }
    return 2;
}
