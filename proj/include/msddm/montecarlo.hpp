#pragma once

// Euler-Maruyama simulation of multistage DDM / O-U paths, empirical
// first-passage metrics, and the Kolmogorov-Smirnov distance used to compare
// them with the analytic CDFs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <boost/random/normal_distribution.hpp>

#include "msddm/aggregate.hpp"
#include "msddm/errors.hpp"
#include "msddm/numerics.hpp"
#include "msddm/ou.hpp"

namespace msddm {

struct SimConfig {
    std::size_t n_paths = 100000;
    double dt = 1e-4;
    std::uint64_t seed = 1;
    double max_time = 100.0;
    unsigned workers = 0; ///< 0: hardware concurrency
    /// Brownian-bridge check for crossings between grid points. Without it
    /// crossings are only seen at step ends and decisions come out late.
    bool bridge = true;

    void validate() const {
        if (!(dt > 0.0) || !std::isfinite(dt)) {
            throw DomainError("simulation.dt must be positive");
        }
        if (n_paths < 1) {
            throw DomainError("simulation.n_paths must be at least 1");
        }
    }
};

struct SimOutcome {
    double decision_time = 0.0;
    Boundary boundary = Boundary::Upper;
    bool censored = false;
};

namespace detail {

struct SimStage {
    double drift, leak, sigma, lower, upper, start, end;
    bool collapsed;
};

inline std::vector<SimStage> sim_stages(const OuModelSpec& spec, double max_time) {
    std::vector<SimStage> out;
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        const auto& s = spec.stages[i];
        out.push_back(SimStage{s.drift, s.leak, s.diffusion, s.lower, s.upper, s.start_time,
                               std::min(spec.stage_end(i), max_time), !(s.lower < s.upper)});
    }
    return out;
}

/// Independent stream for each path, reproducible from (seed, path index).
inline std::mt19937_64 path_engine(std::uint64_t seed, std::uint64_t path) {
    return std::mt19937_64(numerics::splitmix64(seed ^ numerics::splitmix64(path + 0x632BE59BD9B4E019ull)));
}

struct Step {
    bool hit = false;
    Boundary boundary = Boundary::Upper;
    std::uint64_t n = 0;
};

/// Up to `count` Euler steps of size h inside one stage; x is updated in
/// place. A hit reports the index of the step in which it happened.
template <class Engine, class Normal>
Step take_steps(const SimStage& st, double& x, double h, std::uint64_t count, bool bridge, Engine& eng,
                Normal& normal) {
    const double drift_h = st.drift * h;
    const double keep = 1.0 - st.leak * h;
    const double sd = st.sigma * std::sqrt(h);
    // Bridge crossing probability exp(-scale (b - x)(b - xn)); below
    // exp(-40) it is ignored.
    const double reach = 40.0 * st.sigma * st.sigma * h / 2.0;
    const double scale = 40.0 / reach;
    const double up = st.upper, lo = st.lower;
    double cur = x;
    for (std::uint64_t n = 0; n < count; ++n) {
        const double xn = keep * cur + drift_h + sd * normal(eng);
        const double du = up - xn;
        const double dl = xn - lo;
        if (du <= 0.0) {
            return Step{true, Boundary::Upper, n};
        }
        if (dl <= 0.0) {
            return Step{true, Boundary::Lower, n};
        }
        if (bridge) {
            const double eu = (up - cur) * du;
            const double el = (cur - lo) * dl;
            if (eu < reach || el < reach) {
                const double pu = eu < reach ? std::exp(-scale * eu) : 0.0;
                const double pl = el < reach ? std::exp(-scale * el) : 0.0;
                const double u = numerics::unit_interval(eng());
                if (u < pu) {
                    return Step{true, Boundary::Upper, n};
                }
                if (u < pu + pl) {
                    return Step{true, Boundary::Lower, n};
                }
            }
        }
        cur = xn;
    }
    x = cur;
    return Step{};
}

inline SimOutcome simulate_path(const std::vector<SimStage>& stages, double x0, const SimConfig& cfg,
                                std::uint64_t path) {
    auto eng = path_engine(cfg.seed, path);
    boost::random::normal_distribution<double> normal(0.0, 1.0);
    double x = x0;
    for (std::size_t k = 0; k < stages.size(); ++k) {
        const SimStage& st = stages[k];
        if (st.start >= cfg.max_time) {
            break;
        }
        if (k > 0) {
            // Thresholds may move at the switch: anything now outside is
            // absorbed at the switch time.
            if (st.collapsed) {
                const double mid = 0.5 * (st.lower + st.upper);
                return SimOutcome{st.start, x >= mid ? Boundary::Upper : Boundary::Lower, false};
            }
            if (x >= st.upper) {
                return SimOutcome{st.start, Boundary::Upper, false};
            }
            if (x <= st.lower) {
                return SimOutcome{st.start, Boundary::Lower, false};
            }
        }
        const double span = st.end - st.start;
        const auto full = static_cast<std::uint64_t>(std::floor(span / cfg.dt));
        Step step = take_steps(st, x, cfg.dt, full, cfg.bridge, eng, normal);
        if (step.hit) {
            return SimOutcome{st.start + cfg.dt * (static_cast<double>(step.n) + 0.5), step.boundary, false};
        }
        // Partial step up to the stage end, so switches happen on time.
        const double t = st.start + cfg.dt * static_cast<double>(full);
        const double h = st.end - t;
        if (h > 1e-15 * std::max(1.0, std::abs(st.end))) {
            step = take_steps(st, x, h, 1, cfg.bridge, eng, normal);
            if (step.hit) {
                return SimOutcome{t + 0.5 * h, step.boundary, false};
            }
        }
    }
    return SimOutcome{cfg.max_time, Boundary::Upper, true};
}

} // namespace detail

/// Simulates cfg.n_paths paths. Results are indexed by path and do not
/// depend on the number of workers.
inline std::vector<SimOutcome> simulate(const OuModelSpec& spec, const SimConfig& cfg) {
    spec.validate();
    cfg.validate();
    if (!(cfg.max_time > spec.stages.front().start_time)) {
        throw DomainError("simulation.max_time must exceed the first stage start");
    }
    const auto stages = detail::sim_stages(spec, cfg.max_time);
    std::vector<SimOutcome> out(cfg.n_paths);
    unsigned workers = cfg.workers == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.workers;
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, cfg.n_paths));
    auto run = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            out[i] = detail::simulate_path(stages, spec.x0, cfg, i);
        }
    };
    if (workers <= 1) {
        run(0, cfg.n_paths);
        return out;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (cfg.n_paths + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t b = w * chunk;
        const std::size_t e = std::min(cfg.n_paths, b + chunk);
        if (b < e) {
            pool.emplace_back(run, b, e);
        }
    }
    for (auto& th : pool) {
        th.join();
    }
    return out;
}

inline std::vector<SimOutcome> simulate(const ModelSpec& spec, const SimConfig& cfg) {
    OuModelSpec ou{spec.x0, {}};
    for (const auto& s : spec.stages) {
        ou.stages.push_back(OuStage{s.drift, 0.0, s.diffusion, s.upper, s.lower, s.start_time});
    }
    return simulate(ou, cfg);
}

/// Right-continuous empirical CDF: (#samples <= t) / n_total, where n_total
/// may exceed the number of samples (censored paths).
struct Ecdf {
    std::vector<double> samples; ///< sorted
    double n_total = 0.0;

    double operator()(double t) const {
        if (n_total <= 0.0) {
            return 0.0;
        }
        return static_cast<double>(std::upper_bound(samples.begin(), samples.end(), t) - samples.begin()) / n_total;
    }

    double left_limit(double t) const {
        if (n_total <= 0.0) {
            return 0.0;
        }
        return static_cast<double>(std::lower_bound(samples.begin(), samples.end(), t) - samples.begin()) / n_total;
    }
};

inline Ecdf make_ecdf(std::vector<double> samples, double n_total) {
    std::sort(samples.begin(), samples.end());
    return Ecdf{std::move(samples), n_total};
}

struct Estimate {
    double value = undefined();
    double se = undefined();
};

struct EmpiricalMetrics {
    std::size_t n = 0;
    std::size_t n_upper = 0;
    std::size_t n_lower = 0;
    std::size_t n_censored = 0;
    double censored_fraction = 0.0;
    Estimate er; ///< lower among decided
    Estimate mdt;
    Estimate mdt_upper;
    Estimate mdt_lower;
    Ecdf ecdf;       ///< over all paths, tops out at 1 - censored_fraction
    Ecdf ecdf_upper; ///< conditional on the upper threshold
    Ecdf ecdf_lower;
};

namespace detail {

inline Estimate mean_estimate(const std::vector<double>& v) {
    if (v.empty()) {
        return {};
    }
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) {
        ss += (x - mean) * (x - mean);
    }
    const double var = v.size() > 1 ? ss / static_cast<double>(v.size() - 1) : 0.0;
    return Estimate{mean, std::sqrt(var / static_cast<double>(v.size()))};
}

} // namespace detail

inline EmpiricalMetrics empirical_metrics(const std::vector<SimOutcome>& outcomes) {
    EmpiricalMetrics r;
    r.n = outcomes.size();
    std::vector<double> all, up, lo;
    for (const auto& o : outcomes) {
        if (o.censored) {
            ++r.n_censored;
            continue;
        }
        all.push_back(o.decision_time);
        (o.boundary == Boundary::Upper ? up : lo).push_back(o.decision_time);
    }
    r.n_upper = up.size();
    r.n_lower = lo.size();
    r.censored_fraction = r.n > 0 ? static_cast<double>(r.n_censored) / static_cast<double>(r.n) : 0.0;
    const std::size_t decided = up.size() + lo.size();
    if (decided > 0) {
        const double p = static_cast<double>(lo.size()) / static_cast<double>(decided);
        r.er = Estimate{p, std::sqrt(p * (1.0 - p) / static_cast<double>(decided))};
    }
    r.mdt = detail::mean_estimate(all);
    r.mdt_upper = detail::mean_estimate(up);
    r.mdt_lower = detail::mean_estimate(lo);
    r.ecdf = make_ecdf(all, static_cast<double>(r.n));
    r.ecdf_upper = make_ecdf(up, static_cast<double>(up.size()));
    r.ecdf_lower = make_ecdf(lo, static_cast<double>(lo.size()));
    return r;
}

/// sup |ecdf - cdf| checked on both sides of every ecdf jump. cdf needs
/// operator() and left_limit(); between jumps the ecdf is flat and the
/// reference is nondecreasing, so these points attain the supremum.
template <class Cdf>
double ks_distance(const Ecdf& ecdf, const Cdf& cdf) {
    double d = 0.0;
    const auto& s = ecdf.samples;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i + 1] == s[i]) {
            continue;
        }
        const double t = s[i];
        d = std::max(d, std::abs(ecdf(t) - cdf(t)));
        d = std::max(d, std::abs(ecdf.left_limit(t) - cdf.left_limit(t)));
    }
    return d;
}

/// Adapter for a continuous reference CDF given as a plain function.
template <class F>
struct ContinuousCdf {
    F f;
    double operator()(double t) const { return f(t); }
    double left_limit(double t) const { return f(t); }
};

template <class F>
ContinuousCdf<F> continuous_cdf(F f) {
    return ContinuousCdf<F>{std::move(f)};
}

/// "%.17g" formatting shared by every numeric output.
inline std::string format_double(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// path_id,decision_time,boundary,censored with boundary +1/-1 (0 if censored).
inline void write_outcomes_csv(std::ostream& os, const std::vector<SimOutcome>& outcomes) {
    os << "path_id,decision_time,boundary,censored\n";
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        const auto& o = outcomes[i];
        const int b = o.censored ? 0 : (o.boundary == Boundary::Upper ? 1 : -1);
        os << i << ',' << format_double(o.decision_time) << ',' << b << ',' << (o.censored ? 1 : 0) << '\n';
    }
}

} // namespace msddm
