#pragma once

// Whole-process first-passage statistics of a multistage drift diffusion
// model: the stage recursion, CDFs with instantaneous-absorption atoms, and
// the two-stage closed form used as an independent cross-check.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "msddm/conditioned_density.hpp"
#include "msddm/core_ddm.hpp"
#include "msddm/errors.hpp"
#include "msddm/stage.hpp"

namespace msddm {

/// Initial evidence plus an ordered list of stages. Stage i runs from
/// stages[i].start_time to stages[i+1].start_time; the last stage has no
/// deadline. The last stage may have crossed thresholds (upper <= lower),
/// meaning everything still undecided is absorbed when it starts.
struct ModelSpec {
    double x0 = 0.0;
    std::vector<StageTheta> stages;

    double stage_end(std::size_t i) const {
        return i + 1 < stages.size() ? stages[i + 1].start_time : kInfiniteTime;
    }

    bool collapsed(std::size_t i) const { return !(stages[i].lower < stages[i].upper); }

    void validate() const {
        if (stages.empty()) {
            throw DomainError("model needs at least one stage");
        }
        if (!(stages.front().start_time >= 0.0)) {
            throw DomainError("stages[0].start_time must be nonnegative");
        }
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const auto& st = stages[i];
            const std::string at = "stages[" + std::to_string(i) + "]";
            if (!(st.diffusion > 0.0) || !std::isfinite(st.diffusion)) {
                throw DomainError(at + ".diffusion must be positive");
            }
            if (!std::isfinite(st.drift) || !std::isfinite(st.upper) || !std::isfinite(st.lower)) {
                throw DomainError(at + " has non-finite parameters");
            }
            if (i > 0 && !(st.start_time > stages[i - 1].start_time)) {
                throw DomainError(at + ".start_time must exceed the previous stage's start time");
            }
            if (collapsed(i) && (i == 0 || i + 1 != stages.size())) {
                throw DomainError(at + ": crossed thresholds are only allowed in the last stage");
            }
        }
        if (!(stages[0].lower < x0 && x0 < stages[0].upper)) {
            throw DomainError("x0 must lie strictly between the first stage's thresholds");
        }
    }
};

/// Single-stage model with symmetric thresholds.
inline ModelSpec pure_ddm(double x0, double drift, double diffusion, double z) {
    return ModelSpec{x0, {StageTheta::symmetric(drift, diffusion, z, 0.0)}};
}

/// Probability mass absorbed instantly at a stage boundary.
struct Atom {
    double time;
    double mass;
    Boundary boundary;
};

/// Piecewise-linear CDF samples. A jump at time t appears as two consecutive
/// samples with equal time: the left limit, then the value at t.
struct SampledCdf {
    std::vector<double> t;
    std::vector<double> value;

    void push(double time, double v) {
        t.push_back(time);
        value.push_back(v);
    }

    /// Right-continuous evaluation; 0 before the first sample, last value after.
    double operator()(double x) const {
        if (t.empty() || x < t.front()) {
            return 0.0;
        }
        auto it = std::upper_bound(t.begin(), t.end(), x);
        const auto i = static_cast<std::size_t>(it - t.begin()) - 1;
        if (i + 1 >= t.size()) {
            return value.back();
        }
        const double f = (x - t[i]) / (t[i + 1] - t[i]);
        return value[i] + f * (value[i + 1] - value[i]);
    }

    /// Left limit F(x-).
    double left_limit(double x) const {
        if (t.empty() || x <= t.front()) {
            return 0.0;
        }
        auto it = std::lower_bound(t.begin(), t.end(), x);
        const auto i = static_cast<std::size_t>(it - t.begin());
        if (i >= t.size()) {
            return value.back();
        }
        const double f = (x - t[i - 1]) / (t[i] - t[i - 1]);
        return value[i - 1] + f * (value[i] - value[i - 1]);
    }
};

struct FptResult {
    double overall_er = undefined(); ///< P(lower threshold)
    double p_upper = undefined();
    double p_lower = undefined();
    double overall_mdt = undefined();
    double cond_mdt_upper = undefined();
    double cond_mdt_lower = undefined();
    SampledCdf cdf;
    SampledCdf cond_cdf_upper;
    SampledCdf cond_cdf_lower;
    std::vector<Atom> atoms;
    std::vector<StageMetrics> per_stage;
};

struct AnalyzeOptions {
    std::size_t grid_size = kDefaultGridSize;
    std::vector<double> time_grid; ///< empty: default grid
    bool compute_cdf = true;
};

namespace detail {

inline double total_probability(const std::vector<StageMetrics>& ms, Boundary b) {
    double p = 0.0;
    for (const auto& m : ms) {
        p += m.entry_probability * (b == Boundary::Upper ? m.p_upper : m.p_lower);
        p += b == Boundary::Upper ? m.atom_upper : m.atom_lower;
    }
    return p;
}

inline double total_mean_dt(const std::vector<StageMetrics>& ms) {
    double acc = 0.0;
    for (const auto& m : ms) {
        if (m.entry_probability > 0.0 && m.p_decide > 0.0) {
            acc += m.entry_probability * m.p_decide * m.mdt_i;
        }
        acc += (m.atom_upper + m.atom_lower) * m.start_time;
    }
    return acc;
}

inline double total_conditional_mean_dt(const std::vector<StageMetrics>& ms, Boundary b) {
    double acc = 0.0;
    for (const auto& m : ms) {
        const double p = b == Boundary::Upper ? m.p_upper : m.p_lower;
        const double c = b == Boundary::Upper ? m.cond_mdt_upper : m.cond_mdt_lower;
        if (m.entry_probability > 0.0 && p > 0.0) {
            acc += m.entry_probability * p * c;
        }
        acc += (b == Boundary::Upper ? m.atom_upper : m.atom_lower) * m.start_time;
    }
    const double p = total_probability(ms, b);
    return p > 0.0 ? acc / p : undefined();
}

/// Log-spaced grid in t - t0 from 1e-3 to the first doubling of the horizon
/// past t_last at which cdf reaches 1 - 1e-4, plus the given extra times.
template <class Cdf>
std::vector<double> default_time_grid(const Cdf& cdf, double t0, double t_last, const std::vector<double>& extra,
                                      std::size_t points) {
    double span = std::max(1.0, t_last - t0);
    double horizon = t_last + span;
    if (cdf(t_last) >= 1.0 - 1e-4) {
        horizon = std::max(t_last, t0 + 2e-3);
    } else {
        for (int it = 0; it < 60 && cdf(horizon) < 1.0 - 1e-4; ++it) {
            span *= 2.0;
            horizon = t_last + span;
        }
    }
    std::vector<double> grid;
    const double lo = 1e-3;
    const double hi = horizon - t0;
    for (std::size_t j = 0; j < points; ++j) {
        const double f = static_cast<double>(j) / static_cast<double>(points - 1);
        grid.push_back(t0 + lo * std::pow(hi / lo, f));
    }
    for (double e : extra) {
        if (e > 0.0) {
            grid.push_back(e);
        }
    }
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

inline void push_cdf_sample(FptResult& r, double t, double fu, double fl) {
    r.cdf.push(t, std::clamp(fu + fl, 0.0, 1.0));
    r.cond_cdf_upper.push(t, r.p_upper > 0.0 ? std::clamp(fu / r.p_upper, 0.0, 1.0) : undefined());
    r.cond_cdf_lower.push(t, r.p_lower > 0.0 ? std::clamp(fl / r.p_lower, 0.0, 1.0) : undefined());
}

/// Fills the scalar fields of r from per-stage metrics and samples the CDFs
/// of sol (anything with joint_cdf(t, b)) on grid plus every atom time.
template <class Solution>
void assemble_result(FptResult& r, const Solution& sol, const std::vector<double>& grid, bool compute_cdf) {
    r.p_upper = total_probability(r.per_stage, Boundary::Upper);
    r.p_lower = total_probability(r.per_stage, Boundary::Lower);
    r.overall_er = r.p_lower;
    r.overall_mdt = total_mean_dt(r.per_stage);
    r.cond_mdt_upper = total_conditional_mean_dt(r.per_stage, Boundary::Upper);
    r.cond_mdt_lower = total_conditional_mean_dt(r.per_stage, Boundary::Lower);
    if (!compute_cdf) {
        return;
    }
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!(grid[i] > 0.0) || (i > 0 && !(grid[i] > grid[i - 1]))) {
            throw DomainError("time_grid must be positive and strictly increasing");
        }
    }
    std::vector<double> jump_times;
    for (const auto& a : r.atoms) {
        jump_times.push_back(a.time);
    }
    std::sort(jump_times.begin(), jump_times.end());
    jump_times.erase(std::unique(jump_times.begin(), jump_times.end()), jump_times.end());
    std::vector<double> all = grid;
    all.insert(all.end(), jump_times.begin(), jump_times.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    for (double t : all) {
        const double fu = sol.joint_cdf(t, Boundary::Upper);
        const double fl = sol.joint_cdf(t, Boundary::Lower);
        if (std::binary_search(jump_times.begin(), jump_times.end(), t)) {
            double du = 0.0, dl = 0.0;
            for (const auto& a : r.atoms) {
                if (a.time == t) {
                    (a.boundary == Boundary::Upper ? du : dl) += a.mass;
                }
            }
            push_cdf_sample(r, t, fu - du, fl - dl);
        }
        push_cdf_sample(r, t, fu, fl);
    }
}

} // namespace detail

/// The stage recursion for one model, kept so that CDFs and densities can be
/// evaluated at arbitrary times afterwards.
class MultistageSolution {
public:
    MultistageSolution(const ModelSpec& spec, std::size_t grid_size = kDefaultGridSize) : spec_(spec) {
        spec_.validate();
        if (grid_size < 2) {
            throw DomainError("grid_size must be at least 2");
        }
        run(grid_size);
    }

    const ModelSpec& spec() const noexcept { return spec_; }
    const std::vector<StageMetrics>& per_stage() const noexcept { return metrics_; }
    const std::vector<Atom>& atoms() const noexcept { return atoms_; }
    /// Density entering stage i (after any threshold change); empty for a
    /// collapsed stage.
    const std::optional<ConditionedDensity>& entering_density(std::size_t i) const { return entering_[i]; }

    double probability(Boundary b) const { return detail::total_probability(metrics_, b); }
    double error_rate() const { return probability(Boundary::Lower); }
    double mean_decision_time() const { return detail::total_mean_dt(metrics_); }
    double conditional_mean_dt(Boundary b) const { return detail::total_conditional_mean_dt(metrics_, b); }

    /// P(tau <= t), right-continuous.
    double cdf(double t) const { return accumulate(t, std::nullopt); }

    /// P(tau <= t, x(tau) = b), right-continuous.
    double joint_cdf(double t, Boundary b) const { return accumulate(t, b); }

    /// Density of the continuous part of the first-passage time; at a stage
    /// start it is the limit from the earlier stage.
    double density(double t) const {
        const std::size_t k = stage_ending_at(t);
        if (k == kNone || !entering_[k] || !(t > spec_.stages[k].start_time)) {
            return 0.0;
        }
        return metrics_[k].entry_probability * stage_fpt_density(t, *entering_[k], spec_.stages[k]);
    }

    double joint_density(double t, Boundary b) const {
        const std::size_t k = stage_ending_at(t);
        if (k == kNone || !entering_[k] || !(t > spec_.stages[k].start_time)) {
            return 0.0;
        }
        return metrics_[k].entry_probability * stage_joint_fpt_density(t, *entering_[k], spec_.stages[k], b);
    }

    /// 512 points log-spaced in t - t0 from 1e-3 to the first doubling of the
    /// horizon at which the CDF reaches 1 - 1e-4, plus every stage start.
    std::vector<double> default_time_grid(std::size_t points = 512) const {
        std::vector<double> starts;
        for (const auto& st : spec_.stages) {
            starts.push_back(st.start_time);
        }
        return detail::default_time_grid([this](double t) { return cdf(t); }, spec_.stages.front().start_time,
                                         spec_.stages.back().start_time, starts, points);
    }

    FptResult result(const AnalyzeOptions& opt) const {
        FptResult r;
        r.per_stage = metrics_;
        r.atoms = atoms_;
        std::vector<double> grid;
        if (opt.compute_cdf) {
            grid = opt.time_grid.empty() ? default_time_grid() : opt.time_grid;
        }
        detail::assemble_result(r, *this, grid, opt.compute_cdf);
        return r;
    }

private:
    static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

    std::size_t stage_at(double t) const {
        if (t < spec_.stages.front().start_time) {
            return kNone;
        }
        std::size_t k = 0;
        while (k + 1 < spec_.stages.size() && t >= spec_.stages[k + 1].start_time) {
            ++k;
        }
        return k;
    }

    /// Stage whose interval (start, end] contains t.
    std::size_t stage_ending_at(double t) const {
        std::size_t k = stage_at(t);
        if (k != kNone && k > 0 && t == spec_.stages[k].start_time) {
            --k;
        }
        return k;
    }

    double accumulate(double t, std::optional<Boundary> b) const {
        const std::size_t k = stage_at(t);
        if (k == kNone) {
            return 0.0;
        }
        double acc = 0.0;
        auto decided = [&](const StageMetrics& m) {
            if (!b) {
                return m.p_decide;
            }
            return *b == Boundary::Upper ? m.p_upper : m.p_lower;
        };
        auto atom = [&](const StageMetrics& m) {
            if (!b) {
                return m.atom_upper + m.atom_lower;
            }
            return *b == Boundary::Upper ? m.atom_upper : m.atom_lower;
        };
        for (std::size_t j = 0; j < k; ++j) {
            acc += atom(metrics_[j]) + metrics_[j].entry_probability * decided(metrics_[j]);
        }
        acc += atom(metrics_[k]);
        const auto& m = metrics_[k];
        if (entering_[k] && m.entry_probability > 0.0) {
            const auto& th = spec_.stages[k];
            if (!b) {
                acc += m.entry_probability * (1.0 - stage_survival_at(t, *entering_[k], th));
            } else {
                acc += m.entry_probability * stage_joint_cdf(t, *entering_[k], th, *b);
            }
        }
        return std::min(acc, 1.0);
    }

    void run(std::size_t grid_size) {
        const auto& st = spec_.stages;
        std::optional<ConditionedDensity> alive =
            ConditionedDensity::point_mass(spec_.x0, st[0].lower, st[0].upper, 1.0);
        double log_alive = 0.0; // log P(alive) at the current stage boundary
        for (std::size_t i = 0; i < st.size(); ++i) {
            const auto& th = st[i];
            const double t_end = spec_.stage_end(i);
            StageMetrics m;
            m.start_time = th.start_time;
            m.end_time = t_end;
            const double alive_mass = std::exp(log_alive);
            if (spec_.collapsed(i)) {
                const auto [up, lo] = absorb_all(*alive, th.lower, th.upper);
                m.collapsed = true;
                m.entry_probability = 0.0;
                m.stage_survival = 0.0;
                m.p_decide = 0.0;
                m.atom_upper = alive_mass * up;
                m.atom_lower = alive_mass * lo;
                record_atoms(m);
                metrics_.push_back(m);
                entering_.emplace_back(std::nullopt);
                break;
            }
            ConditionedDensity in = *alive;
            if (i > 0) {
                auto change = apply_threshold_change(*alive, th.lower, th.upper, grid_size);
                m.atom_upper = alive_mass * change.atom_upper;
                m.atom_lower = alive_mass * change.atom_lower;
                log_alive += std::log1p(-(change.atom_upper + change.atom_lower));
                in = std::move(change.density_out);
            }
            record_atoms(m);
            const double entry = std::exp(log_alive);
            in.set_survival_prob(entry);
            StageMetrics sm;
            if (std::isfinite(t_end)) {
                auto prop = propagate_stage(in, th, t_end - th.start_time, grid_size);
                sm = stage_metrics(in, &prop.density_out, prop.stage_survival, th, th.start_time, t_end);
                log_alive += std::log(prop.stage_survival);
                alive = std::move(prop.density_out);
            } else {
                sm = stage_metrics(in, nullptr, 0.0, th, th.start_time, t_end);
                alive.reset();
            }
            sm.entry_probability = entry;
            sm.atom_upper = m.atom_upper;
            sm.atom_lower = m.atom_lower;
            metrics_.push_back(sm);
            entering_.emplace_back(std::move(in));
        }
    }

    void record_atoms(const StageMetrics& m) {
        if (m.atom_upper > 0.0) {
            atoms_.push_back(Atom{m.start_time, m.atom_upper, Boundary::Upper});
        }
        if (m.atom_lower > 0.0) {
            atoms_.push_back(Atom{m.start_time, m.atom_lower, Boundary::Lower});
        }
    }

    ModelSpec spec_;
    std::vector<StageMetrics> metrics_;
    std::vector<std::optional<ConditionedDensity>> entering_;
    std::vector<Atom> atoms_;
};

/// Full analysis: recursion over stages, then the aggregated metrics and
/// sampled CDFs.
inline FptResult analyze(const ModelSpec& spec, const AnalyzeOptions& opt = {}) {
    const MultistageSolution sol(spec, opt.grid_size);
    return sol.result(opt);
}

inline FptResult analyze(const ModelSpec& spec, std::size_t grid_size, const std::vector<double>& time_grid) {
    AnalyzeOptions opt;
    opt.grid_size = grid_size;
    opt.time_grid = time_grid;
    return analyze(spec, opt);
}

/// Error rate and mean decision time of a two-stage model with shared
/// symmetric thresholds, evaluated directly from the two-stage expressions.
/// The distribution of x(t1) on survival is integrated with adaptive
/// Gauss-Kronrod quadrature, independently of the stage grid machinery.
struct TwoStageMetrics {
    double er;
    double mdt;
};

inline TwoStageMetrics two_stage_closed_form(double x0, const StageTheta& theta1, const StageTheta& theta2,
                                             double t1) {
    theta1.validate();
    theta2.validate();
    if (!(t1 > 0.0)) {
        throw DomainError("two_stage_closed_form: t1 must be positive");
    }
    const double z = theta1.upper;
    if (std::abs(theta1.lower + z) > 1e-14 || theta2.upper != z || theta2.lower != theta1.lower) {
        throw DomainError("two_stage_closed_form: both stages need the same symmetric thresholds");
    }
    if (!(-z < x0 && x0 < z)) {
        throw DomainError("two_stage_closed_form: x0 outside the thresholds");
    }
    using Quad = boost::math::quadrature::gauss_kronrod<double, 61>;
    auto g = [&](double x) { return survival_joint_density(x, t1, x0, theta1); };
    auto integrate = [&](auto&& h) {
        return Quad::integrate([&](double x) { return g(x) * h(x); }, -z, z, 12, 1e-13);
    };
    const double S1 = integrate([](double) { return 1.0; });
    const double D1 = 1.0 - S1;
    const double m1 = integrate([](double x) { return x; }) / S1;
    const double m2 = integrate([](double x) { return x * x; }) / S1;
    const double s1 = theta1.snr();
    const double s2 = theta2.snr();
    const bool flat1 = std::abs(s1 * z) < detail::kDegenerateSnr;
    const bool flat2 = std::abs(s2 * z) < detail::kDegenerateSnr;

    double er1, er2, part1, part2;
    if (flat1) {
        er1 = (z * D1 + m1 * S1 - x0) / (2.0 * z * D1);
        part1 = (z * z * D1 + m2 * S1 - x0 * x0) / (theta1.diffusion * theta1.diffusion) - t1 * S1;
    } else {
        const double e1 = integrate([&](double x) { return std::exp(-2.0 * s1 * x); }) / S1;
        er1 = (std::exp(-2.0 * s1 * x0) - e1 * S1 - std::exp(-2.0 * s1 * z) * D1) /
              ((std::exp(2.0 * s1 * z) - std::exp(-2.0 * s1 * z)) * D1);
        part1 = ((1.0 - 2.0 * er1) * z * D1 - x0 + m1 * S1) / theta1.drift - t1 * S1;
    }
    if (flat2) {
        er2 = (z - m1) / (2.0 * z);
        part2 = S1 * (t1 + (z * z - m2) / (theta2.diffusion * theta2.diffusion));
    } else {
        const double e2 = integrate([&](double x) { return std::exp(-2.0 * s2 * x); }) / S1;
        er2 = (e2 - std::exp(-2.0 * s2 * z)) / (std::exp(2.0 * s2 * z) - std::exp(-2.0 * s2 * z));
        part2 = S1 * (t1 + ((1.0 - 2.0 * er2) * z - m1) / theta2.drift);
    }
    return TwoStageMetrics{er1 * D1 + er2 * S1, part1 + part2};
}

} // namespace msddm
