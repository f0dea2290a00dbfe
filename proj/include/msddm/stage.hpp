#pragma once

// One stage of a multistage process: propagation of the conditioned evidence
// density through the stage and the per-stage first-passage metrics.
//
// Per-stage quantities are built from expectations of single-stage closed
// forms over the density entering the stage (X_in) and the density leaving it
// (X_out), using that a path alive at the deadline restarts from X_out:
//
//   P(b, decided)         = E_in[P_b] - S E_out[P_b]
//   E[tau 1(decided)]     = E_in[mDT] - S (E_out[mDT] + duration)
//   E[tau 1(b, decided)]  = E_in[mDT^b] - S (E_out[mDT^b] + duration E_out[P_b])
//
// with S the probability of surviving the stage and times relative to the
// stage start.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "msddm/conditioned_density.hpp"
#include "msddm/core_ddm.hpp"
#include "msddm/errors.hpp"
#include "msddm/numerics.hpp"

namespace msddm {

inline constexpr double kInfiniteTime = std::numeric_limits<double>::infinity();
inline constexpr std::size_t kDefaultGridSize = 512;

/// Per-stage metrics. Probabilities are conditional on entering the stage
/// unless noted; times are absolute.
struct StageMetrics {
    double start_time = 0.0;
    double end_time = kInfiniteTime;
    double entry_probability = 1.0; ///< unconditional P(alive after the stage-start absorption)
    double stage_survival = 0.0;    ///< P(tau_i > t_i | entered)
    double p_decide = 1.0;          ///< 1 - stage_survival
    double p_upper = 0.0;           ///< P(upper, decided in stage | entered)
    double p_lower = 0.0;           ///< P(lower, decided in stage | entered)
    double er_i = undefined();      ///< P(lower | decided in stage)
    double mdt_i = undefined();     ///< E[tau | decided in stage]
    double cond_mdt_upper = undefined();
    double cond_mdt_lower = undefined();
    double hat_mdt_upper = undefined(); ///< (1 - er_i) cond_mdt_upper
    double hat_mdt_lower = undefined(); ///< er_i cond_mdt_lower
    double atom_upper = 0.0;            ///< unconditional mass absorbed at start_time at the upper threshold
    double atom_lower = 0.0;
    bool collapsed = false;             ///< thresholds crossed: everything alive was absorbed at start_time
};

/// Result of pushing a conditioned density through a stage.
struct Propagation {
    ConditionedDensity density_out;
    double stage_survival;
};

/// Expectations of the single-stage closed forms over a density.
struct StageMoments {
    double p_upper = 0.0;
    double p_lower = 0.0;
    double mdt = 0.0;
    double hat_upper = 0.0;
    double hat_lower = 0.0;
};

namespace detail {

inline void require_matching_support(const ConditionedDensity& d, const StageTheta& th, const char* op) {
    const double tol = 1e-12 * std::max(1.0, th.upper - th.lower);
    if (std::abs(d.lower() - th.lower) > tol || std::abs(d.upper() - th.upper) > tol) {
        throw DomainError(std::string(op) + ": density support does not match the stage thresholds");
    }
}

inline std::size_t output_nodes(const ConditionedDensity& in, std::size_t grid_size, double width) {
    std::size_t n = grid_size + 2;
    if (in.is_point_mass()) {
        // Keep at least ~3 nodes per kernel width so the first propagated
        // density is resolved even after very short stages.
        const double want = 3.0 * (in.upper() - in.lower()) / std::max(width, 1e-300) + 1.0;
        n = std::max(n, static_cast<std::size_t>(std::min(want, 65537.0)));
    } else {
        n = std::max(n, in.size());
    }
    return n;
}

/// Unnormalized output values v(x_j) = E_in[g(x_j, duration; Y)] on n nodes
/// spanning [lower, upper] of the stage.
inline std::vector<double> propagate_values(const ConditionedDensity& in, const SurvivalKernel& kernel,
                                            double center, double lower, double upper, std::size_t n) {
    std::vector<double> out(n, 0.0);
    const double h_out = (upper - lower) / static_cast<double>(n - 1);
    const double w = kernel.width();
    const double shift = kernel.drift() * kernel.elapsed();
    if (in.is_point_mass()) {
        const double y = in.point() - center;
        for (std::size_t j = 1; j + 1 < n; ++j) {
            out[j] = kernel(lower + h_out * static_cast<double>(j) - center, y);
        }
        return out;
    }
    // Source grid, refined by interpolation when the kernel is narrower than
    // two source cells.
    const double h_in = in.spacing();
    std::size_t sub = 1;
    if (w < 2.0 * h_in) {
        sub = std::min<std::size_t>(256, static_cast<std::size_t>(std::ceil(2.0 * h_in / w)));
    }
    const std::size_t last = (in.size() - 1) * sub;
    const double h_src = h_in / static_cast<double>(sub);
    std::vector<double> src(last + 1);
    if (sub == 1) {
        std::copy(in.values().begin(), in.values().end(), src.begin());
    } else {
        for (std::size_t m = 0; m <= last; ++m) {
            src[m] = in.value_at(in.lower() + h_src * static_cast<double>(m));
        }
        src[last] = in.values().back();
    }
    const double reach = 12.0 * w + 2.0 * h_src;
    for (std::size_t j = 1; j + 1 < n; ++j) {
        const double x = lower + h_out * static_cast<double>(j);
        const double y_mid = x - shift;
        const double lo = std::max(0.0, std::floor((y_mid - reach - in.lower()) / h_src));
        const double hi = std::min(static_cast<double>(last), std::ceil((y_mid + reach - in.lower()) / h_src));
        if (lo > hi) {
            continue;
        }
        double acc = 0.0;
        for (auto m = static_cast<std::size_t>(lo); m <= static_cast<std::size_t>(hi); ++m) {
            if (src[m] == 0.0) {
                continue;
            }
            const double y = in.lower() + h_src * static_cast<double>(m);
            acc += numerics::gregory_weight(m, last, h_src) * src[m] * kernel(x - center, y - center);
        }
        out[j] = acc;
    }
    return out;
}

} // namespace detail

/// Pushes density_in through a stage of the given duration. The output lives
/// on a fresh uniform grid of at least grid_size interior nodes.
inline Propagation propagate_stage(const ConditionedDensity& density_in, const StageTheta& theta, double duration,
                                   std::size_t grid_size = kDefaultGridSize) {
    theta.validate();
    if (!(duration > 0.0) || !std::isfinite(duration)) {
        throw DomainError("propagate_stage: duration must be positive and finite");
    }
    if (grid_size < 2) {
        throw DomainError("propagate_stage: grid_size must be at least 2");
    }
    detail::require_matching_support(density_in, theta, "propagate_stage");
    const detail::SurvivalKernel kernel(duration, theta.half_width(), theta.drift, theta.diffusion);
    const std::size_t n = detail::output_nodes(density_in, grid_size, kernel.width());
    std::vector<double> values =
        detail::propagate_values(density_in, kernel, theta.center(), theta.lower, theta.upper, n);
    const double h = (theta.upper - theta.lower) / static_cast<double>(n - 1);
    double mass = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        mass += numerics::gregory_weight(j, n - 1, h) * values[j];
    }
    if (mass > 1.0 + 1e-6) {
        throw ConsistencyError("propagate_stage: propagated mass exceeds one");
    }
    if (!(mass > 0.0)) {
        throw DegenerateModelError("propagate_stage: no probability mass survives the stage");
    }
    mass = std::min(mass, 1.0);
    auto out = ConditionedDensity::on_grid(theta.lower, theta.upper, std::move(values),
                                           density_in.survival_prob() * mass);
    return Propagation{std::move(out), mass};
}

/// E[exp(-2 s (X - center))].
inline double exp_moment(const ConditionedDensity& density, double s, double center = 0.0) {
    return density.expect([&](double x) { return std::exp(-2.0 * s * (x - center)); });
}

/// E[X^k].
inline double raw_moment(const ConditionedDensity& density, int k) {
    return density.expect([&](double x) { return std::pow(x, k); });
}

inline StageMoments stage_moments(const ConditionedDensity& density, const StageTheta& theta) {
    StageMoments m;
    const double z = theta.half_width();
    const double c = theta.center();
    auto frame = [&](double x) { return detail::Frame{z, std::clamp(x - c, -z, z), theta.drift, theta.diffusion}; };
    m.p_upper = density.expect([&](double x) { return detail::boundary_probability(frame(x), Boundary::Upper); });
    m.p_lower = density.expect([&](double x) { return detail::boundary_probability(frame(x), Boundary::Lower); });
    m.mdt = density.expect([&](double x) { return detail::mean_decision_time(frame(x)); });
    m.hat_upper = density.expect([&](double x) { return detail::hat_mean_dt(frame(x), Boundary::Upper); });
    m.hat_lower = density.expect([&](double x) { return detail::hat_mean_dt(frame(x), Boundary::Lower); });
    return m;
}

/// All metrics of one stage. density_out may be null only for a stage
/// without deadline (stage_survival = 0).
inline StageMetrics stage_metrics(const ConditionedDensity& density_in, const ConditionedDensity* density_out,
                                  double stage_survival, const StageTheta& theta, double t_start, double t_end) {
    StageMetrics r;
    r.start_time = t_start;
    r.end_time = t_end;
    const StageMoments in = stage_moments(density_in, theta);
    StageMoments out;
    const double S = stage_survival;
    const bool finite = std::isfinite(t_end);
    if (S > 0.0) {
        if (density_out == nullptr || !finite) {
            throw DomainError("stage_metrics: a surviving stage needs an output density and a deadline");
        }
        out = stage_moments(*density_out, theta);
    }
    const double dur = finite ? t_end - t_start : 0.0;
    r.stage_survival = S;
    r.p_decide = 1.0 - S;
    r.p_upper = std::max(0.0, in.p_upper - S * out.p_upper);
    r.p_lower = std::max(0.0, in.p_lower - S * out.p_lower);
    if (!(r.p_decide > 0.0)) {
        return r;
    }
    const double time_mass = in.mdt - S * (out.mdt + dur);
    const double hat_up = in.hat_upper - S * (out.hat_upper + dur * out.p_upper);
    const double hat_lo = in.hat_lower - S * (out.hat_lower + dur * out.p_lower);
    r.er_i = r.p_lower / r.p_decide;
    r.mdt_i = t_start + time_mass / r.p_decide;
    if (r.p_upper > 0.0) {
        r.cond_mdt_upper = t_start + hat_up / r.p_upper;
        r.hat_mdt_upper = (1.0 - r.er_i) * r.cond_mdt_upper;
    }
    if (r.p_lower > 0.0) {
        r.cond_mdt_lower = t_start + hat_lo / r.p_lower;
        r.hat_mdt_lower = r.er_i * r.cond_mdt_lower;
    }
    return r;
}

/// P(lower | decided in stage).
inline double stage_error_rate(const ConditionedDensity& density_in, const ConditionedDensity* density_out,
                               double stage_survival, const StageTheta& theta) {
    const double t0 = theta.start_time;
    const double t1 = stage_survival > 0.0 ? t0 + 1.0 : kInfiniteTime; // duration does not enter the error rate
    return stage_metrics(density_in, density_out, stage_survival, theta, t0, t1).er_i;
}

/// E[tau | decided in stage], absolute time.
inline double stage_mean_dt(const ConditionedDensity& density_in, const ConditionedDensity* density_out,
                            double stage_survival, const StageTheta& theta, double t_start, double t_end) {
    return stage_metrics(density_in, density_out, stage_survival, theta, t_start, t_end).mdt_i;
}

/// E[tau | b, decided in stage], absolute time.
inline double stage_conditional_mean_dt(const ConditionedDensity& density_in, const ConditionedDensity* density_out,
                                        double stage_survival, const StageTheta& theta, double t_start, double t_end,
                                        Boundary b) {
    const auto m = stage_metrics(density_in, density_out, stage_survival, theta, t_start, t_end);
    return b == Boundary::Upper ? m.cond_mdt_upper : m.cond_mdt_lower;
}

namespace detail {

inline void require_after_start(double t, const StageTheta& theta, const char* op) {
    if (!(t > theta.start_time)) {
        throw DomainError(std::string(op) + ": time must exceed the stage start");
    }
}

inline Frame frame_at(double x, const StageTheta& theta) {
    const double z = theta.half_width();
    return Frame{z, std::clamp(x - theta.center(), -z, z), theta.drift, theta.diffusion};
}

} // namespace detail

namespace detail {

inline constexpr double kGl8X[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                    -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                    0.7966664774136267,  0.9602898564975363};
inline constexpr double kGl8W[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                    0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                    0.2223810344533745, 0.1012285362903763};

/// E_in[g(X)] for the time-dependent kernels of a stage. A density that does
/// not vanish on the thresholds (after they moved inward) loses its edge
/// mass within a time far shorter than the grid resolves, so a grid node on
/// a threshold would be absorbed at once. There the outer 16 cells on each
/// side are integrated on the interpolant with Gauss-Legendre cells graded
/// geometrically toward the threshold, the interior keeps the grid rule, and
/// the result is divided by the same rule's mass.
template <class F>
double expect_stage_kernel(const ConditionedDensity& d, F&& g) {
    constexpr std::size_t band = 16;
    if (d.is_point_mass() || d.size() < 4 * band || (d.values().front() == 0.0 && d.values().back() == 0.0)) {
        return d.expect(g);
    }
    const auto v = d.values();
    const std::size_t last = v.size() - 1;
    const double h = d.spacing();
    double acc = 0.0;
    double mass = 0.0;
    for (std::size_t j = band; j + band <= last; ++j) {
        if (v[j] == 0.0) {
            continue;
        }
        const double w = numerics::gregory_weight(j - band, last - 2 * band, h) * v[j];
        acc += w * g(d.node(j));
        mass += w;
    }
    const double width = static_cast<double>(band) * h;
    const double s_min = 1e-12 * (d.upper() - d.lower());
    for (const double dir : {1.0, -1.0}) {
        const double edge = dir > 0.0 ? d.lower() : d.upper();
        for (double hi = width; hi > s_min; hi *= 0.5) {
            const double lo = 0.5 * hi;
            const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
            for (int q = 0; q < 8; ++q) {
                const double x = edge + dir * (mid + half * kGl8X[q]);
                const double w = half * kGl8W[q] * d.value_at(x);
                acc += w * g(x);
                mass += w;
            }
        }
    }
    return acc / mass;
}

} // namespace detail

/// f_i(t) = E_in[f(t - t_start; X)]; independent of the stage deadline.
inline double stage_fpt_density(double t, const ConditionedDensity& density_in, const StageTheta& theta) {
    detail::require_after_start(t, theta, "stage_fpt_density");
    const double el = t - theta.start_time;
    return detail::expect_stage_kernel(density_in, [&](double x) {
        const auto f = detail::frame_at(x, theta);
        return detail::joint_fpt_density(el, f, Boundary::Upper, Representation::Auto, numerics::kDefaultSeriesTol) +
               detail::joint_fpt_density(el, f, Boundary::Lower, Representation::Auto, numerics::kDefaultSeriesTol);
    });
}

inline double stage_joint_fpt_density(double t, const ConditionedDensity& density_in, const StageTheta& theta,
                                      Boundary b) {
    detail::require_after_start(t, theta, "stage_joint_fpt_density");
    const double el = t - theta.start_time;
    return detail::expect_stage_kernel(density_in, [&](double x) {
        return detail::joint_fpt_density(el, detail::frame_at(x, theta), b, Representation::Auto,
                                         numerics::kDefaultSeriesTol);
    });
}

/// E_in[P(tau <= t - t_start, x(tau) = b)].
inline double stage_joint_cdf(double t, const ConditionedDensity& density_in, const StageTheta& theta, Boundary b) {
    const double el = t - theta.start_time;
    if (!(el > 0.0)) {
        return 0.0;
    }
    return detail::expect_stage_kernel(density_in, [&](double x) {
        return detail::joint_fpt_cdf(el, detail::frame_at(x, theta), b, Representation::Auto,
                                     numerics::kDefaultSeriesTol);
    });
}

/// E_in[P(tau > t - t_start)].
inline double stage_survival_at(double t, const ConditionedDensity& density_in, const StageTheta& theta) {
    const double el = t - theta.start_time;
    if (!(el > 0.0)) {
        return 1.0;
    }
    return detail::expect_stage_kernel(density_in, [&](double x) {
        return detail::survival_probability(el, detail::frame_at(x, theta), Representation::Auto,
                                            numerics::kDefaultSeriesTol);
    });
}

/// Outcome of moving the thresholds at a stage boundary. Atoms are fractions
/// of the density's (conditional) mass.
struct ThresholdChange {
    ConditionedDensity density_out;
    double atom_upper;
    double atom_lower;
};

/// Moves the support of density_in to (new_lower, new_upper). Mass outside
/// the new thresholds is absorbed instantly; new support is filled with zero
/// density. The result is renormalized on a grid of at least grid_size
/// interior nodes.
inline ThresholdChange apply_threshold_change(const ConditionedDensity& density_in, double new_lower, double new_upper,
                                              std::size_t grid_size = kDefaultGridSize) {
    if (!(new_lower < new_upper)) {
        throw DomainError("apply_threshold_change: new thresholds must satisfy lower < upper");
    }
    if (new_lower == density_in.lower() && new_upper == density_in.upper()) {
        return ThresholdChange{density_in, 0.0, 0.0};
    }
    if (density_in.is_point_mass()) {
        const double x = density_in.point();
        if (x >= new_upper) {
            throw DegenerateModelError("apply_threshold_change: all mass absorbed");
        }
        if (x <= new_lower) {
            throw DegenerateModelError("apply_threshold_change: all mass absorbed");
        }
        return ThresholdChange{
            ConditionedDensity::point_mass(x, new_lower, new_upper, density_in.survival_prob()), 0.0, 0.0};
    }
    const double atom_up = density_in.mass_between(new_upper, density_in.upper());
    const double atom_lo = density_in.mass_between(density_in.lower(), std::min(new_lower, new_upper));
    if (atom_up + atom_lo >= 1.0 - 1e-14) {
        throw DegenerateModelError("apply_threshold_change: all mass absorbed at the threshold change");
    }
    const std::size_t n = std::max(grid_size + 2, density_in.size());
    const double h = (new_upper - new_lower) / static_cast<double>(n - 1);
    std::vector<double> values(n);
    for (std::size_t j = 0; j < n; ++j) {
        values[j] = density_in.value_at(new_lower + h * static_cast<double>(j));
    }
    auto out = ConditionedDensity::on_grid(new_lower, new_upper, std::move(values),
                                           density_in.survival_prob() * (1.0 - atom_up - atom_lo));
    return ThresholdChange{std::move(out), atom_up, atom_lo};
}

/// Symmetric form: thresholds move from +-z_old to +-z_new.
inline ThresholdChange apply_symmetric_threshold_change(const ConditionedDensity& density_in, double z_old,
                                                        double z_new, std::size_t grid_size = kDefaultGridSize) {
    if (!(z_old > 0.0) || !(z_new > 0.0)) {
        throw DomainError("apply_threshold_change: thresholds must be positive");
    }
    if (std::abs(density_in.upper() - z_old) > 1e-12 * z_old || std::abs(density_in.lower() + z_old) > 1e-12 * z_old) {
        throw DomainError("apply_threshold_change: density support does not match z_old");
    }
    return apply_threshold_change(density_in, -z_new, z_new, grid_size);
}

/// Thresholds that cross (upper <= lower) absorb every surviving path at
/// once: paths at or above the midpoint of the two values go to the upper
/// boundary, the rest to the lower one. Returns (upper, lower) fractions.
inline std::pair<double, double> absorb_all(const ConditionedDensity& density_in, double lower, double upper) {
    const double mid = 0.5 * (lower + upper);
    if (density_in.is_point_mass()) {
        return density_in.point() >= mid ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
    }
    const double up = std::clamp(density_in.mass_between(mid, density_in.upper()), 0.0, 1.0);
    return {up, 1.0 - up};
}

} // namespace msddm
