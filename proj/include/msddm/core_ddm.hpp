#pragma once

// Closed-form first-passage quantities for a Wiener process with constant
// drift and diffusion between two absorbing thresholds.
//
// All formulas are evaluated in the symmetric frame: thresholds are
// translated to +-z around their midpoint (the statistics are
// translation-invariant), and negative drift is mapped onto positive drift
// by the reflection x -> -x with the boundary labels swapped.

#include <cmath>
#include <string>

#include "msddm/errors.hpp"
#include "msddm/numerics.hpp"

namespace msddm {

/// Parameters of one stage: constant drift and diffusion between fixed
/// thresholds, starting at start_time.
struct StageTheta {
    double drift = 0.0;
    double diffusion = 1.0;
    double upper = 1.0;
    double lower = -1.0;
    double start_time = 0.0;

    static StageTheta symmetric(double drift, double diffusion, double z, double start_time = 0.0) {
        return StageTheta{drift, diffusion, z, -z, start_time};
    }

    /// Signal-to-noise square ratio drift / diffusion^2.
    double snr() const noexcept { return drift / (diffusion * diffusion); }
    double half_width() const noexcept { return 0.5 * (upper - lower); }
    double center() const noexcept { return 0.5 * (upper + lower); }

    void validate() const {
        if (!(diffusion > 0.0) || !std::isfinite(diffusion)) {
            throw DomainError("diffusion must be positive and finite");
        }
        if (!(lower < upper)) {
            throw DomainError("lower threshold must be below upper threshold");
        }
        if (!std::isfinite(drift) || !std::isfinite(start_time)) {
            throw DomainError("drift and start time must be finite");
        }
    }
};

enum class Boundary { Upper, Lower };

constexpr Boundary opposite(Boundary b) noexcept {
    return b == Boundary::Upper ? Boundary::Lower : Boundary::Upper;
}

inline const char* to_string(Boundary b) noexcept {
    return b == Boundary::Upper ? "upper" : "lower";
}

/// Which infinite-series form of the first-passage density to evaluate.
enum class Representation { Auto, SmallTime, LargeTime };

/// Thresholds translated to +-z with the start point expressed relative to
/// their midpoint.
struct SymmetricFrame {
    double z;
    double x0;
};

inline SymmetricFrame shift_to_symmetric(double lower, double upper, double x0) {
    if (!(lower < upper)) {
        throw DomainError("shift_to_symmetric: lower threshold must be below upper threshold");
    }
    if (!(lower < x0 && x0 < upper)) {
        throw DomainError("shift_to_symmetric: start point must lie strictly between the thresholds");
    }
    return SymmetricFrame{0.5 * (upper - lower), x0 - 0.5 * (upper + lower)};
}

namespace detail {

/// |s z| below this uses the zero-drift branches.
inline constexpr double kDegenerateSnr = 1e-8;

/// Symmetric-frame parameters for one evaluation. y may sit on a threshold.
struct Frame {
    double z;
    double y;
    double a;
    double sig;

    double s() const noexcept { return a / (sig * sig); }
    bool degenerate() const noexcept { return std::abs(s() * z) < kDegenerateSnr; }
    Frame reflected() const noexcept { return Frame{z, -y, -a, sig}; }
};

inline Frame make_frame(double x0, const StageTheta& th) {
    return Frame{th.half_width(), x0 - th.center(), th.drift, th.diffusion};
}

inline bool use_small_time(double t, const Frame& f, Representation r) {
    switch (r) {
    case Representation::SmallTime: return true;
    case Representation::LargeTime: return false;
    default: return f.sig * f.sig * t / (f.z * f.z) < 1.0;
    }
}

inline double boundary_probability(const Frame& f, Boundary b) {
    if (f.degenerate()) {
        return b == Boundary::Upper ? (f.z + f.y) / (2.0 * f.z) : (f.z - f.y) / (2.0 * f.z);
    }
    const double s = f.s();
    if (s < 0.0) {
        return boundary_probability(f.reflected(), opposite(b));
    }
    const double denom = -std::expm1(-4.0 * s * f.z);
    if (b == Boundary::Upper) {
        return -std::expm1(-2.0 * s * (f.y + f.z)) / denom;
    }
    return std::exp(-2.0 * s * (f.y + f.z)) * (-std::expm1(-2.0 * s * (f.z - f.y))) / denom;
}

inline double mean_decision_time(const Frame& f) {
    if (f.degenerate()) {
        return (f.z * f.z - f.y * f.y) / (f.sig * f.sig);
    }
    const double p_lo = boundary_probability(f, Boundary::Lower);
    return ((1.0 - 2.0 * p_lo) * f.z - f.y) / f.a;
}

/// E[tau 1(x(tau) = b)].
inline double hat_mean_dt(const Frame& f, Boundary b) {
    if (f.degenerate()) {
        const double d = b == Boundary::Upper ? f.z + f.y : f.z - f.y;
        const double cond = (4.0 * f.z * f.z - d * d) / (3.0 * f.sig * f.sig);
        return boundary_probability(f, b) * cond;
    }
    const double s = f.s();
    if (s < 0.0) {
        return hat_mean_dt(f.reflected(), opposite(b));
    }
    const double d = b == Boundary::Upper ? f.z + f.y : f.z - f.y;
    // 2z/a coth(2sz) - d/a coth(sd), written to survive s -> 0.
    const double cond = (numerics::xcoth_minus_one(2.0 * s * f.z) - numerics::xcoth_minus_one(s * d)) / (f.a * s);
    return boundary_probability(f, b) * cond;
}

/// sum_k w_k / (sqrt(2 pi) t^{3/2}) exp(log_scale - w_k^2 / 2t), w_k = v - u + 2kv.
inline double ss_scaled(double t, double u, double v, double log_scale, double tol) {
    const double norm = 1.0 / (numerics::kSqrt2Pi * t * std::sqrt(t));
    return numerics::sum_symmetric_shells(
        [&](int k) {
            const double w = v - u + 2.0 * k * v;
            return w * norm * std::exp(log_scale - w * w / (2.0 * t));
        },
        tol);
}

/// d/dt P(tau <= t, x(tau) = b).
inline double joint_fpt_density(double t, const Frame& f, Boundary b, Representation r, double tol) {
    const double s = f.s();
    const double decay = f.a * f.a * t / (2.0 * f.sig * f.sig);
    const double tilt = b == Boundary::Upper ? s * (f.z - f.y) : -s * (f.z + f.y);
    if (use_small_time(t, f, r)) {
        const double u = (b == Boundary::Upper ? f.z + f.y : f.z - f.y) / f.sig;
        return ss_scaled(t, u, 2.0 * f.z / f.sig, tilt - decay, tol);
    }
    const double phase = (b == Boundary::Upper ? f.z + f.y : f.z - f.y) * numerics::kPi / (2.0 * f.z);
    const double rate = numerics::kPi * numerics::kPi * f.sig * f.sig * t / (8.0 * f.z * f.z);
    const double pref = numerics::kPi * f.sig * f.sig / (4.0 * f.z * f.z);
    const double sum = numerics::sum_one_sided(
        [&](int n) {
            const double sign = (n % 2 == 1) ? 1.0 : -1.0;
            return sign * n * std::sin(n * phase) * std::exp(tilt - decay - n * n * rate);
        },
        [&](int n) { return n * std::exp(tilt - decay - n * n * rate); }, tol);
    return pref * sum;
}

/// P(tau > t, x(tau) = b): the part of the boundary's hitting probability
/// not yet realised by time t (eigenfunction form).
inline double joint_tail_large_time(double t, const Frame& f, Boundary b, double tol) {
    const double s = f.s();
    const double tilt = b == Boundary::Upper ? s * (f.z - f.y) : -s * (f.z + f.y);
    const double phase = (b == Boundary::Upper ? f.z + f.y : f.z - f.y) * numerics::kPi / (2.0 * f.z);
    const double base = f.a * f.a / (2.0 * f.sig * f.sig);
    const double mode = numerics::kPi * numerics::kPi * f.sig * f.sig / (8.0 * f.z * f.z);
    const double pref = numerics::kPi * f.sig * f.sig / (4.0 * f.z * f.z);
    const double sum = numerics::sum_one_sided(
        [&](int n) {
            const double lam = base + n * n * mode;
            const double sign = (n % 2 == 1) ? 1.0 : -1.0;
            return sign * n * std::sin(n * phase) * std::exp(tilt - lam * t) / lam;
        },
        [&](int n) {
            const double lam = base + n * n * mode;
            return n * std::exp(tilt - lam * t) / lam;
        },
        tol);
    return pref * sum;
}

/// P(tau <= t, x(tau) = b) in the small-time form: term-wise integral of the
/// image series, each term an inverse-Gaussian CDF.
inline double joint_cdf_small_time(double t, const Frame& f, Boundary b, double tol) {
    const double s = f.s();
    const double tilt = b == Boundary::Upper ? s * (f.z - f.y) : -s * (f.z + f.y);
    const double u = (b == Boundary::Upper ? f.z + f.y : f.z - f.y) / f.sig;
    const double v = 2.0 * f.z / f.sig;
    const double mu = std::abs(f.a) / f.sig;
    const double rt = std::sqrt(t);
    return numerics::sum_symmetric_shells(
        [&](int k) {
            const double w = v - u + 2.0 * k * v;
            if (w == 0.0) {
                // start on the target threshold: the w -> 0+ limit
                return std::exp(tilt);
            }
            const double aw = std::abs(w);
            const double g = std::exp(tilt - mu * aw + numerics::log_normal_cdf((mu * t - aw) / rt)) +
                             std::exp(tilt + mu * aw + numerics::log_normal_cdf(-(mu * t + aw) / rt));
            return w > 0.0 ? g : -g;
        },
        tol);
}

inline double joint_fpt_cdf(double t, const Frame& f, Boundary b, Representation r, double tol) {
    if (t <= 0.0) {
        return 0.0;
    }
    if (use_small_time(t, f, r)) {
        return joint_cdf_small_time(t, f, b, tol);
    }
    return boundary_probability(f, b) - joint_tail_large_time(t, f, b, tol);
}

inline double survival_probability(double t, const Frame& f, Representation r, double tol) {
    if (t <= 0.0) {
        return 1.0;
    }
    if (use_small_time(t, f, r)) {
        return 1.0 - joint_cdf_small_time(t, f, Boundary::Upper, tol) -
               joint_cdf_small_time(t, f, Boundary::Lower, tol);
    }
    return joint_tail_large_time(t, f, Boundary::Upper, tol) + joint_tail_large_time(t, f, Boundary::Lower, tol);
}

/// Density of x(t) jointly with no absorption by t, for a fixed elapsed time
/// and stage parameters. Constants are hoisted so the kernel can be applied
/// to many (x, y) pairs cheaply.
class SurvivalKernel {
public:
    SurvivalKernel(double t, double z, double a, double sig, Representation r = Representation::Auto,
                   double tol = numerics::kDefaultSeriesTol)
        : t_(t), z_(z), a_(a), sig_(sig), tol_(tol) {
        small_ = use_small_time(t, Frame{z, 0.0, a, sig}, r);
        var_ = sig * sig * t;
        decay_ = a * a * t / (2.0 * sig * sig);
        s_ = a / (sig * sig);
        norm_small_ = 1.0 / std::sqrt(2.0 * numerics::kPi * var_);
        mode_ = numerics::kPi * numerics::kPi * var_ / (8.0 * z * z);
        phase_ = numerics::kPi / (2.0 * z);
    }

    /// x and y in the symmetric frame.
    double operator()(double x, double y) const {
        if (!(x > -z_ && x < z_)) {
            return 0.0;
        }
        const double tilt = s_ * (x - y) - decay_;
        if (small_) {
            const double d1 = x - y;
            const double d2 = 2.0 * z_ - x - y;
            return norm_small_ * numerics::sum_symmetric_shells(
                                     [&](int n) {
                                         const double e1 = d1 + 4.0 * n * z_;
                                         const double e2 = d2 + 4.0 * n * z_;
                                         return std::exp(tilt - e1 * e1 / (2.0 * var_)) -
                                                std::exp(tilt - e2 * e2 / (2.0 * var_));
                                     },
                                     tol_);
        }
        const double px = phase_ * (x + z_);
        const double py = phase_ * (y + z_);
        return numerics::sum_one_sided(
                   [&](int n) { return std::exp(tilt - n * n * mode_) * std::sin(n * px) * std::sin(n * py); },
                   [&](int n) { return std::exp(tilt - n * n * mode_); }, tol_) /
               z_;
    }

    double elapsed() const noexcept { return t_; }
    double width() const noexcept { return sig_ * std::sqrt(t_); }
    double drift() const noexcept { return a_; }

private:
    double t_, z_, a_, sig_, tol_;
    bool small_ = true;
    double var_ = 0, decay_ = 0, s_ = 0, norm_small_ = 0, mode_ = 0, phase_ = 0;
};

inline void require_inside(double x0, const StageTheta& th, const char* op) {
    th.validate();
    if (!(th.lower < x0 && x0 < th.upper)) {
        throw DomainError(std::string(op) + ": start point must lie strictly between the thresholds");
    }
}

inline void require_positive_time(double t, const char* op) {
    if (!(t > 0.0)) {
        throw DomainError(std::string(op) + ": time must be positive");
    }
}

} // namespace detail

/// P(x(tau) = b) for a start at x0.
inline double boundary_probability(double x0, const StageTheta& th, Boundary b) {
    detail::require_inside(x0, th, "boundary_probability");
    return detail::boundary_probability(detail::make_frame(x0, th), b);
}

/// P(x(tau) = lower). Boundaries are labelled, not judged: with a negative
/// drift this is the likely outcome.
inline double error_rate(double x0, const StageTheta& th) {
    detail::require_inside(x0, th, "error_rate");
    return detail::boundary_probability(detail::make_frame(x0, th), Boundary::Lower);
}

/// Unconditional mean first-passage time E[tau].
inline double mean_decision_time(double x0, const StageTheta& th) {
    detail::require_inside(x0, th, "mean_decision_time");
    return detail::mean_decision_time(detail::make_frame(x0, th));
}

/// E[tau 1(x(tau)=b)] together with E[tau | x(tau)=b].
struct ConditionalTime {
    double hat_mdt;
    double mdt;
};

inline ConditionalTime conditional_mean_dt(double x0, const StageTheta& th, Boundary b) {
    detail::require_inside(x0, th, "conditional_mean_dt");
    const auto f = detail::make_frame(x0, th);
    const double hat = detail::hat_mean_dt(f, b);
    const double p = detail::boundary_probability(f, b);
    return ConditionalTime{hat, p > 0.0 ? hat / p : undefined()};
}

/// The image-series kernel ss(t; u, v) of the small-time density.
inline double ss_kernel(double t, double u, double v, double tol = numerics::kDefaultSeriesTol) {
    detail::require_positive_time(t, "ss_kernel");
    if (!(u < v)) {
        throw DomainError("ss_kernel: requires u < v");
    }
    if (!(tol > 0.0)) {
        throw DomainError("ss_kernel: tolerance must be positive");
    }
    return detail::ss_scaled(t, u, v, 0.0, tol);
}

/// First-passage time density f(t) with t measured from the stage start.
inline double fpt_density(double t, double x0, const StageTheta& th, Representation r = Representation::Auto) {
    detail::require_positive_time(t, "fpt_density");
    detail::require_inside(x0, th, "fpt_density");
    const auto f = detail::make_frame(x0, th);
    return detail::joint_fpt_density(t, f, Boundary::Upper, r, numerics::kDefaultSeriesTol) +
           detail::joint_fpt_density(t, f, Boundary::Lower, r, numerics::kDefaultSeriesTol);
}

/// Joint density f^b(t) and the density conditioned on absorbing at b.
struct BoundaryDensity {
    double joint;
    double conditional; ///< undefined when P(x(tau) = b) = 0
};

inline BoundaryDensity conditional_fpt_density(double t, double x0, const StageTheta& th, Boundary b,
                                               Representation r = Representation::Auto) {
    detail::require_positive_time(t, "conditional_fpt_density");
    detail::require_inside(x0, th, "conditional_fpt_density");
    const auto f = detail::make_frame(x0, th);
    const double joint = detail::joint_fpt_density(t, f, b, r, numerics::kDefaultSeriesTol);
    const double p = detail::boundary_probability(f, b);
    return BoundaryDensity{joint, p > 0.0 ? joint / p : undefined()};
}

/// P(tau <= t, x(tau) = b).
inline double joint_fpt_cdf(double t, double x0, const StageTheta& th, Boundary b,
                            Representation r = Representation::Auto) {
    detail::require_inside(x0, th, "joint_fpt_cdf");
    return detail::joint_fpt_cdf(t, detail::make_frame(x0, th), b, r, numerics::kDefaultSeriesTol);
}

/// P(tau > t).
inline double survival_probability(double t, double x0, const StageTheta& th,
                                   Representation r = Representation::Auto) {
    detail::require_inside(x0, th, "survival_probability");
    return detail::survival_probability(t, detail::make_frame(x0, th), r, numerics::kDefaultSeriesTol);
}

/// Joint density of x(t) = x and no absorption by time t.
inline double survival_joint_density(double x, double t, double x0, const StageTheta& th,
                                     Representation r = Representation::Auto) {
    detail::require_positive_time(t, "survival_joint_density");
    detail::require_inside(x0, th, "survival_joint_density");
    const detail::SurvivalKernel kernel(t, th.half_width(), th.drift, th.diffusion, r);
    return kernel(x - th.center(), x0 - th.center());
}

/// E[exp(-alpha tau) | x(tau) = b]. Valid for alpha below zero as long as the
/// transform exists (the hyperbolic ratio turns trigonometric when
/// 2 alpha sigma^2 + a^2 < 0).
inline double fpt_laplace_conditional(double alpha, double x0, const StageTheta& th, Boundary b) {
    detail::require_inside(x0, th, "fpt_laplace_conditional");
    const auto f = detail::make_frame(x0, th);
    const double p = detail::boundary_probability(f, b);
    if (!(p > 0.0)) {
        return undefined();
    }
    const double s = f.s();
    const double var = f.sig * f.sig;
    const double tilt = b == Boundary::Upper ? s * (f.z - f.y) : -s * (f.z + f.y);
    const double d = b == Boundary::Upper ? f.z + f.y : f.z - f.y;
    const double disc = 2.0 * alpha * var + f.a * f.a;
    double ratio_log_or_value;
    if (disc >= 0.0) {
        const double q = std::sqrt(disc) / var;
        const double big = 2.0 * f.z * q;
        if (big < 1e-6) {
            // sinh(dq)/sinh(2zq) -> d/(2z)
            ratio_log_or_value = std::log(d / (2.0 * f.z) * (1.0 + (d * d - 4.0 * f.z * f.z) * q * q / 6.0));
        } else {
            const double small = d * q;
            ratio_log_or_value = small - big + std::log(std::expm1(-2.0 * small) / std::expm1(-2.0 * big));
        }
        return std::exp(tilt + ratio_log_or_value) / p;
    }
    const double q = std::sqrt(-disc) / var;
    return std::exp(tilt) * std::sin(d * q) / std::sin(2.0 * f.z * q) / p;
}

} // namespace msddm
