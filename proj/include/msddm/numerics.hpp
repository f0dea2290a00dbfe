#pragma once

// Small numerical building blocks shared by the first-passage modules:
// tail-safe normal log-CDF, stable hyperbolic helpers, image-series
// summation, and the uniform-grid quadrature/interpolation rules used by
// the conditioned evidence densities.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>

namespace msddm::numerics {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kSqrt2Pi = 2.5066282746310002;
inline constexpr double kDefaultSeriesTol = 1e-12;
inline constexpr int kMaxShells = 100000;

/// log Phi(x) for the standard normal CDF, accurate deep in the lower tail.
inline double log_normal_cdf(double x) {
    if (x > -20.0) {
        return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
    }
    // Asymptotic expansion of the Mills ratio.
    const double x2 = x * x;
    const double series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
    return -0.5 * x2 - std::log(-x * kSqrt2Pi) + std::log(series);
}

/// y*coth(y) - 1, even in y, ~ y^2/3 near zero.
inline double xcoth_minus_one(double y) {
    const double ay = std::abs(y);
    if (ay < 0.25) {
        const double y2 = y * y;
        // y^2/3 - y^4/45 + 2y^6/945 - y^8/4725
        return y2 * (1.0 / 3.0 + y2 * (-1.0 / 45.0 + y2 * (2.0 / 945.0 - y2 / 4725.0)));
    }
    return ay / std::tanh(ay) - 1.0;
}

/// (e^{rate*span} - 1)/rate, continuous through rate = 0.
inline double leak_integral(double rate, double span) {
    const double x = rate * span;
    if (std::abs(x) < 1e-10) {
        return span * (1.0 + 0.5 * x);
    }
    return std::expm1(x) / rate;
}

/// Sums term(0) + sum_{k>=1} (term(k) + term(-k)), stopping once two
/// consecutive shells each fall below tol relative to the running sum.
/// At least shells 0..2 are always evaluated.
template <class Term>
double sum_symmetric_shells(Term&& term, double tol = kDefaultSeriesTol) {
    double sum = term(0);
    int small_in_a_row = 0;
    for (int k = 1; k < kMaxShells; ++k) {
        const double shell = term(k) + term(-k);
        sum += shell;
        if (std::abs(shell) <= tol * std::abs(sum) || shell == 0.0) {
            ++small_in_a_row;
        } else {
            small_in_a_row = 0;
        }
        if (k >= 2 && small_in_a_row >= 2) {
            break;
        }
    }
    return sum;
}

/// Sums term(n) for n = 1, 2, ... where envelope(n) bounds |term(n)|;
/// stops once two consecutive envelopes fall below tol relative to the sum.
template <class Term, class Envelope>
double sum_one_sided(Term&& term, Envelope&& envelope, double tol = kDefaultSeriesTol) {
    double sum = 0.0;
    int small_in_a_row = 0;
    for (int n = 1; n < kMaxShells; ++n) {
        sum += term(n);
        const double env = envelope(n);
        if (env <= tol * std::max(std::abs(sum), 1e-300) || env == 0.0) {
            ++small_in_a_row;
        } else {
            small_in_a_row = 0;
        }
        if (small_in_a_row >= 2) {
            break;
        }
    }
    return sum;
}

/// Weight of node j among nodes 0..last on a uniform grid with spacing h.
/// Uses the fourth-order Gregory end corrections when enough nodes exist,
/// plain trapezoid otherwise.
inline double gregory_weight(std::size_t j, std::size_t last, double h) {
    if (last < 6) {
        return (j == 0 || j == last) ? 0.5 * h : h;
    }
    const std::size_t d = std::min(j, last - j);
    switch (d) {
    case 0: return h * 3.0 / 8.0;
    case 1: return h * 7.0 / 6.0;
    case 2: return h * 23.0 / 24.0;
    default: return h;
    }
}

/// Local cubic (4-point Lagrange) interpolation of uniformly sampled values
/// on [lo, hi]; quadratic in the two end cells. Returns 0 outside [lo, hi].
inline double interpolate_uniform(std::span<const double> values, double lo, double hi, double x) {
    const std::size_t n = values.size();
    if (n == 0 || x < lo || x > hi) {
        return 0.0;
    }
    if (n == 1) {
        return values[0];
    }
    const double h = (hi - lo) / static_cast<double>(n - 1);
    double pos = (x - lo) / h;
    auto i = static_cast<std::size_t>(std::floor(pos));
    if (i >= n - 1) {
        return values[n - 1];
    }
    const double f = pos - static_cast<double>(i);
    if (n == 2) {
        return values[0] + f * (values[1] - values[0]);
    }
    if (i == 0 || i + 2 >= n) {
        // quadratic through the three nodes nearest the end
        const std::size_t b = i == 0 ? 0 : n - 3;
        const double g = pos - static_cast<double>(b);
        const double q0 = values[b], q1 = values[b + 1], q2 = values[b + 2];
        return q0 * (g - 1.0) * (g - 2.0) / 2.0 - q1 * g * (g - 2.0) + q2 * g * (g - 1.0) / 2.0;
    }
    const double p0 = values[i - 1], p1 = values[i], p2 = values[i + 1], p3 = values[i + 2];
    const double w0 = -f * (f - 1.0) * (f - 2.0) / 6.0;
    const double w1 = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0;
    const double w2 = -(f + 1.0) * f * (f - 2.0) / 2.0;
    const double w3 = (f + 1.0) * f * (f - 1.0) / 6.0;
    return w0 * p0 + w1 * p1 + w2 * p2 + w3 * p3;
}

/// Splitmix64 finalizer; used to derive independent RNG stream seeds.
inline constexpr unsigned long long splitmix64(unsigned long long x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
inline constexpr double unit_interval(unsigned long long bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

} // namespace msddm::numerics
