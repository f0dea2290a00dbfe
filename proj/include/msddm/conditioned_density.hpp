#pragma once

// Evidence distribution at a stage boundary, conditioned on no decision yet.
//
// Either a point mass (the initial condition) or density values on a uniform
// grid whose first and last nodes sit on the thresholds. Truncated densities
// are nonzero at the thresholds, so the end nodes carry real values; densities
// that came straight out of a propagation step are zero there.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msddm/errors.hpp"
#include "msddm/numerics.hpp"

namespace msddm {

class ConditionedDensity {
public:
    static ConditionedDensity point_mass(double x0, double lower, double upper, double survival_prob = 1.0) {
        if (!(lower < x0 && x0 < upper)) {
            throw DomainError("point mass must lie strictly between the thresholds");
        }
        ConditionedDensity d;
        d.lower_ = lower;
        d.upper_ = upper;
        d.point_ = x0;
        d.survival_ = survival_prob;
        return d;
    }

    /// Density values at nodes lower + j h, j = 0..n-1, h = (upper-lower)/(n-1).
    /// Values are normalized to unit quadrature mass.
    static ConditionedDensity on_grid(double lower, double upper, std::vector<double> values, double survival_prob) {
        if (!(lower < upper)) {
            throw DomainError("density support must have lower < upper");
        }
        if (values.size() < 4) {
            throw DomainError("density grid needs at least 4 nodes");
        }
        ConditionedDensity d;
        d.lower_ = lower;
        d.upper_ = upper;
        d.values_ = std::move(values);
        d.survival_ = survival_prob;
        for (double& v : d.values_) {
            if (!(v >= 0.0)) {
                v = 0.0;
            }
        }
        const double m = d.mass();
        if (!(m > 0.0)) {
            throw DegenerateModelError("density carries no mass");
        }
        for (double& v : d.values_) {
            v /= m;
        }
        return d;
    }

    bool is_point_mass() const noexcept { return point_.has_value(); }
    double point() const { return *point_; }
    double lower() const noexcept { return lower_; }
    double upper() const noexcept { return upper_; }
    double survival_prob() const noexcept { return survival_; }
    void set_survival_prob(double s) noexcept { survival_ = s; }

    std::size_t size() const noexcept { return values_.size(); }
    std::span<const double> values() const noexcept { return values_; }
    double spacing() const noexcept {
        return values_.size() < 2 ? 0.0 : (upper_ - lower_) / static_cast<double>(values_.size() - 1);
    }
    double node(std::size_t j) const noexcept { return lower_ + spacing() * static_cast<double>(j); }
    double weight(std::size_t j) const noexcept { return numerics::gregory_weight(j, values_.size() - 1, spacing()); }

    /// Quadrature of the stored values (1 for a normalized density).
    double mass() const {
        if (is_point_mass()) {
            return 1.0;
        }
        double m = 0.0;
        for (std::size_t j = 0; j < values_.size(); ++j) {
            m += weight(j) * values_[j];
        }
        return m;
    }

    /// E[f(X)]; nodes with zero density are skipped so f is never evaluated
    /// where it may be singular (e.g. on a threshold).
    template <class F>
    double expect(F&& f) const {
        if (is_point_mass()) {
            return f(*point_);
        }
        double acc = 0.0;
        const double h = spacing();
        const std::size_t last = values_.size() - 1;
        for (std::size_t j = 0; j <= last; ++j) {
            if (values_[j] == 0.0) {
                continue;
            }
            acc += numerics::gregory_weight(j, last, h) * values_[j] * f(lower_ + h * static_cast<double>(j));
        }
        return acc;
    }

    /// Interpolated density value; 0 outside the support. Not defined for a
    /// point mass.
    double value_at(double x) const {
        if (is_point_mass()) {
            throw DomainError("value_at is not defined for a point mass");
        }
        return std::max(0.0, numerics::interpolate_uniform(values_, lower_, upper_, x));
    }

    /// Mass of the density on [a, b] (clipped to the support), by composite
    /// Gauss-Legendre on the interpolant.
    double mass_between(double a, double b) const;

private:
    ConditionedDensity() = default;

    double lower_ = -1.0;
    double upper_ = 1.0;
    std::optional<double> point_;
    std::vector<double> values_;
    double survival_ = 1.0;
};

inline double ConditionedDensity::mass_between(double a, double b) const {
    a = std::max(a, lower_);
    b = std::min(b, upper_);
    if (!(a < b)) {
        return 0.0;
    }
    if (is_point_mass()) {
        return (*point_ >= a && *point_ <= b) ? 1.0 : 0.0;
    }
    // 5-point Gauss-Legendre on cells no wider than the grid spacing.
    static constexpr double xs[5] = {0.0, -0.5384693101056831, 0.5384693101056831, -0.9061798459386640,
                                     0.9061798459386640};
    static constexpr double ws[5] = {0.5688888888888889, 0.4786286704993665, 0.4786286704993665,
                                     0.2369268850561891, 0.2369268850561891};
    const auto cells = static_cast<std::size_t>(std::ceil((b - a) / spacing())) + 1;
    const double cw = (b - a) / static_cast<double>(cells);
    double m = 0.0;
    for (std::size_t c = 0; c < cells; ++c) {
        const double mid = a + (static_cast<double>(c) + 0.5) * cw;
        for (int q = 0; q < 5; ++q) {
            m += 0.5 * cw * ws[q] * value_at(mid + 0.5 * cw * xs[q]);
        }
    }
    return m;
}

} // namespace msddm
