#pragma once

// Reward rate (1 - ER) / (E[tau] + T_nd) and its maximization over a shared
// symmetric threshold. The reward rate of a multistage model can have several
// local maxima, so the optimizer scans a dense grid and refines every
// interior peak instead of assuming unimodality.

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include "msddm/aggregate.hpp"
#include "msddm/errors.hpp"

namespace msddm {

struct RewardConfig {
    double t_nd = 0.3;
    double z_min = 0.01;
    double z_max = 0.4;
    std::size_t resolution = 2000;
    std::size_t grid_size = kDefaultGridSize;
    double z_tolerance = 1e-9; ///< golden-section stopping width

    void validate() const {
        if (!(z_min > 0.0) || !(z_min < z_max)) {
            throw DomainError("reward: need 0 < z_min < z_max");
        }
        if (!(t_nd >= 0.0)) {
            throw DomainError("reward: t_nd must be nonnegative");
        }
        if (resolution < 3) {
            throw DomainError("reward: resolution must be at least 3");
        }
    }
};

/// Copy of spec with every stage's thresholds set to +-z.
inline ModelSpec with_threshold(const ModelSpec& spec, double z) {
    ModelSpec m = spec;
    for (auto& s : m.stages) {
        s.upper = z;
        s.lower = -z;
    }
    return m;
}

inline double reward_rate(double z, const ModelSpec& spec, const RewardConfig& cfg) {
    if (!(z > 0.0)) {
        throw DomainError("reward_rate: z must be positive");
    }
    AnalyzeOptions opt;
    opt.grid_size = cfg.grid_size;
    opt.compute_cdf = false;
    const MultistageSolution sol(with_threshold(spec, z), opt.grid_size);
    const double er = sol.error_rate();
    const double mdt = sol.mean_decision_time();
    return (1.0 - er) / (mdt + cfg.t_nd);
}

struct LocalMax {
    double z;
    double rr;
};

struct ThresholdOptimum {
    double z_star = undefined();
    double rr_star = undefined();
    std::vector<LocalMax> local_maxima; ///< refined interior maxima in increasing z
    bool boundary = false;              ///< no interior maximum: z_star is a search bound
    std::vector<double> z_grid;
    std::vector<double> rr_grid;
};

namespace detail {

template <class F>
LocalMax golden_max(F&& f, double a, double b, double tol) {
    const double r = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - r * (b - a);
    double d = a + r * (b - a);
    double fc = f(c), fd = f(d);
    while (b - a > tol) {
        if (fc >= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    const double zm = 0.5 * (a + b);
    return LocalMax{zm, f(zm)};
}

} // namespace detail

/// Dense scan over [z_min, z_max] at cfg.resolution points; each grid point
/// that beats its left neighbour and is not beaten by its right one starts a
/// golden-section refinement inside its two neighbouring cells.
inline ThresholdOptimum optimize_threshold(const ModelSpec& spec, const RewardConfig& cfg) {
    cfg.validate();
    spec.validate();
    ThresholdOptimum r;
    const std::size_t n = cfg.resolution;
    const double step = (cfg.z_max - cfg.z_min) / static_cast<double>(n - 1);
    auto rr = [&](double z) { return reward_rate(z, spec, cfg); };
    for (std::size_t k = 0; k < n; ++k) {
        const double z = k + 1 == n ? cfg.z_max : cfg.z_min + step * static_cast<double>(k);
        r.z_grid.push_back(z);
        r.rr_grid.push_back(rr(z));
    }
    for (std::size_t k = 1; k + 1 < n; ++k) {
        if (r.rr_grid[k] > r.rr_grid[k - 1] && r.rr_grid[k] >= r.rr_grid[k + 1]) {
            LocalMax m = detail::golden_max(rr, r.z_grid[k - 1], r.z_grid[k + 1], cfg.z_tolerance);
            if (m.rr < r.rr_grid[k]) {
                m = LocalMax{r.z_grid[k], r.rr_grid[k]};
            }
            r.local_maxima.push_back(m);
        }
    }
    if (r.local_maxima.empty()) {
        r.boundary = true;
        const bool left = r.rr_grid.front() >= r.rr_grid.back();
        r.z_star = left ? r.z_grid.front() : r.z_grid.back();
        r.rr_star = left ? r.rr_grid.front() : r.rr_grid.back();
        return r;
    }
    const auto best = std::max_element(r.local_maxima.begin(), r.local_maxima.end(),
                                       [](const LocalMax& a, const LocalMax& b) { return a.rr < b.rr; });
    r.z_star = best->z;
    r.rr_star = best->rr;
    return r;
}

/// Two-stage model with shared threshold: drift a1 until t1, then a2. A
/// switch at t1 = 0 leaves only the second stage.
inline ModelSpec two_stage_model(double x0, double a1, double a2, double sigma, double t1, double z = 1.0) {
    if (t1 <= 0.0) {
        return pure_ddm(x0, a2, sigma, z);
    }
    return ModelSpec{x0, {StageTheta::symmetric(a1, sigma, z, 0.0), StageTheta::symmetric(a2, sigma, z, t1)}};
}

struct SurfaceFixed {
    double a2 = 0.5;
    double sigma = 0.1;
    double x0 = 0.0;
    double t_nd = 0.3;
};

struct SurfaceCell {
    double a1;
    double t1;
    double z_star = undefined();
    double rr_star = undefined();
    std::size_t n_local_maxima = 0;
    bool boundary = false;
    std::string error; ///< nonempty when the cell could not be computed
};

/// Optimal threshold over an (a1, t1) grid, row-major in a1. Cells are
/// independent; a failing cell is recorded, not fatal.
inline std::vector<SurfaceCell> threshold_surface(const std::vector<double>& a1_grid, const std::vector<double>& t1_grid,
                                                  const SurfaceFixed& fixed, RewardConfig cfg, unsigned workers = 1) {
    if (a1_grid.empty() || t1_grid.empty()) {
        throw DomainError("threshold_surface: grids must be nonempty");
    }
    cfg.t_nd = fixed.t_nd;
    cfg.validate();
    std::vector<SurfaceCell> cells;
    for (double a1 : a1_grid) {
        for (double t1 : t1_grid) {
            SurfaceCell c;
            c.a1 = a1;
            c.t1 = t1;
            cells.push_back(std::move(c));
        }
    }
    auto solve = [&](std::size_t i) {
        auto& c = cells[i];
        try {
            const auto opt = optimize_threshold(two_stage_model(fixed.x0, c.a1, fixed.a2, fixed.sigma, c.t1), cfg);
            c.z_star = opt.z_star;
            c.rr_star = opt.rr_star;
            c.n_local_maxima = opt.local_maxima.size();
            c.boundary = opt.boundary;
        } catch (const std::exception& e) {
            c.error = e.what();
        }
    };
    workers = std::max(1u, workers);
    if (workers == 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            solve(i);
        }
        return cells;
    }
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < cells.size(); i += workers) {
                solve(i);
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    return cells;
}

} // namespace msddm
