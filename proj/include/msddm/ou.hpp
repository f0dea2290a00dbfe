#pragma once

// Multistage Ornstein-Uhlenbeck first passage via time change.
//
// Within a stage dx = (a - lambda x) dt + sigma dW. With u = sigma^2
// (e^{2 lambda t} - 1)/(2 lambda) the scaled evidence Y = e^{lambda t} x is a
// Wiener process in u with drift a e^{-lambda t}/sigma^2 and unit diffusion,
// between thresholds (lower, upper) e^{lambda t}. The stage is cut into
// pieces of equal original-time length; on each piece drift and thresholds
// are frozen at their midpoint values and the transform is restarted at the
// piece start, so every piece is an ordinary Wiener stage followed by the
// affine map back to x. Since the process is time-homogeneous within a
// stage, all pieces of a stage share one transfer operator.
//
// The alternative centred transform Z = e^{lambda t} x - a (e^{lambda t}-1)/lambda
// removes the drift entirely and moves it into the threshold curves.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "msddm/aggregate.hpp"
#include "msddm/conditioned_density.hpp"
#include "msddm/core_ddm.hpp"
#include "msddm/errors.hpp"
#include "msddm/numerics.hpp"
#include "msddm/stage.hpp"

namespace msddm {

struct OuStage {
    double drift = 0.0;
    double leak = 0.0;
    double diffusion = 1.0;
    double upper = 1.0;
    double lower = -1.0;
    double start_time = 0.0;

    void validate() const {
        if (!(diffusion > 0.0) || !std::isfinite(diffusion)) {
            throw DomainError("diffusion must be positive and finite");
        }
        if (!(leak >= 0.0) || !std::isfinite(leak)) {
            throw DomainError("leak must be nonnegative and finite");
        }
        if (!std::isfinite(drift) || !std::isfinite(start_time) || !std::isfinite(upper) || !std::isfinite(lower)) {
            throw DomainError("stage parameters must be finite");
        }
    }

    StageTheta without_leak() const { return StageTheta{drift, diffusion, upper, lower, start_time}; }
};

struct OuModelSpec {
    double x0 = 0.0;
    std::vector<OuStage> stages;

    double stage_end(std::size_t i) const {
        return i + 1 < stages.size() ? stages[i + 1].start_time : kInfiniteTime;
    }

    ModelSpec without_leak() const {
        ModelSpec m{x0, {}};
        for (const auto& s : stages) {
            m.stages.push_back(s.without_leak());
        }
        return m;
    }

    void validate() const {
        without_leak().validate();
        for (std::size_t i = 0; i < stages.size(); ++i) {
            try {
                stages[i].validate();
            } catch (const DomainError& e) {
                throw DomainError("stages[" + std::to_string(i) + "]: " + e.what());
            }
        }
    }
};

/// u(t) = sigma^2 (e^{2 lambda (t - t_start)} - 1) / (2 lambda); sigma^2 (t - t_start)
/// when the leak vanishes.
inline double ou_time_transform(double t, const OuStage& stage) {
    const double dt = t - stage.start_time;
    if (!(dt >= 0.0)) {
        throw DomainError("ou_time_transform: time precedes the stage start");
    }
    return stage.diffusion * stage.diffusion * numerics::leak_integral(2.0 * stage.leak, dt);
}

/// Inverse of ou_time_transform.
inline double ou_time_inverse(double u, const OuStage& stage) {
    if (!(u >= 0.0)) {
        throw DomainError("ou_time_inverse: transformed time must be nonnegative");
    }
    const double x = 2.0 * stage.leak * u / (stage.diffusion * stage.diffusion);
    const double scaled = u / (stage.diffusion * stage.diffusion);
    const double ratio = std::abs(x) < 1e-12 ? 1.0 - 0.5 * x : std::log1p(x) / x;
    return stage.start_time + scaled * ratio;
}

/// Threshold curve of the centred (drift-free) transformed problem:
/// (+-z - a/lambda) sqrt(1 + 2 lambda u / sigma^2) + a/lambda, evaluated as
/// +-z e^{lambda dt} - a (e^{lambda dt} - 1)/lambda.
inline double ou_threshold_curve(double u, const OuStage& stage, Boundary b) {
    if (!(u >= 0.0)) {
        throw DomainError("ou_threshold_curve: transformed time must be nonnegative");
    }
    const double dt = ou_time_inverse(u, stage) - stage.start_time;
    const double grow = std::exp(stage.leak * dt);
    const double z = b == Boundary::Upper ? stage.upper : stage.lower;
    return z * grow - stage.drift * numerics::leak_integral(stage.leak, dt);
}

struct ThresholdPiece {
    double t_begin;
    double t_end;
    double u_begin;
    double u_end;
    double lower;
    double upper;
};

/// Splits [0, u_end] into pieces of equal original-time length with the
/// centred threshold curves sampled at each piece's midpoint.
inline std::vector<ThresholdPiece> discretize_thresholds(const OuStage& stage, double u_end, std::size_t pieces) {
    if (pieces < 1) {
        throw DomainError("discretize_thresholds: pieces must be at least 1");
    }
    const double t_end = ou_time_inverse(u_end, stage);
    const double len = (t_end - stage.start_time) / static_cast<double>(pieces);
    std::vector<ThresholdPiece> out;
    for (std::size_t i = 0; i < pieces; ++i) {
        const double tb = stage.start_time + len * static_cast<double>(i);
        const double te = i + 1 == pieces ? t_end : stage.start_time + len * static_cast<double>(i + 1);
        const double um = ou_time_transform(0.5 * (tb + te), stage);
        out.push_back(ThresholdPiece{tb, te, ou_time_transform(tb, stage), i + 1 == pieces ? u_end : ou_time_transform(te, stage),
                                     ou_threshold_curve(um, stage, Boundary::Lower),
                                     ou_threshold_curve(um, stage, Boundary::Upper)});
    }
    return out;
}

enum class OuTransform {
    ScaledEvidence,    ///< Y = e^{lambda t} x: drift kept, thresholds scaled
    CenteredThresholds ///< drift removed, thresholds follow the centred curves
};

struct OuOptions {
    std::size_t pieces = 32; ///< pieces per characteristic time min(1/lambda, z^2/sigma^2)
    std::size_t grid_size = kDefaultGridSize;
    std::vector<double> time_grid;
    bool compute_cdf = true;
    OuTransform transform = OuTransform::ScaledEvidence;
    double tail_survival = 1e-10; ///< last stage is followed piecewise until survival drops below this
};

namespace detail {

/// Transfer operator of one piece on a fixed x-grid.
///
/// Within a piece the transformed thresholds still move. Each start node is
/// evaluated in a frame that travels with the nearer threshold's slope at the
/// piece midpoint, which makes that threshold flat to first order; the far
/// threshold is frozen at its midpoint value.
struct OuPieceOperator {
    double delta = 0.0; ///< original-time length
    double lambda = 0.0;
    double sigma = 1.0;
    double exit_scale = 1.0; ///< x = (Y + exit_shift) / exit_scale at the piece end
    double exit_shift = 0.0;
    double u_len = 0.0;
    double u_mid = 0.0;      ///< transformed time at the original-time midpoint
    double slope_up = 0.0;   ///< threshold slopes in transformed time at u_mid
    double slope_lo = 0.0;
    double x_center = 0.0;   ///< nodes at or above it use the upper frame
    StageTheta wiener;          ///< midpoint thresholds and free drift in transformed time
    std::vector<char> inside;   ///< x-node within the thresholds of its frame
    std::vector<char> above;    ///< x-node beyond the upper threshold at entry
    std::vector<double> weight; ///< quadrature weights of the x-grid
    std::vector<double> surv;   ///< w_k P(no decision in piece | y_k)
    std::vector<double> f_up, f_lo;
    std::vector<double> tm_up, tm_lo; ///< w_k E[tau' 1(b, decided in piece) | y_k]
    std::vector<double> matrix;       ///< n x n, empty when the kernel is too narrow for the grid
    int exit_side = 0;                ///< +1 / -1 when exit support spills over a threshold
    std::vector<double> u_nodes;      ///< transformed times of the tau' quadrature
    std::vector<double> t_weights;    ///< its weights in original time

    double u_of(double tp) const { return sigma * sigma * numerics::leak_integral(2.0 * lambda, tp); }
    double slope_for(double y) const { return y >= x_center ? slope_up : slope_lo; }
    double drift_for(double slope) const { return wiener.drift - slope; }
    double start_coord(double y) const { return y + slope_for(y) * u_mid; }
    double end_coord(double x, double slope) const {
        return exit_scale * x - exit_shift - slope * (u_len - u_mid);
    }
    /// +1 above, -1 below, 0 inside the frame's thresholds at entry.
    int entry_side(double y) const {
        const double eps = 1e-12 * (wiener.upper - wiener.lower);
        const double c = start_coord(y);
        return c > wiener.upper + eps ? 1 : (c < wiener.lower - eps ? -1 : 0);
    }
};

inline Frame piece_frame(const OuPieceOperator& op, double y) {
    const double z = op.wiener.half_width();
    return Frame{z, std::clamp(op.start_coord(y) - op.wiener.center(), -z, z), op.drift_for(op.slope_for(y)), 1.0};
}

/// Per-start quantities of one piece: survival, decided probabilities and
/// decided time masses (tau' measured from the piece start).
struct PieceNode {
    double surv = 0.0, f_up = 0.0, f_lo = 0.0, tm_up = 0.0, tm_lo = 0.0;
};

inline PieceNode piece_node(const OuPieceOperator& op, double y) {
    const double tol = numerics::kDefaultSeriesTol;
    const Frame f = piece_frame(op, y);
    PieceNode r;
    r.f_up = joint_fpt_cdf(op.u_len, f, Boundary::Upper, Representation::Auto, tol);
    r.f_lo = joint_fpt_cdf(op.u_len, f, Boundary::Lower, Representation::Auto, tol);
    double iu = 0.0, il = 0.0;
    for (std::size_t g = 0; g < op.u_nodes.size(); ++g) {
        iu += op.t_weights[g] * joint_fpt_cdf(op.u_nodes[g], f, Boundary::Upper, Representation::Auto, tol);
        il += op.t_weights[g] * joint_fpt_cdf(op.u_nodes[g], f, Boundary::Lower, Representation::Auto, tol);
    }
    r.surv = survival_probability(op.u_len, f, Representation::Auto, tol);
    r.tm_up = op.delta * r.f_up - iu;
    r.tm_lo = op.delta * r.f_lo - il;
    return r;
}

inline OuPieceOperator build_piece_operator(double lower, double upper, std::size_t n, const OuStage& st,
                                            double delta, OuTransform tf) {
    OuPieceOperator op;
    op.delta = delta;
    op.lambda = st.leak;
    op.sigma = st.diffusion;
    const double grow_half = std::exp(0.5 * st.leak * delta);
    const double grow = std::exp(st.leak * delta);
    const double var = st.diffusion * st.diffusion;
    op.exit_scale = grow;
    op.u_len = op.u_of(delta);
    op.u_mid = op.u_of(0.5 * delta);
    op.x_center = 0.5 * (lower + upper);
    // d/du of Z e^{lambda tau(u)} is Z lambda / (sigma^2 e^{lambda tau}); the
    // centred curves also lose a / (sigma^2 e^{lambda tau}).
    const double dg = st.leak / (var * grow_half);
    if (tf == OuTransform::ScaledEvidence) {
        op.wiener = StageTheta{st.drift / (var * grow_half), 1.0, upper * grow_half, lower * grow_half, 0.0};
        op.exit_shift = 0.0;
        op.slope_up = upper * dg;
        op.slope_lo = lower * dg;
    } else {
        const double shift_half = st.drift * numerics::leak_integral(st.leak, 0.5 * delta);
        op.wiener = StageTheta{0.0, 1.0, upper * grow_half - shift_half, lower * grow_half - shift_half, 0.0};
        op.exit_shift = st.drift * numerics::leak_integral(st.leak, delta);
        op.slope_up = upper * dg - st.drift / (var * grow_half);
        op.slope_lo = lower * dg - st.drift / (var * grow_half);
    }
    const double tail = op.u_len - op.u_mid;
    const double exit_hi = (op.wiener.upper + op.slope_up * tail + op.exit_shift) / op.exit_scale;
    const double exit_lo = (op.wiener.lower + op.slope_lo * tail + op.exit_shift) / op.exit_scale;
    const double over_hi = exit_hi - upper;
    const double over_lo = lower - exit_lo;
    if (over_hi > 1e-9 * (upper - lower) || over_lo > 1e-9 * (upper - lower)) {
        op.exit_side = over_hi >= over_lo ? 1 : -1;
    }

    const double h = (upper - lower) / static_cast<double>(n - 1);
    const double u_len = op.u_len;
    op.inside.assign(n, 0);
    op.above.assign(n, 0);
    op.weight.resize(n);
    op.surv.assign(n, 0.0);
    op.f_up.assign(n, 0.0);
    op.f_lo.assign(n, 0.0);
    op.tm_up.assign(n, 0.0);
    op.tm_lo.assign(n, 0.0);

    // Graded Gauss-Legendre panels in tau' for int_0^delta F_b(u(tau')) dtau';
    // F_b rises steeply near tau' = 0 for starts close to a threshold.
    static constexpr double gx[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                     -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                     0.7966664774136267,  0.9602898564975363};
    static constexpr double gw[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                     0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                     0.2223810344533745, 0.1012285362903763};
    const double edges[6] = {0.0, delta / 256.0, delta / 64.0, delta / 16.0, delta / 4.0, delta};
    for (int p = 0; p < 5; ++p) {
        const double a = edges[p], b = edges[p + 1];
        for (int q = 0; q < 8; ++q) {
            op.u_nodes.push_back(op.u_of(0.5 * (a + b) + 0.5 * (b - a) * gx[q]));
            op.t_weights.push_back(0.5 * (b - a) * gw[q]);
        }
    }
    for (std::size_t k = 0; k < n; ++k) {
        const double y = lower + h * static_cast<double>(k);
        op.weight[k] = numerics::gregory_weight(k, n - 1, h);
        const int side = op.entry_side(y);
        if (side != 0) {
            op.above[k] = side > 0 ? 1 : 0;
            continue;
        }
        op.inside[k] = 1;
        const PieceNode q = piece_node(op, y);
        const double w = op.weight[k];
        op.surv[k] = w * q.surv;
        op.f_up[k] = w * q.f_up;
        op.f_lo[k] = w * q.f_lo;
        op.tm_up[k] = w * q.tm_up;
        op.tm_lo[k] = w * q.tm_lo;
    }

    const double width = std::sqrt(u_len);
    if (width >= 2.0 * h) {
        const SurvivalKernel k_up(u_len, op.wiener.half_width(), op.drift_for(op.slope_up), 1.0);
        const SurvivalKernel k_lo(u_len, op.wiener.half_width(), op.drift_for(op.slope_lo), 1.0);
        const double c = op.wiener.center();
        const double reach = 12.0 * width + 2.0 * h;
        op.matrix.assign(n * n, 0.0);
        for (std::size_t k = 0; k < n; ++k) {
            if (!op.inside[k]) {
                continue;
            }
            const double y = lower + h * static_cast<double>(k);
            const double slope = op.slope_for(y);
            const auto& kernel = slope == op.slope_up ? k_up : k_lo;
            const double y0 = op.start_coord(y);
            const double shift = op.drift_for(slope) * u_len;
            for (std::size_t j = 1; j + 1 < n; ++j) {
                const double yo = op.end_coord(lower + h * static_cast<double>(j), slope);
                if (std::abs(yo - y0 - shift) > reach) {
                    continue;
                }
                op.matrix[j * n + k] = op.exit_scale * op.weight[k] * kernel(yo - c, y0 - c);
            }
        }
    }
    return op;
}

/// Output density values (unnormalized) for input density values p.
inline std::vector<double> apply_piece(const OuPieceOperator& op, const ConditionedDensity& in, std::size_t n) {
    std::vector<double> out(n, 0.0);
    const double c = op.wiener.center();
    const double z = op.wiener.half_width();
    const double h = (in.upper() - in.lower()) / static_cast<double>(n - 1);
    auto kernel_for = [&](double slope) {
        return SurvivalKernel(op.u_len, z, op.drift_for(slope), 1.0);
    };
    if (in.is_point_mass()) {
        const double y = in.point();
        if (op.entry_side(y) != 0) {
            return out;
        }
        const double slope = op.slope_for(y);
        const auto kernel = kernel_for(slope);
        const double y0 = std::clamp(op.start_coord(y) - c, -z, z);
        for (std::size_t j = 1; j + 1 < n; ++j) {
            out[j] = op.exit_scale * kernel(op.end_coord(in.lower() + h * static_cast<double>(j), slope) - c, y0);
        }
        return out;
    }
    const auto p = in.values();
    if (!op.matrix.empty()) {
        for (std::size_t j = 1; j + 1 < n; ++j) {
            const double* row = &op.matrix[j * n];
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                acc += row[k] * p[k];
            }
            out[j] = acc;
        }
        return out;
    }
    // Short piece: the kernel is narrower than the grid, so the source is
    // refined by interpolation before integrating.
    const auto k_up = kernel_for(op.slope_up);
    const auto k_lo = kernel_for(op.slope_lo);
    const double w = std::sqrt(op.u_len);
    const auto sub = std::min<std::size_t>(256, static_cast<std::size_t>(std::ceil(2.0 * h / w)));
    const std::size_t last = (n - 1) * sub;
    const double h_src = h / static_cast<double>(sub);
    const double reach = 12.0 * w + 2.0 * h_src;
    std::vector<double> src(last + 1), y0(last + 1);
    std::vector<char> upper_frame(last + 1);
    for (std::size_t m = 0; m <= last; ++m) {
        const double y = in.lower() + h_src * static_cast<double>(m);
        src[m] = op.entry_side(y) == 0 ? (m % sub == 0 ? p[m / sub] : in.value_at(y)) : 0.0;
        y0[m] = std::clamp(op.start_coord(y) - c, -z, z);
        upper_frame[m] = op.slope_for(y) == op.slope_up ? 1 : 0;
    }
    for (std::size_t j = 1; j + 1 < n; ++j) {
        const double x = in.lower() + h * static_cast<double>(j);
        double acc = 0.0;
        for (int f = 0; f < 2; ++f) {
            const double slope = f == 0 ? op.slope_up : op.slope_lo;
            const auto& kernel = f == 0 ? k_up : k_lo;
            const double yo = op.end_coord(x, slope) - c;
            const double y_mid = yo - op.drift_for(slope) * op.u_len;
            const double base = in.lower() + slope * op.u_mid - c;
            const double lo = std::max(0.0, std::floor((y_mid - reach - base) / h_src));
            const double hi = std::min(static_cast<double>(last), std::ceil((y_mid + reach - base) / h_src));
            if (lo > hi) {
                continue;
            }
            for (auto m = static_cast<std::size_t>(lo); m <= static_cast<std::size_t>(hi); ++m) {
                if (src[m] == 0.0 || upper_frame[m] != (f == 0 ? 1 : 0)) {
                    continue;
                }
                acc += numerics::gregory_weight(m, last, h_src) * src[m] * kernel(yo, y0[m]);
            }
        }
        out[j] = op.exit_scale * acc;
    }
    return out;
}

inline double dot(const std::vector<double>& c, std::span<const double> p) {
    double acc = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) {
        acc += c[k] * p[k];
    }
    return acc;
}

} // namespace detail

/// Piecewise solution of a multistage O-U model.
class OuSolution {
public:
    OuSolution(const OuModelSpec& spec, const OuOptions& opt) : spec_(spec), opt_(opt) {
        spec_.validate();
        if (opt.pieces < 1) {
            throw DomainError("pieces must be at least 1");
        }
        if (opt.grid_size < 2) {
            throw DomainError("grid_size must be at least 2");
        }
        run();
    }

    const std::vector<StageMetrics>& per_stage() const noexcept { return metrics_; }
    const std::vector<Atom>& atoms() const noexcept { return atoms_; }
    std::size_t piece_count() const noexcept { return pieces_.size(); }

    double joint_cdf(double t, Boundary b) const {
        if (pieces_.empty() || t < pieces_.front().t_begin) {
            // only a collapse at the very start could put mass here
            return t >= spec_.stages.front().start_time ? atoms_before(t, b) : 0.0;
        }
        std::size_t p = locate(t);
        const Piece& pc = pieces_[p];
        double acc = b == Boundary::Upper ? pc.cum_up : pc.cum_lo;
        if (t >= pc.t_end) {
            // past the last tracked piece: only collapse atoms remain
            return std::min(1.0, acc + pc.entry * pc.share(b) + atoms_from(pc.t_end, t, b));
        }
        acc += pc.entry * (b == Boundary::Upper ? pc.atom_in_up : pc.atom_in_lo);
        const double tp = t - pc.t_begin;
        if (tp > 0.0) {
            acc += pc.entry * piece_joint_cdf(pc, tp, b);
        }
        return std::min(acc, 1.0);
    }

    double cdf(double t) const { return std::min(1.0, joint_cdf(t, Boundary::Upper) + joint_cdf(t, Boundary::Lower)); }

    FptResult result() const {
        FptResult r;
        r.per_stage = metrics_;
        r.atoms = atoms_;
        std::vector<double> grid;
        if (opt_.compute_cdf) {
            if (opt_.time_grid.empty()) {
                std::vector<double> starts;
                for (const auto& st : spec_.stages) {
                    starts.push_back(st.start_time);
                }
                grid = detail::default_time_grid([this](double t) { return cdf(t); },
                                                 spec_.stages.front().start_time, spec_.stages.back().start_time,
                                                 starts, 512);
            } else {
                grid = opt_.time_grid;
            }
        }
        detail::assemble_result(r, *this, grid, opt_.compute_cdf);
        return r;
    }

private:
    struct Piece {
        std::size_t stage;
        int op;          ///< operator index, -1 for the open-ended tail piece
        double t_begin;
        double t_end;
        double entry;    ///< unconditional P(alive) entering the piece
        double cum_up;   ///< unconditional decided mass at the upper threshold before the piece
        double cum_lo;
        double atom_in_up = 0.0, atom_in_lo = 0.0; ///< conditional, at t_begin
        double dec_up = 0.0, dec_lo = 0.0;         ///< conditional, including exit atoms
        ConditionedDensity density;

        double share(Boundary b) const {
            return b == Boundary::Upper ? atom_in_up + dec_up : atom_in_lo + dec_lo;
        }
    };

    std::size_t locate(double t) const {
        auto it = std::upper_bound(pieces_.begin(), pieces_.end(), t,
                                   [](double v, const Piece& pc) { return v < pc.t_begin; });
        return static_cast<std::size_t>(it - pieces_.begin()) - 1;
    }

    double atoms_before(double t, Boundary b) const {
        double acc = 0.0;
        for (const auto& a : atoms_) {
            if (a.time <= t && a.boundary == b) {
                acc += a.mass;
            }
        }
        return acc;
    }

    double atoms_from(double t0, double t, Boundary b) const {
        double acc = 0.0;
        for (const auto& a : atoms_) {
            if (a.time >= t0 && a.time <= t && a.boundary == b) {
                acc += a.mass;
            }
        }
        return acc;
    }

    double piece_joint_cdf(const Piece& pc, double tp, Boundary b) const {
        const double tol = numerics::kDefaultSeriesTol;
        if (pc.op < 0) {
            const StageTheta th = spec_.stages[pc.stage].without_leak();
            StageTheta shifted = th;
            shifted.start_time = pc.t_begin;
            return stage_joint_cdf(pc.t_begin + tp, pc.density, shifted, b);
        }
        const auto& op = ops_[static_cast<std::size_t>(pc.op)];
        tp = std::min(tp, op.delta);
        const double u = op.u_of(tp);
        if (pc.density.is_point_mass()) {
            const double y = pc.density.point();
            if (op.entry_side(y) != 0) {
                return 0.0;
            }
            return detail::joint_fpt_cdf(u, detail::piece_frame(op, y), b, Representation::Auto, tol);
        }
        const auto p = pc.density.values();
        double acc = 0.0;
        const double h = pc.density.spacing();
        for (std::size_t k = 0; k < p.size(); ++k) {
            if (!op.inside[k] || p[k] == 0.0) {
                continue;
            }
            const double y = pc.density.lower() + h * static_cast<double>(k);
            acc += op.weight[k] * p[k] *
                   detail::joint_fpt_cdf(u, detail::piece_frame(op, y), b, Representation::Auto, tol);
        }
        return acc;
    }

    double characteristic_piece(const OuStage& st) const {
        const double z = 0.5 * (st.upper - st.lower);
        double scale = z * z / (st.diffusion * st.diffusion);
        if (st.leak > 0.0) {
            scale = std::min(scale, 1.0 / st.leak);
        }
        return scale / static_cast<double>(opt_.pieces);
    }

    void add_atom(double t, double mass, Boundary b) {
        if (mass > 0.0) {
            atoms_.push_back(Atom{t, mass, b});
        }
    }

    void run() {
        const auto& st = spec_.stages;
        const std::size_t n = opt_.grid_size + 2;
        std::optional<ConditionedDensity> alive;
        double alive_mass = 1.0;
        double cum_up = 0.0, cum_lo = 0.0;
        for (std::size_t i = 0; i < st.size(); ++i) {
            const auto& s = st[i];
            const double t_end = spec_.stage_end(i);
            StageMetrics m;
            m.start_time = s.start_time;
            m.end_time = t_end;
            if (!(s.lower < s.upper)) {
                const auto [up, lo] = absorb_all(*alive, s.lower, s.upper);
                m.collapsed = true;
                m.entry_probability = 0.0;
                m.stage_survival = 0.0;
                m.p_decide = 0.0;
                m.atom_upper = alive_mass * up;
                m.atom_lower = alive_mass * lo;
                add_atom(s.start_time, m.atom_upper, Boundary::Upper);
                add_atom(s.start_time, m.atom_lower, Boundary::Lower);
                metrics_.push_back(m);
                break;
            }
            ConditionedDensity in =
                i == 0 ? ConditionedDensity::point_mass(spec_.x0, s.lower, s.upper, 1.0) : *alive;
            if (i > 0) {
                auto change = apply_threshold_change(*alive, s.lower, s.upper, opt_.grid_size);
                m.atom_upper = alive_mass * change.atom_upper;
                m.atom_lower = alive_mass * change.atom_lower;
                add_atom(s.start_time, m.atom_upper, Boundary::Upper);
                add_atom(s.start_time, m.atom_lower, Boundary::Lower);
                cum_up += m.atom_upper;
                cum_lo += m.atom_lower;
                alive_mass *= 1.0 - change.atom_upper - change.atom_lower;
                in = std::move(change.density_out);
            }
            const double entry = alive_mass;
            double dec_up = 0.0, dec_lo = 0.0, tm_up = 0.0, tm_lo = 0.0;
            const double d_char = characteristic_piece(s);
            std::size_t count;
            double delta;
            const bool last = !std::isfinite(t_end);
            if (last) {
                delta = d_char;
                count = 1000000;
            } else {
                const double dur = t_end - s.start_time;
                count = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(dur / d_char - 1e-9)));
                delta = dur / static_cast<double>(count);
            }
            ops_.push_back(detail::build_piece_operator(in.lower(), in.upper(), n, s, delta, opt_.transform));
            const int op_index = static_cast<int>(ops_.size()) - 1;
            ConditionedDensity cur = std::move(in);
            for (std::size_t q = 0; q < count; ++q) {
                const double tb = s.start_time + delta * static_cast<double>(q);
                if (last && alive_mass < opt_.tail_survival) {
                    // open-ended leak-free tail carries the negligible remainder
                    Piece tail{i, -1, tb, kInfiniteTime, alive_mass, cum_up, cum_lo, 0.0, 0.0, 0.0, 0.0, cur};
                    StageTheta th = s.without_leak();
                    th.start_time = tb;
                    const auto sm = stage_metrics(cur, nullptr, 0.0, th, tb, kInfiniteTime);
                    tail.dec_up = sm.p_upper;
                    tail.dec_lo = sm.p_lower;
                    dec_up += alive_mass * sm.p_upper;
                    dec_lo += alive_mass * sm.p_lower;
                    if (sm.p_upper > 0.0) {
                        tm_up += alive_mass * sm.p_upper * sm.cond_mdt_upper;
                    }
                    if (sm.p_lower > 0.0) {
                        tm_lo += alive_mass * sm.p_lower * sm.cond_mdt_lower;
                    }
                    cum_up += alive_mass * sm.p_upper;
                    cum_lo += alive_mass * sm.p_lower;
                    alive_mass = 0.0;
                    pieces_.push_back(std::move(tail));
                    break;
                }
                const double te = (!last && q + 1 == count) ? t_end : s.start_time + delta * static_cast<double>(q + 1);
                const auto& op = ops_[static_cast<std::size_t>(op_index)];
                Piece pc{i, op_index, tb, te, alive_mass, cum_up, cum_lo, 0.0, 0.0, 0.0, 0.0, cur};
                const auto step = step_quantities(op, cur);
                const double in_up = step.in_up, in_lo = step.in_lo;
                pc.atom_in_up = in_up;
                pc.atom_in_lo = in_lo;
                const double fu = step.node.f_up;
                const double fl = step.node.f_lo;
                double surv = step.node.surv;
                const double tmu = step.node.tm_up;
                const double tml = step.node.tm_lo;
                std::vector<double> out = detail::apply_piece(op, cur, n);
                const double h = (cur.upper() - cur.lower()) / static_cast<double>(n - 1);
                double out_mass = 0.0;
                for (std::size_t k = 0; k < out.size(); ++k) {
                    out_mass += numerics::gregory_weight(k, out.size() - 1, h) * out[k];
                }
                double exit_up = 0.0, exit_lo = 0.0;
                if (op.exit_side != 0) {
                    const double spill = std::max(0.0, surv - out_mass);
                    (op.exit_side > 0 ? exit_up : exit_lo) = spill;
                    surv -= spill;
                }
                pc.dec_up = fu + exit_up;
                pc.dec_lo = fl + exit_lo;
                const double w = alive_mass;
                add_atom(tb, w * in_up, Boundary::Upper);
                add_atom(tb, w * in_lo, Boundary::Lower);
                add_atom(te, w * exit_up, Boundary::Upper);
                add_atom(te, w * exit_lo, Boundary::Lower);
                dec_up += w * (in_up + fu + exit_up);
                dec_lo += w * (in_lo + fl + exit_lo);
                tm_up += w * (in_up * tb + fu * tb + tmu + exit_up * te);
                tm_lo += w * (in_lo * tb + fl * tb + tml + exit_lo * te);
                cum_up += w * (in_up + fu + exit_up);
                cum_lo += w * (in_lo + fl + exit_lo);
                alive_mass *= surv;
                pieces_.push_back(std::move(pc));
                if (!(out_mass > 0.0) || !(alive_mass > 0.0)) {
                    alive_mass = 0.0;
                    alive.reset();
                    break;
                }
                cur = ConditionedDensity::on_grid(cur.lower(), cur.upper(), std::move(out), alive_mass);
            }
            if (alive_mass > 0.0) {
                alive = cur;
            }
            m.entry_probability = entry;
            if (entry > 0.0) {
                m.p_upper = dec_up / entry;
                m.p_lower = dec_lo / entry;
                m.p_decide = m.p_upper + m.p_lower;
                m.stage_survival = last ? 0.0 : alive_mass / entry;
                if (m.p_decide > 0.0) {
                    m.er_i = m.p_lower / m.p_decide;
                    m.mdt_i = (tm_up + tm_lo) / (dec_up + dec_lo);
                }
                if (dec_up > 0.0) {
                    m.cond_mdt_upper = tm_up / dec_up;
                    m.hat_mdt_upper = (1.0 - m.er_i) * m.cond_mdt_upper;
                }
                if (dec_lo > 0.0) {
                    m.cond_mdt_lower = tm_lo / dec_lo;
                    m.hat_mdt_lower = m.er_i * m.cond_mdt_lower;
                }
            }
            metrics_.push_back(m);
            if (!(alive_mass > 0.0)) {
                // nothing left for later stages
                for (std::size_t j = i + 1; j < st.size(); ++j) {
                    StageMetrics e;
                    e.start_time = st[j].start_time;
                    e.end_time = spec_.stage_end(j);
                    e.entry_probability = 0.0;
                    e.p_decide = 0.0;
                    metrics_.push_back(e);
                }
                break;
            }
        }
    }

    struct Step {
        double in_up = 0.0, in_lo = 0.0;
        detail::PieceNode node;
    };

    static Step step_quantities(const detail::OuPieceOperator& op, const ConditionedDensity& cur) {
        Step r;
        if (cur.is_point_mass()) {
            const double y = cur.point();
            const int side = op.entry_side(y);
            if (side > 0) {
                r.in_up = 1.0;
            } else if (side < 0) {
                r.in_lo = 1.0;
            } else {
                r.node = detail::piece_node(op, y);
            }
            return r;
        }
        const auto p = cur.values();
        for (std::size_t k = 0; k < p.size(); ++k) {
            if (!op.inside[k]) {
                (op.above[k] ? r.in_up : r.in_lo) += op.weight[k] * p[k];
            }
        }
        r.node.f_up = detail::dot(op.f_up, p);
        r.node.f_lo = detail::dot(op.f_lo, p);
        r.node.surv = detail::dot(op.surv, p);
        r.node.tm_up = detail::dot(op.tm_up, p);
        r.node.tm_lo = detail::dot(op.tm_lo, p);
        return r;
    }

    OuModelSpec spec_;
    OuOptions opt_;
    std::vector<detail::OuPieceOperator> ops_;
    std::vector<Piece> pieces_;
    std::vector<StageMetrics> metrics_;
    std::vector<Atom> atoms_;
};

inline FptResult ou_fpt_distribution(const OuModelSpec& spec, const OuOptions& opt = {}) {
    return OuSolution(spec, opt).result();
}

} // namespace msddm
