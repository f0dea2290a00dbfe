#include <cmath>
#include <numbers>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

#include "msddm/core_ddm.hpp"

using namespace msddm;

namespace {

using Quad = boost::math::quadrature::gauss_kronrod<double, 61>;

// Textbook expressions for a start at x0 between +-z.
double oracle_er(double a, double s2, double z, double x0) {
    const double k = 2.0 * a / s2;
    return 1.0 / (1.0 + std::exp(k * z)) - (1.0 - std::exp(-k * x0)) / (std::exp(k * z) - std::exp(-k * z));
}

double oracle_mdt(double a, double s2, double z, double x0) {
    const double k = 2.0 * a / s2;
    return z / a * std::tanh(a * z / s2) +
           2.0 * z * (1.0 - std::exp(-k * x0)) / (a * (std::exp(k * z) - std::exp(-k * z))) - x0 / a;
}

// Eigenfunction series summed to a fixed number of terms, in units where the
// diffusion is one: separation A, relative start w, drift v toward the upper
// boundary. Returns the density at the lower boundary.
double brute_lower_density(double t, double v, double A, double w, int terms = 400) {
    double sum = 0.0;
    for (int k = 1; k <= terms; ++k) {
        sum += k * std::exp(-k * k * std::numbers::pi * std::numbers::pi * t / (2.0 * A * A)) *
               std::sin(k * std::numbers::pi * w);
    }
    return std::numbers::pi / (A * A) * std::exp(-v * A * w - v * v * t / 2.0) * sum;
}

double brute_density(double t, double x0, const StageTheta& th, Boundary b) {
    const double A = (th.upper - th.lower) / th.diffusion;
    const double w = (x0 - th.lower) / (th.upper - th.lower);
    const double v = th.drift / th.diffusion;
    // time in units of the diffusion: x / sigma is a unit Wiener process
    return b == Boundary::Lower ? brute_lower_density(t, v, A, w) : brute_lower_density(t, -v, A, 1.0 - w);
}

double gk(auto&& f, double lo, double hi) { return Quad::integrate(f, lo, hi, 15, 1e-13); }

const StageTheta kUnit = StageTheta::symmetric(1.0, 1.0, 1.0);

} // namespace

TEST(CoreDdm, ReferenceErrorRateAndMeanTime) {
    EXPECT_NEAR(error_rate(0.0, kUnit), 1.0 / (1.0 + std::exp(2.0)), 1e-14);
    EXPECT_NEAR(mean_decision_time(0.0, kUnit), std::tanh(1.0), 1e-14);
    EXPECT_NEAR(error_rate(0.0, kUnit), 0.119203, 5e-7);
    EXPECT_NEAR(mean_decision_time(0.0, kUnit), 0.761594, 5e-7);
}

TEST(CoreDdm, OffCentreStartMatchesTextbookForm) {
    for (double a : {0.3, 1.0, 2.5}) {
        for (double sig : {0.5, 1.0}) {
            const auto th = StageTheta::symmetric(a, sig, 0.8);
            for (double x0 : {-0.6, -0.2, 0.0, 0.35, 0.7}) {
                EXPECT_NEAR(error_rate(x0, th), oracle_er(a, sig * sig, 0.8, x0), 1e-12);
                EXPECT_NEAR(mean_decision_time(x0, th), oracle_mdt(a, sig * sig, 0.8, x0), 1e-11);
            }
        }
    }
}

TEST(CoreDdm, AsymmetricThresholdsUseTheirMidpoint) {
    const StageTheta th{0.7, 1.3, 2.0, -0.5, 0.0};
    const StageTheta shifted = StageTheta::symmetric(0.7, 1.3, 1.25);
    const double x0 = 0.4;
    EXPECT_NEAR(error_rate(x0, th), error_rate(x0 - 0.75, shifted), 1e-14);
    EXPECT_NEAR(mean_decision_time(x0, th), mean_decision_time(x0 - 0.75, shifted), 1e-14);
}

TEST(CoreDdm, DensityMatchesBruteForceSeries) {
    const StageTheta th{0.8, 0.9, 1.1, -0.7, 0.0};
    for (double x0 : {-0.5, 0.0, 0.6}) {
        for (double t : {0.05, 0.2, 0.7, 1.5, 4.0}) {
            for (auto b : {Boundary::Upper, Boundary::Lower}) {
                const double ref = brute_density(t, x0, th, b);
                const double got = conditional_fpt_density(t, x0, th, b).joint;
                EXPECT_NEAR(got, ref, 1e-10 * std::max(1.0, std::abs(ref))) << "t=" << t << " x0=" << x0;
            }
        }
    }
}

TEST(CoreDdm, SmallAndLargeTimeSeriesAgree) {
    // 50 points over sigma^2 t / z^2 in [0.5, 2]
    for (const auto& th : {kUnit, StageTheta::symmetric(-0.4, 0.7, 0.5), StageTheta::symmetric(3.0, 1.2, 2.0)}) {
        const double z = th.half_width();
        for (double x0 : {-0.3 * z, 0.0, 0.8 * z}) {
            for (int i = 0; i < 50; ++i) {
                const double r = 0.5 + 1.5 * i / 49.0;
                const double t = r * z * z / (th.diffusion * th.diffusion);
                for (auto b : {Boundary::Upper, Boundary::Lower}) {
                    const double s = conditional_fpt_density(t, x0, th, b, Representation::SmallTime).joint;
                    const double l = conditional_fpt_density(t, x0, th, b, Representation::LargeTime).joint;
                    EXPECT_NEAR(s, l, 1e-8);
                }
                EXPECT_NEAR(survival_probability(t, x0, th, Representation::SmallTime),
                            survival_probability(t, x0, th, Representation::LargeTime), 1e-10);
            }
        }
    }
}

TEST(CoreDdm, SsKernelMatchesDirectSum) {
    for (double t : {0.01, 0.3, 2.0}) {
        for (auto [u, v] : {std::pair{0.2, 1.0}, std::pair{0.9, 2.0}, std::pair{1.5, 1.6}}) {
            double ref = 0.0;
            for (int k = -300; k <= 300; ++k) {
                const double w = v - u + 2.0 * k * v;
                ref += w / (std::sqrt(2.0 * std::numbers::pi) * std::pow(t, 1.5)) * std::exp(-w * w / (2.0 * t));
            }
            EXPECT_NEAR(ss_kernel(t, u, v), ref, 1e-12 * std::max(1.0, std::abs(ref)));
        }
    }
    EXPECT_THROW(ss_kernel(1.0, 1.0, 1.0), DomainError);
    EXPECT_THROW(ss_kernel(0.0, 0.1, 1.0), DomainError);
}

TEST(CoreDdm, DensityIntegratesToHittingProbability) {
    const StageTheta th{0.6, 1.1, 1.4, -0.9, 0.0};
    const double x0 = 0.2;
    for (auto b : {Boundary::Upper, Boundary::Lower}) {
        auto f = [&](double t) { return t > 0.0 ? conditional_fpt_density(t, x0, th, b).joint : 0.0; };
        const double mass = gk(f, 0.0, 2.0) + gk(f, 2.0, 80.0);
        EXPECT_NEAR(mass, boundary_probability(x0, th, b), 1e-9);
        auto tf = [&](double t) { return t * f(t); };
        const double hat = gk(tf, 0.0, 2.0) + gk(tf, 2.0, 80.0);
        const auto ct = conditional_mean_dt(x0, th, b);
        EXPECT_NEAR(hat, ct.hat_mdt, 1e-8);
        EXPECT_NEAR(ct.mdt * boundary_probability(x0, th, b), ct.hat_mdt, 1e-13);
    }
}

TEST(CoreDdm, CdfDifferentiatesToDensity) {
    const auto th = StageTheta::symmetric(0.9, 0.8, 1.0);
    const double x0 = -0.25;
    const double h = 1e-5;
    for (double t : {0.1, 0.6, 1.5, 1.7, 5.0}) {
        for (auto b : {Boundary::Upper, Boundary::Lower}) {
            const double fd = (joint_fpt_cdf(t + h, x0, th, b) - joint_fpt_cdf(t - h, x0, th, b)) / (2.0 * h);
            EXPECT_NEAR(fd, conditional_fpt_density(t, x0, th, b).joint, 1e-7);
        }
        const double total = joint_fpt_cdf(t, x0, th, Boundary::Upper) + joint_fpt_cdf(t, x0, th, Boundary::Lower);
        EXPECT_NEAR(total + survival_probability(t, x0, th), 1.0, 1e-12);
    }
    EXPECT_NEAR(joint_fpt_cdf(200.0, x0, th, Boundary::Upper), boundary_probability(x0, th, Boundary::Upper), 1e-12);
}

TEST(CoreDdm, SurvivalJointDensityIntegratesToSurvival) {
    const StageTheta th{0.5, 1.0, 1.2, -0.8, 0.0};
    const double x0 = 0.3;
    for (double t : {0.05, 0.4, 1.0, 3.0}) {
        auto g = [&](double x) { return survival_joint_density(x, t, x0, th); };
        EXPECT_NEAR(gk(g, th.lower, th.upper), survival_probability(t, x0, th), 1e-10) << t;
        for (double x : {-0.5, 0.0, 0.9}) {
            EXPECT_NEAR(survival_joint_density(x, t, x0, th, Representation::SmallTime),
                        survival_joint_density(x, t, x0, th, Representation::LargeTime), 1e-10);
        }
    }
    EXPECT_EQ(survival_joint_density(1.3, 0.5, x0, th), 0.0);
}

TEST(CoreDdm, LaplaceTransformOracle) {
    const StageTheta th{0.7, 0.9, 1.0, -1.2, 0.0};
    const double x0 = 0.15;
    const double h = 1e-4;
    for (auto b : {Boundary::Upper, Boundary::Lower}) {
        const auto ct = conditional_mean_dt(x0, th, b);
        const double p = boundary_probability(x0, th, b);
        EXPECT_NEAR(fpt_laplace_conditional(0.0, x0, th, b), 1.0, 1e-10);
        const double slope = (fpt_laplace_conditional(h, x0, th, b) - fpt_laplace_conditional(-h, x0, th, b)) / (2.0 * h);
        EXPECT_NEAR(-slope, ct.mdt, 1e-5);
        EXPECT_NEAR(-slope * p, ct.hat_mdt, 1e-5);
        // the transform itself against quadrature of the density
        const double alpha = 0.8;
        auto f = [&](double t) { return t > 0.0 ? std::exp(-alpha * t) * conditional_fpt_density(t, x0, th, b).joint : 0.0; };
        EXPECT_NEAR(fpt_laplace_conditional(alpha, x0, th, b), (gk(f, 0.0, 2.0) + gk(f, 2.0, 60.0)) / p, 1e-9);
        double prev = 2.0;
        for (double a = -0.2; a <= 3.0; a += 0.2) {
            const double v = fpt_laplace_conditional(a, x0, th, b);
            EXPECT_LE(v, prev);
            prev = v;
        }
    }
}

TEST(CoreDdm, ContinuousAtZeroDrift) {
    const auto flat = StageTheta::symmetric(0.0, 1.0, 1.0);
    const auto tiny = StageTheta::symmetric(1e-7, 1.0, 1.0);
    const auto below = StageTheta::symmetric(-1e-7, 1.0, 1.0);
    for (double x0 : {0.0, 0.4}) {
        EXPECT_LT(std::abs(error_rate(x0, tiny) - error_rate(x0, flat)), 1e-5);
        EXPECT_LT(std::abs(error_rate(x0, below) - error_rate(x0, flat)), 1e-5);
        EXPECT_LT(std::abs(mean_decision_time(x0, tiny) - mean_decision_time(x0, flat)), 1e-5);
        for (auto b : {Boundary::Upper, Boundary::Lower}) {
            EXPECT_LT(std::abs(conditional_mean_dt(x0, tiny, b).mdt - conditional_mean_dt(x0, flat, b).mdt), 1e-5);
        }
    }
    // drift just above the degenerate switch
    const auto small = StageTheta::symmetric(1e-6, 1.0, 1.0);
    EXPECT_NEAR(mean_decision_time(0.4, small), 1.0 - 0.16, 1e-5);
    EXPECT_NEAR(error_rate(0.0, flat), 0.5, 1e-15);
    EXPECT_NEAR(mean_decision_time(0.0, flat), 1.0, 1e-15);
    EXPECT_NEAR(conditional_mean_dt(0.0, flat, Boundary::Upper).mdt, 1.0, 1e-12);
}

TEST(CoreDdm, NegativeDriftMirrorsPositive) {
    const auto pos = StageTheta::symmetric(1.3, 0.8, 1.0);
    const auto neg = StageTheta::symmetric(-1.3, 0.8, 1.0);
    const double x0 = 0.3;
    EXPECT_NEAR(boundary_probability(x0, neg, Boundary::Upper), boundary_probability(-x0, pos, Boundary::Lower), 1e-14);
    EXPECT_NEAR(mean_decision_time(x0, neg), mean_decision_time(-x0, pos), 1e-14);
    EXPECT_NEAR(conditional_mean_dt(x0, neg, Boundary::Lower).mdt, conditional_mean_dt(-x0, pos, Boundary::Upper).mdt,
                1e-13);
    EXPECT_NEAR(error_rate(x0, neg), boundary_probability(x0, neg, Boundary::Lower), 1e-15);
    EXPECT_GT(error_rate(x0, neg), 0.5);
    EXPECT_NEAR(fpt_density(0.4, x0, neg), fpt_density(0.4, -x0, pos), 1e-13);
}

TEST(CoreDdm, StrongDriftStaysFinite) {
    const auto th = StageTheta::symmetric(200.0, 0.1, 1.0);
    EXPECT_EQ(error_rate(0.0, th), 0.0);
    EXPECT_NEAR(mean_decision_time(0.0, th), 1.0 / 200.0, 1e-15);
    EXPECT_TRUE(std::isfinite(fpt_density(0.005, 0.0, th)));
    EXPECT_TRUE(std::isfinite(conditional_mean_dt(0.0, th, Boundary::Lower).hat_mdt));
}

TEST(CoreDdm, RejectsInvalidInput) {
    EXPECT_THROW(error_rate(1.0, kUnit), DomainError);
    EXPECT_THROW(error_rate(0.0, StageTheta::symmetric(1.0, 0.0, 1.0)), DomainError);
    EXPECT_THROW(error_rate(0.0, StageTheta{1.0, 1.0, -1.0, 1.0, 0.0}), DomainError);
    EXPECT_THROW(fpt_density(-0.1, 0.0, kUnit), DomainError);
    EXPECT_THROW(survival_joint_density(0.0, 0.0, 0.0, kUnit), DomainError);
}
