#include <cmath>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

#include "msddm/ou.hpp"

using namespace msddm;

namespace {

using Quad = boost::math::quadrature::gauss_kronrod<double, 61>;

double gk(auto&& f, double lo, double hi) { return Quad::integrate(f, lo, hi, 15, 1e-13); }

// Exit from (l, r) for dx = (a - lambda x) dt + sigma dW via the scale density
// s(y) = exp(-(2 a y - lambda y^2) / sigma^2) and the speed density 2 / (sigma^2 s).
struct ExitOracle {
    double a, lambda, sigma, l, r;

    double log_s(double y) const { return -(2.0 * a * y - lambda * y * y) / (sigma * sigma); }
    double S(double x) const { return gk([&](double y) { return std::exp(log_s(y)); }, l, x); }

    double p_upper(double x) const { return S(x) / S(r); }

    double mean_time(double x) const {
        const double sr = S(r), sx = S(x);
        auto m = [&](double y) { return 2.0 / (sigma * sigma) * std::exp(-log_s(y)); };
        const double left = gk([&](double y) { return S(y) * (sr - sx) * m(y); }, l, x);
        const double right = gk([&](double y) { return sx * (sr - S(y)) * m(y); }, x, r);
        return (left + right) / sr;
    }
};

OuModelSpec single(double a, double lambda, double sigma, double z, double x0 = 0.0) {
    return OuModelSpec{x0, {OuStage{a, lambda, sigma, z, -z, 0.0}}};
}

OuOptions options(std::size_t pieces, OuTransform tf = OuTransform::ScaledEvidence) {
    OuOptions o;
    o.pieces = pieces;
    o.compute_cdf = false;
    o.transform = tf;
    return o;
}

} // namespace

TEST(Ou, TimeTransform) {
    const OuStage st{0.0, 1.0, 1.0, 1.0, -1.0, 0.0};
    EXPECT_NEAR(ou_time_transform(1.0, st), (std::exp(2.0) - 1.0) / 2.0, 1e-14);
    EXPECT_NEAR(ou_time_transform(1.0, st), 3.194528, 5e-7);
    OuStage later = st;
    later.start_time = 2.0;
    EXPECT_NEAR(ou_time_transform(3.0, later), ou_time_transform(1.0, st), 1e-14);
    EXPECT_THROW(ou_time_transform(1.0, later), DomainError);
    const OuStage flat{0.0, 0.0, 1.5, 1.0, -1.0, 0.0};
    EXPECT_NEAR(ou_time_transform(2.0, flat), 2.25 * 2.0, 1e-14);
    const OuStage tiny{0.0, 1e-13, 1.5, 1.0, -1.0, 0.0};
    EXPECT_NEAR(ou_time_transform(2.0, tiny), 4.5, 1e-10);
    for (double t : {0.0, 1e-6, 0.3, 2.0, 7.0}) {
        EXPECT_NEAR(ou_time_inverse(ou_time_transform(t, st), st), t, 1e-12 * std::max(1.0, t));
        EXPECT_NEAR(ou_time_inverse(ou_time_transform(t, flat), flat), t, 1e-13 * std::max(1.0, t));
    }
}

TEST(Ou, ThresholdCurves) {
    const OuStage st{1.0, 1.0, 1.0, 2.0, -2.0, 0.0};
    EXPECT_NEAR(ou_threshold_curve(0.0, st, Boundary::Upper), 2.0, 1e-14);
    EXPECT_NEAR(ou_threshold_curve(0.0, st, Boundary::Lower), -2.0, 1e-14);
    const double u = ou_time_transform(1.0, st);
    EXPECT_NEAR(ou_threshold_curve(u, st, Boundary::Upper), std::exp(1.0) + 1.0, 1e-12);
    // the sqrt form of the same curve
    for (double uu : {0.1, 1.0, 5.0}) {
        const double g = std::sqrt(1.0 + 2.0 * st.leak * uu / (st.diffusion * st.diffusion));
        EXPECT_NEAR(ou_threshold_curve(uu, st, Boundary::Lower), (-2.0 - 1.0) * g + 1.0, 1e-12);
    }
}

TEST(Ou, DiscretizationSamplesMidpoints) {
    const OuStage st{0.5, 0.7, 1.2, 1.5, -1.0, 0.3};
    const double u_end = ou_time_transform(2.3, st);
    const auto pcs = discretize_thresholds(st, u_end, 8);
    ASSERT_EQ(pcs.size(), 8u);
    EXPECT_NEAR(pcs.front().t_begin, 0.3, 1e-15);
    EXPECT_NEAR(pcs.back().t_end, 2.3, 1e-12);
    EXPECT_DOUBLE_EQ(pcs.back().u_end, u_end);
    for (std::size_t i = 0; i < pcs.size(); ++i) {
        EXPECT_NEAR(pcs[i].t_end - pcs[i].t_begin, 0.25, 1e-12);
        if (i > 0) {
            EXPECT_DOUBLE_EQ(pcs[i].t_begin, pcs[i - 1].t_end);
        }
        const double um = ou_time_transform(0.5 * (pcs[i].t_begin + pcs[i].t_end), st);
        EXPECT_DOUBLE_EQ(pcs[i].upper, ou_threshold_curve(um, st, Boundary::Upper));
        EXPECT_LT(pcs[i].lower, pcs[i].upper);
    }
    const auto one = discretize_thresholds(st, u_end, 1);
    EXPECT_EQ(one.size(), 1u);
    EXPECT_THROW(discretize_thresholds(st, u_end, 0), DomainError);
}

TEST(Ou, MatchesExactExitOracle) {
    for (auto [a, lambda, sigma, z, x0] : {std::tuple{0.5, 0.5, 1.0, 2.0, 0.0}, std::tuple{1.0, 2.0, 0.8, 1.0, 0.3},
                                           std::tuple{-0.3, 0.2, 1.0, 1.0, -0.2}}) {
        const ExitOracle o{a, lambda, sigma, -z, z};
        const auto r = ou_fpt_distribution(single(a, lambda, sigma, z, x0), options(64));
        EXPECT_NEAR(r.p_upper, o.p_upper(x0), 5e-5) << a << ' ' << lambda;
        EXPECT_NEAR(r.overall_mdt, o.mean_time(x0), 5e-5 * o.mean_time(x0)) << a << ' ' << lambda;
    }
}

TEST(Ou, VanishingLeakReducesToMultistage) {
    const OuModelSpec spec{0.1,
                           {OuStage{1.0, 1e-6, 1.0, 1.0, -1.0, 0.0}, OuStage{-0.5, 1e-6, 0.8, 0.8, -0.9, 0.5},
                            OuStage{0.7, 1e-6, 1.2, 1.1, -1.1, 1.2}}};
    const auto r = ou_fpt_distribution(spec, options(32));
    const MultistageSolution ref(spec.without_leak());
    EXPECT_NEAR(r.overall_er, ref.error_rate(), 1e-4);
    EXPECT_NEAR(r.overall_mdt, ref.mean_decision_time(), 1e-4);
    const auto s = ou_fpt_distribution(single(1.0, 1e-6, 1.0, 1.0), options(32));
    EXPECT_NEAR(s.overall_er, error_rate(0.0, StageTheta::symmetric(1.0, 1.0, 1.0)), 1e-4);
    EXPECT_NEAR(s.overall_mdt, mean_decision_time(0.0, StageTheta::symmetric(1.0, 1.0, 1.0)), 1e-4);
}

TEST(Ou, PieceRefinementConverges) {
    const auto spec = single(0.5, 0.5, 1.0, 2.0);
    double prev_er = 0.0, prev_diff = 1.0;
    for (std::size_t k : {8u, 16u, 32u, 64u}) {
        const auto r = ou_fpt_distribution(spec, options(k));
        if (k > 8) {
            const double diff = std::abs(r.overall_er - prev_er);
            EXPECT_LT(diff, prev_diff) << k;
            prev_diff = diff;
        }
        prev_er = r.overall_er;
    }
    EXPECT_LT(prev_diff, 1e-4);
}

TEST(Ou, TransformsAgree) {
    const auto spec = single(0.5, 0.5, 1.0, 2.0, 0.4);
    const auto a = ou_fpt_distribution(spec, options(32, OuTransform::ScaledEvidence));
    const auto b = ou_fpt_distribution(spec, options(32, OuTransform::CenteredThresholds));
    EXPECT_NEAR(a.overall_er, b.overall_er, 1e-4);
    EXPECT_NEAR(a.overall_mdt, b.overall_mdt, 1e-4 * a.overall_mdt);
}

TEST(Ou, CdfIsConsistent) {
    OuOptions o;
    o.pieces = 32;
    const OuSolution sol(single(0.5, 0.5, 1.0, 2.0), o);
    const auto r = sol.result();
    for (std::size_t i = 1; i < r.cdf.value.size(); ++i) {
        EXPECT_GE(r.cdf.value[i], r.cdf.value[i - 1] - 1e-12);
    }
    EXPECT_GT(r.cdf.value.back(), 1.0 - 1e-4);
    for (double t : {0.5, 2.0, 6.0}) {
        EXPECT_NEAR(sol.cdf(t), sol.joint_cdf(t, Boundary::Upper) + sol.joint_cdf(t, Boundary::Lower), 1e-12);
    }
    EXPECT_NEAR(sol.joint_cdf(1e3, Boundary::Lower), r.overall_er, 1e-8);
    EXPECT_NEAR(r.p_upper + r.p_lower, 1.0, 1e-8);
}

TEST(Ou, RejectsInvalidInput) {
    EXPECT_THROW(ou_fpt_distribution(single(0.5, -0.1, 1.0, 1.0)), DomainError);
    EXPECT_THROW(ou_fpt_distribution(single(0.5, 0.1, 0.0, 1.0)), DomainError);
    EXPECT_THROW(ou_fpt_distribution(single(0.5, 0.1, 1.0, 1.0), options(0)), DomainError);
    EXPECT_THROW(ou_time_inverse(-1.0, OuStage{}), DomainError);
}
