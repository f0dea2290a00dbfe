#include <cmath>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <gtest/gtest.h>

#include "msddm/aggregate.hpp"

using namespace msddm;

namespace {

using Quad = boost::math::quadrature::gauss_kronrod<double, 61>;

double gk(auto&& f, double lo, double hi) { return Quad::integrate(f, lo, hi, 15, 1e-12); }

// Integral over (a, b] of a density that may blow up like 1/sqrt(t - a):
// t = a + u^2 removes the singularity.
double time_integral(auto&& f, double a, double b) {
    return gk([&](double u) { return u > 0.0 ? 2.0 * u * f(a + u * u) : 0.0; }, 0.0, std::sqrt(b - a));
}

// Four stages with drift changes, a threshold shrink and an expansion.
ModelSpec varied_model() {
    return ModelSpec{0.1,
                     {StageTheta{0.4, 1.0, 1.2, -1.2, 0.0}, StageTheta{-0.6, 0.8, 1.0, -0.9, 0.4},
                      StageTheta{1.1, 1.2, 1.3, -1.1, 0.9}, StageTheta{0.2, 1.0, 0.8, -0.8, 1.6}}};
}

} // namespace

TEST(Aggregate, SingleStageReducesToClosedForm) {
    const StageTheta th{0.7, 1.1, 1.0, -1.3, 0.0};
    const double x0 = 0.2;
    std::vector<double> times;
    for (int i = 1; i <= 50; ++i) {
        times.push_back(0.08 * i);
    }
    const auto r = analyze(ModelSpec{x0, {th}}, kDefaultGridSize, times);
    EXPECT_NEAR(r.overall_er, boundary_probability(x0, th, Boundary::Lower), 1e-10);
    EXPECT_NEAR(r.overall_mdt, mean_decision_time(x0, th), 1e-10);
    EXPECT_NEAR(r.cond_mdt_upper, conditional_mean_dt(x0, th, Boundary::Upper).mdt, 1e-10);
    EXPECT_NEAR(r.cond_mdt_lower, conditional_mean_dt(x0, th, Boundary::Lower).mdt, 1e-10);
    ASSERT_EQ(r.cdf.t.size(), times.size());
    const double pu = boundary_probability(x0, th, Boundary::Upper);
    const double pl = boundary_probability(x0, th, Boundary::Lower);
    for (std::size_t i = 0; i < times.size(); ++i) {
        EXPECT_NEAR(r.cdf.value[i], 1.0 - survival_probability(times[i], x0, th), 1e-10);
        EXPECT_NEAR(r.cond_cdf_upper.value[i], joint_fpt_cdf(times[i], x0, th, Boundary::Upper) / pu, 1e-10);
        EXPECT_NEAR(r.cond_cdf_lower.value[i], joint_fpt_cdf(times[i], x0, th, Boundary::Lower) / pl, 1e-10);
    }
    EXPECT_TRUE(r.atoms.empty());
}

TEST(Aggregate, TwoStageMatchesDirectExpressions) {
    for (double z : {0.05, 0.1, 0.2}) {
        for (auto [a1, a2] : {std::pair{0.5, 0.1}, std::pair{0.1, 0.5}, std::pair{0.0, 0.3}, std::pair{0.4, 0.0}}) {
            const auto th1 = StageTheta::symmetric(a1, 0.1, z, 0.0);
            const auto th2 = StageTheta::symmetric(a2, 0.1, z, 0.15);
            const MultistageSolution sol(ModelSpec{0.0, {th1, th2}});
            const auto ref = two_stage_closed_form(0.0, th1, th2, 0.15);
            EXPECT_NEAR(sol.error_rate(), ref.er, 1e-8) << z << ' ' << a1;
            EXPECT_NEAR(sol.mean_decision_time(), ref.mdt, 1e-8) << z << ' ' << a1;
        }
    }
}

TEST(Aggregate, SplittingAStageChangesNothing) {
    const StageTheta th{0.9, 1.0, 1.0, -1.0, 0.0};
    StageTheta later = th;
    later.start_time = 0.5;
    const MultistageSolution one(ModelSpec{-0.2, {th}});
    const MultistageSolution two(ModelSpec{-0.2, {th, later}});
    EXPECT_NEAR(one.error_rate(), two.error_rate(), 1e-8);
    EXPECT_NEAR(one.mean_decision_time(), two.mean_decision_time(), 1e-8);
    for (auto b : {Boundary::Upper, Boundary::Lower}) {
        EXPECT_NEAR(one.conditional_mean_dt(b), two.conditional_mean_dt(b), 1e-8);
    }
    for (double t : {0.2, 0.5, 0.9, 2.0}) {
        EXPECT_NEAR(one.cdf(t), two.cdf(t), 1e-8) << t;
        EXPECT_NEAR(one.density(t), two.density(t), 1e-7) << t;
    }
}

TEST(Aggregate, ZeroDriftIsUnbiased) {
    const ModelSpec m{0.0, {StageTheta::symmetric(0.0, 1.0, 1.0, 0.0), StageTheta::symmetric(0.0, 0.5, 0.7, 0.3),
                            StageTheta::symmetric(0.0, 1.5, 1.2, 0.8)}};
    const MultistageSolution sol(m);
    EXPECT_NEAR(sol.error_rate(), 0.5, 1e-10);
    EXPECT_NEAR(sol.conditional_mean_dt(Boundary::Upper), sol.conditional_mean_dt(Boundary::Lower), 1e-8);
}

TEST(Aggregate, ConservationAndSplitting) {
    const MultistageSolution sol(varied_model());
    const auto& ms = sol.per_stage();
    const auto& spec = sol.spec();
    // the density plus the atoms integrates to the CDF
    double mass = 0.0;
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        const double a = spec.stages[i].start_time;
        const double b = i + 1 < spec.stages.size() ? spec.stages[i + 1].start_time : 3.0;
        mass += ms[i].atom_upper + ms[i].atom_lower + time_integral([&](double t) { return sol.density(t); }, a, b);
        EXPECT_NEAR(mass, sol.cdf(b - 1e-12), 1e-6) << i;
    }
    for (double t : {0.1, 0.5, 1.0, 1.7, 3.0}) {
        const double f = sol.density(t);
        EXPECT_NEAR(f, sol.joint_density(t, Boundary::Upper) + sol.joint_density(t, Boundary::Lower), 1e-12);
        const double h = 1e-6;
        EXPECT_NEAR((sol.cdf(t + h) - sol.cdf(t - h)) / (2.0 * h), f, 1e-6) << t;
        EXPECT_NEAR(sol.cdf(t), sol.joint_cdf(t, Boundary::Upper) + sol.joint_cdf(t, Boundary::Lower), 1e-12);
    }
    const double er = sol.error_rate();
    EXPECT_NEAR((1.0 - er) * sol.conditional_mean_dt(Boundary::Upper) + er * sol.conditional_mean_dt(Boundary::Lower),
                sol.mean_decision_time(), 1e-8);
    // survival + decided + atoms = 1 after every stage
    double decided = 0.0;
    for (std::size_t i = 0; i < ms.size(); ++i) {
        decided += ms[i].atom_upper + ms[i].atom_lower + ms[i].entry_probability * ms[i].p_decide;
        const double alive = ms[i].entry_probability * ms[i].stage_survival;
        EXPECT_NEAR(alive + decided, 1.0, 1e-8) << i;
        if (i + 1 < ms.size()) {
            EXPECT_NEAR(alive, ms[i + 1].entry_probability + ms[i + 1].atom_upper + ms[i + 1].atom_lower, 1e-12);
            EXPECT_NEAR(1.0 - sol.cdf(spec.stages[i + 1].start_time - 1e-12), alive, 1e-8);
        }
    }
    EXPECT_NEAR(sol.probability(Boundary::Upper) + sol.probability(Boundary::Lower), 1.0, 1e-10);
}

TEST(Aggregate, ShrinkingThresholdsProduceAtoms) {
    const MultistageSolution sol(varied_model());
    const auto& ms = sol.per_stage();
    EXPECT_GT(ms[1].atom_upper + ms[1].atom_lower, 0.0);
    EXPECT_EQ(ms[2].atom_upper + ms[2].atom_lower, 0.0);
    const double t = sol.spec().stages[1].start_time;
    const auto r = sol.result(AnalyzeOptions{});
    EXPECT_NEAR(r.cdf(t) - r.cdf.left_limit(t), ms[1].atom_upper + ms[1].atom_lower, 1e-10);
}

TEST(Aggregate, CrossedLastStageAbsorbsEverything) {
    const ModelSpec m{0.0, {StageTheta::symmetric(0.3, 1.0, 1.0, 0.0), StageTheta{0.3, 1.0, -0.1, 0.1, 0.6}}};
    const MultistageSolution sol(m);
    EXPECT_TRUE(sol.spec().collapsed(1));
    EXPECT_NEAR(sol.cdf(0.6), 1.0, 1e-12);
    EXPECT_NEAR(sol.probability(Boundary::Upper) + sol.probability(Boundary::Lower), 1.0, 1e-12);
    const auto& s = sol.per_stage()[1];
    const double alive = sol.per_stage()[0].entry_probability * sol.per_stage()[0].stage_survival;
    EXPECT_NEAR(s.atom_upper + s.atom_lower, alive, 1e-12);
    EXPECT_TRUE(s.collapsed);
    // midpoint 0: the drift pushes most survivors above it
    EXPECT_GT(s.atom_upper, s.atom_lower);
    EXPECT_LE(sol.mean_decision_time(), 0.6);
}

TEST(Aggregate, ConditionalCdfsMixToTheUnconditionalOne) {
    const auto r = analyze(varied_model());
    const double er = r.overall_er;
    for (std::size_t i = 0; i < r.cdf.t.size(); i += 17) {
        const double t = r.cdf.t[i];
        EXPECT_NEAR((1.0 - er) * r.cond_cdf_upper(t) + er * r.cond_cdf_lower(t), r.cdf(t), 1e-9) << t;
    }
    for (std::size_t i = 1; i < r.cdf.value.size(); ++i) {
        EXPECT_GE(r.cdf.value[i], r.cdf.value[i - 1] - 1e-13);
    }
    EXPECT_GT(r.cdf.value.back(), 1.0 - 1e-4);
}

TEST(Aggregate, GridRefinementIsStable) {
    const ModelSpec m = pure_ddm(0.0, 1.0, 1.0, 1.0);
    ModelSpec two = varied_model();
    const MultistageSolution a(two, 512);
    const MultistageSolution b(two, 1024);
    EXPECT_LT(std::abs(a.error_rate() - b.error_rate()), 1e-6);
    EXPECT_LT(std::abs(a.mean_decision_time() - b.mean_decision_time()), 1e-6);
    EXPECT_NEAR(MultistageSolution(m, 16).error_rate(), MultistageSolution(m, 512).error_rate(), 1e-14);
}

TEST(Aggregate, RejectsInvalidModels) {
    EXPECT_THROW(MultistageSolution(ModelSpec{0.0, {}}), DomainError);
    EXPECT_THROW(MultistageSolution(ModelSpec{2.0, {StageTheta::symmetric(1.0, 1.0, 1.0)}}), DomainError);
    EXPECT_THROW(MultistageSolution(ModelSpec{0.0, {StageTheta::symmetric(1.0, 1.0, 1.0, 0.5),
                                                    StageTheta::symmetric(1.0, 1.0, 1.0, 0.5)}}),
                 DomainError);
    EXPECT_THROW(MultistageSolution(ModelSpec{0.0, {StageTheta::symmetric(1.0, 1.0, 1.0, 0.0),
                                                    StageTheta{1.0, 1.0, -1.0, 1.0, 0.5},
                                                    StageTheta::symmetric(1.0, 1.0, 1.0, 0.9)}}),
                 DomainError);
    EXPECT_THROW(two_stage_closed_form(0.0, StageTheta::symmetric(1, 1, 1), StageTheta::symmetric(1, 1, 2, 1), 1.0),
                 DomainError);
}
