#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <memory>
#include <sstream>
#include <vector>

#include "ncmc/numerics.hpp"
#include "ncmc/stopping_rules.hpp"

using namespace ncmc;

namespace {

GbmParams benchmark(int d = 2) {
    GbmParams p;
    p.assets = d;
    return p;
}

std::vector<Trajectory> testing_paths(const GbmParams& p, std::size_t n, std::uint64_t seed = 5) {
    std::vector<Trajectory> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(simulate_full_path(p, {seed, StreamDomain::testing, static_cast<std::uint32_t>(i), 0}));
    return out;
}

} // namespace

TEST(EvaluateRule, FixedMaturityAlwaysStopsAtLastDate) {
    const GbmParams p = benchmark();
    const FixedMaturityRule<PathState> rule(p.last_date());
    for (const auto& t : testing_paths(p, 20)) {
        EXPECT_EQ(evaluate_rule(rule, t, 0), 9);
        EXPECT_EQ(evaluate_rule(rule, t, 4), 9);
    }
}

TEST(EvaluateRule, StopEverywhereReturnsStartDate) {
    const GbmParams p = benchmark();
    const StopFromDateRule<PathState> rule(p.last_date(), 0);
    const auto t = testing_paths(p, 1).front();
    EXPECT_EQ(evaluate_rule(rule, t, 0), 0);
    EXPECT_EQ(evaluate_rule(rule, t, 6), 6);
}

TEST(EvaluateRule, RejectsShortTrajectory) {
    const GbmParams p = benchmark();
    const FixedMaturityRule<PathState> rule(p.last_date());
    auto t = testing_paths(p, 1).front();
    t.states.pop_back();
    EXPECT_THROW(evaluate_rule(rule, t, 0), std::invalid_argument);
    const auto full = testing_paths(p, 1).front();
    const auto tail = continue_path(full.at_date(5), p, {5, StreamDomain::testing, 0, 1});
    EXPECT_THROW(evaluate_rule(rule, tail, 2), std::invalid_argument);
}

TEST(EvaluateRule, HandSetZeroCoefficientsStopOnTie) {
    // Two dates; continuation fitted as exactly 0, payoff 0 at date 0: stop-on-tie stops.
    GbmParams p = benchmark(1);
    p.exercise_dates = 2;
    const TvRRule rule(1, p.spot, BasisKind::full, {std::vector<double>(TvRRule::basis_size(1, BasisKind::full), 0.0)});
    const auto t = simulate_full_path(p, {1, StreamDomain::testing, 0, 0});
    ASSERT_EQ(t.states[0].payoff, 0.0);
    EXPECT_EQ(evaluate_rule(rule, t, 0), 0);

    // With a strictly positive fitted continuation the same path continues.
    std::vector<double> beta(TvRRule::basis_size(1, BasisKind::full), 0.0);
    beta[0] = 1e-9;
    const TvRRule positive(1, p.spot, BasisKind::full, {beta});
    EXPECT_EQ(evaluate_rule(positive, t, 0), 1);
}

TEST(TvRBasis, SizeAndLayout) {
    EXPECT_EQ(TvRRule::basis_size(2, BasisKind::full), 7u);
    EXPECT_EQ(TvRRule::basis_size(3, BasisKind::full), 11u);
    EXPECT_EQ(TvRRule::basis_size(5, BasisKind::full), 22u);
    std::vector<double> out(7);
    TvRRule::evaluate_basis(std::vector<double>{90.0, 180.0}, 45.0, 90.0, BasisKind::full, out);
    EXPECT_EQ(out, (std::vector<double>{1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 0.5}));
}

TEST(TrainTvR, ConstantProcessStopsImmediately) {
    GbmParams p = benchmark(1);
    p.sigma = 0.0;
    p.rate = p.dividend = 0.0;
    p.spot = 130.0; // X_j = 30 at every date
    const TvRRule rule = train_tvr(p, 50, 3, BasisKind::constant);
    for (const auto& beta : rule.coefficients()) EXPECT_NEAR(beta[0], 30.0, 1e-9);
    EXPECT_EQ(evaluate_rule(rule, simulate_full_path(p, {1, StreamDomain::testing, 0, 0}), 0), 0);
}

TEST(TrainTvR, ConstantProcessWithFullBasisSurvivesRankDeficiency) {
    GbmParams p = benchmark(2);
    p.sigma = 0.0;
    p.rate = p.dividend = 0.0;
    p.spot = 130.0;
    const TvRRule rule = train_tvr(p, 100, 3);
    const auto t = simulate_full_path(p, {1, StreamDomain::testing, 0, 0});
    for (int j = 0; j < 9; ++j) EXPECT_NEAR(rule.continuation(t.at_date(j)), 30.0, 1e-6);
}

TEST(TrainTvR, SingleStepConstantBasisFitsSampleMean) {
    GbmParams p = benchmark(2);
    p.exercise_dates = 2;
    const auto paths = simulate_training_paths(p, 5000, 17);
    const TvRRule rule = train_tvr(paths, p, BasisKind::constant);
    std::vector<double> x1;
    for (const auto& t : paths) x1.push_back(t.states[1].payoff);
    EXPECT_NEAR(rule.coefficients()[0][0], mean(x1), 1e-9 * (1.0 + mean(x1)));
}

TEST(TrainTvR, RejectsTooFewPathsAndTestingStreams) {
    const GbmParams p = benchmark(2);
    EXPECT_THROW(train_tvr(simulate_training_paths(p, 6, 1), p), std::invalid_argument);
    const auto testing = testing_paths(p, 50);
    EXPECT_THROW(train_tvr(testing, p), std::invalid_argument);
}

TEST(TrainTvR, CoefficientShapeAndFiniteness) {
    const GbmParams p = benchmark(3);
    const TvRRule rule = train_tvr(p, 2000, 9);
    ASSERT_EQ(rule.coefficients().size(), 9u);
    for (const auto& beta : rule.coefficients()) {
        EXPECT_EQ(beta.size(), 11u);
        for (double b : beta) EXPECT_TRUE(std::isfinite(b));
    }
    EXPECT_EQ(rule.meta().training_paths, 2000u);
}

TEST(TrainTvR, DeterministicForFixedSeed) {
    const GbmParams p = benchmark(2);
    EXPECT_EQ(train_tvr(p, 1000, 4).coefficients(), train_tvr(p, 1000, 4).coefficients());
}

TEST(Rules, AdaptedAlongSharedPrefix) {
    // Two trajectories that share dates 0..4 get identical decisions there.
    const GbmParams p = benchmark(2);
    auto rule = std::make_shared<const TvRRule>(train_tvr(p, 3000, 21));
    const auto a = testing_paths(p, 1).front();
    Trajectory b;
    b.rng_key = a.rng_key;
    for (int j = 0; j <= 4; ++j) b.states.push_back(a.at_date(j));
    const auto tail = continue_path(a.at_date(4), p, a.rng_key.with_replication(9));
    b.states.insert(b.states.end(), tail.states.begin(), tail.states.end());
    for (int j = 0; j <= 4; ++j) EXPECT_EQ(rule->decide(a.at_date(j)), rule->decide(b.at_date(j)));
    EXPECT_TRUE(rule->decide(a.states.back()));
}

TEST(ShiftRule, ZeroShiftIsIdentity) {
    const GbmParams p = benchmark(2);
    auto rule = std::make_shared<const TvRRule>(train_tvr(p, 3000, 21));
    const auto shifted = shift_rule(rule, 0.0);
    for (const auto& t : testing_paths(p, 2000))
        for (const auto& s : t.states) ASSERT_EQ(rule->decide(s), shifted.decide(s));
}

TEST(ShiftRule, HugeShiftIsFixedMaturity) {
    const GbmParams p = benchmark(2);
    auto rule = std::make_shared<const TvRRule>(train_tvr(p, 3000, 21));
    const auto inf = shift_rule(rule, std::numeric_limits<double>::infinity());
    const auto big = shift_rule(rule, 1e6);
    for (const auto& t : testing_paths(p, 500)) {
        EXPECT_EQ(evaluate_rule(inf, t, 0), 9);
        EXPECT_EQ(evaluate_rule(big, t, 0), 9);
    }
    EXPECT_THROW(shift_rule(rule, -0.1), std::invalid_argument);
}

TEST(ShiftRule, LaterStoppingIsPathwiseMonotone) {
    const GbmParams p = benchmark(2);
    auto rule = std::make_shared<const TvRRule>(train_tvr(p, 5000, 21));
    const std::vector<double> eps{0.0, 0.05, 0.2, 1.0, 5.0};
    for (const auto& t : testing_paths(p, 10000)) {
        int previous = -1;
        for (double e : eps) {
            const int tau = evaluate_rule(shift_rule(rule, e), t, 0);
            ASSERT_GE(tau, previous);
            previous = tau;
        }
    }
}

TEST(LookaheadRule, CostScalesWithInnerSample) {
    const GbmParams p = benchmark(3);
    auto rule = std::make_shared<const TvRRule>(train_tvr(p, 2000, 1));
    const LookaheadRule la(rule, p, 32, 7);
    EXPECT_EQ(la.decision_cost().steps, 96u);
    EXPECT_EQ(la.decision_cost().evals, 32u);
    EXPECT_THROW(LookaheadRule(rule, p, 3, 7), std::invalid_argument);
}

TEST(LookaheadRule, AtPenultimateDateUsesDiscountedTerminalMean) {
    // One step before maturity the lookahead continuation is the inner-sample
    // average of X_J and ignores the regression.
    GbmParams p = benchmark(1);
    p.sigma = 0.0;
    auto rule = std::make_shared<const TvRRule>(train_tvr(p, 100, 1));
    const LookaheadRule la(rule, p, 4, 7);
    PathState s;
    s.j = 8;
    s.assets = {150.0};
    s.payoff = max_call_payoff(8, s.assets, p);
    const double yT = 150.0 * std::exp((p.rate - p.dividend) * p.dt());
    EXPECT_NEAR(la.continuation(s), std::exp(-p.rate * 3.0) * (yT - 100.0), 1e-9);
}

TEST(RuleFile, RoundTripPreservesDecisions) {
    const GbmParams p = benchmark(2);
    const TvRRule rule = train_tvr(p, 2000, 8);
    std::stringstream ss;
    write_tvr(ss, rule);
    const TvRRule back = read_tvr(ss);
    EXPECT_EQ(back.coefficients(), rule.coefficients());
    EXPECT_EQ(back.meta().training_seed, 8u);
    for (const auto& t : testing_paths(p, 200))
        for (const auto& s : t.states) ASSERT_EQ(rule.decide(s), back.decide(s));
}

TEST(RuleFile, RejectsOutOfOrderRows) {
    std::stringstream ss("# assets=1\n# scale=90\n# basis=constant\n1 3.0\n");
    EXPECT_THROW(read_tvr(ss), std::runtime_error);
}

TEST(ExercisePolicy, InTheMoneyNeverStopsAtZeroPayoffBeforeMaturity) {
    GbmParams p = benchmark(1);
    p.exercise_dates = 2;
    const TvRRule any(1, p.spot, BasisKind::full, {std::vector<double>(TvRRule::basis_size(1, BasisKind::full), 0.0)});
    const TvRRule itm = any.with_exercise(ExercisePolicy::in_the_money);
    const auto t = simulate_full_path(p, {1, StreamDomain::testing, 0, 0});
    ASSERT_EQ(t.states[0].payoff, 0.0);
    EXPECT_EQ(evaluate_rule(any, t, 0), 0);
    EXPECT_EQ(evaluate_rule(itm, t, 0), 1);
    EXPECT_EQ(any.exercise(), ExercisePolicy::any_state);
    EXPECT_EQ(any.coefficients(), itm.coefficients());
}

TEST(ExercisePolicy, AgreesWithAnyStateWhenInTheMoney) {
    const GbmParams p = benchmark(2);
    const TvRRule any = train_tvr(p, 2000, 8);
    const TvRRule itm = any.with_exercise(ExercisePolicy::in_the_money);
    std::size_t compared = 0;
    for (const auto& t : testing_paths(p, 200))
        for (const auto& s : t.states) {
            if (s.payoff > 0.0) {
                ASSERT_EQ(any.decide(s), itm.decide(s));
                ++compared;
            } else if (s.j < p.last_date()) {
                EXPECT_FALSE(itm.decide(s));
            }
        }
    EXPECT_GT(compared, 100u);
}

TEST(RuleFile, RoundTripPreservesExercisePolicy) {
    const GbmParams p = benchmark(2);
    const TvRRule rule = train_tvr(p, 2000, 8).with_exercise(ExercisePolicy::in_the_money);
    std::stringstream ss;
    write_tvr(ss, rule);
    EXPECT_NE(ss.str().find("# exercise=in_the_money"), std::string::npos);
    EXPECT_EQ(read_tvr(ss).exercise(), ExercisePolicy::in_the_money);
    std::stringstream bad("# assets=1\n# scale=90\n# basis=constant\n# exercise=sometimes\n0 3.0\n");
    EXPECT_THROW(read_tvr(bad), std::runtime_error);
}
