#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "ncmc/numerics.hpp"
#include "ncmc/process_models.hpp"
#include "stat_helpers.hpp"

using namespace ncmc;

namespace {

GbmParams benchmark(int d = 2) {
    GbmParams p;
    p.assets = d;
    return p;
}

StreamKey testing_key(std::uint32_t path, std::uint32_t rep = 0) { return {11, StreamDomain::testing, path, rep}; }

} // namespace

TEST(GbmStep, DeterministicDrift) {
    GbmParams p = benchmark(1);
    p.sigma = 0.0;
    const std::vector<double> y{100.0}, z{0.7};
    EXPECT_NEAR(gbm_step(y, 1.0, p, z)[0], 100.0 * std::exp(-0.05), 1e-12);
    EXPECT_NEAR(gbm_step(y, 1.0, p, z)[0], 95.1229, 1e-4);
}

TEST(GbmStep, ZeroDrawCarriesItoCorrection) {
    GbmParams p = benchmark(1);
    p.rate = p.dividend = 0.0;
    EXPECT_NEAR(gbm_step(std::vector<double>{100.0}, 1.0, p, std::vector<double>{0.0})[0], 98.0199, 1e-4);
}

TEST(GbmStep, RejectsBadInput) {
    const GbmParams p = benchmark(2);
    const std::vector<double> y{100.0, 100.0};
    EXPECT_THROW(gbm_step(y, 1.0, p, std::vector<double>{0.0}), std::invalid_argument);
    EXPECT_THROW(gbm_step(y, 0.0, p, std::vector<double>{0.0, 0.0}), std::invalid_argument);
    EXPECT_THROW(gbm_step(std::vector<double>{100.0, std::nan("")}, 1.0, p, std::vector<double>{0.0, 0.0}),
                 std::invalid_argument);
    EXPECT_THROW(gbm_step(y, 1.0, p, std::vector<double>{0.0, std::numeric_limits<double>::infinity()}),
                 std::invalid_argument);
}

TEST(GbmStep, OutputStrictlyPositive) {
    const GbmParams p = benchmark(3);
    const auto out = gbm_step(std::vector<double>{1.0, 50.0, 1e3}, 1.0, p, std::vector<double>{-8.0, 0.0, 8.0});
    for (double y : out) EXPECT_GT(y, 0.0);
}

TEST(MaxCallPayoff, Examples) {
    GbmParams p = benchmark(2);
    p.rate = 0.0;
    EXPECT_DOUBLE_EQ(max_call_payoff(4, std::vector<double>{110.0, 90.0}, p), 10.0);
    EXPECT_DOUBLE_EQ(max_call_payoff(4, std::vector<double>{100.0, 80.0}, p), 0.0);

    GbmParams q = benchmark(1);
    q.rate = 0.05;
    // t_9 = 3 on the 10-date grid
    EXPECT_NEAR(max_call_payoff(9, std::vector<double>{120.0}, q), 20.0 * std::exp(-0.15), 1e-12);
    EXPECT_NEAR(max_call_payoff(9, std::vector<double>{120.0}, q), 17.2142, 1e-4);
    EXPECT_THROW(max_call_payoff(10, std::vector<double>{120.0}, q), std::invalid_argument);
}

TEST(ExerciseGrid, InclusiveUniformGrid) {
    const GbmParams p = benchmark();
    EXPECT_EQ(p.last_date(), 9);
    EXPECT_DOUBLE_EQ(p.time_of(0), 0.0);
    EXPECT_DOUBLE_EQ(p.time_of(9), 3.0);
    EXPECT_NEAR(p.time_of(3), 1.0, 1e-15);
}

TEST(SimulateFullPath, DeterministicWhenSigmaZero) {
    GbmParams p = benchmark(2);
    p.sigma = 0.0;
    p.spot = 120.0;
    const auto t = simulate_full_path(p, testing_key(3));
    ASSERT_EQ(t.states.size(), 10u);
    for (const auto& s : t.states) {
        const double y = 120.0 * std::exp((p.rate - p.dividend) * p.time_of(s.j));
        EXPECT_NEAR(s.assets[0], y, 1e-9);
        EXPECT_NEAR(s.payoff, std::exp(-p.rate * p.time_of(s.j)) * std::max(y - 100.0, 0.0), 1e-9);
    }
}

TEST(SimulateFullPath, SameStreamIsBitIdentical) {
    const GbmParams p = benchmark(3);
    EXPECT_EQ(simulate_full_path(p, testing_key(5)), simulate_full_path(p, testing_key(5)));
    EXPECT_NE(simulate_full_path(p, testing_key(5)), simulate_full_path(p, testing_key(6)));
}

TEST(SimulateFullPath, StoredPayoffsMatchRecomputation) {
    const GbmParams p = benchmark(3);
    for (std::uint32_t i = 0; i < 50; ++i) {
        const auto t = simulate_full_path(p, testing_key(i));
        for (std::size_t j = 0; j < t.states.size(); ++j) {
            EXPECT_EQ(t.states[j].j, static_cast<int>(j));
            EXPECT_EQ(max_call_payoff(t.states[j].j, t.states[j].assets, p), t.states[j].payoff);
            EXPECT_GE(t.states[j].payoff, 0.0);
        }
    }
}

TEST(SimulateFullPath, AdaptedPrefixDoesNotDependOnLaterDates) {
    // Changing the horizon adds dates but leaves earlier draws untouched.
    GbmParams p = benchmark(2);
    GbmParams longer = p;
    longer.exercise_dates = 19;
    longer.maturity = 6.0;
    const auto a = simulate_full_path(p, testing_key(2));
    const auto b = simulate_full_path(longer, testing_key(2));
    for (int j = 0; j <= p.last_date(); ++j) EXPECT_EQ(a.at_date(j).assets, b.at_date(j).assets);
}

TEST(ContinuePath, SigmaZeroMatchesFullPathTail) {
    GbmParams p = benchmark(2);
    p.sigma = 0.0;
    const auto full = simulate_full_path(p, testing_key(1));
    const auto tail = continue_path(full.at_date(4), p, testing_key(1, 3));
    ASSERT_EQ(tail.first_date(), 5);
    ASSERT_EQ(tail.last_date(), 9);
    for (int j = 5; j <= 9; ++j) {
        for (int a = 0; a < 2; ++a) EXPECT_NEAR(tail.at_date(j).assets[a], full.at_date(j).assets[a], 1e-9);
    }
}

TEST(ContinuePath, DistinctStreamsGiveDistinctContinuations) {
    const GbmParams p = benchmark(2);
    const auto full = simulate_full_path(p, testing_key(1));
    const auto c1 = continue_path(full.at_date(3), p, testing_key(1, 1));
    const auto c2 = continue_path(full.at_date(3), p, testing_key(1, 2));
    EXPECT_NE(c1.states.back().assets, c2.states.back().assets);
}

TEST(ContinuePath, RejectsLastDate) {
    const GbmParams p = benchmark(2);
    const auto full = simulate_full_path(p, testing_key(1));
    EXPECT_THROW(continue_path(full.states.back(), p, testing_key(1, 1)), std::invalid_argument);
}

TEST(ContinuePath, TerminalMeanMatchesLognormalMoment) {
    const GbmParams p = benchmark(2);
    PathState from;
    from.j = 3;
    from.assets = {95.0, 80.0};
    from.payoff = max_call_payoff(3, from.assets, p);
    const int n = 100000;
    std::vector<double> y0(n), y1(n);
    for (int r = 0; r < n; ++r) {
        const auto t = continue_path(from, p, testing_key(0, static_cast<std::uint32_t>(r + 1)));
        y0[r] = t.states.back().assets[0];
        y1[r] = t.states.back().assets[1];
    }
    const double growth = std::exp((p.rate - p.dividend) * (p.maturity - p.time_of(3)));
    EXPECT_LT(std::abs(mean(y0) - 95.0 * growth), 3.0 * std::sqrt(sample_variance(y0) / n));
    EXPECT_LT(std::abs(mean(y1) - 80.0 * growth), 3.0 * std::sqrt(sample_variance(y1) / n));
}

TEST(GbmLaw, LogReturnsPassKolmogorovSmirnov) {
    const GbmParams p = benchmark(1);
    const double dt = p.dt();
    const double mu = (p.rate - p.dividend - 0.5 * p.sigma * p.sigma) * dt;
    const double sd = p.sigma * std::sqrt(dt);
    const GbmModel model(p);
    std::vector<double> standardized;
    for (std::uint32_t i = 0; i < 100000; ++i) {
        auto s = model.start(testing_key(i));
        const double before = s.assets[0];
        model.advance(s, testing_key(i));
        standardized.push_back((std::log(s.assets[0] / before) - mu) / sd);
    }
    EXPECT_GT(ncmc::testing::ks_normal_pvalue(standardized), 0.01);
}

TEST(GbmLaw, DiscountedAtDriftIsMartingale) {
    const GbmParams p = benchmark(1);
    const int n = 1000000;
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) {
        const auto t = simulate_full_path(p, testing_key(static_cast<std::uint32_t>(i)));
        v[i] = std::exp(-(p.rate - p.dividend) * p.maturity) * t.states.back().assets[0];
    }
    EXPECT_LT(std::abs(mean(v) - p.spot), 3.0 * std::sqrt(sample_variance(v) / n));
}

TEST(SimulateFullPath, EuropeanMaxCallAgreesWithIndependentOneStepSampler) {
    // Independent route: sample Y_T in a single exact step with a different generator.
    const GbmParams p = benchmark(2);
    const int n = 1000000;
    std::vector<double> via_paths(n), direct(n);
    for (int i = 0; i < n; ++i) via_paths[i] = simulate_full_path(p, testing_key(static_cast<std::uint32_t>(i))).states.back().payoff;
    std::mt19937_64 gen(20140101);
    std::normal_distribution<double> normal;
    const double drift = (p.rate - p.dividend - 0.5 * p.sigma * p.sigma) * p.maturity;
    const double vol = p.sigma * std::sqrt(p.maturity);
    for (int i = 0; i < n; ++i) {
        double best = 0.0;
        for (int a = 0; a < p.assets; ++a) best = std::max(best, p.spot * std::exp(drift + vol * normal(gen)));
        direct[i] = std::exp(-p.rate * p.maturity) * std::max(best - p.strike, 0.0);
    }
    const double se = std::sqrt(sample_variance(via_paths) / n + sample_variance(direct) / n);
    EXPECT_LT(std::abs(mean(via_paths) - mean(direct)), 4.0 * se);
}
