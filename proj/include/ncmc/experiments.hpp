#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncmc/calibration.hpp"
#include "ncmc/nested_cmc.hpp"
#include "ncmc/process_models.hpp"
#include "ncmc/stopping_rules.hpp"

namespace ncmc {

/// Seed for one purpose of an experiment; testing draws stay in the testing
/// stream domain, training draws in the training domain.
inline std::uint64_t purpose_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0) {
    return derive_seed(derive_seed(seed, purpose), index);
}

/// Paths affordable with a work budget at a given cost per path (at least two).
inline std::size_t paths_for_budget(double budget, double cost_per_path) {
    if (!(cost_per_path > 0.0)) throw std::invalid_argument("paths_for_budget: cost must be positive");
    return std::max<std::size_t>(2, static_cast<std::size_t>(std::floor(budget / cost_per_path)));
}

// ---------------------------------------------------------------------------
// Misspecified volatility

struct SigmaStudyConfig {
    GbmParams params{};
    std::size_t training_paths = 100000;
    std::uint64_t training_seed = 1;
    std::uint64_t testing_seed = 2;
    std::vector<double> sigma_offsets{0.005, 0.01, 0.015, 0.02};
    std::size_t mean_paths = 100000;
    std::size_t pilot_paths = 50000;
    std::size_t pilot_replications = 100;
    double budget = 2.0e6;
    std::optional<std::size_t> replications;
    ExercisePolicy exercise = ExercisePolicy::in_the_money;
    unsigned threads = 0;
};

struct SigmaStudyRow {
    double offset = 0.0;
    double sigma_hat = 0.0;
    double mean_sigma = 0.0;
    double mean_sigma_stderr = 0.0;
    double mean_sigma_hat = 0.0;
    double mean_sigma_hat_stderr = 0.0;
    double delta_hat = 0.0;
    double delta_stderr = 0.0;
    double p_differ = 0.0;
    double rho1 = 0.0;
    double rho2 = 0.0;
    double v1 = 0.0;
    double v2 = 0.0;
    double R_star = 1.0;
    std::int64_t R = 1;
    double gamma_star = 1.0;
    double speed_up = 1.0;
    std::size_t N = 0;
    double work = 0.0;
    bool degenerate = false;
};

inline std::vector<SigmaStudyRow> param_uncertainty_study(const SigmaStudyConfig& cfg) {
    if (cfg.sigma_offsets.empty()) throw std::invalid_argument("sigma study: no volatility offsets");
    cfg.params.validate();
    const GbmModel model(cfg.params);
    const TvRRule correct = train_tvr(cfg.params, cfg.training_paths, cfg.training_seed).with_exercise(cfg.exercise);
    const PlainEstimate base =
        estimate_stopped_value(model, correct, cfg.mean_paths, purpose_seed(cfg.testing_seed, 1), cfg.threads);

    std::vector<SigmaStudyRow> rows;
    for (std::size_t c = 0; c < cfg.sigma_offsets.size(); ++c) {
        SigmaStudyRow row;
        row.offset = cfg.sigma_offsets[c];
        GbmParams wrong = cfg.params;
        wrong.sigma = cfg.params.sigma + row.offset;
        row.sigma_hat = wrong.sigma;
        // same training seed, hence the same Brownian increments
        const TvRRule misspecified = train_tvr(wrong, cfg.training_paths, cfg.training_seed).with_exercise(cfg.exercise);

        row.mean_sigma = base.mean;
        row.mean_sigma_stderr = base.stderr();
        const PlainEstimate other = estimate_stopped_value(model, misspecified, cfg.mean_paths,
                                                           purpose_seed(cfg.testing_seed, 1), cfg.threads);
        row.mean_sigma_hat = other.mean;
        row.mean_sigma_hat_stderr = other.stderr();

        const PilotResult p = pilot(model, correct, misspecified, cfg.pilot_paths, cfg.pilot_replications,
                                    purpose_seed(cfg.testing_seed, 2, c), cfg.threads);
        const CalibReport rep = calibrate(p);
        row.p_differ = p.p_differ;
        row.rho1 = p.rho1;
        row.rho2 = p.rho2;
        row.v1 = p.v1;
        row.v2 = p.v2;
        row.R_star = rep.R_star;
        row.gamma_star = rep.gamma_star;
        row.speed_up = rep.speed_up();
        row.degenerate = p.degenerate;
        row.R = cfg.replications ? static_cast<std::int64_t>(*cfg.replications) : rep.R_rounded;

        const double per_trunk = p.rho1 + static_cast<double>(row.R) * p.rho2;
        row.N = paths_for_budget(cfg.budget, per_trunk > 0.0 ? per_trunk : 1.0);
        const NestedEstimate est = estimate(model, correct, misspecified, row.N, static_cast<std::size_t>(row.R),
                                            purpose_seed(cfg.testing_seed, 3, c), cfg.threads);
        row.delta_hat = est.delta_hat;
        row.delta_stderr = est.stderr();
        row.work = est.work().units();
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Quasi-control variates

/// A TvR rule, optionally wrapped in a one-step lookahead with `lookahead`
/// inner samples (0 keeps the plain regression rule).
struct RuleSpec {
    std::size_t training_paths = 100000;
    int lookahead = 0;
    ExercisePolicy exercise = ExercisePolicy::in_the_money;
};

struct BuiltRule {
    std::shared_ptr<const TvRRule> regression;
    std::shared_ptr<const StoppingRule<PathState>> rule;
};

inline BuiltRule build_rule(const GbmParams& params, const RuleSpec& spec, std::uint64_t training_seed) {
    BuiltRule out;
    out.regression = std::make_shared<const TvRRule>(
        train_tvr(params, spec.training_paths, training_seed).with_exercise(spec.exercise));
    if (spec.lookahead > 0)
        out.rule = std::make_shared<const LookaheadRule>(out.regression, params, spec.lookahead,
                                                         derive_seed(training_seed, spec.training_paths));
    else
        out.rule = out.regression;
    return out;
}

struct QcvConfig {
    GbmParams params = [] {
        GbmParams p;
        p.assets = 3;
        return p;
    }();
    RuleSpec rule_a{100000, 128};
    RuleSpec rule_b{100000, 0};
    std::uint64_t training_seed = 1;
    std::uint64_t testing_seed = 2;
    std::size_t pilot_paths = 20000;
    std::size_t pilot_replications = 500;
    std::size_t mean_paths_b = 1000000;
    double budget = 5.0e7;
    std::optional<std::size_t> replications;
    unsigned threads = 0;
};

/// One estimator of mu_A at the shared budget.
struct QcvRow {
    std::string method;
    double estimate = 0.0;
    double variance = 0.0;
    double stderr = 0.0;
    std::int64_t N_B = 0;
    std::int64_t N = 0;
    std::int64_t R = 0;
    double work = 0.0;
    double budget_ratio = 0.0;
};

struct QcvReport {
    double mu_a = 0.0, v_a = 0.0, rho_a = 0.0;
    double mu_b = 0.0, v_b = 0.0, rho_b = 0.0, mu_b_stderr = 0.0;
    PilotResult pilot;
    CalibReport calib;
    std::vector<QcvRow> rows; // simple, qcv, qcv+ncmc
    double measured_gain = 1.0;  // variance x work of the difference at R over R = 1
};

inline QcvReport qcv_estimate(const QcvConfig& cfg) {
    cfg.params.validate();
    const GbmModel model(cfg.params);
    const BuiltRule a = build_rule(cfg.params, cfg.rule_a, cfg.training_seed);
    const BuiltRule b = build_rule(cfg.params, cfg.rule_b, cfg.training_seed);

    QcvReport rep;
    const PlainEstimate pa = estimate_stopped_value(model, *a.rule, cfg.pilot_paths, purpose_seed(cfg.testing_seed, 1),
                                                    cfg.threads);
    const PlainEstimate pb = estimate_stopped_value(model, *b.rule, cfg.mean_paths_b, purpose_seed(cfg.testing_seed, 2),
                                                    cfg.threads);
    rep.mu_a = pa.mean;
    rep.v_a = pa.sample_variance;
    rep.rho_a = pa.work.units() / static_cast<double>(pa.N);
    rep.mu_b = pb.mean;
    rep.mu_b_stderr = pb.stderr();
    rep.v_b = pb.sample_variance;
    rep.rho_b = pb.work.units() / static_cast<double>(pb.N);
    rep.pilot = pilot(model, *a.rule, *b.rule, cfg.pilot_paths, cfg.pilot_replications,
                      purpose_seed(cfg.testing_seed, 3), cfg.threads);
    rep.calib = calibrate(rep.pilot);

    const auto add_row = [&](QcvRow row) {
        row.stderr = std::sqrt(row.variance);
        row.budget_ratio = row.work / cfg.budget;
        rep.rows.push_back(std::move(row));
    };

    {
        const std::size_t n = paths_for_budget(cfg.budget, rep.rho_a);
        const PlainEstimate s = estimate_stopped_value(model, *a.rule, n, purpose_seed(cfg.testing_seed, 4), cfg.threads);
        add_row({"simple", s.mean, s.sample_variance / static_cast<double>(n), 0.0, 0, static_cast<std::int64_t>(n), 0,
                 s.work.units()});
    }

    if (rep.pilot.degenerate) {
        // identical rules: the correction is exactly zero
        for (const char* name : {"qcv", "qcv_ncmc"}) {
            const std::size_t n = paths_for_budget(cfg.budget, rep.rho_b);
            const PlainEstimate s =
                estimate_stopped_value(model, *b.rule, n, purpose_seed(cfg.testing_seed, 5), cfg.threads);
            add_row({name, s.mean, s.sample_variance / static_cast<double>(n), 0.0, static_cast<std::int64_t>(n), 0, 1,
                     s.work.units()});
        }
        return rep;
    }

    const CalibParams cp = rep.pilot.calib_params();
    const std::int64_t r_star =
        cfg.replications ? static_cast<std::int64_t>(*cfg.replications) : rep.calib.R_rounded;
    double unit_var[2] = {0.0, 0.0};
    const std::int64_t reps[2] = {1, r_star};
    const char* names[2] = {"qcv", "qcv_ncmc"};
    for (int k = 0; k < 2; ++k) {
        const QcvAllocation alloc = qcv_allocation(rep.v_b, rep.rho_b, cp, reps[k], cfg.budget);
        const PlainEstimate s = estimate_stopped_value(model, *b.rule, static_cast<std::size_t>(alloc.N_B),
                                                       purpose_seed(cfg.testing_seed, 5, k), cfg.threads);
        const NestedEstimate d = estimate(model, *a.rule, *b.rule, static_cast<std::size_t>(alloc.N),
                                          static_cast<std::size_t>(reps[k]), purpose_seed(cfg.testing_seed, 6, k),
                                          cfg.threads);
        const double diff_var = d.variance();
        unit_var[k] = diff_var * d.work().units();
        add_row({names[k], s.mean + d.delta_hat, s.sample_variance / static_cast<double>(alloc.N_B) + diff_var, 0.0,
                 alloc.N_B, alloc.N, reps[k], s.work.units() + d.work().units()});
    }
    rep.measured_gain = unit_var[0] > 0.0 ? unit_var[1] / unit_var[0] : 1.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Multilevel

struct MultilevelConfig {
    GbmParams params = [] {
        GbmParams p;
        p.assets = 3;
        return p;
    }();
    std::vector<RuleSpec> levels{{1000, 0}, {10000, 8}, {100000, 64}};
    std::uint64_t training_seed = 1;
    std::uint64_t testing_seed = 2;
    std::size_t pilot_paths = 20000;
    std::size_t pilot_replications = 20;
    double budget = 5.0e7;
    std::size_t direct_paths = 100000;
    unsigned threads = 0;
};

struct LevelReport {
    std::size_t level = 0;
    RuleSpec spec;
    double rho1 = 0.0, rho2 = 0.0, v1 = 0.0, v2 = 0.0;
    double R_star = 1.0, gamma_star = 1.0;
    std::int64_t R = 1;
    std::int64_t N_ml = 0, N_ncmc = 0;
    double mean_ml = 0.0, var_ml = 0.0;     // level estimate and its variance, R = 1
    double mean_ncmc = 0.0, var_ncmc = 0.0; // with R = R_i
    double work_ml = 0.0, work_ncmc = 0.0;
};

struct MultilevelReport {
    std::vector<LevelReport> levels;
    double ml = 0.0, ml_var = 0.0, ml_work = 0.0;
    double ml_ncmc = 0.0, ml_ncmc_var = 0.0, ml_ncmc_work = 0.0;
    double simple = 0.0, simple_var = 0.0, simple_work = 0.0;
    std::size_t simple_N = 0;
    double direct = 0.0, direct_stderr = 0.0;
};

inline MultilevelReport multilevel_estimate(const MultilevelConfig& cfg) {
    if (cfg.levels.empty()) throw std::invalid_argument("multilevel: empty level ladder");
    for (std::size_t i = 1; i < cfg.levels.size(); ++i)
        if (cfg.levels[i].training_paths < cfg.levels[i - 1].training_paths)
            throw std::invalid_argument("multilevel: training sizes must be nondecreasing");
    cfg.params.validate();
    const GbmModel model(cfg.params);
    // shared training seed: coarser rules train on a prefix of the finer rule's paths
    std::vector<BuiltRule> rules;
    for (const auto& spec : cfg.levels) rules.push_back(build_rule(cfg.params, spec, cfg.training_seed));

    const std::size_t L = rules.size();
    MultilevelReport rep;
    rep.levels.resize(L);
    std::vector<LevelStats> stats_ml(L), stats_ncmc(L);
    for (std::size_t i = 0; i < L; ++i) {
        LevelReport& lr = rep.levels[i];
        lr.level = i;
        lr.spec = cfg.levels[i];
        if (i == 0) {
            const PlainEstimate p = estimate_stopped_value(model, *rules[0].rule, cfg.pilot_paths,
                                                           purpose_seed(cfg.testing_seed, 1), cfg.threads);
            lr.rho1 = p.work.units() / static_cast<double>(p.N);
            lr.v1 = p.sample_variance;
            stats_ml[0] = stats_ncmc[0] = {lr.v1, lr.rho1};
            continue;
        }
        const PilotResult p = pilot(model, *rules[i].rule, *rules[i - 1].rule, cfg.pilot_paths,
                                    cfg.pilot_replications, purpose_seed(cfg.testing_seed, 2, i), cfg.threads);
        const CalibReport c = calibrate(p);
        lr.rho1 = p.rho1;
        lr.rho2 = p.rho2;
        lr.v1 = p.v1;
        lr.v2 = p.v2;
        lr.R_star = c.R_star;
        lr.gamma_star = c.gamma_star;
        lr.R = c.R_rounded;
        const CalibParams cp = p.calib_params();
        stats_ml[i] = {cp.variance_at(1.0), cp.cost_at(1.0)};
        stats_ncmc[i] = {cp.variance_at(static_cast<double>(lr.R)), cp.cost_at(static_cast<double>(lr.R))};
    }

    const auto run = [&](const std::vector<LevelStats>& stats, bool nested, double& total, double& var, double& work) {
        const auto counts = ml_allocation(stats, cfg.budget);
        total = var = work = 0.0;
        for (std::size_t i = 0; i < L; ++i) {
            LevelReport& lr = rep.levels[i];
            const auto n = static_cast<std::size_t>(std::max<std::int64_t>(2, counts[i]));
            double m, v, w;
            if (i == 0) {
                const PlainEstimate e = estimate_stopped_value(model, *rules[0].rule, n,
                                                               purpose_seed(cfg.testing_seed, nested ? 4 : 3), cfg.threads);
                m = e.mean;
                v = e.sample_variance / static_cast<double>(n);
                w = e.work.units();
            } else {
                const std::size_t R = nested ? static_cast<std::size_t>(lr.R) : 1;
                const NestedEstimate e = estimate(model, *rules[i].rule, *rules[i - 1].rule, n, R,
                                                  purpose_seed(cfg.testing_seed, nested ? 6 : 5, i), cfg.threads);
                m = e.delta_hat;
                v = e.variance();
                w = e.work().units();
            }
            if (nested) {
                lr.N_ncmc = static_cast<std::int64_t>(n);
                lr.mean_ncmc = m;
                lr.var_ncmc = v;
                lr.work_ncmc = w;
            } else {
                lr.N_ml = static_cast<std::int64_t>(n);
                lr.mean_ml = m;
                lr.var_ml = v;
                lr.work_ml = w;
            }
            total += m;
            var += v;
            work += w;
        }
    };
    run(stats_ml, false, rep.ml, rep.ml_var, rep.ml_work);
    run(stats_ncmc, true, rep.ml_ncmc, rep.ml_ncmc_var, rep.ml_ncmc_work);

    // simple Monte Carlo on the finest rule at the same budget
    const PlainEstimate fine_pilot = estimate_stopped_value(model, *rules.back().rule, cfg.pilot_paths,
                                                            purpose_seed(cfg.testing_seed, 7), cfg.threads);
    rep.simple_N = paths_for_budget(cfg.budget, fine_pilot.work.units() / static_cast<double>(fine_pilot.N));
    const PlainEstimate s = estimate_stopped_value(model, *rules.back().rule, rep.simple_N,
                                                   purpose_seed(cfg.testing_seed, 8), cfg.threads);
    rep.simple = s.mean;
    rep.simple_var = s.sample_variance / static_cast<double>(rep.simple_N);
    rep.simple_work = s.work.units();

    const PlainEstimate direct = estimate_stopped_value(model, *rules.back().rule, cfg.direct_paths,
                                                        purpose_seed(cfg.testing_seed, 9), cfg.threads);
    rep.direct = direct.mean;
    rep.direct_stderr = direct.stderr();
    return rep;
}

} // namespace ncmc
