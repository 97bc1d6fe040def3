#pragma once

// Nested conditional Monte Carlo for Delta = E[X_{tau_A} - X_{tau_B}].
//
// Stage one simulates N trunk paths until the first of the two rules stops
// (tau_wedge). Whenever the rules disagree there, stage two runs R
// conditionally independent continuations until the surviving rule stops
// (tau_vee). The estimate is the double average of
// S * (X_{tau_vee} - X_{tau_wedge}), S = sign(tau_A - tau_B).
//
// Model requirements (GbmModel, TreeModel):
//   using State;                      // with members j and payoff
//   State start(const StreamKey&) const;
//   void advance(State&, const StreamKey&) const;
//   int last_date() const;
//   std::uint64_t step_work() const;

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ncmc/calibration.hpp"
#include "ncmc/numerics.hpp"
#include "ncmc/rng.hpp"
#include "ncmc/stopping_rules.hpp"

namespace ncmc {

/// Deterministic cost accounting. One unit per simulated asset-date step and
/// one unit per ten basis evaluations.
struct WorkMeter {
    std::uint64_t steps = 0;
    std::uint64_t rule_evals = 0;

    double units() const { return static_cast<double>(steps) + 0.1 * static_cast<double>(rule_evals); }

    void charge(const DecisionCost& c) {
        steps += c.steps;
        rule_evals += c.evals;
    }

    WorkMeter& operator+=(const WorkMeter& o) {
        steps += o.steps;
        rule_evals += o.rule_evals;
        return *this;
    }
    friend WorkMeter operator+(WorkMeter a, const WorkMeter& b) { return a += b; }
    friend bool operator==(const WorkMeter&, const WorkMeter&) = default;
};

enum class Survivor { rule_a, rule_b };

template <class State>
struct TrunkRecord {
    std::uint32_t index = 0;
    int tau_wedge = 0;
    int sign = 0; // sign(tau_A - tau_B), known at tau_wedge
    double x_wedge = 0.0;
    State resume_state{};
    std::optional<Survivor> surviving_rule; // empty iff sign == 0
};

struct NestedEstimate {
    double delta_hat = 0.0;
    std::size_t N = 0;
    std::size_t R = 0;
    std::optional<double> v1_hat; // present for R >= 2
    std::optional<double> v2_hat; // present for R >= 2
    double trunk_mean_variance = 0.0; // sample variance of the per-trunk averages
    double stderr_ = 0.0;
    double p_differ = 0.0; // fraction of trunks with S != 0
    WorkMeter work_trunk;
    WorkMeter work_sub;

    double stderr() const { return stderr_; }
    double variance() const { return stderr_ * stderr_; }
    WorkMeter work() const { return work_trunk + work_sub; }
};

template <class Model>
TrunkRecord<typename Model::State> run_trunk(const Model& model, const StoppingRule<typename Model::State>& rule_a,
                                             const StoppingRule<typename Model::State>& rule_b, std::uint32_t i,
                                             std::uint64_t seed, WorkMeter& work) {
    const StreamKey key{seed, StreamDomain::testing, i, 0};
    TrunkRecord<typename Model::State> rec;
    rec.index = i;
    auto s = model.start(key);
    for (;;) {
        const bool stop_a = rule_a.decide(s);
        work.charge(rule_a.decision_cost());
        const bool stop_b = rule_b.decide(s);
        work.charge(rule_b.decision_cost());
        if (stop_a || stop_b) {
            rec.tau_wedge = s.j;
            rec.x_wedge = s.payoff;
            if (stop_a && !stop_b) {
                rec.sign = -1;
                rec.surviving_rule = Survivor::rule_b;
            } else if (stop_b && !stop_a) {
                rec.sign = +1;
                rec.surviving_rule = Survivor::rule_a;
            }
            rec.resume_state = std::move(s);
            return rec;
        }
        model.advance(s, key);
        work.steps += model.step_work();
    }
}

/// Writes S * (X_{tau_vee} - X_{tau_wedge}) for replications 1..R into `out`.
template <class Model>
void run_subsamples(const TrunkRecord<typename Model::State>& trunk, const Model& model,
                    const StoppingRule<typename Model::State>& rule_a,
                    const StoppingRule<typename Model::State>& rule_b, std::span<double> out, std::uint64_t seed,
                    WorkMeter& work) {
    if (out.empty()) throw std::invalid_argument("run_subsamples: R must be >= 1");
    if (trunk.sign == 0) {
        std::fill(out.begin(), out.end(), 0.0);
        return;
    }
    const auto& survivor = *trunk.surviving_rule == Survivor::rule_a ? rule_a : rule_b;
    const StreamKey base{seed, StreamDomain::testing, trunk.index, 0};
    for (std::size_t r = 0; r < out.size(); ++r) {
        const StreamKey key = base.with_replication(static_cast<std::uint32_t>(r + 1));
        auto s = trunk.resume_state;
        do {
            model.advance(s, key);
            work.steps += model.step_work();
            work.charge(survivor.decision_cost());
        } while (!survivor.decide(s));
        out[r] = static_cast<double>(trunk.sign) * (s.payoff - trunk.x_wedge);
    }
}

template <class Model>
std::vector<double> run_subsamples(const TrunkRecord<typename Model::State>& trunk, const Model& model,
                                   const StoppingRule<typename Model::State>& rule_a,
                                   const StoppingRule<typename Model::State>& rule_b, std::size_t R,
                                   std::uint64_t seed, WorkMeter& work) {
    std::vector<double> out(R);
    run_subsamples(trunk, model, rule_a, rule_b, std::span<double>(out), seed, work);
    return out;
}

template <class Model>
NestedEstimate estimate(const Model& model, const StoppingRule<typename Model::State>& rule_a,
                        const StoppingRule<typename Model::State>& rule_b, std::size_t N, std::size_t R,
                        std::uint64_t seed, unsigned threads = 0) {
    if (N < 2) throw std::invalid_argument("estimate: N must be >= 2");
    if (R < 1) throw std::invalid_argument("estimate: R must be >= 1");
    if (N > 0xFFFFFFFFull || R >= 0xFFFFFFFFull) throw std::invalid_argument("estimate: N or R too large");

    std::vector<double> trunk_mean(N), trunk_var(N, 0.0);
    std::vector<WorkMeter> trunk_work(N), sub_work(N);
    std::vector<unsigned char> differs(N, 0);

    parallel_for(N, threads, [&](std::size_t i) {
        thread_local std::vector<double> values;
        values.resize(R);
        const auto rec = run_trunk(model, rule_a, rule_b, static_cast<std::uint32_t>(i), seed, trunk_work[i]);
        differs[i] = rec.sign != 0;
        run_subsamples(rec, model, rule_a, rule_b, std::span<double>(values), seed, sub_work[i]);
        trunk_mean[i] = mean(values);
        if (R >= 2 && rec.sign != 0) trunk_var[i] = sample_variance(values);
    });

    NestedEstimate est;
    est.N = N;
    est.R = R;
    for (std::size_t i = 0; i < N; ++i) {
        est.work_trunk += trunk_work[i];
        est.work_sub += sub_work[i];
        est.p_differ += differs[i];
    }
    est.p_differ /= static_cast<double>(N);
    est.delta_hat = mean(trunk_mean);
    est.trunk_mean_variance = sample_variance(trunk_mean);
    const double n = static_cast<double>(N);
    if (R >= 2) {
        const double v2 = mean(trunk_var);
        const double v1 = std::max(0.0, est.trunk_mean_variance - v2 / static_cast<double>(R));
        est.v1_hat = v1;
        est.v2_hat = v2;
        est.stderr_ = std::sqrt(v1 / n + v2 / (static_cast<double>(R) * n));
    } else {
        est.stderr_ = std::sqrt(est.trunk_mean_variance / n);
    }
    return est;
}

/// Plain Monte Carlo estimate of E[X_tau] for a single rule.
struct PlainEstimate {
    double mean = 0.0;
    double sample_variance = 0.0;
    double stderr_ = 0.0;
    std::size_t N = 0;
    WorkMeter work;

    double stderr() const { return stderr_; }
    double variance() const { return stderr_ * stderr_; }
};

template <class Model>
PlainEstimate estimate_stopped_value(const Model& model, const StoppingRule<typename Model::State>& rule,
                                     std::size_t N, std::uint64_t seed, unsigned threads = 0) {
    if (N < 2) throw std::invalid_argument("estimate_stopped_value: N must be >= 2");
    std::vector<double> values(N);
    std::vector<WorkMeter> work(N);
    parallel_for(N, threads, [&](std::size_t i) {
        const StreamKey key{seed, StreamDomain::testing, static_cast<std::uint32_t>(i), 0};
        auto s = model.start(key);
        for (;;) {
            work[i].charge(rule.decision_cost());
            if (rule.decide(s)) break;
            model.advance(s, key);
            work[i].steps += model.step_work();
        }
        values[i] = s.payoff;
    });
    PlainEstimate est;
    est.N = N;
    for (const auto& w : work) est.work += w;
    est.mean = mean(values);
    est.sample_variance = sample_variance(values);
    est.stderr_ = std::sqrt(est.sample_variance / static_cast<double>(N));
    return est;
}

/// Pilot-run estimates of the calibration inputs.
struct PilotResult {
    double v1 = 0.0;
    double v2 = 0.0;
    double rho1 = 0.0;
    double rho2 = 0.0;
    double p_differ = 0.0;
    bool degenerate = false; // no trunk had S != 0: Delta is exactly zero
    NestedEstimate run;

    /// True when some component is exactly zero and calib_params() floors it.
    bool needs_floor() const { return v1 == 0.0 || v2 == 0.0 || rho1 == 0.0 || rho2 == 0.0; }

    /// Calibration inputs; exact zeros are replaced by 1e-12 times the scale
    /// of their pair so the closed-form algebra stays defined.
    CalibParams calib_params() const {
        const auto floor_of = [](double x, double scale) { return x > 0.0 ? x : 1e-12 * (scale > 0.0 ? scale : 1.0); };
        const double v_scale = std::max(v1, v2);
        const double rho_scale = std::max(rho1, rho2);
        return CalibParams(floor_of(v1, v_scale), floor_of(v2, v_scale), floor_of(rho1, rho_scale),
                           floor_of(rho2, rho_scale), p_differ);
    }
};

/// Calibration from a pilot. A degenerate pilot (the rules never differ)
/// keeps R = 1 with no predicted gain.
inline CalibReport calibrate(const PilotResult& p) {
    if (p.degenerate) return CalibReport{1.0, 1, 0.0, 1.0, 0.0, 0.0, false};
    return optimal_R(p.calib_params());
}

template <class Model>
PilotResult pilot(const Model& model, const StoppingRule<typename Model::State>& rule_a,
                  const StoppingRule<typename Model::State>& rule_b, std::size_t n_pilot, std::size_t r_pilot,
                  std::uint64_t seed, unsigned threads = 0) {
    if (n_pilot < 100) throw std::invalid_argument("pilot: N_pilot must be >= 100");
    if (r_pilot < 2) throw std::invalid_argument("pilot: R_pilot must be >= 2");
    PilotResult p;
    p.run = estimate(model, rule_a, rule_b, n_pilot, r_pilot, seed, threads);
    p.v1 = *p.run.v1_hat;
    p.v2 = *p.run.v2_hat;
    p.rho1 = p.run.work_trunk.units() / static_cast<double>(n_pilot);
    p.rho2 = p.run.work_sub.units() / (static_cast<double>(n_pilot) * static_cast<double>(r_pilot));
    p.p_differ = p.run.p_differ;
    p.degenerate = p.run.p_differ == 0.0;
    return p;
}

} // namespace ncmc
