#pragma once

// Multi-asset Black-Scholes model with dividends, observed on a finite grid
// of exercise dates, and the discounted max-call payoff.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncmc/rng.hpp"

namespace ncmc {

struct GbmParams {
    int assets = 2;
    double rate = 0.05;
    double dividend = 0.10;
    double sigma = 0.20;
    double strike = 100.0;
    double spot = 90.0;
    double maturity = 3.0;
    int exercise_dates = 10; // t_0 = 0, ..., t_J = maturity with J = exercise_dates - 1

    int last_date() const { return exercise_dates - 1; }
    double time_of(int j) const { return maturity * j / last_date(); }
    double dt() const { return maturity / last_date(); }

    void validate() const {
        if (assets < 1) throw std::invalid_argument("asset count must be >= 1");
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("sigma must be finite and >= 0");
        if (!(maturity > 0.0) || !std::isfinite(maturity)) throw std::invalid_argument("maturity must be > 0");
        if (!(strike > 0.0) || !std::isfinite(strike)) throw std::invalid_argument("strike must be > 0");
        if (!(spot > 0.0) || !std::isfinite(spot)) throw std::invalid_argument("spot must be > 0");
        if (!std::isfinite(rate) || !std::isfinite(dividend)) throw std::invalid_argument("rate and dividend must be finite");
        if (exercise_dates < 2) throw std::invalid_argument("need at least two exercise dates");
    }
};

/// State of the process at exercise date j. `payoff` is X_j, already
/// discounted to time 0.
struct PathState {
    int j = 0;
    std::vector<double> assets;
    double payoff = 0.0;

    friend bool operator==(const PathState&, const PathState&) = default;
};

struct Trajectory {
    std::vector<PathState> states;
    StreamKey rng_key;

    int first_date() const { return states.empty() ? -1 : states.front().j; }
    int last_date() const { return states.empty() ? -1 : states.back().j; }

    const PathState& at_date(int j) const {
        const int offset = j - first_date();
        if (states.empty() || offset < 0 || offset >= static_cast<int>(states.size()))
            throw std::out_of_range("date " + std::to_string(j) + " not covered by trajectory");
        return states[static_cast<std::size_t>(offset)];
    }

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Exact log-normal transition over dt, in place.
inline void gbm_step_inplace(std::span<double> assets, double dt, const GbmParams& params,
                             std::span<const double> normals) {
    const double drift = (params.rate - params.dividend - 0.5 * params.sigma * params.sigma) * dt;
    const double vol = params.sigma * std::sqrt(dt);
    for (std::size_t a = 0; a < assets.size(); ++a) assets[a] *= std::exp(drift + vol * normals[a]);
}

inline std::vector<double> gbm_step(std::span<const double> assets, double dt, const GbmParams& params,
                                    std::span<const double> normals) {
    if (!(dt > 0.0)) throw std::invalid_argument("gbm_step: dt must be > 0");
    if (normals.size() != assets.size()) throw std::invalid_argument("gbm_step: need one normal draw per asset");
    for (double y : assets)
        if (!std::isfinite(y) || y <= 0.0) throw std::invalid_argument("gbm_step: non-finite or non-positive price");
    for (double z : normals)
        if (!std::isfinite(z)) throw std::invalid_argument("gbm_step: non-finite normal draw");
    std::vector<double> out(assets.begin(), assets.end());
    gbm_step_inplace(out, dt, params, normals);
    return out;
}

/// e^{-r t_j} (max_d Y^d - K)^+
inline double max_call_payoff(int j, std::span<const double> assets, const GbmParams& params) {
    if (j < 0 || j > params.last_date()) throw std::invalid_argument("max_call_payoff: date index out of range");
    if (assets.empty()) throw std::invalid_argument("max_call_payoff: empty asset vector");
    const double best = *std::max_element(assets.begin(), assets.end());
    const double intrinsic = best - params.strike;
    return intrinsic > 0.0 ? std::exp(-params.rate * params.time_of(j)) * intrinsic : 0.0;
}

/// The max-call process as a model usable by the nested estimator: draws for
/// the transition into date j come from (key, j).
class GbmModel {
public:
    using State = PathState;

    explicit GbmModel(GbmParams params) : params_(params) { params_.validate(); }

    const GbmParams& params() const { return params_; }
    int last_date() const { return params_.last_date(); }
    /// Work units charged for one date transition.
    std::uint64_t step_work() const { return static_cast<std::uint64_t>(params_.assets); }

    State start(const StreamKey&) const {
        State s;
        s.j = 0;
        s.assets.assign(static_cast<std::size_t>(params_.assets), params_.spot);
        s.payoff = max_call_payoff(0, s.assets, params_);
        return s;
    }

    void advance(State& s, const StreamKey& key) const {
        if (s.j >= last_date()) throw std::logic_error("cannot advance past the last exercise date");
        double buf[64];
        std::vector<double> heap;
        std::span<double> z;
        if (s.assets.size() <= 64) {
            z = std::span<double>(buf, s.assets.size());
        } else {
            heap.resize(s.assets.size());
            z = heap;
        }
        ++s.j;
        fill_normals(key, static_cast<std::uint32_t>(s.j), z);
        gbm_step_inplace(s.assets, params_.dt(), params_, z);
        s.payoff = max_call_payoff(s.j, s.assets, params_);
    }

private:
    GbmParams params_;
};

inline Trajectory simulate_full_path(const GbmParams& params, const StreamKey& key) {
    const GbmModel model(params);
    Trajectory t;
    t.rng_key = key;
    t.states.reserve(static_cast<std::size_t>(params.exercise_dates));
    PathState s = model.start(key);
    t.states.push_back(s);
    while (s.j < model.last_date()) {
        model.advance(s, key);
        t.states.push_back(s);
    }
    return t;
}

/// Continuation from an intermediate state: dates from.j+1 .. J.
inline Trajectory continue_path(const PathState& from, const GbmParams& params, const StreamKey& key) {
    const GbmModel model(params);
    if (from.j >= model.last_date()) throw std::invalid_argument("continue_path: state is already at the last date");
    if (from.j < 0) throw std::invalid_argument("continue_path: negative date index");
    if (static_cast<int>(from.assets.size()) != params.assets)
        throw std::invalid_argument("continue_path: asset vector has wrong dimension");
    Trajectory t;
    t.rng_key = key;
    PathState s = from;
    while (s.j < model.last_date()) {
        model.advance(s, key);
        t.states.push_back(s);
    }
    return t;
}

} // namespace ncmc
