#pragma once

// Closed-form calibration of the nested estimator.
//
// With trunk cost rho1, subsample cost rho2 and variance components v1, v2,
// a budget C spent at replication count R gives Var = V(R) / C with
//     V(R) = (rho1 + rho2 R) (v1 + v2 / R).
// V is minimised at R* = sqrt(rho1 v2 / (rho2 v1)) when that exceeds 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ncmc {

/// Thrown when a calibration input is exactly zero, which makes R* or the
/// gain undefined (as opposed to merely invalid input).
class DegenerateParams : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class CalibParams {
public:
    CalibParams(double v1, double v2, double rho1, double rho2, std::optional<double> p_differ = std::nullopt)
        : v1_(v1), v2_(v2), rho1_(rho1), rho2_(rho2), p_differ_(p_differ) {
        const std::pair<const char*, double> fields[] = {{"v1", v1}, {"v2", v2}, {"rho1", rho1}, {"rho2", rho2}};
        for (const auto& [name, value] : fields) {
            if (!std::isfinite(value) || value < 0.0)
                throw std::invalid_argument(std::string("calibration parameter ") + name + " must be finite and >= 0");
            if (value == 0.0)
                throw DegenerateParams(std::string("calibration parameter ") + name + " is zero");
        }
    }

    double v1() const { return v1_; }
    double v2() const { return v2_; }
    double rho1() const { return rho1_; }
    double rho2() const { return rho2_; }
    std::optional<double> p_differ() const { return p_differ_; }

    /// Left-hand side of the gain condition; nesting pays iff this exceeds 1.
    double condition_ratio() const { return (rho1_ / rho2_) * (v2_ / v1_); }

    /// Per-trunk cost and variance at R replications.
    double cost_at(double R) const { return rho1_ + rho2_ * R; }
    double variance_at(double R) const { return v1_ + v2_ / R; }

private:
    double v1_, v2_, rho1_, rho2_;
    std::optional<double> p_differ_;
};

struct CalibReport {
    double R_star = 1.0;
    std::int64_t R_rounded = 1;
    double N_star_per_budget = 0.0; // N* / C
    double gamma_star = 1.0;
    double gain_lower = 0.0;
    double gain_upper = 0.0;
    bool condition_holds = false;

    double speed_up() const { return 1.0 / gamma_star; }
};

inline double v_profile(const CalibParams& p, double R) {
    if (!(R >= 1.0)) throw std::invalid_argument("v_profile: R must be >= 1");
    return p.cost_at(R) * p.variance_at(R);
}

struct GainResult {
    double value = 1.0;
    bool condition_holds = false;
};

inline GainResult gain(const CalibParams& p) {
    if (!(p.condition_ratio() > 1.0)) return {1.0, false};
    const double a = std::sqrt(p.v1() / p.v2()) + std::sqrt(p.rho2() / p.rho1());
    return {a * a / ((1.0 + p.v1() / p.v2()) * (1.0 + p.rho2() / p.rho1())), true};
}

/// max(rho2 / (rho1 + rho2), v1 / (v1 + v2)); the gain lies in [b, 4b].
inline double gain_lower_bound(const CalibParams& p) {
    return std::max(p.rho2() / (p.rho1() + p.rho2()), p.v1() / (p.v1() + p.v2()));
}

/// Nearest integer, ties rounded up, never below 1.
inline std::int64_t round_replications(double R_star) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(R_star + 0.5)));
}

inline CalibReport optimal_R(const CalibParams& p) {
    CalibReport rep;
    rep.condition_holds = p.condition_ratio() > 1.0;
    rep.R_star = rep.condition_holds ? std::sqrt(p.condition_ratio()) : 1.0;
    rep.R_rounded = round_replications(rep.R_star);
    rep.N_star_per_budget = 1.0 / p.cost_at(rep.R_star);
    rep.gamma_star = gain(p).value;
    rep.gain_lower = gain_lower_bound(p);
    rep.gain_upper = 4.0 * rep.gain_lower;
    return rep;
}

/// Worst-case V(R) / V(R*) for R within a factor alpha of R*.
inline double robustness_bound(double alpha) {
    if (!(alpha >= 1.0) || !std::isfinite(alpha)) throw std::invalid_argument("robustness_bound: alpha must be >= 1");
    return 0.5 + (alpha + 1.0 / alpha) / 4.0;
}

namespace detail {

/// Floors the continuous allocation, then spends what is left of the budget
/// one sample at a time on the term with the largest variance reduction per
/// unit cost.
inline std::vector<std::int64_t> integerize_allocation(const std::vector<double>& continuous,
                                                       const std::vector<double>& variance,
                                                       const std::vector<double>& cost, double budget) {
    const std::size_t m = continuous.size();
    std::vector<std::int64_t> n(m);
    double spent = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        n[i] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(continuous[i])));
        spent += static_cast<double>(n[i]) * cost[i];
    }
    for (;;) {
        std::optional<std::size_t> best;
        double best_score = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            if (spent + cost[i] > budget) continue;
            const double ni = static_cast<double>(n[i]);
            const double score = variance[i] / (ni * (ni + 1.0)) / cost[i];
            if (score > best_score) {
                best_score = score;
                best = i;
            }
        }
        if (!best) break;
        ++n[*best];
        spent += cost[*best];
    }
    return n;
}

} // namespace detail

struct QcvAllocation {
    std::int64_t N_B = 0; // paths for E[X_{tau_B}]
    std::int64_t N = 0;   // trunks for the nested difference estimate
};

/// Path counts for the quasi-control-variate estimator at R replications.
/// N_B / N = sqrt((v_B / v(R)) (rho(R) / rho_B)) independently of the budget.
inline QcvAllocation qcv_allocation(double v_b, double rho_b, const CalibParams& p, std::int64_t R, double budget) {
    if (!(v_b > 0.0) || !(rho_b > 0.0) || !std::isfinite(v_b) || !std::isfinite(rho_b))
        throw std::invalid_argument("qcv_allocation: v_B and rho_B must be positive");
    if (R < 1) throw std::invalid_argument("qcv_allocation: R must be >= 1");
    const double rho_r = p.cost_at(static_cast<double>(R));
    const double v_r = p.variance_at(static_cast<double>(R));
    if (!(budget >= rho_r + rho_b)) throw std::invalid_argument("qcv_allocation: budget cannot pay for one path of each kind");
    const double ratio = std::sqrt((v_b / v_r) * (rho_r / rho_b));
    const double n = budget / (rho_r + ratio * rho_b);
    const auto counts = detail::integerize_allocation({ratio * n, n}, {v_b, v_r}, {rho_b, rho_r}, budget);
    return {counts[0], counts[1]};
}

struct LevelStats {
    double variance = 0.0;
    double cost = 0.0;
};

/// Multilevel sample sizes: N_i proportional to sqrt(variance_i / cost_i),
/// scaled to spend the budget.
inline std::vector<std::int64_t> ml_allocation(const std::vector<LevelStats>& levels, double budget) {
    if (levels.empty()) throw std::invalid_argument("ml_allocation: no levels");
    double min_spend = 0.0, scale = 0.0;
    std::vector<double> variance, cost;
    for (const auto& l : levels) {
        if (!(l.variance > 0.0) || !(l.cost > 0.0) || !std::isfinite(l.variance) || !std::isfinite(l.cost))
            throw std::invalid_argument("ml_allocation: level statistics must be positive");
        min_spend += l.cost;
        scale += std::sqrt(l.variance * l.cost);
        variance.push_back(l.variance);
        cost.push_back(l.cost);
    }
    if (!(budget >= min_spend)) throw std::invalid_argument("ml_allocation: budget cannot pay for one sample per level");
    const double k = budget / scale;
    std::vector<double> continuous;
    for (const auto& l : levels) continuous.push_back(k * std::sqrt(l.variance / l.cost));
    return detail::integerize_allocation(continuous, variance, cost, budget);
}

} // namespace ncmc
