#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ncmc/process_models.hpp"
#include "ncmc/rng.hpp"
#include "ncmc/tree_model.hpp"

namespace ncmc {

/// Work charged for one stop/continue decision: simulated asset steps plus
/// basis evaluations.
struct DecisionCost {
    std::uint64_t steps = 0;
    std::uint64_t evals = 1;
};

/// An adapted stopping rule: the decision at date j is a function of the
/// state at j only, and the rule always stops at the last date.
template <class State>
class StoppingRule {
public:
    explicit StoppingRule(int last_date) : last_date_(last_date) {
        if (last_date < 1) throw std::invalid_argument("stopping rule needs at least two dates");
    }
    virtual ~StoppingRule() = default;

    int last_date() const { return last_date_; }

    bool decide(const State& s) const { return s.j >= last_date_ || stop_before_maturity(s); }

    virtual DecisionCost decision_cost() const { return {}; }

protected:
    virtual bool stop_before_maturity(const State& s) const = 0;

private:
    int last_date_;
};

template <class State>
class FixedMaturityRule final : public StoppingRule<State> {
public:
    using StoppingRule<State>::StoppingRule;

protected:
    bool stop_before_maturity(const State&) const override { return false; }
};

/// Stops at the first date >= `first_date`; first_date = 0 stops everywhere.
template <class State>
class StopFromDateRule final : public StoppingRule<State> {
public:
    StopFromDateRule(int last_date, int first_date) : StoppingRule<State>(last_date), first_date_(first_date) {}

protected:
    bool stop_before_maturity(const State& s) const override { return s.j >= first_date_; }

private:
    int first_date_;
};

/// Stops once the discounted payoff reaches `level`.
template <class State>
class PayoffThresholdRule final : public StoppingRule<State> {
public:
    PayoffThresholdRule(int last_date, double level) : StoppingRule<State>(last_date), level_(level) {}

protected:
    bool stop_before_maturity(const State& s) const override { return s.payoff >= level_; }

private:
    double level_;
};

/// Tree rule given by the set of nodes at which it stops. A node determines
/// its whole prefix, so any node set is an adapted rule.
class NodeSetRule final : public StoppingRule<TreeState> {
public:
    NodeSetRule(int last_date, std::set<int> stop_nodes)
        : StoppingRule<TreeState>(last_date), stop_nodes_(std::move(stop_nodes)) {}

protected:
    bool stop_before_maturity(const TreeState& s) const override { return stop_nodes_.count(s.node) > 0; }

private:
    std::set<int> stop_nodes_;
};

/// First date >= from at which the rule stops along the trajectory.
inline int evaluate_rule(const StoppingRule<PathState>& rule, const Trajectory& path, int from) {
    if (path.states.empty() || from < path.first_date() || path.last_date() < rule.last_date())
        throw std::invalid_argument("evaluate_rule: trajectory does not cover dates from.." +
                                    std::to_string(rule.last_date()));
    for (int j = from; j < rule.last_date(); ++j)
        if (rule.decide(path.at_date(j))) return j;
    return rule.last_date();
}

// ---------------------------------------------------------------------------
// Least-squares (Tsitsiklis-Van Roy) rule

enum class BasisKind { full, constant };

/// States where a regression rule may exercise before maturity.
enum class ExercisePolicy { any_state, in_the_money };

struct TrainingMeta {
    std::size_t training_paths = 0;
    std::uint64_t training_seed = 0;
};

class TvRRule final : public StoppingRule<PathState> {
public:
    TvRRule(int assets, double scale, BasisKind basis, std::vector<std::vector<double>> coefficients,
            TrainingMeta meta = {})
        : StoppingRule<PathState>(static_cast<int>(coefficients.size())),
          assets_(assets),
          scale_(scale),
          basis_(basis),
          coefficients_(std::move(coefficients)),
          meta_(meta) {
        if (assets < 1) throw std::invalid_argument("TvRRule: asset count must be >= 1");
        if (!(scale > 0.0)) throw std::invalid_argument("TvRRule: scale must be > 0");
        for (const auto& beta : coefficients_) {
            if (beta.size() != basis_size(assets, basis))
                throw std::invalid_argument("TvRRule: coefficient vector has wrong length");
            for (double b : beta)
                if (!std::isfinite(b)) throw std::invalid_argument("TvRRule: non-finite coefficient");
        }
    }

    /// 1, Y^d, Y^d Y^e (d <= e), X  for the full basis.
    static std::size_t basis_size(int assets, BasisKind basis) {
        if (basis == BasisKind::constant) return 1;
        const auto d = static_cast<std::size_t>(assets);
        return 2 + d + d * (d + 1) / 2;
    }

    static void evaluate_basis(std::span<const double> assets, double payoff, double scale, BasisKind basis,
                               std::span<double> out) {
        out[0] = 1.0;
        if (basis == BasisKind::constant) return;
        const std::size_t d = assets.size();
        std::size_t k = 1;
        for (std::size_t a = 0; a < d; ++a) out[k++] = assets[a] / scale;
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b) out[k++] = (assets[a] / scale) * (assets[b] / scale);
        out[k] = payoff / scale;
    }

    /// Regressed continuation value at the state's date (j < J).
    double continuation(std::span<const double> assets, double payoff, int j) const {
        const auto& beta = coefficients_.at(static_cast<std::size_t>(j));
        double phi[64];
        std::vector<double> heap;
        std::span<double> buf;
        if (beta.size() <= 64) {
            buf = std::span<double>(phi, beta.size());
        } else {
            heap.resize(beta.size());
            buf = heap;
        }
        evaluate_basis(assets, payoff, scale_, basis_, buf);
        double c = 0.0;
        for (std::size_t k = 0; k < beta.size(); ++k) c += beta[k] * buf[k];
        return c;
    }
    double continuation(const PathState& s) const { return continuation(s.assets, s.payoff, s.j); }

    int assets() const { return assets_; }
    double scale() const { return scale_; }
    BasisKind basis() const { return basis_; }
    const std::vector<std::vector<double>>& coefficients() const { return coefficients_; }
    const TrainingMeta& meta() const { return meta_; }
    ExercisePolicy exercise() const { return exercise_; }

    /// Copy of this rule with a different exercise policy; coefficients are kept.
    TvRRule with_exercise(ExercisePolicy policy) const {
        TvRRule out = *this;
        out.exercise_ = policy;
        return out;
    }

    bool may_exercise(const PathState& s) const { return exercise_ == ExercisePolicy::any_state || s.payoff > 0.0; }

protected:
    // Ties stop.
    bool stop_before_maturity(const PathState& s) const override {
        return may_exercise(s) && s.payoff >= continuation(s);
    }

private:
    int assets_;
    double scale_;
    BasisKind basis_;
    std::vector<std::vector<double>> coefficients_;
    TrainingMeta meta_;
    ExercisePolicy exercise_ = ExercisePolicy::any_state;
};

/// Relative singular values below this are treated as zero in the regression.
inline constexpr double kSingularCutoff = 1e-10;

/// Backward induction: V_J = X_J; for j = J-1..0 regress V_{j+1} on the basis
/// at date j over all paths and set V_j = max(X_j, C_j).
inline TvRRule train_tvr(std::span<const Trajectory> training_paths, const GbmParams& params,
                         BasisKind basis = BasisKind::full) {
    params.validate();
    const int last = params.last_date();
    const std::size_t p = TvRRule::basis_size(params.assets, basis);
    const std::size_t n = training_paths.size();
    if (n < p) throw std::invalid_argument("train_tvr: need at least " + std::to_string(p) + " training paths");
    for (const auto& t : training_paths) {
        if (t.rng_key.domain != StreamDomain::training)
            throw std::invalid_argument("train_tvr: path drawn outside the training stream domain");
        if (t.first_date() != 0 || t.last_date() != last)
            throw std::invalid_argument("train_tvr: training paths must cover dates 0..J");
        if (static_cast<int>(t.states.front().assets.size()) != params.assets)
            throw std::invalid_argument("train_tvr: path dimension does not match params");
    }

    Eigen::VectorXd value(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) value(static_cast<Eigen::Index>(i)) = training_paths[i].states.back().payoff;

    std::vector<std::vector<double>> coefficients(static_cast<std::size_t>(last));
    Eigen::MatrixXd design(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
    std::vector<double> phi(p);
    for (int j = last - 1; j >= 0; --j) {
        for (std::size_t i = 0; i < n; ++i) {
            const PathState& s = training_paths[i].states[static_cast<std::size_t>(j)];
            TvRRule::evaluate_basis(s.assets, s.payoff, params.spot, basis, phi);
            for (std::size_t k = 0; k < p; ++k)
                design(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = phi[k];
        }
        Eigen::JacobiSVD<Eigen::MatrixXd, Eigen::ColPivHouseholderQRPreconditioner> svd(
            design, Eigen::ComputeThinU | Eigen::ComputeThinV);
        svd.setThreshold(kSingularCutoff);
        const Eigen::VectorXd beta = svd.solve(value);
        const Eigen::VectorXd fitted = design * beta;
        for (std::size_t i = 0; i < n; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const double x = training_paths[i].states[static_cast<std::size_t>(j)].payoff;
            value(ii) = x >= fitted(ii) ? x : fitted(ii);
        }
        coefficients[static_cast<std::size_t>(j)].assign(beta.data(), beta.data() + beta.size());
    }
    return TvRRule(params.assets, params.spot, basis, std::move(coefficients));
}

/// Generates `count` training paths from the training stream domain.
inline std::vector<Trajectory> simulate_training_paths(const GbmParams& params, std::size_t count,
                                                       std::uint64_t seed) {
    std::vector<Trajectory> paths;
    paths.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        paths.push_back(simulate_full_path(params, {seed, StreamDomain::training, static_cast<std::uint32_t>(i), 0}));
    return paths;
}

inline TvRRule train_tvr(const GbmParams& params, std::size_t count, std::uint64_t seed,
                         BasisKind basis = BasisKind::full) {
    const auto paths = simulate_training_paths(params, count, seed);
    const TvRRule fitted = train_tvr(paths, params, basis);
    return TvRRule(fitted.assets(), fitted.scale(), fitted.basis(), fitted.coefficients(), {count, seed});
}

/// Adds `epsilon` to the regressed continuation value, delaying exercise.
class ShiftedRule final : public StoppingRule<PathState> {
public:
    ShiftedRule(std::shared_ptr<const TvRRule> inner, double epsilon)
        : StoppingRule<PathState>(inner->last_date()), inner_(std::move(inner)), epsilon_(epsilon) {
        if (!(epsilon >= 0.0)) throw std::invalid_argument("shift must be >= 0");
    }

    double epsilon() const { return epsilon_; }
    const TvRRule& inner() const { return *inner_; }

protected:
    bool stop_before_maturity(const PathState& s) const override {
        return inner_->may_exercise(s) && s.payoff >= inner_->continuation(s) + epsilon_;
    }

private:
    std::shared_ptr<const TvRRule> inner_;
    double epsilon_;
};

inline ShiftedRule shift_rule(std::shared_ptr<const TvRRule> rule, double epsilon) {
    return ShiftedRule(std::move(rule), epsilon);
}

/// One-step lookahead on top of a regression rule: the continuation value at
/// date j is the average of max(X_{j+1}, C_{j+1}) over a fixed inner sample
/// of next-date states. More accurate than the plain regression and costlier
/// to evaluate in proportion to the inner sample size.
class LookaheadRule final : public StoppingRule<PathState> {
public:
    LookaheadRule(std::shared_ptr<const TvRRule> inner, const GbmParams& params, int inner_samples,
                  std::uint64_t seed)
        : StoppingRule<PathState>(inner->last_date()), inner_(std::move(inner)), params_(params) {
        params_.validate();
        if (inner_samples < 2 || inner_samples % 2 != 0)
            throw std::invalid_argument("lookahead inner sample count must be even and >= 2");
        if (inner_->last_date() != params_.last_date() || inner_->assets() != params_.assets)
            throw std::invalid_argument("lookahead rule and model disagree on dates or dimension");
        const auto d = static_cast<std::size_t>(params_.assets);
        const auto m = static_cast<std::size_t>(inner_samples);
        growth_.resize(m * d);
        const double drift = (params_.rate - params_.dividend - 0.5 * params_.sigma * params_.sigma) * params_.dt();
        const double vol = params_.sigma * std::sqrt(params_.dt());
        std::vector<double> z(d);
        // antithetic pairs
        for (std::size_t k = 0; k < m / 2; ++k) {
            fill_normals({seed, StreamDomain::rule_internal, static_cast<std::uint32_t>(k), 0}, 0, z);
            for (std::size_t a = 0; a < d; ++a) {
                growth_[(2 * k) * d + a] = std::exp(drift + vol * z[a]);
                growth_[(2 * k + 1) * d + a] = std::exp(drift - vol * z[a]);
            }
        }
    }

    int inner_samples() const { return static_cast<int>(growth_.size() / static_cast<std::size_t>(params_.assets)); }

    double continuation(const PathState& s) const {
        const auto d = static_cast<std::size_t>(params_.assets);
        const auto m = growth_.size() / d;
        const int next = s.j + 1;
        double next_assets[64];
        std::vector<double> heap;
        std::span<double> y;
        if (d <= 64) {
            y = std::span<double>(next_assets, d);
        } else {
            heap.resize(d);
            y = heap;
        }
        double total = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            for (std::size_t a = 0; a < d; ++a) y[a] = s.assets[a] * growth_[k * d + a];
            const double x = max_call_payoff(next, y, params_);
            total += next >= last_date() ? x : std::max(x, inner_->continuation(y, x, next));
        }
        return total / static_cast<double>(m);
    }

    DecisionCost decision_cost() const override {
        const auto m = static_cast<std::uint64_t>(inner_samples());
        return {m * static_cast<std::uint64_t>(params_.assets), m};
    }

protected:
    bool stop_before_maturity(const PathState& s) const override {
        return inner_->may_exercise(s) && s.payoff >= continuation(s);
    }

private:
    std::shared_ptr<const TvRRule> inner_;
    GbmParams params_;
    std::vector<double> growth_; // inner_samples x assets multiplicative one-step factors
};

// ---------------------------------------------------------------------------
// Rule files: `# key=value` metadata lines, then one line per date holding
// the date index followed by the coefficients.

inline void write_tvr(std::ostream& out, const TvRRule& rule) {
    out << "# ncmc tvr rule\n";
    out << "# assets=" << rule.assets() << "\n";
    out << "# scale=" << std::setprecision(17) << rule.scale() << "\n";
    out << "# last_date=" << rule.last_date() << "\n";
    out << "# basis=" << (rule.basis() == BasisKind::full ? "full" : "constant") << "\n";
    out << "# exercise=" << (rule.exercise() == ExercisePolicy::in_the_money ? "in_the_money" : "any_state") << "\n";
    out << "# training_paths=" << rule.meta().training_paths << "\n";
    out << "# training_seed=" << rule.meta().training_seed << "\n";
    for (std::size_t j = 0; j < rule.coefficients().size(); ++j) {
        out << j;
        for (double b : rule.coefficients()[j]) out << ' ' << std::setprecision(17) << b;
        out << '\n';
    }
}

inline TvRRule read_tvr(std::istream& in) {
    std::map<std::string, std::string> meta;
    std::vector<std::vector<double>> coefficients;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(1, eq - 1);
            key.erase(0, key.find_first_not_of(' '));
            meta[key] = line.substr(eq + 1);
            continue;
        }
        std::istringstream row(line);
        std::size_t j = 0;
        if (!(row >> j) || j != coefficients.size())
            throw std::runtime_error("rule file: expected date index " + std::to_string(coefficients.size()));
        std::vector<double> beta;
        double b = 0.0;
        while (row >> b) beta.push_back(b);
        coefficients.push_back(std::move(beta));
    }
    for (const char* key : {"assets", "scale", "basis"})
        if (!meta.count(key)) throw std::runtime_error(std::string("rule file: missing metadata ") + key);
    TrainingMeta tm;
    if (meta.count("training_paths")) tm.training_paths = std::stoull(meta["training_paths"]);
    if (meta.count("training_seed")) tm.training_seed = std::stoull(meta["training_seed"]);
    const BasisKind basis = meta["basis"] == "constant" ? BasisKind::constant : BasisKind::full;
    TvRRule rule(std::stoi(meta["assets"]), std::stod(meta["scale"]), basis, std::move(coefficients), tm);
    if (meta.count("last_date") && std::stoi(meta["last_date"]) != rule.last_date())
        throw std::runtime_error("rule file: last_date does not match coefficient rows");
    if (meta.count("exercise")) {
        if (meta["exercise"] == "in_the_money") return rule.with_exercise(ExercisePolicy::in_the_money);
        if (meta["exercise"] != "any_state") throw std::runtime_error("rule file: unknown exercise policy " + meta["exercise"]);
    }
    return rule;
}

} // namespace ncmc
