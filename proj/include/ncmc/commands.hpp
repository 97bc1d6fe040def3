#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncmc/calibration.hpp"
#include "ncmc/config.hpp"
#include "ncmc/experiments.hpp"
#include "ncmc/nested_cmc.hpp"
#include "ncmc/oracle.hpp"
#include "ncmc/process_models.hpp"
#include "ncmc/report.hpp"
#include "ncmc/stopping_rules.hpp"
#include "ncmc/tree_model.hpp"

namespace ncmc::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { ok = 0, config_error = 2, runtime_error = 3, check_failed = 4 };

using Json = nlohmann::ordered_json;

/// Everything a command needs besides its config.
struct RunOptions {
    std::string command;
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
    std::filesystem::path out_dir = ".";
    std::filesystem::path config_dir = ".";
    std::ostream* log = &std::cout;
};

struct CommandResult {
    int exit_code = ok;
    std::vector<std::string> outputs; // file names written under out_dir
};

// ---------------------------------------------------------------------------
// CSV columns, shared by the writers and the help text

inline const std::vector<std::string>& pilot_columns() {
    static const std::vector<std::string> c{"v1",        "v2",         "rho1",       "rho2",       "p_differ",
                                            "R_star",    "R_rounded",  "gamma_star", "speed_up",   "gain_lower",
                                            "gain_upper", "degenerate", "v1_exact",  "v2_exact"};
    return c;
}
inline const std::vector<std::string>& estimate_columns() {
    static const std::vector<std::string> c{"R",        "N",          "delta_hat", "stderr",     "v1_hat",
                                            "v2_hat",   "p_differ",   "work_trunk", "work_sub", "work"};
    return c;
}
inline const std::vector<std::string>& table1_columns() {
    static const std::vector<std::string> c{
        "sigma_offset", "sigma_hat", "mean_sigma", "mean_sigma_stderr", "mean_sigma_hat", "mean_sigma_hat_stderr",
        "delta_hat",    "delta_stderr", "p_differ", "rho1", "rho2", "v1", "v2", "R_star", "R", "gamma_star",
        "speed_up",     "N",         "work",       "degenerate"};
    return c;
}
inline const std::vector<std::string>& qcv_columns() {
    static const std::vector<std::string> c{"method", "estimate", "variance", "stderr", "N_B",
                                            "N",      "R",        "work",     "budget_ratio"};
    return c;
}
inline const std::vector<std::string>& qcv_param_columns() {
    static const std::vector<std::string> c{"mu_a", "v_a",  "rho_a", "mu_b",     "mu_b_stderr", "v_b",
                                            "rho_b", "v1",  "v2",    "rho1",     "rho2",        "p_differ",
                                            "R_star", "gamma_star", "measured_gain"};
    return c;
}
inline const std::vector<std::string>& ml_level_columns() {
    static const std::vector<std::string> c{"level",   "training_paths", "lookahead", "rho1",      "rho2",
                                            "v1",      "v2",             "R_star",    "gamma_star", "R",
                                            "N_ml",    "mean_ml",        "var_ml",    "work_ml",   "N_ncmc",
                                            "mean_ncmc", "var_ncmc",     "work_ncmc"};
    return c;
}
inline const std::vector<std::string>& ml_summary_columns() {
    static const std::vector<std::string> c{"method", "estimate", "variance", "stderr", "work", "budget_ratio"};
    return c;
}
inline const std::vector<std::string>& oracle_columns() {
    static const std::vector<std::string> c{"R",        "N",        "delta_hat", "stderr", "delta_exact",
                                            "abs_error", "z",       "v1_exact",  "v2_exact", "pass"};
    return c;
}
inline const std::vector<std::string>& vprofile_columns() {
    static const std::vector<std::string> c{"R", "V", "V_over_V_star"};
    return c;
}

inline std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) out += (k ? "," : "") + v[k];
    return out;
}

/// Column listing per command, for --help.
inline std::string columns_help(const std::string& command) {
    const std::map<std::string, std::vector<std::pair<std::string, const std::vector<std::string>*>>> files{
        {"pilot", {{"pilot.csv", &pilot_columns()}}},
        {"estimate", {{"estimate.csv", &estimate_columns()}}},
        {"table1", {{"table1.csv", &table1_columns()}}},
        {"qcv", {{"qcv.csv", &qcv_columns()}, {"qcv_params.csv", &qcv_param_columns()}}},
        {"multilevel", {{"multilevel.csv", &ml_summary_columns()}, {"multilevel_levels.csv", &ml_level_columns()}}},
        {"oracle-check", {{"oracle_check.csv", &oracle_columns()}}},
        {"vprofile", {{"vprofile.csv", &vprofile_columns()}}},
    };
    std::string out = "CSV output (see docs/format.md):\n";
    for (const auto& [name, cols] : files.at(command)) out += "  " + name + ": " + join(*cols) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Config readers

inline GbmParams read_gbm(const Config& cfg) {
    GbmParams p;
    p.assets = static_cast<int>(cfg.get_uint("model.assets", static_cast<std::uint64_t>(p.assets)));
    p.rate = cfg.get_double("model.rate", p.rate);
    p.dividend = cfg.get_double("model.dividend", p.dividend);
    p.sigma = cfg.get_double("model.sigma", p.sigma);
    p.strike = cfg.get_double("model.strike", p.strike);
    p.spot = cfg.get_double("model.spot", p.spot);
    p.maturity = cfg.get_double("model.maturity", p.maturity);
    p.exercise_dates = static_cast<int>(cfg.get_uint("model.exercise_dates", static_cast<std::uint64_t>(p.exercise_dates)));
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    return p;
}

inline ExercisePolicy read_exercise(const Config& cfg, const std::string& key) {
    const std::string v = cfg.get_string(key, "in_the_money");
    if (v == "in_the_money") return ExercisePolicy::in_the_money;
    if (v == "any_state") return ExercisePolicy::any_state;
    throw ConfigError(key + ": expected in_the_money or any_state, got " + v);
}

inline std::filesystem::path resolve(const RunOptions& opt, const std::string& path) {
    const std::filesystem::path p(path);
    return p.is_absolute() ? p : opt.config_dir / p;
}

using GbmRule = std::shared_ptr<const StoppingRule<PathState>>;
using TreeRule = std::shared_ptr<const StoppingRule<TreeState>>;

/// rules.<name>.kind = tvr | file | fixed
inline GbmRule read_gbm_rule(const Config& cfg, const RunOptions& opt, const std::string& name, const GbmParams& params,
                             std::uint64_t training_seed) {
    const std::string pre = "rules." + name + ".";
    const std::string kind = cfg.get_string(pre + "kind", "tvr");
    if (kind == "fixed") return std::make_shared<FixedMaturityRule<PathState>>(params.last_date());
    std::shared_ptr<const TvRRule> base;
    if (kind == "tvr") {
        GbmParams training = params;
        training.sigma = cfg.get_double(pre + "sigma", params.sigma);
        const std::string basis = cfg.get_string(pre + "basis", "full");
        if (basis != "full" && basis != "constant") throw ConfigError(pre + "basis: expected full or constant");
        const auto paths = cfg.get_uint(pre + "training_paths", 100000);
        const auto seed = cfg.get_uint(pre + "training_seed", training_seed);
        base = std::make_shared<const TvRRule>(
            train_tvr(training, paths, seed, basis == "full" ? BasisKind::full : BasisKind::constant)
                .with_exercise(read_exercise(cfg, pre + "exercise")));
    } else if (kind == "file") {
        const auto path = resolve(opt, cfg.require_string(pre + "file"));
        std::ifstream in(path);
        if (!in) throw ConfigError(pre + "file: cannot open " + path.string());
        TvRRule rule = read_tvr(in);
        if (cfg.has(pre + "exercise")) rule = rule.with_exercise(read_exercise(cfg, pre + "exercise"));
        base = std::make_shared<const TvRRule>(std::move(rule));
    } else {
        throw ConfigError(pre + "kind: expected tvr, file or fixed, got " + kind);
    }
    const double shift = cfg.get_double(pre + "shift", 0.0);
    const auto lookahead = cfg.get_uint(pre + "lookahead", 0);
    if (shift != 0.0 && lookahead != 0) throw ConfigError(pre + "shift and lookahead cannot be combined");
    if (shift < 0.0) throw ConfigError(pre + "shift must be >= 0");
    if (lookahead != 0) {
        if (lookahead % 2 != 0) throw ConfigError(pre + "lookahead must be even");
        return std::make_shared<LookaheadRule>(base, params, static_cast<int>(lookahead),
                                               derive_seed(training_seed, base->meta().training_paths));
    }
    if (shift != 0.0) return std::make_shared<ShiftedRule>(base, shift);
    return base;
}

/// rules.<name>.kind = threshold | nodes | fixed | stop_from
inline TreeRule read_tree_rule(const Config& cfg, const std::string& name, const TreeModel& tree) {
    const std::string pre = "rules." + name + ".";
    const std::string kind = cfg.get_string(pre + "kind", "fixed");
    const int last = tree.last_date();
    if (kind == "fixed") return std::make_shared<FixedMaturityRule<TreeState>>(last);
    if (kind == "threshold")
        return std::make_shared<PayoffThresholdRule<TreeState>>(last, cfg.get_double(pre + "level", 0.0));
    if (kind == "stop_from")
        return std::make_shared<StopFromDateRule<TreeState>>(last, static_cast<int>(cfg.get_uint(pre + "date", 0)));
    if (kind == "nodes") {
        std::set<int> nodes;
        for (const auto& item : cfg.get_list(pre + "nodes")) {
            try {
                nodes.insert(std::stoi(item));
            } catch (const std::exception&) {
                throw ConfigError(pre + "nodes: not an integer: " + item);
            }
        }
        return std::make_shared<NodeSetRule>(last, nodes);
    }
    throw ConfigError(pre + "kind: expected threshold, nodes, fixed or stop_from, got " + kind);
}

inline std::uint64_t training_seed(const Config& cfg) { return cfg.get_uint("seeds.training", 1); }

inline std::uint64_t testing_seed(const Config& cfg, const RunOptions& opt) {
    const auto from_config = cfg.get_uint("seeds.testing", 2);
    return opt.seed ? *opt.seed : from_config;
}

inline bool is_tree(const Config& cfg) {
    const std::string kind = cfg.get_string("model.kind", "gbm");
    if (kind != "gbm" && kind != "tree") throw ConfigError("model.kind: expected gbm or tree, got " + kind);
    return kind == "tree";
}

inline TreeModel read_tree(const Config& cfg, const RunOptions& opt) {
    const auto path = resolve(opt, cfg.require_string("model.tree"));
    try {
        return TreeModel::load(path.string());
    } catch (const std::exception& e) {
        throw ConfigError(std::string("model.tree: ") + e.what());
    }
}

/// Reads `key` as "auto" or a positive integer.
inline std::optional<std::size_t> read_replications(const Config& cfg, const std::string& key) {
    const std::string v = cfg.get_string(key, "auto");
    if (v == "auto") return std::nullopt;
    try {
        std::size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos == v.size() && r >= 1) return static_cast<std::size_t>(r);
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected auto or a positive integer, got " + v);
}

// ---------------------------------------------------------------------------
// Output helpers

inline void write_text(const RunOptions& opt, CommandResult& res, const std::string& name,
                       const std::function<void(std::ostream&)>& body) {
    std::filesystem::create_directories(opt.out_dir);
    std::ofstream out(opt.out_dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (opt.out_dir / name).string());
    body(out);
    res.outputs.push_back(name);
}

inline void write_csv(const RunOptions& opt, CommandResult& res, const std::string& name, const CsvTable& t) {
    write_text(opt, res, name, [&](std::ostream& o) { t.write(o); });
}

inline void write_json(const RunOptions& opt, CommandResult& res, const std::string& name, const Json& j) {
    write_text(opt, res, name, [&](std::ostream& o) { o << j.dump(2) << '\n'; });
}

inline Json header(const Config& cfg, const RunOptions& opt, std::uint64_t seed) {
    Json j;
    j["command"] = opt.command;
    j["version"] = kVersion;
    j["config_digest"] = cfg.digest();
    j["seed"] = seed;
    return j;
}

inline Json work_json(const WorkMeter& w) {
    return Json{{"steps", w.steps}, {"rule_evals", w.rule_evals}, {"units", w.units()}};
}

inline Json estimate_json(const NestedEstimate& e) {
    Json j{{"delta_hat", e.delta_hat}, {"stderr", e.stderr()}, {"N", e.N}, {"R", e.R}, {"p_differ", e.p_differ}};
    j["v1_hat"] = e.v1_hat ? Json(*e.v1_hat) : Json(nullptr);
    j["v2_hat"] = e.v2_hat ? Json(*e.v2_hat) : Json(nullptr);
    j["work_trunk"] = work_json(e.work_trunk);
    j["work_sub"] = work_json(e.work_sub);
    return j;
}

inline Json calib_json(const PilotResult& p, const CalibReport& c) {
    return Json{{"v1", p.v1},           {"v2", p.v2},
                {"rho1", p.rho1},       {"rho2", p.rho2},
                {"p_differ", p.p_differ}, {"degenerate", p.degenerate},
                {"floored", p.needs_floor()}, {"R_star", c.R_star},
                {"R_rounded", c.R_rounded}, {"gamma_star", c.gamma_star},
                {"speed_up", c.speed_up()}, {"gain_lower", c.gain_lower},
                {"gain_upper", c.gain_upper}, {"condition_holds", c.condition_holds}};
}

inline std::string opt_cell(const std::optional<double>& v) { return v ? format_number(*v) : std::string(); }

// ---------------------------------------------------------------------------
// Commands

struct PilotSettings {
    std::size_t paths;
    std::size_t replications;
};

inline PilotSettings read_pilot(const Config& cfg) {
    return {cfg.get_uint("run.pilot_paths", 20000), cfg.get_uint("run.pilot_replications", 20)};
}

template <class Model>
CommandResult pilot_command(const Config& cfg, const RunOptions& opt, const Model& model,
                            const StoppingRule<typename Model::State>& a, const StoppingRule<typename Model::State>& b,
                            std::optional<VarianceComponents> exact) {
    const auto ps = read_pilot(cfg);
    const auto seed = testing_seed(cfg, opt);
    cfg.reject_unknown();
    const PilotResult p = pilot(model, a, b, ps.paths, ps.replications, seed, opt.threads);
    const CalibReport c = calibrate(p);

    auto& log = *opt.log;
    log << "v1          " << format_number(p.v1);
    if (exact) log << "   exact " << format_number(exact->v1);
    log << "\nv2          " << format_number(p.v2);
    if (exact) log << "   exact " << format_number(exact->v2);
    log << "\nrho1        " << format_number(p.rho1) << "\nrho2        " << format_number(p.rho2)
        << "\np_differ    " << format_number(p.p_differ) << "\nR*          " << format_number(c.R_star)
        << "\nR_rounded   " << c.R_rounded << "\ngamma*      " << format_number(c.gamma_star)
        << "\nspeed-up    " << format_number(c.speed_up()) << "\ndegenerate  " << (p.degenerate ? "yes" : "no")
        << "\n";

    CommandResult res;
    CsvTable t(pilot_columns());
    t.row() << p.v1 << p.v2 << p.rho1 << p.rho2 << p.p_differ << c.R_star << c.R_rounded << c.gamma_star
            << c.speed_up() << c.gain_lower << c.gain_upper << p.degenerate
            << opt_cell(exact ? std::optional<double>(exact->v1) : std::nullopt)
            << opt_cell(exact ? std::optional<double>(exact->v2) : std::nullopt);
    write_csv(opt, res, "pilot.csv", t);
    Json j = header(cfg, opt, seed);
    j["pilot_paths"] = ps.paths;
    j["pilot_replications"] = ps.replications;
    j["calibration"] = calib_json(p, c);
    if (exact) j["exact"] = Json{{"v1", exact->v1}, {"v2", exact->v2}};
    j["pilot_estimate"] = estimate_json(p.run);
    write_json(opt, res, "pilot.json", j);
    return res;
}

template <class Model>
CommandResult estimate_command(const Config& cfg, const RunOptions& opt, const Model& model,
                               const StoppingRule<typename Model::State>& a,
                               const StoppingRule<typename Model::State>& b) {
    const auto seed = testing_seed(cfg, opt);
    const auto ps = read_pilot(cfg);
    std::vector<std::optional<std::size_t>> reps;
    for (const auto& item : cfg.get_list("run.R")) {
        Config one;
        one.set("r", item);
        reps.push_back(read_replications(one, "r"));
    }
    if (reps.empty()) reps.push_back(std::nullopt);
    const bool by_budget = cfg.has("run.budget");
    const double budget = cfg.get_double("run.budget", 0.0);
    const auto fixed_n = cfg.get_uint("run.N", 100000);
    if (by_budget && cfg.has("run.N")) throw ConfigError("run.N and run.budget cannot both be set");
    cfg.reject_unknown();

    std::optional<PilotResult> p;
    std::optional<CalibReport> c;
    const bool need_pilot = by_budget || std::any_of(reps.begin(), reps.end(), [](auto& r) { return !r; });
    if (need_pilot) {
        p = pilot(model, a, b, ps.paths, ps.replications, purpose_seed(seed, 1), opt.threads);
        c = calibrate(*p);
    }

    CommandResult res;
    CsvTable t(estimate_columns());
    Json j = header(cfg, opt, seed);
    if (p) j["calibration"] = calib_json(*p, *c);
    Json runs = Json::array();
    for (std::size_t k = 0; k < reps.size(); ++k) {
        const std::size_t R = reps[k] ? *reps[k] : static_cast<std::size_t>(c->R_rounded);
        std::size_t N = fixed_n;
        if (by_budget) {
            const double per = p->rho1 + static_cast<double>(R) * p->rho2;
            N = paths_for_budget(budget, per > 0.0 ? per : 1.0);
        }
        const NestedEstimate e = estimate(model, a, b, N, R, purpose_seed(seed, 2, k), opt.threads);
        *opt.log << "R=" << R << " N=" << N << " delta=" << format_number(e.delta_hat)
                 << " stderr=" << format_number(e.stderr()) << " work=" << format_number(e.work().units()) << "\n";
        t.row() << R << N << e.delta_hat << e.stderr() << opt_cell(e.v1_hat) << opt_cell(e.v2_hat) << e.p_differ
                << e.work_trunk.units() << e.work_sub.units() << e.work().units();
        runs.push_back(estimate_json(e));
    }
    j["runs"] = runs;
    write_csv(opt, res, "estimate.csv", t);
    write_json(opt, res, "estimate.json", j);
    return res;
}

inline SigmaStudyConfig read_sigma_study(const Config& cfg, const RunOptions& opt) {
    SigmaStudyConfig sc;
    sc.params = read_gbm(cfg);
    sc.training_seed = training_seed(cfg);
    sc.testing_seed = testing_seed(cfg, opt);
    sc.training_paths = cfg.get_uint("table1.training_paths", sc.training_paths);
    sc.sigma_offsets = cfg.get_doubles("table1.sigma_offsets", sc.sigma_offsets);
    sc.mean_paths = cfg.get_uint("table1.mean_paths", sc.mean_paths);
    sc.exercise = read_exercise(cfg, "table1.exercise");
    sc.pilot_paths = cfg.get_uint("run.pilot_paths", sc.pilot_paths);
    sc.pilot_replications = cfg.get_uint("run.pilot_replications", sc.pilot_replications);
    sc.budget = cfg.get_double("run.budget", sc.budget);
    sc.replications = read_replications(cfg, "run.R");
    sc.threads = opt.threads;
    cfg.reject_unknown();
    return sc;
}

inline CommandResult table1_command(const Config& cfg, const RunOptions& opt) {
    const SigmaStudyConfig sc = read_sigma_study(cfg, opt);
    const auto rows = param_uncertainty_study(sc);
    CommandResult res;
    CsvTable t(table1_columns());
    Json j = header(cfg, opt, sc.testing_seed);
    Json jr = Json::array();
    for (const auto& r : rows) {
        t.row() << r.offset << r.sigma_hat << r.mean_sigma << r.mean_sigma_stderr << r.mean_sigma_hat
                << r.mean_sigma_hat_stderr << r.delta_hat << r.delta_stderr << r.p_differ << r.rho1 << r.rho2 << r.v1
                << r.v2 << r.R_star << r.R << r.gamma_star << r.speed_up << r.N << r.work << r.degenerate;
        jr.push_back(Json{{"sigma_offset", r.offset}, {"delta_hat", r.delta_hat}, {"delta_stderr", r.delta_stderr},
                          {"speed_up", r.speed_up}, {"R_star", r.R_star}, {"N", r.N}, {"R", r.R}, {"work", r.work}});
        *opt.log << "sigma_hat-sigma=" << format_number(r.offset) << " delta=" << format_number(r.delta_hat)
                 << " (" << format_number(r.delta_stderr) << ") P(differ)=" << format_number(r.p_differ)
                 << " R*=" << format_number(r.R_star) << " speed-up=" << format_number(r.speed_up) << "\n";
    }
    j["rows"] = jr;
    write_csv(opt, res, "table1.csv", t);
    write_json(opt, res, "table1.json", j);
    return res;
}

inline RuleSpec read_rule_spec(const Config& cfg, const std::string& pre, RuleSpec fallback) {
    fallback.training_paths = cfg.get_uint(pre + "training_paths", fallback.training_paths);
    fallback.lookahead = static_cast<int>(cfg.get_uint(pre + "lookahead", static_cast<std::uint64_t>(fallback.lookahead)));
    fallback.exercise = read_exercise(cfg, pre + "exercise");
    if (fallback.lookahead % 2 != 0) throw ConfigError(pre + "lookahead must be even");
    return fallback;
}

inline constexpr double kBudgetTolerance = 0.05;

inline QcvConfig read_qcv(const Config& cfg, const RunOptions& opt) {
    QcvConfig qc;
    qc.params = read_gbm(cfg);
    qc.training_seed = training_seed(cfg);
    qc.testing_seed = testing_seed(cfg, opt);
    qc.rule_a = read_rule_spec(cfg, "rules.a.", qc.rule_a);
    qc.rule_b = read_rule_spec(cfg, "rules.b.", qc.rule_b);
    qc.pilot_paths = cfg.get_uint("run.pilot_paths", qc.pilot_paths);
    qc.pilot_replications = cfg.get_uint("run.pilot_replications", qc.pilot_replications);
    qc.mean_paths_b = cfg.get_uint("qcv.mean_paths_b", qc.mean_paths_b);
    qc.budget = cfg.get_double("run.budget", qc.budget);
    qc.replications = read_replications(cfg, "run.R");
    qc.threads = opt.threads;
    cfg.reject_unknown();
    return qc;
}

inline CommandResult qcv_command(const Config& cfg, const RunOptions& opt) {
    const QcvConfig qc = read_qcv(cfg, opt);
    const QcvReport r = qcv_estimate(qc);
    CommandResult res;
    CsvTable t(qcv_columns());
    bool within_budget = true;
    for (const auto& row : r.rows) {
        t.row() << row.method << row.estimate << row.variance << row.stderr << row.N_B << row.N << row.R << row.work
                << row.budget_ratio;
        within_budget = within_budget && std::abs(row.budget_ratio - 1.0) <= kBudgetTolerance;
        *opt.log << row.method << ": " << format_number(row.estimate) << " variance " << format_number(row.variance)
                 << " work/budget " << format_number(row.budget_ratio) << "\n";
    }
    CsvTable params(qcv_param_columns());
    params.row() << r.mu_a << r.v_a << r.rho_a << r.mu_b << r.mu_b_stderr << r.v_b << r.rho_b << r.pilot.v1
                 << r.pilot.v2 << r.pilot.rho1 << r.pilot.rho2 << r.pilot.p_differ << r.calib.R_star
                 << r.calib.gamma_star << r.measured_gain;
    write_csv(opt, res, "qcv.csv", t);
    write_csv(opt, res, "qcv_params.csv", params);
    Json j = header(cfg, opt, qc.testing_seed);
    j["budget"] = qc.budget;
    j["calibration"] = calib_json(r.pilot, r.calib);
    j["measured_gain"] = r.measured_gain;
    j["within_budget"] = within_budget;
    write_json(opt, res, "qcv.json", j);
    if (!within_budget) {
        *opt.log << "check failed: realized work outside 5% of the budget\n";
        res.exit_code = check_failed;
    }
    return res;
}

inline std::vector<RuleSpec> read_ladder(const Config& cfg) {
    std::vector<RuleSpec> out;
    const auto exercise = read_exercise(cfg, "multilevel.exercise");
    for (const auto& item : cfg.get_list("multilevel.levels")) {
        const auto colon = item.find(':');
        RuleSpec s;
        s.exercise = exercise;
        try {
            s.training_paths = std::stoull(item.substr(0, colon));
            s.lookahead = colon == std::string::npos ? 0 : std::stoi(item.substr(colon + 1));
        } catch (const std::exception&) {
            throw ConfigError("multilevel.levels: expected training_paths[:lookahead], got " + item);
        }
        if (s.lookahead < 0 || s.lookahead % 2 != 0)
            throw ConfigError("multilevel.levels: lookahead must be even and >= 0 in " + item);
        out.push_back(s);
    }
    return out;
}

inline MultilevelConfig read_multilevel(const Config& cfg, const RunOptions& opt) {
    MultilevelConfig mc;
    mc.params = read_gbm(cfg);
    mc.training_seed = training_seed(cfg);
    mc.testing_seed = testing_seed(cfg, opt);
    if (cfg.has("multilevel.levels")) {
        mc.levels = read_ladder(cfg);
    } else {
        const auto exercise = read_exercise(cfg, "multilevel.exercise");
        for (auto& l : mc.levels) l.exercise = exercise;
    }
    mc.pilot_paths = cfg.get_uint("run.pilot_paths", mc.pilot_paths);
    mc.pilot_replications = cfg.get_uint("run.pilot_replications", mc.pilot_replications);
    mc.budget = cfg.get_double("run.budget", mc.budget);
    mc.direct_paths = cfg.get_uint("multilevel.direct_paths", mc.direct_paths);
    mc.threads = opt.threads;
    cfg.reject_unknown();
    return mc;
}

/// Combined estimate within three combined standard errors of the direct one.
inline bool telescopes(const MultilevelReport& r, double estimate, double variance) {
    return std::abs(estimate - r.direct) < 3.0 * std::sqrt(variance + r.direct_stderr * r.direct_stderr);
}

inline CommandResult multilevel_command(const Config& cfg, const RunOptions& opt) {
    const MultilevelConfig mc = read_multilevel(cfg, opt);
    const MultilevelReport r = multilevel_estimate(mc);
    CommandResult res;
    CsvTable levels(ml_level_columns());
    for (const auto& l : r.levels)
        levels.row() << l.level << l.spec.training_paths << l.spec.lookahead << l.rho1 << l.rho2 << l.v1 << l.v2
                     << l.R_star << l.gamma_star << l.R << l.N_ml << l.mean_ml << l.var_ml << l.work_ml << l.N_ncmc
                     << l.mean_ncmc << l.var_ncmc << l.work_ncmc;
    CsvTable summary(ml_summary_columns());
    const auto add = [&](const char* name, double est, double var, double work) {
        summary.row() << name << est << var << std::sqrt(var) << work << work / mc.budget;
        *opt.log << name << ": " << format_number(est) << " variance " << format_number(var) << "\n";
    };
    add("ml", r.ml, r.ml_var, r.ml_work);
    add("ml_ncmc", r.ml_ncmc, r.ml_ncmc_var, r.ml_ncmc_work);
    add("simple", r.simple, r.simple_var, r.simple_work);
    const double direct_var = r.direct_stderr * r.direct_stderr;
    summary.row() << "direct" << r.direct << direct_var << r.direct_stderr << 0.0 << 0.0;

    const bool consistent = telescopes(r, r.ml, r.ml_var) && telescopes(r, r.ml_ncmc, r.ml_ncmc_var);
    bool within_budget = true;
    for (double w : {r.ml_work, r.ml_ncmc_work, r.simple_work})
        within_budget = within_budget && std::abs(w / mc.budget - 1.0) <= kBudgetTolerance;

    write_csv(opt, res, "multilevel.csv", summary);
    write_csv(opt, res, "multilevel_levels.csv", levels);
    Json j = header(cfg, opt, mc.testing_seed);
    j["budget"] = mc.budget;
    j["telescoping_consistent"] = consistent;
    j["within_budget"] = within_budget;
    write_json(opt, res, "multilevel.json", j);
    if (!consistent || !within_budget) {
        *opt.log << "check failed:" << (consistent ? "" : " telescoping") << (within_budget ? "" : " budget") << "\n";
        res.exit_code = check_failed;
    }
    return res;
}

inline CommandResult oracle_check_command(const Config& cfg, const RunOptions& opt) {
    if (!is_tree(cfg)) throw ConfigError("oracle-check needs model.kind=tree");
    const TreeModel tree = read_tree(cfg, opt);
    const TreeRule a = read_tree_rule(cfg, "a", tree);
    const TreeRule b = read_tree_rule(cfg, "b", tree);
    const auto seed = testing_seed(cfg, opt);
    const auto N = cfg.get_uint("run.N", 100000);
    std::vector<std::size_t> reps;
    for (const auto& item : cfg.get_list("run.R")) {
        Config one;
        one.set("r", item);
        const auto r = read_replications(one, "r");
        if (!r) throw ConfigError("run.R: oracle-check needs explicit replication counts");
        reps.push_back(*r);
    }
    if (reps.empty()) reps = {1, 5, 20};
    cfg.reject_unknown();

    const OracleResult exact = enumerate_atoms(tree, *a, *b);
    CommandResult res;
    CsvTable t(oracle_columns());
    bool all_pass = true;
    for (std::size_t k = 0; k < reps.size(); ++k) {
        const NestedEstimate e = estimate(tree, *a, *b, N, reps[k], purpose_seed(seed, 1, k), opt.threads);
        const double err = std::abs(e.delta_hat - exact.delta);
        const double se = e.stderr();
        const bool pass = se > 0.0 ? err < 4.0 * se : err == 0.0;
        all_pass = all_pass && pass;
        t.row() << reps[k] << N << e.delta_hat << se << exact.delta << err << (se > 0.0 ? err / se : 0.0) << exact.v1
                << exact.v2 << pass;
        *opt.log << "R=" << reps[k] << " delta_hat=" << format_number(e.delta_hat) << " exact="
                 << format_number(exact.delta) << " |error|/stderr=" << format_number(se > 0.0 ? err / se : 0.0)
                 << (pass ? " ok" : " FAIL") << "\n";
    }
    write_csv(opt, res, "oracle_check.csv", t);
    Json j = header(cfg, opt, seed);
    j["exact"] = Json{{"delta", exact.delta}, {"v1", exact.v1}, {"v2", exact.v2}};
    j["pass"] = all_pass;
    write_json(opt, res, "oracle_check.json", j);
    if (!all_pass) res.exit_code = check_failed;
    return res;
}

template <class Model>
std::optional<CalibParams> pilot_calib(const Config& cfg, const RunOptions& opt, const Model& model,
                                       const StoppingRule<typename Model::State>& a,
                                       const StoppingRule<typename Model::State>& b) {
    const auto ps = read_pilot(cfg);
    const auto seed = testing_seed(cfg, opt);
    cfg.reject_unknown();
    const PilotResult p = pilot(model, a, b, ps.paths, ps.replications, seed, opt.threads);
    if (p.degenerate) return std::nullopt;
    return p.calib_params();
}

inline CommandResult vprofile_from(const Config& cfg, const RunOptions& opt, const std::optional<CalibParams>& cp,
                                   std::size_t points, double r_max) {
    CommandResult res;
    CsvTable t(vprofile_columns());
    Json j = header(cfg, opt, testing_seed(cfg, opt));
    if (!cp) {
        *opt.log << "degenerate: the rules never differ, V(R) is identically zero\n";
        j["degenerate"] = true;
    } else {
        const CalibReport rep = optimal_R(*cp);
        const double v_star = v_profile(*cp, rep.R_star);
        const double top = r_max > 0.0 ? r_max : std::max(10.0, 10.0 * rep.R_star);
        for (std::size_t k = 0; k < points; ++k) {
            const double R = points == 1 ? 1.0 : std::pow(top, static_cast<double>(k) / static_cast<double>(points - 1));
            const double v = v_profile(*cp, R);
            t.row() << R << v << v / v_star;
        }
        j["degenerate"] = false;
        j["R_star"] = rep.R_star;
        j["gamma_star"] = rep.gamma_star;
        *opt.log << "R*=" << format_number(rep.R_star) << " gamma*=" << format_number(rep.gamma_star) << "\n";
    }
    write_csv(opt, res, "vprofile.csv", t);
    write_json(opt, res, "vprofile.json", j);
    return res;
}

/// Dispatch for commands that take a model and a rule pair.
template <class Fn>
CommandResult with_model(const Config& cfg, const RunOptions& opt, Fn&& fn) {
    if (is_tree(cfg)) {
        const TreeModel tree = read_tree(cfg, opt);
        const TreeRule a = read_tree_rule(cfg, "a", tree);
        const TreeRule b = read_tree_rule(cfg, "b", tree);
        std::optional<VarianceComponents> exact;
        try {
            exact = exact_components(tree, *a, *b);
        } catch (const OracleSizeError&) {
        }
        return fn(tree, *a, *b, exact);
    }
    const GbmParams params = read_gbm(cfg);
    const auto seed = training_seed(cfg);
    const GbmRule a = read_gbm_rule(cfg, opt, "a", params, seed);
    const GbmRule b = read_gbm_rule(cfg, opt, "b", params, seed);
    return fn(GbmModel(params), *a, *b, std::optional<VarianceComponents>{});
}

inline CommandResult run_command(const Config& cfg, const RunOptions& opt) {
    const std::string& c = opt.command;
    if (c == "pilot")
        return with_model(cfg, opt, [&](const auto& m, const auto& a, const auto& b, auto exact) {
            return pilot_command(cfg, opt, m, a, b, exact);
        });
    if (c == "estimate")
        return with_model(cfg, opt, [&](const auto& m, const auto& a, const auto& b, auto) {
            return estimate_command(cfg, opt, m, a, b);
        });
    if (c == "table1") return table1_command(cfg, opt);
    if (c == "qcv") return qcv_command(cfg, opt);
    if (c == "multilevel") return multilevel_command(cfg, opt);
    if (c == "oracle-check") return oracle_check_command(cfg, opt);
    if (c == "vprofile") {
        const auto points = static_cast<std::size_t>(cfg.get_uint("vprofile.points", 200));
        const double r_max = cfg.get_double("vprofile.R_max", 0.0);
        if (points < 1) throw ConfigError("vprofile.points must be >= 1");
        if (cfg.has("calib.v1") || cfg.has("calib.v2") || cfg.has("calib.rho1") || cfg.has("calib.rho2")) {
            std::optional<CalibParams> cp;
            try {
                cp = CalibParams(cfg.get_double("calib.v1", 0.0), cfg.get_double("calib.v2", 0.0),
                                 cfg.get_double("calib.rho1", 0.0), cfg.get_double("calib.rho2", 0.0));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("calib: ") + e.what());
            }
            cfg.reject_unknown();
            return vprofile_from(cfg, opt, cp, points, r_max);
        }
        return with_model(cfg, opt, [&](const auto& m, const auto& a, const auto& b, auto) {
            return vprofile_from(cfg, opt, pilot_calib(cfg, opt, m, a, b), points, r_max);
        });
    }
    throw ConfigError("unknown command " + c);
}

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Runs a command, writes manifest.json and maps errors to exit codes.
inline int run_and_report(const std::optional<std::string>& config_path, RunOptions opt, std::ostream& err) {
    const std::string started = utc_now();
    Config cfg;
    CommandResult res;
    try {
        if (config_path) {
            cfg = Config::load(*config_path);
            opt.config_dir = std::filesystem::path(*config_path).parent_path();
            if (opt.config_dir.empty()) opt.config_dir = ".";
        }
        res = run_command(cfg, opt);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return config_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return runtime_error;
    }
    try {
        Json m;
        m["command"] = opt.command;
        m["config_digest"] = cfg.digest();
        m["seed"] = testing_seed(cfg, opt);
        m["version"] = kVersion;
        m["started"] = started;
        m["finished"] = utc_now();
        m["outputs"] = res.outputs;
        m["exit_code"] = res.exit_code;
        std::ofstream(opt.out_dir / "manifest.json", std::ios::binary) << m.dump(2) << '\n';
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return runtime_error;
    }
    return res.exit_code;
}

} // namespace ncmc::cli
