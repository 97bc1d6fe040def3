#pragma once

// Exact Delta, v1 and v2 on finite trees by enumerating every root-to-leaf
// path. The information available at tau_wedge is the node reached there,
// so atoms of that sigma-field are nodes.

#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <vector>

#include "ncmc/stopping_rules.hpp"
#include "ncmc/tree_model.hpp"

namespace ncmc {

inline constexpr std::size_t kOracleMaxPaths = 1'000'000;

class OracleSizeError : public std::length_error {
public:
    using std::length_error::length_error;
};

struct EnumeratedAtom {
    std::vector<int> prefix; // node ids from the root to the node at tau_wedge
    double probability = 0.0;
    int sign = 0;
    double x_wedge = 0.0;
    double conditional_mean = 0.0; // D = E[S (X_vee - X_wedge) | prefix]
    double conditional_var = 0.0;
};

struct OracleResult {
    double delta = 0.0;
    double v1 = 0.0;
    double v2 = 0.0;
    double total_variance = 0.0; // Var(X_{tau_A} - X_{tau_B}) computed directly
    std::vector<EnumeratedAtom> atoms;
};

namespace detail {

struct PathOutcome {
    double probability;
    double difference; // X_{tau_A} - X_{tau_B}
    int wedge_node;
    int sign;
};

inline int first_stop(const StoppingRule<TreeState>& rule, const TreeModel& tree, const std::vector<int>& path) {
    for (std::size_t j = 0; j < path.size(); ++j) {
        const TreeState s{static_cast<int>(j), path[j], tree.node(path[j]).payoff};
        if (rule.decide(s)) return static_cast<int>(j);
    }
    throw std::logic_error("stopping rule never stopped along a tree path");
}

inline void enumerate(const TreeModel& tree, const StoppingRule<TreeState>& rule_a,
                      const StoppingRule<TreeState>& rule_b, std::vector<int>& path, double prob,
                      std::vector<PathOutcome>& out) {
    const TreeNode& nd = tree.node(path.back());
    if (nd.children.empty()) {
        const int ta = first_stop(rule_a, tree, path);
        const int tb = first_stop(rule_b, tree, path);
        const int wedge = std::min(ta, tb);
        const double xa = tree.node(path[static_cast<std::size_t>(ta)]).payoff;
        const double xb = tree.node(path[static_cast<std::size_t>(tb)]).payoff;
        out.push_back({prob, xa - xb, path[static_cast<std::size_t>(wedge)], (ta > tb) - (ta < tb)});
        return;
    }
    for (std::size_t c = 0; c < nd.children.size(); ++c) {
        if (nd.probabilities[c] == 0.0) continue;
        path.push_back(nd.children[c]);
        enumerate(tree, rule_a, rule_b, path, prob * nd.probabilities[c], out);
        path.pop_back();
    }
}

} // namespace detail

inline OracleResult enumerate_atoms(const TreeModel& tree, const StoppingRule<TreeState>& rule_a,
                                    const StoppingRule<TreeState>& rule_b) {
    if (tree.leaf_count() > kOracleMaxPaths)
        throw OracleSizeError("tree has more than 1e6 paths; exact enumeration refused");
    if (rule_a.last_date() != tree.last_date() || rule_b.last_date() != tree.last_date())
        throw std::invalid_argument("rules and tree disagree on the last date");

    std::vector<detail::PathOutcome> outcomes;
    std::vector<int> path{0};
    detail::enumerate(tree, rule_a, rule_b, path, 1.0, outcomes);

    OracleResult res;
    for (const auto& o : outcomes) res.delta += o.probability * o.difference;
    for (const auto& o : outcomes) res.total_variance += o.probability * (o.difference - res.delta) * (o.difference - res.delta);

    std::map<int, EnumeratedAtom> atoms;
    for (const auto& o : outcomes) {
        auto& a = atoms[o.wedge_node];
        a.probability += o.probability;
        a.conditional_mean += o.probability * o.difference;
        a.sign = o.sign;
    }
    for (auto& [node, a] : atoms) {
        a.conditional_mean /= a.probability;
        a.prefix = tree.prefix_of(node);
        a.x_wedge = tree.node(node).payoff;
    }
    for (const auto& o : outcomes) {
        auto& a = atoms[o.wedge_node];
        const double dev = o.difference - a.conditional_mean;
        a.conditional_var += o.probability * dev * dev;
    }
    for (auto& [node, a] : atoms) {
        a.conditional_var /= a.probability;
        res.v1 += a.probability * (a.conditional_mean - res.delta) * (a.conditional_mean - res.delta);
        res.v2 += a.probability * a.conditional_var;
        res.atoms.push_back(a);
    }
    return res;
}

inline double exact_delta(const TreeModel& tree, const StoppingRule<TreeState>& rule_a,
                          const StoppingRule<TreeState>& rule_b) {
    return enumerate_atoms(tree, rule_a, rule_b).delta;
}

struct VarianceComponents {
    double v1 = 0.0;
    double v2 = 0.0;
};

inline VarianceComponents exact_components(const TreeModel& tree, const StoppingRule<TreeState>& rule_a,
                                           const StoppingRule<TreeState>& rule_b) {
    const auto res = enumerate_atoms(tree, rule_a, rule_b);
    return {res.v1, res.v2};
}

} // namespace ncmc
