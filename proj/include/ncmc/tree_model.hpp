#pragma once

// Finite probability trees with payoffs attached to nodes. Used as exact
// ground truth for the nested estimator.
//
// Text format: a node is `( payoff branch* )`, a branch is
// `probability node`. `#` starts a comment that runs to end of line.
//
//     # X_0 = 1, X_1 in {3, 0} with equal probability
//     (1  0.5 (3)  0.5 (0))
//
// All leaves must sit at the same depth, which becomes the last date J.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncmc/rng.hpp"

namespace ncmc {

struct TreeNode {
    double payoff = 0.0;
    int depth = 0;
    int parent = -1;
    std::vector<int> children;
    std::vector<double> probabilities;
};

struct TreeState {
    int j = 0;
    int node = 0;
    double payoff = 0.0;

    friend bool operator==(const TreeState&, const TreeState&) = default;
};

class TreeParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Nodes are stored in preorder; node 0 is the root.
class TreeModel {
public:
    using State = TreeState;

    TreeModel() = default;

    /// Builds from preorder nodes. Validates probabilities and uniform depth.
    explicit TreeModel(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) { validate(); }

    const std::vector<TreeNode>& nodes() const { return nodes_; }
    const TreeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    int last_date() const { return depth_; }
    std::uint64_t step_work() const { return 1; }

    std::size_t leaf_count() const {
        std::size_t n = 0;
        for (const auto& nd : nodes_)
            if (nd.children.empty()) ++n;
        return n;
    }

    State start(const StreamKey&) const { return {0, 0, nodes_.front().payoff}; }

    void advance(State& s, const StreamKey& key) const {
        const TreeNode& nd = nodes_[static_cast<std::size_t>(s.node)];
        if (nd.children.empty()) throw std::logic_error("cannot advance past a leaf");
        const double u = uniform(key, static_cast<std::uint32_t>(s.j + 1));
        double cumulative = 0.0;
        std::size_t pick = nd.children.size() - 1;
        for (std::size_t c = 0; c < nd.children.size(); ++c) {
            cumulative += nd.probabilities[c];
            if (u <= cumulative) {
                pick = c;
                break;
            }
        }
        s.node = nd.children[pick];
        s.j += 1;
        s.payoff = nodes_[static_cast<std::size_t>(s.node)].payoff;
    }

    /// Node ids from the root down to `id`.
    std::vector<int> prefix_of(int id) const {
        std::vector<int> path;
        for (int cur = id; cur >= 0; cur = node(cur).parent) path.push_back(cur);
        return {path.rbegin(), path.rend()};
    }

    static TreeModel parse(const std::string& text);
    static TreeModel load(const std::string& path);

private:
    void validate() {
        if (nodes_.empty()) throw std::invalid_argument("tree has no nodes");
        depth_ = -1;
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            const auto& nd = nodes_[id];
            if (!std::isfinite(nd.payoff)) throw std::invalid_argument("tree node payoff must be finite");
            if (nd.children.size() != nd.probabilities.size())
                throw std::invalid_argument("tree node has mismatched children/probabilities");
            if (nd.children.empty()) {
                if (depth_ < 0) depth_ = nd.depth;
                else if (depth_ != nd.depth) throw std::invalid_argument("all tree leaves must have the same depth");
                continue;
            }
            double total = 0.0;
            for (double p : nd.probabilities) {
                if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument("branch probability must be in [0,1]");
                total += p;
            }
            if (std::abs(total - 1.0) > 1e-12)
                throw std::invalid_argument("branch probabilities at node " + std::to_string(id) + " sum to " +
                                            std::to_string(total));
        }
        if (depth_ < 1) throw std::invalid_argument("tree must have depth >= 1");
    }

    std::vector<TreeNode> nodes_;
    int depth_ = 0;
};

namespace detail {

class TreeParser {
public:
    explicit TreeParser(const std::string& text) : text_(text) {}

    std::vector<TreeNode> run() {
        parse_node(-1, 0);
        skip();
        if (pos_ != text_.size()) fail("trailing characters after root node");
        return std::move(nodes_);
    }

private:
    int parse_node(int parent, int depth) {
        skip();
        expect('(');
        const int id = static_cast<int>(nodes_.size());
        nodes_.emplace_back();
        nodes_.back().parent = parent;
        nodes_.back().depth = depth;
        nodes_.back().payoff = number();
        for (;;) {
            skip();
            if (peek() == ')') {
                ++pos_;
                return id;
            }
            const double p = number();
            const int child = parse_node(id, depth + 1);
            nodes_[static_cast<std::size_t>(id)].probabilities.push_back(p);
            nodes_[static_cast<std::size_t>(id)].children.push_back(child);
        }
    }

    double number() {
        skip();
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(text_.substr(pos_, 64), &used);
        } catch (const std::exception&) {
            fail("expected a number");
        }
        pos_ += used;
        return v;
    }

    void skip() {
        while (pos_ < text_.size()) {
            if (text_[pos_] == '#') {
                while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(text_[pos_]))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

    void expect(char c) {
        if (peek() != c) fail(std::string("expected '") + c + "'");
        ++pos_;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw TreeParseError("tree parse error at offset " + std::to_string(pos_) + ": " + what);
    }

    const std::string& text_;
    std::size_t pos_ = 0;
    std::vector<TreeNode> nodes_;
};

} // namespace detail

inline TreeModel TreeModel::parse(const std::string& text) {
    return TreeModel(detail::TreeParser(text).run());
}

inline TreeModel TreeModel::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open tree file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

} // namespace ncmc
