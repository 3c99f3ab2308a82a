#pragma once

// Discrete Brownian filtration on a binary tree.
//
// In path-tree mode every node is an atom of F_{t_i}: node j has up child
// 2j+1 (increment +sqrt(dt)) and down child 2j+2 (increment -sqrt(dt)), so
// nodes are numbered in level order with the up child first. Recombining
// mode keeps one node per (level, number of down moves); it carries Markov
// functionals of W only and is rejected wherever the full filtration is needed.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gstop/error.hpp"
#include "gstop/expr.hpp"

namespace gstop {

enum class TreeMode { path_tree, recombining };

inline const char* to_string(TreeMode m) { return m == TreeMode::path_tree ? "path-tree" : "recombining"; }

struct TreeConfig {
    int steps = 1;
    double horizon = 1.0;
    TreeMode mode = TreeMode::path_tree;

    static constexpr int max_path_tree_steps = 24;
    static constexpr int max_recombining_steps = 4096;
};

class PathTree {
public:
    explicit PathTree(TreeConfig config) : config_(config)
    {
        if (config.steps < 1) throw Error(ErrorKind::configuration, "tree.steps must be >= 1");
        if (!(config.horizon > 0.0) || !std::isfinite(config.horizon)) {
            throw Error(ErrorKind::configuration, "tree.horizon must be positive and finite");
        }
        if (config.mode == TreeMode::path_tree && config.steps > TreeConfig::max_path_tree_steps) {
            throw Error(ErrorKind::configuration, "tree.steps must be <= 24 in path-tree mode");
        }
        if (config.mode == TreeMode::recombining && config.steps > TreeConfig::max_recombining_steps) {
            throw Error(ErrorKind::configuration, "tree.steps must be <= 4096 in recombining mode");
        }
        dt_ = config.horizon / config.steps;
        sqrt_dt_ = std::sqrt(dt_);
        level_begin_.resize(static_cast<std::size_t>(config.steps) + 2);
        std::size_t acc = 0;
        for (int i = 0; i <= config.steps + 1; ++i) {
            level_begin_[static_cast<std::size_t>(i)] = acc;
            if (i <= config.steps) acc += level_size(i);
        }
    }

    const TreeConfig& config() const noexcept { return config_; }
    int steps() const noexcept { return config_.steps; }
    double horizon() const noexcept { return config_.horizon; }
    double dt() const noexcept { return dt_; }
    double sqrt_dt() const noexcept { return sqrt_dt_; }
    bool is_path_tree() const noexcept { return config_.mode == TreeMode::path_tree; }

    /// Both one-step transitions carry probability 1/2.
    static constexpr double transition_probability() noexcept { return 0.5; }

    std::size_t size() const noexcept { return level_begin_.back(); }

    std::size_t level_size(int level) const noexcept
    {
        return is_path_tree() ? (std::size_t{1} << level) : static_cast<std::size_t>(level) + 1;
    }

    NodeId level_begin(int level) const noexcept
    {
        return static_cast<NodeId>(level_begin_[static_cast<std::size_t>(level)]);
    }

    NodeId level_end(int level) const noexcept
    {
        return static_cast<NodeId>(level_begin_[static_cast<std::size_t>(level) + 1]);
    }

    NodeId root() const noexcept { return 0; }

    int level(NodeId node) const noexcept
    {
        if (is_path_tree()) return static_cast<int>(std::bit_width(static_cast<std::uint64_t>(node) + 1)) - 1;
        int lo = 0;
        int hi = config_.steps;
        while (lo < hi) {
            const int mid = (lo + hi + 1) / 2;
            if (level_begin(mid) <= node) lo = mid;
            else hi = mid - 1;
        }
        return lo;
    }

    double time(NodeId node) const noexcept { return level(node) * dt_; }
    double time_at_level(int level) const noexcept { return level * dt_; }

    /// Number of down moves on the path from the root.
    int down_moves(NodeId node) const noexcept
    {
        const int lvl = level(node);
        if (is_path_tree()) {
            const auto m = static_cast<std::uint64_t>(node) + 1 - (std::uint64_t{1} << lvl);
            return std::popcount(m);
        }
        return static_cast<int>(node - level_begin(lvl));
    }

    /// Brownian value: sum of the +-sqrt(dt) increments along the path.
    double w(NodeId node) const noexcept
    {
        return (level(node) - 2 * down_moves(node)) * sqrt_dt_;
    }

    bool is_leaf(NodeId node) const noexcept { return level(node) == config_.steps; }

    NodeId up(NodeId node) const noexcept
    {
        if (is_path_tree()) return 2 * node + 1;
        const int lvl = level(node);
        return level_begin(lvl + 1) + (node - level_begin(lvl));
    }

    NodeId down(NodeId node) const noexcept { return up(node) + 1; }

    /// Parent in path-tree mode; recombining nodes have no unique parent.
    std::optional<NodeId> parent(NodeId node) const noexcept
    {
        if (!is_path_tree() || node == 0) return std::nullopt;
        return (node - 1) / 2;
    }

    /// Brownian increment on the edge entering `node` (+sqrt(dt) for an up child).
    double increment_into(NodeId node) const noexcept
    {
        if (is_path_tree()) return (node % 2 == 1) ? sqrt_dt_ : -sqrt_dt_;
        // unused for recombining trees: edges are not unique there
        return std::numeric_limits<double>::quiet_NaN();
    }

    /// True when `ancestor` lies on the root path of `node` (or equals it). Path tree only.
    bool is_ancestor_or_self(NodeId ancestor, NodeId node) const noexcept
    {
        const int la = level(ancestor);
        const int ln = level(node);
        if (la > ln) return false;
        auto m = static_cast<std::uint64_t>(node) + 1;
        m >>= (ln - la);
        return m == static_cast<std::uint64_t>(ancestor) + 1;
    }

    /// Ancestor of a path-tree node at the given (shallower) level.
    NodeId ancestor_at(NodeId node, int lvl) const noexcept
    {
        auto m = static_cast<std::uint64_t>(node) + 1;
        m >>= (level(node) - lvl);
        return static_cast<NodeId>(m - 1);
    }

    void require_path_tree(const char* what) const
    {
        if (!is_path_tree()) {
            throw Error(ErrorKind::configuration, std::string(what) + " requires a path-tree (exact filtration)");
        }
    }

private:
    TreeConfig config_;
    double dt_ = 1.0;
    double sqrt_dt_ = 1.0;
    std::vector<std::size_t> level_begin_;
};

inline PathTree build_tree(const TreeConfig& config) { return PathTree(config); }

/// One real value per tree node: adaptedness is structural.
class AdaptedProcess {
public:
    AdaptedProcess() = default;
    explicit AdaptedProcess(const PathTree& tree, double fill = 0.0) : values_(tree.size(), fill) {}
    explicit AdaptedProcess(std::vector<double> values) : values_(std::move(values)) {}

    double operator[](NodeId node) const { return values_[node]; }
    double& operator[](NodeId node) { return values_[node]; }

    std::size_t size() const noexcept { return values_.size(); }
    std::span<const double> values() const noexcept { return values_; }
    std::span<double> values() noexcept { return values_; }

    bool matches(const PathTree& tree) const noexcept { return values_.size() == tree.size(); }

    void require_matches(const PathTree& tree, const char* what) const
    {
        if (!matches(tree)) {
            throw Error(ErrorKind::configuration, std::string(what) + " has " + std::to_string(values_.size()) +
                                                      " values but the tree has " + std::to_string(tree.size()) +
                                                      " nodes");
        }
    }

    friend bool operator==(const AdaptedProcess&, const AdaptedProcess&) = default;

private:
    std::vector<double> values_;
};

/// E[p | F_t] at a non-leaf node: the equal-weight average of the two children.
inline double conditional_expectation(const AdaptedProcess& p, const PathTree& tree, NodeId node)
{
    if (node >= tree.size()) throw Error(ErrorKind::domain, "node out of range");
    if (tree.is_leaf(node)) throw NodeError(ErrorKind::domain, node, "conditional expectation at a leaf");
    return PathTree::transition_probability() * p[tree.up(node)] +
           PathTree::transition_probability() * p[tree.down(node)];
}

/// Leaf values of an adapted process, in level order.
inline std::vector<double> leaf_values(const AdaptedProcess& p, const PathTree& tree)
{
    const auto b = tree.level_begin(tree.steps());
    const auto e = tree.level_end(tree.steps());
    return {p.values().begin() + b, p.values().begin() + e};
}

struct RewardRealization {
    AdaptedProcess values;
    bool negative = false;       ///< some node value < 0 (rewards are assumed nonnegative)
    bool exceeds_bound = false;  ///< some |value| > bound (rewards are assumed bounded)
    double min = 0.0;
    double max = 0.0;
};

/// Evaluates a reward f(t, w) at every node.
inline RewardRealization realize_reward(const FunctionSpec& f, const PathTree& tree, double bound = 1e6)
{
    if (f.signature() != Signature::reward) {
        throw Error(ErrorKind::signature_mismatch, "reward '" + f.source() + "' must be an expression over (t, w)");
    }
    RewardRealization out{AdaptedProcess(tree), false, false, std::numeric_limits<double>::infinity(),
                          -std::numeric_limits<double>::infinity()};
    for (NodeId n = 0; n < tree.size(); ++n) {
        const double v = f(tree.time(n), tree.w(n));
        out.values[n] = v;
        out.min = std::min(out.min, v);
        out.max = std::max(out.max, v);
        if (v < 0.0) out.negative = true;
        if (std::fabs(v) > bound) out.exceeds_bound = true;
    }
    return out;
}

/// Leaf vector of a terminal expression f(T, w).
inline std::vector<double> realize_terminal(const FunctionSpec& f, const PathTree& tree)
{
    if (f.signature() != Signature::reward) {
        throw Error(ErrorKind::signature_mismatch, "terminal '" + f.source() + "' must be an expression over (t, w)");
    }
    std::vector<double> out;
    out.reserve(tree.level_size(tree.steps()));
    for (NodeId n = tree.level_begin(tree.steps()); n < tree.level_end(tree.steps()); ++n) {
        out.push_back(f(tree.time(n), tree.w(n)));
    }
    return out;
}

} // namespace gstop
