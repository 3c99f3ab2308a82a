#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gstop/error.hpp"
#include "gstop/lattice.hpp"

namespace gstop {

/// A stopping time on a path tree: stop at the first flagged node of each path.
///
/// The stored form is canonical. Flags below a stopped node are cleared, and
/// every leaf reached without an earlier stop is flagged, so tau <= T and two
/// rules describing the same stopping time compare equal.
class StoppingRule {
public:
    StoppingRule() = default;

    StoppingRule(const PathTree& tree, std::vector<std::uint8_t> flags)
    {
        tree.require_path_tree("a stopping rule");
        if (flags.size() != tree.size()) {
            throw Error(ErrorKind::configuration, "stopping rule has the wrong number of flags");
        }
        stop_.assign(tree.size(), 0);
        reach_.assign(tree.size(), 0);
        reach_[0] = 1;
        for (NodeId n = 0; n < tree.size(); ++n) {
            if (!reach_[n]) continue;
            if (flags[n] || tree.is_leaf(n)) {
                stop_[n] = 1;
            } else {
                reach_[tree.up(n)] = 1;
                reach_[tree.down(n)] = 1;
            }
        }
    }

    static StoppingRule at_level(const PathTree& tree, int level)
    {
        std::vector<std::uint8_t> flags(tree.size(), 0);
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) flags[n] = 1;
        return {tree, std::move(flags)};
    }

    static StoppingRule at_root(const PathTree& tree) { return at_level(tree, 0); }

    std::size_t size() const noexcept { return stop_.size(); }

    /// The path stops at `node` (reachable and flagged).
    bool stops_at(NodeId node) const { return stop_[node] != 0; }

    /// The path passes through `node` without stopping there.
    bool continues_at(NodeId node) const { return reach_[node] && !stop_[node]; }

    bool reaches(NodeId node) const { return reach_[node] != 0; }

    std::span<const std::uint8_t> flags() const noexcept { return stop_; }

    std::size_t stop_count() const
    {
        std::size_t c = 0;
        for (auto f : stop_) c += f;
        return c;
    }

    friend bool operator==(const StoppingRule& a, const StoppingRule& b) { return a.stop_ == b.stop_; }

private:
    std::vector<std::uint8_t> stop_;
    std::vector<std::uint8_t> reach_;
};

/// a <= b pathwise: every path stops under `a` no later than under `b`.
inline bool stops_no_later(const StoppingRule& a, const StoppingRule& b)
{
    for (NodeId n = 0; n < a.size(); ++n) {
        if (a.continues_at(n) && !b.continues_at(n)) return false;
    }
    return true;
}

/// The stopped process P_{t ^ tau}: each node takes P at the stopping node on
/// its root path, or its own value when the path has not stopped yet.
inline AdaptedProcess stopped_process(const PathTree& tree, const AdaptedProcess& p, const StoppingRule& rule)
{
    tree.require_path_tree("a stopped process");
    AdaptedProcess out(tree);
    for (NodeId n = 0; n < tree.size(); ++n) {
        if (rule.reaches(n)) {
            out[n] = p[n];
        } else {
            out[n] = out[*tree.parent(n)];
        }
    }
    return out;
}

} // namespace gstop
