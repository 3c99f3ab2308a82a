#pragma once

// Optimal stopping under a nonlinear one-step expectation.
//
// The value process is the backward recursion V = max(X, E(V_next)) with
// V = X at the leaves. The exhaustive oracle enumerates every stopping time
// of the path tree, evaluates E_0(X_tau) for each, and takes the maximum; the
// two agree only because the one-step operator is monotone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gstop/bsde.hpp"
#include "gstop/error.hpp"
#include "gstop/lattice.hpp"
#include "gstop/penalize.hpp"
#include "gstop/stopping_rule.hpp"

namespace gstop {

struct SnellEnvelope {
    AdaptedProcess value;        ///< V
    AdaptedProcess continuation; ///< E_t(V_{t+1}) at non-leaf nodes, X at leaves
};

template <OneStepOperator Op>
SnellEnvelope snell_envelope(const PathTree& tree, const Op& op, const AdaptedProcess& x)
{
    x.require_matches(tree, "reward");
    SnellEnvelope out{x, x};
    for (int level = tree.steps() - 1; level >= 0; --level) {
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            const double c = op.step(n, level, out.value[tree.up(n)], out.value[tree.down(n)]).y;
            out.continuation[n] = c;
            out.value[n] = std::max(x[n], c);
        }
    }
    return out;
}

inline constexpr int max_enumeration_steps = 5;

/// Number of stopping times on a path tree with `steps` levels: S(N) = 1 + S(N-1)^2, S(0) = 1.
inline std::uint64_t stopping_rule_count(int steps)
{
    std::uint64_t s = 1;
    for (int i = 0; i < steps; ++i) {
        if (s > 4'000'000'000ull) return std::numeric_limits<std::uint64_t>::max();
        s = 1 + s * s;
    }
    return s;
}

namespace detail {

inline void require_enumerable(const PathTree& tree)
{
    tree.require_path_tree("stopping-rule enumeration");
    if (tree.steps() > max_enumeration_steps) {
        throw Error(ErrorKind::capacity, "stopping-rule enumeration is limited to N <= " +
                                             std::to_string(max_enumeration_steps) + " (N=" +
                                             std::to_string(tree.steps()) + " has " +
                                             std::to_string(stopping_rule_count(tree.steps())) + " rules)");
    }
}

/// Marks the stop nodes of sub-rule `index` of the subtree at `node`.
/// Index 0 stops at `node`; index 1 + iu*S + id continues with sub-rules
/// iu (up subtree) and id (down subtree).
inline void decode_rule(const PathTree& tree, NodeId node, std::uint64_t index, std::vector<std::uint8_t>& flags)
{
    if (index == 0) {
        flags[node] = 1;
        return;
    }
    const auto sub = stopping_rule_count(tree.steps() - tree.level(node) - 1);
    const auto rest = index - 1;
    decode_rule(tree, tree.up(node), rest / sub, flags);
    decode_rule(tree, tree.down(node), rest % sub, flags);
}

inline void collect_rules(const PathTree& tree, NodeId node, std::vector<std::vector<NodeId>>& out)
{
    out.push_back({node});
    if (tree.is_leaf(node)) return;
    std::vector<std::vector<NodeId>> ups;
    std::vector<std::vector<NodeId>> downs;
    collect_rules(tree, tree.up(node), ups);
    collect_rules(tree, tree.down(node), downs);
    for (const auto& u : ups) {
        for (const auto& d : downs) {
            std::vector<NodeId> both = u;
            both.insert(both.end(), d.begin(), d.end());
            out.push_back(std::move(both));
        }
    }
}

} // namespace detail

/// Every stopping time of the tree: stop-at-root first, then the product of
/// the up-subtree and down-subtree rules (up index outer).
inline std::vector<StoppingRule> enumerate_stopping_rules(const PathTree& tree)
{
    detail::require_enumerable(tree);
    std::vector<std::vector<NodeId>> stops;
    stops.reserve(stopping_rule_count(tree.steps()));
    detail::collect_rules(tree, tree.root(), stops);
    std::vector<StoppingRule> out;
    out.reserve(stops.size());
    for (const auto& s : stops) {
        std::vector<std::uint8_t> flags(tree.size(), 0);
        for (auto n : s) flags[n] = 1;
        out.emplace_back(tree, std::move(flags));
    }
    return out;
}

inline StoppingRule stopping_rule_at(const PathTree& tree, std::uint64_t index)
{
    detail::require_enumerable(tree);
    if (index >= stopping_rule_count(tree.steps())) throw Error(ErrorKind::domain, "rule index out of range");
    std::vector<std::uint8_t> flags(tree.size(), 0);
    detail::decode_rule(tree, tree.root(), index, flags);
    return {tree, std::move(flags)};
}

struct BruteForceResult {
    double value = 0.0;
    std::uint64_t argmax = 0;
    StoppingRule rule;
    std::vector<double> values; ///< E_0(X_tau) for every rule in enumeration order
};

/// Exhaustive maximum of E_0(X_tau) over all stopping times.
///
/// Each subtree keeps the values of all of its sub-rules, and a parent combines
/// every (up, down) pair with one operator step, so each rule's value is the
/// same backward induction as evaluate_rule with shared subtrees.
template <OneStepOperator Op>
BruteForceResult brute_force_optimum(const PathTree& tree, const Op& op, const AdaptedProcess& x,
                                     double tie_tolerance = 1e-11)
{
    detail::require_enumerable(tree);
    x.require_matches(tree, "reward");
    std::vector<std::vector<double>> vals(tree.size());
    for (int level = tree.steps(); level >= 0; --level) {
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            auto& v = vals[n];
            v.push_back(x[n]);
            if (level == tree.steps()) continue;
            const auto& up = vals[tree.up(n)];
            const auto& dn = vals[tree.down(n)];
            v.reserve(1 + up.size() * dn.size());
            for (double a : up) {
                for (double b : dn) v.push_back(op.step(n, level, a, b).y);
            }
        }
        if (level < tree.steps()) {
            for (NodeId n = tree.level_begin(level + 1); n < tree.level_end(level + 1); ++n) {
                std::vector<double>().swap(vals[n]);
            }
        }
    }
    BruteForceResult out;
    out.values = std::move(vals[tree.root()]);
    out.value = *std::max_element(out.values.begin(), out.values.end());
    // earliest rule within solver noise of the maximum
    const double floor = out.value - tie_tolerance * (1.0 + std::fabs(out.value));
    out.argmax = static_cast<std::uint64_t>(
        std::find_if(out.values.begin(), out.values.end(), [&](double v) { return v >= floor; }) -
        out.values.begin());
    out.rule = stopping_rule_at(tree, out.argmax);
    return out;
}

namespace detail {

inline void require_lambda(double lambda)
{
    if (!(lambda > 0.0 && lambda < 1.0)) {
        throw Error(ErrorKind::domain, "lambda must lie in (0, 1), got " + format_number(lambda));
    }
}

} // namespace detail

/// tau^lambda: stop at the first node where X >= lambda * V.
inline StoppingRule lambda_rule(const PathTree& tree, const AdaptedProcess& x, const AdaptedProcess& v, double lambda)
{
    detail::require_lambda(lambda);
    x.require_matches(tree, "reward");
    v.require_matches(tree, "value process");
    std::vector<std::uint8_t> flags(tree.size(), 0);
    for (NodeId n = 0; n < tree.size(); ++n) flags[n] = x[n] >= lambda * v[n] ? 1 : 0;
    return {tree, std::move(flags)};
}

/// tau*: stop at the first node where |X - V| <= tolerance * (1 + |V|).
inline StoppingRule tau_star(const PathTree& tree, const AdaptedProcess& x, const AdaptedProcess& v,
                             double tolerance = 1e-9)
{
    x.require_matches(tree, "reward");
    v.require_matches(tree, "value process");
    std::vector<std::uint8_t> flags(tree.size(), 0);
    for (NodeId n = 0; n < tree.size(); ++n) {
        flags[n] = std::fabs(x[n] - v[n]) <= tolerance * (1.0 + std::fabs(v[n])) ? 1 : 0;
    }
    return {tree, std::move(flags)};
}

/// Default lambda schedule 1 - 2^-k, k = 1..count.
inline std::vector<double> default_lambda_schedule(int count = 20)
{
    std::vector<double> out;
    for (int k = 1; k <= count; ++k) out.push_back(1.0 - std::ldexp(1.0, -k));
    return out;
}

struct TauBarResult {
    StoppingRule rule;              ///< tau^lambda at the end of the schedule
    std::size_t stabilization = 0;  ///< first schedule index after which the rule never changes
    bool stabilized = false;        ///< the last two schedule entries give the same rule
    bool monotone = true;           ///< tau^{lambda_k} nondecreasing in k pathwise
    bool dominated_by_tau_star = true;
    std::vector<StoppingRule> rules;
};

/// Limit of tau^{lambda_k} along an increasing schedule in (0, 1).
inline TauBarResult tau_bar(const PathTree& tree, const AdaptedProcess& x, const AdaptedProcess& v,
                            const std::vector<double>& schedule, double hit_tolerance = 1e-9)
{
    if (schedule.empty()) throw Error(ErrorKind::configuration, "lambda schedule is empty");
    for (std::size_t k = 0; k < schedule.size(); ++k) {
        detail::require_lambda(schedule[k]);
        if (k > 0 && !(schedule[k] > schedule[k - 1])) {
            throw Error(ErrorKind::configuration, "lambda schedule must be increasing");
        }
    }
    TauBarResult out;
    for (double lambda : schedule) out.rules.push_back(lambda_rule(tree, x, v, lambda));
    for (std::size_t k = 0; k + 1 < out.rules.size(); ++k) {
        if (!stops_no_later(out.rules[k], out.rules[k + 1])) out.monotone = false;
    }
    out.rule = out.rules.back();
    out.stabilization = out.rules.size() - 1;
    while (out.stabilization > 0 && out.rules[out.stabilization - 1] == out.rule) --out.stabilization;
    out.stabilized = out.rules.size() >= 2 && out.stabilization + 1 < out.rules.size();
    out.dominated_by_tau_star = stops_no_later(out.rule, tau_star(tree, x, v, hit_tolerance));
    return out;
}

/// max over nodes t of |V_t - E_t(V_{tau^lambda(t)})|.
template <OneStepOperator Op>
double verify_value_identity(const PathTree& tree, const Op& op, const AdaptedProcess& x, const AdaptedProcess& v,
                             double lambda)
{
    detail::require_lambda(lambda);
    x.require_matches(tree, "reward");
    v.require_matches(tree, "value process");
    // u(t) = E_t(V at the first node at or after t with X >= lambda V)
    AdaptedProcess u = v;
    for (int level = tree.steps() - 1; level >= 0; --level) {
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            if (x[n] >= lambda * v[n]) continue;
            u[n] = op.step(n, level, u[tree.up(n)], u[tree.down(n)]).y;
        }
    }
    double gap = 0.0;
    for (NodeId n = 0; n < tree.size(); ++n) gap = std::max(gap, std::fabs(u[n] - v[n]));
    return gap;
}

struct SupermartingaleReport {
    double worst_excess = 0.0;   ///< max of E_s(P_t) - P_s over s < t
    double worst_deficit = 0.0;  ///< max of P_s - E_s(P_t) (for the martingale probe)
    NodeId worst_node = 0;       ///< s of the worst excess
    int worst_level = 0;         ///< t of the worst excess
    std::size_t violations = 0;
    double tolerance = 1e-9;

    bool supermartingale() const noexcept { return violations == 0; }
    bool martingale() const noexcept { return violations == 0 && worst_deficit <= tolerance; }
};

/// Checks E_s(P_t) <= P_s + tolerance for every s < t along paths.
template <OneStepOperator Op>
SupermartingaleReport supermartingale_check(const PathTree& tree, const Op& op, const AdaptedProcess& p,
                                            double tolerance = 1e-9)
{
    p.require_matches(tree, "process");
    SupermartingaleReport rep;
    rep.tolerance = tolerance;
    rep.worst_excess = -std::numeric_limits<double>::infinity();
    rep.worst_deficit = -std::numeric_limits<double>::infinity();
    AdaptedProcess y(tree);
    for (int t = 1; t <= tree.steps(); ++t) {
        for (NodeId n = tree.level_begin(t); n < tree.level_end(t); ++n) y[n] = p[n];
        backward_values(tree, op, y, t, 0);
        for (NodeId s = 0; s < tree.level_begin(t); ++s) {
            const double excess = y[s] - p[s];
            if (excess > rep.worst_excess) {
                rep.worst_excess = excess;
                rep.worst_node = s;
                rep.worst_level = t;
            }
            rep.worst_deficit = std::max(rep.worst_deficit, -excess);
            if (excess > tolerance) ++rep.violations;
        }
    }
    if (tree.steps() == 0) {
        rep.worst_excess = 0.0;
        rep.worst_deficit = 0.0;
    }
    return rep;
}

struct Candidate {
    std::string name;
    AdaptedProcess process;
};

struct CandidateOutcome {
    std::string name;
    bool accepted = false;   ///< passed the preconditions (dominates X, supermartingale)
    std::string reason;      ///< why it was rejected
    double max_excess = 0.0; ///< max of V - candidate over nodes
    bool passed = false;     ///< accepted and V <= candidate + tolerance
};

struct MinimalityReport {
    std::vector<CandidateOutcome> outcomes;
    std::size_t accepted() const
    {
        return static_cast<std::size_t>(
            std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.accepted; }));
    }
    bool all_passed() const
    {
        return std::all_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return !o.accepted || o.passed; });
    }
};

/// V must lie below every supermartingale that dominates X.
template <OneStepOperator Op>
MinimalityReport minimality_check(const PathTree& tree, const Op& op, const AdaptedProcess& x,
                                  const AdaptedProcess& v, const std::vector<Candidate>& candidates,
                                  double tolerance = 1e-9)
{
    MinimalityReport rep;
    for (const auto& c : candidates) {
        CandidateOutcome o;
        o.name = c.name;
        c.process.require_matches(tree, "candidate");
        double below = 0.0;
        for (NodeId n = 0; n < tree.size(); ++n) below = std::max(below, x[n] - c.process[n]);
        if (below > tolerance) {
            o.reason = "does not dominate the reward (by " + detail::format_number(below) + ")";
        } else {
            const auto sm = supermartingale_check(tree, op, c.process, tolerance);
            if (!sm.supermartingale()) {
                o.reason = "not a supermartingale (excess " + detail::format_number(sm.worst_excess) + " at node " +
                           std::to_string(sm.worst_node) + ")";
            } else {
                o.accepted = true;
            }
        }
        if (o.accepted) {
            o.max_excess = -std::numeric_limits<double>::infinity();
            for (NodeId n = 0; n < tree.size(); ++n) o.max_excess = std::max(o.max_excess, v[n] - c.process[n]);
            o.passed = o.max_excess <= tolerance;
        }
        rep.outcomes.push_back(std::move(o));
    }
    return rep;
}

struct StopperControllerResult {
    std::vector<double> levels;
    std::vector<double> root_values;      ///< V_n at the root per level
    std::vector<AdaptedProcess> values;   ///< V_n per level
    bool nondecreasing = true;            ///< V_n nodewise nondecreasing in n (1e-10)
    double supremum = 0.0;                ///< V_n at the root of the last level
    double gap_to_reference = 0.0;        ///< |supremum - reference V_0|
};

/// Snell envelopes under the unconstrained generators g_n = g + n*phi along the schedule.
inline StopperControllerResult stopper_controller_value(const PathTree& tree, const FunctionSpec& g,
                                                        const FunctionSpec& phi, const AdaptedProcess& x,
                                                        const PenaltySchedule& schedule, double reference_v0,
                                                        const SolverSettings& settings = {})
{
    schedule.validate();
    StopperControllerResult out;
    for (double n : schedule.levels) {
        GeneratorStep op(tree, g, phi, n, settings);
        auto env = snell_envelope(tree, op, x);
        if (!out.values.empty()) {
            const auto& prev = out.values.back();
            for (NodeId k = 0; k < tree.size(); ++k) {
                if (env.value[k] < prev[k] - 1e-10) out.nondecreasing = false;
            }
        }
        out.levels.push_back(n);
        out.root_values.push_back(env.value[tree.root()]);
        out.values.push_back(std::move(env.value));
    }
    out.supremum = out.root_values.back();
    out.gap_to_reference = std::fabs(out.supremum - reference_v0);
    return out;
}

} // namespace gstop
