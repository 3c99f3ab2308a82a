#pragma once

// Randomised identity checks for a one-step constrained expectation:
// comparison, convexity, continuity from below, self-preservation, time
// consistency and the 1-0 law. Terminals are drawn from a seeded
// mt19937_64, so a (seed, trials) pair always reproduces the same report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gstop/bsde.hpp"
#include "gstop/lattice.hpp"
#include "gstop/method.hpp"
#include "gstop/structure.hpp"

namespace gstop {

struct PropertyRow {
    std::string name;
    int trials = 0;
    int failures = 0;
    double worst = 0.0;  ///< largest violation seen (<= 0 means every trial held with margin)
    double tolerance = 0.0;
    std::string skipped; ///< non-empty when the property does not apply to (g, phi)

    bool passed() const noexcept { return failures == 0; }
};

struct PropertyReport {
    std::vector<PropertyRow> rows;
    std::uint64_t seed = 0;
    int trials = 0;

    bool all_passed() const
    {
        return std::all_of(rows.begin(), rows.end(), [](const auto& r) { return r.passed(); });
    }
    std::size_t failures() const
    {
        std::size_t f = 0;
        for (const auto& r : rows) f += static_cast<std::size_t>(r.failures);
        return f;
    }
};

/// Which identities apply. Self-preservation needs g(t,y,0) = 0 for all y;
/// the 1-0 law needs g(t,0,0) = 0; convexity needs g and phi convex.
struct PropertyApplicability {
    std::string self_preserving;
    std::string zero_one_law;
    std::string convexity;

    static PropertyApplicability of(const FunctionSpec& g, const FunctionSpec& phi, const PathTree& tree)
    {
        PropertyApplicability a;
        auto box = ProbeBox::for_horizon(tree.horizon());
        const double g0 = max_abs_at_zero_z(g, box);
        if (g0 > structure_tolerance) {
            a.self_preserving = "generator is nonzero at z = 0 (max |g(t,y,0)| = " + detail::format_number(g0) + ")";
        }
        double g00 = 0.0;
        for (double t : box.times) g00 = std::max(g00, std::fabs(g(t, 0.0, 0.0)));
        if (g00 > structure_tolerance) {
            a.zero_one_law = "generator is nonzero at (y, z) = (0, 0)";
        }
        box.points = 9;
        if (!check_structure(g, box).convex() || !check_structure(phi, box).convex()) {
            a.convexity = "generator or constraint fails the midpoint convexity screen";
        }
        return a;
    }
};

inline constexpr double continuity_tail_exponents[] = {1, 2, 4, 8, 16, 32, 48};

namespace detail {

class TrialRecorder {
public:
    TrialRecorder(std::string name, double tolerance)
    {
        row_.name = std::move(name);
        row_.tolerance = tolerance;
        row_.worst = -std::numeric_limits<double>::infinity();
    }

    /// `excess` is the amount by which the identity is violated; positive beyond tolerance fails.
    void observe(double excess) { worst_in_trial_ = std::max(worst_in_trial_, excess); }

    void end_trial()
    {
        ++row_.trials;
        row_.worst = std::max(row_.worst, worst_in_trial_);
        if (!(worst_in_trial_ <= row_.tolerance)) ++row_.failures;
        worst_in_trial_ = -std::numeric_limits<double>::infinity();
    }

    PropertyRow finish()
    {
        if (row_.trials == 0) row_.worst = 0.0;
        return row_;
    }

private:
    PropertyRow row_;
    double worst_in_trial_ = -std::numeric_limits<double>::infinity();
};

inline PropertyRow skipped_row(std::string name, double tolerance, std::string reason)
{
    PropertyRow r;
    r.name = std::move(name);
    r.tolerance = tolerance;
    r.skipped = std::move(reason);
    return r;
}

} // namespace detail

/// Runs all six identities `trials` times each against `op`.
template <OneStepOperator Op>
PropertyReport property_suite(const PathTree& tree, const Op& op, const PropertyApplicability& applies, int trials,
                              std::uint64_t seed, double tolerance)
{
    tree.require_path_tree("the property suite");
    if (trials < 1) throw Error(ErrorKind::configuration, "property suite needs at least one trial");
    if (!(tolerance > 0.0)) throw Error(ErrorKind::configuration, "property tolerance must be > 0");

    PropertyReport rep;
    rep.seed = seed;
    rep.trials = trials;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> value(-2.0, 2.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> level_of(0, tree.steps());

    const int N = tree.steps();
    const std::size_t leaves = tree.level_size(N);
    const NodeId leaf0 = tree.level_begin(N);
    auto draw = [&] {
        std::vector<double> v(leaves);
        for (auto& x : v) x = value(rng);
        return v;
    };
    auto solve = [&](const std::vector<double>& terminal) { return expectation_process(tree, op, terminal); };
    auto sup_gap = [&](const AdaptedProcess& a, const AdaptedProcess& b, int from_level, int to_level) {
        double g = 0.0;
        for (NodeId n = tree.level_begin(from_level); n < tree.level_end(to_level); ++n) {
            g = std::max(g, std::fabs(a[n] - b[n]));
        }
        return g;
    };

    {
        detail::TrialRecorder rec("comparison", tolerance);
        for (int k = 0; k < trials; ++k) {
            auto xi = draw();
            auto eta = xi;
            for (auto& v : eta) {
                if (unit(rng) < 0.5) v += unit(rng);
            }
            const auto a = solve(xi);
            const auto b = solve(eta);
            for (NodeId n = 0; n < tree.size(); ++n) rec.observe(a[n] - b[n]);
            rec.end_trial();
        }
        rep.rows.push_back(rec.finish());
    }

    if (!applies.convexity.empty()) {
        rep.rows.push_back(detail::skipped_row("convexity", tolerance, applies.convexity));
    } else {
        detail::TrialRecorder rec("convexity", tolerance);
        for (int k = 0; k < trials; ++k) {
            const auto xi = draw();
            const auto eta = draw();
            const auto a = solve(xi);
            const auto b = solve(eta);
            for (double w : {0.25, 0.5, 0.75}) {
                std::vector<double> mix(leaves);
                for (std::size_t i = 0; i < leaves; ++i) mix[i] = w * xi[i] + (1.0 - w) * eta[i];
                const auto m = solve(mix);
                for (NodeId n = 0; n < tree.size(); ++n) rec.observe(m[n] - (w * a[n] + (1.0 - w) * b[n]));
            }
            rec.end_trial();
        }
        rep.rows.push_back(rec.finish());
    }

    {
        // xi_k = xi - 2^-k * tail increases to xi; E(xi_k) must increase to E(xi)
        detail::TrialRecorder rec("continuity_from_below", tolerance);
        for (int k = 0; k < trials; ++k) {
            const auto xi = draw();
            std::vector<double> tail(leaves);
            for (auto& v : tail) v = 0.1 + unit(rng);
            const auto limit = solve(xi);
            AdaptedProcess prev;
            for (double e : continuity_tail_exponents) {
                auto xk = xi;
                for (std::size_t i = 0; i < leaves; ++i) xk[i] -= std::ldexp(tail[i], -static_cast<int>(e));
                auto cur = solve(xk);
                for (NodeId n = 0; n < tree.size(); ++n) {
                    rec.observe(cur[n] - limit[n]);
                    if (prev.size() != 0) rec.observe(prev[n] - cur[n]);
                }
                prev = std::move(cur);
            }
            rec.observe(sup_gap(prev, limit, 0, N));
            rec.end_trial();
        }
        rep.rows.push_back(rec.finish());
    }

    if (!applies.self_preserving.empty()) {
        rep.rows.push_back(detail::skipped_row("self_preserving", tolerance, applies.self_preserving));
    } else {
        detail::TrialRecorder rec("self_preserving", tolerance);
        for (int k = 0; k < trials; ++k) {
            const int t = level_of(rng);
            std::vector<double> at_t(tree.level_size(t));
            for (auto& v : at_t) v = value(rng);
            std::vector<double> xi(leaves);
            for (std::size_t i = 0; i < leaves; ++i) {
                const NodeId anc = tree.ancestor_at(leaf0 + static_cast<NodeId>(i), t);
                xi[i] = at_t[anc - tree.level_begin(t)];
            }
            const auto y = solve(xi);
            for (NodeId n = tree.level_begin(t); n < tree.level_end(t); ++n) {
                rec.observe(std::fabs(y[n] - at_t[n - tree.level_begin(t)]));
            }
            rec.end_trial();
        }
        rep.rows.push_back(rec.finish());
    }

    {
        detail::TrialRecorder rec("time_consistency", tolerance);
        for (int k = 0; k < trials; ++k) {
            const auto xi = draw();
            const auto y = solve(xi);
            const int t = level_of(rng);
            AdaptedProcess nested(tree);
            for (NodeId n = tree.level_begin(t); n < tree.level_end(t); ++n) nested[n] = y[n];
            backward_values(tree, op, nested, t, 0);
            rec.observe(t == 0 ? 0.0 : sup_gap(nested, y, 0, t - 1));
            rec.end_trial();
        }
        rep.rows.push_back(rec.finish());
    }

    if (!applies.zero_one_law.empty()) {
        rep.rows.push_back(detail::skipped_row("zero_one_law", tolerance, applies.zero_one_law));
    } else {
        detail::TrialRecorder rec("zero_one_law", tolerance);
        for (int k = 0; k < trials; ++k) {
            const auto xi = draw();
            const int t = level_of(rng);
            std::vector<std::uint8_t> in_a(tree.level_size(t));
            for (auto& f : in_a) f = unit(rng) < 0.5 ? 1 : 0;
            auto masked = xi;
            for (std::size_t i = 0; i < leaves; ++i) {
                const NodeId anc = tree.ancestor_at(leaf0 + static_cast<NodeId>(i), t);
                if (!in_a[anc - tree.level_begin(t)]) masked[i] = 0.0;
            }
            const auto y = solve(xi);
            const auto ym = solve(masked);
            for (NodeId n = tree.level_begin(t); n < tree.level_end(t); ++n) {
                const double lhs = in_a[n - tree.level_begin(t)] ? y[n] : 0.0;
                rec.observe(std::fabs(lhs - ym[n]));
            }
            rec.end_trial();
        }
        rep.rows.push_back(rec.finish());
    }
    return rep;
}

/// The suite for (g, phi) under `method` (penalized at `level`, direct, or coupled-limit).
inline PropertyReport property_suite(const FunctionSpec& g, const FunctionSpec& phi, const PathTree& tree,
                                     Method method, double level, int trials, std::uint64_t seed, double tolerance,
                                     const SolverSettings& settings = {})
{
    const auto op = make_step(g, phi, tree, method, level, settings);
    return property_suite(tree, op, PropertyApplicability::of(g, phi, tree), trials, seed, tolerance);
}

} // namespace gstop
