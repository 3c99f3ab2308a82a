#pragma once

// Backward induction for BSDEs -dy = g(t,y,z) dt + dC - z dW on a binary tree.
//
// At a non-leaf node with children (y_up, y_down):
//   z = (y_up - y_down) / (2 sqrt(dt))
//   y = (y_up + y_down) / 2 + g(t, y, z) dt       (implicit in y, Picard)
// Any one-step operator with the same calling shape plugs into the generic
// passes below (unconstrained, penalised, or the direct constrained minimiser).

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gstop/error.hpp"
#include "gstop/expr.hpp"
#include "gstop/lattice.hpp"
#include "gstop/stopping_rule.hpp"
#include "gstop/structure.hpp"

namespace gstop {

struct SolverSettings {
    double picard_tolerance = 1e-12;
    int picard_max_iterations = 100;
    double contraction_limit = 0.5; ///< dt * (y-Lipschitz of the generator) must not exceed this

    void validate() const
    {
        if (!(picard_tolerance > 0.0)) throw Error(ErrorKind::configuration, "picard tolerance must be > 0");
        if (picard_max_iterations < 1) throw Error(ErrorKind::configuration, "picard max iterations must be >= 1");
    }
};

/// Outcome of one backward step. dc_up/dc_down are the increments of the
/// increasing process on the two child edges.
struct StepResult {
    double y = 0.0;
    double z = 0.0;
    double dc_up = 0.0;
    double dc_down = 0.0;
    int iterations = 0;
};

template <class Op>
concept OneStepOperator = requires(const Op& op, NodeId node, int level, double y_up, double y_down) {
    { op.step(node, level, y_up, y_down) } -> std::same_as<StepResult>;
};

/// Adapted triple (y, z, dC). z lives on non-leaf nodes; dc_up[n] / dc_down[n]
/// are the increments on the edges leaving node n.
struct BsdeSolution {
    AdaptedProcess y;
    AdaptedProcess z;
    AdaptedProcess dc_up;
    AdaptedProcess dc_down;
    std::vector<int> picard_iterations;
};

namespace detail {

/// Solves y = base + G(t, y, z) dt by Picard iteration.
inline double picard(const FunctionSpec& G, double t, double base, double z, double dt, const SolverSettings& s,
                     NodeId node, double start, int& iterations)
{
    if (!G.references_y()) {
        iterations = 1;
        return base + G(t, start, z) * dt;
    }
    double y = start;
    for (int k = 1; k <= s.picard_max_iterations; ++k) {
        const double next = base + G(t, y, z) * dt;
        if (std::fabs(next - y) <= s.picard_tolerance * std::max(1.0, std::fabs(next))) {
            iterations = k;
            return next;
        }
        y = next;
    }
    throw NodeError(ErrorKind::solver, node, "Picard iteration did not converge within " +
                                                 std::to_string(s.picard_max_iterations) + " iterations");
}

} // namespace detail

/// Unconstrained one-step operator for generator G = g + n*phi. With n = 0
/// (or no phi) it is the plain BSDE step; dC on both edges is n*phi*dt.
class GeneratorStep {
public:
    GeneratorStep(const PathTree& tree, FunctionSpec g, SolverSettings settings = {})
        : GeneratorStep(tree, std::move(g), std::nullopt, 0.0, settings)
    {
    }

    GeneratorStep(const PathTree& tree, FunctionSpec g, std::optional<FunctionSpec> phi, double level,
                  SolverSettings settings = {})
        : g_(std::move(g)), phi_(std::move(phi)), level_(level), settings_(settings), dt_(tree.dt()),
          sqrt_dt_(tree.sqrt_dt())
    {
        settings_.validate();
        detail::require_generator(g_, "generator");
        if (phi_) detail::require_generator(*phi_, "constraint");
        if (!(level_ >= 0.0) || !std::isfinite(level_)) {
            throw Error(ErrorKind::configuration, "penalty level must be finite and >= 0");
        }
        const bool penalised = phi_ && level_ != 0.0;
        combined_ = penalised ? FunctionSpec::add_scaled(g_, level_, *phi_) : g_;

        const auto box = ProbeBox::for_horizon(tree.horizon());
        const auto slopes = probe_slopes(combined_, box);
        lipschitz_y_ = slopes.max_abs_y();
        lipschitz_z_ = slopes.max_abs_z();
        if (dt_ * lipschitz_y_ > settings_.contraction_limit) {
            throw Error(ErrorKind::stability,
                        "contraction guard failed for '" + combined_.source() + "': dt*M_y = " +
                            detail::format_number(dt_ * lipschitz_y_) + " > " +
                            detail::format_number(settings_.contraction_limit));
        }
    }

    StepResult step(NodeId node, int level, double y_up, double y_down) const
    {
        const double t = level * dt_;
        StepResult r;
        const double base = 0.5 * (y_up + y_down);
        r.z = (y_up - y_down) / (2.0 * sqrt_dt_);
        r.y = detail::picard(combined_, t, base, r.z, dt_, settings_, node, base, r.iterations);
        if (phi_ && level_ != 0.0) {
            const double dc = level_ * (*phi_)(t, r.y, r.z) * dt_;
            r.dc_up = dc;
            r.dc_down = dc;
        }
        return r;
    }

    const FunctionSpec& generator() const noexcept { return g_; }
    const FunctionSpec& combined() const noexcept { return combined_; }
    const std::optional<FunctionSpec>& constraint() const noexcept { return phi_; }
    double level() const noexcept { return level_; }
    double lipschitz_y() const noexcept { return lipschitz_y_; }
    double lipschitz_z() const noexcept { return lipschitz_z_; }
    /// The one-step map is monotone in the children when |dG/dz| sqrt(dt) <= 1.
    bool monotone() const noexcept { return lipschitz_z_ * sqrt_dt_ <= 1.0 + 1e-12; }
    const SolverSettings& settings() const noexcept { return settings_; }

private:
    FunctionSpec g_;
    std::optional<FunctionSpec> phi_;
    double level_ = 0.0;
    SolverSettings settings_;
    double dt_;
    double sqrt_dt_;
    FunctionSpec combined_;
    double lipschitz_y_ = 0.0;
    double lipschitz_z_ = 0.0;
};

static_assert(OneStepOperator<GeneratorStep>);

/// Full backward pass from the given leaf values, recording (y, z, dC).
template <OneStepOperator Op>
BsdeSolution backward_solve(const PathTree& tree, const Op& op, std::span<const double> terminal)
{
    const int N = tree.steps();
    if (terminal.size() != tree.level_size(N)) {
        throw Error(ErrorKind::configuration, "terminal has " + std::to_string(terminal.size()) +
                                                  " values but the tree has " +
                                                  std::to_string(tree.level_size(N)) + " leaves");
    }
    BsdeSolution sol{AdaptedProcess(tree), AdaptedProcess(tree), AdaptedProcess(tree), AdaptedProcess(tree),
                     std::vector<int>(tree.size(), 0)};
    const NodeId leaf0 = tree.level_begin(N);
    for (std::size_t k = 0; k < terminal.size(); ++k) sol.y[leaf0 + static_cast<NodeId>(k)] = terminal[k];
    for (int level = N - 1; level >= 0; --level) {
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            const auto r = op.step(n, level, sol.y[tree.up(n)], sol.y[tree.down(n)]);
            sol.y[n] = r.y;
            sol.z[n] = r.z;
            sol.dc_up[n] = r.dc_up;
            sol.dc_down[n] = r.dc_down;
            sol.picard_iterations[n] = r.iterations;
        }
    }
    return sol;
}

/// y-only backward pass: `y` holds the terminal values at `from_level`; levels
/// from_level-1 down to to_level are overwritten. E_s(y at from_level) for
/// every node s at or above from_level.
template <OneStepOperator Op>
void backward_values(const PathTree& tree, const Op& op, AdaptedProcess& y, int from_level, int to_level = 0)
{
    for (int level = from_level - 1; level >= to_level; --level) {
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            y[n] = op.step(n, level, y[tree.up(n)], y[tree.down(n)]).y;
        }
    }
}

/// Nonlinear expectation of the leaf vector at every node.
template <OneStepOperator Op>
AdaptedProcess expectation_process(const PathTree& tree, const Op& op, std::span<const double> terminal)
{
    const int N = tree.steps();
    if (terminal.size() != tree.level_size(N)) throw Error(ErrorKind::configuration, "terminal size mismatch");
    AdaptedProcess y(tree);
    const NodeId leaf0 = tree.level_begin(N);
    for (std::size_t k = 0; k < terminal.size(); ++k) y[leaf0 + static_cast<NodeId>(k)] = terminal[k];
    backward_values(tree, op, y, N, 0);
    return y;
}

/// E_t(X_tau) at every node t: values are frozen to X at flagged nodes, so
/// each node carries the expectation under "stop at the first flag at or after
/// this node". The root entry is E_0(X_tau).
template <OneStepOperator Op>
AdaptedProcess evaluate_rule(const PathTree& tree, const Op& op, const AdaptedProcess& x, const StoppingRule& rule)
{
    tree.require_path_tree("evaluating a stopping rule");
    x.require_matches(tree, "reward");
    if (rule.size() != tree.size()) throw Error(ErrorKind::configuration, "stopping rule does not match tree");
    AdaptedProcess v = x;
    for (int level = tree.steps() - 1; level >= 0; --level) {
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            if (rule.stops_at(n)) continue;
            v[n] = op.step(n, level, v[tree.up(n)], v[tree.down(n)]).y;
        }
    }
    return v;
}

inline BsdeSolution solve_bsde(const FunctionSpec& g, std::span<const double> terminal, const PathTree& tree,
                               const SolverSettings& settings = {})
{
    return backward_solve(tree, GeneratorStep(tree, g, settings), terminal);
}

/// E_0(X_tau) for the unconstrained generator g.
inline double solve_to_stopping(const FunctionSpec& g, const AdaptedProcess& x, const StoppingRule& rule,
                                const PathTree& tree, const SolverSettings& settings = {})
{
    return evaluate_rule(tree, GeneratorStep(tree, g, settings), x, rule)[tree.root()];
}

struct ResidualReport {
    double max_abs_residual = 0.0;
    double min_dc = 0.0;
    NodeId worst_node = 0;
    bool increasing = true; ///< every dC increment >= -1e-12

    bool ok(double tolerance) const noexcept { return max_abs_residual <= tolerance && increasing; }
};

/// Per-edge residual of the supersolution identity
///   r = y(node) - y(child) - g(t, y, z) dt + z dW(edge) - dC(edge).
inline ResidualReport supersolution_residual(const BsdeSolution& sol, const FunctionSpec& g, const PathTree& tree)
{
    sol.y.require_matches(tree, "solution y");
    sol.z.require_matches(tree, "solution z");
    sol.dc_up.require_matches(tree, "solution dC");
    sol.dc_down.require_matches(tree, "solution dC");
    ResidualReport rep;
    rep.min_dc = std::numeric_limits<double>::infinity();
    const double dt = tree.dt();
    const double sq = tree.sqrt_dt();
    for (int level = 0; level < tree.steps(); ++level) {
        const double t = level * dt;
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            const double drift = g(t, sol.y[n], sol.z[n]) * dt;
            const double r_up = sol.y[n] - sol.y[tree.up(n)] - drift + sol.z[n] * sq - sol.dc_up[n];
            const double r_dn = sol.y[n] - sol.y[tree.down(n)] - drift - sol.z[n] * sq - sol.dc_down[n];
            const double r = std::max(std::fabs(r_up), std::fabs(r_dn));
            if (r > rep.max_abs_residual) {
                rep.max_abs_residual = r;
                rep.worst_node = n;
            }
            rep.min_dc = std::min({rep.min_dc, sol.dc_up[n], sol.dc_down[n]});
        }
    }
    if (!std::isfinite(rep.min_dc)) rep.min_dc = 0.0;
    rep.increasing = rep.min_dc >= -1e-12;
    return rep;
}

} // namespace gstop
