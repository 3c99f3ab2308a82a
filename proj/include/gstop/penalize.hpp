#pragma once

// The constrained (g_Gamma) expectation, computed two ways.
//
// Penalised: solve the unconstrained scheme with g_n = g + n*phi for an
// increasing ladder of n, recording dC^n = n*phi*dt. At fixed dt the discrete
// penalised solution overshoots once n*|dphi/dz|*sqrt(dt) passes 1, so every
// level is capped by
//   contraction:  dt * |d(g + n phi)/dy| <= 0.5
//   monotone:     sqrt(dt) * |d(g + n phi)/dz| <= 1
// and the n -> infinity limit is reached only along a ladder (N_k, n_max(N_k)).
//
// Direct: for constraints phi(t, z) that do not involve y, the exact discrete
// minimal supersolution of one step,
//   min y  s.t.  phi(t, z) = 0,
//                y >= y_up   - z sqrt(dt) + g(t, y, z) dt,
//                y >= y_down + z sqrt(dt) + g(t, y, z) dt,
// found by golden-section search over z in the zero set (the objective is
// convex in z for convex g).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gstop/bsde.hpp"
#include "gstop/error.hpp"
#include "gstop/expr.hpp"
#include "gstop/lattice.hpp"
#include "gstop/structure.hpp"

namespace gstop {

/// g + n*phi, carrying M_g + n*M_phi as its declared Lipschitz bound.
inline FunctionSpec penalized_generator(const FunctionSpec& g, const FunctionSpec& phi, double n,
                                        const ProbeBox& box = {})
{
    detail::require_generator(g, "generator");
    detail::require_generator(phi, "constraint");
    auto out = FunctionSpec::add_scaled(g, n, phi);
    const auto lip = [&](const FunctionSpec& f) {
        if (f.declared_lipschitz) return *f.declared_lipschitz;
        const auto s = probe_slopes(f, box);
        return std::max(s.max_abs_y(), s.max_abs_z());
    };
    out.declared_lipschitz = lip(g) + n * lip(phi);
    return out;
}

struct StabilityCaps {
    double contraction_cap = std::numeric_limits<double>::infinity();
    double monotone_cap = std::numeric_limits<double>::infinity();

    double n_max() const noexcept { return std::min(contraction_cap, monotone_cap); }
    bool bounded() const noexcept { return std::isfinite(n_max()); }
};

namespace detail {

/// Largest n >= 0 with |a_i + n b_i| <= limit for every probe segment i.
inline double largest_admissible_level(const std::vector<double>& a, const std::vector<double>& b, double limit,
                                       const char* guard, const std::string& what)
{
    double hi = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::fabs(a[i]) > limit * (1.0 + 1e-12)) {
            throw Error(ErrorKind::stability, std::string(guard) + " fails for generator '" + what +
                                                  "' even without penalisation");
        }
        if (b[i] > 0.0) hi = std::min(hi, (limit - a[i]) / b[i]);
        else if (b[i] < 0.0) hi = std::min(hi, (-limit - a[i]) / b[i]);
    }
    return std::max(hi, 0.0);
}

} // namespace detail

/// Largest stable penalty level on this tree for the pair (g, phi).
inline StabilityCaps stability_caps(const FunctionSpec& g, const FunctionSpec& phi, const PathTree& tree,
                                    const SolverSettings& settings = {})
{
    const auto box = ProbeBox::for_horizon(tree.horizon());
    const auto sg = probe_slopes(g, box);
    const auto sp = probe_slopes(phi, box);
    StabilityCaps caps;
    caps.contraction_cap = detail::largest_admissible_level(sg.y, sp.y, settings.contraction_limit / tree.dt(),
                                                            "contraction guard", g.source());
    caps.monotone_cap =
        detail::largest_admissible_level(sg.z, sp.z, 1.0 / tree.sqrt_dt(), "monotone-scheme guard", g.source());
    return caps;
}

struct PenaltySchedule {
    std::vector<double> levels;
    StabilityCaps caps;
    double tolerance = 1e-8; ///< stop once successive levels differ by less than this in sup-norm

    double n_max() const noexcept { return caps.n_max(); }

    /// 1, 2, 4, ... below the cap, then the cap itself. Without a finite cap
    /// (phi = 0, say) the ladder runs to `uncapped_max`.
    static PenaltySchedule geometric(const StabilityCaps& caps, double tolerance = 1e-8, double uncapped_max = 64.0)
    {
        PenaltySchedule s;
        s.caps = caps;
        s.tolerance = tolerance;
        const double top = caps.bounded() ? caps.n_max() : uncapped_max;
        for (double n = 1.0; n < top * (1.0 - 1e-12); n *= 2.0) s.levels.push_back(n);
        s.levels.push_back(top);
        return s;
    }

    /// Explicit levels, re-checked against the caps.
    static PenaltySchedule explicit_levels(std::vector<double> levels, const StabilityCaps& caps,
                                           double tolerance = 1e-8)
    {
        PenaltySchedule s;
        s.levels = std::move(levels);
        s.caps = caps;
        s.tolerance = tolerance;
        s.validate();
        return s;
    }

    void validate() const
    {
        if (levels.empty()) throw Error(ErrorKind::configuration, "penalty schedule is empty");
        if (!(tolerance > 0.0)) throw Error(ErrorKind::configuration, "penalty tolerance must be > 0");
        for (std::size_t i = 0; i < levels.size(); ++i) {
            if (!(levels[i] >= 0.0) || !std::isfinite(levels[i])) {
                throw Error(ErrorKind::configuration, "penalty levels must be finite and >= 0");
            }
            if (i > 0 && !(levels[i] > levels[i - 1])) {
                throw Error(ErrorKind::configuration, "penalty levels must be strictly increasing");
            }
            if (levels[i] > caps.n_max() * (1.0 + 1e-12)) {
                throw Error(ErrorKind::stability, "penalty level " + detail::format_number(levels[i]) +
                                                      " exceeds the stability cap " +
                                                      detail::format_number(caps.n_max()));
            }
        }
    }
};

enum class GammaMethod { penalized, direct };

inline const char* to_string(GammaMethod m) { return m == GammaMethod::penalized ? "penalized" : "direct"; }

struct GammaSolution {
    AdaptedProcess y;                   ///< final approximation of the constrained expectation at every node
    BsdeSolution final_solution;        ///< (y, z, dC) of the last level (or of the direct solve)
    std::vector<double> levels;         ///< penalty levels actually solved
    std::vector<AdaptedProcess> snapshots; ///< y^n per solved level
    std::vector<double> violation;      ///< max over non-leaf nodes of phi(t, y^n, z^n)
    std::vector<double> mean_violation; ///< E[sum over the path of phi(t, y^n, z^n) dt]
    std::vector<double> level_gap;      ///< sup-norm |y^n - y^{previous n}| (first entry NaN)
    bool converged = false;
    GammaMethod method = GammaMethod::penalized;
};

namespace detail {

/// Probability of reaching each node (2^-level on a path tree, binomial weights when recombining).
inline std::vector<double> node_probabilities(const PathTree& tree)
{
    std::vector<double> p(tree.size(), 0.0);
    p[0] = 1.0;
    for (int level = 0; level < tree.steps(); ++level) {
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            p[tree.up(n)] += 0.5 * p[n];
            p[tree.down(n)] += 0.5 * p[n];
        }
    }
    return p;
}

inline void require_bounded(std::span<const double> terminal)
{
    for (double v : terminal) {
        if (!std::isfinite(v)) throw Error(ErrorKind::domain, "terminal value is not finite (bounded data required)");
    }
}

inline void require_vanishes_at_zero_z(const FunctionSpec& phi, const PathTree& tree)
{
    const double at_zero = max_abs_at_zero_z(phi, ProbeBox::for_horizon(tree.horizon()));
    if (at_zero > structure_tolerance) {
        throw Error(ErrorKind::domain, "constraint '" + phi.source() + "' does not vanish at z = 0: max |phi(t,y,0)| = " +
                                           format_number(at_zero) + " on the probe grid");
    }
}

inline std::pair<double, double> constraint_violation(const FunctionSpec& phi, const BsdeSolution& sol,
                                                      const PathTree& tree, const std::vector<double>& prob)
{
    double worst = 0.0;
    double mean = 0.0;
    for (int level = 0; level < tree.steps(); ++level) {
        const double t = tree.time_at_level(level);
        for (NodeId n = tree.level_begin(level); n < tree.level_end(level); ++n) {
            const double v = phi(t, sol.y[n], sol.z[n]);
            worst = std::max(worst, v);
            mean += prob[n] * v * tree.dt();
        }
    }
    return {worst, mean};
}

} // namespace detail

/// Constrained expectation by penalisation along `schedule`.
inline GammaSolution gamma_expectation(const FunctionSpec& g, const FunctionSpec& phi, std::span<const double> terminal,
                                       const PathTree& tree, const PenaltySchedule& schedule,
                                       const SolverSettings& settings = {})
{
    detail::require_generator(g, "generator");
    detail::require_generator(phi, "constraint");
    detail::require_vanishes_at_zero_z(phi, tree);
    detail::require_bounded(terminal);
    schedule.validate();

    GammaSolution out;
    out.method = GammaMethod::penalized;
    const auto prob = detail::node_probabilities(tree);
    for (double n : schedule.levels) {
        GeneratorStep op(tree, g, phi, n, settings);
        auto sol = backward_solve(tree, op, terminal);
        const auto [worst, mean] = detail::constraint_violation(phi, sol, tree, prob);
        double gap = std::numeric_limits<double>::quiet_NaN();
        if (!out.snapshots.empty()) {
            gap = 0.0;
            const auto& prev = out.snapshots.back();
            for (NodeId k = 0; k < tree.size(); ++k) gap = std::max(gap, std::fabs(sol.y[k] - prev[k]));
        }
        out.levels.push_back(n);
        out.snapshots.push_back(sol.y);
        out.violation.push_back(worst);
        out.mean_violation.push_back(mean);
        out.level_gap.push_back(gap);
        out.final_solution = std::move(sol);
        if (!std::isnan(gap) && gap < schedule.tolerance) {
            out.converged = true;
            break;
        }
    }
    out.y = out.final_solution.y;
    return out;
}

/// Gaps below this fraction of sup|xi| are round-off, not discretisation error.
inline constexpr double ladder_roundoff = 1e-12;

/// Gaps nonincreasing along a refinement ladder, up to an absolute round-off floor.
inline bool gaps_shrinking(const std::vector<double>& gaps, double floor)
{
    for (std::size_t k = 1; k < gaps.size(); ++k) {
        if (gaps[k] > gaps[k - 1] + floor) return false;
    }
    return true;
}

/// Zero set {z : phi(t, z) = 0} of a convex constraint, as an interval.
struct ZeroSet {
    double lo = 0.0;
    double hi = 0.0;
    bool empty = true;
};

namespace detail {

inline constexpr double zero_set_reach = 1e8;

inline ZeroSet find_zero_set(const FunctionSpec& phi, double t)
{
    const auto feasible = [&](double z) { return phi(t, 0.0, z) <= 0.0; };
    std::optional<double> anchor;
    if (feasible(0.0)) anchor = 0.0;
    for (int e = -3; !anchor && e <= 8; ++e) {
        for (double m : {1.0, 2.0, 5.0}) {
            const double z = m * std::pow(10.0, e);
            if (feasible(z)) { anchor = z; break; }
            if (feasible(-z)) { anchor = -z; break; }
        }
    }
    if (!anchor) {
        // degenerate zero set: accept the numerical minimiser if phi vanishes there to 1e-9
        double a = -1e3;
        double b = 1e3;
        const double r = 0.5 * (std::sqrt(5.0) - 1.0);
        double c = b - r * (b - a);
        double d = a + r * (b - a);
        double fc = phi(t, 0.0, c);
        double fd = phi(t, 0.0, d);
        for (int it = 0; it < 300 && (b - a) > 1e-14 * std::max(1.0, std::fabs(a) + std::fabs(b)); ++it) {
            if (fc <= fd) {
                b = d; d = c; fd = fc; c = b - r * (b - a); fc = phi(t, 0.0, c);
            } else {
                a = c; c = d; fc = fd; d = a + r * (b - a); fd = phi(t, 0.0, d);
            }
        }
        const double zm = 0.5 * (a + b);
        if (phi(t, 0.0, zm) <= 1e-9) return {zm, zm, false};
        return {};
    }
    const auto edge = [&](double inside, double outside) {
        if (feasible(outside)) return outside;
        for (int it = 0; it < 400; ++it) {
            const double mid = 0.5 * (inside + outside);
            if (mid == inside || mid == outside) break;
            if (feasible(mid)) inside = mid;
            else outside = mid;
        }
        return inside;
    };
    return {edge(*anchor, -zero_set_reach), edge(*anchor, zero_set_reach), false};
}

} // namespace detail

/// Exact one-step minimal supersolution under a z-only constraint.
class DirectStep {
public:
    DirectStep(const PathTree& tree, FunctionSpec g, FunctionSpec phi, SolverSettings settings = {})
        : DirectStep(std::move(g), std::move(phi), tree.dt(), tree.steps(), tree.horizon(), settings)
    {
    }

    /// Operator for a single step size dt; zero sets are cached for levels 0..steps-1.
    DirectStep(FunctionSpec g, FunctionSpec phi, double dt, int steps, double horizon, SolverSettings settings = {})
        : g_(std::move(g)), phi_(std::move(phi)), settings_(settings), dt_(dt), sqrt_dt_(std::sqrt(dt))
    {
        settings_.validate();
        detail::require_generator(g_, "generator");
        detail::require_generator(phi_, "constraint");
        if (phi_.references_y()) {
            throw Error(ErrorKind::domain, "the direct operator needs a constraint phi(t, z) without y; got '" +
                                               phi_.source() + "'");
        }
        const auto slopes = probe_slopes(g_, ProbeBox::for_horizon(horizon));
        if (dt_ * slopes.max_abs_y() > settings_.contraction_limit) {
            throw Error(ErrorKind::stability, "contraction guard failed for '" + g_.source() + "'");
        }
        const int cached = phi_.references_t() ? std::max(steps, 1) : 1;
        zero_sets_.reserve(static_cast<std::size_t>(cached));
        for (int level = 0; level < cached; ++level) zero_sets_.push_back(detail::find_zero_set(phi_, level * dt_));
    }

    /// Minimal y for a fixed z: y = max(y_up - z sqrt(dt), y_down + z sqrt(dt)) + g(t, y, z) dt.
    double minimal_y(NodeId node, double t, double y_up, double y_down, double z, double& warm, int& iters) const
    {
        const double base = std::max(y_up - z * sqrt_dt_, y_down + z * sqrt_dt_);
        int k = 0;
        const double y = detail::picard(g_, t, base, z, dt_, settings_, node, warm, k);
        iters += k;
        warm = y;
        return y;
    }

    StepResult step(NodeId node, int level, double y_up, double y_down) const
    {
        const double t = level * dt_;
        const auto& zs = zero_sets_[phi_.references_t() ? static_cast<std::size_t>(level) : 0];
        const double reach = 10.0 * (1.0 + std::fabs(y_up - y_down) / sqrt_dt_);
        const double a0 = std::max(zs.lo, -reach);
        const double b0 = std::min(zs.hi, reach);
        if (zs.empty || a0 > b0) {
            throw NodeError(ErrorKind::infeasible_constraint, node,
                            "zero set of '" + phi_.source() + "' is empty on the search bracket");
        }
        StepResult r;
        double warm = 0.5 * (y_up + y_down);
        const auto F = [&](double z) { return minimal_y(node, t, y_up, y_down, z, warm, r.iterations); };

        double best_z = a0;
        double best_y = F(a0);
        if (b0 > a0) {
            const double ratio = 0.5 * (std::sqrt(5.0) - 1.0);
            double a = a0;
            double b = b0;
            double c = b - ratio * (b - a);
            double d = a + ratio * (b - a);
            double fc = F(c);
            double fd = F(d);
            const double tol = 1e-13 * std::max(1.0, reach);
            for (int it = 0; it < 200 && (b - a) > tol; ++it) {
                if (fc <= fd) {
                    b = d; d = c; fd = fc; c = b - ratio * (b - a); fc = F(c);
                } else {
                    a = c; c = d; fc = fd; d = a + ratio * (b - a); fd = F(d);
                }
            }
            const auto consider = [&](double z, double y) {
                if (y < best_y) { best_y = y; best_z = z; }
            };
            consider(c, fc);
            consider(d, fd);
            consider(b0, F(b0));
            const double mid = 0.5 * (a + b);
            consider(mid, F(mid));
            // ties go to the smallest |z|
            const double z0 = std::clamp(0.0, a0, b0);
            const double y0 = F(z0);
            if (y0 <= best_y + 1e-15 * (1.0 + std::fabs(best_y))) { best_y = y0; best_z = z0; }
        }
        r.z = best_z;
        r.y = best_y;
        const double drift = g_(t, r.y, r.z) * dt_;
        r.dc_up = r.y - y_up - drift + r.z * sqrt_dt_;
        r.dc_down = r.y - y_down - drift - r.z * sqrt_dt_;
        return r;
    }

    const FunctionSpec& generator() const noexcept { return g_; }
    const FunctionSpec& constraint() const noexcept { return phi_; }

private:
    FunctionSpec g_;
    FunctionSpec phi_;
    SolverSettings settings_;
    double dt_;
    double sqrt_dt_;
    std::vector<ZeroSet> zero_sets_;
};

static_assert(OneStepOperator<DirectStep>);

/// One direct step at time t with step size dt.
inline StepResult direct_one_step(const FunctionSpec& g, const FunctionSpec& phi_z, double y_up, double y_down,
                                  double t, double dt, const SolverSettings& settings = {})
{
    if (!(dt > 0.0)) throw Error(ErrorKind::configuration, "dt must be > 0");
    if (!(t >= 0.0)) throw Error(ErrorKind::configuration, "t must be >= 0");
    const int level = static_cast<int>(std::llround(t / dt));
    DirectStep op(g, phi_z, dt, level + 1, (level + 1) * dt, settings);
    return op.step(0, level, y_up, y_down);
}

/// Constrained expectation by direct one-step minimisation at every node.
inline GammaSolution gamma_expectation_direct(const FunctionSpec& g, const FunctionSpec& phi,
                                              std::span<const double> terminal, const PathTree& tree,
                                              const SolverSettings& settings = {})
{
    detail::require_vanishes_at_zero_z(phi, tree);
    detail::require_bounded(terminal);
    DirectStep op(tree, g, phi, settings);
    GammaSolution out;
    out.method = GammaMethod::direct;
    out.final_solution = backward_solve(tree, op, terminal);
    out.y = out.final_solution.y;
    const auto prob = detail::node_probabilities(tree);
    const auto [worst, mean] = detail::constraint_violation(phi, out.final_solution, tree, prob);
    out.violation.push_back(worst);
    out.mean_violation.push_back(mean);
    out.converged = true;
    return out;
}

} // namespace gstop
