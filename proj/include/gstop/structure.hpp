#pragma once

// Numerical screening of generator/constraint structure on a probe grid:
// Lipschitz slopes in y and z, the zero-at-z=0 condition, the growth
// bound g(t,y,0) <= L0 + M|y|, and a midpoint convexity test. This is a
// screen, not a certificate.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "gstop/error.hpp"
#include "gstop/expr.hpp"

namespace gstop {

struct ProbeBox {
    double y_lo = -5.0;
    double y_hi = 5.0;
    double z_lo = -5.0;
    double z_hi = 5.0;
    int points = 33;
    std::vector<double> times{0.0, 0.5, 1.0};

    static ProbeBox for_horizon(double horizon)
    {
        ProbeBox box;
        box.times = {0.0, horizon / 2.0, horizon};
        return box;
    }

    double y_at(int i) const { return y_lo + (y_hi - y_lo) * i / (points - 1); }
    double z_at(int j) const { return z_lo + (z_hi - z_lo) * j / (points - 1); }

    void validate() const
    {
        if (points < 3) throw Error(ErrorKind::configuration, "probe grid needs at least 3 points per axis");
        if (!(y_hi > y_lo) || !(z_hi > z_lo)) throw Error(ErrorKind::configuration, "probe box is empty");
        if (times.empty()) throw Error(ErrorKind::configuration, "probe box needs at least one time");
    }
};

/// Finite-difference slopes between adjacent grid points, in a fixed order
/// shared by every function probed on the same box (so slopes of g and phi
/// can be combined segment by segment).
struct AxisSlopes {
    std::vector<double> y;
    std::vector<double> z;

    double max_abs_y() const
    {
        double m = 0.0;
        for (double s : y) m = std::max(m, std::fabs(s));
        return m;
    }
    double max_abs_z() const
    {
        double m = 0.0;
        for (double s : z) m = std::max(m, std::fabs(s));
        return m;
    }
};

namespace detail {

inline void require_generator(const FunctionSpec& f, const char* what)
{
    if (f.signature() != Signature::generator) {
        throw Error(ErrorKind::signature_mismatch, std::string(what) + " '" + f.source() +
                                                       "' must be an expression over (t, y, z)");
    }
}

inline double eval_at_grid(const FunctionSpec& f, double t, double y, double z)
{
    try {
        return f(t, y, z);
    } catch (const Error& e) {
        throw Error(e.kind(), std::string(e.what()) + " [probe grid point t=" + format_number(t) +
                                  " y=" + format_number(y) + " z=" + format_number(z) + "]");
    }
}

} // namespace detail

inline AxisSlopes probe_slopes(const FunctionSpec& f, const ProbeBox& box)
{
    detail::require_generator(f, "function");
    box.validate();
    AxisSlopes out;
    const int p = box.points;
    const double hy = (box.y_hi - box.y_lo) / (p - 1);
    const double hz = (box.z_hi - box.z_lo) / (p - 1);
    out.y.reserve(box.times.size() * p * (p - 1));
    out.z.reserve(box.times.size() * p * (p - 1));
    std::vector<double> grid(static_cast<std::size_t>(p * p));
    for (double t : box.times) {
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < p; ++j) {
                grid[static_cast<std::size_t>(i * p + j)] = detail::eval_at_grid(f, t, box.y_at(i), box.z_at(j));
            }
        }
        for (int i = 0; i + 1 < p; ++i) {
            for (int j = 0; j < p; ++j) {
                out.y.push_back((grid[static_cast<std::size_t>((i + 1) * p + j)] -
                                 grid[static_cast<std::size_t>(i * p + j)]) / hy);
            }
        }
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j + 1 < p; ++j) {
                out.z.push_back((grid[static_cast<std::size_t>(i * p + j + 1)] -
                                 grid[static_cast<std::size_t>(i * p + j)]) / hz);
            }
        }
    }
    return out;
}

struct StructureReport {
    ProbeBox grid;
    double lipschitz = 0.0;   ///< max(lipschitz_y, lipschitz_z)
    double lipschitz_y = 0.0;
    double lipschitz_z = 0.0;
    bool vanishes_at_zero_z = false;    ///< max |f(t,y,0)| <= 1e-12
    double zero_z_max_abs = 0.0;
    std::size_t convexity_violations = 0;
    double worst_convexity_excess = 0.0;
    bool growth_bound_holds = false;  ///< f(t,y,0) <= L0 + M|y| with L0 = 0
    double growth_bound_l0 = 0.0;     ///< smallest L0 >= 0 making the growth bound hold on the grid
    bool references_y = false;
    bool references_z = false;

    bool convex() const noexcept { return convexity_violations == 0; }
};

inline constexpr double structure_tolerance = 1e-12;

/// max |f(t, y, 0)| over the probe grid, without the full report.
inline double max_abs_at_zero_z(const FunctionSpec& f, const ProbeBox& box)
{
    detail::require_generator(f, "function");
    box.validate();
    double m = 0.0;
    for (double t : box.times) {
        for (int i = 0; i < box.points; ++i) m = std::max(m, std::fabs(detail::eval_at_grid(f, t, box.y_at(i), 0.0)));
    }
    return m;
}

inline StructureReport check_structure(const FunctionSpec& f, const ProbeBox& box)
{
    detail::require_generator(f, "function");
    box.validate();
    StructureReport rep;
    rep.grid = box;
    rep.references_y = f.references_y();
    rep.references_z = f.references_z();

    const auto slopes = probe_slopes(f, box);
    rep.lipschitz_y = slopes.max_abs_y();
    rep.lipschitz_z = slopes.max_abs_z();
    rep.lipschitz = std::max(rep.lipschitz_y, rep.lipschitz_z);

    const int p = box.points;
    double l0 = 0.0;
    for (double t : box.times) {
        for (int i = 0; i < p; ++i) {
            const double y = box.y_at(i);
            const double at_zero = detail::eval_at_grid(f, t, y, 0.0);
            rep.zero_z_max_abs = std::max(rep.zero_z_max_abs, std::fabs(at_zero));
            l0 = std::max(l0, at_zero - rep.lipschitz * std::fabs(y));
        }
    }
    rep.vanishes_at_zero_z = rep.zero_z_max_abs <= structure_tolerance;
    rep.growth_bound_l0 = l0;
    rep.growth_bound_holds = l0 <= structure_tolerance;

    // midpoint convexity over all pairs of grid points in (y, z)
    std::vector<double> ys;
    std::vector<double> zs;
    std::vector<double> vals;
    for (double t : box.times) {
        ys.clear();
        zs.clear();
        vals.clear();
        for (int i = 0; i < p; ++i) {
            for (int j = 0; j < p; ++j) {
                ys.push_back(box.y_at(i));
                zs.push_back(box.z_at(j));
                vals.push_back(detail::eval_at_grid(f, t, ys.back(), zs.back()));
            }
        }
        for (std::size_t a = 0; a < vals.size(); ++a) {
            for (std::size_t b = a + 1; b < vals.size(); ++b) {
                const double mid = detail::eval_at_grid(f, t, 0.5 * (ys[a] + ys[b]), 0.5 * (zs[a] + zs[b]));
                const double excess = mid - 0.5 * (vals[a] + vals[b]);
                if (excess > structure_tolerance) {
                    ++rep.convexity_violations;
                    rep.worst_convexity_excess = std::max(rep.worst_convexity_excess, excess);
                }
            }
        }
    }
    return rep;
}

/// Named regression anchors for generators and constraints.
struct CatalogEntry {
    std::string name;
    std::string text;
    double lipschitz = 0.0;   ///< analytic Lipschitz constant in (y,z), axis-wise max
    bool homogeneous = false; ///< member of the positively homogeneous family used for the lambda sandwich
};

inline const std::vector<CatalogEntry>& generator_catalog()
{
    static const std::vector<CatalogEntry> entries{
        {"zero", "0", 0.0, true},
        {"abs", "0.5*abs(z)", 0.5, true},
        {"linear_y", "0.5*y", 0.5, false},
        {"linear", "0.5*y+0.5*z", 0.5, false},
    };
    return entries;
}

inline const std::vector<CatalogEntry>& constraint_catalog()
{
    static const std::vector<CatalogEntry> entries{
        {"zero", "0", 0.0, true},
        {"z_zero", "abs(z)", 1.0, true},
        {"z_nonneg", "neg(z)", 1.0, true},
        {"z_capped", "pos(z-1)", 1.0, false},
    };
    return entries;
}

} // namespace gstop
