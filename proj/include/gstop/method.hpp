#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "gstop/bsde.hpp"
#include "gstop/error.hpp"
#include "gstop/penalize.hpp"

namespace gstop {

/// How the one-step constrained expectation is computed.
///   penalized      g + n*phi at a fixed stable level n
///   direct         exact one-step minimisation (z-only constraints)
///   coupled_limit  g + n*phi at the largest stable level of the tree
enum class Method { penalized, direct, coupled_limit };

inline const char* to_string(Method m)
{
    switch (m) {
    case Method::penalized: return "penalized";
    case Method::direct: return "direct";
    case Method::coupled_limit: return "coupled-limit";
    }
    return "?";
}

inline Method parse_method(std::string_view s)
{
    if (s == "penalized") return Method::penalized;
    if (s == "direct") return Method::direct;
    if (s == "coupled-limit") return Method::coupled_limit;
    throw Error(ErrorKind::configuration, "unknown method '" + std::string(s) +
                                              "' (expected penalized, direct or coupled-limit)");
}

/// Runtime-selected one-step operator.
class AnyStep {
public:
    explicit AnyStep(GeneratorStep op) : op_(std::move(op)) {}
    explicit AnyStep(DirectStep op) : op_(std::move(op)) {}

    StepResult step(NodeId node, int level, double y_up, double y_down) const
    {
        return std::visit([&](const auto& op) { return op.step(node, level, y_up, y_down); }, op_);
    }

    /// Penalty level in use; empty for the direct operator.
    std::optional<double> level() const
    {
        if (const auto* p = std::get_if<GeneratorStep>(&op_)) return p->level();
        return std::nullopt;
    }

    bool is_direct() const noexcept { return std::holds_alternative<DirectStep>(op_); }

private:
    std::variant<GeneratorStep, DirectStep> op_;
};

static_assert(OneStepOperator<AnyStep>);

/// Builds the operator for (g, phi) on `tree`. `level` is used by the
/// penalized method and must respect the stability caps.
inline AnyStep make_step(const FunctionSpec& g, const FunctionSpec& phi, const PathTree& tree, Method method,
                         double level = 1.0, const SolverSettings& settings = {})
{
    detail::require_vanishes_at_zero_z(phi, tree);
    switch (method) {
    case Method::direct: return AnyStep(DirectStep(tree, g, phi, settings));
    case Method::penalized: {
        const auto caps = stability_caps(g, phi, tree, settings);
        if (level > caps.n_max() * (1.0 + 1e-12)) {
            throw Error(ErrorKind::stability, "penalty level " + detail::format_number(level) +
                                                  " exceeds the stability cap " +
                                                  detail::format_number(caps.n_max()));
        }
        return AnyStep(GeneratorStep(tree, g, phi, level, settings));
    }
    case Method::coupled_limit: {
        const auto caps = stability_caps(g, phi, tree, settings);
        // an unbounded cap means phi has no slope at all: every level coincides
        return AnyStep(GeneratorStep(tree, g, phi, caps.bounded() ? caps.n_max() : 0.0, settings));
    }
    }
    throw Error(ErrorKind::configuration, "unknown method");
}

} // namespace gstop
