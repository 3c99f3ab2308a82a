#pragma once

// Configuration, command orchestration and report emission for the gstop tool.
//
// A run reads one JSON config, applies dotted --set overrides, resolves every
// default, and writes <prefix>.json plus CSV tables into the output directory.
// The JSON report carries no timing so identical (config, seed) runs are
// byte-identical; wall-clock time goes to <prefix>_timing.json.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gstop.hpp"

namespace gstop::cli {

using json = nlohmann::ordered_json;

inline constexpr const char* report_schema = "gstop-report/1";
inline constexpr const char* output_dir_variable = "GSTOP_OUTPUT_DIR";

enum class Command { expectation, stop, oracle, verify, ladder };

inline const char* to_string(Command c)
{
    switch (c) {
    case Command::expectation: return "expectation";
    case Command::stop: return "stop";
    case Command::oracle: return "oracle";
    case Command::verify: return "verify";
    case Command::ladder: return "ladder";
    }
    return "?";
}

inline Command parse_command(std::string_view s)
{
    if (s == "expectation") return Command::expectation;
    if (s == "stop") return Command::stop;
    if (s == "oracle") return Command::oracle;
    if (s == "verify") return Command::verify;
    if (s == "ladder") return Command::ladder;
    throw Error(ErrorKind::configuration, "unknown command '" + std::string(s) +
                                              "' (expected expectation, stop, oracle, verify or ladder)");
}

struct ExperimentConfig {
    std::string generator = "0";
    std::string constraint = "0";
    std::string reward = "abs(w)";
    std::optional<std::string> terminal_expression; ///< falls back to `reward` when neither form is given
    std::vector<double> terminal_values;
    TreeConfig tree{2, 2.0, TreeMode::path_tree};
    Method method = Method::penalized;
    std::optional<double> penalty_level;  ///< empty: the stability cap
    std::vector<double> penalty_levels;   ///< empty: geometric 1, 2, 4, ... up to the cap
    double penalty_tolerance = 1e-8;
    double uncapped_max = 64.0;
    std::vector<double> lambdas{0.5, 0.9, 0.99};
    std::vector<double> lambda_schedule = default_lambda_schedule();
    SolverSettings solver;
    std::optional<double> property_tolerance; ///< empty: 1e-9 for direct, 1e-7 otherwise
    double hit_tolerance = 1e-9;
    int trials = 200;
    std::vector<int> ladder_steps{4, 8, 16};
    std::uint64_t seed = 1;
    std::string output_dir;
    std::string output_prefix = "report";
};

namespace detail {

[[noreturn]] inline void bad_field(const std::string& path, const std::string& what)
{
    throw Error(ErrorKind::configuration, "field '" + path + "': " + what);
}

inline std::string join(std::string_view prefix, std::string_view key)
{
    return prefix.empty() ? std::string(key) : std::string(prefix) + "." + std::string(key);
}

inline void expect_keys(const json& obj, std::string_view path, std::initializer_list<std::string_view> allowed)
{
    if (!obj.is_object()) bad_field(std::string(path.empty() ? "<root>" : path), "expected an object");
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            bad_field(join(path, key), "unknown field");
        }
    }
}

inline double as_number(const json& v, const std::string& path)
{
    if (!v.is_number()) bad_field(path, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) bad_field(path, "must be finite");
    return d;
}

inline long long as_integer(const json& v, const std::string& path)
{
    if (!v.is_number_integer()) bad_field(path, "expected an integer");
    return v.get<long long>();
}

inline std::string as_string(const json& v, const std::string& path)
{
    if (!v.is_string()) bad_field(path, "expected a string");
    return v.get<std::string>();
}

inline std::vector<double> as_numbers(const json& v, const std::string& path)
{
    if (!v.is_array()) bad_field(path, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_number(v[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

inline std::string parse_expression_field(const std::string& text, Signature sig, const std::string& path)
{
    try {
        (void)parse(text, sig);
    } catch (const Error& e) {
        throw Error(e.kind(), "field '" + path + "': " + e.what());
    }
    return text;
}

} // namespace detail

inline ExperimentConfig parse_config(const json& doc)
{
    using namespace detail;
    expect_keys(doc, "",
                {"command", "generator", "constraint", "reward", "terminal", "tree", "method", "penalty", "lambdas",
                 "lambda_schedule", "tolerances", "verify", "ladder", "seed", "output"});
    ExperimentConfig c;
    if (doc.contains("generator"))
        c.generator = parse_expression_field(as_string(doc["generator"], "generator"), Signature::generator,
                                             "generator");
    if (doc.contains("constraint"))
        c.constraint = parse_expression_field(as_string(doc["constraint"], "constraint"), Signature::generator,
                                              "constraint");
    if (doc.contains("reward"))
        c.reward = parse_expression_field(as_string(doc["reward"], "reward"), Signature::reward, "reward");
    if (doc.contains("terminal")) {
        const auto& t = doc["terminal"];
        expect_keys(t, "terminal", {"expression", "values"});
        if (t.contains("expression") == t.contains("values")) {
            bad_field("terminal", "give exactly one of 'expression' or 'values'");
        }
        if (t.contains("expression")) {
            c.terminal_expression = parse_expression_field(as_string(t["expression"], "terminal.expression"),
                                                           Signature::reward, "terminal.expression");
        } else {
            c.terminal_values = as_numbers(t["values"], "terminal.values");
        }
    }
    if (doc.contains("tree")) {
        const auto& t = doc["tree"];
        expect_keys(t, "tree", {"steps", "horizon", "mode"});
        if (t.contains("steps")) {
            const auto n = as_integer(t["steps"], "tree.steps");
            if (n < 1 || n > 1'000'000) bad_field("tree.steps", "must be a positive integer");
            c.tree.steps = static_cast<int>(n);
        }
        if (t.contains("horizon")) c.tree.horizon = as_number(t["horizon"], "tree.horizon");
        if (t.contains("mode")) {
            const auto m = as_string(t["mode"], "tree.mode");
            if (m == "path-tree") c.tree.mode = TreeMode::path_tree;
            else if (m == "recombining") c.tree.mode = TreeMode::recombining;
            else bad_field("tree.mode", "expected 'path-tree' or 'recombining'");
        }
    }
    if (doc.contains("method")) {
        try {
            c.method = parse_method(as_string(doc["method"], "method"));
        } catch (const Error& e) {
            bad_field("method", e.what());
        }
    }
    if (doc.contains("penalty")) {
        const auto& p = doc["penalty"];
        expect_keys(p, "penalty", {"level", "levels", "tolerance", "uncapped_max"});
        if (p.contains("level")) {
            if (p["level"].is_string() && p["level"].get<std::string>() == "cap") {
                c.penalty_level.reset();
            } else {
                c.penalty_level = as_number(p["level"], "penalty.level");
                if (*c.penalty_level < 0.0) bad_field("penalty.level", "must be >= 0 or \"cap\"");
            }
        }
        if (p.contains("levels")) c.penalty_levels = as_numbers(p["levels"], "penalty.levels");
        if (p.contains("tolerance")) c.penalty_tolerance = as_number(p["tolerance"], "penalty.tolerance");
        if (p.contains("uncapped_max")) c.uncapped_max = as_number(p["uncapped_max"], "penalty.uncapped_max");
        if (!(c.penalty_tolerance > 0.0)) bad_field("penalty.tolerance", "must be > 0");
        if (!(c.uncapped_max > 0.0)) bad_field("penalty.uncapped_max", "must be > 0");
    }
    if (doc.contains("lambdas")) {
        c.lambdas = as_numbers(doc["lambdas"], "lambdas");
        for (std::size_t i = 0; i < c.lambdas.size(); ++i) {
            if (!(c.lambdas[i] > 0.0 && c.lambdas[i] < 1.0))
                bad_field("lambdas[" + std::to_string(i) + "]", "must lie in (0, 1)");
        }
    }
    if (doc.contains("lambda_schedule")) {
        const auto& s = doc["lambda_schedule"];
        if (s.is_object()) {
            expect_keys(s, "lambda_schedule", {"count"});
            const auto k = s.contains("count") ? as_integer(s["count"], "lambda_schedule.count") : 20;
            if (k < 1 || k > 60) bad_field("lambda_schedule.count", "must lie in 1..60");
            c.lambda_schedule = default_lambda_schedule(static_cast<int>(k));
        } else {
            c.lambda_schedule = as_numbers(s, "lambda_schedule");
            for (std::size_t i = 0; i < c.lambda_schedule.size(); ++i) {
                const double l = c.lambda_schedule[i];
                if (!(l > 0.0 && l < 1.0)) bad_field("lambda_schedule[" + std::to_string(i) + "]", "must lie in (0, 1)");
                if (i > 0 && !(l > c.lambda_schedule[i - 1])) bad_field("lambda_schedule", "must be increasing");
            }
        }
    }
    if (doc.contains("tolerances")) {
        const auto& t = doc["tolerances"];
        expect_keys(t, "tolerances", {"picard", "picard_max_iterations", "property", "hit"});
        if (t.contains("picard")) c.solver.picard_tolerance = as_number(t["picard"], "tolerances.picard");
        if (t.contains("picard_max_iterations")) {
            const auto n = as_integer(t["picard_max_iterations"], "tolerances.picard_max_iterations");
            if (n < 1 || n > 1'000'000) bad_field("tolerances.picard_max_iterations", "must lie in 1..1000000");
            c.solver.picard_max_iterations = static_cast<int>(n);
        }
        if (t.contains("property") && !(t["property"].is_string() && t["property"].get<std::string>() == "auto")) {
            c.property_tolerance = as_number(t["property"], "tolerances.property");
        }
        if (t.contains("hit")) c.hit_tolerance = as_number(t["hit"], "tolerances.hit");
        if (!(c.solver.picard_tolerance > 0.0)) bad_field("tolerances.picard", "must be > 0");
        if (c.property_tolerance && !(*c.property_tolerance > 0.0)) bad_field("tolerances.property", "must be > 0");
        if (!(c.hit_tolerance >= 0.0)) bad_field("tolerances.hit", "must be >= 0");
    }
    if (doc.contains("verify")) {
        const auto& v = doc["verify"];
        expect_keys(v, "verify", {"trials"});
        if (v.contains("trials")) {
            const auto n = as_integer(v["trials"], "verify.trials");
            if (n < 1 || n > 1'000'000) bad_field("verify.trials", "must lie in 1..1000000");
            c.trials = static_cast<int>(n);
        }
    }
    if (doc.contains("ladder")) {
        const auto& l = doc["ladder"];
        expect_keys(l, "ladder", {"steps"});
        if (l.contains("steps")) {
            const auto& s = l["steps"];
            if (!s.is_array() || s.empty()) bad_field("ladder.steps", "expected a non-empty array of integers");
            c.ladder_steps.clear();
            for (std::size_t i = 0; i < s.size(); ++i) {
                const auto n = as_integer(s[i], "ladder.steps[" + std::to_string(i) + "]");
                if (n < 1 || n > 4096) bad_field("ladder.steps[" + std::to_string(i) + "]", "must lie in 1..4096");
                c.ladder_steps.push_back(static_cast<int>(n));
            }
        }
    }
    if (doc.contains("seed")) {
        const auto& s = doc["seed"];
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
            bad_field("seed", "expected a non-negative integer");
        c.seed = s.get<std::uint64_t>();
    }
    if (doc.contains("output")) {
        const auto& o = doc["output"];
        expect_keys(o, "output", {"dir", "prefix"});
        if (o.contains("dir")) c.output_dir = as_string(o["dir"], "output.dir");
        if (o.contains("prefix")) {
            c.output_prefix = as_string(o["prefix"], "output.prefix");
            if (c.output_prefix.empty() || c.output_prefix.find('/') != std::string::npos)
                bad_field("output.prefix", "must be a non-empty file name");
        }
    }
    try {
        c.solver.validate();
        (void)build_tree(c.tree);
    } catch (const Error& e) {
        bad_field("tree", e.what());
    }
    return c;
}

/// Applies "a.b.c=value" to `doc`. The value is read as JSON when it parses, else as a string.
inline void apply_override(json& doc, std::string_view assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw Error(ErrorKind::configuration, "override '" + std::string(assignment) + "' is not of the form key=value");
    }
    const std::string path(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* cur = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw Error(ErrorKind::configuration, "override path '" + path + "' has an empty segment");
        if (!cur->is_object()) {
            throw Error(ErrorKind::configuration, "override path '" + path + "' descends into a non-object");
        }
        if (dot == std::string::npos) {
            (*cur)[key] = std::move(value);
            return;
        }
        cur = &(*cur)[key];
        if (cur->is_null()) *cur = json::object();
        start = dot + 1;
    }
}

/// Every resolved parameter, in the config's own schema.
inline json echo_config(const ExperimentConfig& c)
{
    json j;
    j["generator"] = c.generator;
    j["constraint"] = c.constraint;
    j["reward"] = c.reward;
    if (c.terminal_expression) j["terminal"] = {{"expression", *c.terminal_expression}};
    else if (!c.terminal_values.empty()) j["terminal"] = {{"values", c.terminal_values}};
    else j["terminal"] = {{"expression", c.reward}};
    j["tree"] = {{"steps", c.tree.steps}, {"horizon", c.tree.horizon}, {"mode", to_string(c.tree.mode)}};
    j["method"] = to_string(c.method);
    json pen;
    if (c.penalty_level) pen["level"] = *c.penalty_level;
    else pen["level"] = "cap";
    pen["levels"] = c.penalty_levels;
    pen["tolerance"] = c.penalty_tolerance;
    pen["uncapped_max"] = c.uncapped_max;
    j["penalty"] = pen;
    j["lambdas"] = c.lambdas;
    j["lambda_schedule"] = c.lambda_schedule;
    j["tolerances"] = {{"picard", c.solver.picard_tolerance},
                       {"picard_max_iterations", c.solver.picard_max_iterations},
                       {"property", c.property_tolerance ? json(*c.property_tolerance) : json("auto")},
                       {"hit", c.hit_tolerance}};
    j["verify"] = {{"trials", c.trials}};
    j["ladder"] = {{"steps", c.ladder_steps}};
    j["seed"] = c.seed;
    j["output"] = {{"prefix", c.output_prefix}};
    return j;
}

/// A CSV table kept as text; numbers use the shortest round-trip form.
struct Table {
    std::string name;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }

    std::string render() const
    {
        std::string out;
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i) out += ',';
                out += cells[i];
            }
            out += '\n';
        };
        line(header);
        for (const auto& r : rows) line(r);
        return out;
    }
};

inline std::string num(double v)
{
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return gstop::detail::format_number(v);
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

struct RunOutput {
    json report;
    std::vector<Table> tables;
    int exit_code = 0;
};

namespace detail {

struct Problem {
    ExperimentConfig config;
    FunctionSpec g;
    FunctionSpec phi;
    FunctionSpec reward;
    PathTree tree;
};

inline Problem make_problem(const ExperimentConfig& c, const TreeConfig& tree)
{
    return {c, parse(c.generator, Signature::generator), parse(c.constraint, Signature::generator),
            parse(c.reward, Signature::reward), build_tree(tree)};
}

inline std::vector<double> terminal_for(const ExperimentConfig& c, const PathTree& tree)
{
    if (!c.terminal_values.empty()) {
        const auto want = tree.level_size(tree.steps());
        if (c.terminal_values.size() != want) {
            bad_field("terminal.values", "has " + std::to_string(c.terminal_values.size()) + " entries but the tree has " +
                                             std::to_string(want) + " leaves");
        }
        return c.terminal_values;
    }
    return realize_terminal(parse(c.terminal_expression.value_or(c.reward), Signature::reward), tree);
}

inline json caps_json(const StabilityCaps& caps)
{
    return {{"contraction_cap", finite_or_null(caps.contraction_cap)},
            {"monotone_cap", finite_or_null(caps.monotone_cap)},
            {"n_max", finite_or_null(caps.n_max())}};
}

inline json structure_json(const StructureReport& r)
{
    return {{"grid",
             {{"y", {r.grid.y_lo, r.grid.y_hi}},
              {"z", {r.grid.z_lo, r.grid.z_hi}},
              {"points", r.grid.points},
              {"t", r.grid.times}}},
            {"lipschitz", r.lipschitz},
            {"lipschitz_y", r.lipschitz_y},
            {"lipschitz_z", r.lipschitz_z},
            {"vanishes_at_zero_z", r.vanishes_at_zero_z},
            {"zero_z_max_abs", r.zero_z_max_abs},
            {"convexity_violations", r.convexity_violations},
            {"worst_convexity_excess", r.worst_convexity_excess},
            {"growth_bound_holds", r.growth_bound_holds},
            {"growth_bound_l0", r.growth_bound_l0}};
}

/// Screens g and phi, warns on stderr, and refuses a constraint that is nonzero at z = 0.
inline json screen(const Problem& p, std::ostream& warn)
{
    const auto box = ProbeBox::for_horizon(p.tree.horizon());
    const auto sg = check_structure(p.g, box);
    const auto sp = check_structure(p.phi, box);
    if (!sp.vanishes_at_zero_z) {
        throw Error(ErrorKind::domain, "field 'constraint': '" + p.phi.source() +
                                           "' does not vanish at z = 0: max |phi(t,y,0)| = " +
                                           gstop::detail::format_number(sp.zero_z_max_abs) +
                                           " on the probe grid, so the constrained expectation is undefined");
    }
    if (!sg.convex()) warn << "warning: generator '" << p.g.source() << "' fails the convexity screen\n";
    if (!sp.convex()) warn << "warning: constraint '" << p.phi.source() << "' fails the convexity screen\n";
    if (!sg.growth_bound_holds) {
        warn << "warning: generator growth bound needs L0 = " << num(sg.growth_bound_l0) << "\n";
    }
    return {{"generator", structure_json(sg)}, {"constraint", structure_json(sp)}};
}

inline double resolved_level(const ExperimentConfig& c, const StabilityCaps& caps)
{
    if (c.penalty_level) return *c.penalty_level;
    return caps.bounded() ? caps.n_max() : 1.0;
}

inline AnyStep configured_step(const Problem& p, double level)
{
    return make_step(p.g, p.phi, p.tree, p.config.method, level, p.config.solver);
}

inline std::optional<double> step_level(const AnyStep& op) { return op.level(); }

inline PenaltySchedule configured_schedule(const ExperimentConfig& c, const StabilityCaps& caps)
{
    if (!c.penalty_levels.empty()) return PenaltySchedule::explicit_levels(c.penalty_levels, caps, c.penalty_tolerance);
    return PenaltySchedule::geometric(caps, c.penalty_tolerance, c.uncapped_max);
}

inline json rule_json(const PathTree& tree, const StoppingRule& rule)
{
    std::vector<std::size_t> by_level(static_cast<std::size_t>(tree.steps() + 1), 0);
    json nodes = json::array();
    for (NodeId n = 0; n < tree.size(); ++n) {
        if (!rule.stops_at(n)) continue;
        ++by_level[static_cast<std::size_t>(tree.level(n))];
        if (tree.steps() <= 8) nodes.push_back(n);
    }
    json j{{"stops_by_level", by_level}};
    if (tree.steps() <= 8) j["stop_nodes"] = nodes;
    return j;
}

inline json supermartingale_json(const SupermartingaleReport& r)
{
    return {{"violations", r.violations},
            {"worst_excess", r.worst_excess},
            {"worst_deficit", r.worst_deficit},
            {"worst_node", r.worst_node},
            {"worst_level", r.worst_level},
            {"tolerance", r.tolerance}};
}

inline std::string cell(const AdaptedProcess& p, NodeId n) { return num(p[n]); }

} // namespace detail

inline RunOutput run_expectation(const ExperimentConfig& c, std::ostream& warn)
{
    auto p = detail::make_problem(c, c.tree);
    RunOutput out;
    json res;
    res["structure"] = detail::screen(p, warn);
    const auto terminal = detail::terminal_for(c, p.tree);
    GammaSolution sol;
    if (c.method == Method::direct) {
        sol = gamma_expectation_direct(p.g, p.phi, terminal, p.tree, c.solver);
    } else {
        const auto caps = stability_caps(p.g, p.phi, p.tree, c.solver);
        res["caps"] = detail::caps_json(caps);
        PenaltySchedule schedule;
        if (c.method == Method::coupled_limit) {
            schedule = PenaltySchedule::explicit_levels({caps.bounded() ? caps.n_max() : 0.0}, caps, c.penalty_tolerance);
        } else {
            schedule = detail::configured_schedule(c, caps);
        }
        res["schedule"] = schedule.levels;
        sol = gamma_expectation(p.g, p.phi, terminal, p.tree, schedule, c.solver);
        json levels = json::array();
        Table pen{"penalty", {"n", "root_y", "max_violation", "mean_violation", "level_gap"}, {}};
        bool nondecreasing = true;
        for (std::size_t k = 0; k < sol.levels.size(); ++k) {
            const double root = sol.snapshots[k][0];
            levels.push_back({{"n", sol.levels[k]},
                              {"root_y", root},
                              {"max_violation", sol.violation[k]},
                              {"mean_violation", sol.mean_violation[k]},
                              {"level_gap", finite_or_null(sol.level_gap[k])}});
            pen.add({num(sol.levels[k]), num(root), num(sol.violation[k]), num(sol.mean_violation[k]),
                     std::isnan(sol.level_gap[k]) ? "" : num(sol.level_gap[k])});
            if (k > 0) {
                for (NodeId n = 0; n < p.tree.size(); ++n) {
                    if (sol.snapshots[k][n] < sol.snapshots[k - 1][n] - 1e-10) nondecreasing = false;
                }
            }
        }
        res["levels"] = levels;
        res["nondecreasing_in_n"] = nondecreasing;
        res["converged"] = sol.converged;
        out.tables.push_back(std::move(pen));
        if (!p.phi.references_y()) {
            const auto direct = gamma_expectation_direct(p.g, p.phi, terminal, p.tree, c.solver);
            double sup = 0.0;
            for (double v : terminal) sup = std::max(sup, std::fabs(v));
            const double gap = std::fabs(direct.y[0] - sol.y[0]);
            res["direct_oracle"] = {{"root_value", direct.y[0]},
                                    {"gap", gap},
                                    {"relative_gap", sup > 0 ? gap / sup : gap}};
        }
    }
    res["method"] = to_string(c.method);
    res["root_value"] = sol.y[0];
    const auto residual = supersolution_residual(sol.final_solution, p.g, p.tree);
    res["residual"] = {{"max_abs", residual.max_abs_residual},
                       {"min_dc", residual.min_dc},
                       {"increasing", residual.increasing}};
    res["max_violation"] = sol.violation.back();
    Table nodes{"nodes", {"node", "level", "t", "w", "y", "z", "dc_up", "dc_down"}, {}};
    const auto& fs = sol.final_solution;
    for (NodeId n = 0; n < p.tree.size(); ++n) {
        const bool leaf = p.tree.is_leaf(n);
        nodes.add({std::to_string(n), std::to_string(p.tree.level(n)), num(p.tree.time(n)), num(p.tree.w(n)),
                   num(sol.y[n]), leaf ? "" : num(fs.z[n]), leaf ? "" : num(fs.dc_up[n]),
                   leaf ? "" : num(fs.dc_down[n])});
    }
    out.tables.push_back(std::move(nodes));
    out.report = std::move(res);
    return out;
}

namespace detail {

/// Dominating processes fed to the minimality check. The Snell envelopes of
/// rewards above X are supermartingales by construction; the plain shifts are
/// included to exercise the rejection path.
template <OneStepOperator Op>
std::vector<Candidate> minimality_candidates(const PathTree& tree, const Op& op, const AdaptedProcess& x,
                                             const AdaptedProcess& v)
{
    double sup = 0.0;
    for (NodeId n = 0; n < tree.size(); ++n) sup = std::max(sup, x[n]);
    AdaptedProcess shifted = x;
    AdaptedProcess doubled = x;
    AdaptedProcess ceiling(tree, sup);
    AdaptedProcess v_shift = v;
    for (NodeId n = 0; n < tree.size(); ++n) {
        shifted[n] += 0.5;
        doubled[n] = x[n] + std::fabs(x[n]) + 0.1;
        v_shift[n] += 0.5;
    }
    std::vector<Candidate> out;
    out.push_back({"snell_of_reward_plus_half", snell_envelope(tree, op, shifted).value});
    out.push_back({"snell_of_reward_doubled", snell_envelope(tree, op, doubled).value});
    out.push_back({"snell_of_sup_reward", snell_envelope(tree, op, ceiling).value});
    out.push_back({"constant_sup_reward", ceiling});
    out.push_back({"value_plus_half", v_shift});
    out.push_back({"reward", x});
    return out;
}

} // namespace detail

inline RunOutput run_stop(const ExperimentConfig& c, std::ostream& warn)
{
    auto p = detail::make_problem(c, c.tree);
    RunOutput out;
    json res;
    res["structure"] = detail::screen(p, warn);
    const auto caps = stability_caps(p.g, p.phi, p.tree, c.solver);
    res["caps"] = detail::caps_json(caps);
    const auto op = detail::configured_step(p, detail::resolved_level(c, caps));
    res["method"] = to_string(c.method);
    res["level"] = op.level() ? json(*op.level()) : json(nullptr);
    const auto reward = realize_reward(p.reward, p.tree);
    if (reward.negative) warn << "warning: reward takes negative values (min " << num(reward.min) << ")\n";
    if (reward.exceeds_bound) warn << "warning: reward exceeds the boundedness threshold\n";
    const auto& x = reward.values;
    const auto env = snell_envelope(p.tree, op, x);
    const auto& v = env.value;
    res["V0"] = v[0];
    res["X0"] = x[0];
    res["continuation_root"] = p.tree.steps() > 0 ? env.continuation[0] : x[0];
    res["reward"] = {{"min", reward.min}, {"max", reward.max}, {"negative", reward.negative}};
    {
        double dom = std::numeric_limits<double>::infinity();
        double pin = 0.0;
        for (NodeId n = 0; n < p.tree.size(); ++n) {
            dom = std::min(dom, v[n] - x[n]);
            if (p.tree.is_leaf(n)) pin = std::max(pin, std::fabs(v[n] - x[n]));
        }
        res["dominance"] = {{"min_value_minus_reward", dom}, {"leaf_max_abs_gap", pin}};
    }

    Table lambda{"lambda", {"lambda", "value", "V0"}, {}};
    Table nodes{"nodes", {"node", "level", "t", "w", "X", "V", "continuation", "tau_star", "tau_bar"}, {}};
    if (!p.tree.is_path_tree()) {
        res["rules"] = "unavailable on a recombining tree";
        for (NodeId n = 0; n < p.tree.size(); ++n) {
            nodes.add({std::to_string(n), std::to_string(p.tree.level(n)), num(p.tree.time(n)), num(p.tree.w(n)),
                       num(x[n]), num(v[n]), p.tree.is_leaf(n) ? "" : num(env.continuation[n]), "", ""});
        }
    } else {
        json table = json::array();
        for (double l : c.lambdas) {
            const auto rule = lambda_rule(p.tree, x, v, l);
            const double value = evaluate_rule(p.tree, op, x, rule)[0];
            const double identity = verify_value_identity(p.tree, op, x, v, l);
            table.push_back({{"lambda", l},
                             {"value", value},
                             {"gap_to_V0", v[0] - value},
                             {"identity_gap", identity},
                             {"rule", detail::rule_json(p.tree, rule)}});
            lambda.add({num(l), num(value), num(v[0])});
        }
        res["lambda_table"] = table;

        const auto star = tau_star(p.tree, x, v, c.hit_tolerance);
        const double star_value = evaluate_rule(p.tree, op, x, star)[0];
        auto ts = detail::rule_json(p.tree, star);
        ts["value"] = star_value;
        res["tau_star"] = ts;

        const auto bar = tau_bar(p.tree, x, v, c.lambda_schedule, c.hit_tolerance);
        const double bar_value = evaluate_rule(p.tree, op, x, bar.rule)[0];
        auto tb = detail::rule_json(p.tree, bar.rule);
        tb["value"] = bar_value;
        tb["gap_to_V0"] = std::fabs(bar_value - v[0]);
        tb["stabilization_k"] = bar.stabilization + 1;
        tb["stabilized"] = bar.stabilized;
        tb["monotone"] = bar.monotone;
        tb["dominated_by_tau_star"] = bar.dominated_by_tau_star;
        res["tau_bar"] = tb;

        // recorded only: whether the value stopped at tau_bar is a martingale
        const auto stopped = stopped_process(p.tree, v, bar.rule);
        const auto mart = supermartingale_check(p.tree, op, stopped);
        res["stopped_value_probe"] = {{"tau_bar_equals_tau_star", bar.rule == star},
                                      {"martingale", mart.martingale()},
                                      {"check", detail::supermartingale_json(mart)}};

        res["supermartingale"] = detail::supermartingale_json(supermartingale_check(p.tree, op, v));
        const auto mini =
            minimality_check(p.tree, op, x, v, detail::minimality_candidates(p.tree, op, x, v));
        json cand = json::array();
        for (const auto& o : mini.outcomes) {
            json e{{"name", o.name}, {"accepted", o.accepted}};
            if (o.accepted) {
                e["max_value_minus_candidate"] = o.max_excess;
                e["passed"] = o.passed;
            } else {
                e["reason"] = o.reason;
            }
            cand.push_back(std::move(e));
        }
        res["minimality"] = {{"accepted", mini.accepted()}, {"all_passed", mini.all_passed()}, {"candidates", cand}};

        for (NodeId n = 0; n < p.tree.size(); ++n) {
            nodes.add({std::to_string(n), std::to_string(p.tree.level(n)), num(p.tree.time(n)), num(p.tree.w(n)),
                       num(x[n]), num(v[n]), p.tree.is_leaf(n) ? "" : num(env.continuation[n]),
                       star.stops_at(n) ? "1" : "0", bar.rule.stops_at(n) ? "1" : "0"});
        }
    }

    {
        const auto schedule = detail::configured_schedule(c, caps);
        const auto sc = stopper_controller_value(p.tree, p.g, p.phi, x, schedule, v[0], c.solver);
        Table ctl{"controller", {"n", "root_value"}, {}};
        for (std::size_t k = 0; k < sc.levels.size(); ++k) ctl.add({num(sc.levels[k]), num(sc.root_values[k])});
        res["stopper_controller"] = {{"levels", sc.levels},
                                     {"root_values", sc.root_values},
                                     {"nondecreasing", sc.nondecreasing},
                                     {"supremum", sc.supremum},
                                     {"gap_to_V0", sc.gap_to_reference}};
        out.tables.push_back(std::move(ctl));
    }
    out.tables.push_back(std::move(lambda));
    out.tables.push_back(std::move(nodes));
    out.report = std::move(res);
    return out;
}

inline RunOutput run_oracle(const ExperimentConfig& c, std::ostream& warn)
{
    auto p = detail::make_problem(c, c.tree);
    if (p.tree.steps() > max_enumeration_steps || !p.tree.is_path_tree()) {
        throw Error(ErrorKind::capacity, "field 'tree.steps': the oracle enumerates stopping rules and needs a "
                                         "path tree with N <= " + std::to_string(max_enumeration_steps));
    }
    RunOutput out;
    json res;
    res["structure"] = detail::screen(p, warn);
    const auto caps = stability_caps(p.g, p.phi, p.tree, c.solver);
    res["caps"] = detail::caps_json(caps);
    const auto x = realize_reward(p.reward, p.tree).values;
    json methods = json::array();
    auto compare = [&](Method m) {
        auto cfg = c;
        cfg.method = m;
        detail::Problem q{cfg, p.g, p.phi, p.reward, p.tree};
        const auto op = detail::configured_step(q, detail::resolved_level(cfg, caps));
        const auto env = snell_envelope(p.tree, op, x);
        const auto bf = brute_force_optimum(p.tree, op, x);
        json e{{"method", to_string(m)},
               {"level", op.level() ? json(*op.level()) : json(nullptr)},
               {"dp_value", env.value[0]},
               {"brute_force_value", bf.value},
               {"gap", std::fabs(env.value[0] - bf.value)},
               {"rule_count", bf.values.size()},
               {"argmax_index", bf.argmax},
               {"argmax_rule", detail::rule_json(p.tree, bf.rule)}};
        methods.push_back(std::move(e));
        return env.value[0];
    };
    const double primary = compare(c.method);
    res["rule_count"] = stopping_rule_count(p.tree.steps());
    res["dp_value"] = primary;
    res["brute_force_value"] = methods[0]["brute_force_value"];
    res["gap"] = methods[0]["gap"];
    if (c.method != Method::direct && !p.phi.references_y()) {
        const double direct = compare(Method::direct);
        res["penalized_vs_direct_gap"] = std::fabs(primary - direct);
    }
    res["methods"] = methods;
    out.report = std::move(res);
    return out;
}

inline RunOutput run_verify(const ExperimentConfig& c, std::ostream& warn)
{
    auto p = detail::make_problem(c, c.tree);
    RunOutput out;
    json res;
    res["structure"] = detail::screen(p, warn);
    const auto caps = stability_caps(p.g, p.phi, p.tree, c.solver);
    res["caps"] = detail::caps_json(caps);
    const auto op = detail::configured_step(p, detail::resolved_level(c, caps));
    const double tol = c.property_tolerance.value_or(c.method == Method::direct ? 1e-9 : 1e-7);
    const auto suite = property_suite(p.tree, op, PropertyApplicability::of(p.g, p.phi, p.tree), c.trials, c.seed, tol);
    res["method"] = to_string(c.method);
    res["level"] = op.level() ? json(*op.level()) : json(nullptr);
    res["seed"] = c.seed;
    res["trials"] = c.trials;
    res["tolerance"] = tol;
    json rows = json::array();
    Table t{"properties", {"property", "trials", "failures", "worst", "skipped"}, {}};
    for (const auto& r : suite.rows) {
        json e{{"property", r.name}, {"trials", r.trials}, {"failures", r.failures}, {"passed", r.passed()}};
        e["worst"] = r.skipped.empty() ? json(r.worst) : json(nullptr);
        if (!r.skipped.empty()) e["skipped"] = r.skipped;
        rows.push_back(std::move(e));
        t.add({r.name, std::to_string(r.trials), std::to_string(r.failures), r.skipped.empty() ? num(r.worst) : "",
               r.skipped.empty() ? "" : "\"" + r.skipped + "\""});
    }
    res["properties"] = rows;
    res["passed"] = suite.all_passed();
    out.tables.push_back(std::move(t));
    out.report = std::move(res);
    out.exit_code = suite.all_passed() ? 0 : 3;
    return out;
}

inline RunOutput run_ladder(const ExperimentConfig& c, std::ostream& warn)
{
    if (!c.terminal_values.empty()) {
        detail::bad_field("terminal.values", "the ladder needs a terminal expression (leaf counts change with N)");
    }
    RunOutput out;
    json res;
    json rows = json::array();
    Table t{"ladder", {"N", "n_max", "penalized", "direct", "gap", "snell_penalized", "snell_direct", "snell_gap"}, {}};
    std::vector<double> gaps;
    std::vector<double> snell_gaps;
    double last_relative = 0.0;
    double sup_terminal = 0.0;
    bool direct_available = true;
    for (std::size_t k = 0; k < c.ladder_steps.size(); ++k) {
        TreeConfig tc = c.tree;
        tc.steps = c.ladder_steps[k];
        auto p = detail::make_problem(c, tc);
        if (k == 0) res["structure"] = detail::screen(p, warn);
        const auto caps = stability_caps(p.g, p.phi, p.tree, c.solver);
        const double n = caps.bounded() ? caps.n_max() : 0.0;
        const auto terminal = detail::terminal_for(c, p.tree);
        const auto pen = gamma_expectation(p.g, p.phi, terminal, p.tree,
                                           PenaltySchedule::explicit_levels({n}, caps, c.penalty_tolerance), c.solver);
        json row{{"N", tc.steps}, {"n_max", finite_or_null(caps.n_max())}, {"penalized", pen.y[0]}};
        std::vector<std::string> cells{std::to_string(tc.steps), num(caps.n_max()), num(pen.y[0])};
        direct_available = !p.phi.references_y();
        GeneratorStep pen_op(p.tree, p.g, p.phi, n, c.solver);
        const auto x = realize_reward(p.reward, p.tree).values;
        const double snell_pen = snell_envelope(p.tree, pen_op, x).value[0];
        if (direct_available) {
            const auto dir = gamma_expectation_direct(p.g, p.phi, terminal, p.tree, c.solver);
            double sup = 0.0;
            for (double v : terminal) sup = std::max(sup, std::fabs(v));
            sup_terminal = std::max(sup_terminal, sup);
            const double gap = std::fabs(pen.y[0] - dir.y[0]);
            last_relative = sup > 0 ? gap / sup : gap;
            gaps.push_back(gap);
            DirectStep dir_op(p.tree, p.g, p.phi, c.solver);
            const double snell_dir = snell_envelope(p.tree, dir_op, x).value[0];
            snell_gaps.push_back(std::fabs(snell_pen - snell_dir));
            row["direct"] = dir.y[0];
            row["gap"] = gap;
            row["relative_gap"] = last_relative;
            row["snell_penalized"] = snell_pen;
            row["snell_direct"] = snell_dir;
            row["snell_gap"] = snell_gaps.back();
            cells.insert(cells.end(), {num(dir.y[0]), num(gap), num(snell_pen), num(snell_dir), num(snell_gaps.back())});
        } else {
            row["snell_penalized"] = snell_pen;
            cells.insert(cells.end(), {"", "", num(snell_pen), "", ""});
        }
        rows.push_back(std::move(row));
        t.add(std::move(cells));
    }
    res["rows"] = rows;
    if (direct_available) {
        res["gap_shrinking"] = gaps_shrinking(gaps, ladder_roundoff * (1.0 + sup_terminal));
        res["final_gap"] = gaps.back();
        res["final_relative_gap"] = last_relative;
        res["final_snell_gap"] = snell_gaps.back();
    } else {
        res["direct"] = "unavailable: the constraint depends on y";
    }
    out.tables.push_back(std::move(t));
    out.report = std::move(res);
    return out;
}

/// Exit code for a library error: 1 for input problems, 2 for numerical failures.
inline int exit_code_for(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::solver:
    case ErrorKind::stability:
    case ErrorKind::infeasible_constraint:
    case ErrorKind::evaluation: return 2;
    default: return 1;
    }
}

struct RunRequest {
    Command command = Command::expectation;
    std::string config_path;
    std::vector<std::string> overrides;
    std::string output_dir; ///< overrides output.dir and the environment
};

inline json load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::configuration, "cannot read config file '" + path + "'");
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorKind::configuration, "config file '" + path + "' is not valid JSON");
    return doc;
}

inline std::filesystem::path resolve_output_dir(const RunRequest& req, const ExperimentConfig& c)
{
    if (!req.output_dir.empty()) return req.output_dir;
    if (!c.output_dir.empty()) return c.output_dir;
    if (const char* env = std::getenv(output_dir_variable); env && *env) return env;
    return ".";
}

inline RunOutput execute(Command command, const ExperimentConfig& c, std::ostream& warn)
{
    RunOutput out;
    switch (command) {
    case Command::expectation: out = run_expectation(c, warn); break;
    case Command::stop: out = run_stop(c, warn); break;
    case Command::oracle: out = run_oracle(c, warn); break;
    case Command::verify: out = run_verify(c, warn); break;
    case Command::ladder: out = run_ladder(c, warn); break;
    }
    json report;
    report["schema"] = report_schema;
    report["command"] = to_string(command);
    report["config"] = echo_config(c);
    report["results"] = std::move(out.report);
    report["exit_code"] = out.exit_code;
    out.report = std::move(report);
    return out;
}

inline void write_file(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::configuration, "cannot write '" + path.string() + "'");
    f << text;
}

/// Full run: load, override, execute, write. Errors are reported on `err`.
inline int run(const RunRequest& req, std::ostream& log, std::ostream& err)
{
    try {
        const auto started = std::chrono::steady_clock::now();
        json doc = load_config(req.config_path);
        for (const auto& o : req.overrides) apply_override(doc, o);
        if (doc.contains("command")) {
            if (!doc["command"].is_string() || parse_command(doc["command"].get<std::string>()) != req.command) {
                detail::bad_field("command", "does not match the requested command '" +
                                                 std::string(to_string(req.command)) + "'");
            }
        }
        const auto cfg = parse_config(doc);
        const auto dir = resolve_output_dir(req, cfg);
        auto out = execute(req.command, cfg, err);
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw Error(ErrorKind::configuration, "cannot create output directory '" + dir.string() + "'");
        const auto base = dir / cfg.output_prefix;
        write_file(base.string() + ".json", out.report.dump(2) + "\n");
        for (const auto& t : out.tables) write_file(base.string() + "_" + t.name + ".csv", t.render());
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        write_file(base.string() + "_timing.json", json{{"seconds", secs}}.dump() + "\n");
        log << to_string(req.command) << ": wrote " << base.string() << ".json";
        if (out.exit_code == 3) log << " (property failures)";
        log << "\n";
        return out.exit_code;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace gstop::cli
