#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "gstop/method.hpp"
#include "gstop/stopping.hpp"

using namespace gstop;

namespace {

FunctionSpec gen(const std::string& s) { return parse(s, Signature::generator); }
PathTree path(int n, double t) { return build_tree({n, t, TreeMode::path_tree}); }

AdaptedProcess reward(const std::string& text, const PathTree& tree)
{
    return realize_reward(parse(text, Signature::reward), tree).values;
}

AdaptedProcess random_reward(const PathTree& tree, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(0.0, 2.0);
    AdaptedProcess x(tree);
    for (NodeId n = 0; n < tree.size(); ++n) x[n] = u(rng);
    return x;
}

ErrorKind kind_of(auto&& f)
{
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error";
    return ErrorKind::configuration;
}

std::vector<NodeId> stop_nodes(const StoppingRule& r)
{
    std::vector<NodeId> out;
    for (NodeId n = 0; n < r.size(); ++n) {
        if (r.stops_at(n)) out.push_back(n);
    }
    return out;
}

// Running example: g = 0, phi = 0, X = |w|, N = 2, T = 2.
struct Running {
    PathTree tree = path(2, 2.0);
    AdaptedProcess x = reward("abs(w)", tree);
    GeneratorStep op{tree, gen("0")};
};

} // namespace

TEST(SnellEnvelope, RunningExample)
{
    Running r;
    const auto env = snell_envelope(r.tree, r.op, r.x);
    EXPECT_DOUBLE_EQ(env.value[0], 1.0);
    EXPECT_DOUBLE_EQ(env.value[1], 1.0);
    EXPECT_DOUBLE_EQ(env.value[2], 1.0);
    EXPECT_DOUBLE_EQ(env.continuation[0], 1.0);
    for (NodeId n = 3; n < 7; ++n) EXPECT_EQ(env.value[n], r.x[n]);
}

TEST(SnellEnvelope, ConstantRewardIsItsOwnValue)
{
    const auto tree = path(4, 1.0);
    const AdaptedProcess x(tree, 1.5);
    for (const char* g : {"0", "0.5*abs(z)"}) {
        for (const char* phi : {"0", "abs(z)", "neg(z)"}) {
            for (Method m : {Method::penalized, Method::direct}) {
                const auto op = make_step(gen(g), gen(phi), tree, m, 1.0);
                const auto env = snell_envelope(tree, op, x);
                for (NodeId n = 0; n < tree.size(); ++n) EXPECT_EQ(env.value[n], 1.5) << g << "/" << phi;
                EXPECT_EQ(stop_nodes(tau_star(tree, x, env.value)), std::vector<NodeId>{0});
            }
        }
    }
}

TEST(SnellEnvelope, PathwiseMaxConstraintGivesRunningMaximum)
{
    const auto tree = path(2, 2.0);
    const auto x = reward("abs(w)", tree);
    const DirectStep op(tree, gen("0"), gen("abs(z)"));
    EXPECT_DOUBLE_EQ(snell_envelope(tree, op, x).value[0], 2.0);
}

TEST(SnellEnvelope, DominanceAndLeafPinning)
{
    std::mt19937_64 rng(1);
    const auto tree = path(5, 1.0);
    for (const auto& ge : generator_catalog()) {
        for (const auto& pe : constraint_catalog()) {
            const auto op = make_step(gen(ge.text), gen(pe.text), tree, Method::coupled_limit);
            const auto x = random_reward(tree, rng);
            const auto env = snell_envelope(tree, op, x);
            for (NodeId n = 0; n < tree.size(); ++n) {
                EXPECT_GE(env.value[n], x[n]);
                if (tree.is_leaf(n)) EXPECT_EQ(env.value[n], x[n]);
            }
        }
    }
}

TEST(Enumerate, Counts)
{
    EXPECT_EQ(enumerate_stopping_rules(path(1, 1.0)).size(), 2u);
    EXPECT_EQ(enumerate_stopping_rules(path(2, 1.0)).size(), 5u);
    EXPECT_EQ(enumerate_stopping_rules(path(3, 1.0)).size(), 26u);
    EXPECT_EQ(enumerate_stopping_rules(path(4, 1.0)).size(), 677u);
    EXPECT_EQ(stopping_rule_count(5), 458330u);
}

TEST(Enumerate, CapacityError)
{
    EXPECT_EQ(kind_of([] { (void)enumerate_stopping_rules(path(6, 1.0)); }), ErrorKind::capacity);
    const auto tree = path(6, 1.0);
    EXPECT_EQ(kind_of([&] { (void)brute_force_optimum(tree, GeneratorStep(tree, gen("0")), AdaptedProcess(tree)); }),
              ErrorKind::capacity);
}

TEST(Enumerate, MatchesCanonicalisedFlagSubsets)
{
    // independent route: every subset of non-leaf flags, canonicalised, deduplicated
    for (int n : {1, 2, 3}) {
        const auto tree = path(n, 1.0);
        const std::size_t inner = tree.level_begin(n);
        std::set<std::vector<std::uint8_t>> seen;
        for (std::uint64_t mask = 0; mask < (1ull << inner); ++mask) {
            std::vector<std::uint8_t> flags(tree.size(), 0);
            for (std::size_t i = 0; i < inner; ++i) flags[i] = (mask >> i) & 1u;
            const StoppingRule r(tree, flags);
            seen.insert({r.flags().begin(), r.flags().end()});
        }
        const auto rules = enumerate_stopping_rules(tree);
        std::set<std::vector<std::uint8_t>> listed;
        for (const auto& r : rules) listed.insert({r.flags().begin(), r.flags().end()});
        EXPECT_EQ(listed.size(), rules.size()) << "duplicates at N=" << n;
        EXPECT_EQ(listed, seen);
    }
}

TEST(Enumerate, OrderAndDecoding)
{
    const auto tree = path(3, 1.0);
    const auto rules = enumerate_stopping_rules(tree);
    EXPECT_EQ(rules.front(), StoppingRule::at_root(tree));
    EXPECT_EQ(rules[1], StoppingRule::at_level(tree, 1));
    for (std::size_t k = 0; k < rules.size(); ++k) EXPECT_EQ(stopping_rule_at(tree, k), rules[k]) << k;
    EXPECT_EQ(enumerate_stopping_rules(tree), rules);
}

TEST(BruteForce, RunningExample)
{
    Running r;
    const auto bf = brute_force_optimum(r.tree, r.op, r.x);
    EXPECT_DOUBLE_EQ(bf.value, 1.0);
    EXPECT_EQ(bf.argmax, 1u);
    EXPECT_EQ(bf.rule, StoppingRule::at_level(r.tree, 1));
    ASSERT_EQ(bf.values.size(), 5u);
    const double expected[] = {0, 1, 1, 1, 1};
    for (int k = 0; k < 5; ++k) EXPECT_DOUBLE_EQ(bf.values[k], expected[k]);
}

TEST(BruteForce, ConstantRewardTiesBreakToRoot)
{
    const auto tree = path(3, 1.0);
    const auto bf = brute_force_optimum(tree, DirectStep(tree, gen("0.5*abs(z)"), gen("neg(z)")), AdaptedProcess(tree, 2.0));
    EXPECT_EQ(bf.value, 2.0);
    EXPECT_EQ(bf.argmax, 0u);
}

TEST(BruteForce, ValuesMatchPerRuleEvaluation)
{
    std::mt19937_64 rng(2);
    for (int n : {2, 3}) {
        const auto tree = path(n, 1.0);
        const auto rules = enumerate_stopping_rules(tree);
        for (const auto& ge : generator_catalog()) {
            for (const auto& pe : constraint_catalog()) {
                const auto op = make_step(gen(ge.text), gen(pe.text), tree, Method::direct);
                const auto x = random_reward(tree, rng);
                const auto bf = brute_force_optimum(tree, op, x);
                for (std::size_t k = 0; k < rules.size(); ++k) {
                    EXPECT_NEAR(bf.values[k], evaluate_rule(tree, op, x, rules[k])[0], 1e-14);
                }
            }
        }
    }
}

TEST(BruteForce, AgreesWithDynamicProgramming)
{
    std::mt19937_64 rng(3);
    for (int n : {1, 2, 3}) {
        const auto tree = path(n, 1.0);
        for (const auto& ge : generator_catalog()) {
            for (const auto& pe : constraint_catalog()) {
                for (Method m : {Method::coupled_limit, Method::direct}) {
                    const auto op = make_step(gen(ge.text), gen(pe.text), tree, m);
                    for (int k = 0; k < 5; ++k) {
                        const auto x = random_reward(tree, rng);
                        EXPECT_NEAR(snell_envelope(tree, op, x).value[0], brute_force_optimum(tree, op, x).value, 1e-9);
                    }
                }
            }
        }
    }
}

TEST(LambdaRule, RunningExample)
{
    Running r;
    const auto v = snell_envelope(r.tree, r.op, r.x).value;
    EXPECT_EQ(lambda_rule(r.tree, r.x, v, 0.9), StoppingRule::at_level(r.tree, 1));
    const AdaptedProcess c(r.tree, 3.0);
    EXPECT_EQ(lambda_rule(r.tree, c, c, 0.5), StoppingRule::at_root(r.tree));
    EXPECT_EQ(kind_of([&] { (void)lambda_rule(r.tree, r.x, v, 1.0); }), ErrorKind::domain);
    EXPECT_EQ(kind_of([&] { (void)lambda_rule(r.tree, r.x, v, 0.0); }), ErrorKind::domain);
}

TEST(TauStar, Examples)
{
    Running r;
    const auto v = snell_envelope(r.tree, r.op, r.x).value;
    EXPECT_EQ(tau_star(r.tree, r.x, v), StoppingRule::at_level(r.tree, 1));
    const AdaptedProcess c(r.tree, 3.0);
    EXPECT_EQ(tau_star(r.tree, c, c), StoppingRule::at_root(r.tree));
    // X strictly below V above the leaves: tau* falls back to the leaves
    const AdaptedProcess x({0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0});
    const auto vx = snell_envelope(r.tree, r.op, x).value;
    EXPECT_EQ(tau_star(r.tree, x, vx, 0.0), StoppingRule::at_level(r.tree, 2));
}

TEST(TauBar, RunningExample)
{
    Running r;
    const auto v = snell_envelope(r.tree, r.op, r.x).value;
    const auto tb = tau_bar(r.tree, r.x, v, default_lambda_schedule());
    EXPECT_EQ(tb.rule, StoppingRule::at_level(r.tree, 1));
    EXPECT_EQ(tb.stabilization + 1, 1u);
    EXPECT_TRUE(tb.stabilized);
    EXPECT_TRUE(tb.monotone);
    EXPECT_TRUE(tb.dominated_by_tau_star);
    EXPECT_TRUE(stops_no_later(lambda_rule(r.tree, r.x, v, 0.5), lambda_rule(r.tree, r.x, v, 0.9)));
}

TEST(TauBar, ConstantAndScheduleChecks)
{
    const auto tree = path(3, 1.0);
    const AdaptedProcess c(tree, 1.0);
    EXPECT_EQ(tau_bar(tree, c, c, {0.5, 0.75}).rule, StoppingRule::at_root(tree));
    EXPECT_EQ(kind_of([&] { (void)tau_bar(tree, c, c, {}); }), ErrorKind::configuration);
    EXPECT_EQ(kind_of([&] { (void)tau_bar(tree, c, c, {0.9, 0.5}); }), ErrorKind::configuration);
    EXPECT_EQ(kind_of([&] { (void)tau_bar(tree, c, c, {0.5, 1.5}); }), ErrorKind::domain);
    EXPECT_FALSE(tau_bar(tree, c, c, {0.5}).stabilized);
}

TEST(TauBar, StabilizationIndexIsLastChange)
{
    // V = 1 at the root and X = 0.8: the rule switches off the root once lambda > 0.8
    const auto tree = path(1, 1.0);
    const AdaptedProcess x({0.8, 1.0, 1.0});
    const AdaptedProcess v({1.0, 1.0, 1.0});
    const auto tb = tau_bar(tree, x, v, {0.5, 0.75, 0.875, 0.9375});
    EXPECT_EQ(tb.stabilization, 2u);
    EXPECT_EQ(tb.rule, StoppingRule::at_level(tree, 1));
    EXPECT_TRUE(tb.monotone);
}

TEST(ValueIdentity, Examples)
{
    Running r;
    const auto v = snell_envelope(r.tree, r.op, r.x).value;
    EXPECT_LE(verify_value_identity(r.tree, r.op, r.x, v, 0.9), 1e-9);
    const AdaptedProcess c(r.tree, 2.0);
    EXPECT_EQ(verify_value_identity(r.tree, r.op, c, c, 0.9), 0.0);
    const DirectStep d(r.tree, gen("0"), gen("abs(z)"));
    const auto vd = snell_envelope(r.tree, d, r.x).value;
    EXPECT_LE(verify_value_identity(r.tree, d, r.x, vd, 0.9), 1e-9);
}

TEST(ValueIdentity, RandomRewardsAcrossCatalog)
{
    std::mt19937_64 rng(4);
    const auto tree = path(4, 1.0);
    for (const auto& ge : generator_catalog()) {
        for (const auto& pe : constraint_catalog()) {
            const auto op = make_step(gen(ge.text), gen(pe.text), tree, Method::direct);
            const auto x = random_reward(tree, rng);
            const auto v = snell_envelope(tree, op, x).value;
            for (double l : {0.5, 0.9, 0.99}) EXPECT_LE(verify_value_identity(tree, op, x, v, l), 1e-8);
        }
    }
}

TEST(Supermartingale, Examples)
{
    Running r;
    const auto v = snell_envelope(r.tree, r.op, r.x).value;
    EXPECT_TRUE(supermartingale_check(r.tree, r.op, v).supermartingale());
    const auto bad = supermartingale_check(r.tree, r.op, r.x);
    EXPECT_FALSE(bad.supermartingale());
    EXPECT_EQ(bad.worst_node, 0u);
    EXPECT_DOUBLE_EQ(bad.worst_excess, 1.0);
    const auto tree = path(3, 1.0);
    for (const char* g : {"0", "0.5*abs(z)"}) {
        for (const auto& pe : constraint_catalog()) {
            const auto op = make_step(gen(g), gen(pe.text), tree, Method::direct);
            EXPECT_TRUE(supermartingale_check(tree, op, AdaptedProcess(tree, 0.7)).martingale());
        }
    }
}

TEST(Minimality, Examples)
{
    Running r;
    const auto v = snell_envelope(r.tree, r.op, r.x).value;
    AdaptedProcess shifted = v;
    for (NodeId n = 0; n < r.tree.size(); ++n) shifted[n] += 0.5;
    const auto rep = minimality_check(r.tree, r.op, r.x, v,
                                      {{"sup", AdaptedProcess(r.tree, 2.0)}, {"shift", shifted}, {"reward", r.x}});
    ASSERT_EQ(rep.outcomes.size(), 3u);
    EXPECT_TRUE(rep.outcomes[0].accepted);
    EXPECT_TRUE(rep.outcomes[0].passed);
    EXPECT_TRUE(rep.outcomes[1].accepted);
    EXPECT_TRUE(rep.outcomes[1].passed);
    EXPECT_FALSE(rep.outcomes[2].accepted);
    EXPECT_NE(rep.outcomes[2].reason.find("supermartingale"), std::string::npos);
    EXPECT_EQ(rep.accepted(), 2u);
    EXPECT_TRUE(rep.all_passed());
}

TEST(Minimality, NonDominatingCandidateRejected)
{
    Running r;
    const auto v = snell_envelope(r.tree, r.op, r.x).value;
    const auto rep = minimality_check(r.tree, r.op, r.x, v, {{"zero", AdaptedProcess(r.tree, 0.0)}});
    EXPECT_FALSE(rep.outcomes[0].accepted);
    EXPECT_NE(rep.outcomes[0].reason.find("dominate"), std::string::npos);
}

TEST(StopperController, ZeroConstraintGivesIdenticalLevels)
{
    Running r;
    StabilityCaps caps;
    const auto sc = stopper_controller_value(r.tree, gen("0"), gen("0"), r.x,
                                             PenaltySchedule::explicit_levels({1, 2, 4}, caps), 1.0);
    EXPECT_EQ(sc.root_values, (std::vector<double>{1, 1, 1}));
    EXPECT_TRUE(sc.nondecreasing);
    EXPECT_EQ(sc.gap_to_reference, 0.0);
}

TEST(StopperController, NondecreasingUnderCaps)
{
    // dt = 1/16 puts levels 1, 2, 4 under the monotone cap 1/sqrt(dt) = 4
    const auto tree = path(4, 0.25);
    const auto x = reward("abs(w)", tree);
    const auto g = gen("0");
    const auto phi = gen("neg(z)");
    const auto caps = stability_caps(g, phi, tree);
    ASSERT_NEAR(caps.n_max(), 4.0, 1e-12);
    const DirectStep d(tree, g, phi);
    const double v0 = snell_envelope(tree, d, x).value[0];
    const auto sc = stopper_controller_value(tree, g, phi, x, PenaltySchedule::explicit_levels({1, 2, 4}, caps), v0);
    EXPECT_TRUE(sc.nondecreasing);
    EXPECT_LT(sc.root_values[0], sc.root_values[2]);
    EXPECT_LE(sc.gap_to_reference, 1e-9);
}

TEST(LambdaSandwich, HomogeneousPairs)
{
    std::mt19937_64 rng(5);
    const auto tree = path(4, 1.0);
    for (const char* g : {"0", "0.5*abs(z)"}) {
        for (const char* phi : {"abs(z)", "neg(z)"}) {
            const auto op = make_step(gen(g), gen(phi), tree, Method::direct);
            for (int k = 0; k < 10; ++k) {
                const auto x = random_reward(tree, rng);
                const auto v = snell_envelope(tree, op, x).value;
                for (double l : default_lambda_schedule()) {
                    EXPECT_LE(evaluate_rule(tree, op, x, lambda_rule(tree, x, v, l))[0], v[0] + 1e-9);
                }
                const auto tb = tau_bar(tree, x, v, default_lambda_schedule());
                EXPECT_NEAR(evaluate_rule(tree, op, x, tb.rule)[0], v[0], 1e-8);
                EXPECT_TRUE(tb.stabilized);
            }
        }
    }
}

TEST(StoppedProcess, FreezesAfterStop)
{
    Running r;
    const auto rule = StoppingRule::at_level(r.tree, 1);
    const auto s = stopped_process(r.tree, r.x, rule);
    EXPECT_EQ(s[3], r.x[1]);
    EXPECT_EQ(s[6], r.x[2]);
    EXPECT_EQ(s[0], r.x[0]);
}
