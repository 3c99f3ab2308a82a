#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "gstop/method.hpp"
#include "gstop/properties.hpp"

using namespace gstop;

namespace {

FunctionSpec gen(const std::string& s) { return parse(s, Signature::generator); }
PathTree path(int n, double t) { return build_tree({n, t, TreeMode::path_tree}); }

const PropertyRow& row(const PropertyReport& r, const std::string& name)
{
    const auto it = std::find_if(r.rows.begin(), r.rows.end(), [&](const auto& x) { return x.name == name; });
    if (it == r.rows.end()) throw std::runtime_error("missing row " + name);
    return *it;
}

// Not monotone: y = max(y_up, y_down) - |y_up - y_down|^2 punishes spread.
struct SpreadPenalty {
    StepResult step(NodeId, int, double up, double down) const
    {
        return {std::max(up, down) - (up - down) * (up - down), 0.0, 0.0, 0.0, 0};
    }
};

// Shifts by a constant: fails self-preservation and the 1-0 law.
struct Shift {
    StepResult step(NodeId, int, double up, double down) const { return {0.5 * (up + down) + 0.1, 0.0, 0.0, 0.0, 0}; }
};

} // namespace

TEST(PropertySuite, ClassicalExpectationPassesEverything)
{
    const auto tree = path(4, 1.0);
    const auto rep = property_suite(gen("0"), gen("0"), tree, Method::direct, 1.0, 200, 1, 1e-10);
    ASSERT_EQ(rep.rows.size(), 6u);
    const char* names[] = {"comparison", "convexity", "continuity_from_below", "self_preserving", "time_consistency",
                           "zero_one_law"};
    for (int k = 0; k < 6; ++k) {
        EXPECT_EQ(rep.rows[k].name, names[k]);
        EXPECT_TRUE(rep.rows[k].skipped.empty()) << names[k];
        EXPECT_EQ(rep.rows[k].trials, 200) << names[k];
        EXPECT_TRUE(rep.rows[k].passed()) << names[k] << " worst " << rep.rows[k].worst;
    }
    EXPECT_TRUE(rep.all_passed());
    EXPECT_EQ(rep.failures(), 0u);
}

TEST(PropertySuite, CatalogPassesDirectAndPenalized)
{
    const auto tree = path(4, 1.0);
    for (const auto& ge : generator_catalog()) {
        for (const auto& pe : constraint_catalog()) {
            const auto g = gen(ge.text);
            const auto phi = gen(pe.text);
            const auto direct = property_suite(g, phi, tree, Method::direct, 1.0, 40, 3, 1e-9);
            EXPECT_TRUE(direct.all_passed()) << ge.name << "/" << pe.name;
            const auto caps = stability_caps(g, phi, tree);
            const double level = caps.bounded() ? caps.n_max() : 4.0;
            const auto pen = property_suite(g, phi, tree, Method::penalized, level, 40, 3, 1e-7);
            EXPECT_TRUE(pen.all_passed()) << ge.name << "/" << pe.name;
        }
    }
}

TEST(PropertySuite, SkipReasonsForLinearInY)
{
    const auto tree = path(3, 1.0);
    const auto rep = property_suite(gen("0.5*y"), gen("abs(z)"), tree, Method::direct, 1.0, 20, 1, 1e-9);
    EXPECT_FALSE(row(rep, "self_preserving").skipped.empty());
    EXPECT_EQ(row(rep, "self_preserving").trials, 0);
    EXPECT_TRUE(row(rep, "zero_one_law").skipped.empty());
    EXPECT_TRUE(row(rep, "convexity").skipped.empty());
}

TEST(PropertySuite, SkipReasonsForAffineGenerator)
{
    const auto a = PropertyApplicability::of(gen("1 + 0.5*abs(z)"), gen("0"), path(2, 1.0));
    EXPECT_FALSE(a.self_preserving.empty());
    EXPECT_FALSE(a.zero_one_law.empty());
    EXPECT_TRUE(a.convexity.empty());
    EXPECT_FALSE(PropertyApplicability::of(gen("-abs(z)"), gen("0"), path(2, 1.0)).convexity.empty());
}

TEST(PropertySuite, DeterministicForFixedSeed)
{
    const auto tree = path(4, 1.0);
    const auto a = property_suite(gen("0.5*abs(z)"), gen("neg(z)"), tree, Method::direct, 1.0, 30, 9, 1e-9);
    const auto b = property_suite(gen("0.5*abs(z)"), gen("neg(z)"), tree, Method::direct, 1.0, 30, 9, 1e-9);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (std::size_t k = 0; k < a.rows.size(); ++k) EXPECT_EQ(a.rows[k].worst, b.rows[k].worst);
}

TEST(PropertySuite, ZeroOneLawExactForDirectMethod)
{
    const auto tree = path(4, 1.0);
    const auto rep = property_suite(gen("0.5*abs(z)"), gen("abs(z)"), tree, Method::direct, 1.0, 100, 5, 1e-15);
    EXPECT_TRUE(row(rep, "zero_one_law").passed()) << row(rep, "zero_one_law").worst;
}

TEST(PropertySuite, DetectsNonMonotoneOperator)
{
    const auto tree = path(3, 1.0);
    const auto rep = property_suite(tree, SpreadPenalty{}, PropertyApplicability{}, 50, 1, 1e-9);
    EXPECT_FALSE(row(rep, "comparison").passed());
    EXPECT_FALSE(rep.all_passed());
}

TEST(PropertySuite, DetectsShiftedOperator)
{
    const auto tree = path(3, 1.0);
    const auto rep = property_suite(tree, Shift{}, PropertyApplicability{}, 20, 1, 1e-9);
    EXPECT_FALSE(row(rep, "self_preserving").passed());
    EXPECT_FALSE(row(rep, "zero_one_law").passed());
    EXPECT_TRUE(row(rep, "comparison").passed());
}

TEST(PropertySuite, RejectsBadArguments)
{
    const auto tree = path(2, 1.0);
    EXPECT_THROW(property_suite(gen("0"), gen("0"), tree, Method::direct, 1.0, 0, 1, 1e-9), Error);
    EXPECT_THROW(property_suite(gen("0"), gen("0"), tree, Method::direct, 1.0, 5, 1, 0.0), Error);
    EXPECT_THROW(property_suite(gen("0"), gen("0"), build_tree({2, 1.0, TreeMode::recombining}), Method::direct, 1.0,
                                5, 1, 1e-9),
                 Error);
}
