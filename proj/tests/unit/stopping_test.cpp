#include "rabsde/stopping.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace rabsde;

namespace {

Scenario make(int n, double lambda, const char* f, const char* s, const char* xi, int delta = 0) {
    Scenario sc;
    sc.steps = n;
    sc.intensity = IntensitySpec::constant(lambda, n);
    sc.delta_steps = delta;
    sc.driver = TransformedDriver(DriverExpr::parse(f), DriverForm::m_form);
    sc.obstacle = DriverExpr::parse(s);
    sc.terminal = DriverExpr::parse(xi);
    return sc;
}

const NodeId kRoot{0, 0, kAlive};

// Payoff of a rule by explicit path enumeration, independent of the backward sweep.
double path_sum(const StoppingRule& rule, const Solution& sol, const Scenario& sc) {
    DefaultLattice lat = sc.lattice();
    int n = lat.n_steps();
    double total = 0.0;
    auto walk = [&](auto&& self, int k, std::size_t idx, double prob, double running) -> void {
        NodeId node = DefaultLattice::node(k, idx);
        if (k == n) {
            total += prob * (running + terminal_at(sc, lat, node));
            return;
        }
        if (rule.stops(k, idx)) {
            total += prob * (running + obstacle_at(sc, lat, node));
            return;
        }
        double r = running + sol.drift(k, idx) * lat.dt();
        for (const auto& e : lat.transitions(k, idx))
            if (e.prob > 0.0) self(self, k + 1, e.child, prob * e.prob, r);
    };
    walk(walk, 0, 0, 1.0, 0.0);
    return total;
}

}  // namespace

TEST(StoppingPayoff, StopAtRoot) {
    Scenario sc = make(3, 0.4, "0.1*y", "0.3 + 0.2*w", "max(w, 0.3 + 0.2*w)");
    Solution sol = solve_backward(sc);
    StoppingRule all(sc.lattice(), true);
    EXPECT_DOUBLE_EQ(stopping_payoff(all, sol, sc, kRoot), 0.3);
}

TEST(StoppingPayoff, NeverStopZeroDriver) {
    Scenario sc = make(4, 0.5, "0", "-1e9", "w*w + h");
    DefaultLattice lat = sc.lattice();
    Solution sol = solve_backward(sc);
    StoppingRule never(lat);
    ProcessField xi = ProcessField::from(lat, [&](const NodeId& n) { return terminal_at(sc, lat, n); });
    for (NodeId from : {kRoot, NodeId{2, 1, kAlive}, NodeId{3, 2, 1}})
        EXPECT_NEAR(stopping_payoff(never, sol, sc, from), cond_expect(lat, xi, 4, from), 1e-13);
}

TEST(StoppingPayoff, MixedRuleTwoSteps) {
    Scenario sc = make(2, 0.5, "0.2*y - 0.1*u + 0.3", "0.1*w + 0.2*h", "max(w, 0.1*w + 0.2*h)");
    DefaultLattice lat = sc.lattice();
    Solution sol = solve_backward(sc);
    StoppingRule rule(lat);
    rule.set(1, lat.index(NodeId{1, 1, kAlive}), true);
    rule.set(1, lat.index(NodeId{1, 0, 1}), true);
    double by_paths = path_sum(rule, sol, sc);
    EXPECT_NEAR(stopping_payoff(rule, sol, sc, kRoot), by_paths, 1e-14);
}

TEST(BruteForce, ObstacleNeverBinds) {
    Scenario sc = make(3, 0.4, "0.1*y + 0.2*z", "-1e9", "w + h");
    DefaultLattice lat = sc.lattice();
    Solution sol = solve_backward(sc);
    auto bf = brute_force_value(sol, sc, kRoot);
    StoppingRule never(lat);
    EXPECT_EQ(bf.best_rule, never);
    EXPECT_NEAR(bf.value, path_sum(never, sol, sc), 1e-12);
    EXPECT_NEAR(bf.value, sol.Y(0, 0), 1e-10);
    EXPECT_EQ(bf.decision_nodes, 14u);
    EXPECT_EQ(bf.rules_enumerated, std::uint64_t{1} << 14);
}

TEST(BruteForce, StopsAtRootWhenObstacleDominates) {
    Scenario sc = make(3, 0.4, "0", "10 - 20*t", "w");
    Solution sol = solve_backward(sc);
    auto bf = brute_force_value(sol, sc, kRoot);
    EXPECT_DOUBLE_EQ(bf.value, 10.0);
    EXPECT_TRUE(bf.best_rule.stops(0, 0));
    EXPECT_DOUBLE_EQ(sol.Y(0, 0), 10.0);
}

TEST(BruteForce, MatchesSnellValue) {
    Scenario sc = make(3, 0.4, "0.1*y", "max(0.2 - 0.3*w, 0) + 0.05*h", "max(0.2 - 0.3*w, 0) + 0.05*h");
    Solution sol = solve_backward(sc);
    auto bf = brute_force_value(sol, sc, kRoot);
    EXPECT_NEAR(bf.value, sol.Y(0, 0), 1e-10);
    // from an interior node too
    DefaultLattice lat = sc.lattice();
    NodeId mid{1, 0, 1};
    EXPECT_NEAR(brute_force_value(sol, sc, mid).value, sol.Y(1, lat.index(mid)), 1e-10);
}

TEST(BruteForce, NoRuleBeatsSnell) {
    Scenario sc = make(3, 0.6, "0.2*y - 0.3*u + 0.1*ey", "0.3 - 0.2*w - 0.2*h", "max(w, 0.3 - 0.2*w - 0.2*h)", 1);
    DefaultLattice lat = sc.lattice();
    Solution sol = solve_backward(sc);
    std::mt19937_64 rng(5);
    for (int r = 0; r < 300; ++r) {
        StoppingRule rule(lat);
        for (int k = 0; k < 3; ++k)
            for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) rule.set(k, i, rng() % 2);
        EXPECT_LE(stopping_payoff(rule, sol, sc, kRoot), sol.Y(0, 0) + 1e-12);
    }
}

TEST(BruteForce, EnumerationLimit) {
    Scenario sc = make(4, 0.4, "0", "-1e9", "w");
    Solution sol = solve_backward(sc);
    EXPECT_THROW(brute_force_value(sol, sc, kRoot), EnumerationLimit);
    Scenario no_default = make(5, 0.0, "0", "-1e9", "w");
    Solution s2 = solve_backward(no_default);
    EXPECT_EQ(brute_force_value(s2, no_default, kRoot).decision_nodes, 15u);
}

TEST(OptimalTau, NeverStopsWithoutObstacle) {
    Scenario sc = make(4, 0.3, "0.1*y", "-1e9", "w");
    Solution sol = solve_backward(sc);
    TauReport rep = optimal_tau(sol, sc, 0);
    StoppingRule never(sc.lattice());
    EXPECT_EQ(rep.first_hit, never);
    EXPECT_EQ(rep.k_increase, never);
    EXPECT_TRUE(rep.coincide());
}

TEST(OptimalTau, StopsImmediatelyWhenYEqualsS) {
    Scenario sc = make(3, 0.3, "0", "10 - 20*t", "w");
    Solution sol = solve_backward(sc);
    TauReport rep = optimal_tau(sol, sc, 0);
    EXPECT_TRUE(rep.first_hit.stops(0, 0));
    EXPECT_TRUE(rep.k_increase.stops(0, 0));
    EXPECT_DOUBLE_EQ(stopping_payoff(rep.first_hit, sol, sc, kRoot), 10.0);
}

TEST(OptimalTau, RulesCoincideAndAreOptimal) {
    Scenario sc = make(6, 0.5, "-0.05*y + 0.1*z", "max(0.3 - 0.5*w, 0) + 0.1*h", "max(0.3 - 0.5*w, 0) + 0.1*h");
    Solution sol = solve_backward(sc);
    TauReport rep = optimal_tau(sol, sc, 0);
    EXPECT_TRUE(rep.coincide());
    EXPECT_NEAR(stopping_payoff(rep.first_hit, sol, sc, kRoot), sol.Y(0, 0), 1e-10);
    EXPECT_NEAR(stopping_payoff(rep.k_increase, sol, sc, kRoot), sol.Y(0, 0), 1e-10);
    bool binds = false;
    for (int k = 1; k < 6; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) binds = binds || sol.dK(k, i) > 0.0;
    EXPECT_TRUE(binds);
}

TEST(RunningMax, ZeroKGivesZeroGap) {
    Scenario sc = make(5, 0.4, "0.1*y + 0.2*z - 0.2*u", "-1e9", "w + h");
    Solution sol = solve_backward(sc);
    auto rep = k_running_max_check(sol, sc);
    EXPECT_LE(rep.gap, 1e-12);
    EXPECT_GT(rep.paths, 0u);
}

TEST(RunningMax, AmericanPut) {
    Scenario sc = make(4, 0.0, "-0.04*y", "max(1 - exp(w), 0)", "max(1 - exp(w), 0)");
    Solution sol = solve_backward(sc);
    auto rep = k_running_max_check(sol, sc);
    EXPECT_LE(rep.gap, 1e-10);
    EXPECT_EQ(rep.paths, 16u);
}

TEST(RunningMax, OneStepForcedReflection) {
    Scenario sc = make(1, 0.0, "0", "3 - 3*t", "max(w, 0)");
    DefaultLattice lat = sc.lattice();
    Solution sol = solve_backward(sc);
    // K_T - K_0- = dK_0 = 3 - E[xi] = 2.5, and (X_0 - S_0)^- with X_0 = xi + F dt - Z dW = 0.5
    EXPECT_DOUBLE_EQ(sol.dK(0, 0), 2.5);
    double x0 = sol.Y(1, 0) - sol.Z(0, 0) * (-lat.sqrt_dt());
    EXPECT_NEAR(std::max(-(x0 - 3.0), 0.0), 2.5, 1e-15);
    auto rep = k_running_max_check(sol, sc);
    EXPECT_LE(rep.gap, 1e-14);
}

TEST(RunningMax, WithDefaultAndAnticipation) {
    Scenario sc = make(7, 0.6, "0.1*y - 0.2*z + 0.3*u + 0.2*ey", "0.4 - 0.3*w - 0.2*h", "max(w, 0.4 - 0.3*w - 0.2*h)", 2);
    Solution sol = solve_backward(sc);
    auto rep = k_running_max_check(sol, sc);
    EXPECT_LE(rep.gap, 1e-10);
}
