#include "rabsde/lattice.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace rabsde;

namespace {

DefaultLattice make(double T, int n, double lambda) { return build_lattice(T, n, IntensitySpec::constant(lambda, n)); }

}  // namespace

TEST(Lattice, ZeroIntensityIsPlainBinomial) {
    auto lat = make(1.0, 1, 0.0);
    ASSERT_EQ(DefaultLattice::node_count(1), 4u);
    auto tr = lat.transitions(0, 0);
    double total = 0.0;
    for (const auto& e : tr) {
        NodeId child = DefaultLattice::node(1, e.child);
        if (e.prob > 0.0) {
            EXPECT_TRUE(child.alive());
            EXPECT_DOUBLE_EQ(e.prob, 0.5);
        }
        total += e.prob;
    }
    EXPECT_DOUBLE_EQ(total, 1.0);
    EXPECT_EQ(to_string(DefaultLattice::node(1, 0)), "(1,0,ALIVE)");
    EXPECT_EQ(to_string(DefaultLattice::node(1, 1)), "(1,1,ALIVE)");
}

TEST(Lattice, NodeCountAndJumpProbability) {
    auto lat = make(1.0, 2, 0.5);
    EXPECT_DOUBLE_EQ(lat.jump_prob(0), 0.25);
    EXPECT_DOUBLE_EQ(lat.jump_prob(1), 0.25);
    EXPECT_EQ(DefaultLattice::node_count(2), 9u);
    // enumerate the states reachable through the kernel
    std::vector<std::vector<char>> seen{{1}, std::vector<char>(4), std::vector<char>(9)};
    for (int k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < seen[static_cast<std::size_t>(k)].size(); ++i) {
            if (!seen[static_cast<std::size_t>(k)][i]) continue;
            for (const auto& e : lat.transitions(k, i))
                if (e.prob > 0.0) seen[static_cast<std::size_t>(k + 1)][e.child] = 1;
        }
    int reachable = 0;
    for (char c : seen[2]) reachable += c;
    EXPECT_EQ(reachable, 9);
    for (int k = 0; k <= 6; ++k) EXPECT_EQ(DefaultLattice::node_count(k), static_cast<std::size_t>((k + 1) * (k + 1)));
}

TEST(Lattice, RejectsJumpProbabilityAboveOne) {
    EXPECT_THROW(make(1.0, 4, 5.0), InvalidArgument);
    EXPECT_THROW(make(1.0, 4, -0.1), InvalidArgument);
    EXPECT_THROW(make(0.0, 4, 0.1), InvalidArgument);
    EXPECT_THROW(make(1.0, 0, 0.1), InvalidArgument);
    EXPECT_THROW(build_lattice(1.0, 3, IntensitySpec::piecewise({0.1, 0.2})), InvalidArgument);
}

TEST(Lattice, IndexRoundTrip) {
    auto lat = make(1.0, 5, 0.3);
    for (int k = 0; k <= 5; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            NodeId n = DefaultLattice::node(k, i);
            ASSERT_TRUE(lat.contains(n));
            EXPECT_EQ(lat.index(n), i);
        }
    EXPECT_FALSE(lat.contains(NodeId{2, 3, kAlive}));
    EXPECT_FALSE(lat.contains(NodeId{2, 0, 3}));
}

TEST(CondExpect, ZeroField) {
    auto lat = make(1.0, 3, 0.4);
    auto zero = ProcessField::over(lat);
    EXPECT_EQ(cond_expect(lat, zero, 3, NodeId{1, 1, kAlive}), 0.0);
}

TEST(CondExpect, BrownianMartingale) {
    auto lat = make(1.0, 4, 0.6);
    auto W = ProcessField::from(lat, [&](const NodeId& n) { return lat.w(n); });
    for (int k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            NodeId n = DefaultLattice::node(k, i);
            EXPECT_NEAR(cond_expect(lat, W, k + 1, n), lat.w(n), 1e-14);
        }
}

TEST(CondExpect, DefaultProbabilityTwoSteps) {
    auto lat = make(1.0, 2, 0.5);
    auto H = ProcessField::from(lat, [](const NodeId& n) { return DefaultLattice::h(n); });
    double hand = 1.0 - (1.0 - 0.25) * (1.0 - 0.25);
    EXPECT_DOUBLE_EQ(hand, 0.4375);
    EXPECT_NEAR(cond_expect(lat, H, 2, NodeId{0, 0, kAlive}), 0.4375, 1e-15);
}

TEST(CondExpect, TowerLinearityMonotonicity) {
    auto lat = build_lattice(1.0, 6, IntensitySpec::piecewise({0.2, 0.9, 0.1, 0.5, 0.0, 0.7}));
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g;
    std::vector<double> a(DefaultLattice::node_count(6)), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = g(rng);
        b[i] = a[i] + std::abs(g(rng));
    }
    ProcessField fa(6, 6), fb(6, 6), fc(6, 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        fa(6, i) = a[i];
        fb(6, i) = b[i];
        fc(6, i) = 2.0 * a[i] - 3.0 * b[i];
    }
    for (int k = 0; k < 6; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            NodeId n = DefaultLattice::node(k, i);
            double ea = cond_expect(lat, fa, 6, n), eb = cond_expect(lat, fb, 6, n);
            EXPECT_LE(ea, eb + 1e-15);
            EXPECT_NEAR(cond_expect(lat, fc, 6, n), 2.0 * ea - 3.0 * eb, 1e-12);
            // tower through an intermediate step
            for (int m = k + 1; m < 6; ++m) {
                auto mid = lat.expect_steps(6, a, m);
                ProcessField fm(m, m);
                for (std::size_t j = 0; j < mid.size(); ++j) fm(m, j) = mid[j];
                EXPECT_NEAR(cond_expect(lat, fm, m, n), ea, 1e-12);
            }
        }
}

TEST(MartingaleM, ValuesOnSmallLattice) {
    auto zero = make(1.0, 3, 0.0);
    auto M0 = martingale_M(zero);
    for (int k = 0; k <= 3; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i)
            if (DefaultLattice::node(k, i).alive()) EXPECT_EQ(M0(k, i), 0.0);

    auto lat = make(1.0, 2, 0.5);
    auto M = martingale_M(lat);
    EXPECT_DOUBLE_EQ(M.at(lat, NodeId{1, 0, kAlive}), -0.25);
    EXPECT_DOUBLE_EQ(M.at(lat, NodeId{1, 1, kAlive}), -0.25);
    EXPECT_DOUBLE_EQ(M.at(lat, NodeId{2, 1, 1}), 0.75);
    EXPECT_DOUBLE_EQ(M.at(lat, NodeId{2, 1, kAlive}), -0.5);
    EXPECT_DOUBLE_EQ(M.at(lat, NodeId{2, 1, 2}), 0.5);
}

TEST(Bracket, ZeroIntensityExact) {
    auto rep = bracket_checks(make(1.0, 5, 0.0));
    EXPECT_EQ(rep.max_violation(), 0.0);
}

TEST(Bracket, RoundOffOnly) {
    auto rep = bracket_checks(make(1.0, 4, 0.5));
    EXPECT_LE(rep.max_violation(), 1e-12);
}

TEST(Bracket, JumpOfOneAtDefault) {
    auto lat = make(1.0, 4, 0.5);
    for (int k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i)
            for (const auto& e : lat.transitions(k, i)) {
                double jump = e.dM + (DefaultLattice::node(k, i).alive() ? lat.jump_prob(k) : 0.0);
                EXPECT_NEAR(jump, e.dH, 1e-15);
                EXPECT_TRUE(e.dH == 0.0 || e.dH == 1.0);
            }
}

TEST(Kernel, MomentsAgainstDirectSummation) {
    auto lat = build_lattice(2.0, 8, IntensitySpec::piecewise({0.0, 0.3, 0.9, 0.3, 0.1, 0.45, 0.2, 0.05}));
    auto M = martingale_M(lat);
    for (int k = 0; k < 8; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            NodeId n = DefaultLattice::node(k, i);
            double ew = 0, em = 0, ew2 = 0, em2 = 0, ewm = 0, ewmw = 0, ewmm = 0, total = 0;
            for (const auto& e : lat.transitions(k, i)) {
                NodeId c = DefaultLattice::node(k + 1, e.child);
                double dw = lat.w(c) - lat.w(n);
                double dm = M(k + 1, e.child) - M(k, i);
                EXPECT_NEAR(dw, e.dW, 1e-14);
                EXPECT_NEAR(dm, e.dM, 1e-14);
                total += e.prob;
                ew += e.prob * dw;
                em += e.prob * dm;
                ew2 += e.prob * dw * dw;
                em2 += e.prob * dm * dm;
                ewm += e.prob * dw * dm;
                ewmw += e.prob * dw * dm * dw;
                ewmm += e.prob * dw * dm * dm;
            }
            double p = n.alive() ? lat.jump_prob(k) : 0.0;
            EXPECT_NEAR(total, 1.0, 1e-15);
            EXPECT_NEAR(ew, 0.0, 1e-12);
            EXPECT_NEAR(em, 0.0, 1e-12);
            EXPECT_NEAR(ew2, lat.dt(), 1e-12);
            EXPECT_NEAR(em2, p * (1.0 - p), 1e-12);
            EXPECT_NEAR(ewm, 0.0, 1e-12);
            EXPECT_NEAR(ewmw, 0.0, 1e-12);
            EXPECT_NEAR(ewmm, 0.0, 1e-12);
        }
}

TEST(Lattice, WContinuesAfterDefaultAndTauIsFrozen) {
    auto lat = make(1.0, 4, 0.5);
    NodeId d{3, 2, 1};
    EXPECT_DOUBLE_EQ(lat.w(d), (2 * 2 - 3) * lat.sqrt_dt());
    EXPECT_DOUBLE_EQ(lat.tau(d), 0.25);
    EXPECT_DOUBLE_EQ(lat.compensator(d), 0.5 * 0.25);
    EXPECT_DOUBLE_EQ(lat.compensator(NodeId{3, 2, kAlive}), 3 * 0.5 * 0.25);
    auto tr = lat.transitions(3, lat.index(d));
    int n_edges = 0;
    for (const auto& e : tr) {
        ++n_edges;
        EXPECT_EQ(DefaultLattice::node(4, e.child).default_step, 1);
    }
    EXPECT_EQ(n_edges, 2);
}

TEST(Lattice, RootLawSumsToOne) {
    auto lat = make(1.0, 7, 0.8);
    auto law = lat.root_law();
    for (const auto& step : law) {
        double s = 0.0;
        for (double q : step) s += q;
        EXPECT_NEAR(s, 1.0, 1e-13);
    }
}
