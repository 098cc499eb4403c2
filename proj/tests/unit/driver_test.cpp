#include "rabsde/driver.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>

using namespace rabsde;

namespace {

Env env_with(std::initializer_list<std::pair<Var, double>> vals) {
    Env e;
    for (auto [v, x] : vals) e.set(v, x);
    return e;
}

Env random_env(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-3.0, 3.0);
    return Env::full(std::abs(d(rng)) / 3.0, d(rng), rng() % 2 ? 1.0 : 0.0, d(rng), d(rng), d(rng), d(rng), d(rng),
                     std::abs(d(rng)) / 3.0);
}

// Random expression text from the full grammar, with irregular spacing.
std::string random_expr(std::mt19937_64& rng, int depth) {
    auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<unsigned>(n)); };
    static const char* vars[] = {"t", "w", "h", "y", "z", "ey", "ez", "u", "tau"};
    if (depth <= 0 || pick(4) == 0) {
        switch (pick(4)) {
            case 0: return vars[pick(9)];
            case 1: return std::to_string(pick(100));
            case 2: return std::to_string(pick(1000) / 64.0);
            default: return std::to_string(pick(9) + 1) + "e-" + std::to_string(pick(3));
        }
    }
    std::string a = random_expr(rng, depth - 1);
    std::string b = random_expr(rng, depth - 1);
    switch (pick(10)) {
        case 0: return a + "+" + b;
        case 1: return a + " - " + b;
        case 2: return a + "*" + b;
        case 3: return "(" + a + ") * (" + b + ")";
        case 4: return "-" + a;
        case 5: return "min(" + a + ", " + b + ")";
        case 6: return "max(" + a + "," + b + ")";
        case 7: return "abs(" + a + ")";
        case 8: return "exp(min(" + a + ", 3))";
        default: return "(" + a + ")/(1 + abs(" + b + "))";
    }
}

}  // namespace

TEST(Parse, Constant) {
    auto e = parse_driver("0");
    EXPECT_EQ(e.free_vars(), VarMask{0});
    EXPECT_EQ(e.eval(Env{}), 0.0);
}

TEST(Parse, VariablesCollected) {
    auto e = parse_driver("-0.05*y + max(z, 0)");
    EXPECT_EQ(e.free_vars(), bit(Var::y) | bit(Var::z));
    EXPECT_TRUE(e.uses(Var::y));
    EXPECT_FALSE(e.uses(Var::u));
}

TEST(Parse, SyntaxErrorOffset) {
    try {
        parse_driver("y + ");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 4u);
    }
}

TEST(Parse, UnknownNamesRejected) {
    try {
        parse_driver("0.1*x");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 4u);
    }
    try {
        parse_driver("sin(y)");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    EXPECT_THROW(parse_driver("max(y)"), ParseError);
    EXPECT_THROW(parse_driver("(y"), ParseError);
    EXPECT_THROW(parse_driver("y y"), ParseError);
    EXPECT_THROW(parse_driver(""), ParseError);
}

TEST(Eval, Examples) {
    EXPECT_DOUBLE_EQ(eval_driver(parse_driver("-0.05*y"), env_with({{Var::y, 100.0}})), -5.0);
    EXPECT_DOUBLE_EQ(eval_driver(parse_driver("min(ey, y)"), env_with({{Var::ey, 2.0}, {Var::y, 3.0}})), 2.0);
    EXPECT_THROW(eval_driver(parse_driver("u/(1-h)"), env_with({{Var::u, 1.0}, {Var::h, 1.0}})), EvalError);
    EXPECT_THROW(eval_driver(parse_driver("y + z"), env_with({{Var::y, 1.0}})), EvalError);
}

TEST(Eval, PrecedenceAndAssociativity) {
    Env e = env_with({{Var::y, 2.0}, {Var::z, 3.0}});
    EXPECT_DOUBLE_EQ(parse_driver("1 - 2 - 3").eval(e), -4.0);
    EXPECT_DOUBLE_EQ(parse_driver("8 / 4 / 2").eval(e), 1.0);
    EXPECT_DOUBLE_EQ(parse_driver("y + z * 2").eval(e), 8.0);
    EXPECT_DOUBLE_EQ(parse_driver("-y * z").eval(e), -6.0);
    EXPECT_DOUBLE_EQ(parse_driver("--y").eval(e), 2.0);
    EXPECT_DOUBLE_EQ(parse_driver("1.5e1 + .5").eval(e), 15.5);
    EXPECT_DOUBLE_EQ(parse_driver("abs(-y) + exp(0)").eval(e), 3.0);
}

TEST(Canonical, RoundTripOnRandomExpressions) {
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    int compared = 0;
    for (int c = 0; c < 1000; ++c) {
        std::string text = random_expr(rng, 4);
        DriverExpr a = parse_driver(text);
        DriverExpr b = parse_driver(a.canonical());
        ASSERT_EQ(b.canonical(), a.canonical()) << text;
        ASSERT_EQ(a.free_vars(), b.free_vars());
        Env env = random_env(rng);
        double va = 0.0, vb = 0.0;
        bool fa = false, fb = false;
        try {
            va = a.eval(env);
        } catch (const EvalError&) {
            fa = true;
        }
        try {
            vb = b.eval(env);
        } catch (const EvalError&) {
            fb = true;
        }
        ASSERT_EQ(fa, fb) << text;
        if (fa) continue;
        if (std::isnan(va)) {
            EXPECT_TRUE(std::isnan(vb));
            continue;
        }
        worst = std::max(worst, std::abs(va - vb));
        ++compared;
    }
    EXPECT_EQ(worst, 0.0);
    EXPECT_GT(compared, 900);
}

TEST(Canonical, NegativeLiteralsReadBack) {
    DriverExpr e = parse_driver("y * (0 - 2.5)");
    DriverExpr again = parse_driver(e.canonical());
    Env env = env_with({{Var::y, 4.0}});
    EXPECT_EQ(e.eval(env), again.eval(env));
}

TEST(MForm, Examples) {
    auto f = parse_driver("0.3*y - z + 2*u");
    Env e = env_with({{Var::y, 1.0}, {Var::z, 0.5}, {Var::u, 0.0}});
    EXPECT_EQ(to_M_form(f, 0.7, 0.0)(e), f.eval(e));
    e.set(Var::u, 1.3);
    EXPECT_EQ(to_M_form(f, 0.7, 1.0)(e), f.eval(e));
    auto zero = parse_driver("0");
    EXPECT_DOUBLE_EQ(to_M_form(zero, 0.5, 0.0)(env_with({{Var::u, 2.0}})), -1.0);
    EXPECT_THROW(to_M_form(f, 0.5, 0.5), InvalidArgument);
}

TEST(MForm, CorrectionIdentityOnRandomPoints) {
    std::mt19937_64 rng(11);
    auto f = parse_driver("max(y, z) - 0.4*u*abs(w) + ey*t + min(u, ez)");
    std::uniform_real_distribution<double> lam(0.0, 5.0);
    for (int c = 0; c < 1000; ++c) {
        Env e = random_env(rng);
        double l = lam(rng);
        double h = e.get(Var::h);
        double F = to_M_form(f, l, h)(e);
        EXPECT_NEAR(F - f.eval(e) + l * (1.0 - h) * e.get(Var::u), 0.0, 1e-12 * (1.0 + std::abs(F)));
        TransformedDriver hd(f, DriverForm::h_form);
        EXPECT_EQ(hd.eval_m(e, l), F);
        TransformedDriver md(f, DriverForm::m_form);
        EXPECT_EQ(md.eval_m(e, l), f.eval(e));
        EXPECT_NEAR(md.eval_h(e, l) - l * (1.0 - h) * e.get(Var::u), f.eval(e), 1e-12);
    }
}

TEST(Lipschitz, LinearCoefficientsRecovered) {
    SampleGrid g;
    auto est = estimate_lipschitz(parse_driver("3*y"), g, 0.5);
    EXPECT_NEAR(est.c_y, 3.0, 1e-12);
    EXPECT_EQ(est.c_z, 0.0);
    EXPECT_EQ(est.c_ey, 0.0);
    EXPECT_EQ(est.c_ez, 0.0);
    EXPECT_EQ(est.c_u, 0.0);

    auto lin = estimate_lipschitz(parse_driver("0.7*y - 1.25*z + 0.5*ey - 0.125*ez + 2*w"), g, 0.5);
    EXPECT_NEAR(lin.c_y, 0.7, 1e-12);
    EXPECT_NEAR(lin.c_z, 1.25, 1e-12);
    EXPECT_NEAR(lin.c_ey, 0.5, 1e-12);
    EXPECT_NEAR(lin.c_ez, 0.125, 1e-12);
}

TEST(Lipschitz, IntensityWeightedU) {
    auto est = estimate_lipschitz(parse_driver("0.5*u"), SampleGrid{}, 0.5);
    EXPECT_NEAR(est.c_u, 1.0, 1e-12);
}

TEST(Lipschitz, Kink) {
    SampleGrid g;
    g[Var::y] = {0.0, 4.0, 9};
    auto est = estimate_lipschitz(parse_driver("min(y, 2)"), g, 0.0);
    EXPECT_NEAR(est.c_y, 1.0, 1e-12);
}

TEST(Lipschitz, MFormBound) {
    LipschitzEstimate zero;
    auto c0 = check_M_form_lipschitz(zero, 0.5);
    EXPECT_DOUBLE_EQ(c0.c_u, 1.0);

    LipschitzEstimate c;
    c.c_y = 3;
    c.c_z = 1;
    c.c_u = 2;
    auto c1 = check_M_form_lipschitz(c, 0.5);
    EXPECT_DOUBLE_EQ(c1.c_u, 3.0);
    EXPECT_DOUBLE_EQ(c1.c_y, 3.0);
    EXPECT_DOUBLE_EQ(c1.c_z, 1.0);

    auto c2 = check_M_form_lipschitz(c, 0.0);
    EXPECT_EQ(c2.c_y, c.c_y);
    EXPECT_EQ(c2.c_z, c.c_z);
    EXPECT_EQ(c2.c_ey, c.c_ey);
    EXPECT_EQ(c2.c_ez, c.c_ez);
    EXPECT_EQ(c2.c_u, c.c_u);
}

TEST(Integrability, FiniteAtZero) {
    EXPECT_TRUE(std::isfinite(check_integrability(parse_driver("y + exp(w)"), SampleGrid{})));
    EXPECT_THROW(check_integrability(parse_driver("1/y"), SampleGrid{}), EvalError);
}

TEST(Grid, RejectsDegenerateRange) {
    SampleGrid g;
    g[Var::y] = {1.0, 0.0, 3};
    EXPECT_THROW(g.validate(), InvalidArgument);
}
