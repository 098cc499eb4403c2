#pragma once

#include "rabsde/driver.hpp"
#include "rabsde/error.hpp"
#include "rabsde/lattice.hpp"
#include "rabsde/solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace rabsde {

/// A grid point where an inequality fails, with both sides of the comparison.
struct Witness {
    Env lhs_env;
    Env rhs_env;
    double lhs = 0.0;
    double rhs = 0.0;
};

struct MonotoneCheck {
    bool ok = true;
    std::optional<Witness> witness;  ///< lhs at the smaller ey, rhs at the larger one
};

struct ThetaCheck {
    bool ok = true;
    /// inf over the grid of (g(u) - g(u')) / (lambda_t (u - u')); 0 when g ignores u
    double theta = 0.0;
    double sup_abs_theta_lambda = 0.0;
    std::optional<Witness> witness;
};

struct DominanceCheck {
    bool ok = true;
    std::optional<Witness> witness;  ///< lhs = g1, rhs = g2
};

namespace detail {

/// Evaluates a driver in its dM-written form; t picks the intensity.
struct MDriver {
    const TransformedDriver* driver;
    LambdaOfTime lambda;

    double operator()(const Env& env) const { return driver->eval_m(env, lambda(env.get(Var::t))); }

    VarMask mask() const {
        VarMask m = driver->base().free_vars();
        if (driver->form() == DriverForm::h_form) m |= bit(Var::u) | bit(Var::h) | bit(Var::t);
        return m;
    }
};

inline TransformedDriver as_m_form(const DriverExpr& g) { return TransformedDriver(g, DriverForm::m_form); }

}  // namespace detail

/// Grid test that g is nondecreasing in the anticipated-Y slot.
inline MonotoneCheck check_monotone_in_anticipation(const TransformedDriver& g, const SampleGrid& grid,
                                                    const LambdaOfTime& lambda) {
    detail::MDriver f{&g, lambda};
    MonotoneCheck out;
    if (!g.base().uses(Var::ey)) return out;
    int last = grid.points(Var::ey) - 1;
    for_each_grid_point(grid, f.mask() | bit(Var::ey), [&](const Env& env, const auto& idx) {
        if (!out.ok) return;
        int i = idx[static_cast<std::size_t>(Var::ey)];
        if (i >= last) return;
        Env hi = env;
        hi.set(Var::ey, grid.value(Var::ey, i + 1));
        double a = f(env);
        double b = f(hi);
        if (!std::isfinite(a) || !std::isfinite(b)) throw EvalError("non-finite driver value on the sample grid");
        if (b < a) {
            out.ok = false;
            out.witness = Witness{env, hi, a, b};
        }
    });
    return out;
}

inline MonotoneCheck check_monotone_in_anticipation(const DriverExpr& g, const SampleGrid& grid) {
    auto t = detail::as_m_form(g);
    return check_monotone_in_anticipation(t, grid, [](double) { return 0.0; });
}

/// Grid estimate of theta in g(.., u) - g(.., u') >= theta lambda_t (u - u').
/// Holds when inf ratio >= -1 and |theta lambda| stays bounded. Times with
/// lambda_t = 0 are skipped.
inline ThetaCheck check_theta_condition(const TransformedDriver& g, const LambdaOfTime& lambda,
                                        const SampleGrid& grid) {
    detail::MDriver f{&g, lambda};
    ThetaCheck out;
    bool any = false;
    double worst = std::numeric_limits<double>::infinity();
    int last = grid.points(Var::u) - 1;
    for_each_grid_point(grid, f.mask() | bit(Var::u) | bit(Var::t), [&](const Env& env, const auto& idx) {
        int i = idx[static_cast<std::size_t>(Var::u)];
        if (i >= last) return;
        double lam = lambda(env.get(Var::t));
        if (lam <= 0.0) return;
        Env hi = env;
        double u0 = grid.value(Var::u, i);
        double u1 = grid.value(Var::u, i + 1);
        hi.set(Var::u, u1);
        double a = f(env);
        double b = f(hi);
        if (!std::isfinite(a) || !std::isfinite(b)) throw EvalError("non-finite driver value on the sample grid");
        double r = (b - a) / (lam * (u1 - u0));
        any = true;
        out.sup_abs_theta_lambda = std::max(out.sup_abs_theta_lambda, std::abs(r * lam));
        if (r < worst) {
            worst = r;
            out.witness = Witness{env, hi, a, b};
        }
    });
    if (!any) {
        out.witness.reset();
        return out;
    }
    out.theta = worst;
    out.ok = worst >= -1.0 && std::isfinite(out.sup_abs_theta_lambda);
    if (out.ok) out.witness.reset();
    return out;
}

inline ThetaCheck check_theta_condition(const DriverExpr& g, double lambda, const SampleGrid& grid) {
    auto t = detail::as_m_form(g);
    return check_theta_condition(t, [lambda](double) { return lambda; }, grid);
}

/// Grid test of g1 >= g2 (both in dM-written form).
inline DominanceCheck check_driver_dominance(const TransformedDriver& g1, const TransformedDriver& g2,
                                             const LambdaOfTime& lambda, const SampleGrid& grid) {
    detail::MDriver f1{&g1, lambda};
    detail::MDriver f2{&g2, lambda};
    DominanceCheck out;
    for_each_grid_point(grid, f1.mask() | f2.mask(), [&](const Env& env, const auto&) {
        if (!out.ok) return;
        double a = f1(env);
        double b = f2(env);
        if (!std::isfinite(a) || !std::isfinite(b)) throw EvalError("non-finite driver value on the sample grid");
        if (a < b) {
            out.ok = false;
            out.witness = Witness{env, env, a, b};
        }
    });
    return out;
}

/// Outcomes of the five hypothesis checks, never user-asserted.
struct HypothesisFlags {
    bool monotone_anticipation = false;  ///< (i) g2 nondecreasing in E[Y_{t+delta}]
    bool terminal_order = false;         ///< (ii) xi1 >= xi2 at every terminal node
    bool obstacle_order = false;         ///< (iii) S1 >= S2 at every node
    bool theta_condition = false;        ///< (iv) for g1
    bool driver_order = false;           ///< (v) g1 >= g2 on the grid
    double theta = 0.0;

    bool all() const noexcept {
        return monotone_anticipation && terminal_order && obstacle_order && theta_condition && driver_order;
    }
};

struct ComparisonCase {
    Scenario first;   ///< (g1, xi1, S1)
    Scenario second;  ///< (g2, xi2, S2)
    SampleGrid grid{};
    HypothesisFlags flags{};
    std::vector<std::string> notes;  ///< human-readable reasons for failed checks
};

/// Grid suited to a case: t on the lattice times, the rest as configured.
inline SampleGrid case_grid(const Scenario& sc, SampleGrid grid) {
    DefaultLattice lat = sc.lattice();
    grid[Var::t] = {0.0, lat.time(lat.n_steps() - 1), lat.n_steps()};
    grid[Var::tau] = {0.0, lat.horizon(), 3};
    return grid;
}

/// Runs every hypothesis checker and stores the outcome in `c.flags`.
inline void check_hypotheses(ComparisonCase& c) {
    const Scenario& a = c.first;
    const Scenario& b = c.second;
    if (a.horizon != b.horizon || a.steps != b.steps || a.intensity.values != b.intensity.values ||
        a.delta_steps != b.delta_steps || a.scheme != b.scheme)
        throw InvalidArgument("comparison scenarios must share lattice, intensity, delta and scheme");
    c.notes.clear();
    DefaultLattice lat = a.lattice();
    SampleGrid grid = case_grid(a, c.grid);
    auto lam = lambda_profile(lat);
    HypothesisFlags fl;

    auto mono = check_monotone_in_anticipation(b.driver, grid, lam);
    fl.monotone_anticipation = mono.ok;
    if (!mono.ok) c.notes.push_back("(i) g2 decreases in ey");

    fl.terminal_order = true;
    int n = lat.n_steps();
    for (std::size_t i = 0; i < DefaultLattice::node_count(n) && fl.terminal_order; ++i) {
        NodeId node = DefaultLattice::node(n, i);
        if (terminal_at(a, lat, node) < terminal_at(b, lat, node)) {
            fl.terminal_order = false;
            c.notes.push_back("(ii) xi1 < xi2 at " + to_string(node));
        }
    }
    fl.obstacle_order = true;
    for (int k = 0; k <= n && fl.obstacle_order; ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k) && fl.obstacle_order; ++i) {
            NodeId node = DefaultLattice::node(k, i);
            if (obstacle_at(a, lat, node) < obstacle_at(b, lat, node)) {
                fl.obstacle_order = false;
                c.notes.push_back("(iii) S1 < S2 at " + to_string(node));
            }
        }

    auto theta = check_theta_condition(a.driver, lam, grid);
    fl.theta_condition = theta.ok;
    fl.theta = theta.theta;
    if (!theta.ok) c.notes.push_back("(iv) theta = " + detail::format_double(theta.theta) + " < -1");

    auto dom = check_driver_dominance(a.driver, b.driver, lam, grid);
    fl.driver_order = dom.ok;
    if (!dom.ok) c.notes.push_back("(v) g1 < g2 somewhere on the grid");
    c.flags = fl;
}

enum class VerdictStatus { pass, fail, hypotheses_violated };

struct ComparisonVerdict {
    VerdictStatus status = VerdictStatus::hypotheses_violated;
    HypothesisFlags flags{};
    double min_gap = 0.0;  ///< min over nodes of Y1 - Y2
    NodeId worst_node{};
    std::vector<std::string> notes;

    static constexpr double kTolerance = 1e-10;
};

/// Checks the hypotheses, then solves both scenarios and reports min (Y1 - Y2).
/// The conclusion is not asserted when a hypothesis fails on the grid.
inline ComparisonVerdict run_comparison(ComparisonCase& c) {
    check_hypotheses(c);
    ComparisonVerdict v;
    v.flags = c.flags;
    v.notes = c.notes;
    if (!c.flags.all()) return v;
    Solution s1 = solve_backward(c.first);
    Solution s2 = solve_backward(c.second);
    DefaultLattice lat = c.first.lattice();
    v.min_gap = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= lat.n_steps(); ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            double gap = s1.Y(k, i) - s2.Y(k, i);
            if (gap < v.min_gap) {
                v.min_gap = gap;
                v.worst_node = DefaultLattice::node(k, i);
            }
        }
    v.status = v.min_gap >= -ComparisonVerdict::kTolerance ? VerdictStatus::pass : VerdictStatus::fail;
    return v;
}

/// Solves the reflected BSDE of `sc` with its anticipated arguments frozen at the
/// processes of `source`, so that only (Y, Z, U, K) of `sc` are unknown.
inline Solution solve_with_frozen_anticipation(const Scenario& sc, const Solution& source) {
    require_valid(sc);
    DefaultLattice lat = sc.lattice();
    Solution sol = detail::empty_solution(sc, lat);
    for (int k = lat.n_steps() - 1; k >= 0; --k) {
        auto next = sol.Y.at_step(k + 1);
        auto src_next = source.Y.at_step(k + 1);
        auto ant_fields = detail::anticipated_at(lat, sc.delta_steps, k, source.Y, source.Z);
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            NodeId node = DefaultLattice::node(k, i);
            Projection pr = project(lat, k, i, next);
            detail::Anticipation ant = detail::anticipation_for(ant_fields, i);
            if (ant.same_time) {
                Projection src = project(lat, k, i, src_next);
                ant.same_time = false;
                ant.ey = detail::y_argument(source, lat, k, i, src);
                ant.ez = source.Z(k, i);
            }
            auto drift = [&](double y) { return detail::driver_m(sc, lat, node, y, pr.z, ant, pr.u); };
            auto [cont, f] = detail::continuation(sc, lat.dt(), pr.mean, pr.mean, drift, node);
            double y = std::max(cont, sol.S(k, i));
            sol.Y(k, i) = y;
            sol.Z(k, i) = pr.z;
            sol.U(k, i) = pr.u;
            sol.psi(k, i) = pr.psi;
            sol.dK(k, i) = y - cont;
            sol.drift(k, i) = f;
        }
    }
    detail::finish(sol, lat);
    return sol;
}

struct IterateTrace {
    /// Y^3, Y^4, ... (element j is Y^{j+3})
    std::vector<ProcessField> iterates;
    /// sup-node |Y^n - Y^{n-1}|, starting with |Y^3 - Y^1|
    std::vector<double> sup_diffs;
    /// largest Y^n - Y^{n-1} (should be <= 0 up to round-off), starting with Y^3 - Y^1
    double worst_increase = -std::numeric_limits<double>::infinity();
    std::optional<NodeId> monotonicity_violation;
    /// sup-node |Y^last - Y^2| against the direct solution of the second scenario
    double limit_gap = 0.0;

    static constexpr double kTolerance = 1e-10;
    bool monotone() const noexcept { return !monotonicity_violation.has_value(); }
};

/// The monotone sequence from the comparison proof: Y^3 solves the second
/// equation with anticipation frozen at Y^1, then Y^n with anticipation frozen at
/// Y^{n-1}. Stops after n_max iterates or once successive iterates agree exactly.
inline IterateTrace iterate_sequence(const ComparisonCase& c, int n_max) {
    if (n_max < 1) throw InvalidArgument("n_max must be at least 1");
    DefaultLattice lat = c.first.lattice();
    Solution y1 = solve_backward(c.first);
    Solution direct = solve_backward(c.second);
    IterateTrace tr;
    const Solution* prev = &y1;
    Solution current;
    Solution previous_storage;
    for (int it = 0; it < n_max; ++it) {
        current = solve_with_frozen_anticipation(c.second, *prev);
        double sup = 0.0;
        for (int k = 0; k <= lat.n_steps(); ++k)
            for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
                double d = current.Y(k, i) - prev->Y(k, i);
                sup = std::max(sup, std::abs(d));
                if (d > tr.worst_increase) tr.worst_increase = d;
                if (d > IterateTrace::kTolerance && !tr.monotonicity_violation)
                    tr.monotonicity_violation = DefaultLattice::node(k, i);
            }
        tr.iterates.push_back(current.Y);
        tr.sup_diffs.push_back(sup);
        previous_storage = std::move(current);
        prev = &previous_storage;
        if (it > 0 && sup == 0.0) break;
    }
    for (int k = 0; k <= lat.n_steps(); ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i)
            tr.limit_gap = std::max(tr.limit_gap, std::abs(prev->Y(k, i) - direct.Y(k, i)));
    return tr;
}

struct CaseFamily {
    double horizon = 1.0;
    int steps = 6;
    double lambda = 0.3;
    std::vector<int> deltas{0, 1, 2};
};

/// Random comparison pair: g2 from a small affine-plus-kinks family, then
/// g1 = g2 + nonnegative terms, xi1 = max(xi2 + c, S1), S1 = S2 + c'. Hypotheses
/// (ii), (iii), (v) hold by construction; (i) and (iv) are left to the checkers.
inline ComparisonCase generate_case(std::uint64_t seed, const CaseFamily& fam = {}) {
    std::mt19937_64 rng(seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto num = [](double x) { return "(" + detail::format_double(x) + ")"; };
    int delta = fam.deltas[std::uniform_int_distribution<std::size_t>(0, fam.deltas.size() - 1)(rng)];

    double lam = fam.lambda;
    std::string g2 = num(uni(-0.5, 0.5)) + "*y + " + num(uni(-0.4, 0.4)) + "*z + " + num(uni(-0.15, 0.6)) +
                     "*ey + " + num(uni(-1.3, 0.8) * lam) + "*u + " + num(uni(-0.3, 0.3)) + "*w + " +
                     num(uni(-0.2, 0.2)) + " + " + num(uni(0.0, 0.2)) + "*min(ey, 1)";
    if (delta > 0) g2 += " + " + num(uni(-0.1, 0.1)) + "*ez";
    std::string g1 = g2 + " + " + num(uni(0.0, 0.3)) + " + " + num(uni(0.0, 0.2)) + "*abs(y - ey) + " +
                     num(uni(0.0, 0.4) * lam) + "*max(u, 0) + " + num(uni(0.0, 0.2)) + "*abs(w)";

    std::string s2;
    if (uni(0.0, 1.0) < 0.2) {
        s2 = "-1e9";
    } else {
        s2 = num(uni(-0.4, 0.4)) + " + " + num(uni(-0.5, 0.5)) + "*w + " + num(uni(-0.3, 0.3)) + "*h + " +
             num(uni(-0.2, 0.2)) + "*t";
    }
    std::string s1 = "(" + s2 + ") + " + num(uni(0.0, 0.3));
    std::string base2 = num(uni(-0.5, 0.5)) + " + " + num(uni(-1.0, 1.0)) + "*w + " + num(uni(-0.6, 0.6)) +
                        "*h + " + num(uni(0.0, 0.5)) + "*max(w, 0) + " + num(uni(-0.3, 0.3)) + "*tau";
    std::string xi2 = "max(" + base2 + ", " + s2 + ")";
    std::string xi1 = "max(" + xi2 + " + " + num(uni(0.0, 0.3)) + ", " + s1 + ")";

    auto make = [&](const std::string& g, const std::string& s, const std::string& xi) {
        Scenario sc;
        sc.horizon = fam.horizon;
        sc.steps = fam.steps;
        sc.intensity = IntensitySpec::constant(lam, fam.steps);
        sc.delta_steps = delta;
        sc.driver = TransformedDriver(DriverExpr::parse(g), DriverForm::m_form);
        sc.obstacle = DriverExpr::parse(s);
        sc.terminal = DriverExpr::parse(xi);
        return sc;
    };
    ComparisonCase c{make(g1, s1, xi1), make(g2, s2, xi2), {}, {}, {}};
    for (Var v : {Var::y, Var::z, Var::ey, Var::ez, Var::u, Var::w}) c.grid[v] = {-3.0, 3.0, 5};
    return c;
}

}  // namespace rabsde
