#pragma once

#include "rabsde/driver.hpp"
#include "rabsde/error.hpp"
#include "rabsde/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rabsde {

enum class Scheme { explicit_euler, implicit };

/// Full problem statement for one reflected anticipated BSDE on a default lattice.
struct Scenario {
    double horizon = 1.0;
    int steps = 1;
    IntensitySpec intensity = IntensitySpec::constant(0.0, 1);
    int delta_steps = 0;
    TransformedDriver driver{DriverExpr::parse("0"), DriverForm::h_form};
    DriverExpr obstacle = DriverExpr::parse("-1e9");
    DriverExpr terminal = DriverExpr::parse("0");
    Scheme scheme = Scheme::explicit_euler;
    double implicit_tol = 1e-14;
    int implicit_max_iter = 500;

    DefaultLattice lattice() const { return DefaultLattice(horizon, steps, intensity); }
};

namespace detail {

inline Env state_env(const DefaultLattice& lat, const NodeId& n) {
    Env e;
    e.set(Var::t, lat.time(n.step)).set(Var::w, lat.w(n)).set(Var::h, DefaultLattice::h(n));
    e.set(Var::tau, lat.tau(n));
    return e;
}

inline void require_state_only(const DriverExpr& e, const char* what) {
    constexpr VarMask allowed = bit(Var::t) | bit(Var::w) | bit(Var::h) | bit(Var::tau);
    if ((e.free_vars() & ~allowed) != 0)
        throw InvalidArgument(std::string(what) + " may only depend on t, w, h and tau: '" + e.source() + "'");
}

}  // namespace detail

/// Obstacle S_k evaluated at a node.
inline double obstacle_at(const Scenario& sc, const DefaultLattice& lat, const NodeId& n) {
    return sc.obstacle.eval(detail::state_env(lat, n));
}

/// Terminal payoff xi evaluated at a node of the last step.
inline double terminal_at(const Scenario& sc, const DefaultLattice& lat, const NodeId& n) {
    return sc.terminal.eval(detail::state_env(lat, n));
}

/// Problems that prevent solving a scenario. Empty when valid.
inline std::vector<std::string> scenario_issues(const Scenario& sc) {
    std::vector<std::string> issues;
    if (sc.delta_steps < 0) issues.push_back("delta_steps must be non-negative");
    if (sc.implicit_tol <= 0.0) issues.push_back("implicit_tol must be positive");
    if (sc.implicit_max_iter < 1) issues.push_back("implicit_max_iter must be at least 1");
    for (auto [expr, what] : {std::pair{&sc.obstacle, "obstacle"}, std::pair{&sc.terminal, "terminal"}}) {
        try {
            detail::require_state_only(*expr, what);
        } catch (const Error& e) {
            issues.push_back(e.what());
        }
    }
    if (!issues.empty()) return issues;
    try {
        DefaultLattice lat = sc.lattice();
        int n = lat.n_steps();
        for (std::size_t i = 0; i < DefaultLattice::node_count(n); ++i) {
            NodeId node = DefaultLattice::node(n, i);
            double xi = terminal_at(sc, lat, node);
            double s = obstacle_at(sc, lat, node);
            if (!std::isfinite(xi)) {
                issues.push_back("terminal value is not finite at node " + to_string(node));
                break;
            }
            if (xi < s) {
                issues.push_back("terminal value below obstacle at node " + to_string(node) + ": xi = " +
                                 detail::format_double(xi) + " < S_T = " + detail::format_double(s));
                break;
            }
        }
    } catch (const Error& e) {
        issues.push_back(e.what());
    }
    return issues;
}

inline void require_valid(const Scenario& sc) {
    auto issues = scenario_issues(sc);
    if (!issues.empty()) {
        std::string msg = "invalid scenario:";
        for (const auto& s : issues) msg += "\n  " + s;
        throw InvalidArgument(msg);
    }
}

/// Node-indexed solution processes.
///
/// `dK` holds the reflection increment at each node. K itself is path-dependent
/// on the recombining lattice; `cumulative_K` sums increments along a path.
/// `drift` stores the driver value F used at each node, i.e. F evaluated along
/// the solved processes.
struct Solution {
    ProcessField Y, Z, U, psi, dK, drift, S;
    Scheme scheme = Scheme::explicit_euler;
    int delta_steps = 0;
    /// E[dK at step k] under the root law
    std::vector<double> dK_per_step;
    /// largest |Y_{k+1} - reconstruction| seen while projecting
    double max_representation_residual = 0.0;
    double max_abs_psi = 0.0;
};

/// Exact coefficients of a next-step field against the orthogonal basis
/// {1, dW, dM, dW dM} of the kernel at one node.
struct Projection {
    double mean = 0.0;
    double z = 0.0;
    double u = 0.0;
    double psi = 0.0;
};

inline Projection project(const DefaultLattice& lat, int k, std::size_t idx, std::span<const double> next) {
    Projection pr;
    double ew = 0.0, em = 0.0, ewm = 0.0;
    for (const auto& e : lat.transitions(k, idx)) {
        pr.mean += e.prob * next[e.child];
        ew += e.prob * next[e.child] * e.dW;
        em += e.prob * next[e.child] * e.dM;
        ewm += e.prob * next[e.child] * e.dW * e.dM;
    }
    pr.z = ew / lat.dt();
    NodeId n = DefaultLattice::node(k, idx);
    double p = lat.jump_prob(k);
    if (n.alive() && p > 0.0) {
        double var_m = p * (1.0 - p);
        pr.u = em / var_m;
        pr.psi = ewm / (lat.dt() * var_m);
    }
    return pr;
}

/// Result of one backward step at a node.
struct StepResult {
    double y = 0.0;
    double z = 0.0;
    double u = 0.0;
    double psi = 0.0;
    double dK = 0.0;
    double drift = 0.0;
    double continuation = 0.0;
};

namespace detail {

/// Anticipated arguments at one node. When delta = 0 the anticipated Y argument
/// is the current y argument and the anticipated Z argument is the current z.
struct Anticipation {
    bool same_time = false;
    double ey = 0.0;
    double ez = 0.0;
};

inline double driver_m(const Scenario& sc, const DefaultLattice& lat, const NodeId& n, double y, double z,
                       const Anticipation& ant, double u) {
    Env env = state_env(lat, n);
    env.set(Var::y, y).set(Var::z, z).set(Var::u, u);
    env.set(Var::ey, ant.same_time ? y : ant.ey).set(Var::ez, ant.same_time ? z : ant.ez);
    return sc.driver.eval_m(env, lat.lambda(n.step));
}

inline double driver_h(const Scenario& sc, const DefaultLattice& lat, const NodeId& n, double y, double z,
                       const Anticipation& ant, double u) {
    Env env = state_env(lat, n);
    env.set(Var::y, y).set(Var::z, z).set(Var::u, u);
    env.set(Var::ey, ant.same_time ? y : ant.ey).set(Var::ez, ant.same_time ? z : ant.ez);
    return sc.driver.eval_h(env, lat.lambda(n.step));
}

/// Continuation value base + drift(y) dt, either with y = y0 (explicit) or at the
/// fixed point of y -> base + drift(y) dt (implicit).
template <typename Drift>
std::pair<double, double> continuation(const Scenario& sc, double dt, double base, double y0, Drift&& drift,
                                       const NodeId& n) {
    if (sc.scheme == Scheme::explicit_euler) {
        double f = drift(y0);
        return {base + f * dt, f};
    }
    double y = y0;
    for (int it = 0; it < sc.implicit_max_iter; ++it) {
        double f = drift(y);
        double next = base + f * dt;
        if (std::abs(next - y) <= sc.implicit_tol * std::max(1.0, std::abs(next))) return {next, drift(next)};
        y = next;
    }
    throw ConvergenceError("implicit step did not converge at node " + to_string(n) +
                               " within implicit_max_iter; dt is too large for the driver's Lipschitz constant",
                           {});
}

/// Tower expectations of the anticipated fields onto step k.
struct AnticipatedFields {
    std::vector<double> ey;
    std::vector<double> ez;
};

inline AnticipatedFields anticipated_at(const DefaultLattice& lat, int delta, int k, const ProcessField& Y,
                                        const ProcessField& Z) {
    AnticipatedFields out;
    if (delta == 0) return out;
    int n = lat.n_steps();
    int ty = std::min(k + delta, n);
    out.ey = lat.expect_steps(ty, Y.at_step(ty), k);
    if (k + delta < n) {
        out.ez = lat.expect_steps(k + delta, Z.at_step(k + delta), k);
    } else {
        out.ez.assign(DefaultLattice::node_count(k), 0.0);
    }
    return out;
}

inline Anticipation anticipation_for(const AnticipatedFields& f, std::size_t i) {
    if (f.ey.empty()) return Anticipation{true, 0.0, 0.0};
    return Anticipation{false, f.ey[i], f.ez[i]};
}

inline Solution empty_solution(const Scenario& sc, const DefaultLattice& lat) {
    Solution sol;
    for (auto* f : {&sol.Y, &sol.Z, &sol.U, &sol.psi, &sol.dK, &sol.drift, &sol.S}) *f = ProcessField::over(lat);
    sol.scheme = sc.scheme;
    sol.delta_steps = sc.delta_steps;
    sol.S = ProcessField::from(lat, [&](const NodeId& n) { return obstacle_at(sc, lat, n); });
    int n = lat.n_steps();
    auto yN = sol.Y.at_step(n);
    for (std::size_t i = 0; i < yN.size(); ++i) yN[i] = terminal_at(sc, lat, DefaultLattice::node(n, i));
    return sol;
}

inline double reconstruction_residual(const DefaultLattice& lat, int k, std::size_t idx,
                                      std::span<const double> next, const Projection& pr) {
    double worst = 0.0;
    for (const auto& e : lat.transitions(k, idx)) {
        if (e.prob == 0.0) continue;
        double rebuilt = pr.mean + pr.z * e.dW + pr.u * e.dM + pr.psi * e.dW * e.dM;
        worst = std::max(worst, std::abs(next[e.child] - rebuilt));
    }
    return worst;
}

inline void finish(Solution& sol, const DefaultLattice& lat) {
    auto law = lat.root_law();
    sol.dK_per_step.assign(static_cast<std::size_t>(lat.n_steps() + 1), 0.0);
    sol.max_abs_psi = 0.0;
    for (int k = 0; k <= lat.n_steps(); ++k) {
        auto dk = sol.dK.at_step(k);
        auto ps = sol.psi.at_step(k);
        for (std::size_t i = 0; i < dk.size(); ++i) {
            sol.dK_per_step[static_cast<std::size_t>(k)] += law[static_cast<std::size_t>(k)][i] * dk[i];
            sol.max_abs_psi = std::max(sol.max_abs_psi, std::abs(ps[i]));
        }
    }
}

}  // namespace detail

/// One backward step at `node`, reading Y (and Z for anticipation) at later steps
/// from `future`. Anticipated values beyond the horizon use Y = xi and Z = 0.
inline StepResult backward_step(const Scenario& sc, const DefaultLattice& lat, const Solution& future,
                                const NodeId& node) {
    if (!lat.contains(node) || node.step >= lat.n_steps())
        throw InvalidArgument("backward_step needs a non-terminal lattice node");
    int k = node.step;
    std::size_t idx = lat.index(node);
    auto next = future.Y.at_step(k + 1);
    Projection pr = project(lat, k, idx, next);
    detail::Anticipation ant{true, 0.0, 0.0};
    if (sc.delta_steps > 0) {
        int n = lat.n_steps();
        ant.same_time = false;
        ant.ey = cond_expect(lat, future.Y, std::min(k + sc.delta_steps, n), node);
        ant.ez = k + sc.delta_steps < n ? cond_expect(lat, future.Z, k + sc.delta_steps, node) : 0.0;
    }
    auto drift = [&](double y) { return detail::driver_m(sc, lat, node, y, pr.z, ant, pr.u); };
    auto [cont, f] = detail::continuation(sc, lat.dt(), pr.mean, pr.mean, drift, node);
    StepResult r;
    r.z = pr.z;
    r.u = pr.u;
    r.psi = pr.psi;
    r.drift = f;
    r.continuation = cont;
    double s = obstacle_at(sc, lat, node);
    r.y = std::max(cont, s);
    r.dK = r.y - cont;
    return r;
}

/// Solves the dM-written equation by backward induction. Anticipated values at
/// steps k+delta > k are already known when step k is processed.
inline Solution solve_backward(const Scenario& sc) {
    require_valid(sc);
    DefaultLattice lat = sc.lattice();
    Solution sol = detail::empty_solution(sc, lat);
    for (int k = lat.n_steps() - 1; k >= 0; --k) {
        auto next = sol.Y.at_step(k + 1);
        auto ant_fields = detail::anticipated_at(lat, sc.delta_steps, k, sol.Y, sol.Z);
        std::size_t width = DefaultLattice::node_count(k);
        for (std::size_t i = 0; i < width; ++i) {
            NodeId node = DefaultLattice::node(k, i);
            Projection pr = project(lat, k, i, next);
            auto ant = detail::anticipation_for(ant_fields, i);
            auto drift = [&](double y) { return detail::driver_m(sc, lat, node, y, pr.z, ant, pr.u); };
            auto [cont, f] = detail::continuation(sc, lat.dt(), pr.mean, pr.mean, drift, node);
            double s = sol.S(k, i);
            double y = std::max(cont, s);
            sol.Y(k, i) = y;
            sol.Z(k, i) = pr.z;
            sol.U(k, i) = pr.u;
            sol.psi(k, i) = pr.psi;
            sol.dK(k, i) = y - cont;
            sol.drift(k, i) = f;
            sol.max_representation_residual =
                std::max(sol.max_representation_residual, detail::reconstruction_residual(lat, k, i, next, pr));
        }
    }
    detail::finish(sol, lat);
    return sol;
}

/// Solves the dH-written equation directly.
///
/// The next-step values are interpolated bilinearly in (dW, dH); the intercept
/// (no Brownian move, no default) plus f dt is the continuation, so no
/// compensator appears. Z is reported as the Brownian projection and U as the
/// jump coefficient so both routes are comparable field by field.
inline Solution solve_backward_hform(const Scenario& sc) {
    require_valid(sc);
    DefaultLattice lat = sc.lattice();
    Solution sol = detail::empty_solution(sc, lat);
    const double sd = lat.sqrt_dt();
    for (int k = lat.n_steps() - 1; k >= 0; --k) {
        auto next = sol.Y.at_step(k + 1);
        auto ant_fields = detail::anticipated_at(lat, sc.delta_steps, k, sol.Y, sol.Z);
        double p = lat.jump_prob(k);
        std::size_t width = DefaultLattice::node_count(k);
        for (std::size_t i = 0; i < width; ++i) {
            NodeId node = DefaultLattice::node(k, i);
            auto tr = lat.transitions(k, i);
            // edges: 0 (+,no jump) 1 (-,no jump) [2 (+,jump) 3 (-,jump)]
            double up0 = next[tr.edges[0].child];
            double dn0 = next[tr.edges[1].child];
            double a = 0.5 * (up0 + dn0);
            double b = (up0 - dn0) / (2.0 * sd);
            double c = 0.0;
            double e = 0.0;
            if (node.alive() && p > 0.0) {
                double up1 = next[tr.edges[2].child];
                double dn1 = next[tr.edges[3].child];
                c = 0.5 * (up1 + dn1) - a;
                e = ((up1 - dn1) - (up0 - dn0)) / (2.0 * sd);
            }
            double z = b + e * p;
            double mean = a + c * p;
            auto ant = detail::anticipation_for(ant_fields, i);
            auto drift = [&](double y) { return detail::driver_h(sc, lat, node, y, z, ant, c); };
            auto [cont, f] = detail::continuation(sc, lat.dt(), a, mean, drift, node);
            double s = sol.S(k, i);
            double y = std::max(cont, s);
            sol.Y(k, i) = y;
            sol.Z(k, i) = z;
            sol.U(k, i) = c;
            sol.psi(k, i) = e;
            sol.dK(k, i) = y - cont;
            sol.drift(k, i) = f;
        }
    }
    detail::finish(sol, lat);
    return sol;
}

/// Processes compared by the weighted norm.
struct TripleView {
    const ProcessField& Y;
    const ProcessField& Z;
    const ProcessField& U;
};

inline TripleView triple(const Solution& s) { return TripleView{s.Y, s.Z, s.U}; }

/// sum_k e^{beta t_k} (beta |dY|^2 + |dZ|^2 + lambda_k |dU|^2) dt over steps k < N,
/// averaged under the root law. This is the squared norm.
inline double beta_norm(const DefaultLattice& lat, const TripleView& a, const TripleView& b, double beta) {
    int n = lat.n_steps();
    for (const ProcessField* f : {&a.Y, &a.Z, &a.U, &b.Y, &b.Z, &b.U})
        if (!f->covers(0) || !f->covers(n - 1) || f->at_step(n - 1).size() != DefaultLattice::node_count(n - 1))
            throw InvalidArgument("beta_norm: lattice mismatch");
    if (!(beta > 0.0) || beta * lat.horizon() > 700.0)
        throw InvalidArgument("beta_norm: beta must be positive with beta*T <= 700");
    auto law = lat.root_law();
    double acc = 0.0;
    for (int k = 0; k < n; ++k) {
        double weight = std::exp(beta * lat.time(k)) * lat.dt();
        double lam = lat.lambda(k);
        double step = 0.0;
        const auto& pk = law[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < pk.size(); ++i) {
            double dy = a.Y(k, i) - b.Y(k, i);
            double dz = a.Z(k, i) - b.Z(k, i);
            double du = a.U(k, i) - b.U(k, i);
            step += pk[i] * (beta * dy * dy + dz * dz + lam * du * du);
        }
        acc += weight * step;
    }
    return acc;
}

struct PicardOptions {
    double rho = 1.0;
    /// defaults to 1 + 10 rho C'^2 with C' estimated on `grid`
    std::optional<double> beta;
    double tol = 1e-10;
    int max_iter = 200;
    SampleGrid grid{};
};

struct PicardResult {
    Solution solution;
    /// history[n] = sqrt(beta_norm(X^{n+1}, X^n)), X^0 = 0
    std::vector<double> history;
    /// sup-node |Y^{n+1} - Y^n| per iteration
    std::vector<double> sup_history;
    int iterations = 0;
    double beta = 0.0;
    double lipschitz = 0.0;
};

/// Lattice times and intensities as a lambda(t) profile.
inline LambdaOfTime lambda_profile(const DefaultLattice& lat) {
    return [lat](double t) {
        int k = static_cast<int>(std::floor(t / lat.dt() + 1e-9));
        return lat.lambda(std::clamp(k, 0, lat.n_steps() - 1));
    };
}

/// C' of the dM-written driver: sampled constant of the given driver, plus 1 on
/// the u slot when it was written against dH.
inline LipschitzEstimate m_form_lipschitz(const Scenario& sc, const SampleGrid& base_grid) {
    DefaultLattice lat = sc.lattice();
    SampleGrid grid = base_grid;
    grid[Var::t] = {0.0, lat.time(lat.n_steps() - 1), lat.n_steps()};
    auto est = estimate_lipschitz(sc.driver.base(), grid, lambda_profile(lat));
    if (sc.driver.form() == DriverForm::h_form) return check_M_form_lipschitz(est, sc.intensity.lambda_max);
    return est;
}

namespace detail {

/// The y argument the scheme feeds to the driver, read off a complete iterate.
inline double y_argument(const Solution& it, const DefaultLattice&, int k, std::size_t i,
                         const Projection& pr_of_it) {
    if (it.scheme == Scheme::explicit_euler) return pr_of_it.mean;
    return it.Y(k, i) - it.dK(k, i);
}

}  // namespace detail

/// Picard iteration of the solution map: every driver argument is frozen at the
/// previous iterate and the resulting reflected BSDE is solved exactly.
inline PicardResult solve_picard(const Scenario& sc, const PicardOptions& opts) {
    require_valid(sc);
    if (opts.rho < 1.0) throw InvalidArgument("rho must be >= 1");
    if (!(opts.tol > 0.0)) throw InvalidArgument("tol must be positive");
    DefaultLattice lat = sc.lattice();
    PicardResult res;
    res.lipschitz = m_form_lipschitz(sc, opts.grid).overall();
    res.beta = opts.beta.value_or(1.0 + 10.0 * opts.rho * res.lipschitz * res.lipschitz);
    if (!(res.beta > 0.0)) throw InvalidArgument("beta must be positive");

    Solution prev = detail::empty_solution(sc, lat);
    // X^0 = 0 on steps < N; the terminal layer is xi throughout.
    for (int k = 0; k < lat.n_steps(); ++k) {
        auto yk = prev.Y.at_step(k);
        std::fill(yk.begin(), yk.end(), 0.0);
    }
    for (int iter = 1; iter <= opts.max_iter; ++iter) {
        Solution next = detail::empty_solution(sc, lat);
        for (int k = lat.n_steps() - 1; k >= 0; --k) {
            auto prev_next = prev.Y.at_step(k + 1);
            auto ant_fields = detail::anticipated_at(lat, sc.delta_steps, k, prev.Y, prev.Z);
            auto hat_next = next.Y.at_step(k + 1);
            for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
                NodeId node = DefaultLattice::node(k, i);
                Projection frozen = project(lat, k, i, prev_next);
                double yarg = detail::y_argument(prev, lat, k, i, frozen);
                auto ant = detail::anticipation_for(ant_fields, i);
                double f = detail::driver_m(sc, lat, node, yarg, prev.Z(k, i), ant, prev.U(k, i));
                Projection pr = project(lat, k, i, hat_next);
                double cont = pr.mean + f * lat.dt();
                double y = std::max(cont, next.S(k, i));
                next.Y(k, i) = y;
                next.Z(k, i) = pr.z;
                next.U(k, i) = pr.u;
                next.psi(k, i) = pr.psi;
                next.dK(k, i) = y - cont;
                next.drift(k, i) = f;
            }
        }
        double dist = std::sqrt(beta_norm(lat, triple(next), triple(prev), res.beta));
        double sup = 0.0;
        for (int k = 0; k <= lat.n_steps(); ++k) {
            auto a = next.Y.at_step(k);
            auto b = prev.Y.at_step(k);
            for (std::size_t i = 0; i < a.size(); ++i) sup = std::max(sup, std::abs(a[i] - b[i]));
        }
        res.history.push_back(dist);
        res.sup_history.push_back(sup);
        prev = std::move(next);
        if (dist <= opts.tol && sup <= opts.tol) {
            res.iterations = std::max(1, iter - 1);
            detail::finish(prev, lat);
            res.solution = std::move(prev);
            return res;
        }
    }
    throw ConvergenceError("Picard iteration did not reach tol within max_iter", res.history);
}

/// Worst violation of one solution condition and where it happens.
struct Violation {
    double value = 0.0;
    NodeId node{};

    void update(double v, const NodeId& n) {
        if (v > value || std::isnan(v)) {
            value = v;
            node = n;
        }
    }
};

struct ValidationReport {
    /// sum_k E[F_k^2] dt under the root law; condition (1) holds when finite
    double driver_square_sum = 0.0;
    Violation integrability;  ///< 0 when finite, +inf otherwise
    Violation residual;       ///< backward equation and martingale representation
    Violation reflection_K;   ///< negative dK or nonzero dK (Y - S)
    Violation obstacle;       ///< max (S - Y)^+
    Violation structure;      ///< U, psi on post-default nodes; Z, U at the horizon

    static constexpr double kTolerance = 1e-10;

    bool ok(double tol = kTolerance) const {
        return integrability.value <= tol && residual.value <= tol && reflection_K.value <= tol &&
               obstacle.value <= tol && structure.value <= tol;
    }
};

/// Recomputes the four solution conditions from the stored fields. Never throws
/// on a bad solution; it reports.
inline ValidationReport validate_solution(const Solution& sol, const Scenario& sc) {
    DefaultLattice lat = sc.lattice();
    ValidationReport rep;
    int n = lat.n_steps();
    auto law = lat.root_law();
    for (std::size_t i = 0; i < DefaultLattice::node_count(n); ++i) {
        NodeId node = DefaultLattice::node(n, i);
        rep.residual.update(std::abs(sol.Y(n, i) - terminal_at(sc, lat, node)), node);
        rep.structure.update(std::max(std::abs(sol.Z(n, i)), std::abs(sol.U(n, i))), node);
        rep.obstacle.update(std::max(0.0, sol.S(n, i) - sol.Y(n, i)), node);
        rep.reflection_K.update(std::abs(sol.dK(n, i)), node);
    }
    for (int k = n - 1; k >= 0; --k) {
        auto next = sol.Y.at_step(k + 1);
        auto ant_fields = detail::anticipated_at(lat, sc.delta_steps, k, sol.Y, sol.Z);
        double step_sq = 0.0;
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            NodeId node = DefaultLattice::node(k, i);
            double y = sol.Y(k, i), z = sol.Z(k, i), u = sol.U(k, i), ps = sol.psi(k, i), dk = sol.dK(k, i);
            double s = obstacle_at(sc, lat, node);
            double mean = 0.0;
            for (const auto& e : lat.transitions(k, i)) mean += e.prob * next[e.child];
            double yarg = sc.scheme == Scheme::explicit_euler ? mean : y - dk;
            auto ant = detail::anticipation_for(ant_fields, i);
            double f = 0.0;
            try {
                f = detail::driver_m(sc, lat, node, yarg, z, ant, u);
            } catch (const EvalError&) {
                f = std::numeric_limits<double>::infinity();
            }
            step_sq += law[static_cast<std::size_t>(k)][i] * f * f;
            rep.residual.update(std::abs(y - (mean + f * lat.dt() + dk)), node);
            for (const auto& e : lat.transitions(k, i)) {
                if (e.prob == 0.0) continue;
                double rebuilt = mean + z * e.dW + u * e.dM + ps * e.dW * e.dM;
                rep.residual.update(std::abs(next[e.child] - rebuilt), DefaultLattice::node(k + 1, e.child));
            }
            rep.reflection_K.update(std::max(0.0, -dk), node);
            rep.reflection_K.update(std::abs(dk * (y - s)), node);
            rep.obstacle.update(std::max(0.0, s - y), node);
            if (!node.alive()) rep.structure.update(std::max(std::abs(u), std::abs(ps)), node);
        }
        rep.driver_square_sum += step_sq * lat.dt();
    }
    if (!std::isfinite(rep.driver_square_sum)) rep.integrability.value = std::numeric_limits<double>::infinity();
    return rep;
}

/// K along a path given as node indices per step (path[k] is the index at step k):
/// K_k = sum_{i <= k} dK_i with K_{0-} = 0.
inline std::vector<double> cumulative_K(const Solution& sol, std::span<const std::size_t> path) {
    std::vector<double> k(path.size());
    double acc = 0.0;
    for (std::size_t s = 0; s < path.size(); ++s) {
        acc += sol.dK(static_cast<int>(s), path[s]);
        k[s] = acc;
    }
    return k;
}

}  // namespace rabsde
