#pragma once

#include "rabsde/comparison.hpp"
#include "rabsde/crr_oracle.hpp"
#include "rabsde/error.hpp"
#include "rabsde/report.hpp"
#include "rabsde/scenario_file.hpp"
#include "rabsde/solver.hpp"
#include "rabsde/stopping.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace rabsde::app {

enum ExitCode : int { kOk = 0, kValidation = 2, kNumerical = 3, kIo = 4 };

struct RunFlags {
    std::string command = "solve";  ///< solve | picard | stopping | compare | suite
    std::string scenario;
    std::string scenario2;
    std::string out;
    std::string format = "json";
    double tol = 1e-10;
    std::optional<std::uint64_t> seed;
    std::string oracle = "none";
    int cases = 1000;
    int max_iterates = 50;
    bool timing = false;
};

struct RunOutcome {
    nlohmann::json report;
    std::string csv;  ///< per-node dump of the primary solution, when one exists
    bool checks_passed = true;
};

/// Worker count from RABSDE_THREADS, else the hardware concurrency.
inline unsigned worker_count() {
    if (const char* env = std::getenv("RABSDE_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1 && v <= 1024) return static_cast<unsigned>(v);
        throw InvalidArgument("RABSDE_THREADS must be an integer in [1, 1024]");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, count) on `workers` threads. Results must be written
/// to per-index slots; the first exception is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t count, unsigned workers, Fn&& fn) {
    workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, workers), std::max<std::size_t>(count, 1)));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    std::mutex failure_mutex;
    auto body = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= count || failed.load()) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                failed = true;
            }
        }
    };
    if (workers == 1) {
        body();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(body);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
}

namespace detail {

inline nlohmann::json check(const std::string& name, double value, double tolerance) {
    return {{"name", name}, {"value", value}, {"tolerance", tolerance}, {"pass", value <= tolerance}};
}

inline nlohmann::json node_json(const NodeId& n) {
    nlohmann::json j{{"step", n.step}, {"up_count", n.up}};
    if (n.alive())
        j["default_step"] = "ALIVE";
    else
        j["default_step"] = n.default_step;
    return j;
}

inline bool all_pass(const nlohmann::json& checks) {
    for (const auto& c : checks)
        if (!c.at("pass").get<bool>()) return false;
    return true;
}

/// Largest and smallest K_T over all positive-probability paths.
inline std::pair<double, double> k_terminal_range(const Solution& sol, const DefaultLattice& lat) {
    int n = lat.n_steps();
    std::vector<double> hi(DefaultLattice::node_count(n)), lo(hi.size());
    for (std::size_t i = 0; i < hi.size(); ++i) hi[i] = lo[i] = sol.dK(n, i);
    for (int k = n - 1; k >= 0; --k) {
        std::vector<double> nh(DefaultLattice::node_count(k)), nl(nh.size());
        for (std::size_t i = 0; i < nh.size(); ++i) {
            double best = -std::numeric_limits<double>::infinity();
            double worst = std::numeric_limits<double>::infinity();
            for (const auto& e : lat.transitions(k, i)) {
                if (e.prob <= 0.0) continue;
                best = std::max(best, hi[e.child]);
                worst = std::min(worst, lo[e.child]);
            }
            nh[i] = sol.dK(k, i) + best;
            nl[i] = sol.dK(k, i) + worst;
        }
        hi = std::move(nh);
        lo = std::move(nl);
    }
    return {hi[0], lo[0]};
}

inline nlohmann::json solution_summary(const Solution& sol, const DefaultLattice& lat) {
    double mean_k = 0.0;
    for (double v : sol.dK_per_step) mean_k += v;
    auto [k_max, k_min] = k_terminal_range(sol, lat);
    return {{"Y0", sol.Y(0, 0)},
            {"Z0", sol.Z(0, 0)},
            {"U0", sol.U(0, 0)},
            {"K_T", {{"mean", mean_k}, {"max", k_max}, {"min", k_min}}},
            {"max_abs_psi", sol.max_abs_psi},
            {"max_representation_residual", sol.max_representation_residual},
            {"steps", lat.n_steps()},
            {"scheme", sol.scheme == Scheme::implicit ? "implicit" : "explicit"},
            {"delta_steps", sol.delta_steps}};
}

inline void add_validation(nlohmann::json& checks, const Solution& sol, const Scenario& sc) {
    ValidationReport v = validate_solution(sol, sc);
    const double tol = ValidationReport::kTolerance;
    auto add = [&](const char* name, const Violation& x) {
        auto c = check(name, x.value, tol);
        c["node"] = node_json(x.node);
        checks.push_back(std::move(c));
    };
    add("integrability", v.integrability);
    add("residual", v.residual);
    add("reflection_K", v.reflection_K);
    add("obstacle", v.obstacle);
    add("structure", v.structure);
}

inline nlohmann::json stopping_section(const Solution& sol, const Scenario& sc, nlohmann::json& checks) {
    nlohmann::json out;
    TauReport tau = optimal_tau(sol, sc, 0);
    double y0 = sol.Y(0, 0);
    double v_hit = stopping_payoff(tau.first_hit, sol, sc, NodeId{0, 0, kAlive});
    double v_k = stopping_payoff(tau.k_increase, sol, sc, NodeId{0, 0, kAlive});
    out["tau"] = {{"disagreements", tau.disagreements}, {"ties", tau.ties},
                  {"first_hit_value", v_hit}, {"k_increase_value", v_k}};
    checks.push_back(check("tau_rules_disagreements", static_cast<double>(tau.disagreements), 0.0));
    checks.push_back(check("tau_first_hit_vs_Y0", std::abs(v_hit - y0), 1e-10));
    checks.push_back(check("tau_k_increase_vs_Y0", std::abs(v_k - y0), 1e-10));
    try {
        BruteForceResult bf = brute_force_value(sol, sc, NodeId{0, 0, kAlive});
        out["brute_force"] = {{"value", bf.value},
                              {"decision_nodes", bf.decision_nodes},
                              {"rules_enumerated", bf.rules_enumerated}};
        checks.push_back(check("brute_force_vs_Y0", std::abs(bf.value - y0), 1e-10));
    } catch (const EnumerationLimit& e) {
        out["brute_force"] = {{"skipped", e.what()}};
    }
    try {
        RunningMaxReport rm = k_running_max_check(sol, sc);
        out["running_max"] = {{"gap", rm.gap}, {"gap_z_only", rm.gap_z_only}, {"paths", rm.paths}};
        checks.push_back(check("running_max_K", rm.gap, 1e-10));
    } catch (const EnumerationLimit& e) {
        out["running_max"] = {{"skipped", e.what()}};
    }
    return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline bool wants(const ScenarioFile& f, const char* output) {
    return std::find(f.outputs.begin(), f.outputs.end(), output) != f.outputs.end();
}

inline RunOutcome run_single(const RunFlags& flags) {
    if (flags.scenario.empty()) throw InvalidArgument("--scenario is required for '" + flags.command + "'");
    ScenarioFile file = load_scenario(flags.scenario);
    const Scenario& sc = file.scenario;
    DefaultLattice lat = sc.lattice();
    RunOutcome out;
    nlohmann::json checks = nlohmann::json::array();
    nlohmann::json& rep = out.report;
    rep["command"] = flags.command;
    rep["scenario"] = scenario_to_json(file);

    Solution sol;
    if (flags.command == "picard") {
        PicardOptions opts;
        opts.tol = flags.tol;
        PicardResult pr = solve_picard(sc, opts);
        Solution direct = solve_backward(sc);
        double gap = 0.0;
        for (int k = 0; k <= lat.n_steps(); ++k)
            for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i)
                gap = std::max(gap, std::abs(pr.solution.Y(k, i) - direct.Y(k, i)));
        double worst_ratio = 0.0;
        for (std::size_t j = 2; j < pr.history.size(); ++j)
            if (pr.history[j - 1] > 0.0) worst_ratio = std::max(worst_ratio, pr.history[j] / pr.history[j - 1]);
        rep["picard"] = {{"history", pr.history},
                         {"sup_history", pr.sup_history},
                         {"iterations", pr.iterations},
                         {"beta", pr.beta},
                         {"lipschitz", pr.lipschitz},
                         {"worst_ratio_from_iteration_3", worst_ratio},
                         {"tol", flags.tol}};
        checks.push_back(check("picard_vs_backward", gap, std::max(10.0 * flags.tol, 1e-12)));
        sol = std::move(pr.solution);
    } else {
        sol = solve_backward(sc);
    }
    rep["solution"] = solution_summary(sol, lat);
    add_validation(checks, sol, sc);

    if (flags.command == "stopping" || wants(file, "stopping") || wants(file, "running_max"))
        rep["stopping"] = stopping_section(sol, sc, checks);

    if (flags.oracle == "crr") {
        if (!file.crr) throw InvalidArgument("--oracle crr needs an \"oracle\" block in the scenario file");
        for (double l : sc.intensity.values)
            if (l != 0.0) throw InvalidArgument("--oracle crr needs lambda = 0");
        oracle::AmericanPut put{file.crr->spot, file.crr->strike, file.crr->rate,
                                file.crr->sigma, sc.horizon, sc.steps};
        double price = put.price();
        rep["oracle"] = {{"type", "crr_put"}, {"price", price}, {"Y0", sol.Y(0, 0)}};
        checks.push_back(check("crr_gap", std::abs(price - sol.Y(0, 0)), 1e-10));
    }

    rep["checks"] = checks;
    out.checks_passed = all_pass(checks);
    out.csv = render_csv(sol, lat);
    return out;
}

inline nlohmann::json verdict_json(const ComparisonVerdict& v) {
    const char* status = v.status == VerdictStatus::pass   ? "pass"
                         : v.status == VerdictStatus::fail ? "fail"
                                                           : "hypotheses_violated";
    nlohmann::json j{{"status", status},
                     {"tolerance", ComparisonVerdict::kTolerance},
                     {"grid_verified",
                      {{"i_monotone_anticipation", v.flags.monotone_anticipation},
                       {"ii_terminal_order", v.flags.terminal_order},
                       {"iii_obstacle_order", v.flags.obstacle_order},
                       {"iv_theta_condition", v.flags.theta_condition},
                       {"v_driver_order", v.flags.driver_order},
                       {"theta", v.flags.theta}}},
                     {"notes", v.notes}};
    if (v.status != VerdictStatus::hypotheses_violated) {
        j["min_gap"] = v.min_gap;
        j["worst_node"] = node_json(v.worst_node);
    }
    return j;
}

inline nlohmann::json trace_json(const IterateTrace& tr) {
    return {{"iterates", tr.iterates.size()},
            {"sup_diffs", tr.sup_diffs},
            {"worst_increase", tr.worst_increase},
            {"monotone", tr.monotone()},
            {"monotone_tolerance", IterateTrace::kTolerance},
            {"limit_gap", tr.limit_gap},
            {"limit_tolerance", 1e-8}};
}

inline RunOutcome run_compare(const RunFlags& flags) {
    if (flags.scenario.empty() || flags.scenario2.empty())
        throw InvalidArgument("'compare' needs --scenario and --scenario2");
    ScenarioFile a = load_scenario(flags.scenario);
    ScenarioFile b = load_scenario(flags.scenario2);
    ComparisonCase c{a.scenario, b.scenario, {}, {}, {}};
    ComparisonVerdict v = run_comparison(c);
    RunOutcome out;
    out.report["command"] = "compare";
    out.report["first"] = scenario_to_json(a);
    out.report["second"] = scenario_to_json(b);
    out.report["verdict"] = verdict_json(v);
    if (v.status == VerdictStatus::hypotheses_violated) {
        std::string msg = "comparison hypotheses fail on the grid:";
        for (const auto& n : v.notes) msg += "\n  " + n;
        throw InvalidArgument(msg);
    }
    IterateTrace tr = iterate_sequence(c, flags.max_iterates);
    out.report["iterates"] = trace_json(tr);
    out.checks_passed = v.status == VerdictStatus::pass && tr.monotone() && tr.limit_gap <= 1e-8;
    return out;
}

inline RunOutcome run_suite(const RunFlags& flags) {
    if (flags.cases < 1) throw InvalidArgument("--cases must be positive");
    if (!flags.scenario.empty()) throw InvalidArgument("'suite' generates its own cases; --scenario is not accepted");
    std::uint64_t seed = flags.seed.value_or(0);
    CaseFamily fam;
    struct Slot {
        ComparisonVerdict verdict;
        std::optional<IterateTrace> trace;
    };
    std::vector<Slot> slots(static_cast<std::size_t>(flags.cases));
    parallel_for(slots.size(), worker_count(), [&](std::size_t i) {
        ComparisonCase c = generate_case(seed + i, fam);
        slots[i].verdict = run_comparison(c);
        if (slots[i].verdict.status != VerdictStatus::hypotheses_violated && i % 10 == 0) {
            IterateTrace tr = iterate_sequence(c, flags.max_iterates);
            tr.iterates.clear();
            slots[i].trace = std::move(tr);
        }
    });

    std::size_t admitted = 0, failures = 0, traces = 0, non_monotone = 0;
    double min_gap = std::numeric_limits<double>::infinity();
    double worst_limit = 0.0;
    nlohmann::json filtered = nlohmann::json::object();
    nlohmann::json failed_seeds = nlohmann::json::array();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto& s = slots[i];
        if (s.verdict.status == VerdictStatus::hypotheses_violated) {
            for (const auto& n : s.verdict.notes) {
                std::string key = n.substr(0, n.find(')') + 1);
                filtered[key] = filtered.value(key, 0) + 1;
            }
            continue;
        }
        ++admitted;
        min_gap = std::min(min_gap, s.verdict.min_gap);
        if (s.verdict.status == VerdictStatus::fail) {
            ++failures;
            failed_seeds.push_back(seed + i);
        }
        if (s.trace) {
            ++traces;
            if (!s.trace->monotone()) ++non_monotone;
            worst_limit = std::max(worst_limit, s.trace->limit_gap);
        }
    }
    RunOutcome out;
    out.report = {{"command", "suite"},
                  {"seed", seed},
                  {"cases", flags.cases},
                  {"family", {{"horizon", fam.horizon}, {"steps", fam.steps}, {"lambda", fam.lambda},
                              {"deltas", fam.deltas}}},
                  {"admitted", admitted},
                  {"filtered_by_hypothesis", filtered},
                  {"failures", failures},
                  {"failed_seeds", failed_seeds},
                  {"min_gap", admitted ? min_gap : 0.0},
                  {"gap_tolerance", ComparisonVerdict::kTolerance},
                  {"iterate_traces", traces},
                  {"non_monotone_traces", non_monotone},
                  {"worst_limit_gap", worst_limit},
                  {"limit_tolerance", 1e-8}};
    out.checks_passed = failures == 0 && non_monotone == 0 && worst_limit <= 1e-8;
    return out;
}

}  // namespace detail

/// Executes one subcommand. Errors propagate as exceptions; numerical check
/// failures are reported through `checks_passed`.
inline RunOutcome run(const RunFlags& flags) {
    if (flags.format != "json" && flags.format != "csv") throw InvalidArgument("--format must be json or csv");
    if (flags.oracle != "none" && flags.oracle != "crr") throw InvalidArgument("--oracle must be crr or none");
    if (!(flags.tol > 0.0)) throw InvalidArgument("--tol must be positive");
    auto t0 = std::chrono::steady_clock::now();
    RunOutcome out;
    if (flags.command == "solve" || flags.command == "picard" || flags.command == "stopping")
        out = detail::run_single(flags);
    else if (flags.command == "compare")
        out = detail::run_compare(flags);
    else if (flags.command == "suite")
        out = detail::run_suite(flags);
    else
        throw InvalidArgument("unknown command '" + flags.command + "'");
    if (flags.format == "csv" && out.csv.empty())
        throw InvalidArgument("--format csv needs a single-scenario command");
    out.report["all_checks_pass"] = out.checks_passed;
    if (flags.timing) out.report["timing_seconds"] = detail::seconds_since(t0);
    return out;
}

/// Runs and emits, mapping failures to exit codes:
/// 0 all checks pass, 2 validation failure, 3 numerical check failure, 4 I/O.
inline int run_and_emit(const RunFlags& flags, std::ostream& out, std::ostream& err) {
    try {
        RunOutcome r = run(flags);
        std::string text = flags.format == "csv" ? r.csv : render_json(r.report);
        emit_text(text, flags.out, out);
        if (!r.checks_passed) {
            err << "rabsde: one or more numerical checks failed\n";
            return kNumerical;
        }
        return kOk;
    } catch (const IoError& e) {
        err << "rabsde: " << e.what() << "\n";
        return kIo;
    } catch (const ConvergenceError& e) {
        err << "rabsde: " << e.what() << "\n";
        return kNumerical;
    } catch (const EnumerationLimit& e) {
        err << "rabsde: " << e.what() << "\n";
        return kNumerical;
    } catch (const Error& e) {
        err << "rabsde: " << e.what() << "\n";
        return kValidation;
    }
}

}  // namespace rabsde::app
