#pragma once

#include "rabsde/error.hpp"
#include "rabsde/lattice.hpp"
#include "rabsde/solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace rabsde {

/// Stop/continue label per lattice node. Terminal nodes always stop.
///
/// Labels depend only on the node, so every rule is adapted by construction.
class StoppingRule {
public:
    explicit StoppingRule(const DefaultLattice& lat, bool stop_everywhere = false) : n_steps_(lat.n_steps()) {
        flags_.reserve(static_cast<std::size_t>(n_steps_ + 1));
        for (int k = 0; k <= n_steps_; ++k)
            flags_.emplace_back(DefaultLattice::node_count(k), static_cast<char>(stop_everywhere || k == n_steps_));
    }

    int n_steps() const noexcept { return n_steps_; }

    bool stops(int k, std::size_t idx) const { return k == n_steps_ || flags_[static_cast<std::size_t>(k)][idx]; }

    void set(int k, std::size_t idx, bool stop) {
        if (k == n_steps_) return;
        flags_.at(static_cast<std::size_t>(k)).at(idx) = static_cast<char>(stop);
    }

    friend bool operator==(const StoppingRule&, const StoppingRule&) = default;

private:
    int n_steps_ = 0;
    std::vector<std::vector<char>> flags_;
};

/// E[ sum_{k < tau} F_k dt + S_tau 1{tau < T} + xi 1{tau = T} | from ], with F
/// read from the solved processes.
inline double stopping_payoff(const StoppingRule& rule, const Solution& sol, const Scenario& sc,
                              const NodeId& from) {
    DefaultLattice lat = sc.lattice();
    if (rule.n_steps() != lat.n_steps()) throw InvalidArgument("stopping rule and lattice have different step counts");
    if (!lat.contains(from)) throw InvalidArgument("node " + to_string(from) + " is not in the lattice");
    int n = lat.n_steps();
    std::vector<double> value(DefaultLattice::node_count(n));
    for (std::size_t i = 0; i < value.size(); ++i) value[i] = terminal_at(sc, lat, DefaultLattice::node(n, i));
    for (int k = n - 1; k >= from.step; --k) {
        std::vector<double> cur(DefaultLattice::node_count(k));
        for (std::size_t i = 0; i < cur.size(); ++i) {
            if (rule.stops(k, i)) {
                cur[i] = obstacle_at(sc, lat, DefaultLattice::node(k, i));
                continue;
            }
            double acc = sol.drift(k, i) * lat.dt();
            for (const auto& e : lat.transitions(k, i)) acc += e.prob * value[e.child];
            cur[i] = acc;
        }
        value = std::move(cur);
    }
    return value[lat.index(from)];
}

struct BruteForceResult {
    double value = 0.0;
    StoppingRule best_rule;
    std::size_t decision_nodes = 0;
    std::uint64_t rules_enumerated = 0;
};

inline constexpr std::size_t kMaxDecisionNodes = 22;

/// Exact supremum of stopping_payoff over every stop/continue labelling of the
/// non-terminal nodes reachable (with positive probability) from `from`.
inline BruteForceResult brute_force_value(const Solution& sol, const Scenario& sc, const NodeId& from) {
    DefaultLattice lat = sc.lattice();
    if (!lat.contains(from)) throw InvalidArgument("node " + to_string(from) + " is not in the lattice");
    int n = lat.n_steps();

    struct Item {
        int step;
        std::size_t idx;
        double stop_value;
        double running;                 // F dt
        std::vector<std::pair<int, double>> kids;  // (item id, prob)
    };
    // Reachable nodes, grouped by step; ids are positions in `items`.
    std::vector<Item> items;
    std::vector<std::vector<int>> id_of(static_cast<std::size_t>(n + 1));
    for (int k = from.step; k <= n; ++k) id_of[static_cast<std::size_t>(k)].assign(DefaultLattice::node_count(k), -1);
    std::vector<std::size_t> frontier{lat.index(from)};
    for (int k = from.step; k <= n; ++k) {
        std::vector<std::size_t> next;
        for (std::size_t idx : frontier) {
            NodeId node = DefaultLattice::node(k, idx);
            Item it{k, idx, 0.0, 0.0, {}};
            if (k == n) {
                it.stop_value = terminal_at(sc, lat, node);
            } else {
                it.stop_value = obstacle_at(sc, lat, node);
                it.running = sol.drift(k, idx) * lat.dt();
            }
            id_of[static_cast<std::size_t>(k)][idx] = static_cast<int>(items.size());
            items.push_back(std::move(it));
            if (k == n) continue;
            for (const auto& e : lat.transitions(k, idx)) {
                if (e.prob <= 0.0) continue;
                auto& slot = id_of[static_cast<std::size_t>(k + 1)][e.child];
                if (slot == -2) continue;
                slot = -2;  // queued
                next.push_back(e.child);
            }
        }
        std::sort(next.begin(), next.end());
        frontier = std::move(next);
    }
    for (auto& it : items) {
        if (it.step == n) continue;
        for (const auto& e : lat.transitions(it.step, it.idx)) {
            if (e.prob <= 0.0) continue;
            it.kids.emplace_back(id_of[static_cast<std::size_t>(it.step + 1)][e.child], e.prob);
        }
    }
    std::vector<int> decision;
    for (std::size_t i = 0; i < items.size(); ++i)
        if (items[i].step < n) decision.push_back(static_cast<int>(i));
    if (decision.size() > kMaxDecisionNodes)
        throw EnumerationLimit("brute force needs " + std::to_string(decision.size()) +
                               " decision nodes; the limit is " + std::to_string(kMaxDecisionNodes));

    std::vector<int> bit_of(items.size(), -1);
    for (std::size_t b = 0; b < decision.size(); ++b) bit_of[static_cast<std::size_t>(decision[b])] = static_cast<int>(b);

    BruteForceResult out{0.0, StoppingRule(lat), decision.size(), 0};
    std::vector<double> v(items.size());
    const std::uint64_t total = std::uint64_t{1} << decision.size();
    std::uint64_t best_mask = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::uint64_t mask = 0; mask < total; ++mask) {
        // items are stored in step order, so a reverse sweep sees children first
        for (std::size_t j = items.size(); j-- > 0;) {
            const Item& it = items[j];
            int b = bit_of[j];
            if (b < 0 || ((mask >> b) & 1u)) {
                v[j] = it.stop_value;
            } else {
                double acc = it.running;
                for (const auto& [kid, p] : it.kids) acc += p * v[static_cast<std::size_t>(kid)];
                v[j] = acc;
            }
        }
        if (v[0] > best) {
            best = v[0];
            best_mask = mask;
        }
    }
    out.rules_enumerated = total;
    out.value = best;
    for (std::size_t b = 0; b < decision.size(); ++b) {
        const Item& it = items[static_cast<std::size_t>(decision[b])];
        out.best_rule.set(it.step, it.idx, ((best_mask >> b) & 1u) != 0);
    }
    return out;
}

/// The two characterisations of the optimal stopping time from step t_index.
struct TauReport {
    StoppingRule first_hit;   ///< first node with Y <= S (+tol), else T
    StoppingRule k_increase;  ///< first node where K increases, else T
    /// nodes (step >= t_index) where the rules disagree and the continuation is not tied with S
    std::size_t disagreements = 0;
    /// nodes where |continuation - S| <= tol: stopping and continuing are both optimal there
    std::size_t ties = 0;

    bool coincide() const noexcept { return disagreements == 0; }
};

inline constexpr double kTouchTolerance = 1e-10;

inline TauReport optimal_tau(const Solution& sol, const Scenario& sc, int t_index) {
    DefaultLattice lat = sc.lattice();
    if (t_index < 0 || t_index > lat.n_steps()) throw InvalidArgument("t_index outside [0, n_steps]");
    TauReport rep{StoppingRule(lat), StoppingRule(lat), 0, 0};
    for (int k = t_index; k < lat.n_steps(); ++k) {
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            double y = sol.Y(k, i);
            double s = sol.S(k, i);
            double dk = sol.dK(k, i);
            bool hit = y <= s + kTouchTolerance;
            bool rises = dk > 0.0;
            rep.first_hit.set(k, i, hit);
            rep.k_increase.set(k, i, rises);
            double cont = y - dk;
            if (std::abs(cont - s) <= kTouchTolerance) {
                ++rep.ties;
            } else if (hit != rises) {
                ++rep.disagreements;
            }
        }
    }
    return rep;
}

struct RunningMaxReport {
    /// max over paths and t of |(K_T - K_{(T-t)-}) - max_{s<=t}(X_{T-s} - S_{T-s})^-|
    double gap = 0.0;
    /// same, with X built from the Z dW integral only
    double gap_z_only = 0.0;
    std::uint64_t paths = 0;
};

inline constexpr std::uint64_t kMaxRunningMaxPaths = std::uint64_t{1} << 21;

/// Pathwise check of K against the running maximum of the negative part of
/// xi + int F dr - int Z dW - int U dM - S, evaluated backward from T.
inline RunningMaxReport k_running_max_check(const Solution& sol, const Scenario& sc) {
    DefaultLattice lat = sc.lattice();
    int n = lat.n_steps();
    RunningMaxReport rep;

    struct Edge {
        std::size_t idx;   // node index at step k
        double full;       // Z dW + U dM + psi dW dM on the edge leaving it
        double z_only;     // Z dW
    };
    std::vector<Edge> path(static_cast<std::size_t>(n + 1));
    auto neg = [](double x) { return std::max(-x, 0.0); };

    auto finish_path = [&]() {
        ++rep.paths;
        if (rep.paths > kMaxRunningMaxPaths)
            throw EnumerationLimit("running-max check enumerates too many paths; use fewer steps");
        std::size_t last = path[static_cast<std::size_t>(n)].idx;
        double xi = sol.Y(n, last);
        double x_full = xi, x_z = xi;
        double best_full = neg(x_full - sol.S(n, last));
        double best_z = neg(x_z - sol.S(n, last));
        double k_tail = sol.dK(n, last);
        rep.gap = std::max(rep.gap, std::abs(k_tail - best_full));
        rep.gap_z_only = std::max(rep.gap_z_only, std::abs(k_tail - best_z));
        for (int m = n - 1; m >= 0; --m) {
            const Edge& e = path[static_cast<std::size_t>(m)];
            double f_dt = sol.drift(m, e.idx) * lat.dt();
            x_full += f_dt - e.full;
            x_z += f_dt - e.z_only;
            best_full = std::max(best_full, neg(x_full - sol.S(m, e.idx)));
            best_z = std::max(best_z, neg(x_z - sol.S(m, e.idx)));
            k_tail += sol.dK(m, e.idx);
            rep.gap = std::max(rep.gap, std::abs(k_tail - best_full));
            rep.gap_z_only = std::max(rep.gap_z_only, std::abs(k_tail - best_z));
        }
    };

    auto walk = [&](auto&& self, int k, std::size_t idx) -> void {
        path[static_cast<std::size_t>(k)].idx = idx;
        if (k == n) {
            finish_path();
            return;
        }
        double z = sol.Z(k, idx), u = sol.U(k, idx), ps = sol.psi(k, idx);
        for (const auto& e : lat.transitions(k, idx)) {
            if (e.prob <= 0.0) continue;
            path[static_cast<std::size_t>(k)].full = z * e.dW + u * e.dM + ps * e.dW * e.dM;
            path[static_cast<std::size_t>(k)].z_only = z * e.dW;
            self(self, k + 1, e.child);
        }
    };
    walk(walk, 0, 0);
    return rep;
}

}  // namespace rabsde
