#pragma once

#include "rabsde/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace rabsde {

/// Piecewise-constant default intensity, one value per time step.
struct IntensitySpec {
    std::vector<double> values;
    double lambda_max = 0.0;

    static IntensitySpec constant(double lambda, int n_steps) {
        return IntensitySpec{std::vector<double>(static_cast<std::size_t>(n_steps), lambda), lambda};
    }

    static IntensitySpec piecewise(std::vector<double> values) {
        double hi = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
        return IntensitySpec{std::move(values), hi};
    }
};

/// Sentinel for NodeId::default_step on pre-default nodes.
inline constexpr int kAlive = 0;

/// A lattice state: time step, number of Brownian up-moves and the step at which
/// default happened (kAlive before default).
struct NodeId {
    int step = 0;
    int up = 0;
    int default_step = kAlive;

    bool alive() const noexcept { return default_step == kAlive; }
    friend bool operator==(const NodeId&, const NodeId&) = default;
};

inline std::string to_string(const NodeId& n) {
    return "(" + std::to_string(n.step) + "," + std::to_string(n.up) + "," +
           (n.alive() ? std::string("ALIVE") : std::to_string(n.default_step)) + ")";
}

/// One edge of the transition kernel.
struct Transition {
    std::size_t child = 0;  ///< index of the child inside step k+1
    double prob = 0.0;
    double dW = 0.0;
    double dH = 0.0;
    double dM = 0.0;
};

/// Up to four outgoing edges; post-default nodes have two.
struct Transitions {
    std::array<Transition, 4> edges{};
    int count = 0;

    const Transition* begin() const noexcept { return edges.data(); }
    const Transition* end() const noexcept { return edges.data() + count; }
};

/// Binomial Brownian lattice crossed with a single default jump.
///
/// Step k holds (k+1)^2 nodes: k+1 pre-default nodes followed by k blocks of
/// k+1 nodes, one block per possible default step d in [1, k]. Within a step a
/// node's index is `default_step * (k+1) + up`.
///
/// From a pre-default node the Brownian increment (+-sqrt(dt)) and the default
/// indicator increment (0 or 1, with probability p_k = lambda_k dt) branch
/// independently. After default only W moves. The compensated process
/// M = H - sum lambda_i dt 1{pre-default} is therefore an exact discrete
/// martingale, and dW, dM, dW*dM are mutually orthogonal under every kernel.
class DefaultLattice {
public:
    DefaultLattice(double horizon, int n_steps, IntensitySpec intensity)
        : horizon_(horizon), n_steps_(n_steps), intensity_(std::move(intensity)) {
        if (!(horizon > 0.0) || !std::isfinite(horizon))
            throw InvalidArgument("horizon must be a positive finite number");
        if (n_steps <= 0) throw InvalidArgument("n_steps must be positive");
        if (intensity_.values.size() != static_cast<std::size_t>(n_steps))
            throw InvalidArgument("intensity has " + std::to_string(intensity_.values.size()) +
                                  " values, expected " + std::to_string(n_steps));
        if (!(intensity_.lambda_max >= 0.0))
            throw InvalidArgument("lambda_max must be non-negative");
        dt_ = horizon / n_steps;
        sqrt_dt_ = std::sqrt(dt_);
        for (int k = 0; k < n_steps; ++k) {
            double lam = intensity_.values[static_cast<std::size_t>(k)];
            if (!(lam >= 0.0) || !std::isfinite(lam))
                throw InvalidArgument("negative or non-finite intensity at step " + std::to_string(k));
            if (lam > intensity_.lambda_max)
                throw InvalidArgument("intensity at step " + std::to_string(k) + " exceeds lambda_max");
            if (!(lam * dt_ < 1.0))
                throw InvalidArgument("default probability lambda*dt = " + std::to_string(lam * dt_) +
                                      " >= 1 at step " + std::to_string(k) + "; refine the time step");
        }
    }

    double horizon() const noexcept { return horizon_; }
    int n_steps() const noexcept { return n_steps_; }
    double dt() const noexcept { return dt_; }
    double sqrt_dt() const noexcept { return sqrt_dt_; }
    const IntensitySpec& intensity() const noexcept { return intensity_; }

    double lambda(int k) const { return k < n_steps_ ? intensity_.values[static_cast<std::size_t>(k)] : 0.0; }
    double jump_prob(int k) const { return lambda(k) * dt_; }
    double time(int k) const noexcept { return k * dt_; }

    static std::size_t node_count(int k) noexcept {
        auto m = static_cast<std::size_t>(k + 1);
        return m * m;
    }

    bool contains(const NodeId& n) const noexcept {
        return n.step >= 0 && n.step <= n_steps_ && n.up >= 0 && n.up <= n.step &&
               n.default_step >= 0 && n.default_step <= n.step;
    }

    std::size_t index(const NodeId& n) const {
        if (!contains(n)) throw InvalidArgument("node " + to_string(n) + " is not in the lattice");
        return static_cast<std::size_t>(n.default_step) * static_cast<std::size_t>(n.step + 1) +
               static_cast<std::size_t>(n.up);
    }

    static NodeId node(int k, std::size_t idx) noexcept {
        auto width = static_cast<std::size_t>(k + 1);
        return NodeId{k, static_cast<int>(idx % width), static_cast<int>(idx / width)};
    }

    double w(const NodeId& n) const noexcept { return (2 * n.up - n.step) * sqrt_dt_; }
    static double h(const NodeId& n) noexcept { return n.alive() ? 0.0 : 1.0; }

    /// Default time stopped at the node's time: tau ^ t_k.
    double tau(const NodeId& n) const noexcept { return (n.alive() ? n.step : n.default_step) * dt_; }

    /// Sum of lambda_i dt over pre-default steps i < k (the compensator of H).
    double compensator(const NodeId& n) const noexcept {
        int upto = n.alive() ? n.step : n.default_step;
        double acc = 0.0;
        for (int i = 0; i < upto; ++i) acc += jump_prob(i);
        return acc;
    }

    Transitions transitions(int k, std::size_t idx) const {
        Transitions out;
        if (k >= n_steps_) return out;
        NodeId n = node(k, idx);
        auto width = static_cast<std::size_t>(k + 2);
        auto at = [&](int up, int d) {
            return static_cast<std::size_t>(d) * width + static_cast<std::size_t>(up);
        };
        if (n.alive()) {
            double p = jump_prob(k);
            double q = 1.0 - p;
            out.edges[0] = {at(n.up + 1, kAlive), 0.5 * q, sqrt_dt_, 0.0, -p};
            out.edges[1] = {at(n.up, kAlive), 0.5 * q, -sqrt_dt_, 0.0, -p};
            out.edges[2] = {at(n.up + 1, k + 1), 0.5 * p, sqrt_dt_, 1.0, q};
            out.edges[3] = {at(n.up, k + 1), 0.5 * p, -sqrt_dt_, 1.0, q};
            out.count = 4;
        } else {
            out.edges[0] = {at(n.up + 1, n.default_step), 0.5, sqrt_dt_, 0.0, 0.0};
            out.edges[1] = {at(n.up, n.default_step), 0.5, -sqrt_dt_, 0.0, 0.0};
            out.count = 2;
        }
        return out;
    }

    /// One-step conditional expectation: values at step k+1 -> values at step k.
    std::vector<double> expect_one_step(int k, std::span<const double> next) const {
        if (k < 0 || k >= n_steps_) throw InvalidArgument("expect_one_step: step out of range");
        if (next.size() != node_count(k + 1)) throw InvalidArgument("expect_one_step: field size mismatch");
        std::vector<double> out(node_count(k));
        for (std::size_t i = 0; i < out.size(); ++i) {
            double acc = 0.0;
            for (const auto& e : transitions(k, i)) acc += e.prob * next[e.child];
            out[i] = acc;
        }
        return out;
    }

    /// Tower expectation of values given at step `from_step` down to step `to_step`.
    std::vector<double> expect_steps(int from_step, std::span<const double> values, int to_step) const {
        if (to_step > from_step) throw InvalidArgument("conditional expectation must look forward in time");
        if (values.size() != node_count(from_step)) throw InvalidArgument("field size mismatch");
        std::vector<double> cur(values.begin(), values.end());
        for (int k = from_step - 1; k >= to_step; --k) cur = expect_one_step(k, cur);
        return cur;
    }

    /// Probability of each node under the law started at the root.
    std::vector<std::vector<double>> root_law() const {
        std::vector<std::vector<double>> law(static_cast<std::size_t>(n_steps_ + 1));
        law[0] = {1.0};
        for (int k = 0; k < n_steps_; ++k) {
            auto& next = law[static_cast<std::size_t>(k + 1)];
            next.assign(node_count(k + 1), 0.0);
            const auto& cur = law[static_cast<std::size_t>(k)];
            for (std::size_t i = 0; i < cur.size(); ++i)
                for (const auto& e : transitions(k, i)) next[e.child] += cur[i] * e.prob;
        }
        return law;
    }

private:
    double horizon_;
    int n_steps_;
    double dt_ = 0.0;
    double sqrt_dt_ = 0.0;
    IntensitySpec intensity_;
};

inline DefaultLattice build_lattice(double horizon, int n_steps, IntensitySpec intensity) {
    return DefaultLattice(horizon, n_steps, std::move(intensity));
}

/// Node-indexed real values over a contiguous range of steps.
class ProcessField {
public:
    ProcessField() = default;

    ProcessField(int first_step, int last_step, double fill = 0.0) : first_(first_step) {
        if (first_step < 0 || last_step < first_step) throw InvalidArgument("invalid field step range");
        data_.reserve(static_cast<std::size_t>(last_step - first_step + 1));
        for (int k = first_step; k <= last_step; ++k) data_.emplace_back(DefaultLattice::node_count(k), fill);
    }

    /// Field covering every step of `lattice`.
    static ProcessField over(const DefaultLattice& lattice, double fill = 0.0) {
        return ProcessField(0, lattice.n_steps(), fill);
    }

    /// Field sampled from a function of (lattice, node).
    template <typename Fn>
    static ProcessField from(const DefaultLattice& lattice, Fn&& fn) {
        ProcessField f = over(lattice);
        for (int k = 0; k <= lattice.n_steps(); ++k) {
            auto vals = f.at_step(k);
            for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = fn(DefaultLattice::node(k, i));
        }
        return f;
    }

    int first_step() const noexcept { return first_; }
    int last_step() const noexcept { return first_ + static_cast<int>(data_.size()) - 1; }
    bool covers(int k) const noexcept { return !data_.empty() && k >= first_ && k <= last_step(); }

    std::span<double> at_step(int k) { return data_.at(slot(k)); }
    std::span<const double> at_step(int k) const { return data_.at(slot(k)); }

    double& operator()(int k, std::size_t idx) { return data_[slot(k)][idx]; }
    double operator()(int k, std::size_t idx) const { return data_[slot(k)][idx]; }

    double at(const DefaultLattice& lattice, const NodeId& n) const {
        if (!covers(n.step)) throw InvalidArgument("field does not cover step " + std::to_string(n.step));
        return data_[slot(n.step)][lattice.index(n)];
    }

private:
    std::size_t slot(int k) const {
        if (!covers(k)) throw InvalidArgument("field does not cover step " + std::to_string(k));
        return static_cast<std::size_t>(k - first_);
    }

    int first_ = 0;
    std::vector<std::vector<double>> data_;
};

/// E[field_{target_step} | G_{at.step}] evaluated at node `at`.
inline double cond_expect(const DefaultLattice& lattice, const ProcessField& field, int target_step,
                          const NodeId& at) {
    if (!lattice.contains(at)) throw InvalidArgument("node " + to_string(at) + " is not in the lattice");
    if (target_step < at.step)
        throw InvalidArgument("step mismatch: target step " + std::to_string(target_step) +
                              " precedes node step " + std::to_string(at.step));
    if (!field.covers(target_step))
        throw InvalidArgument("step mismatch: field does not cover step " + std::to_string(target_step));
    auto vals = lattice.expect_steps(target_step, field.at_step(target_step), at.step);
    return vals[lattice.index(at)];
}

/// Compensated default martingale M_k = H_k - sum_{i < k ^ d} lambda_i dt.
inline ProcessField martingale_M(const DefaultLattice& lattice) {
    return ProcessField::from(lattice, [&](const NodeId& n) {
        return DefaultLattice::h(n) - lattice.compensator(n);
    });
}

struct BracketReport {
    /// max |[M]_k - H_k| over every edge-propagated path value
    double bracket_violation = 0.0;
    /// max |E[(H - Lambda)_{k+1} | node] - (H - Lambda)_k|, i.e. how far Lambda is from compensating H
    double compensator_violation = 0.0;
    /// max |E[dW | node]| and |E[dM | node]|, from the M field itself
    double increment_mean_violation = 0.0;

    double max_violation() const noexcept {
        return std::max({bracket_violation, compensator_violation, increment_mean_violation});
    }
};

/// Checks the bracket structure of M on every edge of the lattice.
///
/// The jump part of each increment of M is dM + lambda dt 1{pre-default}; its
/// running sum of squares is propagated forward along every edge and compared to
/// H at the child. Because every path is a chain of edges, covering each edge from
/// every parent value covers every path.
inline BracketReport bracket_checks(const DefaultLattice& lattice) {
    BracketReport rep;
    ProcessField m = martingale_M(lattice);
    // Pathwise bracket: every parent reaching a node carries the same bracket value
    // when [M] = H; store the value and keep the worst deviation seen.
    std::vector<double> bracket_cur{0.0};
    for (int k = 0; k < lattice.n_steps(); ++k) {
        std::vector<double> bracket_next(DefaultLattice::node_count(k + 1), 0.0);
        auto mk = m.at_step(k);
        auto mk1 = m.at_step(k + 1);
        for (std::size_t i = 0; i < mk.size(); ++i) {
            NodeId parent = DefaultLattice::node(k, i);
            double pre = parent.alive() ? lattice.jump_prob(k) : 0.0;
            double mean_dw = 0.0;
            double mean_dm = 0.0;
            for (const auto& e : lattice.transitions(k, i)) {
                double dm = mk1[e.child] - mk[i];
                mean_dw += e.prob * e.dW;
                mean_dm += e.prob * dm;
                double jump = dm + pre;
                double b = bracket_cur[i] + jump * jump;
                double hv = DefaultLattice::h(DefaultLattice::node(k + 1, e.child));
                rep.bracket_violation = std::max(rep.bracket_violation, std::abs(b - hv));
                bracket_next[e.child] = b;
            }
            rep.increment_mean_violation =
                std::max({rep.increment_mean_violation, std::abs(mean_dw), std::abs(mean_dm)});
        }
        bracket_cur = std::move(bracket_next);
    }
    // H - Lambda must be a martingale from every node: compare the tower
    // expectation of the terminal value with the value at each node.
    ProcessField h_minus_lambda = ProcessField::from(lattice, [&](const NodeId& n) {
        return DefaultLattice::h(n) - lattice.compensator(n);
    });
    std::vector<double> cur(h_minus_lambda.at_step(lattice.n_steps()).begin(),
                            h_minus_lambda.at_step(lattice.n_steps()).end());
    for (int k = lattice.n_steps() - 1; k >= 0; --k) {
        cur = lattice.expect_one_step(k, cur);
        auto ref = h_minus_lambda.at_step(k);
        for (std::size_t i = 0; i < cur.size(); ++i)
            rep.compensator_violation = std::max(rep.compensator_violation, std::abs(cur[i] - ref[i]));
    }
    return rep;
}

}  // namespace rabsde
