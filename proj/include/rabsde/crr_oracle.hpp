#pragma once

#include "rabsde/error.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace rabsde::oracle {

/// Textbook American put on a recombining binomial stock tree.
///
/// Price S = spot * exp(sigma * W) with W on the +-sqrt(dt) walk, so
/// u = exp(sigma sqrt(dt)), d = 1/u, and the branching probability is 1/2 (the
/// measure under which W is a martingale). Each step discounts with
/// (1 - r dt), the explicit Euler factor of the linear driver -r y.
struct AmericanPut {
    double spot = 1.0;
    double strike = 1.0;
    double rate = 0.04;
    double sigma = 1.0;
    double horizon = 1.0;
    int steps = 8;

    double price() const {
        if (steps <= 0 || !(horizon > 0.0)) throw InvalidArgument("CRR tree needs positive steps and horizon");
        const double dt = horizon / steps;
        const double up = std::exp(sigma * std::sqrt(dt));
        const double down = 1.0 / up;
        const double disc = 1.0 - rate * dt;
        const double prob = 0.5;
        // option[j] = value with j up-moves at the current level
        std::vector<double> option(static_cast<std::size_t>(steps) + 1);
        for (int j = 0; j <= steps; ++j) {
            double s = spot * std::pow(up, j) * std::pow(down, steps - j);
            option[static_cast<std::size_t>(j)] = std::max(strike - s, 0.0);
        }
        for (int level = steps - 1; level >= 0; --level) {
            for (int j = 0; j <= level; ++j) {
                double s = spot * std::pow(up, j) * std::pow(down, level - j);
                double hold = disc * (prob * option[static_cast<std::size_t>(j) + 1] +
                                      (1.0 - prob) * option[static_cast<std::size_t>(j)]);
                option[static_cast<std::size_t>(j)] = std::max(hold, strike - s);
            }
        }
        return option[0];
    }
};

}  // namespace rabsde::oracle
