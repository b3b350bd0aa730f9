// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "dualrate/common.hpp"
#include "dualrate/matrix.hpp"

namespace dualrate {

// Seeded generator with hand-rolled output transforms. std::* distributions
// are avoided on purpose: normal_distribution caches a spare draw, which makes
// the stream position depend on call history and breaks checkpoint resume.
// Every draw here consumes a fixed number of engine steps.
struct Rng {
    std::mt19937_64 engine;

    Rng() : engine(0) {}
    explicit Rng(uint64_t seed) : engine(seed) {}

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(engine() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without the cached second value: two engine steps per draw.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // 1 - u1 is in (0, 1], so the log is finite.
        return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Integer in [0, n). Modulo bias is below 2^-32 for any n that fits an
    // int, far under anything the statistical tests can resolve.
    int uniform_int(int n) {
        return static_cast<int>(engine() % static_cast<uint64_t>(n));
    }

    // Derive an independent stream; advances this engine by one step.
    Rng split() { return Rng(engine()); }

    void fill_normal(Matrix& m) {
        for (double& x : m.v) x = normal();
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine;
        return os.str();
    }

    [[nodiscard]] static Rng deserialize(const std::string& text) {
        Rng r;
        std::istringstream is(text);
        is >> r.engine;
        if (is.fail()) throw IoError("rng state: unparsable engine text");
        return r;
    }
};

}  // namespace dualrate
