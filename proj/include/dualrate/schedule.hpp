// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>

#include "dualrate/common.hpp"

namespace dualrate {

// One point of the forward process: z_t = alpha * x + sigma * eps with
// alpha^2 + sigma^2 = 1 and lambda = log(alpha^2 / sigma^2).
struct SnrPoint {
    double t = 0;
    double lambda = 0;
    double alpha = 1;
    double sigma = 0;
    double dlambda_dt = 0;
};

// Cosine log-SNR schedule, optionally clamped to a finite lambda range by
// linearly remapping t in [0,1] onto the raw-time interval [t_lo, t_hi] that
// realizes [lambda_max, lambda_min]. The raw schedule is
//   alpha = cos(pi u / 2),  sigma = sin(pi u / 2),
// whose log-SNR is lambda(u) = -2 log tan(pi u / 2), strictly decreasing.
struct LogSnrSchedule {
    double lambda_min = -12.0;
    double lambda_max = 12.0;
    double t_lo = 0.0;  // raw time where lambda = lambda_max
    double t_hi = 1.0;  // raw time where lambda = lambda_min

    // Raw time u in [0,1] with lambda(u) = lambda. Monotone decreasing in
    // lambda; maps +inf -> 0 and -inf -> 1.
    static double raw_time_of_lambda(double lambda) {
        return (2.0 / M_PI) * std::atan(std::exp(-0.5 * lambda));
    }

    static LogSnrSchedule cosine(double lambda_min, double lambda_max) {
        if (!(lambda_min < lambda_max))
            throw ConfigError("schedule: lambda_min must be strictly below lambda_max");
        LogSnrSchedule s;
        s.lambda_min = lambda_min;
        s.lambda_max = lambda_max;
        s.t_lo = raw_time_of_lambda(lambda_max);
        s.t_hi = raw_time_of_lambda(lambda_min);
        return s;
    }

    // Unclamped variant: lambda runs over the whole real line, with the
    // expected infinities at the endpoints.
    static LogSnrSchedule cosine_unclamped() {
        return cosine(-std::numeric_limits<double>::infinity(),
                      std::numeric_limits<double>::infinity());
    }

    SnrPoint eval(double t) const {
        if (!(t >= 0.0 && t <= 1.0))
            throw ConfigError("schedule: t outside [0, 1]");
        double u = t_lo + (t_hi - t_lo) * t;
        SnrPoint p;
        p.t = t;
        p.alpha = std::cos(0.5 * M_PI * u);
        p.sigma = std::sin(0.5 * M_PI * u);
        p.lambda = 2.0 * (std::log(p.alpha) - std::log(p.sigma));
        // dlambda/du = -2 pi / sin(pi u), times the remap slope.
        p.dlambda_dt = -2.0 * M_PI * (t_hi - t_lo) / std::sin(M_PI * u);
        return p;
    }

    // Inverse of eval().lambda; clamps to [0,1] only against rounding at the
    // boundaries, not against out-of-range lambda.
    double time_of_lambda(double lambda) const {
        double u = raw_time_of_lambda(lambda);
        double t = (u - t_lo) / (t_hi - t_lo);
        if (t < 0.0) t = 0.0;
        if (t > 1.0) t = 1.0;
        return t;
    }
};

enum class WeightMode { Sigmoid, Unit };

// Loss weighting as a function of log-SNR.
struct LossWeight {
    WeightMode mode = WeightMode::Sigmoid;
    double bias = 1.0;

    double operator()(double lambda) const {
        if (mode == WeightMode::Unit) return 1.0;
        return 1.0 / (1.0 + std::exp(bias - lambda));
    }
};

}  // namespace dualrate
