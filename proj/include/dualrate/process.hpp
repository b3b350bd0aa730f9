// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "dualrate/common.hpp"
#include "dualrate/matrix.hpp"
#include "dualrate/rng.hpp"
#include "dualrate/schedule.hpp"

namespace dualrate {

// A batch of latents tagged with the time they live at.
struct NoisyState {
    Matrix z;
    double t = 0;
};

// Gaussian transition q(z_s | z_t, x_hat) for s < t: isotropic with one
// shared stddev across the batch.
struct PosteriorParams {
    Matrix mean;
    double stddev = 0;
};

// z_t = alpha_t x + sigma_t eps
inline NoisyState sample_marginal(const Matrix& x, const SnrPoint& pt, Rng& rng) {
    NoisyState out;
    out.t = pt.t;
    out.z = Matrix(x.rows, x.cols);
    for (size_t i = 0; i < x.v.size(); ++i)
        out.z.v[i] = pt.alpha * x.v[i] + pt.sigma * rng.normal();
    return out;
}

// Parameters of q(z_s | z_t, x_hat). With r = exp(lambda_t - lambda_s):
//   mean = r (alpha_s / alpha_t) z_t + (1 - r) alpha_s x_hat
//   var  = (1 - r) sigma_s^2
// noise_interp in [0, 1] interpolates the log-variance towards the upper
// bound sigma_{t|s}^2 = sigma_t^2 - (alpha_t / alpha_s)^2 sigma_s^2 (the
// forward transition variance), i.e. 0 keeps the exact posterior and 1 uses
// the maximally noisy reverse step.
//
// The z_t coefficient is computed as alpha_t sigma_s^2 / (sigma_t^2 alpha_s),
// which equals r alpha_s / alpha_t but stays finite when alpha_t underflows
// at the high-noise end of the schedule.
inline PosteriorParams posterior_params(const NoisyState& z_t, const Matrix& x_hat,
                                        const SnrPoint& pt_s, const SnrPoint& pt_t,
                                        double noise_interp = 0.0) {
    if (!z_t.z.same_shape(x_hat))
        throw ConfigError("posterior: z and x_hat shapes differ");
    if (noise_interp < 0 || noise_interp > 1)
        throw ConfigError("posterior: noise_interp outside [0, 1]");
    if (pt_s.t == pt_t.t) {
        PosteriorParams p;
        p.mean = z_t.z;
        p.stddev = 0;
        return p;
    }
    if (!(pt_s.t < pt_t.t))
        throw ConfigError("posterior: target time must precede source time");

    double r = std::exp(pt_t.lambda - pt_s.lambda);
    double coef_z = pt_t.alpha * (pt_s.sigma * pt_s.sigma) / (pt_t.sigma * pt_t.sigma * pt_s.alpha);
    double coef_x = (1.0 - r) * pt_s.alpha;
    double var_post = (1.0 - r) * pt_s.sigma * pt_s.sigma;
    double ratio = pt_t.alpha / pt_s.alpha;
    double var_upper = pt_t.sigma * pt_t.sigma - ratio * ratio * pt_s.sigma * pt_s.sigma;
    if (var_upper < 0) var_upper = 0;  // rounding at nearby times
    if (var_post < 0) var_post = 0;

    double var;
    if (noise_interp <= 0)
        var = var_post;
    else if (noise_interp >= 1)
        var = var_upper;
    else
        var = std::pow(var_post, 1.0 - noise_interp) * std::pow(var_upper, noise_interp);

    PosteriorParams p;
    p.mean = Matrix(z_t.z.rows, z_t.z.cols);
    for (size_t i = 0; i < p.mean.v.size(); ++i)
        p.mean.v[i] = coef_z * z_t.z.v[i] + coef_x * x_hat.v[i];
    p.stddev = std::sqrt(var);
    return p;
}

inline NoisyState sample_posterior(const PosteriorParams& p, const SnrPoint& pt_s, Rng& rng) {
    NoisyState out;
    out.t = pt_s.t;
    out.z = p.mean;
    if (p.stddev > 0)
        for (double& z : out.z.v) z += p.stddev * rng.normal();
    return out;
}

// Joint times for one training step with K context refreshes per unit time:
// tau uniform over [1/K, 1], then t = tau - delta with delta uniform over
// (0, 1/K], so the light time always falls inside the context window that a
// K-step coarse grid would provide.
struct TimePair {
    double tau = 1;
    double t = 0;
};

inline TimePair sample_training_times(int K, Rng& rng) {
    if (K < 1) throw ConfigError("times: K must be at least 1");
    TimePair tp;
    double inv = 1.0 / K;
    tp.tau = rng.uniform(inv, 1.0);
    double delta = inv * (1.0 - rng.uniform());  // in (0, 1/K]
    tp.t = std::max(0.0, tp.tau - delta);
    return tp;
}

// q(z_t | z_tau, x) for t < tau: the forward bridge, i.e. the exact posterior
// with the clean data standing in for the prediction. t == tau passes z_tau
// through unchanged.
inline NoisyState sample_bridge(const NoisyState& z_tau, const Matrix& x,
                                const SnrPoint& pt_t, const SnrPoint& pt_tau, Rng& rng) {
    if (pt_t.t == pt_tau.t) {
        NoisyState out;
        out.z = z_tau.z;
        out.t = pt_t.t;
        return out;
    }
    if (!(pt_t.t < pt_tau.t))
        throw ConfigError("bridge: target time must precede the context time");
    PosteriorParams p = posterior_params(z_tau, x, pt_t, pt_tau, 0.0);
    return sample_posterior(p, pt_t, rng);
}

}  // namespace dualrate
