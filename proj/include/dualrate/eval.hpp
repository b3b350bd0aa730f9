// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/data.hpp"
#include "dualrate/matrix.hpp"
#include "dualrate/models.hpp"
#include "dualrate/process.hpp"
#include "dualrate/rng.hpp"
#include "dualrate/schedule.hpp"

namespace dualrate {

// Sliced Wasserstein-2 between two point sets: project onto random unit
// directions, take the exact 1-D W2 between the empirical distributions, and
// average the squared distances over projections before the final sqrt.
inline double sliced_w2(const Matrix& a, const Matrix& b, int n_projections, Rng& rng) {
    if (a.cols != b.cols) throw ConfigError("sliced w2: dimension mismatch");
    if (a.rows < 1 || b.rows < 1) throw ConfigError("sliced w2: empty sample set");
    if (n_projections < 1) throw ConfigError("sliced w2: need at least one projection");

    const int d = a.cols;
    const long n = a.rows, m = b.rows;
    std::vector<double> dir(d), pa(n), pb(m);
    double total = 0;
    for (int p = 0; p < n_projections; ++p) {
        double norm = 0;
        do {
            norm = 0;
            for (int i = 0; i < d; ++i) {
                dir[i] = rng.normal();
                norm += dir[i] * dir[i];
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-12);
        for (int i = 0; i < d; ++i) dir[i] /= norm;

        for (long i = 0; i < n; ++i) pa[i] = dot(a.row(static_cast<int>(i)), dir.data(), d);
        for (long j = 0; j < m; ++j) pb[j] = dot(b.row(static_cast<int>(j)), dir.data(), d);
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());

        // Exact quantile coupling: both empirical quantile functions are
        // step functions on grids of 1/n and 1/m, so integrate over the
        // merged breakpoints in units of 1/(n*m) to avoid any rounding.
        double w2 = 0;
        long i = 0, j = 0, cur = 0;
        const long denom = n * m;
        while (cur < denom) {
            long next = std::min((i + 1) * m, (j + 1) * n);
            double diff = pa[i] - pb[j];
            w2 += static_cast<double>(next - cur) * diff * diff;
            if (next == (i + 1) * m) ++i;
            if (next == (j + 1) * n) ++j;
            cur = next;
        }
        total += w2 / static_cast<double>(denom);
    }
    return std::sqrt(total / n_projections);
}

// Distance between two independent draws of the same distribution: the floor
// any generative model can be measured against at matched sample size.
inline double gmm_resampling_baseline(const GmmSpec& g, int n, int n_projections, Rng& rng) {
    DataBatch a = gmm_sample(g, n, rng);
    DataBatch b = gmm_sample(g, n, rng);
    return sliced_w2(a.x, b.x, n_projections, rng);
}

// One model evaluation used by the metrics below: predict x from (z_t, t)
// given context (z_tau, tau) and labels.
using PredictFn = std::function<Matrix(const Matrix& z_t, const SnrPoint& pt_t,
                                       const Matrix& z_tau, const SnrPoint& pt_tau,
                                       std::span<const int> labels)>;

// The wrapped model must outlive the returned function; the parameters are
// copied so an EMA shadow can be passed without keeping it alive.
inline PredictFn make_model_predictor(const DualRateModel& m, std::span<const double> params) {
    auto p = std::make_shared<std::vector<double>>(params.begin(), params.end());
    const DualRateModel* mp = &m;
    return [mp, p](const Matrix& z_t, const SnrPoint& pt_t, const Matrix& z_tau,
                   const SnrPoint& pt_tau, std::span<const int> labels) {
        ContextFeatures f = encode_context(*mp, *p, z_tau, pt_tau.t, labels);
        NoisyState zs{z_t, pt_t.t};
        return denoise(*mp, *p, zs, pt_t, f, labels).pred.x_hat;
    };
}

inline PredictFn make_oracle_predictor(const GmmSpec& g) {
    GmmSpec copy = g;
    return [copy](const Matrix& z_t, const SnrPoint& pt_t, const Matrix&, const SnrPoint&,
                  std::span<const int> labels) { return oracle_denoiser(copy, z_t, pt_t, labels); };
}

struct OracleMsePoint {
    double lambda = 0;
    double t = 0;
    double tau = 0;
    double mse = 0;
};

struct OracleMseResult {
    std::vector<OracleMsePoint> points;
    double mean = 0;

    double mean_in(double lambda_lo, double lambda_hi) const {
        double s = 0;
        int n = 0;
        for (const auto& p : points)
            if (p.lambda >= lambda_lo && p.lambda <= lambda_hi) {
                s += p.mse;
                ++n;
            }
        if (n == 0) throw ConfigError("oracle mse: empty lambda range");
        return s / n;
    }
};

inline std::vector<double> default_lambda_grid() {
    std::vector<double> g;
    for (int i = -8; i <= 8; ++i) g.push_back(static_cast<double>(i));
    return g;
}

// Mean squared gap between the model prediction and the exact mixture
// posterior mean, per dimension, profiled over a log-SNR grid. The context
// time is the model's own coarse grid point just above t, matching how the
// sampler would call it.
inline OracleMseResult oracle_mse(const PredictFn& predict, const GmmSpec& data, int K,
                                  const LogSnrSchedule& sched,
                                  std::span<const double> lambda_grid, int n_per_point,
                                  Rng& rng) {
    if (K < 1) throw ConfigError("oracle mse: K must be at least 1");
    if (n_per_point < 1) throw ConfigError("oracle mse: need samples per grid point");
    OracleMseResult res;
    for (double lambda : lambda_grid) {
        double t = sched.time_of_lambda(lambda);
        int i = static_cast<int>(std::ceil(t * K));
        if (i < 1) i = 1;
        if (i > K) i = K;
        double tau = static_cast<double>(i) / K;
        if (tau < t) tau = t;
        SnrPoint pt_t = sched.eval(t);
        SnrPoint pt_tau = sched.eval(tau);

        DataBatch batch = gmm_sample(data, n_per_point, rng);
        NoisyState z_tau = sample_marginal(batch.x, pt_tau, rng);
        NoisyState z_t = sample_bridge(z_tau, batch.x, pt_t, pt_tau, rng);
        Matrix pred = predict(z_t.z, pt_t, z_tau.z, pt_tau, batch.labels);
        Matrix truth = oracle_denoiser(data, z_t.z, pt_t, batch.labels);
        double mse = squared_distance(pred, truth) /
                     (static_cast<double>(pred.rows) * pred.cols);
        res.points.push_back({lambda, t, tau, mse});
        res.mean += mse;
    }
    res.mean /= static_cast<double>(res.points.size());
    return res;
}

struct ElboResult {
    double nats_per_dim = 0;      // diffusion term plus prior term
    double std_error = 0;         // Monte Carlo error of the diffusion term
    double prior_kl_per_dim = 0;  // KL(q(z_1 | x) || N(0, I)), averaged
    long n_draws = 0;
};

// Monte Carlo bound on -log p(x) in nats per dimension: each draw samples a
// joint (tau, t) pair and fresh noise for the whole batch, and evaluates
//   -dlambda/dt * e^lambda * ||x - x_hat||^2 / (2 dim).
// Unit weighting, since this is the actual bound rather than a training
// objective.
inline ElboResult elbo_estimate(const PredictFn& predict, const DataBatch& batch, int K,
                                const LogSnrSchedule& sched, long n_draws, Rng& rng) {
    if (batch.x.rows < 1) throw ConfigError("elbo: empty batch");
    if (n_draws < 2) throw ConfigError("elbo: need at least two draws");
    const int B = batch.x.rows, D = batch.x.cols;

    ElboResult res;
    res.n_draws = n_draws;

    SnrPoint top = sched.eval(1.0);
    double prior = 0;
    for (int i = 0; i < B; ++i) {
        double sq = dot(batch.x.row(i), batch.x.row(i), D);
        prior += 0.5 * (top.alpha * top.alpha * sq +
                        D * (top.sigma * top.sigma - 1.0 - std::log(top.sigma * top.sigma)));
    }
    res.prior_kl_per_dim = prior / (static_cast<double>(B) * D);

    double sum = 0, sumsq = 0;
    for (long it = 0; it < n_draws; ++it) {
        TimePair tp = sample_training_times(K, rng);
        SnrPoint pt_tau = sched.eval(tp.tau);
        SnrPoint pt_t = sched.eval(tp.t);
        NoisyState z_tau = sample_marginal(batch.x, pt_tau, rng);
        NoisyState z_t = sample_bridge(z_tau, batch.x, pt_t, pt_tau, rng);
        Matrix pred = predict(z_t.z, pt_t, z_tau.z, pt_tau, batch.labels);
        double mse = squared_distance(pred, batch.x) / static_cast<double>(B);
        double val = -pt_t.dlambda_dt * std::exp(pt_t.lambda) * mse / (2.0 * D);
        sum += val;
        sumsq += val * val;
    }
    double mean = sum / n_draws;
    double var = std::max(0.0, sumsq / n_draws - mean * mean);
    res.std_error = std::sqrt(var / n_draws);
    res.nats_per_dim = mean + res.prior_kl_per_dim;
    return res;
}

// Per-sample compute, in whatever unit the per-evaluation costs are given.
// K heavy evaluations plus k light ones, with guided evaluations counted
// twice when guidance_doubling is set.
struct CostModel {
    double c_encoder = 108.45;
    double c_denoiser = 44.02;
    bool guidance_doubling = true;
};

inline double inference_cost(const CostModel& c, long K, long k, long guided_heavy = 0,
                             long guided_light = 0) {
    if (K < 0 || k < 0 || guided_heavy < 0 || guided_light < 0)
        throw ConfigError("cost: negative evaluation count");
    double gh = c.guidance_doubling ? static_cast<double>(guided_heavy) : 0.0;
    double gl = c.guidance_doubling ? static_cast<double>(guided_light) : 0.0;
    return (static_cast<double>(K) + gh) * c.c_encoder +
           (static_cast<double>(k) + gl) * c.c_denoiser;
}

}  // namespace dualrate
