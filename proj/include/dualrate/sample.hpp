// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
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

struct SampleConfig {
    int K = 8;              // context refreshes
    int k = 64;             // denoising steps; K divides k
    GuidanceConfig guidance;
    double noise_interp = 0.2;  // 0 = exact posterior steps, 1 = forward-variance steps
    bool clip = false;          // clamp predictions to [-1, 1] (image-like data)
    int n_samples = 1;
    bool record_states = false;

    void validate() const {
        if (K < 1) throw ConfigError("sample: K must be at least 1");
        if (k < K || k % K != 0) throw ConfigError("sample: K must divide k");
        if (noise_interp < 0 || noise_interp > 1)
            throw ConfigError("sample: noise_interp outside [0, 1]");
        if (n_samples < 1) throw ConfigError("sample: n_samples must be positive");
    }
};

struct TraceStep {
    double t = 0;
    double tau = 0;
    bool refreshed = false;     // heavy network ran at this step
    bool heavy_guided = false;  // refresh included the unconditional context pass
    bool guided = false;        // light evaluation was doubled by guidance
    Matrix z;                   // latent entering the step (record_states only)
    Matrix x_hat;               // prediction at the step (record_states only)
};

struct SampleTrace {
    std::vector<TraceStep> steps;
};

struct NfeCount {
    long heavy = 0;
    long light = 0;
    long guided_heavy = 0;
    long guided_light = 0;
};

inline NfeCount count_nfe(const SampleTrace& trace) {
    NfeCount c;
    for (const TraceStep& s : trace.steps) {
        c.light += 1;
        if (s.guided) c.guided_light += 1;
        if (s.refreshed) {
            c.heavy += 1;
            if (s.heavy_guided) c.guided_heavy += 1;
        }
    }
    return c;
}

namespace detail {

inline std::vector<double> step_lambdas(const SampleConfig& cfg, const LogSnrSchedule& sched) {
    std::vector<double> l(cfg.k);
    for (int i = 0; i < cfg.k; ++i)
        l[i] = sched.eval(static_cast<double>(cfg.k - i) / cfg.k).lambda;
    return l;
}

// Whether any light step of the segment starting at index i falls in the
// guidance window, in which case the refresh must also encode the
// unconditional branch.
inline bool segment_guided(const SampleConfig& cfg, std::span<const double> lambdas, int i) {
    if (cfg.guidance.w == 0.0) return false;
    int stride = cfg.k / cfg.K;
    for (int j = i; j < std::min(i + stride, cfg.k); ++j)
        if (guidance_active(cfg.guidance, lambdas[j])) return true;
    return false;
}

}  // namespace detail

// Evaluation counts implied by a configuration alone (no trace needed): the
// step grid and guidance window are deterministic.
inline NfeCount count_nfe(const SampleConfig& cfg, const LogSnrSchedule& sched) {
    cfg.validate();
    std::vector<double> lambdas = detail::step_lambdas(cfg, sched);
    NfeCount c;
    int stride = cfg.k / cfg.K;
    for (int i = 0; i < cfg.k; ++i) {
        c.light += 1;
        if (guidance_active(cfg.guidance, lambdas[i])) c.guided_light += 1;
        if (i % stride == 0) {
            c.heavy += 1;
            if (detail::segment_guided(cfg, lambdas, i)) c.guided_heavy += 1;
        }
    }
    return c;
}

// Ancestral sampling on the uniform k-step grid t = 1, (k-1)/k, ..., 1/k,
// refreshing the policy's context every k/K steps. The policy abstracts who
// predicts x: the trained dual-rate model, a plain denoiser, or the exact
// mixture oracle. Returns the final prediction x_hat.
template <class Policy>
Matrix ancestral_sample_core(Policy& policy, int batch, int dim, const LogSnrSchedule& sched,
                             const SampleConfig& cfg, Rng& rng, SampleTrace* trace = nullptr) {
    cfg.validate();
    std::vector<double> lambdas = detail::step_lambdas(cfg, sched);
    const int stride = cfg.k / cfg.K;

    NoisyState state;
    state.t = 1.0;
    state.z = Matrix(batch, dim);
    rng.fill_normal(state.z);

    Matrix x_hat;
    double tau = 1.0;
    for (int i = 0; i < cfg.k; ++i) {
        double t = static_cast<double>(cfg.k - i) / cfg.k;
        SnrPoint pt_t = sched.eval(t);
        state.t = t;

        bool refreshed = false, heavy_guided = false;
        if (i % stride == 0) {
            heavy_guided = detail::segment_guided(cfg, lambdas, i);
            policy.refresh(state.z, pt_t, heavy_guided);
            tau = t;
            refreshed = true;
        }

        bool guided = guidance_active(cfg.guidance, pt_t.lambda);
        x_hat = policy.predict(state.z, pt_t, guided);
        if (cfg.clip)
            for (double& v : x_hat.v) v = std::clamp(v, -1.0, 1.0);

        if (trace) {
            TraceStep rec;
            rec.t = t;
            rec.tau = tau;
            rec.refreshed = refreshed;
            rec.heavy_guided = heavy_guided;
            rec.guided = guided;
            if (cfg.record_states) {
                rec.z = state.z;
                rec.x_hat = x_hat;
            }
            trace->steps.push_back(std::move(rec));
        }

        if (i + 1 < cfg.k) {
            SnrPoint pt_s = sched.eval(static_cast<double>(cfg.k - i - 1) / cfg.k);
            PosteriorParams post = posterior_params(state, x_hat, pt_s, pt_t, cfg.noise_interp);
            state = sample_posterior(post, pt_s, rng);
        }
    }
    return x_hat;
}

// Policy wrapping a trained model: heavy refreshes re-encode context features
// (conditional, plus unconditional when the segment needs guidance), light
// steps run the denoiser.
struct ModelPolicy {
    const DualRateModel& model;
    std::span<const double> params;
    std::span<const int> labels;
    GuidanceConfig guidance;
    ContextFeatures cond, uncond;

    void refresh(const Matrix& z, const SnrPoint& pt, bool with_uncond) {
        cond = encode_context(model, params, z, pt.t, labels);
        uncond = ContextFeatures{};
        uncond.tau = pt.t;
        if (with_uncond && model.use_encoder) {
            std::vector<int> nulls = model.null_labels(z.rows);
            uncond = encode_context(model, params, z, pt.t, nulls);
        }
    }

    Matrix predict(const Matrix& z, const SnrPoint& pt, bool guided) {
        NoisyState zs;
        zs.z = z;
        zs.t = pt.t;
        if (!guided) return denoise(model, params, zs, pt, cond, labels).pred.x_hat;
        return guided_denoise(model, params, zs, pt, cond, &uncond, labels, guidance).x_hat;
    }
};

// Policy answering with the exact mixture posterior mean; context refreshes
// are free. Guidance contrasts the label-conditional oracle with the
// unconditional one.
struct OraclePolicy {
    const GmmSpec& gmm;
    std::span<const int> labels;
    GuidanceConfig guidance;

    void refresh(const Matrix&, const SnrPoint&, bool) {}

    Matrix predict(const Matrix& z, const SnrPoint& pt, bool guided) {
        Matrix cond = oracle_denoiser(gmm, z, pt, labels);
        if (!guided || labels.empty()) return cond;
        Matrix unc = oracle_denoiser(gmm, z, pt, {});
        for (size_t i = 0; i < cond.v.size(); ++i)
            cond.v[i] += guidance.w * (cond.v[i] - unc.v[i]);
        return cond;
    }
};

// Class-conditional models sampled without labels fall back to the null
// class, i.e. unconditional generation.
inline Matrix ancestral_sample(const DualRateModel& model, std::span<const double> params,
                               std::span<const int> labels, const LogSnrSchedule& sched,
                               const SampleConfig& cfg, Rng& rng, SampleTrace* trace = nullptr) {
    cfg.validate();
    std::vector<int> fallback;
    if (model.n_classes > 0 && labels.empty()) {
        fallback = model.null_labels(cfg.n_samples);
        labels = fallback;
    }
    if (model.n_classes > 0 && static_cast<int>(labels.size()) != cfg.n_samples)
        throw ConfigError("sample: one label per sample required");
    ModelPolicy policy{model, params, labels, cfg.guidance, {}, {}};
    return ancestral_sample_core(policy, cfg.n_samples, model.data_dim(), sched, cfg, rng,
                                 trace);
}

inline Matrix ancestral_sample_oracle(const GmmSpec& gmm, std::span<const int> labels,
                                      const LogSnrSchedule& sched, const SampleConfig& cfg,
                                      Rng& rng, SampleTrace* trace = nullptr) {
    cfg.validate();
    if (!labels.empty() && static_cast<int>(labels.size()) != cfg.n_samples)
        throw ConfigError("sample: one label per sample required");
    OraclePolicy policy{gmm, labels, cfg.guidance};
    return ancestral_sample_core(policy, cfg.n_samples, gmm.dim(), sched, cfg, rng, trace);
}

}  // namespace dualrate
