// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/data.hpp"
#include "dualrate/eval.hpp"
#include "dualrate/models.hpp"
#include "dualrate/nnkit.hpp"
#include "dualrate/process.hpp"
#include "dualrate/rng.hpp"
#include "dualrate/schedule.hpp"

namespace dualrate {

// Either mixture data (with a closed-form posterior oracle) or the grid
// pattern toy with optional cyclic-shift augmentation.
struct DatasetSpec {
    bool is_gmm = true;
    GmmSpec gmm = GmmSpec::ring(8, 2.0, 0.1);
    GridPatternSpec grid;
    double translate_prob = 0.0;
    int max_shift = 2;

    int dim() const { return is_gmm ? gmm.dim() : grid.dim(); }
    int n_classes() const { return is_gmm ? gmm.n_components() : grid.n_classes; }

    DataBatch sample(int n, Rng& rng) const {
        if (is_gmm) return gmm_sample(gmm, n, rng);
        DataBatch b = grid_sample(grid, n, rng);
        if (translate_prob > 0) b = augment_translate(b, grid, translate_prob, max_shift, rng);
        return b;
    }
};

struct TrainConfig {
    int K = 8;           // context refreshes per unit time
    int k = 64;          // light steps per unit time at sampling; K divides k
    int batch_size = 256;
    long n_steps = 20000;
    LossWeight weight;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-12;
    double clip_norm = 1.0;
    long warmup_steps = 100;
    double ema_decay = 0.999;
    double embed_drop_p = 0.5;    // context-feature dropout
    double class_drop_p = 0.1;    // label replaced by the null class
    double network_dropout = 0.0;
    long snapshot_every = 2000;
    int eval_batch = 512;         // per lambda grid point in snapshot metrics
    double divergence_threshold = 1e6;

    void validate() const {
        if (K < 1) throw ConfigError("train: K must be at least 1");
        if (k < K || k % K != 0) throw ConfigError("train: K must divide k");
        if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
        if (n_steps < 0) throw ConfigError("train: negative n_steps");
        if (!(lr > 0)) throw ConfigError("train: lr must be positive");
        for (double p : {embed_drop_p, class_drop_p})
            if (p < 0 || p > 1) throw ConfigError("train: probability outside [0, 1]");
        if (network_dropout < 0 || network_dropout >= 1)
            throw ConfigError("train: network_dropout outside [0, 1)");
        if (snapshot_every < 1) throw ConfigError("train: snapshot_every must be positive");
        if (eval_batch < 1) throw ConfigError("train: eval_batch must be positive");
    }
};

struct LossResult {
    double loss = 0;         // weighted objective
    double mse = 0;          // plain mean squared x error per dimension
    double weight_coef = 0;  // -dlambda/dt * e^lambda * w(lambda)
};

// One joint-time training objective evaluation:
//   L = -dlambda/dt(t) e^{lambda_t} w(lambda_t) * mean ||x - x_hat||^2
// where x_hat = g(z_t, t, E(z_tau, tau)) and (z_tau, z_t) follow the forward
// process. When grad_accum is non-empty, gradients for the whole combined
// parameter vector are accumulated into it (denoiser directly, encoder via
// the feature gradients of surviving, non-dropped items).
//
// Randomness order per call: class-label drop, z_tau, z_t, encoder forward
// (network dropout), feature drop, denoiser forward (network dropout). Keep
// this fixed; checkpoint resume depends on it.
inline LossResult diffusion_loss(const DualRateModel& model, std::span<const double> params,
                                 const DataBatch& batch, const TimePair& tp,
                                 const LogSnrSchedule& sched, const LossWeight& weight,
                                 double class_drop_p, double embed_drop_p,
                                 double network_dropout, Rng& rng,
                                 std::span<double> grad_accum) {
    const bool want_grads = !grad_accum.empty();
    if (want_grads && grad_accum.size() != params.size())
        throw ConfigError("loss: gradient buffer size mismatch");
    const int B = batch.x.rows, D = batch.x.cols;
    if (B < 1) throw ConfigError("loss: empty batch");

    DataBatch labeled = batch;
    if (model.n_classes > 0 && class_drop_p > 0)
        labeled = drop_class_labels(batch, model.n_classes, class_drop_p, rng);

    SnrPoint pt_tau = sched.eval(tp.tau);
    SnrPoint pt_t = sched.eval(tp.t);
    NoisyState z_tau = sample_marginal(batch.x, pt_tau, rng);
    NoisyState z_t = sample_bridge(z_tau, batch.x, pt_t, pt_tau, rng);

    ContextFeatures feats =
        encode_context(model, params, z_tau.z, tp.tau, labeled.labels, embed_drop_p, &rng,
                       want_grads, network_dropout, &rng);
    DenoiseEval ev =
        denoise(model, params, z_t, pt_t, feats, labeled.labels, network_dropout, &rng);

    Matrix diff(B, D);
    for (size_t i = 0; i < diff.v.size(); ++i)
        diff.v[i] = ev.pred.x_hat.v[i] - batch.x.v[i];
    LossResult res;
    res.mse = dot(diff.v.data(), diff.v.data(), static_cast<int>(diff.size())) /
              (static_cast<double>(B) * D);
    res.weight_coef = -pt_t.dlambda_dt * std::exp(pt_t.lambda) * weight(pt_t.lambda);
    res.loss = res.weight_coef * res.mse;

    if (!want_grads) return res;

    double scale = res.weight_coef * 2.0 / (static_cast<double>(B) * D);
    Matrix dxhat(B, D);
    for (size_t i = 0; i < diff.v.size(); ++i) dxhat.v[i] = scale * diff.v[i];
    Matrix draw = dxhat_to_draw(model, dxhat, pt_t);

    MlpGradients den_grads =
        mlp_backward(model.denoiser_spec, model.den_section(params), ev.net.tape, draw,
                     model.den_section(grad_accum));

    if (model.use_encoder) {
        feats.mask_feature_grads(den_grads.cond);
        std::vector<std::pair<int, const Matrix*>> inject;
        std::vector<int> src = model.feature_layers();
        for (size_t l = 0; l < den_grads.cond.size(); ++l)
            inject.emplace_back(src[l], &den_grads.cond[l]);
        Matrix zero_dout(B, model.encoder_spec.output_dim);
        mlp_backward(model.encoder_spec, model.enc_section(params), feats.enc_eval.tape,
                     zero_dout, model.enc_section(grad_accum), inject);
    }
    return res;
}

struct SnapshotRecord {
    long step = 0;
    double loss = 0;  // mean step loss since the previous snapshot
    double oracle_mse = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0;
};

struct TrainState {
    DualRateModel model;
    OptimState opt;
    EmaState ema;
    long step = 0;
    // Partial loss accumulation between snapshots; serialized so a resumed
    // run reports identical metrics.
    double loss_accum = 0;
    long loss_count = 0;
    std::vector<SnapshotRecord> history;
};

// Snapshot metrics use a fixed generator seed so the oracle-MSE series is
// comparable across snapshots, runs, and checkpoint resumes.
inline constexpr uint64_t kSnapshotEvalSeed = 0xD1CEB00C0FFEEull;

inline double snapshot_oracle_mse(const DualRateModel& model, std::span<const double> params,
                                  const DatasetSpec& data, int K, const LogSnrSchedule& sched,
                                  int eval_batch) {
    if (!data.is_gmm) return std::numeric_limits<double>::quiet_NaN();
    Rng eval_rng(kSnapshotEvalSeed);
    PredictFn pred = make_model_predictor(model, params);
    std::vector<double> grid = default_lambda_grid();
    return oracle_mse(pred, data.gmm, K, sched, grid, eval_batch, eval_rng).mean;
}

inline TrainState init_train_state(DualRateModel model, const TrainConfig& cfg) {
    cfg.validate();
    TrainState st;
    st.model = std::move(model);
    size_t n = st.model.params.size();
    st.opt = OptimState::create(n, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.clip_norm,
                                cfg.warmup_steps);
    st.ema = EmaState::create(st.model.params.values, cfg.ema_decay);
    return st;
}

using SnapshotHook = std::function<void(const TrainState&, const SnapshotRecord&)>;

// Runs from st.step to cfg.n_steps. Gradient updates use the live
// parameters; snapshot metrics use the EMA shadow. A loss above the
// divergence threshold (or any non-finite value) aborts.
inline void train_loop(TrainState& st, const TrainConfig& cfg, const DatasetSpec& data,
                       const LogSnrSchedule& sched, Rng& rng,
                       const SnapshotHook& on_snapshot = {}) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();
    std::vector<double> grads(st.model.params.size());

    while (st.step < cfg.n_steps) {
        DataBatch batch = data.sample(cfg.batch_size, rng);
        TimePair tp = sample_training_times(cfg.K, rng);
        std::fill(grads.begin(), grads.end(), 0.0);
        LossResult res = diffusion_loss(st.model, st.model.params.values, batch, tp, sched,
                                        cfg.weight, cfg.class_drop_p, cfg.embed_drop_p,
                                        cfg.network_dropout, rng, grads);
        if (!std::isfinite(res.loss))
            throw NumericsError("train: non-finite loss at step " + std::to_string(st.step));
        if (res.loss > cfg.divergence_threshold)
            throw NumericsError("train: diverged at step " + std::to_string(st.step) +
                                " (loss " + std::to_string(res.loss) + ")");
        adam_step(st.model.params.values, grads, st.opt);
        ema_update(st.ema, st.model.params.values);
        st.step += 1;
        st.loss_accum += res.loss;
        st.loss_count += 1;

        if (st.step % cfg.snapshot_every == 0 || st.step == cfg.n_steps) {
            SnapshotRecord rec;
            rec.step = st.step;
            rec.loss = st.loss_accum / static_cast<double>(st.loss_count);
            st.loss_accum = 0;
            st.loss_count = 0;
            rec.oracle_mse = snapshot_oracle_mse(st.model, st.ema.shadow, data, cfg.K, sched,
                                                 cfg.eval_batch);
            rec.wall_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            st.history.push_back(rec);
            if (on_snapshot) on_snapshot(st, rec);
        }
    }
}

}  // namespace dualrate
