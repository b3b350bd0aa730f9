// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/eval.hpp"
#include "dualrate/models.hpp"
#include "dualrate/nnkit.hpp"
#include "dualrate/process.hpp"
#include "dualrate/rng.hpp"
#include "dualrate/sample.hpp"
#include "dualrate/schedule.hpp"
#include "dualrate/train.hpp"

namespace dualrate {

enum class DistillVariant { Standard, FullRollout };
enum class StudentInit { PretrainedDualRate, FrozenTeacherEncoder };

struct DistillConfig {
    int K = 2;  // student context refreshes
    int k = 8;  // student light steps; K divides k
    DistillVariant variant = DistillVariant::Standard;
    StudentInit init = StudentInit::FrozenTeacherEncoder;
    std::vector<int> student_denoiser_hidden{64, 64};
    std::vector<int> student_encoder_hidden;  // empty: mirror the teacher
    long n_steps = 4000;
    int batch_size = 256;
    LossWeight weight;
    double lr = 2e-4;
    double beta1 = 0.0;  // moment-matching updates work better without momentum
    double beta2 = 0.99;
    double epsilon = 1e-12;
    double clip_norm = 1.0;
    long warmup_steps = 1000;
    double ema_decay = 0.999;
    long pretrain_steps = 2000;
    double pretrain_lr = 1e-3;
    double teacher_mse_max = 0.5;  // oracle-MSE quality gate on the teacher
    long snapshot_every = 500;
    int eval_samples = 2048;
    double divergence_threshold = 1e6;

    void validate() const {
        if (K < 1) throw ConfigError("distill: K must be at least 1");
        if (k < K || k % K != 0) throw ConfigError("distill: K must divide k");
        if (batch_size < 1) throw ConfigError("distill: batch_size must be positive");
        if (n_steps < 0 || pretrain_steps < 0) throw ConfigError("distill: negative step count");
        if (!(lr > 0) || !(pretrain_lr > 0)) throw ConfigError("distill: lr must be positive");
        if (student_denoiser_hidden.empty())
            throw ConfigError("distill: student denoiser needs hidden layers");
        if (snapshot_every < 1) throw ConfigError("distill: snapshot_every must be positive");
        if (eval_samples < 2) throw ConfigError("distill: eval_samples too small");
    }
};

// Discrete joint times for one distillation step: tau on the heavy grid,
// t = tau - Delta/k on the light grid within tau's segment, and a continuous
// s in [t - 1/k, t).
struct DistillTimes {
    double tau = 1;
    double t = 1;
    double s = 0;
    int delta_steps = 0;  // light steps between tau and t
};

inline DistillTimes sample_distill_times(int K, int k, Rng& rng) {
    if (K < 1 || k < K || k % K != 0) throw ConfigError("distill times: K must divide k");
    int stride = k / K;
    DistillTimes d;
    int i_tau = 1 + rng.uniform_int(K);
    d.tau = static_cast<double>(i_tau) / K;
    d.delta_steps = rng.uniform_int(stride);
    d.t = static_cast<double>(i_tau * stride - d.delta_steps) / k;
    double delta_s = (1.0 / k) * (1.0 - rng.uniform());  // in (0, 1/k]
    d.s = std::max(0.0, d.t - delta_s);
    return d;
}

// Alternating-optimization state: a frozen plain-denoiser teacher, the
// dual-rate student, and a plain auxiliary denoiser estimating the student's
// conditional mean. Even parity updates the auxiliary, odd the student.
struct DistillSnapshot {
    long step = 0;
    double aux_loss = 0;
    double student_loss = 0;
    double w2 = 0;
    double wall_ms = 0;
};

struct DistillState {
    DualRateModel teacher;
    DualRateModel student;
    DualRateModel aux;
    OptimState student_opt;
    OptimState aux_opt;
    EmaState student_ema;
    long step = 0;
    double last_aux_loss = std::numeric_limits<double>::quiet_NaN();
    double last_student_loss = std::numeric_limits<double>::quiet_NaN();
    std::vector<DistillSnapshot> history;
};

// Generative light steps from z_tau down to target_t while holding the
// context features fixed, exactly as the sampler would between refreshes.
// Transitions use the exact posterior (no extra noise widening during
// distillation); intermediates carry no gradient.
inline NoisyState rollout_light(const DualRateModel& student, std::span<const double> params,
                                const NoisyState& z_tau, const ContextFeatures& feats,
                                std::span<const int> labels, double target_t, int k,
                                const LogSnrSchedule& sched, Rng& rng) {
    double ji = z_tau.t * k, jt = target_t * k;
    int j_from = static_cast<int>(std::lround(ji));
    int j_to = static_cast<int>(std::lround(jt));
    if (std::abs(ji - j_from) > 1e-9 || std::abs(jt - j_to) > 1e-9)
        throw ConfigError("rollout: times must sit on the light grid");
    if (j_to > j_from) throw ConfigError("rollout: target time after the context time");

    NoisyState state = z_tau;
    for (int j = j_from; j > j_to; --j) {
        SnrPoint pt_cur = sched.eval(static_cast<double>(j) / k);
        SnrPoint pt_next = sched.eval(static_cast<double>(j - 1) / k);
        state.t = pt_cur.t;
        Matrix x_tilde = denoise(student, params, state, pt_cur, feats, labels).pred.x_hat;
        PosteriorParams post = posterior_params(state, x_tilde, pt_next, pt_cur, 0.0);
        state = sample_posterior(post, pt_next, rng);
    }
    state.t = target_t;
    return state;
}

// Data-free generation of z_tau: run the student's own ancestral machinery
// from pure noise down to tau, refreshing context on the student's heavy
// grid. No tapes are kept anywhere, so the result is detached by
// construction.
inline NoisyState full_rollout(const DualRateModel& student, std::span<const double> params,
                               std::span<const int> labels, double tau, int K, int k,
                               const LogSnrSchedule& sched, Rng& rng, int batch) {
    if (K < 1 || k < K || k % K != 0) throw ConfigError("full rollout: K must divide k");
    double ti = tau * K;
    int i_tau = static_cast<int>(std::lround(ti));
    if (std::abs(ti - i_tau) > 1e-9 || i_tau < 1 || i_tau > K)
        throw ConfigError("full rollout: tau must sit on the heavy grid");

    NoisyState state;
    state.t = 1.0;
    state.z = Matrix(batch, student.data_dim());
    rng.fill_normal(state.z);

    int stride = k / K;
    int n_transitions = k - i_tau * stride;
    ContextFeatures feats;
    for (int i = 0; i < n_transitions; ++i) {
        SnrPoint pt_cur = sched.eval(static_cast<double>(k - i) / k);
        SnrPoint pt_next = sched.eval(static_cast<double>(k - i - 1) / k);
        state.t = pt_cur.t;
        if (i % stride == 0)
            feats = encode_context(student, params, state.z, pt_cur.t, labels);
        Matrix x_tilde = denoise(student, params, state, pt_cur, feats, labels).pred.x_hat;
        PosteriorParams post = posterior_params(state, x_tilde, pt_next, pt_cur, 0.0);
        state = sample_posterior(post, pt_next, rng);
    }
    state.t = tau;
    return state;
}

// Student prediction x_tilde with everything its backward pass needs: the
// denoiser tape plus context features carrying the encoder tape.
struct StudentEval {
    DenoiseEval den;
    ContextFeatures feats;
    std::vector<int> labels;
    SnrPoint pt_t;
};

inline StudentEval student_forward(const DualRateModel& student,
                                   std::span<const double> params, const NoisyState& z_t,
                                   const SnrPoint& pt_t, const Matrix& z_tau, double tau,
                                   std::span<const int> labels) {
    StudentEval ev;
    ev.labels.assign(labels.begin(), labels.end());
    ev.pt_t = pt_t;
    ev.feats = encode_context(student, params, z_tau, tau, ev.labels, 0.0, nullptr, true);
    ev.den = denoise(student, params, z_t, pt_t, ev.feats, ev.labels);
    return ev;
}

inline double distill_weight_coef(const SnrPoint& pt_s, const LossWeight& weight) {
    return -pt_s.dlambda_dt * std::exp(pt_s.lambda) * weight(pt_s.lambda);
}

// Even-parity update: pull the auxiliary toward the student's current output
// distribution while regularizing it toward the (unguided) teacher:
//   L = coef(s) * (||x_tilde - g_phi||^2 + ||g_theta - g_phi||^2)
// One Adam step on phi; teacher and student untouched.
inline double aux_step(DistillState& st, const NoisyState& z_s, const SnrPoint& pt_s,
                       const Matrix& x_tilde, std::span<const int> labels,
                       const LossWeight& weight) {
    if (st.step % 2 != 0) throw SequenceError("aux_step: expected even parity");
    const int B = x_tilde.rows, D = x_tilde.cols;
    ContextFeatures none;
    none.tau = pt_s.t;

    DenoiseEval phi = denoise(st.aux, st.aux.params.values, z_s, pt_s, none, labels);
    Matrix theta = denoise(st.teacher, st.teacher.params.values, z_s, pt_s, none, labels)
                       .pred.x_hat;

    double coef = distill_weight_coef(pt_s, weight);
    double norm = static_cast<double>(B) * D;
    double m_student = squared_distance(x_tilde, phi.pred.x_hat) / norm;
    double m_teacher = squared_distance(theta, phi.pred.x_hat) / norm;
    double loss = coef * (m_student + m_teacher);

    Matrix dphi(B, D);
    for (size_t i = 0; i < dphi.v.size(); ++i) {
        double p = phi.pred.x_hat.v[i];
        dphi.v[i] = coef * 2.0 * ((p - x_tilde.v[i]) + (p - theta.v[i])) / norm;
    }
    Matrix draw = dxhat_to_draw(st.aux, dphi, pt_s);
    std::vector<double> grads(st.aux.params.size(), 0.0);
    mlp_backward(st.aux.denoiser_spec,
                 st.aux.den_section(std::span<const double>(st.aux.params.values)), phi.net.tape,
                 draw, st.aux.den_section(std::span<double>(grads)));
    adam_step(st.aux.params.values, grads, st.aux_opt);

    st.step += 1;
    st.last_aux_loss = loss;
    return loss;
}

// Odd-parity update: move the student so its prediction aligns against the
// detached moment gap between auxiliary and teacher at s:
//   L = coef(s) * x_tilde^T sg<g_phi(z_s) - g_theta(z_s)>
// Gradients flow only through x_tilde's final light evaluation and through
// the context features; one Adam step on the combined encoder+denoiser
// vector. Auxiliary and teacher parameters are never touched.
inline double student_step(DistillState& st, const NoisyState& z_s, const SnrPoint& pt_s,
                           const StudentEval& ev, const LossWeight& weight) {
    if (st.step % 2 != 1) throw SequenceError("student_step: expected odd parity");
    const Matrix& x_tilde = ev.den.pred.x_hat;
    const int B = x_tilde.rows, D = x_tilde.cols;
    ContextFeatures none;
    none.tau = pt_s.t;

    Matrix phi = denoise(st.aux, st.aux.params.values, z_s, pt_s, none, ev.labels).pred.x_hat;
    Matrix theta =
        denoise(st.teacher, st.teacher.params.values, z_s, pt_s, none, ev.labels).pred.x_hat;

    double coef = distill_weight_coef(pt_s, weight);
    double norm = static_cast<double>(B) * D;
    double loss = 0;
    Matrix dx(B, D);
    for (size_t i = 0; i < dx.v.size(); ++i) {
        double gap = phi.v[i] - theta.v[i];
        loss += x_tilde.v[i] * gap;
        dx.v[i] = coef * gap / norm;
    }
    loss *= coef / norm;

    Matrix draw = dxhat_to_draw(st.student, dx, ev.pt_t);
    std::vector<double> grads(st.student.params.size(), 0.0);
    MlpGradients den_grads = mlp_backward(
        st.student.denoiser_spec,
        st.student.den_section(std::span<const double>(st.student.params.values)),
        ev.den.net.tape, draw, st.student.den_section(std::span<double>(grads)));
    if (st.student.use_encoder) {
        ev.feats.mask_feature_grads(den_grads.cond);
        std::vector<std::pair<int, const Matrix*>> inject;
        std::vector<int> src = st.student.feature_layers();
        for (size_t l = 0; l < den_grads.cond.size(); ++l)
            inject.emplace_back(src[l], &den_grads.cond[l]);
        Matrix zero_dout(B, st.student.encoder_spec.output_dim);
        mlp_backward(st.student.encoder_spec,
                     st.student.enc_section(std::span<const double>(st.student.params.values)),
                     ev.feats.enc_eval.tape, zero_dout,
                     st.student.enc_section(std::span<double>(grads)), inject);
    }
    adam_step(st.student.params.values, grads, st.student_opt);
    ema_update(st.student_ema, st.student.params.values);

    st.step += 1;
    st.last_student_loss = loss;
    return loss;
}

namespace detail {

inline bool same_mlp_spec(const MlpSpec& a, const MlpSpec& b) {
    return a.input_dim == b.input_dim && a.hidden_dims == b.hidden_dims &&
           a.output_dim == b.output_dim && a.activation == b.activation &&
           a.time_embed_dim == b.time_embed_dim && a.n_embed_inputs == b.n_embed_inputs &&
           a.film_enabled == b.film_enabled && a.cond_dims == b.cond_dims &&
           a.n_classes == b.n_classes;
}

// Brief dual-rate pretraining of the student (the regular training
// objective), optionally keeping the encoder section frozen by zeroing its
// gradients before every update. Dropout-free: the student trains to use the
// context it will always have during distillation.
inline void pretrain_student(DualRateModel& student, bool freeze_encoder,
                             const DistillConfig& cfg, const DatasetSpec& data,
                             const LogSnrSchedule& sched, Rng& rng) {
    if (cfg.pretrain_steps == 0) return;
    OptimState opt = OptimState::create(student.params.size(), cfg.pretrain_lr, 0.9, 0.99,
                                        cfg.epsilon, cfg.clip_norm, 100);
    std::vector<double> grads(student.params.size());
    for (long step = 0; step < cfg.pretrain_steps; ++step) {
        DataBatch batch = data.sample(cfg.batch_size, rng);
        TimePair tp = sample_training_times(cfg.K, rng);
        std::fill(grads.begin(), grads.end(), 0.0);
        LossResult res = diffusion_loss(student, student.params.values, batch, tp, sched,
                                        cfg.weight, 0.0, 0.0, 0.0, rng, grads);
        if (!std::isfinite(res.loss) || res.loss > cfg.divergence_threshold)
            throw NumericsError("distill: pretraining diverged at step " + std::to_string(step));
        if (freeze_encoder) {
            auto enc = student.enc_section(std::span<double>(grads));
            std::fill(enc.begin(), enc.end(), 0.0);
        }
        adam_step(student.params.values, grads, opt);
    }
}

}  // namespace detail

// Builds the student and auxiliary around a trained plain-denoiser teacher
// and runs the initialization phase. The teacher's parameters should already
// be the ones to distill from (e.g. its EMA shadow).
inline DistillState init_distill_state(DualRateModel teacher, const DistillConfig& cfg,
                                       const DatasetSpec& data, const LogSnrSchedule& sched,
                                       Rng& rng) {
    cfg.validate();
    if (teacher.use_encoder)
        throw ConfigError("distill: the teacher must be a plain denoiser");
    teacher.params.check_finite();

    if (data.is_gmm && cfg.teacher_mse_max > 0) {
        Rng gate_rng(kSnapshotEvalSeed);
        PredictFn pred = make_model_predictor(teacher, teacher.params.values);
        std::vector<double> grid = default_lambda_grid();
        double mse = oracle_mse(pred, data.gmm, cfg.K, sched, grid, 256, gate_rng).mean;
        if (!(mse < cfg.teacher_mse_max))
            throw ConfigError("distill: teacher oracle-MSE " + std::to_string(mse) +
                              " fails the quality gate " + std::to_string(cfg.teacher_mse_max));
    }

    DistillState st;
    st.teacher = std::move(teacher);

    ModelSettings ms;
    ms.data_dim = st.teacher.data_dim();
    ms.encoder_hidden = cfg.student_encoder_hidden.empty() ? st.teacher.denoiser_spec.hidden_dims
                                                           : cfg.student_encoder_hidden;
    ms.denoiser_hidden = cfg.student_denoiser_hidden;
    ms.time_embed_dim = st.teacher.time_embed_dim();
    ms.activation = st.teacher.denoiser_spec.activation;
    ms.use_encoder = true;
    ms.multi_level = true;
    ms.param_mode = st.teacher.param_mode;
    ms.n_classes = st.teacher.n_classes;
    ms.embed_drop_p = 0.0;
    st.student = DualRateModel::create(ms, rng);

    bool frozen_init = cfg.init == StudentInit::FrozenTeacherEncoder;
    if (frozen_init) {
        if (!detail::same_mlp_spec(st.student.encoder_spec, st.teacher.denoiser_spec))
            throw ConfigError("distill: teacher shape does not fit the student encoder");
        auto enc = st.student.enc_section(std::span<double>(st.student.params.values));
        std::copy(st.teacher.params.values.begin(), st.teacher.params.values.end(), enc.begin());
    }
    detail::pretrain_student(st.student, frozen_init, cfg, data, sched, rng);

    // The auxiliary starts as a copy of the teacher: a valid moment estimator
    // for a student that was just pretrained to match the same data.
    st.aux = st.teacher;

    st.student_opt = OptimState::create(st.student.params.size(), cfg.lr, cfg.beta1, cfg.beta2,
                                        cfg.epsilon, cfg.clip_norm, cfg.warmup_steps);
    st.aux_opt = OptimState::create(st.aux.params.size(), cfg.lr, cfg.beta1, cfg.beta2,
                                    cfg.epsilon, cfg.clip_norm, cfg.warmup_steps);
    st.student_ema = EmaState::create(st.student.params.values, cfg.ema_decay);
    return st;
}

// Sliced-W2 of the student's own samples against fresh data, with a fixed
// evaluation stream so snapshots are comparable.
inline double distill_eval_w2(const DistillState& st, const DistillConfig& cfg,
                              const DatasetSpec& data, const LogSnrSchedule& sched) {
    Rng eval_rng(kSnapshotEvalSeed);
    SampleConfig sc;
    sc.K = cfg.K;
    sc.k = cfg.k;
    sc.n_samples = cfg.eval_samples;
    sc.noise_interp = 0.0;
    DataBatch ref = data.sample(cfg.eval_samples, eval_rng);
    Matrix gen = ancestral_sample(st.student, st.student_ema.shadow, ref.labels, sched, sc,
                                  eval_rng);
    return sliced_w2(gen, ref.x, 128, eval_rng);
}

using DistillHook = std::function<void(const DistillState&, const DistillSnapshot&)>;

// Alternating moment-matching distillation. Every iteration runs the shared
// pipeline (times, z_tau, student rollout to z_t, x_tilde, posterior sample
// z_s) and then updates the auxiliary on even parity or the student on odd.
inline void distill_loop(DistillState& st, const DistillConfig& cfg, const DatasetSpec& data,
                         const LogSnrSchedule& sched, Rng& rng, const DistillHook& hook = {}) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();
    const bool conditional = st.student.n_classes > 0;

    while (st.step < cfg.n_steps) {
        DistillTimes dt = sample_distill_times(cfg.K, cfg.k, rng);
        SnrPoint pt_tau = sched.eval(dt.tau);
        SnrPoint pt_t = sched.eval(dt.t);
        SnrPoint pt_s = sched.eval(dt.s);

        std::vector<int> labels;
        NoisyState z_tau;
        if (cfg.variant == DistillVariant::Standard) {
            DataBatch batch = data.sample(cfg.batch_size, rng);
            labels = batch.labels;
            z_tau = sample_marginal(batch.x, pt_tau, rng);
        } else {
            if (conditional) {
                labels.resize(cfg.batch_size);
                DataBatch prior = data.sample(cfg.batch_size, rng);  // labels from the prior
                labels = prior.labels;
            }
            z_tau = full_rollout(st.student, st.student.params.values, labels, dt.tau, cfg.K,
                                 cfg.k, sched, rng, cfg.batch_size);
        }

        // One taped context encoding serves both the (gradient-free) rollout
        // and the final live evaluation; the values are identical.
        StudentEval ev;
        ev.labels = labels;
        ev.pt_t = pt_t;
        ev.feats = encode_context(st.student, st.student.params.values, z_tau.z, dt.tau,
                                  labels, 0.0, nullptr, true);
        NoisyState z_t = rollout_light(st.student, st.student.params.values, z_tau, ev.feats,
                                       labels, dt.t, cfg.k, sched, rng);
        ev.den = denoise(st.student, st.student.params.values, z_t, pt_t, ev.feats, labels);
        PosteriorParams post = posterior_params(z_t, ev.den.pred.x_hat, pt_s, pt_t, 0.0);
        NoisyState z_s = sample_posterior(post, pt_s, rng);

        double loss = st.step % 2 == 0
                          ? aux_step(st, z_s, pt_s, ev.den.pred.x_hat, labels, cfg.weight)
                          : student_step(st, z_s, pt_s, ev, cfg.weight);
        if (!std::isfinite(loss) || std::abs(loss) > cfg.divergence_threshold)
            throw NumericsError("distill: diverged at step " + std::to_string(st.step));

        if (st.step % cfg.snapshot_every == 0 || st.step == cfg.n_steps) {
            DistillSnapshot rec;
            rec.step = st.step;
            rec.aux_loss = st.last_aux_loss;
            rec.student_loss = st.last_student_loss;
            rec.w2 = distill_eval_w2(st, cfg, data, sched);
            rec.wall_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            st.history.push_back(rec);
            if (hook) hook(st, rec);
        }
    }
}

}  // namespace dualrate
