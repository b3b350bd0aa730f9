// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/data.hpp"
#include "dualrate/matrix.hpp"
#include "dualrate/nnkit.hpp"
#include "dualrate/process.hpp"
#include "dualrate/rng.hpp"
#include "dualrate/schedule.hpp"

namespace dualrate {

// What the denoiser's raw output means. VPred networks emit
// v = alpha eps - sigma x and stay well-scaled across the whole log-SNR
// range; XPred emits the clean data directly.
enum class ParamMode { XPred, VPred };

struct ModelSettings {
    int data_dim = 2;
    std::vector<int> encoder_hidden{64, 64, 64};
    std::vector<int> denoiser_hidden{64, 64};
    int time_embed_dim = 32;
    Activation activation = Activation::SiLU;
    bool use_encoder = true;
    // true: the last denoiser-many encoder layers condition matching denoiser
    // layers; false: only the encoder's top layer conditions denoiser layer 0.
    bool multi_level = true;
    ParamMode param_mode = ParamMode::VPred;
    int n_classes = 0;
    double embed_drop_p = 0.5;
};

// A heavy context encoder evaluated on the coarse time grid plus a light
// denoiser evaluated every step, holding one flat parameter vector with the
// encoder section first. use_encoder = false degenerates to a plain
// single-network denoiser (no context features, no second time embedding).
struct DualRateModel {
    MlpSpec encoder_spec;
    MlpSpec denoiser_spec;
    bool use_encoder = true;
    bool multi_level = true;
    ParamMode param_mode = ParamMode::VPred;
    int n_classes = 0;
    double embed_drop_p = 0.0;
    size_t enc_len = 0;
    size_t den_len = 0;
    ParamVector params;

    int data_dim() const { return denoiser_spec.input_dim; }
    int time_embed_dim() const { return denoiser_spec.time_embed_dim; }

    std::span<const double> enc_section(std::span<const double> all) const {
        return all.subspan(0, enc_len);
    }
    std::span<const double> den_section(std::span<const double> all) const {
        return all.subspan(enc_len, den_len);
    }
    std::span<double> enc_section(std::span<double> all) const { return all.subspan(0, enc_len); }
    std::span<double> den_section(std::span<double> all) const {
        return all.subspan(enc_len, den_len);
    }

    // Encoder hidden layers whose activations condition the denoiser, aligned
    // with denoiser layers 0..n-1.
    std::vector<int> feature_layers() const {
        if (!use_encoder) return {};
        int Le = encoder_spec.n_hidden();
        int n = static_cast<int>(denoiser_spec.cond_dims.size());
        std::vector<int> out(n);
        for (int i = 0; i < n; ++i) out[i] = Le - n + i;
        return out;
    }

    std::vector<int> null_labels(int batch) const { return std::vector<int>(batch, n_classes); }

    // Rebuilds section lengths, parameter layout, and a zeroed value vector
    // from the stored network specs. Used when reconstructing a model whose
    // weights arrive separately (e.g. from a checkpoint payload).
    void rebuild_layout() {
        if (use_encoder) encoder_spec.validate();
        denoiser_spec.validate();
        enc_len = use_encoder ? param_count(encoder_spec) : 0;
        den_len = param_count(denoiser_spec);
        params.layout.clear();
        if (use_encoder) {
            for (auto& [name, slice] : MlpOffsets(encoder_spec).named_slices())
                params.layout.emplace_back("enc." + name, slice);
        }
        for (auto& [name, slice] : MlpOffsets(denoiser_spec).named_slices()) {
            TensorSlice shifted = slice;
            shifted.offset += enc_len;
            params.layout.emplace_back("den." + name, shifted);
        }
        params.values.assign(enc_len + den_len, 0.0);
    }

    static DualRateModel create(const ModelSettings& s, Rng& rng) {
        if (s.data_dim < 1) throw ConfigError("model: data_dim must be positive");
        if (s.embed_drop_p < 0 || s.embed_drop_p > 1)
            throw ConfigError("model: embed_drop_p outside [0, 1]");
        if (s.denoiser_hidden.empty())
            throw ConfigError("model: denoiser needs at least one hidden layer");

        DualRateModel m;
        m.use_encoder = s.use_encoder;
        m.multi_level = s.multi_level;
        m.param_mode = s.param_mode;
        m.n_classes = s.n_classes;
        m.embed_drop_p = s.use_encoder ? s.embed_drop_p : 0.0;

        MlpSpec den;
        den.input_dim = s.data_dim;
        den.hidden_dims = s.denoiser_hidden;
        den.output_dim = s.data_dim;
        den.activation = s.activation;
        den.time_embed_dim = s.time_embed_dim;
        den.film_enabled = true;
        den.n_classes = s.n_classes;
        den.n_embed_inputs = s.use_encoder ? 2 : 1;

        if (s.use_encoder) {
            if (s.encoder_hidden.empty())
                throw ConfigError("model: encoder needs at least one hidden layer");
            MlpSpec enc;
            enc.input_dim = s.data_dim;
            enc.hidden_dims = s.encoder_hidden;
            enc.output_dim = s.data_dim;
            enc.activation = s.activation;
            enc.time_embed_dim = s.time_embed_dim;
            enc.film_enabled = true;
            enc.n_classes = s.n_classes;
            enc.n_embed_inputs = 1;
            enc.validate();
            m.encoder_spec = enc;

            int Le = static_cast<int>(s.encoder_hidden.size());
            int Ld = static_cast<int>(s.denoiser_hidden.size());
            if (s.multi_level) {
                if (Le < Ld)
                    throw ConfigError("model: multi-level conditioning needs at least as many "
                                      "encoder layers as denoiser layers");
                den.cond_dims.resize(Ld);
                for (int l = 0; l < Ld; ++l) den.cond_dims[l] = s.encoder_hidden[Le - Ld + l];
            } else {
                den.cond_dims = {s.encoder_hidden[Le - 1]};
            }
        }
        den.validate();
        m.denoiser_spec = den;

        ParamVector enc_pv;
        if (m.use_encoder) enc_pv = init_params(m.encoder_spec, rng);
        ParamVector den_pv = init_params(m.denoiser_spec, rng);
        m.enc_len = enc_pv.values.size();
        m.den_len = den_pv.values.size();
        m.params.values.reserve(m.enc_len + m.den_len);
        m.params.values.insert(m.params.values.end(), enc_pv.values.begin(), enc_pv.values.end());
        m.params.values.insert(m.params.values.end(), den_pv.values.begin(), den_pv.values.end());
        for (auto& [name, slice] : enc_pv.layout)
            m.params.layout.emplace_back("enc." + name, slice);
        for (auto& [name, slice] : den_pv.layout) {
            TensorSlice shifted = slice;
            shifted.offset += m.enc_len;
            m.params.layout.emplace_back("den." + name, shifted);
        }
        return m;
    }
};

// Encoder activations captured at one context time tau. layers[] follows the
// denoiser's conditioning slots; null_mask marks items whose features were
// dropped (zeroed), which also severs their gradient path back into the
// encoder.
struct ContextFeatures {
    double tau = 1.0;
    std::vector<Matrix> layers;
    std::vector<uint8_t> null_mask;
    bool has_tape = false;
    MlpForwardResult enc_eval;

    // Zero the gradient rows of dropped items before they are injected into
    // the encoder's backward pass.
    void mask_feature_grads(std::vector<Matrix>& grads) const {
        if (null_mask.empty()) return;
        for (Matrix& g : grads)
            for (int i = 0; i < g.rows; ++i)
                if (null_mask[i])
                    std::fill(g.row(i), g.row(i) + g.cols, 0.0);
    }
};

inline ContextFeatures encode_context(const DualRateModel& m,
                                      std::span<const double> all_params,
                                      const Matrix& z_tau, double tau,
                                      std::span<const int> labels,
                                      double feature_drop_p = 0.0, Rng* drop_rng = nullptr,
                                      bool want_tape = false,
                                      double network_dropout = 0.0, Rng* net_rng = nullptr) {
    ContextFeatures f;
    f.tau = tau;
    if (!m.use_encoder) return f;
    if (feature_drop_p > 0 && drop_rng == nullptr)
        throw ConfigError("encode: feature dropout requires an rng");

    const int B = z_tau.rows;
    std::vector<double> temb = fourier_time_embed(tau, m.encoder_spec.time_embed_dim);
    Matrix embeds[1] = {broadcast_row(temb, B)};
    MlpForwardResult fr = mlp_forward(m.encoder_spec, m.enc_section(all_params), z_tau,
                                      std::span<const Matrix>(embeds, 1), labels, {},
                                      network_dropout, net_rng);

    for (int l : m.feature_layers())
        f.layers.push_back(hidden_activation(m.encoder_spec, fr.tape, l));

    if (feature_drop_p > 0) {
        f.null_mask.assign(B, 0);
        for (int i = 0; i < B; ++i)
            if (drop_rng->uniform() < feature_drop_p) f.null_mask[i] = 1;
        for (Matrix& layer : f.layers)
            for (int i = 0; i < B; ++i)
                if (f.null_mask[i])
                    std::fill(layer.row(i), layer.row(i) + layer.cols, 0.0);
    }
    if (want_tape) {
        f.enc_eval = std::move(fr);
        f.has_tape = true;
    }
    return f;
}

struct Prediction {
    Matrix x_hat;
};

struct DenoiseEval {
    Prediction pred;
    Matrix raw;           // network output before reparameterization
    MlpForwardResult net;
    SnrPoint pt;
};

inline Matrix v_to_x(const Matrix& z, const Matrix& v, const SnrPoint& pt) {
    if (!z.same_shape(v)) throw ConfigError("v_to_x: shape mismatch");
    Matrix x(z.rows, z.cols);
    for (size_t i = 0; i < x.v.size(); ++i) x.v[i] = pt.alpha * z.v[i] - pt.sigma * v.v[i];
    return x;
}

inline Matrix x_to_v(const Matrix& z, const Matrix& x, const SnrPoint& pt) {
    if (!z.same_shape(x)) throw ConfigError("x_to_v: shape mismatch");
    if (pt.sigma == 0) throw NumericsError("x_to_v: sigma = 0 is singular");
    Matrix v(z.rows, z.cols);
    for (size_t i = 0; i < v.v.size(); ++i) v.v[i] = (pt.alpha * z.v[i] - x.v[i]) / pt.sigma;
    return v;
}

// One light-network evaluation. Features must come from a context time no
// earlier than t; labels are required whenever the model is class
// conditional (use null labels for the unconditional branch).
inline DenoiseEval denoise(const DualRateModel& m, std::span<const double> all_params,
                           const NoisyState& z_t, const SnrPoint& pt_t,
                           const ContextFeatures& feats, std::span<const int> labels,
                           double network_dropout = 0.0, Rng* net_rng = nullptr) {
    if (z_t.z.cols != m.data_dim()) throw ConfigError("denoise: data dim mismatch");
    if (feats.tau < pt_t.t - 1e-12)
        throw ConfigError("denoise: context features are older than the query time");
    const int B = z_t.z.rows;

    std::vector<Matrix> embeds;
    std::vector<double> temb = fourier_time_embed(pt_t.t, m.time_embed_dim());
    embeds.push_back(broadcast_row(temb, B));
    if (m.use_encoder) {
        std::vector<double> tauemb = fourier_time_embed(feats.tau, m.time_embed_dim());
        embeds.push_back(broadcast_row(tauemb, B));
        if (static_cast<int>(feats.layers.size()) != static_cast<int>(m.denoiser_spec.cond_dims.size()))
            throw ConfigError("denoise: conditioning level count mismatch");
    }

    DenoiseEval ev;
    ev.pt = pt_t;
    ev.net = mlp_forward(m.denoiser_spec, m.den_section(all_params), z_t.z, embeds, labels,
                         feats.layers, network_dropout, net_rng);
    ev.raw = ev.net.out;
    ev.pred.x_hat = m.param_mode == ParamMode::VPred ? v_to_x(z_t.z, ev.raw, pt_t) : ev.raw;
    return ev;
}

// Chain rule through the output parameterization: gradient w.r.t. the raw
// network output given a gradient w.r.t. x_hat.
inline Matrix dxhat_to_draw(const DualRateModel& m, const Matrix& dxhat, const SnrPoint& pt) {
    if (m.param_mode == ParamMode::XPred) return dxhat;
    Matrix d(dxhat.rows, dxhat.cols);
    for (size_t i = 0; i < d.v.size(); ++i) d.v[i] = -pt.sigma * dxhat.v[i];
    return d;
}

struct GuidanceConfig {
    double w = 0.0;
    double lambda_lo = 1.5;
    double lambda_hi = 5.0;
};

inline bool guidance_active(const GuidanceConfig& g, double lambda) {
    return g.w != 0.0 && lambda > g.lambda_lo && lambda < g.lambda_hi;
}

// Classifier-free guidance, gated on the log-SNR interval. Outside the
// interval (or at w = 0) this is exactly one conditional evaluation; inside,
// the unconditional branch reuses the same latent with null labels and the
// separately encoded unconditional features.
inline Prediction guided_denoise(const DualRateModel& m, std::span<const double> all_params,
                                 const NoisyState& z_t, const SnrPoint& pt_t,
                                 const ContextFeatures& feats_cond,
                                 const ContextFeatures* feats_uncond,
                                 std::span<const int> labels, const GuidanceConfig& g) {
    DenoiseEval cond = denoise(m, all_params, z_t, pt_t, feats_cond, labels);
    if (!guidance_active(g, pt_t.lambda)) return std::move(cond.pred);
    if (m.n_classes <= 0)
        throw ConfigError("guidance: model has no class conditioning");
    if (m.use_encoder && feats_uncond == nullptr)
        throw ConfigError("guidance: missing unconditional context features");
    std::vector<int> nulls = m.null_labels(z_t.z.rows);
    const ContextFeatures& fu = m.use_encoder ? *feats_uncond : feats_cond;
    DenoiseEval uncond = denoise(m, all_params, z_t, pt_t, fu, nulls);
    Prediction out;
    out.x_hat = Matrix(cond.pred.x_hat.rows, cond.pred.x_hat.cols);
    for (size_t i = 0; i < out.x_hat.v.size(); ++i) {
        double c = cond.pred.x_hat.v[i];
        out.x_hat.v[i] = c + g.w * (c - uncond.pred.x_hat.v[i]);
    }
    return out;
}

// Exact posterior mean E[x | z_t] under a Gaussian mixture, optionally
// restricted to one component per item via labels (the null class index
// n_components falls back to the unconditional mixture).
inline Matrix oracle_denoiser(const GmmSpec& g, const Matrix& z, const SnrPoint& pt,
                              std::span<const int> labels = {}) {
    g.validate();
    if (z.cols != g.dim()) throw ConfigError("oracle: dim mismatch");
    if (!labels.empty() && static_cast<int>(labels.size()) != z.rows)
        throw ConfigError("oracle: label count mismatch");
    const int C = g.n_components();
    const double s2 = g.comp_std * g.comp_std;
    const double var = pt.alpha * pt.alpha * s2 + pt.sigma * pt.sigma;
    const double gain = pt.alpha * s2 / var;

    Matrix out(z.rows, z.cols);
    std::vector<double> logw(C);
    for (int i = 0; i < z.rows; ++i) {
        const double* zi = z.row(i);
        int fixed = -1;
        if (!labels.empty() && labels[i] != C) {
            if (labels[i] < 0 || labels[i] > C) throw ConfigError("oracle: label out of range");
            fixed = labels[i];
        }
        if (fixed >= 0) {
            for (int d = 0; d < z.cols; ++d) {
                double mu = g.means.at(fixed, d);
                out.at(i, d) = mu + gain * (zi[d] - pt.alpha * mu);
            }
            continue;
        }
        double best = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) {
            double sq = 0;
            for (int d = 0; d < z.cols; ++d) {
                double diff = zi[d] - pt.alpha * g.means.at(c, d);
                sq += diff * diff;
            }
            logw[c] = std::log(g.weights[c]) - 0.5 * sq / var;
            best = std::max(best, logw[c]);
        }
        double norm = 0;
        for (int c = 0; c < C; ++c) {
            logw[c] = std::exp(logw[c] - best);
            norm += logw[c];
        }
        for (int d = 0; d < z.cols; ++d) out.at(i, d) = 0;
        for (int c = 0; c < C; ++c) {
            double w = logw[c] / norm;
            for (int d = 0; d < z.cols; ++d) {
                double mu = g.means.at(c, d);
                out.at(i, d) += w * (mu + gain * (zi[d] - pt.alpha * mu));
            }
        }
    }
    return out;
}

}  // namespace dualrate
