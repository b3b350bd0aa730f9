// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/matrix.hpp"
#include "dualrate/rng.hpp"

namespace dualrate {

enum class Activation { SiLU, ReLU };

// Architecture of one conditioned MLP.
//
// Hidden layer l computes act(film(W_l * concat(h_{l-1}, cond_l) + b_l)),
// followed by inverted dropout when a rate is given at call time. The output
// layer is plain linear. FiLM scales and shifts come from a shared embedding
// e = sum_j P_j * fourier_j, where each fourier_j is one externally supplied
// embedding input (typically a Fourier feature of a time value); when a class
// table is present its row for the item's label is added to embedding input 0
// before projection.
struct MlpSpec {
    int input_dim = 0;
    std::vector<int> hidden_dims;
    int output_dim = 0;
    Activation activation = Activation::SiLU;
    int time_embed_dim = 0;      // width of every embedding input; even
    int n_embed_inputs = 0;      // how many embedding vectors are consumed
    bool film_enabled = false;
    std::vector<int> cond_dims;  // extra feature width concatenated per hidden layer
    int n_classes = 0;           // > 0 adds a class table with one extra null row

    int n_hidden() const { return static_cast<int>(hidden_dims.size()); }

    int cond_dim(int layer) const {
        return layer < static_cast<int>(cond_dims.size()) ? cond_dims[layer] : 0;
    }

    void validate() const {
        if (input_dim < 1) throw ConfigError("mlp: input_dim must be positive");
        if (output_dim < 1) throw ConfigError("mlp: output_dim must be positive");
        for (int h : hidden_dims)
            if (h < 1) throw ConfigError("mlp: hidden widths must be positive");
        if (static_cast<int>(cond_dims.size()) > n_hidden())
            throw ConfigError("mlp: more conditioned layers than hidden layers");
        for (int c : cond_dims)
            if (c < 0) throw ConfigError("mlp: negative conditioning width");
        if (n_embed_inputs < 0 || n_embed_inputs > 8)
            throw ConfigError("mlp: n_embed_inputs out of range");
        if (n_embed_inputs > 0) {
            if (!film_enabled)
                throw ConfigError("mlp: embedding inputs require film_enabled");
            if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
                throw ConfigError("mlp: time_embed_dim must be even and >= 2");
        }
        if (film_enabled) {
            if (n_embed_inputs < 1)
                throw ConfigError("mlp: film_enabled requires an embedding input");
            if (n_hidden() < 1)
                throw ConfigError("mlp: film_enabled requires a hidden layer");
        }
        if (n_classes < 0) throw ConfigError("mlp: negative n_classes");
        if (n_classes > 0 && n_embed_inputs < 1)
            throw ConfigError("mlp: class conditioning requires an embedding input");
    }
};

struct TensorSlice {
    size_t offset = 0;
    int rows = 0;
    int cols = 0;
    size_t size() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

struct MatView {
    double* p;
    int rows, cols;
    double* row(int i) const { return p + static_cast<size_t>(i) * cols; }
};

struct CMatView {
    const double* p;
    int rows, cols;
    const double* row(int i) const { return p + static_cast<size_t>(i) * cols; }
};

inline MatView view(std::span<double> s, const TensorSlice& t) {
    return {s.data() + t.offset, t.rows, t.cols};
}
inline CMatView view(std::span<const double> s, const TensorSlice& t) {
    return {s.data() + t.offset, t.rows, t.cols};
}

// Flat parameter storage plus a named offset table, so tests and serializers
// can address individual tensors without knowing the packing order.
struct ParamVector {
    std::vector<double> values;
    std::vector<std::pair<std::string, TensorSlice>> layout;

    size_t size() const { return values.size(); }

    const TensorSlice& slice(const std::string& name) const {
        for (const auto& [n, s] : layout)
            if (n == name) return s;
        throw ConfigError("params: unknown tensor '" + name + "'");
    }

    std::span<double> tensor(const std::string& name) {
        const TensorSlice& s = slice(name);
        return std::span<double>(values).subspan(s.offset, s.size());
    }
    std::span<const double> tensor(const std::string& name) const {
        const TensorSlice& s = slice(name);
        return std::span<const double>(values).subspan(s.offset, s.size());
    }

    void check_finite() const {
        for (double x : values)
            if (!std::isfinite(x)) throw NumericsError("params: non-finite value");
    }
};

// Packing order: (W_l, b_l) for every layer including the output layer, then
// embedding projections, then per-layer FiLM scale/shift projections, then
// the class table. Offsets depend only on the MlpSpec fields.
struct MlpOffsets {
    std::vector<TensorSlice> W, b;                  // n_hidden + 1 entries
    std::vector<TensorSlice> embed_proj;            // n_embed_inputs entries
    std::vector<TensorSlice> film_scale, film_shift;  // n_hidden entries when film
    TensorSlice class_embed;
    std::vector<int> layer_in;                      // input width per layer
    size_t total = 0;

    explicit MlpOffsets(const MlpSpec& spec) {
        spec.validate();
        int L = spec.n_hidden();
        layer_in.resize(L + 1);
        for (int l = 0; l < L; ++l) {
            int prev = l == 0 ? spec.input_dim : spec.hidden_dims[l - 1];
            layer_in[l] = prev + spec.cond_dim(l);
        }
        layer_in[L] = L > 0 ? spec.hidden_dims[L - 1] : spec.input_dim;
        for (int l = 0; l <= L; ++l) {
            int out = l < L ? spec.hidden_dims[l] : spec.output_dim;
            W.push_back(take(out, layer_in[l]));
            b.push_back(take(1, out));
        }
        for (int j = 0; j < spec.n_embed_inputs; ++j)
            embed_proj.push_back(take(spec.time_embed_dim, spec.time_embed_dim));
        if (spec.film_enabled) {
            for (int l = 0; l < L; ++l) {
                film_scale.push_back(take(spec.hidden_dims[l], spec.time_embed_dim));
                film_shift.push_back(take(spec.hidden_dims[l], spec.time_embed_dim));
            }
        }
        if (spec.n_classes > 0)
            class_embed = take(spec.n_classes + 1, spec.time_embed_dim);
    }

    std::vector<std::pair<std::string, TensorSlice>> named_slices() const {
        std::vector<std::pair<std::string, TensorSlice>> out;
        for (size_t l = 0; l < W.size(); ++l) {
            out.emplace_back("W" + std::to_string(l), W[l]);
            out.emplace_back("b" + std::to_string(l), b[l]);
        }
        for (size_t j = 0; j < embed_proj.size(); ++j)
            out.emplace_back("P" + std::to_string(j), embed_proj[j]);
        for (size_t l = 0; l < film_scale.size(); ++l) {
            out.emplace_back("film_scale" + std::to_string(l), film_scale[l]);
            out.emplace_back("film_shift" + std::to_string(l), film_shift[l]);
        }
        if (class_embed.size() > 0) out.emplace_back("class_embed", class_embed);
        return out;
    }

  private:
    size_t cur = 0;
    TensorSlice take(int r, int c) {
        TensorSlice s{cur, r, c};
        cur += s.size();
        total = cur;
        return s;
    }
};

inline size_t param_count(const MlpSpec& spec) { return MlpOffsets(spec).total; }

// Fourier features of a scalar: [sin(2 pi f_i t) ... | cos(2 pi f_i t) ...]
// with dim/2 frequencies spaced geometrically from 1 to 1e4 cycles.
inline void fourier_time_embed_into(double t, int dim, double* out) {
    int n = dim / 2;
    for (int i = 0; i < n; ++i) {
        double f = n > 1 ? std::pow(10.0, 4.0 * i / (n - 1)) : 1.0;
        double angle = 2.0 * M_PI * f * t;
        out[i] = std::sin(angle);
        out[n + i] = std::cos(angle);
    }
}

inline std::vector<double> fourier_time_embed(double t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw ConfigError("fourier embed: dim must be even and >= 2");
    std::vector<double> out(dim);
    fourier_time_embed_into(t, dim, out.data());
    return out;
}

inline Matrix broadcast_row(std::span<const double> row, int n_rows) {
    Matrix m(n_rows, static_cast<int>(row.size()));
    for (int i = 0; i < n_rows; ++i)
        std::copy(row.begin(), row.end(), m.row(i));
    return m;
}

// h * (1 + scale) + shift, elementwise. Zero scale and shift is the identity,
// which is why FiLM projections start at zero.
inline std::vector<double> film_apply(std::span<const double> h,
                                      std::span<const double> scale,
                                      std::span<const double> shift) {
    if (h.size() != scale.size() || h.size() != shift.size())
        throw ConfigError("film: mismatched widths");
    std::vector<double> out(h.size());
    for (size_t i = 0; i < h.size(); ++i) out[i] = h[i] * (1.0 + scale[i]) + shift[i];
    return out;
}

inline double activation_forward(Activation a, double x) {
    if (a == Activation::ReLU) return x > 0 ? x : 0.0;
    return x / (1.0 + std::exp(-x));
}

inline double activation_grad(Activation a, double x) {
    if (a == Activation::ReLU) return x > 0 ? 1.0 : 0.0;
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

// Everything the backward pass replays. layer_in[l] holds the concatenated
// input of hidden layer l (so h_{l-1} is embedded in it); out_in is the input
// of the final linear layer.
struct MlpTape {
    int batch = 0;
    double dropout_rate = 0;
    std::vector<int> labels;
    std::vector<Matrix> embed_raw;   // per embedding input, after the class-row add
    Matrix emb;                      // combined projected embedding
    std::vector<Matrix> layer_in;    // per hidden layer
    std::vector<Matrix> pre;         // pre-FiLM preactivation (film only)
    std::vector<Matrix> scale;       // per-item FiLM scales (film only)
    std::vector<Matrix> act_in;      // activation input
    std::vector<Matrix> drop_mask;   // 0/1 keep masks (dropout only)
    Matrix out_in;
};

struct MlpForwardResult {
    Matrix out;
    MlpTape tape;
};

// Post-activation (and post-dropout) output of hidden layer l, recovered from
// the tape. This is what downstream consumers see as "features of layer l".
inline Matrix hidden_activation(const MlpSpec& spec, const MlpTape& tape, int l) {
    int L = spec.n_hidden();
    if (l < 0 || l >= L) throw ConfigError("mlp: hidden layer index out of range");
    int width = spec.hidden_dims[l];
    const Matrix& src = (l == L - 1) ? tape.out_in : tape.layer_in[l + 1];
    Matrix h(tape.batch, width);
    for (int i = 0; i < tape.batch; ++i)
        std::copy(src.row(i), src.row(i) + width, h.row(i));
    return h;
}

inline MlpForwardResult mlp_forward(const MlpSpec& spec,
                                    std::span<const double> params,
                                    const Matrix& x,
                                    std::span<const Matrix> embeds = {},
                                    std::span<const int> labels = {},
                                    std::span<const Matrix> cond = {},
                                    double dropout_rate = 0.0,
                                    Rng* dropout_rng = nullptr) {
    MlpOffsets off(spec);
    if (params.size() != off.total) throw ConfigError("mlp: parameter length mismatch");
    if (x.cols != spec.input_dim) throw ConfigError("mlp: input width mismatch");
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("mlp: dropout rate outside [0,1)");
    if (dropout_rate > 0 && dropout_rng == nullptr)
        throw ConfigError("mlp: dropout requires an rng");
    const int B = x.rows;
    const int L = spec.n_hidden();
    const int E = spec.time_embed_dim;

    MlpForwardResult res;
    MlpTape& tape = res.tape;
    tape.batch = B;
    tape.dropout_rate = dropout_rate;

    if (spec.n_embed_inputs > 0) {
        if (static_cast<int>(embeds.size()) != spec.n_embed_inputs)
            throw ConfigError("mlp: wrong number of embedding inputs");
        for (const Matrix& e : embeds)
            if (e.rows != B || e.cols != E) throw ConfigError("mlp: embedding shape mismatch");
        if (spec.n_classes > 0) {
            if (static_cast<int>(labels.size()) != B)
                throw ConfigError("mlp: class labels required for every item");
            for (int lab : labels)
                if (lab < 0 || lab > spec.n_classes)
                    throw ConfigError("mlp: class label out of range");
            tape.labels.assign(labels.begin(), labels.end());
        }
        for (int j = 0; j < spec.n_embed_inputs; ++j) {
            Matrix raw = embeds[j];
            if (j == 0 && spec.n_classes > 0) {
                CMatView table = view(params, off.class_embed);
                for (int i = 0; i < B; ++i) axpy(1.0, table.row(labels[i]), raw.row(i), E);
            }
            tape.embed_raw.push_back(std::move(raw));
        }
        tape.emb = Matrix(B, E);
        Matrix tmp(B, E);
        for (int j = 0; j < spec.n_embed_inputs; ++j) {
            matmul_nt(tape.embed_raw[j], view(params, off.embed_proj[j]), tmp);
            axpy(1.0, tmp.v.data(), tape.emb.v.data(), static_cast<int>(tmp.size()));
        }
    }

    const int n_cond = static_cast<int>(spec.cond_dims.size());
    if (static_cast<int>(cond.size()) != n_cond)
        throw ConfigError("mlp: wrong number of conditioning inputs");
    for (int l = 0; l < n_cond; ++l) {
        if (spec.cond_dims[l] == 0) continue;
        if (cond[l].rows != B || cond[l].cols != spec.cond_dims[l])
            throw ConfigError("mlp: conditioning shape mismatch");
    }

    Matrix h = x;
    for (int l = 0; l < L; ++l) {
        const int H = spec.hidden_dims[l];
        Matrix in_l(B, off.layer_in[l]);
        for (int i = 0; i < B; ++i) {
            double* dst = in_l.row(i);
            std::copy(h.row(i), h.row(i) + h.cols, dst);
            if (spec.cond_dim(l) > 0)
                std::copy(cond[l].row(i), cond[l].row(i) + cond[l].cols, dst + h.cols);
        }

        Matrix pre(B, H);
        matmul_nt(in_l, view(params, off.W[l]), pre);
        CMatView bias = view(params, off.b[l]);
        for (int i = 0; i < B; ++i) axpy(1.0, bias.row(0), pre.row(i), H);

        Matrix act_in;
        if (spec.film_enabled) {
            Matrix sc(B, H), sh(B, H);
            matmul_nt(tape.emb, view(params, off.film_scale[l]), sc);
            matmul_nt(tape.emb, view(params, off.film_shift[l]), sh);
            act_in = Matrix(B, H);
            for (size_t i = 0; i < act_in.size(); ++i)
                act_in.v[i] = pre.v[i] * (1.0 + sc.v[i]) + sh.v[i];
            tape.pre.push_back(std::move(pre));
            tape.scale.push_back(std::move(sc));
        } else {
            act_in = std::move(pre);
        }

        Matrix out(B, H);
        for (size_t i = 0; i < out.size(); ++i)
            out.v[i] = activation_forward(spec.activation, act_in.v[i]);

        if (dropout_rate > 0) {
            Matrix mask(B, H);
            double keep = 1.0 - dropout_rate;
            for (size_t i = 0; i < mask.size(); ++i) {
                mask.v[i] = dropout_rng->uniform() < keep ? 1.0 : 0.0;
                out.v[i] *= mask.v[i] / keep;
            }
            tape.drop_mask.push_back(std::move(mask));
        }

        tape.act_in.push_back(std::move(act_in));
        tape.layer_in.push_back(std::move(in_l));
        h = std::move(out);
    }

    tape.out_in = std::move(h);
    res.out = Matrix(B, spec.output_dim);
    matmul_nt(tape.out_in, view(params, off.W[L]), res.out);
    CMatView bias = view(params, off.b[L]);
    for (int i = 0; i < B; ++i) axpy(1.0, bias.row(0), res.out.row(i), spec.output_dim);
    return res;
}

struct MlpGradients {
    Matrix x;                    // d loss / d input
    std::vector<Matrix> embeds;  // d loss / d each embedding input
    std::vector<Matrix> cond;    // d loss / d each conditioning input
};

// Extra gradients injected directly at hidden-layer outputs; used when a
// layer's activations feed a second network whose backward pass has already
// produced gradients for them.
using HiddenGrads = std::span<const std::pair<int, const Matrix*>>;

// Reverse pass. Parameter gradients are accumulated (+=) into param_grads so
// several backward passes can share one buffer; activation-input gradients
// are returned. dout must match the forward output shape.
inline MlpGradients mlp_backward(const MlpSpec& spec,
                                 std::span<const double> params,
                                 const MlpTape& tape,
                                 const Matrix& dout,
                                 std::span<double> param_grads,
                                 HiddenGrads hidden_grads = {}) {
    MlpOffsets off(spec);
    if (params.size() != off.total || param_grads.size() != off.total)
        throw ConfigError("mlp backward: parameter length mismatch");
    const int B = tape.batch;
    const int L = spec.n_hidden();
    const int E = spec.time_embed_dim;
    if (dout.rows != B || dout.cols != spec.output_dim)
        throw ConfigError("mlp backward: output gradient shape mismatch");

    MlpGradients grads;
    grads.cond.resize(spec.cond_dims.size());

    // Output layer.
    {
        MatView dW = view(param_grads, off.W[L]);
        matmul_tn_acc(dout, tape.out_in, dW);
        MatView db = view(param_grads, off.b[L]);
        for (int i = 0; i < B; ++i) axpy(1.0, dout.row(i), db.row(0), spec.output_dim);
    }
    Matrix d_prev(B, off.layer_in[L]);
    matmul_nn_acc(dout, view(params, off.W[L]), d_prev);

    Matrix demb;
    if (spec.film_enabled) demb = Matrix(B, E);

    for (int l = L - 1; l >= 0; --l) {
        const int H = spec.hidden_dims[l];
        // d_prev currently holds the gradient w.r.t. layer (l+1)'s input,
        // whose first H columns are this layer's output.
        Matrix dh(B, H);
        for (int i = 0; i < B; ++i)
            std::copy(d_prev.row(i), d_prev.row(i) + H, dh.row(i));
        if (l + 1 < L && spec.cond_dim(l + 1) > 0) {
            int w = spec.cond_dim(l + 1);
            Matrix& dc = grads.cond[l + 1];
            dc = Matrix(B, w);
            for (int i = 0; i < B; ++i)
                std::copy(d_prev.row(i) + H, d_prev.row(i) + H + w, dc.row(i));
        }
        for (const auto& [idx, g] : hidden_grads) {
            if (idx != l) continue;
            if (g->rows != B || g->cols != H)
                throw ConfigError("mlp backward: injected gradient shape mismatch");
            axpy(1.0, g->v.data(), dh.v.data(), static_cast<int>(dh.size()));
        }

        if (tape.dropout_rate > 0) {
            double keep = 1.0 - tape.dropout_rate;
            const Matrix& mask = tape.drop_mask[l];
            for (size_t i = 0; i < dh.size(); ++i) dh.v[i] *= mask.v[i] / keep;
        }

        const Matrix& act_in = tape.act_in[l];
        Matrix dpre(B, H);
        if (spec.film_enabled) {
            const Matrix& sc = tape.scale[l];
            const Matrix& pre = tape.pre[l];
            Matrix dscale(B, H);
            for (size_t i = 0; i < dpre.size(); ++i) {
                double dact = dh.v[i] * activation_grad(spec.activation, act_in.v[i]);
                dpre.v[i] = dact * (1.0 + sc.v[i]);
                dscale.v[i] = dact * pre.v[i];
                dh.v[i] = dact;  // reuse as dshift
            }
            MatView dG = view(param_grads, off.film_scale[l]);
            MatView dBp = view(param_grads, off.film_shift[l]);
            matmul_tn_acc(dscale, tape.emb, dG);
            matmul_tn_acc(dh, tape.emb, dBp);
            matmul_nn_acc(dscale, view(params, off.film_scale[l]), demb);
            matmul_nn_acc(dh, view(params, off.film_shift[l]), demb);
        } else {
            for (size_t i = 0; i < dpre.size(); ++i)
                dpre.v[i] = dh.v[i] * activation_grad(spec.activation, act_in.v[i]);
        }

        MatView dW = view(param_grads, off.W[l]);
        matmul_tn_acc(dpre, tape.layer_in[l], dW);
        MatView db = view(param_grads, off.b[l]);
        for (int i = 0; i < B; ++i) axpy(1.0, dpre.row(i), db.row(0), H);

        d_prev = Matrix(B, off.layer_in[l]);
        matmul_nn_acc(dpre, view(params, off.W[l]), d_prev);
    }

    // d_prev is now the gradient w.r.t. concat(x, cond_0).
    grads.x = Matrix(B, spec.input_dim);
    for (int i = 0; i < B; ++i)
        std::copy(d_prev.row(i), d_prev.row(i) + spec.input_dim, grads.x.row(i));
    if (L > 0 && spec.cond_dim(0) > 0) {
        int w = spec.cond_dim(0);
        grads.cond[0] = Matrix(B, w);
        for (int i = 0; i < B; ++i)
            std::copy(d_prev.row(i) + spec.input_dim, d_prev.row(i) + spec.input_dim + w,
                      grads.cond[0].row(i));
    }

    if (spec.n_embed_inputs > 0) {
        for (int j = 0; j < spec.n_embed_inputs; ++j) {
            Matrix de(B, E);
            matmul_nn_acc(demb, view(params, off.embed_proj[j]), de);
            MatView dP = view(param_grads, off.embed_proj[j]);
            matmul_tn_acc(demb, tape.embed_raw[j], dP);
            grads.embeds.push_back(std::move(de));
        }
        if (spec.n_classes > 0) {
            MatView dtable = view(param_grads, off.class_embed);
            for (int i = 0; i < B; ++i)
                axpy(1.0, grads.embeds[0].row(i), dtable.row(tape.labels[i]), E);
        }
    }
    return grads;
}

// He-scaled weights, zero biases. FiLM projections and the class table start
// at zero so conditioning is initially the identity; embedding projections
// are random so FiLM gradients do not start in a dead fixed point.
inline ParamVector init_params(const MlpSpec& spec, Rng& rng) {
    MlpOffsets off(spec);
    ParamVector pv;
    pv.values.assign(off.total, 0.0);
    pv.layout = off.named_slices();
    std::span<double> all(pv.values);
    int L = spec.n_hidden();
    for (int l = 0; l <= L; ++l) {
        double std = std::sqrt(2.0 / off.layer_in[l]);
        for (double& w : all.subspan(off.W[l].offset, off.W[l].size())) w = std * rng.normal();
    }
    for (int j = 0; j < spec.n_embed_inputs; ++j) {
        double std = std::sqrt(1.0 / spec.time_embed_dim);
        for (double& w : all.subspan(off.embed_proj[j].offset, off.embed_proj[j].size()))
            w = std * rng.normal();
    }
    return pv;
}

// Scales grads in place when their global L2 norm exceeds max_norm; returns
// the factor applied. Non-finite norms are rejected here, which makes this
// the single funnel where diverging runs get caught.
inline double clip_global_norm(std::span<double> grads, double max_norm) {
    if (!(max_norm > 0)) throw ConfigError("clip: max_norm must be positive");
    double sq = dot(grads.data(), grads.data(), static_cast<int>(grads.size()));
    if (!std::isfinite(sq)) throw NumericsError("clip: non-finite gradient norm");
    double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0;
    double scale = max_norm / norm;
    for (double& g : grads) g *= scale;
    return scale;
}

struct OptimState {
    long step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-12;
    double clip_norm = 1.0;
    long warmup_steps = 0;
    std::vector<double> m, v;

    static OptimState create(size_t n_params, double lr, double beta1 = 0.9,
                             double beta2 = 0.99, double epsilon = 1e-12,
                             double clip_norm = 1.0, long warmup_steps = 0) {
        if (!(lr > 0)) throw ConfigError("adam: lr must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("adam: betas must lie in [0, 1)");
        OptimState s;
        s.lr = lr;
        s.beta1 = beta1;
        s.beta2 = beta2;
        s.epsilon = epsilon;
        s.clip_norm = clip_norm;
        s.warmup_steps = warmup_steps;
        s.m.assign(n_params, 0.0);
        s.v.assign(n_params, 0.0);
        return s;
    }
};

// Adam with global-norm clipping and linear learning-rate warmup. grads are
// clipped in place.
inline void adam_step(std::span<double> params, std::span<double> grads, OptimState& st) {
    if (params.size() != st.m.size() || grads.size() != st.m.size())
        throw ConfigError("adam: size mismatch");
    clip_global_norm(grads, st.clip_norm);
    st.step += 1;
    double lr = st.lr;
    if (st.warmup_steps > 0)
        lr *= std::min(1.0, static_cast<double>(st.step) / static_cast<double>(st.warmup_steps));
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        double g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        double mhat = st.m[i] / bc1;
        double vhat = st.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + st.epsilon);
    }
}

struct EmaState {
    double decay = 0.999;
    std::vector<double> shadow;

    static EmaState create(std::span<const double> params, double decay) {
        if (decay < 0 || decay >= 1) throw ConfigError("ema: decay must lie in [0, 1)");
        EmaState e;
        e.decay = decay;
        e.shadow.assign(params.begin(), params.end());
        return e;
    }
};

inline void ema_update(EmaState& ema, std::span<const double> params) {
    if (ema.shadow.size() != params.size()) throw ConfigError("ema: size mismatch");
    for (size_t i = 0; i < params.size(); ++i)
        ema.shadow[i] = ema.decay * ema.shadow[i] + (1.0 - ema.decay) * params[i];
}

}  // namespace dualrate
