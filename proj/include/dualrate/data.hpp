// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/matrix.hpp"
#include "dualrate/rng.hpp"

namespace dualrate {

// Isotropic Gaussian mixture; component i is N(means[i], comp_std^2 I). The
// component index doubles as the class label.
struct GmmSpec {
    Matrix means;  // n_components x dim
    std::vector<double> weights;
    double comp_std = 0.1;

    int n_components() const { return means.rows; }
    int dim() const { return means.cols; }

    void validate() const {
        if (means.rows < 1 || means.cols < 1) throw ConfigError("gmm: empty mixture");
        if (static_cast<int>(weights.size()) != means.rows)
            throw ConfigError("gmm: weight count mismatch");
        double sum = 0;
        for (double w : weights) {
            if (!(w > 0)) throw ConfigError("gmm: weights must be positive");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("gmm: weights must sum to 1");
        if (!(comp_std > 0)) throw ConfigError("gmm: comp_std must be positive");
    }

    // Equal-weight components on a circle; the standing 2-D benchmark.
    static GmmSpec ring(int n_comp, double radius, double comp_std) {
        if (n_comp < 1) throw ConfigError("gmm: need at least one component");
        GmmSpec g;
        g.means = Matrix(n_comp, 2);
        for (int i = 0; i < n_comp; ++i) {
            double a = 2.0 * M_PI * i / n_comp;
            g.means.at(i, 0) = radius * std::cos(a);
            g.means.at(i, 1) = radius * std::sin(a);
        }
        g.weights.assign(n_comp, 1.0 / n_comp);
        g.comp_std = comp_std;
        g.validate();
        return g;
    }

    // E ||x||^2, handy as a scale reference in tests.
    double mean_square_norm() const {
        double s = 0;
        for (int i = 0; i < means.rows; ++i)
            s += weights[i] * dot(means.row(i), means.row(i), means.cols);
        return s + dim() * comp_std * comp_std;
    }
};

struct DataBatch {
    Matrix x;
    std::vector<int> labels;         // empty when the data is unlabeled
    std::vector<uint8_t> dropped;    // 1 marks items whose label was dropped
};

inline DataBatch gmm_sample(const GmmSpec& g, int n, Rng& rng) {
    g.validate();
    DataBatch b;
    b.x = Matrix(n, g.dim());
    b.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        int c = 0;
        double acc = g.weights[0];
        while (u >= acc && c + 1 < g.n_components()) acc += g.weights[++c];
        b.labels[i] = c;
        for (int d = 0; d < g.dim(); ++d)
            b.x.at(i, d) = g.means.at(c, d) + g.comp_std * rng.normal();
    }
    return b;
}

inline double gmm_log_density(const GmmSpec& g, std::span<const double> x) {
    if (static_cast<int>(x.size()) != g.dim()) throw ConfigError("gmm: point dim mismatch");
    double var = g.comp_std * g.comp_std;
    double lognorm = -0.5 * g.dim() * std::log(2.0 * M_PI * var);
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(g.n_components());
    for (int i = 0; i < g.n_components(); ++i) {
        double sq = 0;
        for (int d = 0; d < g.dim(); ++d) {
            double diff = x[d] - g.means.at(i, d);
            sq += diff * diff;
        }
        terms[i] = std::log(g.weights[i]) + lognorm - 0.5 * sq / var;
        best = std::max(best, terms[i]);
    }
    double s = 0;
    for (double t : terms) s += std::exp(t - best);
    return best + std::log(s);
}

// Tiny image-like dataset: side x side pixels in {-1, +1} arranged as
// diagonal stripes whose phase is the class, flattened row-major. Exists so
// cyclic-shift augmentation has something meaningful to act on.
struct GridPatternSpec {
    int side = 8;
    int n_classes = 4;

    void validate() const {
        if (side < 2) throw ConfigError("grid: side must be at least 2");
        if (n_classes < 1) throw ConfigError("grid: need at least one class");
    }
    int dim() const { return side * side; }
};

inline Matrix grid_pattern(const GridPatternSpec& g, int cls) {
    g.validate();
    if (cls < 0 || cls >= g.n_classes) throw ConfigError("grid: class out of range");
    Matrix m(1, g.dim());
    for (int r = 0; r < g.side; ++r)
        for (int c = 0; c < g.side; ++c)
            m.at(0, r * g.side + c) = ((r + 2 * c + cls) % 4 < 2) ? 1.0 : -1.0;
    return m;
}

inline DataBatch grid_sample(const GridPatternSpec& g, int n, Rng& rng) {
    g.validate();
    DataBatch b;
    b.x = Matrix(n, g.dim());
    b.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        int cls = rng.uniform_int(g.n_classes);
        b.labels[i] = cls;
        Matrix p = grid_pattern(g, cls);
        std::copy(p.v.begin(), p.v.end(), b.x.row(i));
    }
    return b;
}

// Cyclic translation by up to max_shift pixels along each axis, applied
// independently per item with the given probability.
inline DataBatch augment_translate(const DataBatch& in, const GridPatternSpec& g,
                                   double prob, int max_shift, Rng& rng) {
    g.validate();
    if (in.x.cols != g.dim())
        throw ConfigError("augment: batch width does not match the grid layout");
    if (prob < 0 || prob > 1) throw ConfigError("augment: probability outside [0, 1]");
    if (max_shift < 0 || max_shift >= g.side) throw ConfigError("augment: bad max_shift");
    DataBatch out = in;
    for (int i = 0; i < in.x.rows; ++i) {
        if (rng.uniform() >= prob) continue;
        int dr = rng.uniform_int(2 * max_shift + 1) - max_shift;
        int dc = rng.uniform_int(2 * max_shift + 1) - max_shift;
        for (int r = 0; r < g.side; ++r)
            for (int c = 0; c < g.side; ++c) {
                int sr = ((r - dr) % g.side + g.side) % g.side;
                int sc = ((c - dc) % g.side + g.side) % g.side;
                out.x.at(i, r * g.side + c) = in.x.at(i, sr * g.side + sc);
            }
    }
    return out;
}

// Replace each label with the null class (index n_classes) with probability
// prob; the null row of the class table is what the unconditional branch of
// guided sampling conditions on.
inline DataBatch drop_class_labels(const DataBatch& in, int n_classes, double prob, Rng& rng) {
    if (prob < 0 || prob > 1) throw ConfigError("label drop: probability outside [0, 1]");
    DataBatch out = in;
    out.dropped.assign(in.labels.size(), 0);
    for (size_t i = 0; i < out.labels.size(); ++i) {
        if (rng.uniform() < prob) {
            out.labels[i] = n_classes;
            out.dropped[i] = 1;
        }
    }
    return out;
}

}  // namespace dualrate
