// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

#include "dualrate/common.hpp"

namespace dualrate {

// Dense row-major matrix of doubles. Rows are contiguous; the kernels below
// rely on that and on plain IEEE semantics (no reassociation), so NaNs from a
// diverging run propagate instead of being optimized away.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {
        assert(r >= 0 && c >= 0);
    }

    double* row(int i) { return v.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return v.data() + static_cast<size_t>(i) * cols; }

    double& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }

    size_t size() const { return v.size(); }

    void fill(double value) { std::fill(v.begin(), v.end(), value); }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// Eight independent accumulators: the loop vectorizes under -O3 without
// -ffast-math, and the summation order is fixed, so results are reproducible.
inline double dot(const double* a, const double* b, int n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i + 0] * b[i + 0];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    double tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return (((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7))) + tail;
}

// y += c * x
inline void axpy(double c, const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += c * x[i];
}

// The kernels below are templated over "matrix-like" types: anything with
// rows, cols, and row(i) returning a contiguous pointer (Matrix above plus
// the parameter-slice views in nnkit).

// C = A * B^T with A (m x k), B (n x k), C (m x n). B^T layout means both
// operands stream row-wise.
template <class MA, class MB, class MC>
void matmul_nt(const MA& a, const MB& b, MC&& c) {
    assert(a.cols == b.cols && c.rows == a.rows && c.cols == b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (int j = 0; j < b.rows; ++j) ci[j] = dot(ai, b.row(j), a.cols);
    }
}

// C += G * B with G (m x n), B (n x k), C (m x k).
template <class MG, class MB, class MC>
void matmul_nn_acc(const MG& g, const MB& b, MC&& c) {
    assert(g.cols == b.rows && c.rows == g.rows && c.cols == b.cols);
    for (int i = 0; i < g.rows; ++i) {
        const double* gi = g.row(i);
        double* ci = c.row(i);
        for (int j = 0; j < g.cols; ++j) axpy(gi[j], b.row(j), ci, b.cols);
    }
}

// C += G^T * A with G (m x n), A (m x k), C (n x k).
template <class MG, class MA, class MC>
void matmul_tn_acc(const MG& g, const MA& a, MC&& c) {
    assert(g.rows == a.rows && c.rows == g.cols && c.cols == a.cols);
    for (int i = 0; i < g.rows; ++i) {
        const double* gi = g.row(i);
        const double* ai = a.row(i);
        for (int j = 0; j < g.cols; ++j) axpy(gi[j], ai, c.row(j), a.cols);
    }
}

inline double squared_distance(const Matrix& a, const Matrix& b) {
    assert(a.same_shape(b));
    double s = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        double d = a.v[i] - b.v[i];
        s += d * d;
    }
    return s;
}

}  // namespace dualrate
