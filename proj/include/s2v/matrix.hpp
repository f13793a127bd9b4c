#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "errors.hpp"

namespace s2v {

// Dense row-major matrix of 32-bit floats. All tensors in the library are
// rank-2; vectors are 1xN rows and scalars are 1x1.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data((size_t) r * c, 0.0f) {
        if (r < 0 || c < 0) {
            throw DimensionError("matrix dims must be non-negative");
        }
    }
    Matrix(int r, int c, float fill) : rows(r), cols(c), data((size_t) r * c, fill) {}

    float & at(int r, int c) { return data[(size_t) r * cols + c]; }
    float at(int r, int c) const { return data[(size_t) r * cols + c]; }

    float * row(int r) { return data.data() + (size_t) r * cols; }
    const float * row(int r) const { return data.data() + (size_t) r * cols; }

    size_t size() const { return data.size(); }

    bool same_shape(const Matrix & o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (float v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

inline void require_same_shape(const Matrix & a, const Matrix & b, const char * op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shapes " + std::to_string(a.rows) + "x" +
                             std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                             std::to_string(b.cols));
    }
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes one row with mean/variance accumulated in double. Writes the
// normalized row to out and returns 1/sqrt(var + eps) for backward reuse.
inline double ln_row(const float * x, int n, float * out) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
        double d = x[j] - mean;
        var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < n; ++j) {
        out[j] = (float) ((x[j] - mean) * inv);
    }
    return inv;
}

// Row softmax with max subtraction, exp/sum in double.
inline void softmax_row(const float * x, int n, float * out) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) {
        if (x[j] > mx) mx = x[j];
    }
    double sum = 0.0;
    std::vector<double> e((size_t) n);
    for (int j = 0; j < n; ++j) {
        e[j] = std::exp((double) x[j] - mx);
        sum += e[j];
    }
    for (int j = 0; j < n; ++j) {
        out[j] = (float) (e[j] / sum);
    }
}

// log(sum(exp(row))) in double, max-subtracted.
inline double logsumexp_row(const float * x, int n) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) {
        if (x[j] > mx) mx = x[j];
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        sum += std::exp((double) x[j] - mx);
    }
    return mx + std::log(sum);
}

inline double ln_row_wide(const double * x, int n, double * out) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
        double d = x[j] - mean;
        var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < n; ++j) {
        out[j] = (x[j] - mean) * inv;
    }
    return inv;
}

inline void softmax_row_wide(const double * x, int n, double * out) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) {
        if (x[j] > mx) mx = x[j];
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        out[j] = std::exp(x[j] - mx);
        sum += out[j];
    }
    for (int j = 0; j < n; ++j) out[j] /= sum;
}

inline double logsumexp_row_wide(const double * x, int n) {
    double mx = x[0];
    for (int j = 1; j < n; ++j) {
        if (x[j] > mx) mx = x[j];
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        sum += std::exp(x[j] - mx);
    }
    return mx + std::log(sum);
}

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

inline double gelu_grad_scalar(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// Numerically stable softplus log(1 + e^z).
inline double softplus_scalar(double z) {
    return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z)));
}

inline double sigmoid_scalar(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    double e = std::exp(z);
    return e / (1.0 + e);
}

} // namespace detail

// Layer normalization of each row: zero mean, unit variance, no learned
// affine part. Rows must have length >= 2.
inline Matrix layer_norm(const Matrix & x) {
    if (x.cols < 2) {
        throw DimensionError("layer_norm: rows must have length >= 2");
    }
    Matrix out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        detail::ln_row(x.row(i), x.cols, out.row(i));
    }
    return out;
}

// Row-wise softmax.
inline Matrix softmax_rows(const Matrix & x) {
    if (x.cols < 1) {
        throw DimensionError("softmax_rows: rows must be non-empty");
    }
    Matrix out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        detail::softmax_row(x.row(i), x.cols, out.row(i));
    }
    return out;
}

// out = A*B with optional transposition of either operand, accumulating each
// output element in double.
inline void matmul_into(const Matrix & a, const Matrix & b, bool ta, bool tb, Matrix & out,
                        bool accumulate) {
    const int m = ta ? a.cols : a.rows;
    const int k = ta ? a.rows : a.cols;
    const int kb = tb ? b.cols : b.rows;
    const int n = tb ? b.rows : b.cols;
    if (k != kb) {
        throw DimensionError("matmul: inner dims " + std::to_string(k) + " vs " + std::to_string(kb));
    }
    if (out.rows != m || out.cols != n) {
        throw DimensionError("matmul: bad output shape");
    }
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            if (!ta && !tb) {
                const float * ar = a.row(i);
                for (int p = 0; p < k; ++p) acc += (double) ar[p] * b.at(p, j);
            } else if (!ta && tb) {
                const float * ar = a.row(i);
                const float * br = b.row(j);
                for (int p = 0; p < k; ++p) acc += (double) ar[p] * br[p];
            } else if (ta && !tb) {
                for (int p = 0; p < k; ++p) acc += (double) a.at(p, i) * b.at(p, j);
            } else {
                for (int p = 0; p < k; ++p) acc += (double) a.at(p, i) * b.at(j, p);
            }
            float * o = &out.at(i, j);
            *o = accumulate ? (float) (acc + *o) : (float) acc;
        }
    }
}

inline Matrix matmul(const Matrix & a, const Matrix & b, bool ta = false, bool tb = false) {
    Matrix out(ta ? a.cols : a.rows, tb ? b.rows : b.cols);
    matmul_into(a, b, ta, tb, out, false);
    return out;
}

// Double-precision counterpart of matmul_into over raw row-major buffers.
inline void matmul_wide_into(const double * a, int ar, int ac, const double * b, int br, int bc,
                             bool ta, bool tb, double * out) {
    const int m = ta ? ac : ar;
    const int k = ta ? ar : ac;
    const int kb = tb ? bc : br;
    const int n = tb ? br : bc;
    if (k != kb) {
        throw DimensionError("matmul: inner dims " + std::to_string(k) + " vs " + std::to_string(kb));
    }
    auto A = [&](int r, int c) { return a[(size_t) r * ac + c]; };
    auto B = [&](int r, int c) { return b[(size_t) r * bc + c]; };
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                acc += (ta ? A(p, i) : A(i, p)) * (tb ? B(j, p) : B(p, j));
            }
            out[(size_t) i * n + j] = acc;
        }
    }
}

} // namespace s2v
