#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace elen {

// Dense row-major matrix. The whole numeric stack is templated on the
// scalar so the same code runs in f32 (default) and f64 (gradient checks).
template <typename T>
struct Mat {
    uint32_t rows = 0;
    uint32_t cols = 0;
    std::vector<T> a;

    Mat() = default;
    Mat(uint32_t r, uint32_t c) : rows(r), cols(c), a(size_t(r) * c, T(0)) {}

    T* row(size_t r) { return a.data() + r * cols; }
    const T* row(size_t r) const { return a.data() + r * cols; }
    T& at(size_t r, size_t c) { return a[r * cols + c]; }
    T at(size_t r, size_t c) const { return a[r * cols + c]; }
    size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), T(0)); }
};

// Dot product with four running sums; fixed summation order keeps results
// reproducible while still letting the compiler vectorize each lane.
template <typename T>
inline T dot(const T* x, const T* y, size_t n) {
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    for (; i < n; ++i) s0 += x[i] * y[i];
    return (s0 + s1) + (s2 + s3);
}

template <typename T>
inline void axpy(T alpha, const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Y[n x m] = X[n x k] * W[k x m].  Weights live in [in x out] layout so the
// inner loop is a contiguous axpy over output columns.  Slicing falls out of
// the loop bounds: only the first x.cols rows and the first out_cols columns
// of W participate.
template <typename T>
inline void matmul(const Mat<T>& x, const Mat<T>& w, Mat<T>& y,
                   uint32_t out_cols = 0) {
    const uint32_t m = out_cols ? out_cols : w.cols;
    if (x.cols > w.rows || y.rows != x.rows || y.cols < m || w.cols < m)
        throw std::invalid_argument("matmul: shape mismatch");
    for (uint32_t i = 0; i < x.rows; ++i) {
        T* yi = y.row(i);
        const T* xi = x.row(i);
        for (uint32_t k = 0; k < x.cols; ++k)
            axpy(xi[k], w.row(k), yi, m);
    }
}

// dX[n x k] += dY[n x m_used] * W^T, using the first m_used columns and the
// first dx.cols rows of W.
template <typename T>
inline void matmul_grad_x(const Mat<T>& dy, const Mat<T>& w, Mat<T>& dx,
                          uint32_t m_used) {
    if (dx.cols > w.rows || dy.rows != dx.rows)
        throw std::invalid_argument("matmul_grad_x: shape mismatch");
    for (uint32_t i = 0; i < dy.rows; ++i) {
        const T* dyi = dy.row(i);
        T* dxi = dx.row(i);
        for (uint32_t k = 0; k < dx.cols; ++k)
            dxi[k] += dot(dyi, w.row(k), m_used);
    }
}

// dW[k x m_used] += X^T * dY.
template <typename T>
inline void matmul_grad_w(const Mat<T>& x, const Mat<T>& dy, Mat<T>& dw,
                          uint32_t m_used) {
    for (uint32_t i = 0; i < x.rows; ++i) {
        const T* xi = x.row(i);
        const T* dyi = dy.row(i);
        for (uint32_t k = 0; k < x.cols; ++k)
            axpy(xi[k], dyi, dw.row(k), m_used);
    }
}

template <typename T>
inline bool all_finite(std::span<const T> v) {
    for (T x : v)
        if (!std::isfinite(double(x))) return false;
    return true;
}

// tanh-form GELU, fixed project-wide.
template <typename T>
inline T gelu(T x) {
    const double c = 0.7978845608028654;  // sqrt(2/pi)
    double xd = double(x);
    return T(0.5 * xd * (1.0 + std::tanh(c * (xd + 0.044715 * xd * xd * xd))));
}

template <typename T>
inline T gelu_deriv(T x) {
    const double c = 0.7978845608028654;
    double xd = double(x);
    double u = c * (xd + 0.044715 * xd * xd * xd);
    double t = std::tanh(u);
    double du = c * (1.0 + 3.0 * 0.044715 * xd * xd);
    return T(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

// Gaussian truncated at +-3 sigma, used for weight init.
template <typename T>
inline void fill_trunc_normal(std::vector<T>& v, double stddev,
                              std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : v) {
        double s;
        do {
            s = dist(rng);
        } while (std::abs(s) > 3.0 * stddev);
        x = T(s);
    }
}

}  // namespace elen
