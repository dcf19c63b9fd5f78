#pragma once

// Dense row-major float32 matrices and the handful of linear-algebra
// primitives the rest of the library is built on. Storage is binary32;
// every reduction (matmul inner products, Frobenius norms) accumulates
// in binary64. Same inputs always give bitwise-same outputs, including
// under row-parallel matmul: rows never share an accumulator.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gsq {

struct DenseMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;  // row-major, rows*cols entries

    DenseMatrix() = default;
    DenseMatrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {
        if (r < 0 || c < 0) throw std::invalid_argument("DenseMatrix: negative dimension");
    }
    DenseMatrix(int r, int c, std::vector<float> d) : rows(r), cols(c), data(std::move(d)) {
        if (r < 0 || c < 0) throw std::invalid_argument("DenseMatrix: negative dimension");
        if (data.size() != static_cast<size_t>(r) * c)
            throw std::invalid_argument("DenseMatrix: data length does not match rows*cols");
    }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t numel() const { return data.size(); }
    bool same_shape(const DenseMatrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
    void require_finite(const char* what) const {
        if (!all_finite()) throw std::runtime_error(std::string(what) + ": non-finite entry");
    }
};

struct IntMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<int32_t> data;

    IntMatrix() = default;
    IntMatrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0) {}

    int32_t& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    int32_t at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t numel() const { return data.size(); }
    bool operator==(const IntMatrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

inline std::string shape_str(const DenseMatrix& m) {
    std::ostringstream os;
    os << m.rows << "x" << m.cols;
    return os.str();
}

namespace detail {

// Worker cap for row-parallel loops. 1 = sequential.
inline int& thread_count_ref() {
    static int n = 1;
    return n;
}

template <typename Fn>
void parallel_rows(int rows, Fn&& fn) {
    int workers = thread_count_ref();
    if (workers <= 1 || rows < 2 * workers) {
        for (int r = 0; r < rows; ++r) fn(r);
        return;
    }
    if (workers > rows) workers = rows;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&, t] {
            for (int r = t; r < rows; r += workers) fn(r);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

inline void set_threads(int n) { detail::thread_count_ref() = n < 1 ? 1 : n; }
inline int get_threads() { return detail::thread_count_ref(); }

// c = a * b. Accumulates each output entry in binary64.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: dimension mismatch " + shape_str(a) + " * " + shape_str(b));
    DenseMatrix c(a.rows, b.cols);
    detail::parallel_rows(a.rows, [&](int i) {
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k)
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(k, j));
            c.at(i, j) = static_cast<float>(acc);
        }
    });
    return c;
}

// c = a * b^T. The layer forward X(W^T) uses this layout.
inline DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.cols)
        throw std::invalid_argument("matmul_nt: dimension mismatch " + shape_str(a) + " * " + shape_str(b) + "^T");
    DenseMatrix c(a.rows, b.rows);
    detail::parallel_rows(a.rows, [&](int i) {
        for (int j = 0; j < b.rows; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k)
                acc += static_cast<double>(a.at(i, k)) * static_cast<double>(b.at(j, k));
            c.at(i, j) = static_cast<float>(acc);
        }
    });
    return c;
}

// c = a^T * b.
inline DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows)
        throw std::invalid_argument("matmul_tn: dimension mismatch " + shape_str(a) + "^T * " + shape_str(b));
    DenseMatrix c(a.cols, b.cols);
    detail::parallel_rows(a.cols, [&](int i) {
        for (int j = 0; j < b.cols; ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.rows; ++k)
                acc += static_cast<double>(a.at(k, i)) * static_cast<double>(b.at(k, j));
            c.at(i, j) = static_cast<float>(acc);
        }
    });
    return c;
}

inline DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
    DenseMatrix c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("sub: shape mismatch");
    DenseMatrix c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("hadamard: shape mismatch");
    DenseMatrix c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

inline double frobenius_sq(const DenseMatrix& a) {
    double acc = 0.0;
    for (float v : a.data) acc += static_cast<double>(v) * static_cast<double>(v);
    return acc;
}

inline DenseMatrix identity(int n) {
    DenseMatrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
}

}  // namespace gsq
