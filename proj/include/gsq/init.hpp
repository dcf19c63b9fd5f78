#pragma once

// Warm-start machinery: round-to-nearest and GPTQ baselines plus logit
// initialization that reproduces a baseline bitwise when finalized with
// zero noise.
//
// All Hessian work runs in binary64; codes come out exact. GPTQ is the
// greedy column-order variant: quantize column j, divide the residual
// by the j-th diagonal of the upper Cholesky factor of (H + lambda I)^-1,
// and push the error into the not-yet-quantized columns.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "quantize.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gsq {

struct CalibSet {
    DenseMatrix x;          // samples x in_features
    std::vector<double> h;  // in x in, H = X^T X, binary64
    int in_features = 0;
    double damping = 0.0;   // lambda = 0.01 * mean(diag H)

    explicit CalibSet(DenseMatrix activations) : x(std::move(activations)) {
        if (x.rows < 1 || x.cols < 1) throw std::invalid_argument("CalibSet: empty calibration");
        x.require_finite("CalibSet");
        in_features = x.cols;
        h.assign(static_cast<size_t>(in_features) * in_features, 0.0);
        for (int r = 0; r < x.rows; ++r)
            for (int i = 0; i < in_features; ++i) {
                double xi = x.at(r, i);
                for (int j = i; j < in_features; ++j)
                    h[static_cast<size_t>(i) * in_features + j] += xi * x.at(r, j);
            }
        for (int i = 0; i < in_features; ++i)
            for (int j = 0; j < i; ++j)
                h[static_cast<size_t>(i) * in_features + j] =
                    h[static_cast<size_t>(j) * in_features + i];
        double trace = 0.0;
        for (int i = 0; i < in_features; ++i) trace += h[static_cast<size_t>(i) * in_features + i];
        damping = 0.01 * trace / in_features;
    }
};

struct BaselineSolution {
    IntMatrix codes;  // grid level values
    GroupScales scales;
};

namespace detail {

// Nearest level to t (binary64), ties toward the lower index.
inline int32_t nearest_level(const Grid& grid, double t) {
    int best = 0;
    double best_d = std::abs(t - grid.levels[0]);
    for (int i = 1; i < grid.size(); ++i) {
        double d = std::abs(t - grid.levels[i]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return grid.levels[best];
}

// Max-abs symmetric fit per group: s = max|w| / max|level|, positive.
// An all-zero group degenerates to s = 1e-8 (codes then land on 0).
inline GroupScales maxabs_scales(const DenseMatrix& w, const Grid& grid, int group_size) {
    GroupScales sc(w.rows, w.cols, group_size);
    float max_level = static_cast<float>(grid.max_abs_level());
    for (int r = 0; r < w.rows; ++r)
        for (int g = 0; g < sc.groups_per_row(); ++g) {
            int lo = g * group_size;
            int hi = std::min(w.cols, lo + group_size);
            float m = 0.0f;
            for (int c = lo; c < hi; ++c) m = std::max(m, std::abs(w.at(r, c)));
            sc.group_ref(r, g) = m == 0.0f ? 1e-8f : m / max_level;
        }
    return sc;
}

}  // namespace detail

inline BaselineSolution rtn(const DenseMatrix& w, const Grid& grid, int group_size) {
    grid.validate();
    w.require_finite("rtn");
    BaselineSolution out;
    out.scales = detail::maxabs_scales(w, grid, group_size);
    out.codes = IntMatrix(w.rows, w.cols);
    for (int r = 0; r < w.rows; ++r)
        for (int c = 0; c < w.cols; ++c) {
            double t = static_cast<double>(w.at(r, c)) / out.scales.at_coord(r, c);
            out.codes.at(r, c) = detail::nearest_level(grid, t);
        }
    return out;
}

namespace detail {

// Lower Cholesky of a binary64 matrix, in place conceptually: a = L L^T.
inline std::vector<double> cholesky_lower(std::vector<double> a, int n, const char* what) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = a[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                sum -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
            if (i == j) {
                if (!(sum > 0.0))
                    throw std::runtime_error(std::string(what) +
                                             ": Cholesky failed (matrix not positive definite); "
                                             "increase damping or provide richer calibration");
                a[static_cast<size_t>(i) * n + i] = std::sqrt(sum);
            } else {
                a[static_cast<size_t>(i) * n + j] = sum / a[static_cast<size_t>(j) * n + j];
            }
        }
        for (int j = i + 1; j < n; ++j) a[static_cast<size_t>(i) * n + j] = 0.0;
    }
    return a;
}

// Inverse from the lower factor: (L L^T)^-1 = L^-T L^-1.
inline std::vector<double> cholesky_inverse(const std::vector<double>& l, int n) {
    // Linv by forward substitution on unit vectors.
    std::vector<double> linv(static_cast<size_t>(n) * n, 0.0);
    for (int col = 0; col < n; ++col) {
        for (int i = col; i < n; ++i) {
            double sum = i == col ? 1.0 : 0.0;
            for (int k = col; k < i; ++k)
                sum -= l[static_cast<size_t>(i) * n + k] * linv[static_cast<size_t>(k) * n + col];
            linv[static_cast<size_t>(i) * n + col] = sum / l[static_cast<size_t>(i) * n + i];
        }
    }
    std::vector<double> inv(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double sum = 0.0;
            for (int k = i; k < n; ++k)  // (L^-T L^-1)[i][j] = sum_k Linv[k][i] Linv[k][j]
                sum += linv[static_cast<size_t>(k) * n + i] * linv[static_cast<size_t>(k) * n + j];
            inv[static_cast<size_t>(i) * n + j] = sum;
            inv[static_cast<size_t>(j) * n + i] = sum;
        }
    return inv;
}

}  // namespace detail

// Greedy column-wise quantization with inverse-Hessian error feedback.
// With an identity Hessian the compensation term vanishes and the codes
// equal rtn's bitwise.
inline BaselineSolution gptq(const DenseMatrix& w, const CalibSet& calib, const Grid& grid,
                             int group_size) {
    grid.validate();
    w.require_finite("gptq");
    int n = w.cols;
    if (calib.in_features != n)
        throw std::invalid_argument("gptq: calibration width " + std::to_string(calib.in_features) +
                                    " does not match layer in-features " + std::to_string(n));

    std::vector<double> hd = calib.h;
    for (int i = 0; i < n; ++i) hd[static_cast<size_t>(i) * n + i] += calib.damping;
    std::vector<double> l = detail::cholesky_lower(std::move(hd), n, "gptq");
    std::vector<double> hinv = detail::cholesky_inverse(l, n);
    // Upper factor U with H^-1 = U^T U is the transpose of H^-1's lower
    // Cholesky factor; row j of U drives the error feedback.
    std::vector<double> u = detail::cholesky_lower(std::move(hinv), n, "gptq");  // lower Lh
    // Use u as Lh; U[j][k] = Lh[k][j].

    BaselineSolution out;
    out.scales = detail::maxabs_scales(w, grid, group_size);
    out.codes = IntMatrix(w.rows, w.cols);

    std::vector<double> row(n);
    for (int r = 0; r < w.rows; ++r) {
        for (int c = 0; c < n; ++c) row[c] = w.at(r, c);
        for (int j = 0; j < n; ++j) {
            double s = out.scales.at_coord(r, j);
            int32_t code = detail::nearest_level(grid, row[j] / s);
            out.codes.at(r, j) = code;
            double q = s * static_cast<double>(code);
            double djj = u[static_cast<size_t>(j) * n + j];  // U[j][j] = Lh[j][j]
            double err = (row[j] - q) / djj;
            for (int k = j + 1; k < n; ++k)
                row[k] -= err * u[static_cast<size_t>(k) * n + j];  // U[j][k] = Lh[k][j]
        }
    }
    return out;
}

// Eq.-style warm-start bases:
//   ternary: mask base +1 where code != 0 else -1; sign base sgn(code)
//            (0 at pruned coordinates)
//   grid:    base_k = -(c_k - mu)^2 / 2, mean-centered per coordinate
// followed by l = sigma_init * (eps + alpha * base) with eps ~ N(0, I).

inline void grid_base_logits(const std::vector<float>& candidates, float mu, float* out) {
    int n = static_cast<int>(candidates.size());
    double mean = 0.0;
    for (int k = 0; k < n; ++k) {
        double d = static_cast<double>(candidates[k]) - mu;
        double v = -0.5 * d * d;
        out[k] = static_cast<float>(v);
        mean += v;
    }
    mean /= n;
    for (int k = 0; k < n; ++k) out[k] = static_cast<float>(out[k] - mean);
}

inline float scale_noise_logit(float base, float eps, float alpha, float sigma_init) {
    return sigma_init * (eps + alpha * base);
}

inline TernaryParams init_ternary_logits(const BaselineSolution& q0, float alpha, float sigma_init,
                                         const DenseMatrix& eps_mask, const DenseMatrix& eps_sign) {
    int rows = q0.codes.rows, cols = q0.codes.cols;
    if (eps_mask.rows != rows || eps_mask.cols != cols || eps_sign.rows != rows ||
        eps_sign.cols != cols)
        throw std::invalid_argument("init_ternary_logits: eps shape mismatch");
    TernaryParams p;
    p.mask_logits = DenseMatrix(rows, cols);
    p.sign_logits = DenseMatrix(rows, cols);
    p.scales = q0.scales;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            int32_t code = q0.codes.at(r, c);
            if (code < -1 || code > 1)
                throw std::invalid_argument("init_ternary_logits: code outside {-1,0,1}");
            float base_mask = code != 0 ? 1.0f : -1.0f;
            float base_sign = code > 0 ? 1.0f : (code < 0 ? -1.0f : 0.0f);
            p.mask_logits.at(r, c) =
                scale_noise_logit(base_mask, eps_mask.at(r, c), alpha, sigma_init);
            p.sign_logits.at(r, c) =
                scale_noise_logit(base_sign, eps_sign.at(r, c), alpha, sigma_init);
        }
    return p;
}

inline DenseMatrix sample_gaussian_matrix(RngStream& rng, int rows, int cols) {
    DenseMatrix m(rows, cols);
    for (auto& v : m.data) v = rng.next_gaussian();
    return m;
}

// RNG draw order: all mask eps row-major, then all sign eps.
inline TernaryParams init_ternary_logits(const BaselineSolution& q0, float alpha, float sigma_init,
                                         RngStream& rng) {
    DenseMatrix em = sample_gaussian_matrix(rng, q0.codes.rows, q0.codes.cols);
    DenseMatrix es = sample_gaussian_matrix(rng, q0.codes.rows, q0.codes.cols);
    return init_ternary_logits(q0, alpha, sigma_init, em, es);
}

// b = 2: candidates are the grid levels, mu is the baseline level value.
inline FullGridParams init_fullgrid_logits(const BaselineSolution& q0, const Grid& grid,
                                           float alpha, float sigma_init, const DenseMatrix& eps) {
    grid.validate();
    int rows = q0.codes.rows, cols = q0.codes.cols;
    int n = grid.size();
    int d = rows * cols;
    if (eps.rows != d || eps.cols != n)
        throw std::invalid_argument("init_fullgrid_logits: eps shape mismatch");
    FullGridParams p;
    p.grid = grid;
    p.rows = rows;
    p.cols = cols;
    p.scales = q0.scales;
    p.logits = DenseMatrix(d, n);
    std::vector<float> cand(n);
    for (int k = 0; k < n; ++k) cand[k] = static_cast<float>(grid.levels[k]);
    std::vector<float> base(n);
    for (int i = 0; i < d; ++i) {
        float mu = static_cast<float>(q0.codes.data[i]);
        grid.index_of(q0.codes.data[i]);  // rejects codes that are not levels
        grid_base_logits(cand, mu, base.data());
        for (int k = 0; k < n; ++k)
            p.logits.at(i, k) = scale_noise_logit(base[k], eps.at(i, k), alpha, sigma_init);
    }
    return p;
}

inline FullGridParams init_fullgrid_logits(const BaselineSolution& q0, const Grid& grid,
                                           float alpha, float sigma_init, RngStream& rng) {
    DenseMatrix eps =
        sample_gaussian_matrix(rng, q0.codes.rows * q0.codes.cols, grid.size());
    return init_fullgrid_logits(q0, grid, alpha, sigma_init, eps);
}

// b > 2: candidates are the shifts {-2..2} with mu = 0; the baseline
// index moves into base_index. The centered base is the same for every
// coordinate.
inline ShiftParams init_shift_logits(const BaselineSolution& q0, const Grid& grid, float alpha,
                                     float sigma_init, const DenseMatrix& eps) {
    grid.validate();
    int rows = q0.codes.rows, cols = q0.codes.cols;
    int d = rows * cols;
    if (eps.rows != d || eps.cols != kShiftCandidates)
        throw std::invalid_argument("init_shift_logits: eps shape mismatch");
    ShiftParams p;
    p.grid = grid;
    p.scales = q0.scales;
    p.base_index = IntMatrix(rows, cols);
    p.logits = DenseMatrix(d, kShiftCandidates);
    std::vector<float> shifts(kShiftCandidates);
    for (int k = 0; k < kShiftCandidates; ++k)
        shifts[k] = static_cast<float>(k - kShiftHalfWidth);
    float base[kShiftCandidates];
    grid_base_logits(shifts, 0.0f, base);
    for (int i = 0; i < d; ++i) {
        p.base_index.data[i] = grid.index_of(q0.codes.data[i]);
        for (int k = 0; k < kShiftCandidates; ++k)
            p.logits.at(i, k) = scale_noise_logit(base[k], eps.at(i, k), alpha, sigma_init);
    }
    return p;
}

inline ShiftParams init_shift_logits(const BaselineSolution& q0, const Grid& grid, float alpha,
                                     float sigma_init, RngStream& rng) {
    DenseMatrix eps =
        sample_gaussian_matrix(rng, q0.codes.rows * q0.codes.cols, kShiftCandidates);
    return init_shift_logits(q0, grid, alpha, sigma_init, eps);
}

}  // namespace gsq
