#pragma once

// The three low-bit parameterizations and their soft/hard forward
// passes:
//   ternary   - per-coordinate mask gate over {0,1} and sign gate over
//               {-1,+1}, soft weight s * m~ * b~
//   full grid - per-coordinate logits over all 2^b levels (b = 2)
//   shift     - per-coordinate logits over a +/-2 window around a
//               warm-start index (b > 2); window clipping happens while
//               building the constant candidate table, outside the
//               differentiated path
//
// Codes are grid level VALUES throughout (e.g. ternary {-1,0,+1}), not
// positions in the level vector; shift base indices are the exception
// and are stored 0-based.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gumbel.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gsq {

struct Grid {
    int bits = 2;                  // 0 marks ternary, else b in [2, 8]
    std::vector<int32_t> levels;   // strictly increasing

    static Grid ternary() { return Grid{0, {-1, 0, 1}}; }
    static Grid uniform(int b) {
        if (b < 2 || b > 8) throw std::invalid_argument("Grid::uniform: bits must be in [2, 8]");
        Grid g;
        g.bits = b;
        int half = 1 << (b - 1);
        for (int v = -half; v < half; ++v) g.levels.push_back(v);
        return g;
    }

    bool is_ternary() const { return bits == 0; }
    int size() const { return static_cast<int>(levels.size()); }
    int max_abs_level() const {
        int m = 0;
        for (int v : levels) m = std::max(m, std::abs(v));
        return m;
    }
    int index_of(int32_t value) const {
        for (int i = 0; i < size(); ++i)
            if (levels[i] == value) return i;
        throw std::invalid_argument("Grid: value " + std::to_string(value) + " is not a level");
    }

    void validate() const {
        if (bits == 0) {
            if (levels != std::vector<int32_t>{-1, 0, 1})
                throw std::invalid_argument("Grid: ternary levels must be {-1, 0, 1}");
        } else {
            // bits = 1 is a degenerate sign grid, used only for exhaustive
            // baseline studies; the training and packing paths never build it.
            if (bits < 1 || bits > 8) throw std::invalid_argument("Grid: bits must be in [1, 8]");
            if (static_cast<int>(levels.size()) != (1 << bits))
                throw std::invalid_argument("Grid: need exactly 2^bits levels");
        }
        for (size_t i = 1; i < levels.size(); ++i)
            if (levels[i] <= levels[i - 1])
                throw std::invalid_argument("Grid: levels must be strictly increasing");
        if (max_abs_level() == 0) throw std::invalid_argument("Grid: all-zero level set");
    }
};

// One scale per contiguous run of group_size entries within a row; the
// trailing run may be short and still owns a full scale. Scales may be
// negative (sign freedom absorbs grid asymmetry).
struct GroupScales {
    int rows = 0;
    int cols = 0;
    int group_size = 128;
    DenseMatrix s;  // rows x groups_per_row

    GroupScales() = default;
    GroupScales(int r, int c, int gs) : rows(r), cols(c), group_size(gs) {
        if (gs < 1) throw std::invalid_argument("GroupScales: group_size must be >= 1");
        s = DenseMatrix(r, groups_per_row());
    }

    int groups_per_row() const { return (cols + group_size - 1) / group_size; }
    int group_of(int col) const { return col / group_size; }
    float at_coord(int r, int c) const { return s.at(r, group_of(c)); }
    float& group_ref(int r, int g) { return s.at(r, g); }
};

struct TernaryParams {
    DenseMatrix mask_logits;  // rows x cols
    DenseMatrix sign_logits;  // rows x cols
    GroupScales scales;

    int rows() const { return mask_logits.rows; }
    int cols() const { return mask_logits.cols; }
    size_t num_logits() const { return mask_logits.numel() + sign_logits.numel(); }
};

struct FullGridParams {
    Grid grid;                // bits = 2 in the shipped configuration
    DenseMatrix logits;       // (rows*cols) x 2^bits, coordinate-major
    GroupScales scales;
    int rows = 0, cols = 0;

    size_t num_logits() const { return logits.numel(); }
};

struct ShiftParams {
    Grid grid;                // bits > 2
    IntMatrix base_index;     // rows x cols, 0-based positions into grid.levels
    DenseMatrix logits;       // (rows*cols) x 5, shift candidates {-2..+2}
    GroupScales scales;

    int rows() const { return base_index.rows; }
    int cols() const { return base_index.cols; }
    size_t num_logits() const { return logits.numel(); }
};

constexpr int kShiftHalfWidth = 2;
constexpr int kShiftCandidates = 2 * kShiftHalfWidth + 1;

// Candidate level values seen by coordinate with base index j0: the
// window j0-2..j0+2 clipped into the level table.
inline void shift_candidates(const Grid& grid, int j0, float out[kShiftCandidates]) {
    int n = grid.size();
    if (j0 < 0 || j0 >= n) throw std::out_of_range("shift_candidates: base index out of range");
    for (int k = 0; k < kShiftCandidates; ++k) {
        int idx = j0 + (k - kShiftHalfWidth);
        if (idx < 0) idx = 0;
        if (idx >= n) idx = n - 1;
        out[k] = static_cast<float>(grid.levels[idx]);
    }
}

// Gumbel noise bundles. Consumption order off one stream is a contract:
// ternary draws mask_g0, mask_g1, sign_g0, sign_g1, each a full
// row-major pass; grid noise is coordinate-major (all candidates of
// coordinate 0, then coordinate 1, ...).
struct TernaryNoise {
    DenseMatrix mask_g0, mask_g1, sign_g0, sign_g1;
};

inline DenseMatrix sample_gumbel_matrix(RngStream& rng, int rows, int cols) {
    DenseMatrix m(rows, cols);
    for (auto& v : m.data) v = rng.next_gumbel();
    return m;
}

inline TernaryNoise sample_ternary_noise(RngStream& rng, int rows, int cols) {
    TernaryNoise n;
    n.mask_g0 = sample_gumbel_matrix(rng, rows, cols);
    n.mask_g1 = sample_gumbel_matrix(rng, rows, cols);
    n.sign_g0 = sample_gumbel_matrix(rng, rows, cols);
    n.sign_g1 = sample_gumbel_matrix(rng, rows, cols);
    return n;
}

inline DenseMatrix sample_grid_noise(RngStream& rng, int coords, int candidates) {
    return sample_gumbel_matrix(rng, coords, candidates);
}

inline TernaryNoise zero_ternary_noise(int rows, int cols) {
    TernaryNoise n;
    n.mask_g0 = DenseMatrix(rows, cols);
    n.mask_g1 = DenseMatrix(rows, cols);
    n.sign_g0 = DenseMatrix(rows, cols);
    n.sign_g1 = DenseMatrix(rows, cols);
    return n;
}

// w~_i = s_g(i) * m~_i * b~_i with m~ = P(mask=1), b~ = 2*P(sign=+1) - 1.
inline DenseMatrix soft_forward_ternary(const TernaryParams& p, const TernaryNoise& noise,
                                        float tau, float kappa) {
    if (!p.mask_logits.same_shape(p.sign_logits) || !p.mask_logits.same_shape(noise.mask_g0) ||
        !p.mask_logits.same_shape(noise.mask_g1) || !p.mask_logits.same_shape(noise.sign_g0) ||
        !p.mask_logits.same_shape(noise.sign_g1))
        throw std::invalid_argument("soft_forward_ternary: shape mismatch");
    DenseMatrix w(p.rows(), p.cols());
    for (int r = 0; r < p.rows(); ++r)
        for (int c = 0; c < p.cols(); ++c) {
            float pm = binary_gumbel(p.mask_logits.at(r, c), noise.mask_g0.at(r, c),
                                     noise.mask_g1.at(r, c), tau, kappa);
            float pb = binary_gumbel(p.sign_logits.at(r, c), noise.sign_g0.at(r, c),
                                     noise.sign_g1.at(r, c), tau, kappa);
            float soft_sign = 2.0f * pb - 1.0f;
            w.at(r, c) = p.scales.at_coord(r, c) * (pm * soft_sign);
        }
    return w;
}

// w~_i = s_g(i) * sum_k p_k * level_k with p from the tempered softmax.
inline DenseMatrix soft_forward_fullgrid(const FullGridParams& p, const DenseMatrix& noise,
                                         float tau, float kappa) {
    int n = p.grid.size();
    if (p.logits.rows != p.rows * p.cols || p.logits.cols != n)
        throw std::invalid_argument("soft_forward_fullgrid: logits shape mismatch");
    if (!noise.same_shape(p.logits))
        throw std::invalid_argument("soft_forward_fullgrid: noise shape mismatch");
    std::vector<float> values(n);
    for (int k = 0; k < n; ++k) values[k] = static_cast<float>(p.grid.levels[k]);
    DenseMatrix w(p.rows, p.cols);
    std::vector<float> prob(n);
    for (int i = 0; i < p.logits.rows; ++i) {
        softmax_tk(&p.logits.data[static_cast<size_t>(i) * n],
                   &noise.data[static_cast<size_t>(i) * n], n, tau, kappa, prob.data());
        double acc = 0.0;
        for (int k = 0; k < n; ++k) acc += static_cast<double>(prob[k]) * values[k];
        int r = i / p.cols, c = i % p.cols;
        w.at(r, c) = p.scales.at_coord(r, c) * static_cast<float>(acc);
    }
    return w;
}

inline DenseMatrix soft_forward_shift(const ShiftParams& p, const DenseMatrix& noise, float tau,
                                      float kappa) {
    int d = p.rows() * p.cols();
    if (p.logits.rows != d || p.logits.cols != kShiftCandidates)
        throw std::invalid_argument("soft_forward_shift: logits shape mismatch");
    if (!noise.same_shape(p.logits))
        throw std::invalid_argument("soft_forward_shift: noise shape mismatch");
    DenseMatrix w(p.rows(), p.cols());
    float cand[kShiftCandidates];
    float prob[kShiftCandidates];
    for (int i = 0; i < d; ++i) {
        int r = i / p.cols(), c = i % p.cols();
        shift_candidates(p.grid, p.base_index.at(r, c), cand);
        softmax_tk(&p.logits.data[static_cast<size_t>(i) * kShiftCandidates],
                   &noise.data[static_cast<size_t>(i) * kShiftCandidates], kShiftCandidates, tau,
                   kappa, prob);
        double acc = 0.0;
        for (int k = 0; k < kShiftCandidates; ++k) acc += static_cast<double>(prob[k]) * cand[k];
        w.at(r, c) = p.scales.at_coord(r, c) * static_cast<float>(acc);
    }
    return w;
}

// Noise-free hard selection. Codes are level values; hard weights are
// scale * code.
struct HardSolution {
    IntMatrix codes;      // level values
    GroupScales scales;
    DenseMatrix weights;  // s_g(i) * code_i
};

inline DenseMatrix hard_weights(const IntMatrix& codes, const GroupScales& scales) {
    if (codes.rows != scales.rows || codes.cols != scales.cols)
        throw std::invalid_argument("hard_weights: codes/scales shape mismatch");
    DenseMatrix w(codes.rows, codes.cols);
    for (int r = 0; r < codes.rows; ++r)
        for (int c = 0; c < codes.cols; ++c)
            w.at(r, c) = scales.at_coord(r, c) * static_cast<float>(codes.at(r, c));
    return w;
}

// Mask gate: 0 where mask logit < 0, else 1. Sign gate: -1 where sign
// logit < 0, else +1. Both read "< 0" verbatim, so exact zeros pick the
// active/positive element.
inline HardSolution finalize(const TernaryParams& p) {
    HardSolution h;
    h.codes = IntMatrix(p.rows(), p.cols());
    h.scales = p.scales;
    for (int r = 0; r < p.rows(); ++r)
        for (int c = 0; c < p.cols(); ++c) {
            int mask = p.mask_logits.at(r, c) < 0.0f ? 0 : 1;
            int sign = p.sign_logits.at(r, c) < 0.0f ? -1 : 1;
            h.codes.at(r, c) = mask * sign;
        }
    h.weights = hard_weights(h.codes, h.scales);
    return h;
}

// Ties (equal logits) break toward the lower candidate index.
inline int argmax_row(const DenseMatrix& m, int row) {
    int best = 0;
    float bv = m.at(row, 0);
    for (int k = 1; k < m.cols; ++k)
        if (m.at(row, k) > bv) {
            bv = m.at(row, k);
            best = k;
        }
    return best;
}

inline HardSolution finalize(const FullGridParams& p) {
    HardSolution h;
    h.codes = IntMatrix(p.rows, p.cols);
    h.scales = p.scales;
    for (int i = 0; i < p.rows * p.cols; ++i) {
        int k = argmax_row(p.logits, i);
        h.codes.data[i] = p.grid.levels[k];
    }
    h.weights = hard_weights(h.codes, h.scales);
    return h;
}

inline HardSolution finalize(const ShiftParams& p) {
    HardSolution h;
    h.codes = IntMatrix(p.rows(), p.cols());
    h.scales = p.scales;
    int n = p.grid.size();
    for (int i = 0; i < p.rows() * p.cols(); ++i) {
        int delta = argmax_row(p.logits, i) - kShiftHalfWidth;
        int idx = p.base_index.data[i] + delta;
        if (idx < 0) idx = 0;
        if (idx >= n) idx = n - 1;
        h.codes.data[i] = p.grid.levels[idx];
    }
    h.weights = hard_weights(h.codes, h.scales);
    return h;
}

// Average stored bits per weight: code bits plus the amortized scale.
// Ternary entropy accounting substitutes log2(3) per weight.
inline double kTernaryEntropyBits() { return std::log2(3.0); }

inline double bits_per_param(double code_bits, int scale_bits, int group_size) {
    if (group_size < 1) throw std::invalid_argument("bits_per_param: group_size must be >= 1");
    return code_bits + static_cast<double>(scale_bits) / group_size;
}

// FNV-1a over the code words; used to prove code freezes.
inline uint64_t codes_hash(const IntMatrix& codes) {
    uint64_t h = 1469598103934665603ULL;
    auto eat = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xFF;
            h *= 1099511628211ULL;
        }
    };
    eat(static_cast<uint64_t>(codes.rows));
    eat(static_cast<uint64_t>(codes.cols));
    for (int32_t v : codes.data) eat(static_cast<uint64_t>(static_cast<uint32_t>(v)));
    return h;
}

}  // namespace gsq
