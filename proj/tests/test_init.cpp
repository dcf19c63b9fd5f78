#include "gsq/init.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "gsq/rng.hpp"
#include "oracle.hpp"

using namespace gsq;

namespace {

DenseMatrix randn(int rows, int cols, uint64_t seed, uint64_t stream, float scale = 1.0f) {
    RngStream r(seed, stream);
    DenseMatrix m(rows, cols);
    for (auto& v : m.data) v = scale * r.next_gaussian();
    return m;
}

TEST(Rtn, PinnedHandExample) {
    DenseMatrix w(1, 4);
    w.data = {0.9f, -0.6f, 0.0f, 0.3f};
    BaselineSolution b = rtn(w, Grid::uniform(2), 4);
    // s = max|w| / max|level| = 0.9 / 2; w/s = (2, -1.33, 0, 0.67)
    EXPECT_FLOAT_EQ(b.scales.s.at(0, 0), 0.45f);
    EXPECT_EQ(b.codes.data[0], 1);  // 2.0 clips to the top level
    EXPECT_EQ(b.codes.data[1], -1);
    EXPECT_EQ(b.codes.data[2], 0);
    EXPECT_EQ(b.codes.data[3], 1);
}

TEST(Rtn, ZeroMatrixAndFixedPoint) {
    DenseMatrix z(2, 4);
    BaselineSolution b = rtn(z, Grid::ternary(), 4);
    for (int32_t c : b.codes.data) EXPECT_EQ(c, 0);
    for (float s : b.scales.s.data) EXPECT_FLOAT_EQ(s, 1e-8f);
    DenseMatrix recon = hard_weights(b.codes, b.scales);
    for (float v : recon.data) EXPECT_EQ(v, 0.0f);

    // w already on grid x s reproduces exactly (s = 0.25, w/s = -2,1,0,-1)
    DenseMatrix w(1, 4);
    w.data = {-0.5f, 0.25f, 0.0f, -0.25f};
    BaselineSolution fx = rtn(w, Grid::uniform(2), 4);
    DenseMatrix r = hard_weights(fx.codes, fx.scales);
    for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(r.data[i], w.data[i]);
}

TEST(Rtn, TiesRoundTowardLowerIndex) {
    // s = 1 grid {-2,-1,0,1}: 0.5 is equidistant between 0 and 1 -> 0; -0.5 -> -1
    DenseMatrix w(1, 4);
    w.data = {1.0f, 0.5f, -0.5f, -1.5f};
    BaselineSolution b = rtn(w, Grid::uniform(2), 4);
    float s = b.scales.s.at(0, 0);
    EXPECT_FLOAT_EQ(s, 0.5f);
    // w/s = (2, 1, -1, -3): no ties here; construct a tie directly instead
    DenseMatrix w2(1, 2);
    w2.data = {2.0f, 1.0f};  // s = 1, w/s = (2, 1): 2 -> 1 (clip), 1 -> 1
    BaselineSolution b2 = rtn(w2, Grid::uniform(2), 2);
    EXPECT_EQ(b2.codes.data[0], 1);
    // direct check of the tie rule on the rounding helper via a crafted scale:
    DenseMatrix w3(1, 2);
    w3.data = {1.0f, 0.25f};  // s = 0.5, w/s = (2, 0.5): 0.5 ties 0-vs-1 -> 0
    BaselineSolution b3 = rtn(w3, Grid::uniform(2), 2);
    EXPECT_EQ(b3.codes.data[1], 0);
}

TEST(CalibSet, HessianAndDamping) {
    DenseMatrix x = randn(16, 4, 1, 0);
    CalibSet cs(x);
    EXPECT_EQ(cs.in_features, 4);
    // H = X^T X, symmetric, against the f64 oracle
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            long double acc = 0.0L;
            for (int k = 0; k < 16; ++k) acc += (long double)x.at(k, i) * (long double)x.at(k, j);
            EXPECT_NEAR(cs.h[i * 4 + j], (double)acc, 1e-9);
            EXPECT_EQ(cs.h[i * 4 + j], cs.h[j * 4 + i]);
        }
    double trace = cs.h[0] + cs.h[5] + cs.h[10] + cs.h[15];
    EXPECT_NEAR(cs.damping, 0.01 * trace / 4.0, 1e-12);
    EXPECT_THROW(CalibSet(DenseMatrix(0, 4)), std::invalid_argument);
}

TEST(Gptq, IdentityHessianEqualsRtn) {
    for (int bits : {0, 2, 3}) {
        Grid grid = bits == 0 ? Grid::ternary() : Grid::uniform(bits);
        for (int shape = 0; shape < 3; ++shape) {
            int rows = 2 + shape, cols = 4 + 2 * shape;
            DenseMatrix w = randn(rows, cols, 10 + bits, shape);
            CalibSet cs((identity(cols)));
            BaselineSolution g = gptq(w, cs, grid, 4);
            BaselineSolution r = rtn(w, grid, 4);
            EXPECT_TRUE(g.codes == r.codes) << "bits=" << bits << " shape=" << shape;
            EXPECT_TRUE(g.scales.s.data == r.scales.s.data);
        }
    }
}

TEST(Gptq, ExactlyRepresentableIsFixedPoint) {
    Grid grid = Grid::uniform(2);
    DenseMatrix w(2, 4);
    w.data = {0.5f, -1.0f, 0.0f, -0.5f, -0.25f, 0.125f, -0.25f, -0.125f};
    // per-group max-abs scales make every entry exactly representable
    DenseMatrix x = randn(12, 4, 11, 0);
    CalibSet cs(x);
    BaselineSolution b = gptq(w, cs, grid, 2);
    DenseMatrix recon = hard_weights(b.codes, b.scales);
    for (size_t i = 0; i < w.data.size(); ++i) EXPECT_FLOAT_EQ(recon.data[i], w.data[i]);
    EXPECT_NEAR(oracle::linear_loss(x, recon, w), 0.0, 1e-12);
}

TEST(Gptq, BeatsOrMatchesRtnOnCorrelatedData) {
    // Strongly correlated activations are exactly the case error
    // feedback exists for; require gptq <= rtn in median over trials.
    RngStream r(12, 0);
    int wins = 0, trials = 50;
    std::vector<double> diff;
    for (int trial = 0; trial < trials; ++trial) {
        DenseMatrix base = randn(24, 1, 13, trial);
        DenseMatrix x(24, 6);
        for (int i = 0; i < 24; ++i)
            for (int j = 0; j < 6; ++j)
                x.at(i, j) = base.at(i, 0) + 0.3f * r.next_gaussian();
        DenseMatrix w = randn(3, 6, 14, trial);
        CalibSet cs(x);
        BaselineSolution g = gptq(w, cs, Grid::ternary(), 3);
        BaselineSolution n = rtn(w, Grid::ternary(), 3);
        double lg = oracle::linear_loss(x, hard_weights(g.codes, g.scales), w);
        double ln = oracle::linear_loss(x, hard_weights(n.codes, n.scales), w);
        diff.push_back(lg - ln);
        if (lg <= ln + 1e-9) wins++;
    }
    std::sort(diff.begin(), diff.end());
    EXPECT_LE(diff[trials / 2], 1e-6);
    EXPECT_GE(wins, trials / 2);
}

TEST(Gptq, CholeskyFailureNamesTheFix) {
    DenseMatrix w = randn(1, 3, 15, 0);
    DenseMatrix x(2, 3);  // all zeros: H = 0, damping = 0, not PD
    CalibSet cs(x);
    try {
        gptq(w, cs, Grid::ternary(), 3);
        FAIL() << "expected Cholesky failure";
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("damping"), std::string::npos) << msg;
    }
}

TEST(InitTernary, PinnedLogitValues) {
    BaselineSolution q0;
    q0.codes = IntMatrix(1, 3);
    q0.codes.data = {1, 0, -1};
    q0.scales = GroupScales(1, 3, 3);
    q0.scales.s.data[0] = 0.7f;
    DenseMatrix eps0(1, 3);
    TernaryParams p = init_ternary_logits(q0, 3.0f, 0.01f, eps0, eps0);
    // code +1: mask base +1, sign base +1 -> 0.03 / 0.03
    EXPECT_FLOAT_EQ(p.mask_logits.at(0, 0), 0.03f);
    EXPECT_FLOAT_EQ(p.sign_logits.at(0, 0), 0.03f);
    // code 0: mask base -1 -> -0.03, sign base 0 -> 0
    EXPECT_FLOAT_EQ(p.mask_logits.at(0, 1), -0.03f);
    EXPECT_FLOAT_EQ(p.sign_logits.at(0, 1), 0.0f);
    // code -1: mask +1, sign -1
    EXPECT_FLOAT_EQ(p.mask_logits.at(0, 2), 0.03f);
    EXPECT_FLOAT_EQ(p.sign_logits.at(0, 2), -0.03f);
    // scales copied from the baseline
    EXPECT_FLOAT_EQ(p.scales.s.data[0], 0.7f);
}

TEST(InitTernary, AlphaZeroGivesPureNoiseAtSigmaScale) {
    // 2 * 1000 * 500 = 1e6 logits total across the two leaves
    BaselineSolution q0;
    q0.codes = IntMatrix(1000, 500);
    q0.scales = GroupScales(1000, 500, 500);
    RngStream rng(3, 0);
    TernaryParams p = init_ternary_logits(q0, 0.0f, 0.01f, rng);
    double sq = 0.0;
    size_t n = 0;
    for (float v : p.mask_logits.data) sq += double(v) * v, n++;
    for (float v : p.sign_logits.data) sq += double(v) * v, n++;
    EXPECT_EQ(n, 1000000u);
    double std_hat = std::sqrt(sq / n);
    EXPECT_NEAR(std_hat, 0.01, 0.01 * 0.05);
}

TEST(InitGrid, PinnedCenteredBases) {
    // b=2, mu=-1, candidates (-2,-1,0,1): raw -(c-mu)^2/2 = (-0.5,0,-0.5,-2),
    // centered -> (0.25, 0.75, 0.25, -1.25)
    std::vector<float> cand = {-2.0f, -1.0f, 0.0f, 1.0f};
    float out[4];
    grid_base_logits(cand, -1.0f, out);
    EXPECT_FLOAT_EQ(out[0], 0.25f);
    EXPECT_FLOAT_EQ(out[1], 0.75f);
    EXPECT_FLOAT_EQ(out[2], 0.25f);
    EXPECT_FLOAT_EQ(out[3], -1.25f);
    // b>2 shift window: candidates (-2..2), mu=0 -> (-1, 0.5, 1, 0.5, -1)
    std::vector<float> shifts = {-2.0f, -1.0f, 0.0f, 1.0f, 2.0f};
    float s5[5];
    grid_base_logits(shifts, 0.0f, s5);
    EXPECT_FLOAT_EQ(s5[0], -1.0f);
    EXPECT_FLOAT_EQ(s5[1], 0.5f);
    EXPECT_FLOAT_EQ(s5[2], 1.0f);
    EXPECT_FLOAT_EQ(s5[3], 0.5f);
    EXPECT_FLOAT_EQ(s5[4], -1.0f);
}

TEST(InitGrid, CenteredLogitsSumToZero) {
    RngStream r(4, 0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<float> cand(4);
        for (auto& c : cand) c = r.next_gaussian();
        float out[4];
        grid_base_logits(cand, r.next_gaussian(), out);
        double sum = out[0] + out[1] + out[2] + out[3];
        EXPECT_NEAR(sum, 0.0, 1e-6);
    }
}

TEST(InitGrid, FullGridUsesBaselineLevelAsMean) {
    BaselineSolution q0;
    q0.codes = IntMatrix(1, 2);
    q0.codes.data = {-1, 1};
    q0.scales = GroupScales(1, 2, 2);
    q0.scales.s.data[0] = 1.0f;
    DenseMatrix eps(2, 4);
    FullGridParams p = init_fullgrid_logits(q0, Grid::uniform(2), 6.0f, 0.01f, eps);
    // logit = sigma*(eps + alpha*base) = 0.01*6*base at eps=0; coordinate 0
    // has mu=-1 and centered base (0.25, 0.75, 0.25, -1.25)
    EXPECT_FLOAT_EQ(p.logits.at(0, 0), 0.015f);
    EXPECT_FLOAT_EQ(p.logits.at(0, 1), 0.045f);
    EXPECT_FLOAT_EQ(p.logits.at(0, 2), 0.015f);
    EXPECT_FLOAT_EQ(p.logits.at(0, 3), -0.075f);
    // argmax equals the baseline assignment (warm-start dominance)
    EXPECT_EQ(p.grid.levels[argmax_row(p.logits, 0)], -1);
    EXPECT_EQ(p.grid.levels[argmax_row(p.logits, 1)], 1);
}

TEST(InitShift, BaseIndexStoredAndWarmStartDominates) {
    BaselineSolution q0;
    q0.codes = IntMatrix(1, 3);
    q0.codes.data = {-4, 0, 3};
    q0.scales = GroupScales(1, 3, 3);
    q0.scales.s.data[0] = 1.0f;
    DenseMatrix eps(3, 5);
    ShiftParams p = init_shift_logits(q0, Grid::uniform(3), 6.0f, 0.01f, eps);
    EXPECT_EQ(p.base_index.data[0], 0);
    EXPECT_EQ(p.base_index.data[1], 4);
    EXPECT_EQ(p.base_index.data[2], 7);
    // delta = 0 is the argmax for every coordinate at eps = 0
    for (int i = 0; i < 3; ++i) EXPECT_EQ(argmax_row(p.logits, i), kShiftHalfWidth);
    HardSolution h = finalize(p);
    EXPECT_TRUE(h.codes == q0.codes);
}

TEST(Init, WarmStartFidelityAcrossModes) {
    // finalize(init(gptq)) == gptq codes, eps = 0, for t / 2 / 3 bit
    DenseMatrix w = randn(8, 12, 5, 0, 0.3f);
    DenseMatrix x = randn(32, 12, 5, 1);
    CalibSet cs(x);
    {
        BaselineSolution b = gptq(w, cs, Grid::ternary(), 4);
        DenseMatrix eps(8, 12);
        TernaryParams p = init_ternary_logits(b, 3.0f, 0.01f, eps, eps);
        HardSolution h = finalize(p);
        EXPECT_TRUE(h.codes == b.codes);
        EXPECT_TRUE(h.scales.s.data == b.scales.s.data);
    }
    {
        BaselineSolution b = gptq(w, cs, Grid::uniform(2), 4);
        DenseMatrix eps(96, 4);
        FullGridParams p = init_fullgrid_logits(b, Grid::uniform(2), 6.0f, 0.01f, eps);
        EXPECT_TRUE(finalize(p).codes == b.codes);
    }
    {
        BaselineSolution b = gptq(w, cs, Grid::uniform(3), 4);
        DenseMatrix eps(96, 5);
        ShiftParams p = init_shift_logits(b, Grid::uniform(3), 6.0f, 0.01f, eps);
        EXPECT_TRUE(finalize(p).codes == b.codes);
    }
}

// Greedy error feedback vs the exhaustive optimum on a 1x4 layer with a
// 2-level grid and a shared max-abs scale. The trial set is frozen by
// the RNG streams, so the two statistics below are deterministic; they
// were measured once on this exact set and pinned.
TEST(Gptq, SmallProblemExhaustiveBattery) {
    const int trials = 100;
    Grid sign_grid{1, {-1, 1}};
    int optimal = 0;
    std::vector<double> gap;  // gptq loss - rtn loss, per trial
    for (int t = 0; t < trials; ++t) {
        DenseMatrix w = randn(1, 4, 2024, 2 * t);
        DenseMatrix x = randn(8, 4, 2024, 2 * t + 1);
        CalibSet cs(x);
        BaselineSolution g = gptq(w, cs, sign_grid, 4);
        BaselineSolution n = rtn(w, sign_grid, 4);
        float s = g.scales.s.at(0, 0);
        EXPECT_FLOAT_EQ(s, n.scales.s.at(0, 0));
        oracle::ExhaustiveBest best = oracle::exhaustive_best(x, w, sign_grid, s);
        double lg = oracle::linear_loss(x, hard_weights(g.codes, g.scales), w);
        double ln = oracle::linear_loss(x, hard_weights(n.codes, n.scales), w);
        if (lg <= best.loss * (1.0 + 1e-9) + 1e-12) optimal++;
        gap.push_back(lg - ln);
    }
    std::sort(gap.begin(), gap.end());
    double median = 0.5 * (gap[trials / 2 - 1] + gap[trials / 2]);
    std::printf("[battery] gptq_1x4: optimal=%d/100 median_gap=%.9g\n", optimal, median);
    EXPECT_EQ(optimal, 87);      // measured 2026-08-22 on this frozen set
    EXPECT_GE(optimal, 60);      // the qualitative claim the pin protects
    EXPECT_LE(median, 1e-6);
}

TEST(InitTernary, RejectsNonTernaryCodes) {
    BaselineSolution q0;
    q0.codes = IntMatrix(1, 1);
    q0.codes.data = {2};
    q0.scales = GroupScales(1, 1, 1);
    DenseMatrix eps(1, 1);
    EXPECT_THROW(init_ternary_logits(q0, 3.0f, 0.01f, eps, eps), std::invalid_argument);
}

}  // namespace
