#include "gsq/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

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

// Central-difference check of d loss / d leaf against tape.backward.
void check_gradients(Tape& t, int loss, int leaf, const DenseMatrix& base, int param_id,
                     double tol = 2e-4) {
    t.forward(loss);
    GradientMap g = t.backward(loss);
    const DenseMatrix& analytic = g.at(param_id);
    const double h = 1e-3;
    for (size_t i = 0; i < base.data.size(); ++i) {
        DenseMatrix bumped = base;
        bumped.data[i] += static_cast<float>(h);
        t.rebind(leaf, bumped);
        double fp = t.forward(loss);
        bumped.data[i] = base.data[i] - static_cast<float>(h);
        t.rebind(leaf, bumped);
        double fm = t.forward(loss);
        double numeric = (fp - fm) / (2 * h);
        double denom = std::max(1.0, std::abs(numeric));
        EXPECT_NEAR(analytic.data[i], numeric, tol * denom) << "coordinate " << i;
    }
    t.rebind(leaf, base);
}

TEST(Autodiff, MatmulGradients) {
    DenseMatrix a = randn(3, 4, 1, 0), b = randn(4, 2, 1, 1);
    Tape t;
    int la = t.leaf(a, 0), lb = t.leaf(b, 1);
    int loss = t.frobenius_sq(t.matmul(la, lb));
    check_gradients(t, loss, la, a, 0);
    check_gradients(t, loss, lb, b, 1);
}

TEST(Autodiff, MatmulTransBGradients) {
    DenseMatrix a = randn(3, 4, 2, 0), b = randn(5, 4, 2, 1);
    Tape t;
    int la = t.leaf(a, 0), lb = t.leaf(b, 1);
    int loss = t.frobenius_sq(t.matmul(la, lb, true));
    check_gradients(t, loss, la, a, 0);
    check_gradients(t, loss, lb, b, 1);
}

TEST(Autodiff, ElementwiseGradients) {
    DenseMatrix a = randn(2, 3, 3, 0), b = randn(2, 3, 3, 1);
    Tape t;
    int la = t.leaf(a, 0), lb = t.leaf(b, 1);
    int expr = t.hadamard(t.add(la, t.scale_by_scalar(lb, 0.5f)), t.sub(la, lb));
    int loss = t.frobenius_sq(expr);
    check_gradients(t, loss, la, a, 0);
    check_gradients(t, loss, lb, b, 1);
}

TEST(Autodiff, ExpAndSiluGradients) {
    DenseMatrix a = randn(2, 3, 4, 0, 0.5f);
    Tape t;
    int la = t.leaf(a, 0);
    int loss = t.frobenius_sq(t.add(t.exp_elem(la), t.silu(la)));
    check_gradients(t, loss, la, a, 0);
}

TEST(Autodiff, SoftmaxTkGradients) {
    DenseMatrix l = randn(6, 4, 5, 0), g = randn(6, 4, 5, 1, 0.3f);
    DenseMatrix cand(6, 4);
    for (int i = 0; i < 6; ++i)
        for (int k = 0; k < 4; ++k) cand.at(i, k) = static_cast<float>(k - 2);
    Tape t;
    int ll = t.leaf(l, 0);
    int ln = t.constant(g);
    int p = t.softmax_tk(ll, ln, 0.8f, 2.5f);
    int w = t.weighted_sum(p, cand, 2, 3);
    int loss = t.frobenius_sq(w);
    check_gradients(t, loss, ll, l, 0);
}

TEST(Autodiff, BinaryGumbelGradients) {
    DenseMatrix l = randn(3, 3, 6, 0), g0 = randn(3, 3, 6, 1, 0.3f), g1 = randn(3, 3, 6, 2, 0.3f);
    Tape t;
    int ll = t.leaf(l, 0);
    int p = t.binary_gumbel(ll, t.constant(g0), t.constant(g1), 0.7f, 3.0f);
    int loss = t.frobenius_sq(p);
    check_gradients(t, loss, ll, l, 0);
}

TEST(Autodiff, GroupScaleGradients) {
    DenseMatrix q = randn(2, 5, 7, 0);
    DenseMatrix s = randn(2, 3, 7, 1);  // groups of 2 over 5 cols
    Tape t;
    int lq = t.leaf(q, 0), ls = t.leaf(s, 1);
    int w = t.group_scale(lq, ls, 2);
    int loss = t.frobenius_sq(w);
    check_gradients(t, loss, lq, q, 0);
    check_gradients(t, loss, ls, s, 1);
}

TEST(Autodiff, CompositeReconstructionLossGradients) {
    // the shape of the real training graph: X (Q*s)^T vs target
    DenseMatrix q = randn(3, 4, 8, 0), s = randn(3, 2, 8, 1);
    DenseMatrix x = randn(6, 4, 8, 2), y = randn(6, 3, 8, 3);
    Tape t;
    int lq = t.leaf(q, 0), ls = t.leaf(s, 1);
    int w = t.group_scale(lq, ls, 2);
    int yhat = t.matmul(t.constant(x), w, true);
    int loss = t.frobenius_sq(t.sub(yhat, t.constant(y)));
    check_gradients(t, loss, lq, q, 0);
    check_gradients(t, loss, ls, s, 1);
}

TEST(Autodiff, ForwardIsPure) {
    DenseMatrix a = randn(4, 4, 9, 0);
    Tape t;
    int la = t.leaf(a, 0);
    int loss = t.frobenius_sq(t.silu(t.matmul(la, la)));
    double v1 = t.forward(loss);
    DenseMatrix cached = t.value(loss);
    double v2 = t.forward(loss);
    EXPECT_EQ(v1, v2);
    EXPECT_TRUE(cached.data == t.value(loss).data);
    GradientMap g1 = t.backward(loss);
    GradientMap g2 = t.backward(loss);
    EXPECT_TRUE(g1.at(0).data == g2.at(0).data);
}

TEST(Autodiff, UnreachedParamsGetZeroGradients) {
    DenseMatrix a = randn(2, 2, 10, 0), b = randn(2, 2, 10, 1);
    Tape t;
    int la = t.leaf(a, 0);
    t.leaf(b, 1);  // registered but not part of the loss
    int loss = t.frobenius_sq(la);
    t.forward(loss);
    GradientMap g = t.backward(loss);
    const DenseMatrix& gb = g.at(1);
    for (float v : gb.data) EXPECT_EQ(v, 0.0f);
    // and the reached one is 2a
    for (size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(g.at(0).data[i], 2.0f * a.data[i], 1e-6);
}

TEST(Autodiff, RebindRules) {
    DenseMatrix a = randn(2, 2, 11, 0);
    Tape t;
    int la = t.leaf(a, 0);
    int op = t.silu(la);
    EXPECT_THROW(t.rebind(op, a), std::invalid_argument);  // only leaves rebind
    DenseMatrix wrong(3, 3);
    EXPECT_NO_THROW(t.rebind(la, wrong));  // shape may change between forwards
    EXPECT_THROW(t.leaf(a, 0), std::invalid_argument);  // duplicate param id
}

TEST(Autodiff, BackwardRequiresScalarLossAndForward) {
    DenseMatrix a = randn(2, 2, 12, 0);
    Tape t;
    int la = t.leaf(a, 0);
    int vec = t.silu(la);
    EXPECT_THROW(t.backward(vec), std::logic_error);  // no forward yet
    t.forward(vec);
    EXPECT_THROW(t.backward(vec), std::invalid_argument);  // not a scalar
}

TEST(Autodiff, ForwardNamesFailingNode) {
    DenseMatrix a(1, 1);
    a.data[0] = 1000.0f;  // exp overflows f32
    Tape t;
    int la = t.leaf(a, 0);
    int loss = t.frobenius_sq(t.exp_elem(la));
    try {
        t.forward(loss);
        FAIL() << "expected non-finite error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
    }
}

TEST(Autodiff, AccumulateIsTheArithmeticMean) {
    GradientMap m1, m2, m3;
    DenseMatrix a(1, 2), b(1, 2), c(1, 2);
    a.data = {3.0f, 0.0f};
    b.data = {0.0f, 6.0f};
    c.data = {3.0f, 3.0f};
    m1.g[7] = a;
    m2.g[7] = b;
    m3.g[7] = c;
    GradientMap mean = accumulate({m1, m2, m3});
    EXPECT_FLOAT_EQ(mean.at(7).data[0], 2.0f);
    EXPECT_FLOAT_EQ(mean.at(7).data[1], 3.0f);
    EXPECT_THROW(accumulate({}), std::invalid_argument);
    GradientMap odd;
    odd.g[8] = a;
    EXPECT_THROW(accumulate({m1, odd}), std::invalid_argument);  // param id sets must match
}

TEST(Autodiff, ConstantsReceiveNoGradientEntries) {
    DenseMatrix a = randn(2, 2, 13, 0);
    Tape t;
    int la = t.leaf(a, 0);
    int c = t.constant(a);
    int loss = t.frobenius_sq(t.hadamard(la, c));
    t.forward(loss);
    GradientMap g = t.backward(loss);
    EXPECT_EQ(g.g.size(), 1u);
    EXPECT_TRUE(g.g.count(0));
}

// Multiplying by an exactly-zero probability must produce an exactly
// zero gradient, not a small one — the backward pass short-circuits on
// all-zero upstream gradients, which is only sound if zeros stay exact.
TEST(Autodiff, ExactZeroGradientThroughZeroMask) {
    DenseMatrix q(1, 2), mask(1, 2);
    q.data = {0.7f, -0.3f};
    mask.data = {0.0f, 1.0f};
    Tape t;
    int lq = t.leaf(q, 0);
    int loss = t.frobenius_sq(t.hadamard(lq, t.constant(mask)));
    t.forward(loss);
    GradientMap g = t.backward(loss);
    EXPECT_EQ(g.at(0).data[0], 0.0f);
    EXPECT_NE(g.at(0).data[1], 0.0f);
}

}  // namespace
