#include "gsq/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gsq/rng.hpp"
#include "oracle.hpp"

using namespace gsq;

namespace {

DenseMatrix random_matrix(int rows, int cols, uint64_t seed, uint64_t stream, float scale = 1.0f) {
    RngStream r(seed, stream);
    DenseMatrix m(rows, cols);
    for (auto& v : m.data) v = scale * r.next_gaussian();
    return m;
}

std::vector<double> widen(const DenseMatrix& m) {
    return std::vector<double>(m.data.begin(), m.data.end());
}

TEST(Tensor, MatmulMatchesReference) {
    DenseMatrix a = random_matrix(7, 5, 1, 0);
    DenseMatrix b = random_matrix(5, 9, 1, 1);
    DenseMatrix c = matmul(a, b);
    ASSERT_EQ(c.rows, 7);
    ASSERT_EQ(c.cols, 9);
    // reference multiplies b^T through the nt kernel: c[i][j] = sum_k a[i][k] b[k][j]
    for (int i = 0; i < c.rows; ++i)
        for (int j = 0; j < c.cols; ++j) {
            long double acc = 0.0L;
            for (int k = 0; k < 5; ++k) acc += (long double)a.at(i, k) * (long double)b.at(k, j);
            EXPECT_NEAR(c.at(i, j), (double)acc, 1e-5) << i << "," << j;
        }
}

TEST(Tensor, MatmulNtMatchesReference) {
    DenseMatrix a = random_matrix(6, 8, 2, 0);
    DenseMatrix b = random_matrix(4, 8, 2, 1);
    DenseMatrix c = matmul_nt(a, b);
    auto ref = oracle::matmul_nt(widen(a), 6, 8, widen(b), 4);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j)
            EXPECT_NEAR(c.at(i, j), ref[i * 4 + j], 1e-5);
}

TEST(Tensor, MatmulTnMatchesReference) {
    DenseMatrix a = random_matrix(8, 6, 3, 0);  // a^T: 6x8
    DenseMatrix b = random_matrix(8, 5, 3, 1);
    DenseMatrix c = matmul_tn(a, b);
    ASSERT_EQ(c.rows, 6);
    ASSERT_EQ(c.cols, 5);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 5; ++j) {
            long double acc = 0.0L;
            for (int k = 0; k < 8; ++k) acc += (long double)a.at(k, i) * (long double)b.at(k, j);
            EXPECT_NEAR(c.at(i, j), (double)acc, 1e-5);
        }
}

TEST(Tensor, MatmulShapeMismatchThrows) {
    DenseMatrix a(2, 3), b(4, 2);
    EXPECT_THROW(matmul(a, b), std::invalid_argument);
    EXPECT_THROW(matmul_nt(a, DenseMatrix(4, 4)), std::invalid_argument);
    EXPECT_THROW(matmul_tn(a, DenseMatrix(3, 4)), std::invalid_argument);
}

// Accumulator order per output cell is fixed, so the thread count must
// not change a single bit of the result.
TEST(Tensor, ThreadCountDoesNotChangeBits) {
    DenseMatrix a = random_matrix(33, 17, 4, 0);
    DenseMatrix b = random_matrix(29, 17, 4, 1);
    set_threads(1);
    DenseMatrix c1 = matmul_nt(a, b);
    set_threads(4);
    DenseMatrix c4 = matmul_nt(a, b);
    set_threads(3);
    DenseMatrix c3 = matmul_nt(a, b);
    set_threads(1);
    EXPECT_TRUE(c1.data == c4.data);
    EXPECT_TRUE(c1.data == c3.data);
}

TEST(Tensor, ElementwiseOps) {
    DenseMatrix a = random_matrix(3, 4, 5, 0);
    DenseMatrix b = random_matrix(3, 4, 5, 1);
    DenseMatrix s = add(a, b), d = sub(a, b), h = hadamard(a, b);
    for (size_t i = 0; i < a.data.size(); ++i) {
        EXPECT_EQ(s.data[i], a.data[i] + b.data[i]);
        EXPECT_EQ(d.data[i], a.data[i] - b.data[i]);
        EXPECT_EQ(h.data[i], a.data[i] * b.data[i]);
    }
    EXPECT_THROW(add(a, DenseMatrix(4, 3)), std::invalid_argument);
}

TEST(Tensor, FrobeniusSquaredAccumulatesInF64) {
    // 1e8 + 1 catches single-precision accumulation: (1e4)^2 swallows 1^2.
    DenseMatrix m(1, 2);
    m.data = {1e4f, 1.0f};
    EXPECT_EQ(frobenius_sq(m), 1e8 + 1.0);
    DenseMatrix z(5, 5);
    EXPECT_EQ(frobenius_sq(z), 0.0);
}

TEST(Tensor, FiniteChecks) {
    DenseMatrix m(2, 2);
    EXPECT_TRUE(m.all_finite());
    m.data[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_FALSE(m.all_finite());
    EXPECT_THROW(m.require_finite("unit"), std::runtime_error);
    m.data[3] = std::numeric_limits<float>::infinity();
    EXPECT_FALSE(m.all_finite());
}

TEST(Tensor, IdentityAndShape) {
    DenseMatrix i3 = identity(3);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(i3.at(r, c), r == c ? 1.0f : 0.0f);
    EXPECT_EQ(shape_str(i3), "3x3");
    EXPECT_THROW(DenseMatrix(-1, 2), std::invalid_argument);
}

TEST(Tensor, IntMatrixEquality) {
    IntMatrix a(2, 2), b(2, 2);
    a.data = {1, -1, 0, 1};
    b.data = {1, -1, 0, 1};
    EXPECT_TRUE(a == b);
    b.data[2] = 1;
    EXPECT_FALSE(a == b);
}

}  // namespace
