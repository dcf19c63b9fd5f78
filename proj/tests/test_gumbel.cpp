#include "gsq/gumbel.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gsq/rng.hpp"
#include "oracle.hpp"

using namespace gsq;

namespace {

TEST(Gumbel, ProbabilitiesNormalizeAndMatchOracle) {
    RngStream r(1, 0);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + trial % 5;
        std::vector<float> l(n), g(n), p(n);
        std::vector<double> ld(n), gd(n);
        for (int i = 0; i < n; ++i) {
            l[i] = 4.0f * r.next_gaussian();
            g[i] = r.next_gumbel();
            ld[i] = l[i];
            gd[i] = g[i];
        }
        float tau = 0.3f + static_cast<float>(r.next_uniform());
        float kappa = 1.0f + 9.0f * static_cast<float>(r.next_uniform());
        softmax_tk(l.data(), g.data(), n, tau, kappa, p.data());
        auto ref = oracle::softmax(ld, gd, tau, kappa);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            sum += p[i];
            EXPECT_NEAR(p[i], ref[i], 1e-6);
            EXPECT_GE(p[i], 0.0f);
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(Gumbel, ShiftInvariance) {
    RngStream r(2, 0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> l(4), g(4), p(4), q(4), ls(4);
        for (int i = 0; i < 4; ++i) {
            l[i] = 3.0f * r.next_gaussian();
            g[i] = r.next_gumbel();
        }
        float shift = 5.0f * r.next_gaussian();
        for (int i = 0; i < 4; ++i) ls[i] = l[i] + shift;
        softmax_tk(l.data(), g.data(), 4, 0.7f, 3.0f, p.data());
        softmax_tk(ls.data(), g.data(), 4, 0.7f, 3.0f, q.data());
        for (int i = 0; i < 4; ++i) EXPECT_NEAR(p[i], q[i], 1e-6);
    }
}

TEST(Gumbel, ExtremeLogitsStayFinite) {
    // max-subtraction must keep exp() in range even for huge kappa*logit
    std::vector<float> l = {4000.0f, -4000.0f, 0.0f};
    std::vector<float> g = {0.1f, -0.2f, 0.3f}, p(3);
    softmax_tk(l.data(), g.data(), 3, 0.05f, 500.0f, p.data());
    double sum = 0;
    for (float v : p) {
        EXPECT_TRUE(std::isfinite(v));
        sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_NEAR(p[0], 1.0, 1e-6);
}

TEST(Gumbel, BinaryMatchesTwoWaySoftmax) {
    RngStream r(3, 0);
    for (int trial = 0; trial < 1000; ++trial) {
        float l = 3.0f * r.next_gaussian();
        float g0 = r.next_gumbel(), g1 = r.next_gumbel();
        float tau = 0.2f + static_cast<float>(r.next_uniform());
        float kappa = 1.0f + 9.0f * static_cast<float>(r.next_uniform());
        float logits[2] = {-l, l}, noise[2] = {g0, g1}, p[2];
        softmax_tk(logits, noise, 2, tau, kappa, p);
        EXPECT_NEAR(binary_gumbel(l, g0, g1, tau, kappa), p[1], 1e-7);
    }
}

TEST(Gumbel, BinaryMatchesSigmoidOracle) {
    RngStream r(4, 0);
    for (int trial = 0; trial < 1000; ++trial) {
        double l = 2.0 * r.next_gaussian(), g0 = r.next_gumbel(), g1 = r.next_gumbel();
        double tau = 0.5, kappa = 4.0;
        EXPECT_NEAR(binary_gumbel(static_cast<float>(l), static_cast<float>(g0),
                                  static_cast<float>(g1), 0.5f, 4.0f),
                    oracle::binary_prob(static_cast<float>(l), static_cast<float>(g0),
                                        static_cast<float>(g1), tau, kappa),
                    1e-7);
    }
}

TEST(Gumbel, LowTemperatureCollapsesToArgmax) {
    std::vector<float> l = {0.2f, 0.8f, 0.5f, 0.1f};
    std::vector<float> g(4, 0.0f), p(4);
    softmax_tk(l.data(), g.data(), 4, 1e-4f, 100.0f, p.data());
    EXPECT_GT(p[1], 1.0f - 1e-6f);
    for (int i : {0, 2, 3}) EXPECT_LT(p[i], 1e-6f);
}

TEST(Gumbel, HighTemperatureApproachesUniform) {
    std::vector<float> l = {0.2f, 0.8f, 0.5f, 0.1f};
    std::vector<float> g(4, 0.0f), p(4);
    softmax_tk(l.data(), g.data(), 4, 1e6f, 1.0f, p.data());
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(p[i], 0.25f, 1e-5f);
}

TEST(Gumbel, SampleStructReturnsSoftValueAndProbs) {
    GumbelSpec spec;
    spec.candidates = {-1.0f, 0.0f, 1.0f};
    spec.logits = {0.1f, 0.5f, -0.2f};
    spec.tau = 0.8f;
    spec.kappa = 2.0f;
    std::vector<float> noise = {0.3f, -0.1f, 0.2f};
    GumbelSample s = gumbel_softmax(spec, noise);
    double expect = 0.0, sum = 0.0;
    for (int i = 0; i < 3; ++i) {
        expect += static_cast<double>(s.p[i]) * spec.candidates[i];
        sum += s.p[i];
    }
    EXPECT_NEAR(s.soft, expect, 1e-6);
    EXPECT_NEAR(sum, 1.0, 1e-6);
}

TEST(Gumbel, SpecValidation) {
    GumbelSpec spec;
    spec.candidates = {1.0f};
    spec.logits = {0.0f};
    spec.tau = 1.0f;
    spec.kappa = 1.0f;
    EXPECT_THROW(spec.validate(), std::invalid_argument);  // needs >= 2 candidates
    spec.candidates = {0.0f, 1.0f};
    EXPECT_THROW(spec.validate(), std::invalid_argument);  // logit count mismatch
    spec.logits = {0.0f, 0.0f};
    spec.tau = 0.0f;
    EXPECT_THROW(spec.validate(), std::invalid_argument);  // tau must be positive
    spec.tau = 1.0f;
    spec.kappa = -1.0f;
    EXPECT_THROW(spec.validate(), std::invalid_argument);
    spec.kappa = 1.0f;
    EXPECT_NO_THROW(spec.validate());
}

TEST(Schedule, EndpointsAreExact) {
    LinearSchedule s{2.0f, 0.05f, 79};
    EXPECT_EQ(s.value(0), 2.0f);
    EXPECT_EQ(s.value(79), 0.05f);
    LinearSchedule k{100.0f, 500.0f, 10};
    EXPECT_EQ(k.value(0), 100.0f);
    EXPECT_EQ(k.value(10), 500.0f);
}

TEST(Schedule, MidpointPinnedValue) {
    // kappa ramp 100 -> 500 sampled halfway gives exactly 300
    LinearSchedule k{100.0f, 500.0f, 10};
    EXPECT_EQ(k.value(5), 300.0f);
    LinearSchedule tau{2.0f, 0.05f, 4};
    EXPECT_NEAR(tau.value(1), 2.0f + (0.05f - 2.0f) * 0.25f, 1e-7f);
}

TEST(Schedule, OutOfRangeThrows) {
    LinearSchedule s{1.0f, 0.0f, 5};
    EXPECT_THROW(s.value(-1), std::out_of_range);
    EXPECT_THROW(s.value(6), std::out_of_range);
    EXPECT_THROW((LinearSchedule{1.0f, 0.0f, 0}).value(0), std::invalid_argument);
}

TEST(Schedule, DefaultRampsUsePaperEndpoints) {
    LinearSchedule tau = tau_schedule(100);
    LinearSchedule kap = kappa_schedule(100);
    EXPECT_EQ(tau.value(0), 2.0f);
    EXPECT_EQ(tau.value(100), 0.05f);
    EXPECT_EQ(kap.value(0), 100.0f);
    EXPECT_EQ(kap.value(100), 500.0f);
}

TEST(Gumbel, RejectsNonFiniteInput) {
    std::vector<float> l = {0.0f, std::numeric_limits<float>::infinity()};
    std::vector<float> g = {0.0f, 0.0f}, p(2);
    EXPECT_THROW(softmax_tk(l.data(), g.data(), 2, 1.0f, 1.0f, p.data()), std::runtime_error);
}

}  // namespace
