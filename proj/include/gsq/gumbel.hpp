#pragma once

// Tempered, sharpened Gumbel-Softmax primitives and the linear
// temperature/sharpness schedules.
//
// Categorical over n candidates:  p_i = softmax_i((kappa*l_i + g_i)/tau)
// Binary single-logit form: element logits (-l, +l) collapse to
//   p_plus = sigmoid((2*kappa*l + g1 - g0)/tau)
// which is algebraically the n=2 softmax with one stored logit.
//
// These routines are the single implementation of the soft sampler;
// the autodiff ops call into them, so standalone and differentiated
// forwards are bitwise identical.

#include <cmath>
#include <stdexcept>
#include <vector>

namespace gsq {

// Core fused kernel: p_out[i] = softmax((kappa*logits[i] + noise[i]) / tau),
// max-subtracted, binary64 internally, binary32 result.
inline void softmax_tk(const float* logits, const float* noise, int n, float tau, float kappa,
                       float* p_out) {
    if (n <= 0) throw std::invalid_argument("softmax_tk: n must be positive");
    if (!(tau > 0.0f) || !(kappa > 0.0f))
        throw std::invalid_argument("softmax_tk: tau and kappa must be positive");
    double zmax = -1e300;
    for (int i = 0; i < n; ++i) {
        if (!std::isfinite(logits[i]) || !std::isfinite(noise[i]))
            throw std::runtime_error("softmax_tk: non-finite logit or noise");
        double z = (static_cast<double>(kappa) * logits[i] + noise[i]) / tau;
        if (z > zmax) zmax = z;
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        double z = (static_cast<double>(kappa) * logits[i] + noise[i]) / tau;
        double e = std::exp(z - zmax);
        p_out[i] = static_cast<float>(e);
        sum += e;
    }
    for (int i = 0; i < n; ++i) p_out[i] = static_cast<float>(p_out[i] / sum);
}

struct GumbelSpec {
    std::vector<float> candidates;  // d_1..d_n
    std::vector<float> logits;      // l_1..l_n
    float tau = 1.0f;
    float kappa = 1.0f;

    void validate() const {
        if (candidates.size() < 2) throw std::invalid_argument("GumbelSpec: need >= 2 candidates");
        if (logits.size() != candidates.size())
            throw std::invalid_argument("GumbelSpec: logits/candidates length mismatch");
        if (!(tau > 0.0f) || !(kappa > 0.0f))
            throw std::invalid_argument("GumbelSpec: tau and kappa must be positive");
    }
};

struct GumbelSample {
    float soft;            // d~ = sum_i p_i d_i
    std::vector<float> p;  // selection probabilities
};

inline GumbelSample gumbel_softmax(const GumbelSpec& spec, const std::vector<float>& noise) {
    spec.validate();
    int n = static_cast<int>(spec.candidates.size());
    if (noise.size() != spec.candidates.size())
        throw std::invalid_argument("gumbel_softmax: noise length mismatch");
    GumbelSample out;
    out.p.resize(n);
    softmax_tk(spec.logits.data(), noise.data(), n, spec.tau, spec.kappa, out.p.data());
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += static_cast<double>(out.p[i]) * spec.candidates[i];
    out.soft = static_cast<float>(acc);
    return out;
}

// Probability of the "+" candidate under element logits (-l, +l).
inline float binary_gumbel(float logit, float g0, float g1, float tau, float kappa) {
    if (!(tau > 0.0f) || !(kappa > 0.0f))
        throw std::invalid_argument("binary_gumbel: tau and kappa must be positive");
    double z = (2.0 * static_cast<double>(kappa) * logit + (static_cast<double>(g1) - g0)) / tau;
    return static_cast<float>(1.0 / (1.0 + std::exp(-z)));
}

// Linear ramp over total_steps steps: value(0) = start, value(total_steps)
// = end, exact at both endpoints.
struct LinearSchedule {
    float start = 0.0f;
    float end = 0.0f;
    int total_steps = 1;

    float value(int t) const {
        if (total_steps < 1) throw std::invalid_argument("LinearSchedule: total_steps must be >= 1");
        if (t < 0 || t > total_steps)
            throw std::out_of_range("LinearSchedule: step " + std::to_string(t) + " outside [0, " +
                                    std::to_string(total_steps) + "]");
        if (t == 0) return start;
        if (t == total_steps) return end;
        double frac = static_cast<double>(t) / total_steps;
        return static_cast<float>(start + (static_cast<double>(end) - start) * frac);
    }
};

inline LinearSchedule tau_schedule(int total_steps) { return {2.0f, 0.05f, total_steps}; }
inline LinearSchedule kappa_schedule(int total_steps) { return {100.0f, 500.0f, total_steps}; }

}  // namespace gsq
