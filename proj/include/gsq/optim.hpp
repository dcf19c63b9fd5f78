#pragma once

// Lion with decoupled weight decay, one momentum buffer per parameter
// id:
//   u = sign(beta1*m + (1-beta1)*g);  p -= lr*(u + wd*p);  m = beta2*m + (1-beta2)*g
// sign(0) = 0. Gradient clipping is an elementwise clamp applied to the
// logit parameter class only; group scales are never clipped.

#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "autodiff.hpp"
#include "tensor.hpp"

namespace gsq {

struct LionParams {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float weight_decay = 1.0f;
};

struct LionState {
    std::map<int, DenseMatrix> momentum;

    DenseMatrix& buffer(int param_id, int rows, int cols) {
        auto it = momentum.find(param_id);
        if (it == momentum.end())
            it = momentum.emplace(param_id, DenseMatrix(rows, cols)).first;
        if (it->second.rows != rows || it->second.cols != cols)
            throw std::invalid_argument("LionState: momentum shape mismatch for param " +
                                        std::to_string(param_id));
        return it->second;
    }
};

inline void lion_step(LionState& state, int param_id, DenseMatrix& p, const DenseMatrix& g,
                      const LionParams& hp) {
    if (!p.same_shape(g)) throw std::invalid_argument("lion_step: param/grad shape mismatch");
    g.require_finite("lion_step: gradient");
    DenseMatrix& m = state.buffer(param_id, p.rows, p.cols);
    for (size_t i = 0; i < p.data.size(); ++i) {
        float mix = hp.beta1 * m.data[i] + (1.0f - hp.beta1) * g.data[i];
        float u = mix > 0.0f ? 1.0f : (mix < 0.0f ? -1.0f : 0.0f);
        p.data[i] -= hp.lr * (u + hp.weight_decay * p.data[i]);
        m.data[i] = hp.beta2 * m.data[i] + (1.0f - hp.beta2) * g.data[i];
    }
}

enum class ClipApply { none, logits_only, all };

struct ClipPolicy {
    ClipApply applies_to = ClipApply::logits_only;
    float threshold = 1e-6f;
};

// Clamp the named logit-class gradients into [-threshold, +threshold];
// everything else passes through untouched.
inline void clip_logit_grads(GradientMap& grads, const ClipPolicy& policy,
                             const std::vector<int>& logit_param_ids) {
    if (policy.applies_to == ClipApply::none) return;
    auto clamp_param = [&](DenseMatrix& g) {
        for (auto& v : g.data) {
            if (v > policy.threshold) v = policy.threshold;
            if (v < -policy.threshold) v = -policy.threshold;
        }
    };
    if (policy.applies_to == ClipApply::all) {
        for (auto& [pid, g] : grads.g) clamp_param(g);
        return;
    }
    for (int pid : logit_param_ids) {
        auto it = grads.g.find(pid);
        if (it != grads.g.end()) clamp_param(it->second);
    }
}

}  // namespace gsq
