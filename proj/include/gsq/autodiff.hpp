#pragma once

// Reverse-mode tape over the fixed op set the reconstruction loss
// needs. Nodes are created in topological order (ids strictly
// increase); forward() re-evaluates every node in id order, backward()
// walks them once in reverse. Values are binary32 with binary64
// accumulation inside reductions; two runs with identical bindings give
// bitwise-identical values and gradients.
//
// Leaves carry an optional param_id. backward() returns a gradient per
// registered param — zero-filled when the loss never touches it.
// Gumbel noise enters as plain constant leaves, rebound with fresh
// draws before each forward pass; nothing differentiates through it.

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "gumbel.hpp"
#include "tensor.hpp"

namespace gsq {

enum class OpKind {
    leaf,
    matmul,          // a * b, or a * b^T when trans_b
    add,
    sub,
    hadamard,
    scale_by_scalar,
    exp_elem,
    softmax_tk,      // fused (kappa*logits + noise)/tau softmax, rows independent
    weighted_sum,    // sum_k p[i,k] * cand[i,k], reshaped to out_rows x out_cols
    binary_gumbel,   // sigmoid((2*kappa*l + g1 - g0)/tau)
    group_scale,     // out[r,c] = q[r,c] * s[r, c/group_size]
    silu,
    frobenius_sq,    // 1x1 scalar
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::hadamard: return "hadamard";
        case OpKind::scale_by_scalar: return "scale_by_scalar";
        case OpKind::exp_elem: return "exp";
        case OpKind::softmax_tk: return "softmax_tk";
        case OpKind::weighted_sum: return "weighted_sum";
        case OpKind::binary_gumbel: return "binary_gumbel";
        case OpKind::group_scale: return "group_scale";
        case OpKind::silu: return "silu";
        case OpKind::frobenius_sq: return "frobenius_sq";
    }
    return "?";
}

// param_id -> gradient, ordered so accumulation visits params in a
// fixed order.
struct GradientMap {
    std::map<int, DenseMatrix> g;

    DenseMatrix& at(int param_id) {
        auto it = g.find(param_id);
        if (it == g.end())
            throw std::out_of_range("GradientMap: unknown param " + std::to_string(param_id));
        return it->second;
    }
    const DenseMatrix& at(int param_id) const {
        return const_cast<GradientMap*>(this)->at(param_id);
    }
};

// Arithmetic mean of gradient maps, accumulated in binary64 in sequence
// order. All maps must carry identical param ids and shapes.
inline GradientMap accumulate(const std::vector<GradientMap>& maps) {
    if (maps.empty()) throw std::invalid_argument("accumulate: no gradient maps");
    for (const auto& m : maps) {
        if (m.g.size() != maps[0].g.size())
            throw std::invalid_argument("accumulate: parameter id sets differ");
        auto it0 = maps[0].g.begin();
        for (auto it = m.g.begin(); it != m.g.end(); ++it, ++it0) {
            if (it->first != it0->first)
                throw std::invalid_argument("accumulate: parameter id sets differ");
            if (!it->second.same_shape(it0->second))
                throw std::invalid_argument("accumulate: gradient shapes differ");
        }
    }
    GradientMap out;
    double inv = 1.0 / static_cast<double>(maps.size());
    for (const auto& [pid, g0] : maps[0].g) {
        DenseMatrix acc(g0.rows, g0.cols);
        std::vector<double> sum(g0.numel(), 0.0);
        for (const auto& m : maps) {
            const DenseMatrix& g = m.g.at(pid);
            for (size_t i = 0; i < sum.size(); ++i) sum[i] += g.data[i];
        }
        for (size_t i = 0; i < sum.size(); ++i) acc.data[i] = static_cast<float>(sum[i] * inv);
        out.g.emplace(pid, std::move(acc));
    }
    return out;
}

class Tape {
  public:
    struct Node {
        OpKind kind = OpKind::leaf;
        int a = -1, b = -1, c = -1;       // input node ids
        float scalar = 0.0f;              // scale_by_scalar
        float tau = 0.0f, kappa = 0.0f;   // softmax_tk / binary_gumbel
        bool trans_b = false;             // matmul
        DenseMatrix candidates;           // weighted_sum constants
        int out_rows = 0, out_cols = 0;   // weighted_sum reshape
        int group_size = 0;               // group_scale
        int param_id = -1;                // leaf only
        DenseMatrix value;
        DenseMatrix grad;
    };

    int leaf(DenseMatrix v, int param_id = -1) {
        Node n;
        n.kind = OpKind::leaf;
        n.param_id = param_id;
        n.value = std::move(v);
        if (param_id >= 0) {
            if (!param_ids_.insert(param_id).second)
                throw std::invalid_argument("Tape: duplicate param id " + std::to_string(param_id));
        }
        return push(std::move(n));
    }
    int constant(DenseMatrix v) { return leaf(std::move(v), -1); }

    int matmul(int a, int b, bool trans_b = false) {
        Node n = binary_node(OpKind::matmul, a, b);
        n.trans_b = trans_b;
        return push(std::move(n));
    }
    int add(int a, int b) { return push(binary_node(OpKind::add, a, b)); }
    int sub(int a, int b) { return push(binary_node(OpKind::sub, a, b)); }
    int hadamard(int a, int b) { return push(binary_node(OpKind::hadamard, a, b)); }
    int scale_by_scalar(int a, float s) {
        Node n = unary_node(OpKind::scale_by_scalar, a);
        n.scalar = s;
        return push(std::move(n));
    }
    int exp_elem(int a) { return push(unary_node(OpKind::exp_elem, a)); }
    int silu(int a) { return push(unary_node(OpKind::silu, a)); }
    int frobenius_sq(int a) { return push(unary_node(OpKind::frobenius_sq, a)); }

    int softmax_tk(int logits, int noise, float tau, float kappa) {
        Node n = binary_node(OpKind::softmax_tk, logits, noise);
        n.tau = tau;
        n.kappa = kappa;
        return push(std::move(n));
    }
    int weighted_sum(int probs, DenseMatrix candidates, int out_rows, int out_cols) {
        Node n = unary_node(OpKind::weighted_sum, probs);
        n.candidates = std::move(candidates);
        n.out_rows = out_rows;
        n.out_cols = out_cols;
        return push(std::move(n));
    }
    int binary_gumbel(int logit, int g0, int g1, float tau, float kappa) {
        Node n = binary_node(OpKind::binary_gumbel, logit, g0);
        n.c = check_id(g1);
        n.tau = tau;
        n.kappa = kappa;
        return push(std::move(n));
    }
    int group_scale(int q, int s, int group_size) {
        Node n = binary_node(OpKind::group_scale, q, s);
        if (group_size < 1) throw std::invalid_argument("group_scale: group_size must be >= 1");
        n.group_size = group_size;
        return push(std::move(n));
    }

    // Replace a leaf's value; the next forward() recomputes downstream.
    void rebind(int leaf_id, DenseMatrix v) {
        Node& n = node(leaf_id);
        if (n.kind != OpKind::leaf) throw std::invalid_argument("rebind: node is not a leaf");
        n.value = std::move(v);
        forward_done_ = false;
    }

    const DenseMatrix& value(int id) const { return nodes_.at(check_id(id)).value; }

    // Evaluates every node in creation order; returns the (1x1) value
    // of `out` as a scalar when possible.
    double forward(int out) {
        check_id(out);
        for (size_t i = 0; i < nodes_.size(); ++i) eval(static_cast<int>(i));
        forward_done_ = true;
        const DenseMatrix& v = nodes_[out].value;
        return v.numel() == 1 ? static_cast<double>(v.data[0]) : 0.0;
    }

    // Gradients of the scalar at loss_id w.r.t. every registered param.
    GradientMap backward(int loss_id) {
        check_id(loss_id);
        if (!forward_done_) throw std::runtime_error("backward: forward has not been run");
        if (nodes_[loss_id].value.numel() != 1)
            throw std::invalid_argument("backward: loss node is not scalar");
        for (auto& n : nodes_) {
            n.grad = DenseMatrix(n.value.rows, n.value.cols);
        }
        nodes_[loss_id].grad.data[0] = 1.0f;
        for (int id = loss_id; id >= 0; --id) propagate(id);
        GradientMap out;
        for (const auto& n : nodes_)
            if (n.kind == OpKind::leaf && n.param_id >= 0) out.g.emplace(n.param_id, n.grad);
        return out;
    }

    size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    std::set<int> param_ids_;
    bool forward_done_ = false;

    int push(Node n) {
        nodes_.push_back(std::move(n));
        forward_done_ = false;
        return static_cast<int>(nodes_.size()) - 1;
    }
    int check_id(int id) const {
        if (id < 0 || id >= static_cast<int>(nodes_.size()))
            throw std::out_of_range("Tape: bad node id " + std::to_string(id));
        return id;
    }
    Node& node(int id) { return nodes_[check_id(id)]; }
    Node unary_node(OpKind k, int a) {
        Node n;
        n.kind = k;
        n.a = check_id(a);
        return n;
    }
    Node binary_node(OpKind k, int a, int b) {
        Node n = unary_node(k, a);
        n.b = check_id(b);
        return n;
    }

    [[noreturn]] void fail(int id, const std::string& msg) const {
        throw std::runtime_error("tape node " + std::to_string(id) + " (" +
                                 op_name(nodes_[id].kind) + "): " + msg);
    }

    void check_finite(int id) const {
        if (!nodes_[id].value.all_finite()) fail(id, "non-finite value");
    }

    void eval(int id) {
        Node& n = nodes_[id];
        switch (n.kind) {
            case OpKind::leaf:
                break;
            case OpKind::matmul: {
                const DenseMatrix& A = nodes_[n.a].value;
                const DenseMatrix& B = nodes_[n.b].value;
                n.value = n.trans_b ? matmul_nt(A, B) : gsq::matmul(A, B);
                break;
            }
            case OpKind::add:
                n.value = gsq::add(nodes_[n.a].value, nodes_[n.b].value);
                break;
            case OpKind::sub:
                n.value = gsq::sub(nodes_[n.a].value, nodes_[n.b].value);
                break;
            case OpKind::hadamard:
                n.value = gsq::hadamard(nodes_[n.a].value, nodes_[n.b].value);
                break;
            case OpKind::scale_by_scalar: {
                n.value = nodes_[n.a].value;
                for (auto& v : n.value.data) v *= n.scalar;
                break;
            }
            case OpKind::exp_elem: {
                const DenseMatrix& A = nodes_[n.a].value;
                n.value = DenseMatrix(A.rows, A.cols);
                for (size_t i = 0; i < A.data.size(); ++i)
                    n.value.data[i] = static_cast<float>(std::exp(static_cast<double>(A.data[i])));
                break;
            }
            case OpKind::softmax_tk: {
                const DenseMatrix& L = nodes_[n.a].value;
                const DenseMatrix& G = nodes_[n.b].value;
                if (!L.same_shape(G)) fail(id, "logits/noise shape mismatch");
                n.value = DenseMatrix(L.rows, L.cols);
                for (int r = 0; r < L.rows; ++r)
                    gsq::softmax_tk(&L.data[static_cast<size_t>(r) * L.cols],
                                    &G.data[static_cast<size_t>(r) * L.cols], L.cols, n.tau,
                                    n.kappa, &n.value.data[static_cast<size_t>(r) * L.cols]);
                break;
            }
            case OpKind::weighted_sum: {
                const DenseMatrix& P = nodes_[n.a].value;
                if (!P.same_shape(n.candidates)) fail(id, "probs/candidates shape mismatch");
                if (P.rows != n.out_rows * n.out_cols) fail(id, "reshape size mismatch");
                n.value = DenseMatrix(n.out_rows, n.out_cols);
                for (int i = 0; i < P.rows; ++i) {
                    double acc = 0.0;
                    for (int k = 0; k < P.cols; ++k)
                        acc += static_cast<double>(P.at(i, k)) * n.candidates.at(i, k);
                    n.value.data[i] = static_cast<float>(acc);
                }
                break;
            }
            case OpKind::binary_gumbel: {
                const DenseMatrix& L = nodes_[n.a].value;
                const DenseMatrix& G0 = nodes_[n.b].value;
                const DenseMatrix& G1 = nodes_[n.c].value;
                if (!L.same_shape(G0) || !L.same_shape(G1)) fail(id, "logit/noise shape mismatch");
                n.value = DenseMatrix(L.rows, L.cols);
                for (size_t i = 0; i < L.data.size(); ++i)
                    n.value.data[i] =
                        gsq::binary_gumbel(L.data[i], G0.data[i], G1.data[i], n.tau, n.kappa);
                break;
            }
            case OpKind::group_scale: {
                const DenseMatrix& Q = nodes_[n.a].value;
                const DenseMatrix& S = nodes_[n.b].value;
                int groups = (Q.cols + n.group_size - 1) / n.group_size;
                if (S.rows != Q.rows || S.cols != groups) fail(id, "scales shape mismatch");
                n.value = DenseMatrix(Q.rows, Q.cols);
                for (int r = 0; r < Q.rows; ++r)
                    for (int c = 0; c < Q.cols; ++c)
                        n.value.at(r, c) = Q.at(r, c) * S.at(r, c / n.group_size);
                break;
            }
            case OpKind::silu: {
                const DenseMatrix& A = nodes_[n.a].value;
                n.value = DenseMatrix(A.rows, A.cols);
                for (size_t i = 0; i < A.data.size(); ++i) {
                    double x = A.data[i];
                    n.value.data[i] = static_cast<float>(x / (1.0 + std::exp(-x)));
                }
                break;
            }
            case OpKind::frobenius_sq: {
                n.value = DenseMatrix(1, 1);
                n.value.data[0] = static_cast<float>(gsq::frobenius_sq(nodes_[n.a].value));
                break;
            }
        }
        check_finite(id);
    }

    void add_grad(int id, const DenseMatrix& g) {
        Node& n = nodes_[id];
        if (!n.grad.same_shape(g)) fail(id, "gradient shape mismatch");
        for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }

    void propagate(int id) {
        Node& n = nodes_[id];
        bool any = false;
        for (float v : n.grad.data)
            if (v != 0.0f) {
                any = true;
                break;
            }
        if (!any || n.kind == OpKind::leaf) return;
        const DenseMatrix& up = n.grad;
        switch (n.kind) {
            case OpKind::matmul: {
                const DenseMatrix& A = nodes_[n.a].value;
                const DenseMatrix& B = nodes_[n.b].value;
                if (!n.trans_b) {
                    add_grad(n.a, matmul_nt(up, B));   // dA = dC * B^T
                    add_grad(n.b, matmul_tn(A, up));   // dB = A^T * dC
                } else {
                    add_grad(n.a, gsq::matmul(up, B)); // dA = dC * B
                    add_grad(n.b, matmul_tn(up, A));   // dB = dC^T * A
                }
                break;
            }
            case OpKind::add:
                add_grad(n.a, up);
                add_grad(n.b, up);
                break;
            case OpKind::sub: {
                add_grad(n.a, up);
                DenseMatrix neg = up;
                for (auto& v : neg.data) v = -v;
                add_grad(n.b, neg);
                break;
            }
            case OpKind::hadamard:
                add_grad(n.a, gsq::hadamard(up, nodes_[n.b].value));
                add_grad(n.b, gsq::hadamard(up, nodes_[n.a].value));
                break;
            case OpKind::scale_by_scalar: {
                DenseMatrix g = up;
                for (auto& v : g.data) v *= n.scalar;
                add_grad(n.a, g);
                break;
            }
            case OpKind::exp_elem:
                add_grad(n.a, gsq::hadamard(up, n.value));
                break;
            case OpKind::softmax_tk: {
                // dL/dl_j = (kappa/tau) * p_j * (up_j - sum_k up_k p_k), per row
                const DenseMatrix& P = n.value;
                DenseMatrix g(P.rows, P.cols);
                double scale = static_cast<double>(n.kappa) / n.tau;
                for (int r = 0; r < P.rows; ++r) {
                    double dot = 0.0;
                    for (int k = 0; k < P.cols; ++k)
                        dot += static_cast<double>(up.at(r, k)) * P.at(r, k);
                    for (int k = 0; k < P.cols; ++k)
                        g.at(r, k) = static_cast<float>(scale * P.at(r, k) * (up.at(r, k) - dot));
                }
                add_grad(n.a, g);
                break;
            }
            case OpKind::weighted_sum: {
                const DenseMatrix& P = nodes_[n.a].value;
                DenseMatrix g(P.rows, P.cols);
                for (int i = 0; i < P.rows; ++i)
                    for (int k = 0; k < P.cols; ++k)
                        g.at(i, k) = up.data[i] * n.candidates.at(i, k);
                add_grad(n.a, g);
                break;
            }
            case OpKind::binary_gumbel: {
                // dp/dl = p (1 - p) * 2 kappa / tau; noise gets nothing
                const DenseMatrix& P = n.value;
                DenseMatrix g(P.rows, P.cols);
                double scale = 2.0 * static_cast<double>(n.kappa) / n.tau;
                for (size_t i = 0; i < P.data.size(); ++i) {
                    double p = P.data[i];
                    g.data[i] = static_cast<float>(up.data[i] * p * (1.0 - p) * scale);
                }
                add_grad(n.a, g);
                break;
            }
            case OpKind::group_scale: {
                const DenseMatrix& Q = nodes_[n.a].value;
                const DenseMatrix& S = nodes_[n.b].value;
                DenseMatrix gq(Q.rows, Q.cols);
                DenseMatrix gs(S.rows, S.cols);
                for (int r = 0; r < Q.rows; ++r)
                    for (int g = 0; g < S.cols; ++g) {
                        int lo = g * n.group_size;
                        int hi = std::min(Q.cols, lo + n.group_size);
                        double acc = 0.0;
                        for (int c = lo; c < hi; ++c) {
                            gq.at(r, c) = up.at(r, c) * S.at(r, g);
                            acc += static_cast<double>(up.at(r, c)) * Q.at(r, c);
                        }
                        gs.at(r, g) = static_cast<float>(acc);
                    }
                add_grad(n.a, gq);
                add_grad(n.b, gs);
                break;
            }
            case OpKind::silu: {
                const DenseMatrix& A = nodes_[n.a].value;
                DenseMatrix g(A.rows, A.cols);
                for (size_t i = 0; i < A.data.size(); ++i) {
                    double x = A.data[i];
                    double sig = 1.0 / (1.0 + std::exp(-x));
                    g.data[i] = static_cast<float>(up.data[i] * (sig * (1.0 + x * (1.0 - sig))));
                }
                add_grad(n.a, g);
                break;
            }
            case OpKind::frobenius_sq: {
                const DenseMatrix& A = nodes_[n.a].value;
                DenseMatrix g(A.rows, A.cols);
                double u = up.data[0];
                for (size_t i = 0; i < A.data.size(); ++i)
                    g.data[i] = static_cast<float>(2.0 * A.data[i] * u);
                add_grad(n.a, g);
                break;
            }
            case OpKind::leaf:
                break;
        }
    }
};

}  // namespace gsq
