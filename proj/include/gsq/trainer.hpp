#pragma once

// Training orchestration for the reconstruction objective
// ||f(x; w~) - f(x; w)||_F^2:
//
//   quantize_layer          single linear layer, any bit mode
//   quantize_ternary_staged ternary MLP block: per-layer warmup stage,
//                           then joint block-output stage, one
//                           continuous tau/kappa schedule and one Lion
//                           state across both stages
//   scale_only_finetune     codes frozen, scales trained against the
//                           composed full-precision model for one epoch
//   allocate_bits           greedy 2-vs-3-bit assignment under a target
//                           average rate
//
// Reported "hard MSE" is always computed at shipped precision (codes +
// binary16-rounded scales) on the held-out calibration tail, so the
// do-no-harm comparison measures exactly what gets written to disk.
// Fallback rule: a trained solution ships only if strictly better than
// the warm start; ties and regressions return the warm start and set a
// flag.
//
// RNG stream budget: layer k of a job owns streams 4k+0 (init epsilon),
// 4k+1 (training Gumbel noise), 4k+2 (shuffle). A single-layer job is
// layer 0, which keeps one-layer blocks bitwise identical to
// quantize_layer under a split epoch budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "config.hpp"
#include "gumbel.hpp"
#include "init.hpp"
#include "optim.hpp"
#include "pack.hpp"
#include "quantize.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace gsq {

struct TrainingDivergence : std::runtime_error {
    int step;
    TrainingDivergence(int s, const std::string& msg)
        : std::runtime_error("training diverged at step " + std::to_string(s) + ": " + msg),
          step(s) {}
};

struct TrainReport {
    std::vector<float> loss_trace;   // raw squared-residual loss per optimizer step
    std::vector<float> tau_trace;
    std::vector<float> kappa_trace;
    double init_hard_mse = 0.0;
    double final_hard_mse = 0.0;
    double flip_fraction = 0.0;      // finalized vs warm-start codes
    double wall_sec = 0.0;
    bool fell_back = false;          // warm start shipped instead of the trained solution
    bool stage2_fell_back = false;   // staged only: stage-1 snapshot shipped
    double stage1_end_block_mse = -1.0;
    double stage2_init_block_mse = -1.0;
    int steps = 0;
};

struct QuantResult {
    PackedTensor packed;
    TrainReport report;
};

struct MultiResult {
    std::vector<PackedTensor> layers;
    TrainReport report;
};

// ---------------------------------------------------------------------
// Model composition

enum class BlockKind {
    chain,  // x -> L0 -> silu -> L1 -> ... -> L_{k-1}   (silu between layers)
    gated,  // (silu(x G^T) (.) (x U^T)) D^T              (layers = {G, U, D})
};

struct BlockSpec {
    BlockKind kind = BlockKind::chain;
    int num_layers = 1;

    void validate() const {
        if (kind == BlockKind::gated && num_layers != 3)
            throw std::invalid_argument("BlockSpec: gated block needs exactly 3 layers");
        if (num_layers < 1) throw std::invalid_argument("BlockSpec: need at least one layer");
    }
};

// Matches the tape's silu op bitwise (binary64 inner arithmetic).
inline DenseMatrix silu_mat(const DenseMatrix& a) {
    DenseMatrix y(a.rows, a.cols);
    for (size_t i = 0; i < a.data.size(); ++i) {
        double x = a.data[i];
        y.data[i] = static_cast<float>(x / (1.0 + std::exp(-x)));
    }
    return y;
}

inline DenseMatrix block_forward(const BlockSpec& spec, const std::vector<DenseMatrix>& w,
                                 const DenseMatrix& x) {
    spec.validate();
    if (static_cast<int>(w.size()) != spec.num_layers)
        throw std::invalid_argument("block_forward: weight count mismatch");
    if (spec.kind == BlockKind::gated) {
        DenseMatrix a = matmul_nt(x, w[0]);
        DenseMatrix b = matmul_nt(x, w[1]);
        return matmul_nt(hadamard(silu_mat(a), b), w[2]);
    }
    DenseMatrix h = x;
    for (int i = 0; i < spec.num_layers; ++i) {
        h = matmul_nt(h, w[i]);
        if (i + 1 < spec.num_layers) h = silu_mat(h);
    }
    return h;
}

// Per-layer inputs when every upstream layer runs at full precision.
inline std::vector<DenseMatrix> block_layer_inputs(const BlockSpec& spec,
                                                   const std::vector<DenseMatrix>& w,
                                                   const DenseMatrix& x) {
    spec.validate();
    std::vector<DenseMatrix> in;
    if (spec.kind == BlockKind::gated) {
        in.push_back(x);  // gate
        in.push_back(x);  // up
        in.push_back(hadamard(silu_mat(matmul_nt(x, w[0])), matmul_nt(x, w[1])));
    } else {
        DenseMatrix h = x;
        for (int i = 0; i < spec.num_layers; ++i) {
            in.push_back(h);
            if (i + 1 < spec.num_layers) h = silu_mat(matmul_nt(h, w[i]));
        }
    }
    return in;
}

// ---------------------------------------------------------------------
// Trainable per-layer state

struct LayerParams {
    int bit_mode = 0;    // 0 ternary, 2 full grid, >2 shift
    bool frozen = false; // scale-only: codes fixed, no logits
    Grid grid;
    TernaryParams tern;
    FullGridParams full;
    ShiftParams shift;
    IntMatrix frozen_codes;   // frozen only
    GroupScales frozen_scales;

    int rows() const {
        if (frozen) return frozen_codes.rows;
        if (bit_mode == 0) return tern.rows();
        if (bit_mode == 2) return full.rows;
        return shift.rows();
    }
    int cols() const {
        if (frozen) return frozen_codes.cols;
        if (bit_mode == 0) return tern.cols();
        if (bit_mode == 2) return full.cols;
        return shift.cols();
    }
    GroupScales& scales() {
        if (frozen) return frozen_scales;
        if (bit_mode == 0) return tern.scales;
        if (bit_mode == 2) return full.scales;
        return shift.scales;
    }
    const GroupScales& scales() const { return const_cast<LayerParams*>(this)->scales(); }

    DenseMatrix& param_matrix(int local) {
        if (local == 2) return scales().s;
        if (frozen) throw std::logic_error("LayerParams: frozen layer has no logits");
        if (bit_mode == 0) return local == 0 ? tern.mask_logits : tern.sign_logits;
        if (local != 0) throw std::logic_error("LayerParams: no such logit class");
        return bit_mode == 2 ? full.logits : shift.logits;
    }

    HardSolution finalize_hard() const {
        if (frozen) {
            HardSolution h;
            h.codes = frozen_codes;
            h.scales = frozen_scales;
            h.weights = hard_weights(h.codes, h.scales);
            return h;
        }
        if (bit_mode == 0) return gsq::finalize(tern);
        if (bit_mode == 2) return gsq::finalize(full);
        return gsq::finalize(shift);
    }
};

// Param ids: 8*layer + {0 = primary logits, 1 = sign logits, 2 = scales}.
constexpr int kPidStride = 8;
constexpr int kPidLogits = 0;
constexpr int kPidSign = 1;
constexpr int kPidScales = 2;

// ---------------------------------------------------------------------
// Shipped-precision evaluation

inline GroupScales f16_rounded(const GroupScales& s) {
    GroupScales out = s;
    for (auto& v : out.s.data) v = f16_round(v);
    return out;
}

inline DenseMatrix shipped_weights(const IntMatrix& codes, const GroupScales& scales) {
    return hard_weights(codes, f16_rounded(scales));
}

// Mean squared output error of the composed block against full
// precision, both sides evaluated on x.
inline double block_mse(const BlockSpec& spec, const std::vector<DenseMatrix>& quant_w,
                        const std::vector<DenseMatrix>& fp_w, const DenseMatrix& x) {
    DenseMatrix yq = block_forward(spec, quant_w, x);
    DenseMatrix yf = block_forward(spec, fp_w, x);
    return frobenius_sq(sub(yq, yf)) / static_cast<double>(yq.numel());
}

// ---------------------------------------------------------------------
// Calibration split: the last max(1, n/8) rows are held out for
// reporting and never touched by gradients or the Hessian (a 1-row set
// degenerates to holdout = train).

struct CalibSplit {
    DenseMatrix train;
    DenseMatrix eval;
};

inline CalibSplit split_calib(const DenseMatrix& x) {
    if (x.rows < 1 || x.cols < 1) throw std::invalid_argument("split_calib: empty calibration");
    CalibSplit sp;
    if (x.rows == 1) {
        sp.train = x;
        sp.eval = x;
        return sp;
    }
    int hold = std::max(1, x.rows / 8);
    int train_rows = x.rows - hold;
    sp.train = DenseMatrix(train_rows, x.cols);
    sp.eval = DenseMatrix(hold, x.cols);
    std::copy(x.data.begin(), x.data.begin() + static_cast<size_t>(train_rows) * x.cols,
              sp.train.data.begin());
    std::copy(x.data.begin() + static_cast<size_t>(train_rows) * x.cols, x.data.end(),
              sp.eval.data.begin());
    return sp;
}

// ---------------------------------------------------------------------
// Core training loop (shared by every stage and by scale-only runs)

namespace detail {

struct LayerNodes {
    int scales = -1;
    std::vector<int> noise;  // rebind targets, order fixed per mode
    int wbar = -1;
};

inline LayerNodes build_layer_subgraph(Tape& t, const LayerParams& p, float tau, float kappa,
                                       int layer_index) {
    LayerNodes ln;
    int pid = kPidStride * layer_index;
    int gs = p.scales().group_size;
    if (p.frozen) {
        DenseMatrix q(p.rows(), p.cols());
        for (size_t i = 0; i < q.data.size(); ++i)
            q.data[i] = static_cast<float>(p.frozen_codes.data[i]);
        int qc = t.constant(std::move(q));
        ln.scales = t.leaf(p.frozen_scales.s, pid + kPidScales);
        ln.wbar = t.group_scale(qc, ln.scales, gs);
        return ln;
    }
    if (p.bit_mode == 0) {
        int lm = t.leaf(p.tern.mask_logits, pid + kPidLogits);
        int ls = t.leaf(p.tern.sign_logits, pid + kPidSign);
        ln.scales = t.leaf(p.tern.scales.s, pid + kPidScales);
        int mg0 = t.constant(DenseMatrix(p.rows(), p.cols()));
        int mg1 = t.constant(DenseMatrix(p.rows(), p.cols()));
        int sg0 = t.constant(DenseMatrix(p.rows(), p.cols()));
        int sg1 = t.constant(DenseMatrix(p.rows(), p.cols()));
        ln.noise = {mg0, mg1, sg0, sg1};
        int pm = t.binary_gumbel(lm, mg0, mg1, tau, kappa);
        int pb = t.binary_gumbel(ls, sg0, sg1, tau, kappa);
        DenseMatrix ones(p.rows(), p.cols());
        for (auto& v : ones.data) v = 1.0f;
        int soft_sign = t.sub(t.scale_by_scalar(pb, 2.0f), t.constant(std::move(ones)));
        int q = t.hadamard(pm, soft_sign);
        ln.wbar = t.group_scale(q, ln.scales, gs);
        return ln;
    }
    // Grid modes share one structure; only the candidate table differs.
    const DenseMatrix& logits = p.bit_mode == 2 ? p.full.logits : p.shift.logits;
    int ll = t.leaf(logits, pid + kPidLogits);
    ln.scales = t.leaf(p.scales().s, pid + kPidScales);
    int g = t.constant(DenseMatrix(logits.rows, logits.cols));
    ln.noise = {g};
    int probs = t.softmax_tk(ll, g, tau, kappa);
    DenseMatrix cand(logits.rows, logits.cols);
    if (p.bit_mode == 2) {
        for (int i = 0; i < logits.rows; ++i)
            for (int k = 0; k < logits.cols; ++k)
                cand.at(i, k) = static_cast<float>(p.grid.levels[k]);
    } else {
        float c[kShiftCandidates];
        for (int i = 0; i < logits.rows; ++i) {
            shift_candidates(p.grid, p.shift.base_index.data[i], c);
            for (int k = 0; k < kShiftCandidates; ++k) cand.at(i, k) = c[k];
        }
    }
    int q = t.weighted_sum(probs, std::move(cand), p.rows(), p.cols());
    ln.wbar = t.group_scale(q, ln.scales, gs);
    return ln;
}

inline void rebind_noise(Tape& t, const LayerNodes& ln, const LayerParams& p, RngStream& rng) {
    if (p.frozen) return;
    if (p.bit_mode == 0) {
        TernaryNoise n = sample_ternary_noise(rng, p.rows(), p.cols());
        t.rebind(ln.noise[0], std::move(n.mask_g0));
        t.rebind(ln.noise[1], std::move(n.mask_g1));
        t.rebind(ln.noise[2], std::move(n.sign_g0));
        t.rebind(ln.noise[3], std::move(n.sign_g1));
    } else {
        int n = p.bit_mode == 2 ? p.grid.size() : kShiftCandidates;
        t.rebind(ln.noise[0], sample_grid_noise(rng, p.rows() * p.cols(), n));
    }
}

inline DenseMatrix gather_rows(const DenseMatrix& x, const std::vector<int>& idx, int lo, int hi) {
    DenseMatrix out(hi - lo, x.cols);
    for (int i = lo; i < hi; ++i)
        std::copy(&x.data[static_cast<size_t>(idx[i]) * x.cols],
                  &x.data[static_cast<size_t>(idx[i]) * x.cols] + x.cols,
                  &out.data[static_cast<size_t>(i - lo) * x.cols]);
    return out;
}

struct LoopStreams {
    std::vector<RngStream*> noise;  // one per layer, owned by the caller
    RngStream* shuffle = nullptr;
};

// Runs absolute epochs [epoch_lo, epoch_hi) of the job. The schedule
// index is the global optimizer step epoch*bpe + batch, over a ramp of
// sched_total steps, so split stages anneal continuously.
inline void run_training(const QuantConfig& cfg, const BlockSpec& spec,
                         const std::vector<std::pair<LayerParams*, int>>& layers,
                         const std::vector<DenseMatrix>& fp_w, const DenseMatrix& x_train,
                         int epoch_lo, int epoch_hi, int sched_total, LoopStreams streams,
                         LionState& lion, TrainReport& report) {
    spec.validate();
    if (static_cast<int>(layers.size()) != spec.num_layers)
        throw std::invalid_argument("run_training: layer count mismatch");
    int n = x_train.rows;
    int bpe = (n + cfg.batch - 1) / cfg.batch;
    LinearSchedule tau_s{cfg.tau_start, cfg.tau_end, sched_total};
    LinearSchedule kappa_s{cfg.kappa_start, cfg.kappa_end, sched_total};
    ClipPolicy clip = cfg.resolved_clip();
    std::vector<int> logit_pids;
    for (auto& [p, li] : layers) {
        if (p->frozen) continue;
        logit_pids.push_back(kPidStride * li + kPidLogits);
        if (p->bit_mode == 0) logit_pids.push_back(kPidStride * li + kPidSign);
    }
    LionParams hp_logits{cfg.lr_logits, cfg.beta1, cfg.beta2, cfg.weight_decay};
    LionParams hp_scales{cfg.lr_scales, cfg.beta1, cfg.beta2, cfg.weight_decay};

    std::vector<int> perm(n);
    for (int epoch = epoch_lo; epoch < epoch_hi; ++epoch) {
        for (int i = 0; i < n; ++i) perm[i] = i;
        for (int i = n - 1; i >= 1; --i) {
            int j = static_cast<int>(streams.shuffle->next_word() % (static_cast<uint64_t>(i) + 1));
            std::swap(perm[i], perm[j]);
        }
        for (int bi = 0; bi < bpe; ++bi) {
            int step = epoch * bpe + bi;
            float tau = tau_s.value(step);
            float kappa = kappa_s.value(step);

            Tape tape;
            std::vector<LayerNodes> ln;
            ln.reserve(layers.size());
            for (auto& [p, li] : layers) ln.push_back(build_layer_subgraph(tape, *p, tau, kappa, li));
            int in_features = x_train.cols;
            int xc = tape.constant(DenseMatrix(0, in_features));
            int yc = tape.constant(DenseMatrix(0, layers.back().first->rows()));
            int yhat;
            if (spec.kind == BlockKind::gated) {
                int a = tape.matmul(xc, ln[0].wbar, true);
                int b = tape.matmul(xc, ln[1].wbar, true);
                yhat = tape.matmul(tape.hadamard(tape.silu(a), b), ln[2].wbar, true);
            } else {
                yhat = xc;
                for (size_t i = 0; i < ln.size(); ++i) {
                    yhat = tape.matmul(yhat, ln[i].wbar, true);
                    if (i + 1 < ln.size()) yhat = tape.silu(yhat);
                }
            }
            int loss_node = tape.frobenius_sq(tape.sub(yhat, yc));

            int blo = bi * cfg.batch;
            int bhi = std::min(n, blo + cfg.batch);
            int m = bhi - blo;
            std::vector<GradientMap> gmaps;
            double loss_sum = 0.0;
            for (int mb = 0; mb < cfg.micro_batches; ++mb) {
                int clo = blo + static_cast<int>(static_cast<int64_t>(mb) * m / cfg.micro_batches);
                int chi =
                    blo + static_cast<int>(static_cast<int64_t>(mb + 1) * m / cfg.micro_batches);
                if (clo == chi) continue;
                DenseMatrix xmb = gather_rows(x_train, perm, clo, chi);
                DenseMatrix ymb = block_forward(spec, fp_w, xmb);
                tape.rebind(xc, std::move(xmb));
                tape.rebind(yc, std::move(ymb));
                for (size_t i = 0; i < ln.size(); ++i)
                    rebind_noise(tape, ln[i], *layers[i].first, *streams.noise[i]);
                double loss;
                try {
                    loss = tape.forward(loss_node);
                } catch (const std::runtime_error& e) {
                    throw TrainingDivergence(step, e.what());
                }
                if (!std::isfinite(loss)) throw TrainingDivergence(step, "non-finite loss");
                loss_sum += loss;
                gmaps.push_back(tape.backward(loss_node));
            }
            GradientMap gbar = accumulate(gmaps);
            clip_logit_grads(gbar, clip, logit_pids);
            for (auto& [pid, g] : gbar.g) {
                // layers carry their global index; map pid back to the slot
                LayerParams* p = nullptr;
                for (auto& [lp, li] : layers)
                    if (li == pid / kPidStride) p = lp;
                if (!p) throw std::logic_error("run_training: gradient for unknown layer");
                int local = pid % kPidStride;
                lion_step(lion, pid, p->param_matrix(local), g,
                          local == kPidScales ? hp_scales : hp_logits);
            }
            report.loss_trace.push_back(static_cast<float>(loss_sum / gmaps.size()));
            report.tau_trace.push_back(tau);
            report.kappa_trace.push_back(kappa);
        }
    }
}

inline Grid grid_for_mode(int bit_mode) {
    return bit_mode == 0 ? Grid::ternary() : Grid::uniform(bit_mode);
}

inline LayerParams init_layer_params(const DenseMatrix& w, const BaselineSolution& base,
                                     const QuantConfig& cfg, RngStream* eps) {
    (void)w;
    LayerParams p;
    p.bit_mode = cfg.bit_mode();
    p.grid = grid_for_mode(p.bit_mode);
    float alpha = cfg.resolved_alpha();
    int rows = base.codes.rows, cols = base.codes.cols;
    if (p.bit_mode == 0) {
        if (eps) {
            p.tern = init_ternary_logits(base, alpha, cfg.sigma_init, *eps);
        } else {
            DenseMatrix z(rows, cols);
            p.tern = init_ternary_logits(base, alpha, cfg.sigma_init, z, z);
        }
    } else if (p.bit_mode == 2) {
        if (eps) {
            p.full = init_fullgrid_logits(base, p.grid, alpha, cfg.sigma_init, *eps);
        } else {
            DenseMatrix z(rows * cols, p.grid.size());
            p.full = init_fullgrid_logits(base, p.grid, alpha, cfg.sigma_init, z);
        }
    } else {
        if (eps) {
            p.shift = init_shift_logits(base, p.grid, alpha, cfg.sigma_init, *eps);
        } else {
            DenseMatrix z(rows * cols, kShiftCandidates);
            p.shift = init_shift_logits(base, p.grid, alpha, cfg.sigma_init, z);
        }
    }
    return p;
}

inline double flip_fraction(const IntMatrix& a, const IntMatrix& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw std::invalid_argument("flip_fraction: shape mismatch");
    if (a.numel() == 0) return 0.0;
    size_t flips = 0;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) flips++;
    return static_cast<double>(flips) / static_cast<double>(a.numel());
}

}  // namespace detail

// ---------------------------------------------------------------------
// Jobs

inline MultiResult quantize_block(const BlockSpec& spec, const std::vector<DenseMatrix>& ws,
                                  const DenseMatrix& calib_x, const QuantConfig& cfg) {
    auto t0 = std::chrono::steady_clock::now();
    spec.validate();
    cfg.validate();
    if (static_cast<int>(ws.size()) != spec.num_layers)
        throw std::invalid_argument("quantize_block: weight count mismatch");
    for (const auto& w : ws) w.require_finite("quantize_block: weights");

    CalibSplit sp = split_calib(calib_x);
    std::vector<DenseMatrix> in_train = block_layer_inputs(spec, ws, sp.train);
    std::vector<DenseMatrix> in_eval = block_layer_inputs(spec, ws, sp.eval);
    for (int i = 0; i < spec.num_layers; ++i)
        if (in_train[i].cols != ws[i].cols)
            throw std::invalid_argument("quantize_block: layer " + std::to_string(i) +
                                        " in-features mismatch");

    int n = sp.train.rows;
    int bpe = (n + cfg.batch - 1) / cfg.batch;
    int total_steps = cfg.epochs * bpe;
    int sched_total = std::max(1, total_steps - 1);
    int bit_mode = cfg.bit_mode();
    Grid grid = detail::grid_for_mode(bit_mode);

    // Warm start per layer from GPTQ on the layer's own (full-precision
    // upstream) inputs.
    std::vector<BaselineSolution> base(spec.num_layers);
    std::vector<LayerParams> params(spec.num_layers);
    std::vector<RngStream> noise_streams(spec.num_layers);
    std::vector<RngStream> shuffle_streams(spec.num_layers);
    for (int i = 0; i < spec.num_layers; ++i) {
        CalibSet cs(in_train[i]);
        base[i] = gptq(ws[i], cs, grid, cfg.group_size);
        noise_streams[i] = RngStream(cfg.seed, 4ull * i + 1);
        shuffle_streams[i] = RngStream(cfg.seed, 4ull * i + 2);
        if (total_steps > 0) {
            RngStream eps(cfg.seed, 4ull * i + 0);
            params[i] = detail::init_layer_params(ws[i], base[i], cfg, &eps);
        } else {
            params[i] = detail::init_layer_params(ws[i], base[i], cfg, nullptr);
        }
    }

    auto shipped_all = [&](const std::vector<HardSolution>& hs) {
        std::vector<DenseMatrix> qw;
        qw.reserve(hs.size());
        for (const auto& h : hs) qw.push_back(shipped_weights(h.codes, h.scales));
        return qw;
    };
    auto finalize_all = [&](const std::vector<LayerParams>& ps) {
        std::vector<HardSolution> hs;
        hs.reserve(ps.size());
        for (const auto& p : ps) hs.push_back(p.finalize_hard());
        return hs;
    };

    TrainReport rep;
    std::vector<HardSolution> base_hard;
    for (int i = 0; i < spec.num_layers; ++i) {
        HardSolution h;
        h.codes = base[i].codes;
        h.scales = base[i].scales;
        h.weights = hard_weights(h.codes, h.scales);
        base_hard.push_back(std::move(h));
    }
    rep.init_hard_mse = block_mse(spec, shipped_all(base_hard), ws, sp.eval);

    // Ternary runs the two-stage recipe (per-layer, then joint); grid
    // modes train jointly from step 0.
    int e1 = bit_mode == 0 ? static_cast<int>(std::lround(cfg.epochs * cfg.stage_split)) : 0;
    e1 = std::clamp(e1, 0, cfg.epochs);

    LionState lion;
    std::vector<HardSolution> chosen;
    double chosen_mse = 0.0;
    if (total_steps == 0) {
        chosen = base_hard;
        chosen_mse = rep.init_hard_mse;
    } else {
        // Stage 1: each layer under its own linear objective (ternary
        // pipeline; grid modes train jointly from the start when the
        // block has several layers).
        if (bit_mode == 0) {
            for (int i = 0; i < spec.num_layers; ++i) {
                BlockSpec single{BlockKind::chain, 1};
                detail::LoopStreams ls;
                ls.noise = {&noise_streams[i]};
                ls.shuffle = &shuffle_streams[i];
                detail::run_training(cfg, single, {{&params[i], i}}, {ws[i]}, in_train[i], 0, e1,
                                     sched_total, ls, lion, rep);
            }
        }
        std::vector<LayerParams> snapshot1 = params;
        std::vector<HardSolution> s1_hard = finalize_all(snapshot1);
        rep.stage1_end_block_mse = block_mse(spec, shipped_all(s1_hard), ws, sp.eval);
        rep.stage2_init_block_mse = block_mse(spec, shipped_all(s1_hard), ws, sp.eval);

        // Stage 2: joint block objective for the remaining epochs.
        int e2_lo = bit_mode == 0 ? e1 : 0;
        if (e2_lo < cfg.epochs) {
            detail::LoopStreams ls;
            for (int i = 0; i < spec.num_layers; ++i) ls.noise.push_back(&noise_streams[i]);
            ls.shuffle = &shuffle_streams[0];
            std::vector<std::pair<LayerParams*, int>> lp;
            for (int i = 0; i < spec.num_layers; ++i) lp.emplace_back(&params[i], i);
            detail::run_training(cfg, spec, lp, ws, sp.train, e2_lo, cfg.epochs, sched_total, ls,
                                 lion, rep);
        }
        std::vector<HardSolution> s2_hard = finalize_all(params);
        double s2_mse = block_mse(spec, shipped_all(s2_hard), ws, sp.eval);
        double s1_mse = rep.stage1_end_block_mse;

        if (s2_mse < s1_mse) {
            chosen = std::move(s2_hard);
            chosen_mse = s2_mse;
        } else {
            chosen = std::move(s1_hard);
            chosen_mse = s1_mse;
            rep.stage2_fell_back = true;
        }
        if (!(chosen_mse < rep.init_hard_mse)) {
            chosen = base_hard;
            chosen_mse = rep.init_hard_mse;
            rep.fell_back = true;
        }
    }

    MultiResult out;
    size_t total_coords = 0, flips = 0;
    for (int i = 0; i < spec.num_layers; ++i) {
        out.layers.push_back(
            pack(chosen[i].codes, chosen[i].scales, static_cast<uint8_t>(bit_mode)));
        total_coords += chosen[i].codes.numel();
        for (size_t k = 0; k < chosen[i].codes.data.size(); ++k)
            if (chosen[i].codes.data[k] != base[i].codes.data[k]) flips++;
    }
    rep.final_hard_mse = chosen_mse;
    rep.flip_fraction = total_coords ? static_cast<double>(flips) / total_coords : 0.0;
    rep.steps = total_steps;
    rep.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.report = std::move(rep);
    return out;
}

inline QuantResult quantize_layer(const DenseMatrix& w, const DenseMatrix& calib_x,
                                  const QuantConfig& cfg) {
    MultiResult r = quantize_block(BlockSpec{BlockKind::chain, 1}, {w}, calib_x, cfg);
    return QuantResult{std::move(r.layers[0]), std::move(r.report)};
}

inline MultiResult quantize_ternary_staged(const BlockSpec& spec,
                                           const std::vector<DenseMatrix>& ws,
                                           const DenseMatrix& calib_x, const QuantConfig& cfg) {
    if (cfg.bit_mode() != 0)
        throw std::invalid_argument("quantize_ternary_staged: bits must be t");
    return quantize_block(spec, ws, calib_x, cfg);
}

// Scale-only refinement: unpack, train scales for one epoch against the
// composed full-precision model, repack with identical codes. Weight
// decay is off — a zero-residual model must see exactly zero update.
inline MultiResult scale_only_finetune(const BlockSpec& spec,
                                       const std::vector<PackedTensor>& packed,
                                       const std::vector<DenseMatrix>& fp_ws,
                                       const DenseMatrix& calib_x, const QuantConfig& cfg) {
    auto t0 = std::chrono::steady_clock::now();
    spec.validate();
    cfg.validate();
    if (static_cast<int>(packed.size()) != spec.num_layers ||
        static_cast<int>(fp_ws.size()) != spec.num_layers)
        throw std::invalid_argument("scale_only_finetune: layer count mismatch");

    QuantConfig fcfg = cfg;
    fcfg.epochs = 1;
    fcfg.weight_decay = 0.0f;

    CalibSplit sp = split_calib(calib_x);
    std::vector<LayerParams> params(spec.num_layers);
    std::vector<IntMatrix> codes_before(spec.num_layers);
    for (int i = 0; i < spec.num_layers; ++i) {
        UnpackedTensor u = unpack(packed[i]);
        params[i].bit_mode = packed[i].bit_mode;
        params[i].frozen = true;
        params[i].grid = detail::grid_for_mode(packed[i].bit_mode);
        codes_before[i] = u.codes;
        params[i].frozen_codes = std::move(u.codes);
        params[i].frozen_scales = std::move(u.scales);
    }

    auto shipped = [&](const std::vector<LayerParams>& ps) {
        std::vector<DenseMatrix> qw;
        for (const auto& p : ps) qw.push_back(shipped_weights(p.frozen_codes, p.frozen_scales));
        return qw;
    };

    TrainReport rep;
    rep.init_hard_mse = block_mse(spec, shipped(params), fp_ws, sp.eval);
    std::vector<LayerParams> before = params;

    int bpe = (sp.train.rows + fcfg.batch - 1) / fcfg.batch;
    int total_steps = fcfg.epochs * bpe;
    LionState lion;
    detail::LoopStreams ls;
    std::vector<RngStream> noise_streams(spec.num_layers);  // untouched: frozen layers skip noise
    for (int i = 0; i < spec.num_layers; ++i) {
        noise_streams[i] = RngStream(fcfg.seed, 4ull * i + 1);
        ls.noise.push_back(&noise_streams[i]);
    }
    RngStream shuffle(fcfg.seed, 2);
    ls.shuffle = &shuffle;
    std::vector<std::pair<LayerParams*, int>> lp;
    for (int i = 0; i < spec.num_layers; ++i) lp.emplace_back(&params[i], i);
    detail::run_training(fcfg, spec, lp, fp_ws, sp.train, 0, fcfg.epochs, std::max(1, total_steps - 1),
                         ls, lion, rep);

    double after_mse = block_mse(spec, shipped(params), fp_ws, sp.eval);
    if (after_mse < rep.init_hard_mse) {
        rep.final_hard_mse = after_mse;
    } else {
        params = before;
        rep.final_hard_mse = rep.init_hard_mse;
        rep.fell_back = true;
    }

    MultiResult out;
    for (int i = 0; i < spec.num_layers; ++i) {
        if (!(params[i].frozen_codes == codes_before[i]))
            throw std::logic_error("scale_only_finetune: codes changed");
        out.layers.push_back(pack(params[i].frozen_codes, params[i].frozen_scales,
                                  static_cast<uint8_t>(params[i].bit_mode)));
    }
    rep.steps = total_steps;
    rep.flip_fraction = 0.0;
    rep.wall_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.report = std::move(rep);
    return out;
}

// ---------------------------------------------------------------------
// Non-uniform bit allocation (2-vs-3 bit greedy under an average-rate
// budget). Sensitivity is the warm-start MSE increase from 3 to 2 bits
// per parameter; upgrades go to the highest sensitivity first, skipping
// layers that would blow the budget but still considering later ones.

struct LayerSizing {
    size_t params = 0;
    double sensitivity = 0.0;
};

inline std::vector<int> allocate_bits(const std::vector<LayerSizing>& layers, double target_bpp,
                                      int group_size) {
    if (layers.empty()) throw std::invalid_argument("allocate_bits: no layers");
    double lo_rate = bits_per_param(2.0, 16, group_size);
    double hi_rate = bits_per_param(3.0, 16, group_size);
    if (target_bpp < lo_rate || target_bpp > hi_rate)
        throw std::invalid_argument("allocate_bits: target " + std::to_string(target_bpp) +
                                    " outside achievable [" + std::to_string(lo_rate) + ", " +
                                    std::to_string(hi_rate) + "]");
    double total_params = 0.0;
    for (const auto& l : layers) total_params += static_cast<double>(l.params);
    if (total_params == 0.0) throw std::invalid_argument("allocate_bits: zero total parameters");

    std::vector<int> order(layers.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (layers[a].sensitivity != layers[b].sensitivity)
            return layers[a].sensitivity > layers[b].sensitivity;
        return a < b;
    });

    std::vector<int> bits(layers.size(), 2);
    double bit_sum = lo_rate * total_params;
    for (int i : order) {
        double next = bit_sum + (hi_rate - lo_rate) * static_cast<double>(layers[i].params);
        if (next / total_params <= target_bpp + 1e-12) {
            bits[i] = 3;
            bit_sum = next;
        }
    }
    return bits;
}

// Warm-start sensitivity score: per-parameter increase in shipped
// reconstruction MSE when the GPTQ baseline drops from 3 to 2 bits.
inline double layer_sensitivity(const DenseMatrix& w, const DenseMatrix& calib_x, int group_size) {
    CalibSet cs(calib_x);
    auto mse_at = [&](int bits) {
        BaselineSolution b = gptq(w, cs, Grid::uniform(bits), group_size);
        DenseMatrix qw = shipped_weights(b.codes, b.scales);
        return frobenius_sq(sub(matmul_nt(calib_x, qw), matmul_nt(calib_x, w))) /
               (static_cast<double>(calib_x.rows) * w.rows);
    };
    double d = mse_at(2) - mse_at(3);
    return d / static_cast<double>(w.numel());
}

}  // namespace gsq
