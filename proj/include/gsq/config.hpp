#pragma once

// Job configuration and the flat key=value config-file dialect.
//
// Files hold one `key = value` pair per line; blank lines and lines
// starting with '#' are skipped. Keys not listed below are an error —
// silently ignoring a typo like `lr_logit` would change a run's result
// without any warning. Command-line flags override file values.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "optim.hpp"

namespace gsq {

struct QuantConfig {
    std::string bits = "2";  // "t" or "2".."8"
    int group_size = 128;
    int epochs = 20;         // 0 = ship the warm start untouched
    int batch = 64;
    int micro_batches = 4;
    float lr_logits = 1e-4f;
    float lr_scales = 5e-5f;
    float weight_decay = 1.0f;
    float beta1 = 0.9f;
    float beta2 = 0.95f;
    float alpha = -1.0f;       // <0 resolves to 3 (ternary) or 6 (grid)
    float sigma_init = 0.01f;
    float tau_start = 2.0f;
    float tau_end = 0.05f;
    float kappa_start = 100.0f;
    float kappa_end = 500.0f;
    std::string clip_mode = "auto";  // auto | none | logits_only | all
    float clip_threshold = -1.0f;    // <0 resolves by bit width
    float stage_split = 0.5f;        // ternary: fraction of epochs in stage 1
    uint64_t seed = 0;
    int threads = 1;

    // 0 for ternary, else the integer bit width.
    int bit_mode() const {
        if (bits == "t") return 0;
        if (bits.size() == 1 && bits[0] >= '2' && bits[0] <= '8') return bits[0] - '0';
        throw std::invalid_argument("config: bits must be t or an integer in [2, 8], got \"" +
                                    bits + "\"");
    }

    float resolved_alpha() const {
        if (alpha >= 0.0f) return alpha;
        return bit_mode() == 0 ? 3.0f : 6.0f;
    }

    ClipPolicy resolved_clip() const {
        ClipPolicy p;
        if (clip_mode == "none") {
            p.applies_to = ClipApply::none;
            return p;
        }
        if (clip_mode == "all")
            p.applies_to = ClipApply::all;
        else if (clip_mode == "logits_only" || clip_mode == "auto")
            p.applies_to = ClipApply::logits_only;
        else
            throw std::invalid_argument("config: unknown clip_mode \"" + clip_mode + "\"");
        int b = bit_mode();
        if (clip_mode == "auto" && b == 0) {
            p.applies_to = ClipApply::none;
            return p;
        }
        if (clip_threshold >= 0.0f)
            p.threshold = clip_threshold;
        else
            p.threshold = b >= 3 ? 1e-8f : 1e-6f;
        return p;
    }

    void validate() const {
        bit_mode();
        resolved_clip();
        if (group_size < 1) throw std::invalid_argument("config: group_size must be >= 1");
        if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
        if (batch < 1) throw std::invalid_argument("config: batch must be >= 1");
        if (micro_batches < 1) throw std::invalid_argument("config: micro_batches must be >= 1");
        if (!(lr_logits > 0.0f) || !(lr_scales > 0.0f))
            throw std::invalid_argument("config: learning rates must be > 0");
        if (!(weight_decay >= 0.0f)) throw std::invalid_argument("config: weight_decay must be >= 0");
        if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f))
            throw std::invalid_argument("config: betas must lie in [0, 1)");
        if (!(sigma_init >= 0.0f)) throw std::invalid_argument("config: sigma_init must be >= 0");
        if (!(tau_start > 0.0f) || !(tau_end > 0.0f))
            throw std::invalid_argument("config: tau must stay > 0");
        if (!(kappa_start > 0.0f) || !(kappa_end > 0.0f))
            throw std::invalid_argument("config: kappa must stay > 0");
        if (!(stage_split >= 0.0f && stage_split <= 1.0f))
            throw std::invalid_argument("config: stage_split must lie in [0, 1]");
        if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) a++;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) b--;
    return s.substr(a, b - a);
}

inline float parse_float(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        float f = std::stof(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return f;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad value for " + key + ": \"" + v + "\"");
    }
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        long n = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return static_cast<int>(n);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad value for " + key + ": \"" + v + "\"");
    }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        unsigned long long n = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return n;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad value for " + key + ": \"" + v + "\"");
    }
}

}  // namespace detail

inline void apply_config_kv(QuantConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_float;
    using detail::parse_int;
    using detail::parse_u64;
    if (key == "bits") c.bits = value;
    else if (key == "group_size") c.group_size = parse_int(key, value);
    else if (key == "epochs") c.epochs = parse_int(key, value);
    else if (key == "batch") c.batch = parse_int(key, value);
    else if (key == "micro_batches") c.micro_batches = parse_int(key, value);
    else if (key == "lr_logits") c.lr_logits = parse_float(key, value);
    else if (key == "lr_scales") c.lr_scales = parse_float(key, value);
    else if (key == "weight_decay") c.weight_decay = parse_float(key, value);
    else if (key == "beta1") c.beta1 = parse_float(key, value);
    else if (key == "beta2") c.beta2 = parse_float(key, value);
    else if (key == "alpha") c.alpha = parse_float(key, value);
    else if (key == "sigma_init") c.sigma_init = parse_float(key, value);
    else if (key == "tau_start") c.tau_start = parse_float(key, value);
    else if (key == "tau_end") c.tau_end = parse_float(key, value);
    else if (key == "kappa_start") c.kappa_start = parse_float(key, value);
    else if (key == "kappa_end") c.kappa_end = parse_float(key, value);
    else if (key == "clip_mode") c.clip_mode = value;
    else if (key == "clip_threshold") c.clip_threshold = parse_float(key, value);
    else if (key == "stage_split") c.stage_split = parse_float(key, value);
    else if (key == "seed") c.seed = parse_u64(key, value);
    else if (key == "threads") c.threads = parse_int(key, value);
    else throw std::invalid_argument("config: unknown key \"" + key + "\"");
}

inline QuantConfig parse_config_file(const std::string& path, QuantConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                        ": expected key = value");
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty())
            throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                        ": empty key");
        apply_config_kv(base, key, value);
    }
    return base;
}

}  // namespace gsq
