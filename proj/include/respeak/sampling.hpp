#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "respeak/phoneme.hpp"
#include "respeak/rng.hpp"

namespace respeak {

using Dist = std::vector<double>;

struct CFGParams {
    double gamma = 1.5; // gamma = 1 reduces to conditional sampling
};

struct SamplerParams {
    double top_p = 0.8;
    double temperature = 1.0;
    int64_t max_span_frames = 0; // 0 = derive a default per task
    uint64_t seed = 0;

    void validate() const {
        if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("SamplerParams: top_p must be in (0, 1]");
        if (!(temperature > 0.0)) throw std::invalid_argument("SamplerParams: temperature must be positive");
    }
};

// Random phoneme sequence of the same length as y, uniform over the regular
// (non-boundary) inventory. Drawn once per utterance.
inline PhonemeSeq random_unconditional(const PhonemeSeq& y, const PhonemeVocab& vocab, Rng& rng) {
    if (y.empty()) throw std::invalid_argument("random_unconditional: empty phoneme sequence");
    PhonemeSeq out(y.size());
    const int64_t n = vocab.num_regular();
    for (auto& id : out) id = static_cast<int32_t>(1 + rng.uniform_int(n));
    return out;
}

// gamma * p_cond + (1 - gamma) * p_uncond, clamped at zero and renormalized.
// If everything clamps away, falls back to p_cond.
inline Dist cfg_mix(const Dist& p_cond, const Dist& p_uncond, double gamma) {
    if (p_cond.size() != p_uncond.size())
        throw std::invalid_argument("cfg_mix: support mismatch (" + std::to_string(p_cond.size()) + " vs " +
                                    std::to_string(p_uncond.size()) + ")");
    if (p_cond.empty()) throw std::invalid_argument("cfg_mix: empty distribution");
    if (gamma == 1.0) return p_cond; // exact identity
    Dist q(p_cond.size());
    double z = 0.0;
    for (size_t i = 0; i < q.size(); ++i) {
        q[i] = std::max(0.0, gamma * p_cond[i] + (1.0 - gamma) * p_uncond[i]);
        z += q[i];
    }
    if (z <= 0.0) return p_cond;
    for (auto& v : q) v /= z;
    return q;
}

// p^(1/temperature), renormalized; equivalent to dividing the logits by the
// temperature before the softmax.
inline Dist apply_temperature(const Dist& p, double temperature) {
    if (temperature == 1.0) return p;
    Dist q(p.size());
    double z = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        q[i] = p[i] > 0.0 ? std::pow(p[i], 1.0 / temperature) : 0.0;
        z += q[i];
    }
    if (z <= 0.0) throw std::invalid_argument("apply_temperature: degenerate distribution");
    for (auto& v : q) v /= z;
    return q;
}

// Keeps the smallest descending-order prefix with cumulative mass >= top_p and
// renormalizes it; everything else gets zero. Ties sort to the lowest index.
inline Dist nucleus_truncate(const Dist& p, double top_p) {
    double total = 0.0;
    for (double v : p) {
        if (v < 0.0 || !std::isfinite(v)) throw std::invalid_argument("nucleus_truncate: invalid probability");
        total += v;
    }
    if (total <= 0.0) throw std::invalid_argument("nucleus_truncate: all-zero distribution");

    std::vector<size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return p[a] > p[b]; });

    Dist out(p.size(), 0.0);
    double cum = 0.0;
    double kept = 0.0;
    for (size_t idx : order) {
        out[idx] = p[idx];
        cum += p[idx] / total;
        kept += p[idx];
        if (cum >= top_p - 1e-15) break;
    }
    for (auto& v : out) v /= kept;
    return out;
}

inline int64_t sample_from(const Dist& p, Rng& rng) {
    const double u = rng.uniform();
    double cum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        cum += p[i];
        if (u < cum) return static_cast<int64_t>(i);
    }
    // numerical slack: return the last index with positive mass
    for (size_t i = p.size(); i-- > 0;)
        if (p[i] > 0.0) return static_cast<int64_t>(i);
    throw std::invalid_argument("sample_from: all-zero distribution");
}

inline int64_t nucleus_sample(const Dist& p, const SamplerParams& sp, Rng& rng) {
    sp.validate();
    return sample_from(nucleus_truncate(apply_temperature(p, sp.temperature), sp.top_p), rng);
}

inline Dist softmax_logits(const std::vector<float>& logits, double temperature = 1.0) {
    if (logits.empty()) throw std::invalid_argument("softmax_logits: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    Dist p(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

} // namespace respeak
