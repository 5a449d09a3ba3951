#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "respeak/seq_layout.hpp"
#include "respeak/wav.hpp"

namespace respeak {

inline constexpr double kSiSnrCapDb = 150.0;

// Scale-invariant signal-to-noise ratio in dB, capped at 150 dB.
inline double si_snr(const Waveform& reference, const Waveform& estimate) {
    if (reference.size() != estimate.size())
        throw std::invalid_argument("si_snr: length mismatch (" + std::to_string(reference.size()) + " vs " +
                                    std::to_string(estimate.size()) + ")");
    if (reference.size() == 0) throw std::invalid_argument("si_snr: empty signals");
    double dot = 0.0, ref_energy = 0.0;
    for (int64_t i = 0; i < reference.size(); ++i) {
        dot += static_cast<double>(estimate.samples[i]) * reference.samples[i];
        ref_energy += static_cast<double>(reference.samples[i]) * reference.samples[i];
    }
    if (ref_energy <= 0.0) throw std::invalid_argument("si_snr: zero-energy reference");
    const double scale = dot / ref_energy;
    double target_energy = 0.0, error_energy = 0.0;
    for (int64_t i = 0; i < reference.size(); ++i) {
        const double t = scale * reference.samples[i];
        const double e = estimate.samples[i] - t;
        target_energy += t * t;
        error_energy += e * e;
    }
    if (error_energy <= 0.0 || target_energy / error_energy > std::pow(10.0, kSiSnrCapDb / 10.0))
        return kSiSnrCapDb;
    return 10.0 * std::log10(target_energy / error_energy);
}

// Fraction of frames where thresholded predictions match the true bits.
inline double wm_frame_accuracy(const std::vector<uint8_t>& true_bits, const std::vector<double>& predicted_probs,
                                double threshold = 0.5) {
    if (true_bits.size() != predicted_probs.size())
        throw std::invalid_argument("wm_frame_accuracy: length mismatch");
    if (true_bits.empty()) throw std::invalid_argument("wm_frame_accuracy: empty input");
    int64_t correct = 0;
    for (size_t i = 0; i < true_bits.size(); ++i) {
        const uint8_t pred = predicted_probs[i] >= threshold ? 1 : 0;
        if (pred == (true_bits[i] ? 1 : 0)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(true_bits.size());
}

// SI-SNR restricted to the samples of the given unedited frame spans.
inline double context_fidelity(const Waveform& original, const Waveform& edited, const SpanSet& unedited_spans,
                               int64_t stride) {
    if (original.size() != edited.size()) throw std::invalid_argument("context_fidelity: length mismatch");
    Waveform ref, est;
    ref.sample_rate = original.sample_rate;
    est.sample_rate = edited.sample_rate;
    for (const Span& s : unedited_spans.spans) {
        const int64_t lo = s.start * stride;
        const int64_t hi = std::min<int64_t>((s.end + 1) * stride, original.size());
        if (lo >= hi) continue;
        ref.samples.insert(ref.samples.end(), original.samples.begin() + lo, original.samples.begin() + hi);
        est.samples.insert(est.samples.end(), edited.samples.begin() + lo, edited.samples.begin() + hi);
    }
    if (ref.samples.empty()) throw std::invalid_argument("context_fidelity: empty unedited region");
    return si_snr(ref, est);
}

// complement of a SpanSet over [0, frames)
inline SpanSet complement_spans(const SpanSet& spans, int64_t frames) {
    SpanSet out;
    int64_t cursor = 0;
    for (const Span& s : spans.spans) {
        if (s.start > cursor) out.spans.push_back(Span{cursor, s.start - 1});
        cursor = s.end + 1;
    }
    if (cursor < frames) out.spans.push_back(Span{cursor, frames - 1});
    return out;
}

inline SpanSet spans_from_bits(const std::vector<uint8_t>& bits) {
    SpanSet out;
    int64_t start = -1;
    for (int64_t i = 0; i <= static_cast<int64_t>(bits.size()); ++i) {
        const bool on = i < static_cast<int64_t>(bits.size()) && bits[i];
        if (on && start < 0) start = i;
        if (!on && start >= 0) {
            out.spans.push_back(Span{start, i - 1});
            start = -1;
        }
    }
    return out;
}

// Fraction of (item, seed) generations that stopped by hitting the length cap
// instead of sampling [eog]. The generation itself is supplied as a callback
// returning true when the run hit the cap.
inline double runaway_rate(int64_t n_items, int64_t n_seeds,
                           const std::function<bool(int64_t item, uint64_t seed)>& hit_cap) {
    if (n_seeds <= 0) throw std::invalid_argument("runaway_rate: n_seeds must be positive");
    if (n_items <= 0) throw std::invalid_argument("runaway_rate: empty test set");
    int64_t runaway = 0;
    for (int64_t i = 0; i < n_items; ++i)
        for (int64_t s = 0; s < n_seeds; ++s)
            if (hit_cap(i, static_cast<uint64_t>(s))) ++runaway;
    return static_cast<double>(runaway) / static_cast<double>(n_items * n_seeds);
}

// binomial tail P(X >= wins) for X ~ Bin(n, 0.5); used by sign tests
inline double sign_test_p_value(int64_t wins, int64_t n) {
    double p = 0.0;
    for (int64_t k = wins; k <= n; ++k) {
        double log_c = 0.0;
        for (int64_t i = 0; i < k; ++i) log_c += std::log(static_cast<double>(n - i)) - std::log(static_cast<double>(i + 1));
        p += std::exp(log_c - static_cast<double>(n) * std::log(2.0));
    }
    return std::min(p, 1.0);
}

struct EvalReport {
    nlohmann::json metrics = nlohmann::json::object();
    nlohmann::json per_utterance = nlohmann::json::array();
    nlohmann::json config = nlohmann::json::object();
    uint64_t seed = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"metrics", metrics}, {"per_utterance", per_utterance}, {"config", config}, {"seed", seed}};
    }
};

} // namespace respeak
