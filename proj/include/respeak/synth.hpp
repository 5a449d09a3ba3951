#pragma once

#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "respeak/io.hpp"
#include "respeak/rng.hpp"
#include "respeak/wav.hpp"

namespace respeak {

// Procedural corpus: pseudo-words over a small symbol alphabet, each symbol a
// fixed harmonic tone. Alignments and the lexicon are exact by construction,
// so the whole edit pipeline can run without an external aligner or
// phonemizer.
struct SynthSpec {
    int64_t num_utterances = 32;
    int64_t vocab_words = 12;
    int64_t min_words = 7;
    int64_t max_words = 9;
    int sample_rate = 16000;
    uint64_t seed = 0;
    double min_duration = 2.0;
    double max_duration = 15.0;
};

namespace synth_detail {

inline constexpr int kNumSymbols = 12;

inline char symbol_char(int i) { return static_cast<char>('a' + i); }

inline double symbol_freq(int i) { return 220.0 * std::pow(2.0, i / 12.0); }

inline double symbol_duration(int i) { return 0.080 + 0.015 * (i % 3); }

// harmonic tone with short cosine ramps to avoid clicks
inline void render_symbol(int sym, int sample_rate, std::vector<float>& out) {
    const double f = symbol_freq(sym);
    const int64_t n = static_cast<int64_t>(symbol_duration(sym) * sample_rate);
    const int64_t ramp = sample_rate / 125; // 8 ms
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        double s = 0.5 * std::sin(2.0 * M_PI * f * t) + 0.25 * std::sin(4.0 * M_PI * f * t) +
                   0.12 * std::sin(6.0 * M_PI * f * t);
        if (i < ramp) s *= 0.5 * (1.0 - std::cos(M_PI * i / static_cast<double>(ramp)));
        if (n - 1 - i < ramp) s *= 0.5 * (1.0 - std::cos(M_PI * (n - 1 - i) / static_cast<double>(ramp)));
        out.push_back(static_cast<float>(s));
    }
}

inline std::vector<std::string> build_vocabulary(int64_t n_words, Rng& rng) {
    std::vector<std::string> vocab;
    while (static_cast<int64_t>(vocab.size()) < n_words) {
        const int64_t len = rng.uniform_int(2, 4);
        std::string w;
        for (int64_t i = 0; i < len; ++i) w += symbol_char(static_cast<int>(rng.uniform_int(kNumSymbols)));
        if (std::find(vocab.begin(), vocab.end(), w) == vocab.end()) vocab.push_back(w);
    }
    return vocab;
}

} // namespace synth_detail

struct SynthUtterance {
    std::string id;
    Waveform audio;
    std::string transcript;
    WordAlignment alignment;
};

// Renders one utterance from the given word list; alignment is exact.
inline SynthUtterance render_utterance(const std::string& id, const std::vector<std::string>& words,
                                       int sample_rate, Rng& rng) {
    SynthUtterance u;
    u.id = id;
    u.audio.sample_rate = sample_rate;
    auto& s = u.audio.samples;
    const int64_t lead = static_cast<int64_t>(0.06 * sample_rate);
    s.assign(lead, 0.0f);
    for (size_t w = 0; w < words.size(); ++w) {
        if (w > 0) {
            const int64_t gap = static_cast<int64_t>(rng.uniform(0.04, 0.08) * sample_rate);
            s.insert(s.end(), gap, 0.0f);
            u.transcript += " ";
        }
        AlignedWord aw;
        aw.word = words[w];
        aw.start = static_cast<double>(s.size()) / sample_rate;
        for (char c : words[w]) synth_detail::render_symbol(c - 'a', sample_rate, s);
        aw.end = static_cast<double>(s.size()) / sample_rate;
        u.alignment.entries.push_back(aw);
        u.transcript += words[w];
    }
    s.insert(s.end(), lead, 0.0f);
    u.alignment.validate();
    return u;
}

// Writes WAVs, exact alignments, a complete lexicon and a JSONL manifest.
inline std::vector<ManifestEntry> make_synthetic_corpus(const SynthSpec& spec, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir + "/wav", ec);
    fs::create_directories(out_dir + "/align", ec);
    if (!fs::exists(out_dir + "/wav") || !fs::exists(out_dir + "/align"))
        throw std::runtime_error("make_synthetic_corpus: cannot create output directory " + out_dir);

    Rng rng(spec.seed);
    const auto vocab = synth_detail::build_vocabulary(spec.vocab_words, rng);

    Lexicon lex;
    for (const auto& w : vocab) {
        std::vector<std::string> syms;
        for (char c : w) syms.emplace_back(1, c);
        lex.entries[w] = syms;
    }
    save_lexicon(out_dir + "/lexicon.tsv", lex);

    std::vector<ManifestEntry> manifest;
    for (int64_t i = 0; i < spec.num_utterances; ++i) {
        char id[16];
        std::snprintf(id, sizeof(id), "utt%04d", static_cast<int>(i));
        std::vector<std::string> words;
        const int64_t n_words = rng.uniform_int(spec.min_words, spec.max_words);
        auto word_seconds = [](const std::string& w) {
            double d = 0.0;
            for (char c : w) d += synth_detail::symbol_duration(c - 'a');
            return d;
        };
        double floor_duration = 0.12; // lead + trail silence
        for (int64_t w = 0; w < n_words || floor_duration < spec.min_duration + 0.1; ++w) {
            const auto& word = vocab[rng.uniform_int(static_cast<int64_t>(vocab.size()))];
            floor_duration += word_seconds(word) + (words.empty() ? 0.0 : 0.04);
            words.push_back(word);
        }
        SynthUtterance u = render_utterance(id, words, spec.sample_rate, rng);
        if (u.audio.duration() < spec.min_duration || u.audio.duration() > spec.max_duration)
            throw std::runtime_error("make_synthetic_corpus: utterance duration outside bounds");

        const std::string wav_path = out_dir + "/wav/" + u.id + ".wav";
        const std::string align_path = out_dir + "/align/" + u.id + ".json";
        write_wav(wav_path, u.audio);
        save_alignment(align_path, u.alignment);
        manifest.push_back(ManifestEntry{u.id, wav_path, u.transcript, align_path, u.audio.duration()});
    }
    save_manifest(out_dir + "/manifest.jsonl", manifest);
    return manifest;
}

} // namespace respeak
