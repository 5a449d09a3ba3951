#pragma once

#include <algorithm>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "respeak/io.hpp"

namespace respeak {

using PhonemeSeq = std::vector<int32_t>;

// Phoneme inventory with stable ids. Id 0 is the word-boundary symbol; the
// single letters a-z are always present so out-of-lexicon words can fall back
// to per-character symbols deterministically.
struct PhonemeVocab {
    std::vector<std::string> symbols;
    std::unordered_map<std::string, int32_t> index;

    static constexpr const char* kBoundary = "|";

    int32_t boundary_id() const { return 0; }
    int64_t size() const { return static_cast<int64_t>(symbols.size()); }
    // ids eligible for random unconditional sequences (everything but the boundary)
    int64_t num_regular() const { return size() - 1; }

    int32_t id_of(const std::string& sym) const {
        auto it = index.find(sym);
        if (it == index.end()) throw std::out_of_range("PhonemeVocab: unknown symbol '" + sym + "'");
        return it->second;
    }

    static PhonemeVocab build(const Lexicon& lex) {
        std::set<std::string> syms;
        for (char c = 'a'; c <= 'z'; ++c) syms.insert(std::string(1, c));
        for (const auto& [word, pron] : lex.entries)
            for (const auto& s : pron) syms.insert(s);
        PhonemeVocab v;
        v.symbols.push_back(kBoundary);
        for (const auto& s : syms) v.symbols.push_back(s);
        for (size_t i = 0; i < v.symbols.size(); ++i) v.index[v.symbols[i]] = static_cast<int32_t>(i);
        return v;
    }

    json to_json() const { return json{{"symbols", symbols}}; }

    static PhonemeVocab from_json(const json& j) {
        PhonemeVocab v;
        v.symbols = j.at("symbols").get<std::vector<std::string>>();
        if (v.symbols.empty() || v.symbols[0] != kBoundary)
            throw std::runtime_error("PhonemeVocab: malformed serialized vocabulary");
        for (size_t i = 0; i < v.symbols.size(); ++i) v.index[v.symbols[i]] = static_cast<int32_t>(i);
        return v;
    }
};

// Lexicon lookup per word, per-character fallback for unknown words, boundary
// symbol between words.
inline PhonemeSeq phonemize(const std::string& transcript, const Lexicon& lex, const PhonemeVocab& vocab) {
    const auto words = split_words(transcript);
    if (words.empty()) throw std::invalid_argument("phonemize: empty transcript");
    PhonemeSeq out;
    bool first = true;
    for (const auto& w : words) {
        if (!first) out.push_back(vocab.boundary_id());
        first = false;
        auto it = lex.entries.find(w);
        if (it != lex.entries.end()) {
            for (const auto& s : it->second) out.push_back(vocab.id_of(s));
        } else {
            for (char c : w) out.push_back(vocab.id_of(std::string(1, c)));
        }
    }
    return out;
}

} // namespace respeak
