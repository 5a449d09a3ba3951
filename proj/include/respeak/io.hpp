#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace respeak {

using json = nlohmann::json;

struct ManifestEntry {
    std::string id;
    std::string audio_path;
    std::string transcript;
    std::string alignment_path; // optional, empty if absent
    double duration = 0.0;      // seconds
};

struct DurationBounds {
    double min_s = 2.0;
    double max_s = 15.0;
};

inline std::vector<ManifestEntry> load_manifest(const std::string& path, DurationBounds bounds = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("manifest: malformed JSONL at " + path + ":" + std::to_string(line_no) + ": " +
                                     e.what());
        }
        ManifestEntry e;
        try {
            e.id = j.at("id").get<std::string>();
            e.audio_path = j.at("audio_path").get<std::string>();
            e.transcript = j.at("transcript").get<std::string>();
            e.duration = j.at("duration").get<double>();
            if (j.contains("alignment_path") && !j["alignment_path"].is_null())
                e.alignment_path = j["alignment_path"].get<std::string>();
        } catch (const json::exception& ex) {
            throw std::runtime_error("manifest: missing field at " + path + ":" + std::to_string(line_no) + ": " +
                                     ex.what());
        }
        if (e.duration < bounds.min_s || e.duration > bounds.max_s)
            throw std::runtime_error("manifest: duration " + std::to_string(e.duration) + "s outside [" +
                                     std::to_string(bounds.min_s) + "," + std::to_string(bounds.max_s) + "] at " +
                                     path + ":" + std::to_string(line_no));
        out.push_back(std::move(e));
    }
    if (out.empty()) throw std::runtime_error("manifest: empty manifest " + path);
    return out;
}

inline void save_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path);
    for (const auto& e : entries) {
        json j{{"id", e.id},
               {"audio_path", e.audio_path},
               {"transcript", e.transcript},
               {"duration", e.duration}};
        if (!e.alignment_path.empty()) j["alignment_path"] = e.alignment_path;
        out << j.dump() << "\n";
    }
}

// --------------------------------------------------------------------------
// word alignments: JSON list of {word, start, end} in seconds; CSV accepted
// with a word,start,end header
// --------------------------------------------------------------------------

struct AlignedWord {
    std::string word;
    double start = 0.0;
    double end = 0.0;
};

struct WordAlignment {
    std::vector<AlignedWord> entries;

    void validate() const {
        double prev_end = -1.0;
        for (const auto& e : entries) {
            if (!(e.start < e.end))
                throw std::invalid_argument("alignment: word '" + e.word + "' has start >= end");
            if (e.start < prev_end)
                throw std::invalid_argument("alignment: overlapping or unsorted entries at word '" + e.word + "'");
            prev_end = e.end;
        }
    }
};

inline WordAlignment load_alignment(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("alignment: cannot open " + path);
    WordAlignment a;
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error("alignment: empty CSV " + path);
        if (line.rfind("word,start,end", 0) != 0)
            throw std::runtime_error("alignment: CSV must start with header word,start,end: " + path);
        int64_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::stringstream ss(line);
            AlignedWord w;
            std::string field;
            if (!std::getline(ss, w.word, ',') || !std::getline(ss, field, ','))
                throw std::runtime_error("alignment: malformed CSV at " + path + ":" + std::to_string(line_no));
            w.start = std::stod(field);
            if (!std::getline(ss, field, ','))
                throw std::runtime_error("alignment: malformed CSV at " + path + ":" + std::to_string(line_no));
            w.end = std::stod(field);
            a.entries.push_back(std::move(w));
        }
    } else {
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw std::runtime_error("alignment: malformed JSON " + path + ": " + e.what());
        }
        if (!j.is_array()) throw std::runtime_error("alignment: expected a JSON array: " + path);
        for (const auto& item : j) {
            AlignedWord w;
            w.word = item.at("word").get<std::string>();
            w.start = item.at("start").get<double>();
            w.end = item.at("end").get<double>();
            a.entries.push_back(std::move(w));
        }
    }
    a.validate();
    return a;
}

inline void save_alignment(const std::string& path, const WordAlignment& a) {
    json j = json::array();
    for (const auto& w : a.entries) j.push_back({{"word", w.word}, {"start", w.start}, {"end", w.end}});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("alignment: cannot write " + path);
    out << j.dump(2) << "\n";
}

// --------------------------------------------------------------------------
// lexicon: TSV "word<TAB>sym1 sym2 ..."
// --------------------------------------------------------------------------

struct Lexicon {
    std::unordered_map<std::string, std::vector<std::string>> entries;

    bool contains(const std::string& word) const { return entries.count(word) > 0; }
};

inline std::string lower_ascii(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(lower_ascii(w));
    return out;
}

inline Lexicon load_lexicon(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("lexicon: cannot open " + path);
    Lexicon lex;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error("lexicon: missing TAB at " + path + ":" + std::to_string(line_no));
        const std::string word = lower_ascii(line.substr(0, tab));
        std::stringstream ss(line.substr(tab + 1));
        std::vector<std::string> syms;
        std::string s;
        while (ss >> s) syms.push_back(s);
        if (syms.empty())
            throw std::runtime_error("lexicon: empty pronunciation at " + path + ":" + std::to_string(line_no));
        lex.entries[word] = std::move(syms);
    }
    return lex;
}

inline void save_lexicon(const std::string& path, const Lexicon& lex) {
    std::vector<std::string> words;
    words.reserve(lex.entries.size());
    for (const auto& [w, _] : lex.entries) words.push_back(w);
    std::sort(words.begin(), words.end());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("lexicon: cannot write " + path);
    for (const auto& w : words) {
        out << w << "\t";
        const auto& syms = lex.entries.at(w);
        for (size_t i = 0; i < syms.size(); ++i) out << (i ? " " : "") << syms[i];
        out << "\n";
    }
}

} // namespace respeak
