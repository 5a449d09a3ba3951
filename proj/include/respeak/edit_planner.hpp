#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "respeak/io.hpp"
#include "respeak/phoneme.hpp"
#include "respeak/seq_layout.hpp"

namespace respeak {

// One merged block of the word-level edit script. Ranges are half-open word
// indices; an empty orig range is an insertion, an empty target range a
// deletion.
struct EditOp {
    enum class Kind { Insert, Delete, Substitute };
    Kind kind = Kind::Substitute;
    int64_t orig_begin = 0, orig_end = 0;
    int64_t target_begin = 0, target_end = 0;
};

struct EditOpList {
    std::vector<EditOp> ops;
    int64_t cost = 0; // unit-cost Levenshtein distance over words
};

struct EditParams {
    double alpha = 0.12;     // seconds of margin on each side of a span
    int64_t frame_rate = 50; // Hz
    int64_t max_spans = 3;

    void validate() const {
        if (alpha < 0.0) throw std::invalid_argument("EditParams: alpha must be >= 0");
        if (frame_rate <= 0) throw std::invalid_argument("EditParams: frame_rate must be positive");
    }
};

// Minimal word-level edit script (unit costs). Adjacent non-match columns are
// merged into blocks; substitution is preferred over insert+delete, then the
// leftmost minimal script is taken.
inline EditOpList diff_transcripts(const std::vector<std::string>& orig, const std::vector<std::string>& target) {
    if (orig.empty() || target.empty())
        throw std::invalid_argument("diff_transcripts: transcripts must be non-empty");
    const int64_t m = static_cast<int64_t>(orig.size());
    const int64_t n = static_cast<int64_t>(target.size());
    std::vector<std::vector<int64_t>> d(m + 1, std::vector<int64_t>(n + 1, 0));
    for (int64_t i = 0; i <= m; ++i) d[i][0] = i;
    for (int64_t j = 0; j <= n; ++j) d[0][j] = j;
    for (int64_t i = 1; i <= m; ++i)
        for (int64_t j = 1; j <= n; ++j) {
            const int64_t sub = d[i - 1][j - 1] + (orig[i - 1] == target[j - 1] ? 0 : 1);
            d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
        }

    // backtrack; diagonal first so substitutions win ties against insert+delete
    enum class Step { Match, Sub, Del, Ins };
    std::vector<Step> script;
    int64_t i = m, j = n;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (orig[i - 1] == target[j - 1] ? 0 : 1)) {
            script.push_back(orig[i - 1] == target[j - 1] ? Step::Match : Step::Sub);
            --i;
            --j;
        } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
            script.push_back(Step::Del);
            --i;
        } else {
            script.push_back(Step::Ins);
            --j;
        }
    }
    std::reverse(script.begin(), script.end());

    EditOpList out;
    out.cost = d[m][n];
    int64_t oi = 0, tj = 0;
    EditOp current;
    bool open = false;
    auto flush = [&]() {
        if (!open) return;
        const bool has_orig = current.orig_end > current.orig_begin;
        const bool has_target = current.target_end > current.target_begin;
        current.kind = !has_orig ? EditOp::Kind::Insert
                                 : (!has_target ? EditOp::Kind::Delete : EditOp::Kind::Substitute);
        out.ops.push_back(current);
        open = false;
    };
    for (Step s : script) {
        if (s == Step::Match) {
            flush();
            ++oi;
            ++tj;
            continue;
        }
        if (!open) {
            current = EditOp{};
            current.orig_begin = current.orig_end = oi;
            current.target_begin = current.target_end = tj;
            open = true;
        }
        switch (s) {
            case Step::Sub: ++oi; ++tj; break;
            case Step::Del: ++oi; break;
            case Step::Ins: ++tj; break;
            default: break;
        }
        current.orig_end = oi;
        current.target_end = tj;
    }
    flush();
    return out;
}

// Maps edit blocks to frame spans: [start - alpha, end + alpha] with outward
// frame rounding, insertion blocks anchored at the midpoint of the silence
// gap (audio start/end for boundary insertions). Overlapping or adjacent
// spans merge; more than max_spans is an error.
inline SpanSet plan_spans(const WordAlignment& align, const EditOpList& ops, const EditParams& p, int64_t frames) {
    p.validate();
    align.validate();
    const int64_t n_words = static_cast<int64_t>(align.entries.size());
    const double audio_end = static_cast<double>(frames) / static_cast<double>(p.frame_rate);

    std::vector<Span> raw;
    for (const EditOp& op : ops.ops) {
        double t0 = 0.0, t1 = 0.0;
        if (op.kind == EditOp::Kind::Insert) {
            const int64_t gap = op.orig_begin; // insertion before original word `gap`
            double anchor;
            if (gap <= 0)
                anchor = 0.0;
            else if (gap >= n_words)
                anchor = audio_end;
            else
                anchor = 0.5 * (align.entries[gap - 1].end + align.entries[gap].start);
            t0 = t1 = anchor;
        } else {
            if (op.orig_end > n_words)
                throw std::invalid_argument("plan_spans: edit references word " + std::to_string(op.orig_end - 1) +
                                            " without alignment");
            t0 = align.entries[op.orig_begin].start;
            t1 = align.entries[op.orig_end - 1].end;
        }
        t0 = std::max(0.0, t0 - p.alpha);
        t1 = std::min(audio_end, t1 + p.alpha);
        int64_t fs = static_cast<int64_t>(std::floor(t0 * static_cast<double>(p.frame_rate)));
        int64_t fe = static_cast<int64_t>(std::ceil(t1 * static_cast<double>(p.frame_rate))) - 1;
        fs = std::clamp<int64_t>(fs, 0, frames - 1);
        fe = std::clamp<int64_t>(fe, 0, frames - 1);
        if (fe < fs) fe = fs;
        raw.push_back(Span{fs, fe});
    }
    SpanSet spans = SpanSet::merged(std::move(raw));
    spans.validate(frames);
    if (static_cast<int64_t>(spans.size()) > p.max_spans)
        throw std::invalid_argument("plan_spans: " + std::to_string(spans.size()) + " spans exceed max_spans=" +
                                    std::to_string(p.max_spans));
    return spans;
}

inline PhonemeSeq build_target_phonemes(const std::string& target_transcript, const Lexicon& lex,
                                        const PhonemeVocab& vocab) {
    return phonemize(target_transcript, lex, vocab);
}

} // namespace respeak
