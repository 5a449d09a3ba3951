#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "respeak/code_grid.hpp"
#include "respeak/rng.hpp"

namespace respeak {

// Inclusive frame span [start, end].
struct Span {
    int64_t start = 0;
    int64_t end = 0;
    int64_t length() const { return end - start + 1; }
    bool operator==(const Span& o) const { return start == o.start && end == o.end; }
};

// Sorted, pairwise disjoint, non-adjacent spans.
struct SpanSet {
    std::vector<Span> spans;

    SpanSet() = default;
    explicit SpanSet(std::vector<Span> s) : spans(std::move(s)) {}

    size_t size() const { return spans.size(); }
    bool empty() const { return spans.empty(); }

    int64_t total_length() const {
        int64_t n = 0;
        for (const auto& s : spans) n += s.length();
        return n;
    }

    void validate(int64_t frames) const {
        int64_t prev_end = -2;
        for (const auto& s : spans) {
            if (s.start < 0 || s.end < s.start || s.end >= frames)
                throw std::invalid_argument("SpanSet: span [" + std::to_string(s.start) + "," +
                                            std::to_string(s.end) + "] invalid for T=" + std::to_string(frames));
            if (s.start <= prev_end + 1)
                throw std::invalid_argument("SpanSet: spans must be sorted, disjoint and non-adjacent");
            prev_end = s.end;
        }
    }

    // merge overlapping or adjacent spans; result satisfies validate()
    static SpanSet merged(std::vector<Span> raw) {
        std::sort(raw.begin(), raw.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
        SpanSet out;
        for (const auto& s : raw) {
            if (!out.spans.empty() && s.start <= out.spans.back().end + 1)
                out.spans.back().end = std::max(out.spans.back().end, s.end);
            else
                out.spans.push_back(s);
        }
        return out;
    }

    bool contains_frame(int64_t t) const {
        for (const auto& s : spans)
            if (t >= s.start && t <= s.end) return true;
        return false;
    }

    bool operator==(const SpanSet& o) const { return spans == o.spans; }
};

// Special token ids live above the codec vocabulary: [sos], [eos], [eog],
// mask markers [m_1..m_Pmax], and the delay pad.
struct SpecialVocab {
    int64_t codebook_size = 2048; // V
    int64_t pmax = 3;

    int64_t sos() const { return codebook_size; }
    int64_t eos() const { return codebook_size + 1; }
    int64_t eog() const { return codebook_size + 2; }
    int64_t mask_id(int64_t p) const { // p is 1-based
        if (p < 1 || p > pmax) throw std::out_of_range("SpecialVocab: mask index out of range");
        return codebook_size + 3 + (p - 1);
    }
    int64_t delay_pad() const { return codebook_size + 3 + pmax; }
    int64_t num_specials() const { return 3 + pmax + 1; }
    int64_t vocab_size() const { return codebook_size + num_specials(); }
    bool is_special(int64_t id) const { return id >= codebook_size && id < vocab_size(); }

    std::string token_name(int64_t id) const {
        if (id < codebook_size) return std::to_string(id);
        if (id == sos()) return "[sos]";
        if (id == eos()) return "[eos]";
        if (id == eog()) return "[eog]";
        if (id == delay_pad()) return "[pad]";
        for (int64_t p = 1; p <= pmax; ++p)
            if (id == mask_id(p)) return "[m" + std::to_string(p) + "]";
        return "<bad:" + std::to_string(id) + ">";
    }
};

enum class Role : uint8_t { Context, Masked, Special };

// Token grid of arbitrary rows x K, used for both rearranged and delayed layouts.
struct TokenGrid {
    int64_t rows = 0;
    int64_t num_codebooks = 0;
    std::vector<int32_t> tokens;

    TokenGrid() = default;
    TokenGrid(int64_t r, int64_t k) : rows(r), num_codebooks(k), tokens(static_cast<size_t>(r * k), 0) {}

    int32_t& at(int64_t t, int64_t k) { return tokens[static_cast<size_t>(t * num_codebooks + k)]; }
    int32_t at(int64_t t, int64_t k) const { return tokens[static_cast<size_t>(t * num_codebooks + k)]; }

    bool operator==(const TokenGrid& o) const {
        return rows == o.rows && num_codebooks == o.num_codebooks && tokens == o.tokens;
    }
};

// The rearranged sequence A': [sos] C_0 [m_1] C_1 ... [m_P] C_P [eos]
// followed by [m_1] M_1 [eog] ... [m_P] M_P [eog].
struct RearrangedSeq {
    TokenGrid grid;
    std::vector<Role> roles;        // per position
    std::vector<int32_t> span_index; // per position, -1 = none
    int64_t original_frames = 0;    // T
    SpanSet spans;
    int64_t context_len = 0; // positions in the context part, including [sos]..[eos]

    int64_t length() const { return grid.rows; }
};

// ---------------------------------------------------------------------------
// span sampling
// ---------------------------------------------------------------------------

// P ~ Uniform{1..pmax} disjoint non-adjacent spans with total length capped at
// max_mask_frac * T. Spans may touch frame 0 and frame T-1.
inline SpanSet sample_spans(int64_t frames, Rng& rng, int64_t pmax = 3, double max_mask_frac = 0.9) {
    if (frames < 10) throw std::invalid_argument("sample_spans: need at least 10 frames, got " + std::to_string(frames));
    const int64_t p = rng.uniform_int(1, pmax);
    const int64_t budget = std::min<int64_t>(static_cast<int64_t>(max_mask_frac * static_cast<double>(frames)),
                                             frames - (p - 1));
    // lengths drawn uniformly, rescaled into the budget
    std::vector<int64_t> lens(p);
    int64_t total = 0;
    for (auto& l : lens) {
        l = rng.uniform_int(1, budget);
        total += l;
    }
    if (total > budget) {
        int64_t new_total = 0;
        for (auto& l : lens) {
            l = std::max<int64_t>(1, l * budget / total);
            new_total += l;
        }
        total = new_total;
        while (total > budget) {
            auto it = std::max_element(lens.begin(), lens.end());
            --*it;
            --total;
        }
    }
    // place spans: distribute the slack uniformly over the P+1 gaps, with a
    // mandatory 1-frame separation between consecutive spans
    const int64_t slack = frames - total - (p - 1);
    std::vector<int64_t> cuts(p);
    for (auto& c : cuts) c = rng.uniform_int(0, slack);
    std::sort(cuts.begin(), cuts.end());
    SpanSet out;
    int64_t cursor = cuts[0];
    for (int64_t i = 0; i < p; ++i) {
        Span s{cursor, cursor + lens[i] - 1};
        out.spans.push_back(s);
        const int64_t extra = (i + 1 < p) ? cuts[i + 1] - cuts[i] : 0;
        cursor = s.end + 2 + extra;
    }
    out.validate(frames);
    return out;
}

// With the given probability returns one span ending exactly at the last
// frame (speech-continuation masking); otherwise an empty SpanSet.
inline SpanSet sample_continuation_span(int64_t frames, Rng& rng, double prob = 0.5) {
    if (frames < 10)
        throw std::invalid_argument("sample_continuation_span: need at least 10 frames, got " + std::to_string(frames));
    SpanSet out;
    if (!rng.bernoulli(prob)) return out;
    const int64_t lo = (frames + 9) / 10; // ceil(0.1 * T)
    const int64_t start = rng.uniform_int(lo, frames - 1);
    out.spans.push_back(Span{start, frames - 1});
    return out;
}

// ---------------------------------------------------------------------------
// rearrangement
// ---------------------------------------------------------------------------

inline RearrangedSeq rearrange(const CodeGrid& codes, const SpanSet& spans, const SpecialVocab& sv) {
    spans.validate(codes.frames);
    codes.check_range(sv.codebook_size);
    const int64_t p = static_cast<int64_t>(spans.size());
    if (p > sv.pmax)
        throw std::invalid_argument("rearrange: span count " + std::to_string(p) + " exceeds Pmax=" +
                                    std::to_string(sv.pmax));
    const int64_t k = codes.num_codebooks;
    const int64_t t_out = codes.frames + 3 * p + 2;

    RearrangedSeq r;
    r.grid = TokenGrid(t_out, k);
    r.roles.assign(static_cast<size_t>(t_out), Role::Context);
    r.span_index.assign(static_cast<size_t>(t_out), -1);
    r.original_frames = codes.frames;
    r.spans = spans;

    int64_t pos = 0;
    auto put_special = [&](int64_t id, int32_t span_id) {
        for (int64_t c = 0; c < k; ++c) r.grid.at(pos, c) = static_cast<int32_t>(id);
        r.roles[pos] = Role::Special;
        r.span_index[pos] = span_id;
        ++pos;
    };
    auto put_frame = [&](int64_t t, Role role, int32_t span_id) {
        for (int64_t c = 0; c < k; ++c) r.grid.at(pos, c) = codes.at(t, c);
        r.roles[pos] = role;
        r.span_index[pos] = span_id;
        ++pos;
    };

    put_special(sv.sos(), -1);
    int64_t t = 0;
    for (int64_t i = 0; i < p; ++i) {
        for (; t < spans.spans[i].start; ++t) put_frame(t, Role::Context, -1);
        put_special(sv.mask_id(i + 1), static_cast<int32_t>(i));
        t = spans.spans[i].end + 1;
    }
    for (; t < codes.frames; ++t) put_frame(t, Role::Context, -1);
    put_special(sv.eos(), -1);
    r.context_len = pos;
    for (int64_t i = 0; i < p; ++i) {
        put_special(sv.mask_id(i + 1), static_cast<int32_t>(i));
        for (int64_t f = spans.spans[i].start; f <= spans.spans[i].end; ++f)
            put_frame(f, Role::Masked, static_cast<int32_t>(i));
        put_special(sv.eog(), static_cast<int32_t>(i));
    }
    if (pos != t_out) throw std::logic_error("rearrange: layout length bookkeeping failed");
    return r;
}

// Exact inverse of rearrange. Parses the token stream structurally, so a
// malformed sequence (e.g. a missing [eog]) is rejected.
inline std::pair<CodeGrid, SpanSet> invert_rearrange(const RearrangedSeq& r, const SpecialVocab& sv) {
    const TokenGrid& g = r.grid;
    const int64_t k = g.num_codebooks;
    const int64_t n = g.rows;
    if (n < 2) throw std::invalid_argument("invert_rearrange: sequence too short");

    auto special_at = [&](int64_t pos) -> int64_t {
        const int32_t id = g.at(pos, 0);
        if (id < sv.codebook_size) return -1;
        for (int64_t c = 1; c < k; ++c)
            if (g.at(pos, c) != id)
                throw std::invalid_argument("invert_rearrange: special token not replicated across channels at position " +
                                            std::to_string(pos));
        return id;
    };

    int64_t pos = 0;
    if (special_at(pos) != sv.sos()) throw std::invalid_argument("invert_rearrange: missing [sos]");
    ++pos;

    // context part
    std::vector<std::vector<int64_t>> context_segments(1); // positions of frames per segment
    int64_t seen_markers = 0;
    while (pos < n) {
        const int64_t id = special_at(pos);
        if (id < 0) {
            context_segments.back().push_back(pos);
            ++pos;
        } else if (id == sv.eos()) {
            ++pos;
            break;
        } else if (seen_markers < sv.pmax && id == sv.mask_id(seen_markers + 1)) {
            ++seen_markers;
            context_segments.emplace_back();
            ++pos;
        } else {
            throw std::invalid_argument("invert_rearrange: unexpected token " + sv.token_name(id) +
                                        " in context part at position " + std::to_string(pos));
        }
        if (pos >= n && id != sv.eos())
            throw std::invalid_argument("invert_rearrange: missing [eos]");
    }
    const int64_t p = seen_markers;

    // generation part: [m_p] M_p [eog] for each span in order
    std::vector<std::vector<int64_t>> span_contents;
    for (int64_t i = 0; i < p; ++i) {
        if (pos >= n || special_at(pos) != sv.mask_id(i + 1))
            throw std::invalid_argument("invert_rearrange: missing generation marker [m" + std::to_string(i + 1) + "]");
        ++pos;
        std::vector<int64_t> content;
        while (pos < n && special_at(pos) < 0) {
            content.push_back(pos);
            ++pos;
        }
        if (pos >= n || special_at(pos) != sv.eog())
            throw std::invalid_argument("invert_rearrange: missing [eog] after span " + std::to_string(i + 1));
        if (content.empty())
            throw std::invalid_argument("invert_rearrange: empty masked span " + std::to_string(i + 1));
        ++pos;
        span_contents.push_back(std::move(content));
    }
    if (pos != n) throw std::invalid_argument("invert_rearrange: trailing tokens after final [eog]");

    // stitch segments and spans back together
    int64_t frames = 0;
    for (const auto& seg : context_segments) frames += static_cast<int64_t>(seg.size());
    for (const auto& sp : span_contents) frames += static_cast<int64_t>(sp.size());

    CodeGrid codes(frames, k);
    SpanSet spans;
    int64_t t = 0;
    auto copy_row = [&](int64_t src_pos) {
        for (int64_t c = 0; c < k; ++c) {
            const int32_t id = g.at(src_pos, c);
            if (id >= sv.codebook_size)
                throw std::invalid_argument("invert_rearrange: special id in a frame row at position " +
                                            std::to_string(src_pos));
            codes.at(t, c) = id;
        }
        ++t;
    };
    for (int64_t i = 0; i <= p; ++i) {
        for (int64_t sp : context_segments[i]) copy_row(sp);
        if (i < p) {
            Span s{t, t + static_cast<int64_t>(span_contents[i].size()) - 1};
            for (int64_t spos : span_contents[i]) copy_row(spos);
            spans.spans.push_back(s);
        }
    }
    spans.validate(frames);
    return {std::move(codes), std::move(spans)};
}

// ---------------------------------------------------------------------------
// delayed stacking
// ---------------------------------------------------------------------------

// Channel k (0-indexed) is shifted down by k rows; vacated cells hold the
// delay pad. Output has rows + K - 1 rows.
inline TokenGrid delay_stack(const TokenGrid& in, const SpecialVocab& sv) {
    const int64_t k = in.num_codebooks;
    TokenGrid out(in.rows + k - 1, k);
    const int32_t pad = static_cast<int32_t>(sv.delay_pad());
    for (int64_t t = 0; t < out.rows; ++t)
        for (int64_t c = 0; c < k; ++c) {
            const int64_t src = t - c;
            out.at(t, c) = (src >= 0 && src < in.rows) ? in.at(src, c) : pad;
        }
    return out;
}

inline TokenGrid delay_unstack(const TokenGrid& in, const SpecialVocab& sv) {
    const int64_t k = in.num_codebooks;
    const int64_t rows = in.rows - (k - 1);
    if (rows <= 0) throw std::invalid_argument("delay_unstack: grid too short for K=" + std::to_string(k));
    const int32_t pad = static_cast<int32_t>(sv.delay_pad());
    TokenGrid out(rows, k);
    for (int64_t t = 0; t < in.rows; ++t)
        for (int64_t c = 0; c < k; ++c) {
            const int64_t src = t - c;
            const bool in_range = src >= 0 && src < rows;
            if (in_range) {
                if (in.at(t, c) == pad)
                    throw std::invalid_argument("delay_unstack: pad inside the valid region at row " + std::to_string(t));
                out.at(src, c) = in.at(t, c);
            } else if (in.at(t, c) != pad) {
                throw std::invalid_argument("delay_unstack: missing pad at row " + std::to_string(t) + " channel " +
                                            std::to_string(c));
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// loss mask
// ---------------------------------------------------------------------------

// True on masked-span content and on each [eog]; false on context tokens and
// every other special.
inline std::vector<uint8_t> loss_mask(const RearrangedSeq& r, const SpecialVocab& sv) {
    std::vector<uint8_t> mask(static_cast<size_t>(r.length()), 0);
    for (int64_t i = 0; i < r.length(); ++i) {
        if (r.roles[i] == Role::Masked) mask[i] = 1;
        else if (r.roles[i] == Role::Special && r.grid.at(i, 0) == sv.eog()) mask[i] = 1;
    }
    return mask;
}

// Expands a per-position mask to the cells of the delayed grid: cell (t, k)
// is on iff its source position t-k is on. Pad cells stay off.
inline std::vector<uint8_t> delayed_cell_mask(const std::vector<uint8_t>& mask, int64_t k) {
    const int64_t rows = static_cast<int64_t>(mask.size());
    std::vector<uint8_t> out(static_cast<size_t>((rows + k - 1) * k), 0);
    for (int64_t t = 0; t < rows + k - 1; ++t)
        for (int64_t c = 0; c < k; ++c) {
            const int64_t src = t - c;
            if (src >= 0 && src < rows && mask[src]) out[t * k + c] = 1;
        }
    return out;
}

// One line per position: index, role, span id, per-channel tokens.
inline std::string print_layout(const RearrangedSeq& r, const SpecialVocab& sv) {
    std::ostringstream os;
    for (int64_t i = 0; i < r.length(); ++i) {
        os << i << "\t";
        switch (r.roles[i]) {
            case Role::Context: os << "ctx"; break;
            case Role::Masked: os << "msk"; break;
            case Role::Special: os << "spc"; break;
        }
        os << "\t" << (r.span_index[i] < 0 ? "-" : std::to_string(r.span_index[i]));
        for (int64_t c = 0; c < r.grid.num_codebooks; ++c) os << "\t" << sv.token_name(r.grid.at(i, c));
        os << "\n";
    }
    return os.str();
}

} // namespace respeak
