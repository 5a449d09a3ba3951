#include <catch2/catch_amalgamated.hpp>

#include "respeak/seq_layout.hpp"

using namespace respeak;

namespace {

SpecialVocab toy_vocab(int64_t v = 16) {
    SpecialVocab sv;
    sv.codebook_size = v;
    sv.pmax = 3;
    return sv;
}

CodeGrid random_grid(int64_t t, int64_t k, int64_t v, Rng& rng) {
    CodeGrid g(t, k);
    for (auto& c : g.codes) c = static_cast<int32_t>(rng.uniform_int(v));
    return g;
}

// enumerate every SpanSet with at most max_spans spans over T frames
void enumerate_span_sets(int64_t frames, int64_t max_spans, std::vector<SpanSet>& out) {
    std::vector<Span> current;
    std::function<void(int64_t)> go = [&](int64_t next_start) {
        out.push_back(SpanSet{current});
        if (static_cast<int64_t>(current.size()) == max_spans) return;
        for (int64_t s = next_start; s < frames; ++s)
            for (int64_t e = s; e < frames; ++e) {
                current.push_back(Span{s, e});
                go(e + 2); // keep a 1-frame gap so spans stay non-adjacent
                current.pop_back();
            }
    };
    go(0);
}

} // namespace

TEST_CASE("special vocab ids are distinct and above the codec range") {
    SpecialVocab sv = toy_vocab(16);
    std::vector<int64_t> ids{sv.sos(), sv.eos(), sv.eog(), sv.mask_id(1), sv.mask_id(2), sv.mask_id(3), sv.delay_pad()};
    std::sort(ids.begin(), ids.end());
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    for (int64_t id : ids) CHECK(id >= sv.codebook_size);
    CHECK(sv.vocab_size() == 16 + 3 + 3 + 1);
}

TEST_CASE("rearrange matches the single-span worked layout") {
    // T=5, span over frames 1..2 (zero-indexed):
    // [sos] a1 [m1] a4 a5 [eos] [m1] a2 a3 [eog]
    SpecialVocab sv = toy_vocab(16);
    CodeGrid codes(5, 2);
    for (int64_t t = 0; t < 5; ++t)
        for (int64_t k = 0; k < 2; ++k) codes.at(t, k) = static_cast<int32_t>(t + 1);
    SpanSet spans{{Span{1, 2}}};

    RearrangedSeq r = rearrange(codes, spans, sv);
    REQUIRE(r.length() == 10);
    const std::vector<int64_t> expect{sv.sos(), 1, sv.mask_id(1), 4, 5, sv.eos(), sv.mask_id(1), 2, 3, sv.eog()};
    for (int64_t i = 0; i < 10; ++i)
        for (int64_t c = 0; c < 2; ++c) CHECK(r.grid.at(i, c) == expect[i]);
    const std::vector<Role> roles{Role::Special, Role::Context, Role::Special, Role::Context, Role::Context,
                                  Role::Special, Role::Special, Role::Masked,  Role::Masked,  Role::Special};
    for (int64_t i = 0; i < 10; ++i) CHECK(r.roles[i] == roles[i]);
    CHECK(r.context_len == 6);
}

TEST_CASE("rearrange handles a span starting at frame 0") {
    SpecialVocab sv = toy_vocab(16);
    CodeGrid codes(4, 1);
    for (int64_t t = 0; t < 4; ++t) codes.at(t, 0) = static_cast<int32_t>(t);
    RearrangedSeq r = rearrange(codes, SpanSet{{Span{0, 1}}}, sv);
    // C_0 empty: [sos] [m1] a3 a4 [eos] [m1] a1 a2 [eog]
    REQUIRE(r.length() == 9);
    CHECK(r.grid.at(0, 0) == sv.sos());
    CHECK(r.grid.at(1, 0) == sv.mask_id(1));
    CHECK(r.grid.at(2, 0) == 2);
    auto [codes2, spans2] = invert_rearrange(r, sv);
    CHECK(codes2 == codes);
    CHECK(spans2.spans.size() == 1);
}

TEST_CASE("rearrange rejects too many spans") {
    SpecialVocab sv = toy_vocab(16);
    Rng rng(7);
    CodeGrid codes = random_grid(20, 2, 16, rng);
    SpanSet four{{Span{0, 1}, Span{4, 5}, Span{8, 9}, Span{12, 13}}};
    CHECK_THROWS_AS(rearrange(codes, four, sv), std::invalid_argument);
}

TEST_CASE("layout length formula and bijection, exhaustive for T <= 8") {
    SpecialVocab sv = toy_vocab(8);
    Rng rng(11);
    int64_t checked = 0;
    for (int64_t t = 1; t <= 8; ++t) {
        std::vector<SpanSet> all;
        enumerate_span_sets(t, sv.pmax, all);
        CodeGrid codes = random_grid(t, 2, 8, rng);
        for (const auto& spans : all) {
            RearrangedSeq r = rearrange(codes, spans, sv);
            const int64_t p = static_cast<int64_t>(spans.size());
            REQUIRE(r.length() == t + 3 * p + 2);
            auto [codes2, spans2] = invert_rearrange(r, sv);
            REQUIRE(codes2 == codes);
            REQUIRE(spans2 == spans);
            ++checked;
        }
    }
    CHECK(checked >= 500); // every SpanSet with <= 3 non-adjacent spans, all T <= 8
}

TEST_CASE("single fully masked frame round-trips") {
    SpecialVocab sv = toy_vocab(8);
    CodeGrid codes(1, 3);
    codes.at(0, 0) = 5;
    codes.at(0, 1) = 2;
    codes.at(0, 2) = 7;
    RearrangedSeq r = rearrange(codes, SpanSet{{Span{0, 0}}}, sv);
    auto [codes2, spans2] = invert_rearrange(r, sv);
    CHECK(codes2 == codes);
    CHECK(spans2.spans[0] == Span{0, 0});
}

TEST_CASE("invert_rearrange rejects a truncated sequence") {
    SpecialVocab sv = toy_vocab(16);
    Rng rng(3);
    CodeGrid codes = random_grid(6, 2, 16, rng);
    RearrangedSeq r = rearrange(codes, SpanSet{{Span{2, 3}}}, sv);
    RearrangedSeq broken = r;
    broken.grid.rows -= 1; // drop the final [eog]
    broken.grid.tokens.resize(static_cast<size_t>(broken.grid.rows * broken.grid.num_codebooks));
    broken.roles.pop_back();
    broken.span_index.pop_back();
    CHECK_THROWS_AS(invert_rearrange(broken, sv), std::invalid_argument);
}

TEST_CASE("delay stack follows the staggered layout") {
    SpecialVocab sv = toy_vocab(16);
    SECTION("K=1 is the identity") {
        TokenGrid g(4, 1);
        for (int64_t t = 0; t < 4; ++t) g.at(t, 0) = static_cast<int32_t>(t);
        TokenGrid d = delay_stack(g, sv);
        CHECK(d == g);
        CHECK(delay_unstack(d, sv) == g);
    }
    SECTION("K=2 worked example") {
        // rows [(a,b),(c,d),(e,f)] -> [(a,PAD),(c,b),(e,d),(PAD,f)]
        TokenGrid g(3, 2);
        const int32_t a = 1, b = 2, c = 3, d = 4, e = 5, f = 6;
        g.at(0, 0) = a; g.at(0, 1) = b;
        g.at(1, 0) = c; g.at(1, 1) = d;
        g.at(2, 0) = e; g.at(2, 1) = f;
        TokenGrid out = delay_stack(g, sv);
        const int32_t pad = static_cast<int32_t>(sv.delay_pad());
        REQUIRE(out.rows == 4);
        CHECK(out.at(0, 0) == a); CHECK(out.at(0, 1) == pad);
        CHECK(out.at(1, 0) == c); CHECK(out.at(1, 1) == b);
        CHECK(out.at(2, 0) == e); CHECK(out.at(2, 1) == d);
        CHECK(out.at(3, 0) == pad); CHECK(out.at(3, 1) == f);
        CHECK(delay_unstack(out, sv) == g);
    }
}

TEST_CASE("delay stack/unstack round-trips for random grids") {
    SpecialVocab sv = toy_vocab(16);
    Rng rng(21);
    for (int64_t k = 1; k <= 4; ++k)
        for (int64_t rows = 1; rows <= 16; ++rows)
            for (int rep = 0; rep < 8; ++rep) {
                TokenGrid g(rows, k);
                for (auto& t : g.tokens) t = static_cast<int32_t>(rng.uniform_int(16));
                TokenGrid d = delay_stack(g, sv);
                REQUIRE(d.rows == rows + k - 1);
                REQUIRE(delay_unstack(d, sv) == g);
            }
}

TEST_CASE("delay_unstack rejects inconsistent pad patterns") {
    SpecialVocab sv = toy_vocab(16);
    TokenGrid g(3, 2);
    for (auto& t : g.tokens) t = 1;
    TokenGrid d = delay_stack(g, sv);
    SECTION("pad overwritten with a token") {
        d.at(0, 1) = 3;
        CHECK_THROWS_AS(delay_unstack(d, sv), std::invalid_argument);
    }
    SECTION("token overwritten with a pad") {
        d.at(1, 0) = static_cast<int32_t>(sv.delay_pad());
        CHECK_THROWS_AS(delay_unstack(d, sv), std::invalid_argument);
    }
}

TEST_CASE("loss mask marks masked content plus [eog] only") {
    SpecialVocab sv = toy_vocab(16);
    CodeGrid codes(5, 1);
    for (int64_t t = 0; t < 5; ++t) codes.at(t, 0) = static_cast<int32_t>(t + 1);
    RearrangedSeq r = rearrange(codes, SpanSet{{Span{1, 2}}}, sv);
    auto mask = loss_mask(r, sv);
    // layout: [sos] a1 [m1] a4 a5 [eos] [m1] a2 a3 [eog]
    const std::vector<uint8_t> expect{0, 0, 0, 0, 0, 0, 0, 1, 1, 1};
    CHECK(mask == expect);
}

TEST_CASE("loss mask is all false without spans") {
    SpecialVocab sv = toy_vocab(16);
    CodeGrid codes(6, 2);
    RearrangedSeq r = rearrange(codes, SpanSet{}, sv);
    auto mask = loss_mask(r, sv);
    for (uint8_t m : mask) CHECK(m == 0);
}

TEST_CASE("loss mask count equals total span length plus span count") {
    SpecialVocab sv = toy_vocab(16);
    Rng rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        const int64_t t = rng.uniform_int(10, 120);
        SpanSet spans = sample_spans(t, rng);
        CodeGrid codes = random_grid(t, 4, 16, rng);
        RearrangedSeq r = rearrange(codes, spans, sv);
        auto mask = loss_mask(r, sv);
        int64_t count = 0;
        for (uint8_t m : mask) count += m;
        CHECK(count == spans.total_length() + static_cast<int64_t>(spans.size()));
    }
}

TEST_CASE("sample_spans honors the 90% cap, disjointness and P distribution") {
    Rng rng(1234);
    const int64_t t = 100;
    int64_t p_counts[4] = {0, 0, 0, 0};
    bool touched_first = false, touched_last = false;
    for (int i = 0; i < 10000; ++i) {
        SpanSet s = sample_spans(t, rng);
        REQUIRE(s.total_length() <= 90);
        REQUIRE(!s.empty());
        s.validate(t); // throws if not sorted/disjoint/in range
        p_counts[s.size()]++;
        if (s.spans.front().start == 0) touched_first = true;
        if (s.spans.back().end == t - 1) touched_last = true;
    }
    for (int p = 1; p <= 3; ++p)
        CHECK(std::abs(p_counts[p] / 10000.0 - 1.0 / 3.0) < 0.03);
    CHECK(touched_first);
    CHECK(touched_last);
}

TEST_CASE("sample_spans rejects tiny inputs") {
    Rng rng(1);
    CHECK_THROWS_AS(sample_spans(9, rng), std::invalid_argument);
}

TEST_CASE("continuation span always ends at the last frame") {
    Rng rng(77);
    int present = 0;
    for (int i = 0; i < 10000; ++i) {
        SpanSet s = sample_continuation_span(100, rng);
        if (s.empty()) continue;
        ++present;
        REQUIRE(s.spans.size() == 1);
        REQUIRE(s.spans[0].end == 99);
        REQUIRE(s.spans[0].start >= 10);
    }
    CHECK(std::abs(present / 10000.0 - 0.5) < 0.02);

    // T=10 boundary still yields a valid span when present
    for (int i = 0; i < 50; ++i) {
        SpanSet s = sample_continuation_span(10, rng, 1.0);
        REQUIRE(s.spans.size() == 1);
        REQUIRE(s.spans[0].end == 9);
        REQUIRE(s.spans[0].start >= 1);
    }
}

TEST_CASE("delayed cell mask excludes pads and shifts with the channel") {
    std::vector<uint8_t> mask{0, 1, 1, 0};
    auto cells = delayed_cell_mask(mask, 3);
    REQUIRE(cells.size() == 6 * 3);
    auto at = [&](int64_t t, int64_t k) { return cells[t * 3 + k]; };
    for (int64_t t = 0; t < 6; ++t)
        for (int64_t k = 0; k < 3; ++k) {
            const int64_t src = t - k;
            const bool expect = src >= 0 && src < 4 && mask[src];
            CHECK(static_cast<bool>(at(t, k)) == expect);
        }
}

TEST_CASE("layout printer emits one line per position") {
    SpecialVocab sv = toy_vocab(16);
    CodeGrid codes(3, 2);
    codes.at(0, 0) = 4; codes.at(0, 1) = 5;
    codes.at(1, 0) = 6; codes.at(1, 1) = 7;
    codes.at(2, 0) = 8; codes.at(2, 1) = 9;
    RearrangedSeq r = rearrange(codes, SpanSet{{Span{1, 1}}}, sv);
    const std::string dump = print_layout(r, sv);
    const std::string expect =
        "0\tspc\t-\t[sos]\t[sos]\n"
        "1\tctx\t-\t4\t5\n"
        "2\tspc\t0\t[m1]\t[m1]\n"
        "3\tctx\t-\t8\t9\n"
        "4\tspc\t-\t[eos]\t[eos]\n"
        "5\tspc\t0\t[m1]\t[m1]\n"
        "6\tmsk\t0\t6\t7\n"
        "7\tspc\t0\t[eog]\t[eog]\n";
    CHECK(dump == expect);
}
