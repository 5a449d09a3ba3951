#include <catch2/catch_amalgamated.hpp>

#include "respeak/ar_model.hpp"

using namespace respeak;

namespace {

ARConfig tiny_ar(int64_t k = 2, int64_t v = 16, int64_t phoneme_vocab = 8) {
    ARConfig c;
    c.num_layers = 2;
    c.hidden = 32;
    c.num_heads = 2;
    c.num_codebooks = k;
    c.codebook_size = v;
    c.phoneme_vocab = phoneme_vocab;
    c.max_seq_len = 256;
    c.codebook_weights.assign(k, 1.0);
    c.codebook_weights[0] = 5.0;
    return c;
}

TokenGrid random_delayed_grid(const ARConfig& cfg, int64_t frames, Rng& rng) {
    const SpecialVocab sv = cfg.special_vocab();
    CodeGrid codes(frames, cfg.num_codebooks);
    for (auto& c : codes.codes) c = static_cast<int32_t>(rng.uniform_int(cfg.codebook_size));
    SpanSet spans = sample_spans(frames, rng, cfg.pmax);
    RearrangedSeq r = rearrange(codes, spans, sv);
    return delay_stack(r.grid, sv);
}

PhonemeSeq random_phonemes(const ARConfig& cfg, int64_t len, Rng& rng) {
    PhonemeSeq y(len);
    for (auto& id : y) id = static_cast<int32_t>(rng.uniform_int(cfg.phoneme_vocab));
    return y;
}

// the output layers are zero-initialized for training; perturbation probes
// need them non-degenerate
void randomize_heads(ARModel& m, Rng& rng) {
    for (auto& h : m.heads) nn::init_uniform_fanin(h.l2.w.value, rng, m.cfg.hidden);
}

} // namespace

TEST_CASE("forward output shape is rows x K x channel_vocab") {
    ARConfig cfg = tiny_ar();
    ARModel m(cfg, 1);
    Rng rng(2);
    TokenGrid grid = random_delayed_grid(cfg, 20, rng);
    PhonemeSeq y = random_phonemes(cfg, 7, rng);
    nn::Graph g;
    auto logits = m.forward_full(g, y, grid);
    REQUIRE(static_cast<int64_t>(logits.size()) == cfg.num_codebooks);
    for (auto& l : logits) {
        CHECK(g.val(l).rows() == grid.rows);
        CHECK(g.val(l).cols() == cfg.channel_vocab());
    }
}

TEST_CASE("forward rejects bad inputs") {
    ARConfig cfg = tiny_ar();
    ARModel m(cfg, 1);
    Rng rng(3);
    TokenGrid grid = random_delayed_grid(cfg, 16, rng);
    PhonemeSeq y = random_phonemes(cfg, 5, rng);

    SECTION("phoneme id out of vocabulary") {
        PhonemeSeq bad = y;
        bad[0] = static_cast<int32_t>(cfg.phoneme_vocab);
        nn::Graph g;
        CHECK_THROWS(m.forward_full(g, bad, grid));
    }
    SECTION("token id out of vocabulary") {
        TokenGrid bad = grid;
        bad.at(0, 0) = static_cast<int32_t>(cfg.channel_vocab());
        nn::Graph g;
        CHECK_THROWS(m.forward_full(g, y, bad));
    }
    SECTION("length overflow") {
        ARConfig small = cfg;
        small.max_seq_len = 8;
        ARModel ms(small, 1);
        nn::Graph g;
        CHECK_THROWS_WITH(ms.forward_full(g, y, grid), Catch::Matchers::ContainsSubstring("exceeds max"));
    }
}

TEST_CASE("causality: perturbing row t leaves logits at rows <= t unchanged") {
    ARConfig cfg = tiny_ar();
    ARModel m(cfg, 7);
    Rng rng(11);
    randomize_heads(m, rng);
    for (int rep = 0; rep < 5; ++rep) {
        TokenGrid grid = random_delayed_grid(cfg, 14, rng);
        PhonemeSeq y = random_phonemes(cfg, 6, rng);
        nn::Graph g0;
        auto base = m.forward_full(g0, y, grid);

        const int64_t t = rng.uniform_int(1, grid.rows - 2);
        TokenGrid perturbed = grid;
        perturbed.at(t, 0) = (perturbed.at(t, 0) + 1) % static_cast<int32_t>(cfg.codebook_size);
        nn::Graph g1;
        auto changed = m.forward_full(g1, y, perturbed);

        double max_before = 0.0, max_after = 0.0;
        for (int64_t c = 0; c < cfg.num_codebooks; ++c) {
            const nn::Tensor& a = g0.val(base[c]);
            const nn::Tensor& b = g1.val(changed[c]);
            for (int64_t r = 0; r < grid.rows; ++r)
                for (int64_t vcol = 0; vcol < cfg.channel_vocab(); ++vcol) {
                    const double d = std::abs(a.at(r, vcol) - b.at(r, vcol));
                    if (r <= t) max_before = std::max(max_before, d);
                    else max_after = std::max(max_after, d);
                }
        }
        REQUIRE(max_before <= 1e-6);
        REQUIRE(max_after > 1e-6); // the perturbation must actually matter downstream
    }
}

TEST_CASE("phoneme conditioning is global: any phoneme perturbs audio logits") {
    ARConfig cfg = tiny_ar();
    ARModel m(cfg, 9);
    Rng rng(13);
    randomize_heads(m, rng);
    TokenGrid grid = random_delayed_grid(cfg, 14, rng);
    PhonemeSeq y = random_phonemes(cfg, 6, rng);
    nn::Graph g0;
    auto base = m.forward_full(g0, y, grid);
    for (size_t i = 0; i < y.size(); ++i) {
        PhonemeSeq y2 = y;
        y2[i] = static_cast<int32_t>((y2[i] + 1) % cfg.phoneme_vocab);
        nn::Graph g1;
        auto changed = m.forward_full(g1, y2, grid);
        double max_d = 0.0;
        const nn::Tensor& a = g0.val(base[0]);
        const nn::Tensor& b = g1.val(changed[0]);
        for (int64_t r = 0; r < grid.rows; ++r)
            for (int64_t vcol = 0; vcol < cfg.channel_vocab(); ++vcol)
                max_d = std::max(max_d, static_cast<double>(std::abs(a.at(r, vcol) - b.at(r, vcol))));
        REQUIRE(max_d > 1e-6);
    }
}

TEST_CASE("loss gradient is exactly zero outside the mask") {
    ARConfig cfg = tiny_ar();
    ARModel m(cfg, 21);
    Rng rng(17);
    const SpecialVocab sv = cfg.special_vocab();
    CodeGrid codes(16, cfg.num_codebooks);
    for (auto& c : codes.codes) c = static_cast<int32_t>(rng.uniform_int(cfg.codebook_size));
    SpanSet spans = sample_spans(16, rng, cfg.pmax);
    RearrangedSeq r = rearrange(codes, spans, sv);
    TokenGrid delayed = delay_stack(r.grid, sv);
    auto cell_mask = delayed_cell_mask(loss_mask(r, sv), cfg.num_codebooks);

    nn::Graph g;
    auto logits = m.forward_full(g, random_phonemes(cfg, 5, rng), delayed);
    nn::Value loss = weighted_nll_loss(g, logits, delayed, cell_mask, cfg.codebook_weights);
    g.backward(loss);
    for (int64_t c = 0; c < cfg.num_codebooks; ++c) {
        const nn::Tensor& grad = g.grad_of(logits[c]);
        for (int64_t row = 0; row < delayed.rows; ++row) {
            if (cell_mask[row * cfg.num_codebooks + c]) continue;
            for (int64_t vcol = 0; vcol < cfg.channel_vocab(); ++vcol) REQUIRE(grad.at(row, vcol) == 0.0f);
        }
    }
}

TEST_CASE("weighted loss properties") {
    ARConfig cfg = tiny_ar();
    ARModel m(cfg, 23);
    Rng rng(19);
    const SpecialVocab sv = cfg.special_vocab();
    CodeGrid codes(14, cfg.num_codebooks);
    for (auto& c : codes.codes) c = static_cast<int32_t>(rng.uniform_int(cfg.codebook_size));
    SpanSet spans = sample_spans(14, rng, cfg.pmax);
    RearrangedSeq r = rearrange(codes, spans, sv);
    TokenGrid delayed = delay_stack(r.grid, sv);
    auto cell_mask = delayed_cell_mask(loss_mask(r, sv), cfg.num_codebooks);
    PhonemeSeq y = random_phonemes(cfg, 6, rng);

    SECTION("equal weights reduce to the unweighted mean NLL") {
        nn::Graph g;
        auto logits = m.forward_full(g, y, delayed);
        nn::Value loss = weighted_nll_loss(g, logits, delayed, cell_mask, {1.0, 1.0});
        // independent double-precision computation
        double total = 0.0;
        int64_t count = 0;
        for (int64_t c = 0; c < cfg.num_codebooks; ++c) {
            const nn::Tensor& lg = g.val(logits[c]);
            for (int64_t row = 0; row < delayed.rows; ++row) {
                if (!cell_mask[row * cfg.num_codebooks + c]) continue;
                double mx = -1e30;
                for (int64_t vcol = 0; vcol < lg.cols(); ++vcol) mx = std::max(mx, static_cast<double>(lg.at(row, vcol)));
                double z = 0.0;
                for (int64_t vcol = 0; vcol < lg.cols(); ++vcol) z += std::exp(lg.at(row, vcol) - mx);
                total += std::log(z) - (lg.at(row, delayed.at(row, c)) - mx);
                ++count;
            }
        }
        CHECK(g.val(loss)[0] == Catch::Approx(total / count).epsilon(1e-5));
    }
    SECTION("mask selecting nothing is an error") {
        nn::Graph g;
        auto logits = m.forward_full(g, y, delayed);
        std::vector<uint8_t> empty_mask(cell_mask.size(), 0);
        CHECK_THROWS_WITH(weighted_nll_loss(g, logits, delayed, empty_mask, {5.0, 1.0}),
                          Catch::Matchers::ContainsSubstring("nothing to train on"));
    }
    SECTION("freshly initialized model starts at ln(vocab)") {
        nn::Graph g;
        auto logits = m.forward_full(g, y, delayed);
        nn::Value loss = weighted_nll_loss(g, logits, delayed, cell_mask, cfg.codebook_weights);
        const double expect = std::log(static_cast<double>(cfg.channel_vocab()));
        CHECK(g.val(loss)[0] == Catch::Approx(expect).epsilon(0.05));
    }
}

TEST_CASE("incremental decoding matches the full forward pass") {
    ARConfig cfg = tiny_ar();
    ARModel m(cfg, 31);
    Rng rng(23);
    randomize_heads(m, rng);
    TokenGrid grid = random_delayed_grid(cfg, 18, rng);
    PhonemeSeq y = random_phonemes(cfg, 7, rng);
    const int64_t l_ph = static_cast<int64_t>(y.size());

    nn::Graph g;
    auto full = m.forward_full(g, y, grid);

    auto check_against_full = [&](ARDecoderState& state, const std::vector<ar_detail::RowMat>& hidden,
                                  int64_t row_offset, int64_t rows) {
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t audio_row = row_offset + r; // logits index in the full pass
            if (audio_row < 0 || audio_row >= grid.rows) continue;
            auto logits = state.head_logits(hidden[0], r);
            for (int64_t c = 0; c < cfg.num_codebooks; ++c)
                for (int64_t vcol = 0; vcol < cfg.channel_vocab(); ++vcol) {
                    const float a = g.val(full[c]).at(audio_row, vcol);
                    const float b = logits[c][vcol];
                    REQUIRE(std::abs(a - b) < 1e-4f);
                }
        }
    };

    SECTION("chunked prefill then one row at a time") {
        ARDecoderState state(m, 1);
        ar_detail::RowMat emb(l_ph + 3, cfg.hidden);
        for (int64_t i = 0; i < l_ph; ++i) {
            auto e = state.phoneme_row(y[i], i);
            for (int64_t j = 0; j < cfg.hidden; ++j) emb(i, j) = e[j];
        }
        for (int64_t r = 0; r < 3; ++r) {
            std::vector<int32_t> toks(cfg.num_codebooks);
            for (int64_t c = 0; c < cfg.num_codebooks; ++c) toks[c] = grid.at(r, c);
            auto e = state.audio_row(toks.data(), l_ph + r);
            for (int64_t j = 0; j < cfg.hidden; ++j) emb(l_ph + r, j) = e[j];
        }
        auto hidden = state.feed({emb});
        // hidden row l_ph-1+i predicts audio row i
        ar_detail::RowMat tail = hidden[0].bottomRows(4); // rows l_ph-1 .. l_ph+2 -> audio rows 0..3
        std::vector<ar_detail::RowMat> tail_v{tail};
        check_against_full(state, tail_v, 0, 4);

        for (int64_t r = 3; r < grid.rows; ++r) {
            std::vector<int32_t> toks(cfg.num_codebooks);
            for (int64_t c = 0; c < cfg.num_codebooks; ++c) toks[c] = grid.at(r, c);
            auto e = state.audio_row(toks.data(), l_ph + r);
            ar_detail::RowMat one(1, cfg.hidden);
            for (int64_t j = 0; j < cfg.hidden; ++j) one(0, j) = e[j];
            auto h = state.feed({one});
            check_against_full(state, h, r + 1, 1); // this row's hidden predicts row r+1
        }
    }

    SECTION("two identical batch lanes stay identical") {
        ARDecoderState state(m, 2);
        ar_detail::RowMat emb(l_ph, cfg.hidden);
        for (int64_t i = 0; i < l_ph; ++i) {
            auto e = state.phoneme_row(y[i], i);
            for (int64_t j = 0; j < cfg.hidden; ++j) emb(i, j) = e[j];
        }
        auto h = state.feed({emb, emb});
        REQUIRE(h[0] == h[1]);
    }
}

TEST_CASE("training on a tiny token corpus", "[train]") {
    ARConfig cfg = tiny_ar();
    Rng rng(41);
    // deterministic repetitive token patterns standing in for codec output
    std::vector<ARTrainItem> corpus;
    for (int u = 0; u < 4; ++u) {
        ARTrainItem item;
        item.codes = CodeGrid(24, cfg.num_codebooks);
        for (int64_t t = 0; t < 24; ++t)
            for (int64_t c = 0; c < cfg.num_codebooks; ++c)
                item.codes.at(t, c) = static_cast<int32_t>((u * 3 + t + 2 * c) % cfg.codebook_size);
        item.phonemes = random_phonemes(cfg, 6, rng);
        corpus.push_back(item);
    }

    ARTrainHyper hyper;
    hyper.steps = 60;
    hyper.warmup_steps = 10;
    TrainedAR trained = train_ar(corpus, cfg, hyper, 3);
    REQUIRE(trained.metrics.size() == 60);

    SECTION("loss decreases and starts near ln(vocab)") {
        const double first = trained.metrics[0].at("loss").get<double>();
        double last = 0.0;
        for (int i = 0; i < 5; ++i) last += trained.metrics[55 + i].at("loss").get<double>() / 5.0;
        CHECK(first == Catch::Approx(std::log(static_cast<double>(cfg.channel_vocab()))).epsilon(0.05));
        CHECK(last < first);
    }
    SECTION("metrics carry step, loss, lr, seconds") {
        for (const char* key : {"step", "loss", "lr", "seconds"}) CHECK(trained.metrics[0].contains(key));
    }
    SECTION("fixed seed reproduces the loss curve") {
        ARTrainHyper h2 = hyper;
        h2.steps = 10;
        TrainedAR a = train_ar(corpus, cfg, h2, 5);
        TrainedAR b = train_ar(corpus, cfg, h2, 5);
        for (size_t i = 0; i < a.metrics.size(); ++i)
            REQUIRE(a.metrics[i].at("loss").get<double>() == b.metrics[i].at("loss").get<double>());
    }
    SECTION("empty corpus rejected") { CHECK_THROWS(train_ar({}, cfg, hyper, 1)); }
    SECTION("teacher forcing accuracy bounds and untrained baseline") {
        auto acc = teacher_forcing_accuracy(trained.model, corpus, 7);
        REQUIRE(static_cast<int64_t>(acc.size()) == cfg.num_codebooks);
        for (double a : acc) {
            CHECK(a >= 0.0);
            CHECK(a <= 1.0);
        }
        ARModel fresh(cfg, 999);
        auto base = teacher_forcing_accuracy(fresh, corpus, 7);
        // untrained model sits near chance level
        for (double a : base) CHECK(a < 0.2);
    }
    SECTION("checkpoint round-trip") {
        Lexicon lex;
        lex.entries["ab"] = {"a", "b"};
        PhonemeVocab vocab = PhonemeVocab::build(lex);
        ARConfig cfg_v = cfg;
        cfg_v.phoneme_vocab = vocab.size();
        TrainedAR t2 = train_ar(corpus, cfg_v, ARTrainHyper{.steps = 5}, 3);
        const std::string dir = "/tmp/respeak_ar_ckpt_" + std::to_string(::getpid());
        t2.model.save(dir, vocab);
        auto [loaded, vocab2] = ARModel::load(dir);
        CHECK(vocab2.symbols == vocab.symbols);
        nn::Graph g1, g2;
        auto l1 = t2.model.forward_full(g1, corpus[0].phonemes, delay_stack(
            rearrange(corpus[0].codes, SpanSet{{Span{3, 6}}}, cfg.special_vocab()).grid, cfg.special_vocab()));
        auto l2 = loaded.forward_full(g2, corpus[0].phonemes, delay_stack(
            rearrange(corpus[0].codes, SpanSet{{Span{3, 6}}}, cfg.special_vocab()).grid, cfg.special_vocab()));
        REQUIRE(g1.val(l1[0]).data == g2.val(l2[0]).data);
    }
}
