#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "respeak/checkpoint.hpp"
#include "respeak/nn.hpp"
#include "respeak/phoneme.hpp"
#include "respeak/seq_layout.hpp"

namespace respeak {

struct ARConfig {
    int64_t num_layers = 2;  // paper scale: 16
    int64_t hidden = 128;    // paper scale: 2048
    int64_t num_heads = 2;   // paper scale: 12
    int64_t num_codebooks = 4;
    int64_t codebook_size = 256; // V, must match the codec
    int64_t pmax = 3;
    int64_t phoneme_vocab = 0;
    int64_t max_seq_len = 512;
    std::vector<double> codebook_weights = {5.0, 1.0, 0.5, 0.1};

    int64_t channel_vocab() const { return codebook_size + 3 + pmax + 1; }
    int64_t head_dim() const { return hidden / num_heads; }

    SpecialVocab special_vocab() const {
        SpecialVocab sv;
        sv.codebook_size = codebook_size;
        sv.pmax = pmax;
        return sv;
    }

    void validate() const {
        if (hidden % num_heads != 0) throw std::invalid_argument("ARConfig: hidden must be divisible by num_heads");
        if (static_cast<int64_t>(codebook_weights.size()) != num_codebooks)
            throw std::invalid_argument("ARConfig: need one loss weight per codebook");
        if (phoneme_vocab < 2) throw std::invalid_argument("ARConfig: phoneme vocabulary not set");
    }

    json to_json() const {
        return json{{"num_layers", num_layers},   {"hidden", hidden},
                    {"num_heads", num_heads},     {"num_codebooks", num_codebooks},
                    {"codebook_size", codebook_size}, {"pmax", pmax},
                    {"phoneme_vocab", phoneme_vocab}, {"max_seq_len", max_seq_len},
                    {"codebook_weights", codebook_weights}};
    }
    static ARConfig from_json(const json& j) {
        ARConfig c;
        c.num_layers = j.at("num_layers").get<int64_t>();
        c.hidden = j.at("hidden").get<int64_t>();
        c.num_heads = j.at("num_heads").get<int64_t>();
        c.num_codebooks = j.at("num_codebooks").get<int64_t>();
        c.codebook_size = j.at("codebook_size").get<int64_t>();
        c.pmax = j.at("pmax").get<int64_t>();
        c.phoneme_vocab = j.at("phoneme_vocab").get<int64_t>();
        c.max_seq_len = j.at("max_seq_len").get<int64_t>();
        c.codebook_weights = j.at("codebook_weights").get<std::vector<double>>();
        c.validate();
        return c;
    }
};

// Causal decoder over [phonemes | delay-stacked audio rows]. Channel
// embeddings are summed per audio row; K separate 2-layer MLP heads emit one
// logit set per codebook. logits[r] is the prediction FOR delayed row r,
// computed from the phonemes and rows < r.
class ARModel {
public:
    ARConfig cfg;
    nn::EmbeddingTable phoneme_emb, pos_emb;
    std::vector<nn::EmbeddingTable> token_emb; // per codebook channel

    struct Layer {
        nn::LayerNorm ln1, ln2;
        nn::Linear wq, wk, wv, wo, ff1, ff2;
    };
    std::vector<Layer> layers;
    nn::LayerNorm ln_f;

    struct Head {
        nn::Linear l1, l2;
    };
    std::vector<Head> heads;

    ARModel() = default;
    ARModel(const ARConfig& c, uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng(seed);
        const int64_t h = cfg.hidden;
        phoneme_emb = nn::EmbeddingTable("emb.ph", cfg.phoneme_vocab, h, rng);
        pos_emb = nn::EmbeddingTable("emb.pos", cfg.max_seq_len, h, rng);
        for (int64_t k = 0; k < cfg.num_codebooks; ++k)
            token_emb.emplace_back("emb.tok" + std::to_string(k), cfg.channel_vocab(), h, rng);
        for (int64_t l = 0; l < cfg.num_layers; ++l) {
            const std::string p = "layer" + std::to_string(l);
            layers.push_back(Layer{nn::LayerNorm(p + ".ln1", h), nn::LayerNorm(p + ".ln2", h),
                                   nn::Linear(p + ".wq", h, h, rng), nn::Linear(p + ".wk", h, h, rng),
                                   nn::Linear(p + ".wv", h, h, rng), nn::Linear(p + ".wo", h, h, rng),
                                   nn::Linear(p + ".ff1", h, 4 * h, rng), nn::Linear(p + ".ff2", 4 * h, h, rng)});
        }
        ln_f = nn::LayerNorm("ln_f", h);
        for (int64_t k = 0; k < cfg.num_codebooks; ++k) {
            const std::string p = "head" + std::to_string(k);
            // zero-initialized output layer: uniform logits at step 0
            heads.push_back(Head{nn::Linear(p + ".l1", h, h, rng), nn::Linear(p + ".l2", h, cfg.channel_vocab(), rng,
                                                                               /*zero_init=*/true)});
        }
    }

    // ---- training-path forward (tape based) ----

    // returns one logits Value per channel, each [grid.rows x channel_vocab]
    std::vector<nn::Value> forward_full(nn::Graph& g, const PhonemeSeq& phonemes, const TokenGrid& grid) {
        const int64_t l_ph = static_cast<int64_t>(phonemes.size());
        const int64_t rows = grid.rows;
        if (l_ph < 1) throw std::invalid_argument("forward: empty phoneme sequence");
        if (grid.num_codebooks != cfg.num_codebooks) throw std::invalid_argument("forward: channel count mismatch");
        const int64_t s = l_ph + rows;
        if (s > cfg.max_seq_len)
            throw std::invalid_argument("forward: sequence length " + std::to_string(s) + " exceeds max " +
                                        std::to_string(cfg.max_seq_len));
        for (int32_t id : phonemes)
            if (id < 0 || id >= cfg.phoneme_vocab) throw std::out_of_range("forward: phoneme id out of vocabulary");

        nn::Value ph = phoneme_emb.apply(g, phonemes);
        nn::Value audio;
        {
            std::vector<nn::Value> per_channel;
            for (int64_t k = 0; k < cfg.num_codebooks; ++k) {
                std::vector<int32_t> ids(static_cast<size_t>(rows));
                for (int64_t t = 0; t < rows; ++t) ids[t] = grid.at(t, k);
                per_channel.push_back(token_emb[k].apply(g, ids));
            }
            audio = per_channel[0];
            for (size_t k = 1; k < per_channel.size(); ++k) audio = nn::add(audio, per_channel[k]);
        }
        std::vector<int32_t> positions(static_cast<size_t>(s));
        for (int64_t i = 0; i < s; ++i) positions[i] = static_cast<int32_t>(i);
        nn::Value x = nn::add(nn::concat_rows({ph, audio}), pos_emb.apply(g, positions));

        for (auto& layer : layers) x = apply_layer(g, layer, x);
        x = ln_f.apply(g, x);

        // hidden states that predict audio rows 0..rows-1 live at positions l_ph-1 .. s-2
        nn::Value h = nn::slice_rows(x, l_ph - 1, s - 1);
        std::vector<nn::Value> logits;
        for (auto& head : heads) logits.push_back(head.l2.apply(g, nn::gelu(head.l1.apply(g, h))));
        return logits;
    }

    nn::Value apply_layer(nn::Graph& g, Layer& layer, nn::Value x) {
        const int64_t dh = cfg.head_dim();
        nn::Value h = layer.ln1.apply(g, x);
        nn::Value q = layer.wq.apply(g, h);
        nn::Value k = layer.wk.apply(g, h);
        nn::Value v = layer.wv.apply(g, h);
        std::vector<nn::Value> heads_out;
        for (int64_t i = 0; i < cfg.num_heads; ++i) {
            nn::Value qi = nn::slice_cols(q, i * dh, (i + 1) * dh);
            nn::Value ki = nn::slice_cols(k, i * dh, (i + 1) * dh);
            nn::Value vi = nn::slice_cols(v, i * dh, (i + 1) * dh);
            nn::Value scores = nn::scale(nn::matmul(qi, ki, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
            nn::Value attn = nn::causal_softmax(scores, 0);
            heads_out.push_back(nn::matmul(attn, vi));
        }
        x = nn::add(x, layer.wo.apply(g, nn::concat_cols(heads_out)));
        nn::Value f = layer.ln2.apply(g, x);
        return nn::add(x, layer.ff2.apply(g, nn::gelu(layer.ff1.apply(g, f))));
    }

    // ---- parameter plumbing ----

    std::vector<nn::Param*> trainable_params() {
        std::vector<nn::Param*> ps;
        phoneme_emb.collect(ps);
        pos_emb.collect(ps);
        for (auto& e : token_emb) e.collect(ps);
        for (auto& l : layers) {
            l.ln1.collect(ps);
            l.ln2.collect(ps);
            l.wq.collect(ps);
            l.wk.collect(ps);
            l.wv.collect(ps);
            l.wo.collect(ps);
            l.ff1.collect(ps);
            l.ff2.collect(ps);
        }
        ln_f.collect(ps);
        for (auto& h : heads) {
            h.l1.collect(ps);
            h.l2.collect(ps);
        }
        return ps;
    }

    std::map<std::string, nn::Tensor> named_tensors() {
        std::map<std::string, nn::Tensor> out;
        for (nn::Param* p : trainable_params()) out[p->name] = p->value;
        return out;
    }

    void load_tensors(const std::map<std::string, nn::Tensor>& t) {
        for (nn::Param* p : trainable_params()) {
            auto it = t.find(p->name);
            if (it == t.end()) throw std::runtime_error("ar: checkpoint missing tensor " + p->name);
            if (it->second.shape != p->value.shape)
                throw std::runtime_error("ar: checkpoint shape mismatch for " + p->name);
            p->value = it->second;
        }
    }

    void save(const std::string& dir, const PhonemeVocab& vocab) {
        save_checkpoint(dir, "ar", json{{"ar", cfg.to_json()}, {"phoneme_vocab", vocab.to_json()}}, named_tensors());
    }

    static std::pair<ARModel, PhonemeVocab> load(const std::string& dir) {
        Checkpoint ck = load_checkpoint(dir, "ar");
        ARModel m(ARConfig::from_json(ck.config.at("ar")), 0);
        m.load_tensors(ck.tensors);
        return {std::move(m), PhonemeVocab::from_json(ck.config.at("phoneme_vocab"))};
    }
};

// ---------------------------------------------------------------------------
// Eq. 2: weighted NLL over masked cells only
// ---------------------------------------------------------------------------

// logits: one Value per channel [rows x vocab]; targets: the delayed grid;
// cell_mask: delayed_cell_mask(loss_mask(...), K). Delay pads are never
// masked in. Normalized by the total weight over masked cells.
inline nn::Value weighted_nll_loss(nn::Graph& g, const std::vector<nn::Value>& logits, const TokenGrid& targets,
                                   const std::vector<uint8_t>& cell_mask, const std::vector<double>& weights) {
    const int64_t k = targets.num_codebooks;
    if (static_cast<int64_t>(logits.size()) != k || static_cast<int64_t>(weights.size()) != k)
        throw std::invalid_argument("weighted_nll_loss: need one logits set and weight per channel");
    if (static_cast<int64_t>(cell_mask.size()) != targets.rows * k)
        throw std::invalid_argument("weighted_nll_loss: cell mask size mismatch");

    double denom = 0.0;
    nn::Value total;
    for (int64_t c = 0; c < k; ++c) {
        std::vector<int32_t> t(static_cast<size_t>(targets.rows));
        std::vector<uint8_t> m(static_cast<size_t>(targets.rows));
        int64_t count = 0;
        for (int64_t r = 0; r < targets.rows; ++r) {
            t[r] = targets.at(r, c);
            m[r] = cell_mask[r * k + c];
            count += m[r];
        }
        denom += weights[c] * static_cast<double>(count);
        nn::Value nll = nn::scale(nn::masked_nll_sum(logits[c], t, m), weights[c]);
        total = (c == 0) ? nll : nn::add(total, nll);
    }
    if (denom <= 0.0) throw std::invalid_argument("weighted_nll_loss: mask selects nothing to train on");
    return nn::scale(total, 1.0 / denom);
}

// ---------------------------------------------------------------------------
// incremental decoding with a KV cache (plain Eigen, no tape)
// ---------------------------------------------------------------------------

namespace ar_detail {

using nn::RowMat;

inline RowMat linear(const RowMat& x, const nn::Param& w, const nn::Param& b) {
    RowMat y = x * nn::as_mat(w.value);
    for (Eigen::Index r = 0; r < y.rows(); ++r)
        for (Eigen::Index c = 0; c < y.cols(); ++c) y(r, c) += b.value[c];
    return y;
}

inline RowMat layer_norm(const RowMat& x, const nn::Param& gamma, const nn::Param& beta, float eps = 1e-5f) {
    RowMat y(x.rows(), x.cols());
    const auto n = static_cast<float>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float mean = x.row(r).mean();
        float var = 0.0f;
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            const float d = x(r, c) - mean;
            var += d * d;
        }
        var /= n;
        const float inv = 1.0f / std::sqrt(var + eps);
        for (Eigen::Index c = 0; c < x.cols(); ++c)
            y(r, c) = (x(r, c) - mean) * inv * gamma.value[c] + beta.value[c];
    }
    return y;
}

inline void gelu_inplace(RowMat& x) {
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const float v = x.data()[i];
        x.data()[i] = 0.5f * v * (1.0f + std::erf(v * 0.70710678f));
    }
}

} // namespace ar_detail

// Batched incremental decoder; all batch elements share position indices, so
// the conditional and unconditional streams evaluate in one pass per step.
class ARDecoderState {
public:
    ARDecoderState(ARModel& model, int64_t batch) : m_(&model), batch_(batch) {
        k_cache_.resize(model.cfg.num_layers);
        v_cache_.resize(model.cfg.num_layers);
        for (int64_t l = 0; l < model.cfg.num_layers; ++l) {
            k_cache_[l].assign(batch, ar_detail::RowMat(0, model.cfg.hidden));
            v_cache_[l].assign(batch, ar_detail::RowMat(0, model.cfg.hidden));
        }
    }

    int64_t length() const { return seq_len_; }
    int64_t batch() const { return batch_; }

    // embedding row for one phoneme at the given absolute position
    std::vector<float> phoneme_row(int32_t id, int64_t pos) const {
        std::vector<float> e(static_cast<size_t>(m_->cfg.hidden));
        const nn::Tensor& tab = m_->phoneme_emb.table.value;
        const nn::Tensor& pt = m_->pos_emb.table.value;
        for (int64_t j = 0; j < m_->cfg.hidden; ++j) e[j] = tab.at(id, j) + pt.at(pos, j);
        return e;
    }

    // summed channel embeddings for one delayed audio row
    std::vector<float> audio_row(const int32_t* tokens, int64_t pos) const {
        std::vector<float> e(static_cast<size_t>(m_->cfg.hidden), 0.0f);
        const nn::Tensor& pt = m_->pos_emb.table.value;
        for (int64_t k = 0; k < m_->cfg.num_codebooks; ++k) {
            const nn::Tensor& tab = m_->token_emb[k].table.value;
            for (int64_t j = 0; j < m_->cfg.hidden; ++j) e[j] += tab.at(tokens[k], j);
        }
        for (int64_t j = 0; j < m_->cfg.hidden; ++j) e[j] += pt.at(pos, j);
        return e;
    }

    // Feed n new positions (same content layout per batch element); emb[b] is
    // [n x hidden]. Returns the final hidden rows [n x hidden] per batch.
    std::vector<ar_detail::RowMat> feed(const std::vector<ar_detail::RowMat>& emb) {
        using ar_detail::RowMat;
        if (static_cast<int64_t>(emb.size()) != batch_) throw std::invalid_argument("decoder: batch mismatch");
        const int64_t n = emb[0].rows();
        const int64_t h = m_->cfg.hidden;
        const int64_t dh = m_->cfg.head_dim();
        if (seq_len_ + n > m_->cfg.max_seq_len)
            throw std::invalid_argument("decoder: sequence length would exceed max_seq_len");
        std::vector<RowMat> x(emb);
        for (int64_t l = 0; l < m_->cfg.num_layers; ++l) {
            ARModel::Layer& layer = m_->layers[l];
            for (int64_t b = 0; b < batch_; ++b) {
                RowMat hn = ar_detail::layer_norm(x[b], layer.ln1.gamma, layer.ln1.beta);
                RowMat q = ar_detail::linear(hn, layer.wq.w, layer.wq.b);
                RowMat k = ar_detail::linear(hn, layer.wk.w, layer.wk.b);
                RowMat v = ar_detail::linear(hn, layer.wv.w, layer.wv.b);
                RowMat& kc = k_cache_[l][b];
                RowMat& vc = v_cache_[l][b];
                const int64_t old = kc.rows();
                kc.conservativeResize(old + n, h);
                vc.conservativeResize(old + n, h);
                kc.bottomRows(n) = k;
                vc.bottomRows(n) = v;

                RowMat attn_out(n, h);
                for (int64_t head = 0; head < m_->cfg.num_heads; ++head) {
                    auto qh = q.middleCols(head * dh, dh);
                    auto kh = kc.middleCols(head * dh, dh);
                    auto vh = vc.middleCols(head * dh, dh);
                    RowMat scores = qh * kh.transpose() / std::sqrt(static_cast<float>(dh));
                    // query row i sits at absolute position old + i
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t hi = old + i; // inclusive causal horizon
                        float mx = -std::numeric_limits<float>::infinity();
                        for (int64_t j = 0; j <= hi; ++j) mx = std::max(mx, scores(i, j));
                        float z = 0.0f;
                        for (int64_t j = 0; j <= hi; ++j) {
                            scores(i, j) = std::exp(scores(i, j) - mx);
                            z += scores(i, j);
                        }
                        for (int64_t j = 0; j <= hi; ++j) scores(i, j) /= z;
                        for (int64_t j = hi + 1; j < scores.cols(); ++j) scores(i, j) = 0.0f;
                    }
                    attn_out.middleCols(head * dh, dh) = scores * vh;
                }
                x[b] += ar_detail::linear(attn_out, layer.wo.w, layer.wo.b);
                RowMat f = ar_detail::layer_norm(x[b], layer.ln2.gamma, layer.ln2.beta);
                RowMat f1 = ar_detail::linear(f, layer.ff1.w, layer.ff1.b);
                ar_detail::gelu_inplace(f1);
                x[b] += ar_detail::linear(f1, layer.ff2.w, layer.ff2.b);
            }
        }
        for (int64_t b = 0; b < batch_; ++b) x[b] = ar_detail::layer_norm(x[b], m_->ln_f.gamma, m_->ln_f.beta);
        seq_len_ += n;
        return x;
    }

    // channel logits from one final hidden row
    std::vector<std::vector<float>> head_logits(const ar_detail::RowMat& hidden, int64_t row) const {
        std::vector<std::vector<float>> out;
        ar_detail::RowMat h1 = hidden.row(row);
        for (const auto& head : m_->heads) {
            ar_detail::RowMat a = ar_detail::linear(h1, head.l1.w, head.l1.b);
            ar_detail::gelu_inplace(a);
            ar_detail::RowMat lg = ar_detail::linear(a, head.l2.w, head.l2.b);
            out.emplace_back(lg.data(), lg.data() + lg.size());
        }
        return out;
    }

private:
    ARModel* m_;
    int64_t batch_;
    int64_t seq_len_ = 0;
    std::vector<std::vector<ar_detail::RowMat>> k_cache_, v_cache_;
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct ARTrainItem {
    CodeGrid codes;
    PhonemeSeq phonemes;
};

struct ARTrainHyper {
    int64_t steps = 2000;
    double lr = 1e-3;
    int64_t warmup_steps = 50;
    double continuation_prob = 0.5;

    json to_json() const {
        return json{{"steps", steps}, {"lr", lr}, {"warmup_steps", warmup_steps},
                    {"continuation_prob", continuation_prob}};
    }
};

struct TrainedAR {
    ARModel model;
    std::vector<json> metrics;
};

inline TrainedAR train_ar(const std::vector<ARTrainItem>& corpus, const ARConfig& cfg, const ARTrainHyper& hyper,
                          uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("train_ar: empty corpus");
    for (const auto& item : corpus) {
        if (item.codes.frames < 10) throw std::invalid_argument("train_ar: utterance shorter than 10 frames");
        if (item.phonemes.empty()) throw std::invalid_argument("train_ar: utterance without phonemes");
    }
    TrainedAR out{ARModel(cfg, seed), {}};
    ARModel& model = out.model;
    const SpecialVocab sv = cfg.special_vocab();
    Rng rng(seed ^ 0xa11ce0de5eedull);
    nn::AdamW opt(model.trainable_params());

    const auto t_start = std::chrono::steady_clock::now();
    for (int64_t step = 0; step < hyper.steps; ++step) {
        const auto& item = corpus[rng.uniform_int(static_cast<int64_t>(corpus.size()))];
        // speech-continuation masking with probability 0.5, otherwise random spans
        SpanSet spans = sample_continuation_span(item.codes.frames, rng, hyper.continuation_prob);
        if (spans.empty()) spans = sample_spans(item.codes.frames, rng, cfg.pmax);

        RearrangedSeq r = rearrange(item.codes, spans, sv);
        TokenGrid delayed = delay_stack(r.grid, sv);
        auto cell_mask = delayed_cell_mask(loss_mask(r, sv), cfg.num_codebooks);

        nn::Graph g;
        auto logits = model.forward_full(g, item.phonemes, delayed);
        nn::Value loss = weighted_nll_loss(g, logits, delayed, cell_mask, cfg.codebook_weights);
        const double loss_v = g.val(loss)[0];
        if (!std::isfinite(loss_v)) throw std::runtime_error("train_ar: non-finite loss at step " + std::to_string(step));

        opt.zero_grad();
        g.backward(loss);
        const double lr = nn::warmup_cosine_lr(step, hyper.steps, hyper.warmup_steps, hyper.lr, hyper.lr * 0.05);
        opt.step(lr);

        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        out.metrics.push_back(json{{"step", step}, {"loss", loss_v}, {"lr", lr}, {"seconds", secs}});
    }
    return out;
}

// Masked-position top-1 accuracy per channel under teacher forcing, with
// seeded span sampling per utterance.
inline std::vector<double> teacher_forcing_accuracy(ARModel& model, const std::vector<ARTrainItem>& corpus,
                                                    uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("teacher_forcing_accuracy: empty corpus");
    const SpecialVocab sv = model.cfg.special_vocab();
    const int64_t k = model.cfg.num_codebooks;
    Rng rng(seed);
    std::vector<int64_t> correct(k, 0), total(k, 0);
    for (const auto& item : corpus) {
        SpanSet spans = sample_spans(item.codes.frames, rng, model.cfg.pmax);
        RearrangedSeq r = rearrange(item.codes, spans, sv);
        TokenGrid delayed = delay_stack(r.grid, sv);
        auto cell_mask = delayed_cell_mask(loss_mask(r, sv), k);
        nn::Graph g;
        auto logits = model.forward_full(g, item.phonemes, delayed);
        for (int64_t c = 0; c < k; ++c) {
            const nn::Tensor& lg = g.val(logits[c]);
            for (int64_t row = 0; row < delayed.rows; ++row) {
                if (!cell_mask[row * k + c]) continue;
                int64_t best = 0;
                float best_v = lg.at(row, 0);
                for (int64_t vcol = 1; vcol < lg.cols(); ++vcol)
                    if (lg.at(row, vcol) > best_v) {
                        best_v = lg.at(row, vcol);
                        best = vcol;
                    }
                total[c] += 1;
                correct[c] += (best == delayed.at(row, c)) ? 1 : 0;
            }
        }
    }
    std::vector<double> acc(k, 0.0);
    for (int64_t c = 0; c < k; ++c) acc[c] = total[c] ? static_cast<double>(correct[c]) / total[c] : 0.0;
    return acc;
}

} // namespace respeak
