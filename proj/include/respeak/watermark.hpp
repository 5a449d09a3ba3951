#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "respeak/codec.hpp"
#include "respeak/seq_layout.hpp"

namespace respeak {

using WatermarkSeq = std::vector<uint8_t>; // per frame: 1 = edited/generated

inline WatermarkSeq bits_from_spans(const SpanSet& spans, int64_t frames) {
    spans.validate(frames);
    WatermarkSeq bits(static_cast<size_t>(frames), 0);
    for (const Span& s : spans.spans)
        for (int64_t t = s.start; t <= s.end; ++t) bits[t] = 1;
    return bits;
}

struct MaskedWaveform {
    Waveform audio; // edited spans replaced by digital silence
    SpanSet spans;  // frame units
};

// Zeroes the sample window [s*stride, (e+1)*stride) of every span.
inline MaskedWaveform build_masked_waveform(const Waveform& w, const SpanSet& spans, int64_t stride) {
    const int64_t frames = w.size() / stride;
    spans.validate(frames);
    MaskedWaveform out{w, spans};
    for (const Span& s : spans.spans)
        std::fill(out.audio.samples.begin() + s.start * stride, out.audio.samples.begin() + (s.end + 1) * stride,
                  0.0f);
    return out;
}

// --------------------------------------------------------------------------
// watermark sidecar files: compact bit-packed binary, JSON array for debugging
// --------------------------------------------------------------------------

inline void save_wm_sidecar(const std::string& path, const WatermarkSeq& bits) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("wm sidecar: cannot write " + path);
    out.write("RSWM", 4);
    const uint64_t n = bits.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    uint8_t acc = 0;
    for (size_t i = 0; i < bits.size(); ++i) {
        acc |= static_cast<uint8_t>((bits[i] ? 1 : 0) << (i % 8));
        if (i % 8 == 7 || i + 1 == bits.size()) {
            out.put(static_cast<char>(acc));
            acc = 0;
        }
    }
}

inline WatermarkSeq load_wm_sidecar(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("wm sidecar: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "RSWM", 4) != 0) throw std::runtime_error("wm sidecar: bad magic in " + path);
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    WatermarkSeq bits(n, 0);
    uint8_t acc = 0;
    for (uint64_t i = 0; i < n; ++i) {
        if (i % 8 == 0) {
            int c = in.get();
            if (c < 0) throw std::runtime_error("wm sidecar: truncated " + path);
            acc = static_cast<uint8_t>(c);
        }
        bits[i] = (acc >> (i % 8)) & 1;
    }
    return bits;
}

// --------------------------------------------------------------------------
// model
// --------------------------------------------------------------------------

struct WMTrainHyper {
    int64_t steps = 300;
    double lr = 3e-4;
    int64_t warmup_steps = 20;
    double crop_seconds = 0.5;
    double spec_weight = 1.0;
    double wm_weight = 1.0;
    double jitter_prob = 0.5; // amplitude jitter on the detector input
    double jitter_db = 3.0;
    std::vector<int64_t> fft_sizes = {256, 1024};

    json to_json() const {
        return json{{"steps", steps},     {"lr", lr},           {"warmup_steps", warmup_steps},
                    {"crop_seconds", crop_seconds}, {"spec_weight", spec_weight}, {"wm_weight", wm_weight},
                    {"jitter_prob", jitter_prob},   {"jitter_db", jitter_db},     {"fft_sizes", fft_sizes}};
    }
};

// Watermarking codec: the speech encoder and quantizer are frozen copies of
// the base codec; the decoder consumes codes + watermark embedding + masked
// context features (with multi-scale skip connections from the masked
// encoder); a frame classifier recovers the bits from audio.
class WMCodecModel {
public:
    CodecConfig cfg;
    int64_t wm_embed_dim = 8;

    CodecEncoder frozen_encoder; // bit-identical to the base codec
    Codebooks frozen_codebooks;  // bit-identical to the base codec
    CodecDecoder decoder;
    CodecEncoder masked_encoder;
    CodecEncoder predictor_encoder;
    nn::Linear predictor_head;
    nn::EmbeddingTable wm_embed;
    nn::Linear fuse; // [latent | wm | masked] -> latent
    std::vector<nn::Conv1d> skip_proj;

    WMCodecModel() = default;

    WMCodecModel(CodecModel& base, int64_t wm_dim, uint64_t seed) : cfg(base.cfg), wm_embed_dim(wm_dim) {
        Rng rng(seed);
        frozen_encoder = CodecEncoder("frozen_enc", cfg, rng);
        frozen_codebooks = base.codebooks;
        decoder = CodecDecoder("dec", cfg, rng);
        masked_encoder = CodecEncoder("menc", cfg, rng);
        predictor_encoder = CodecEncoder("wmp", cfg, rng);
        predictor_head = nn::Linear("wmp.head", cfg.latent_dim, 1, rng);
        wm_embed = nn::EmbeddingTable("wm.embed", 2, wm_embed_dim, rng);
        fuse = nn::Linear("fuse", cfg.latent_dim + wm_embed_dim + cfg.latent_dim, cfg.latent_dim, rng);
        const auto ch = detail::channel_schedule(cfg);
        const size_t nb = cfg.down_factors.size();
        for (size_t i = 0; i + 1 < nb; ++i) {
            const int64_t c = ch[nb - 1 - i]; // decoder feature width after up block i
            skip_proj.emplace_back("skip" + std::to_string(i), c, c, 1, 1, rng);
        }
        // initialize from the pretrained base codec
        copy_params(base.encoder, frozen_encoder);
        copy_params(base.encoder, masked_encoder);
        copy_params(base.encoder, predictor_encoder);
        copy_params_dec(base.decoder, decoder);
        set_frozen();
    }

    void set_frozen() {
        std::vector<nn::Param*> ps;
        frozen_encoder.collect(ps);
        for (nn::Param* p : ps) p->trainable = false;
    }

    static void copy_params(CodecEncoder& from, CodecEncoder& to) {
        std::vector<nn::Param*> src, dst;
        from.collect(src);
        to.collect(dst);
        for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    }
    static void copy_params_dec(CodecDecoder& from, CodecDecoder& to) {
        std::vector<nn::Param*> src, dst;
        from.collect(src);
        to.collect(dst);
        for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    }

    uint64_t frozen_parts_hash() {
        uint64_t h = 0xcbf29ce484222325ull;
        std::vector<nn::Param*> ps;
        frozen_encoder.collect(ps);
        for (nn::Param* p : ps) h = fnv1a64(p->value.data.data(), p->value.data.size() * 4, h);
        for (int64_t k = 0; k < frozen_codebooks.num_codebooks; ++k)
            h = fnv1a64(frozen_codebooks.embed[k].data.data(), frozen_codebooks.embed[k].data.size() * 4, h);
        return h;
    }

    LatentFrames encode(const Waveform& w) {
        if (w.sample_rate != cfg.sample_rate)
            throw std::invalid_argument("wm encode: sample rate mismatch");
        const int64_t frames = w.size() / cfg.stride;
        if (frames < 1) throw std::invalid_argument("wm encode: input too short");
        nn::Graph g;
        nn::Value x = g.constant(nn::Tensor({1, frames * cfg.stride},
                                            std::vector<float>(w.samples.begin(), w.samples.begin() + frames * cfg.stride)));
        nn::Value z = frozen_encoder.apply(g, x);
        nn::Tensor zt({frames, cfg.latent_dim});
        nn::as_mat(zt) = nn::as_mat(g.val(z)).transpose();
        return zt;
    }

    CodeGrid quantize(const LatentFrames& z) const { return quantize_rvq(z, frozen_codebooks); }

    // decoder graph shared by training and inference; mw_samples must hold
    // exactly frames*stride samples
    nn::Value decode_graph(nn::Graph& g, const CodeGrid& codes, const WatermarkSeq& bits,
                           const std::vector<float>& mw_samples) {
        const int64_t frames = codes.frames;
        if (static_cast<int64_t>(bits.size()) != frames)
            throw std::invalid_argument("wm_decode: watermark length " + std::to_string(bits.size()) +
                                        " != frame count " + std::to_string(frames));
        if (static_cast<int64_t>(mw_samples.size()) != frames * cfg.stride)
            throw std::invalid_argument("wm_decode: masked waveform length mismatch");

        // masked-context features at every resolution
        std::vector<nn::Value> taps;
        nn::Value mw = g.constant(nn::Tensor({1, frames * cfg.stride}, mw_samples));
        nn::Value me_latent = masked_encoder.apply_with_taps(g, mw, taps); // [D x T]

        // fuse codes + watermark + context into the decoder input
        LatentFrames deq = dequantize_rvq(codes, frozen_codebooks); // [T x D]
        std::vector<int32_t> bit_ids(bits.begin(), bits.end());
        nn::Value wm_feat = wm_embed.apply(g, bit_ids);          // [T x E]
        nn::Value fused = fuse.apply(
            g, nn::concat_cols({g.constant(deq), wm_feat, nn::transpose(me_latent)})); // [T x D]
        nn::Value h = decoder.conv_in.apply(g, nn::transpose(fused));

        const size_t nb = decoder.up.size();
        for (size_t i = 0; i < nb; ++i) {
            h = decoder.up[i].apply(g, nn::elu(h));
            if (i + 1 < nb) {
                nn::Value skip = skip_proj[i].apply(g, taps[nb - 2 - i]);
                h = nn::add(h, skip);
            }
            h = decoder.res_units[i].apply(g, h);
        }
        return decoder.conv_out.apply(g, nn::elu(h)); // [1 x T*stride]
    }

    Waveform wm_decode(const CodeGrid& codes, const WatermarkSeq& bits, const MaskedWaveform& mw) {
        const int64_t frames = codes.frames;
        if (mw.audio.size() / cfg.stride != frames)
            throw std::invalid_argument("wm_decode: masked waveform frame count " +
                                        std::to_string(mw.audio.size() / cfg.stride) + " != code frames " +
                                        std::to_string(frames));
        std::vector<float> samples(mw.audio.samples.begin(), mw.audio.samples.begin() + frames * cfg.stride);
        nn::Graph g;
        nn::Value y = decode_graph(g, codes, bits, samples);
        Waveform out;
        out.sample_rate = cfg.sample_rate;
        out.samples = g.val(y).data;
        return out;
    }

    // predictor graph over an audio Value [1 x T*stride]; returns logits [T x 1]
    nn::Value predict_graph(nn::Graph& g, nn::Value audio) {
        nn::Value z = predictor_encoder.apply(g, audio); // [D x T]
        return predictor_head.apply(g, nn::transpose(z));
    }

    // per-frame probability that a frame was generated/edited
    std::vector<double> predict_watermark(const Waveform& w) {
        if (w.sample_rate != cfg.sample_rate)
            throw std::invalid_argument("predict_watermark: sample rate mismatch");
        const int64_t frames = w.size() / cfg.stride;
        if (frames < 1) throw std::invalid_argument("predict_watermark: input too short");
        nn::Graph g;
        nn::Value x = g.constant(nn::Tensor({1, frames * cfg.stride},
                                            std::vector<float>(w.samples.begin(), w.samples.begin() + frames * cfg.stride)));
        nn::Value logits = predict_graph(g, x);
        std::vector<double> probs(static_cast<size_t>(frames));
        for (int64_t t = 0; t < frames; ++t)
            probs[t] = 1.0 / (1.0 + std::exp(-static_cast<double>(g.val(logits).at(t, 0))));
        return probs;
    }

    // Reassembled edit: decode the full grid with bits set on the generated
    // spans and the original audio silenced there.
    std::pair<Waveform, WatermarkSeq> splice_and_mark(const Waveform& original, const CodeGrid& generated_codes,
                                                      const SpanSet& spans) {
        const int64_t frames = generated_codes.frames;
        if (original.size() / cfg.stride != frames)
            throw std::invalid_argument("splice_and_mark: original frame count != generated grid frames");
        WatermarkSeq bits = bits_from_spans(spans, frames);
        Waveform trimmed;
        trimmed.sample_rate = original.sample_rate;
        trimmed.samples.assign(original.samples.begin(), original.samples.begin() + frames * cfg.stride);
        MaskedWaveform mw = build_masked_waveform(trimmed, spans, cfg.stride);
        return {wm_decode(generated_codes, bits, mw), bits};
    }

    std::vector<nn::Param*> trainable_params() {
        std::vector<nn::Param*> ps;
        decoder.collect(ps);
        masked_encoder.collect(ps);
        predictor_encoder.collect(ps);
        predictor_head.collect(ps);
        wm_embed.collect(ps);
        fuse.collect(ps);
        for (auto& s : skip_proj) s.collect(ps);
        return ps;
    }

    std::map<std::string, nn::Tensor> named_tensors() {
        std::map<std::string, nn::Tensor> out;
        std::vector<nn::Param*> ps = trainable_params();
        frozen_encoder.collect(ps);
        for (nn::Param* p : ps) out[p->name] = p->value;
        for (int64_t k = 0; k < frozen_codebooks.num_codebooks; ++k) {
            const std::string pre = "frozen_cb." + std::to_string(k);
            out[pre + ".embed"] = frozen_codebooks.embed[k];
            out[pre + ".cluster_size"] = frozen_codebooks.cluster_size[k];
            out[pre + ".embed_avg"] = frozen_codebooks.embed_avg[k];
        }
        return out;
    }

    void load_tensors(const std::map<std::string, nn::Tensor>& t) {
        std::vector<nn::Param*> ps = trainable_params();
        frozen_encoder.collect(ps);
        for (nn::Param* p : ps) {
            auto it = t.find(p->name);
            if (it == t.end()) throw std::runtime_error("wm: checkpoint missing tensor " + p->name);
            if (it->second.shape != p->value.shape)
                throw std::runtime_error("wm: checkpoint shape mismatch for " + p->name);
            p->value = it->second;
        }
        for (int64_t k = 0; k < frozen_codebooks.num_codebooks; ++k) {
            const std::string pre = "frozen_cb." + std::to_string(k);
            frozen_codebooks.embed[k] = t.at(pre + ".embed");
            frozen_codebooks.cluster_size[k] = t.at(pre + ".cluster_size");
            frozen_codebooks.embed_avg[k] = t.at(pre + ".embed_avg");
        }
    }

    void save(const std::string& dir) {
        save_checkpoint(dir, "wm", json{{"codec", cfg.to_json()}, {"wm_embed_dim", wm_embed_dim}}, named_tensors());
    }

    static WMCodecModel load(const std::string& dir) {
        Checkpoint ck = load_checkpoint(dir, "wm");
        CodecConfig cfg = CodecConfig::from_json(ck.config.at("codec"));
        CodecModel dummy(cfg, 0);
        WMCodecModel m(dummy, ck.config.at("wm_embed_dim").get<int64_t>(), 0);
        m.load_tensors(ck.tensors);
        m.set_frozen();
        return m;
    }
};

struct TrainedWM {
    WMCodecModel model;
    std::vector<json> metrics;
};

// Trains decoder, masked encoder and watermark predictor jointly; the frozen
// encoder/quantizer stay bit-identical to the base codec.
inline TrainedWM train_wm_codec(const std::vector<ManifestEntry>& corpus, CodecModel& base,
                                const WMTrainHyper& hyper, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("train_wm_codec: empty corpus");
    const CodecConfig& cfg = base.cfg;
    auto audio = detail::load_corpus_audio(corpus, cfg.sample_rate);
    TrainedWM out{WMCodecModel(base, 8, seed), {}};
    WMCodecModel& model = out.model;
    Rng rng(seed ^ 0x3a7e12f00dull);
    nn::AdamW opt(model.trainable_params());

    const int64_t crop = std::max<int64_t>(10 * cfg.stride, static_cast<int64_t>(hyper.crop_seconds * cfg.sample_rate) /
                                                                 cfg.stride * cfg.stride);
    const auto t_start = std::chrono::steady_clock::now();
    for (int64_t step = 0; step < hyper.steps; ++step) {
        const auto& w = audio[rng.uniform_int(static_cast<int64_t>(audio.size()))];
        std::vector<float> x = detail::random_crop(w, crop, rng);
        x.resize(static_cast<size_t>(static_cast<int64_t>(x.size()) / cfg.stride * cfg.stride));
        const int64_t frames = static_cast<int64_t>(x.size()) / cfg.stride;

        // spans drawn with the shared sampler (P in {1..3}); watermark bits follow
        SpanSet spans = sample_spans(frames, rng);
        WatermarkSeq bits = bits_from_spans(spans, frames);
        std::vector<float> masked = x;
        for (const Span& s : spans.spans)
            std::fill(masked.begin() + s.start * cfg.stride, masked.begin() + (s.end + 1) * cfg.stride, 0.0f);

        // frozen tokenization
        Waveform crop_wave{x, cfg.sample_rate};
        CodeGrid codes = model.quantize(model.encode(crop_wave));

        nn::Graph g;
        nn::Value decoded = model.decode_graph(g, codes, bits, masked);
        nn::Tensor target({1, static_cast<int64_t>(x.size())}, x);
        nn::Value loss_l1 = nn::l1_loss(decoded, target);
        nn::Value loss_spec = nn::stft_logmag_l1(decoded, target, hyper.fft_sizes);

        // detector trains on the reconstruction, half the time amplitude-jittered
        nn::Value det_in = decoded;
        if (rng.bernoulli(hyper.jitter_prob)) {
            const double db = rng.uniform(-hyper.jitter_db, hyper.jitter_db);
            det_in = nn::scale(decoded, std::pow(10.0, db / 20.0));
        }
        nn::Value wm_logits = model.predict_graph(g, det_in);
        std::vector<float> bit_targets(bits.begin(), bits.end());
        std::vector<uint8_t> all_mask(bits.size(), 1);
        nn::Value loss_bce = nn::masked_bce_logits(wm_logits, bit_targets, all_mask);

        nn::Value loss = nn::add(nn::add(loss_l1, nn::scale(loss_spec, hyper.spec_weight)),
                                 nn::scale(loss_bce, hyper.wm_weight));
        const double loss_v = g.val(loss)[0];
        if (!std::isfinite(loss_v))
            throw std::runtime_error("train_wm_codec: non-finite loss at step " + std::to_string(step));

        opt.zero_grad();
        g.backward(loss);
        const double lr = nn::warmup_cosine_lr(step, hyper.steps, hyper.warmup_steps, hyper.lr, hyper.lr * 0.1);
        opt.step(lr);

        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        out.metrics.push_back(json{{"step", step},
                                   {"loss", loss_v},
                                   {"recon_l1", static_cast<double>(g.val(loss_l1)[0])},
                                   {"spectral", static_cast<double>(g.val(loss_spec)[0])},
                                   {"wm_bce", static_cast<double>(g.val(loss_bce)[0])},
                                   {"lr", lr},
                                   {"seconds", secs}});
    }
    return out;
}

} // namespace respeak
