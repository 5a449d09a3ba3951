#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "respeak/checkpoint.hpp"
#include "respeak/code_grid.hpp"
#include "respeak/io.hpp"
#include "respeak/nn.hpp"
#include "respeak/rng.hpp"
#include "respeak/wav.hpp"

namespace respeak {

using LatentFrames = nn::Tensor; // [frames x latent_dim]

struct CodecConfig {
    int sample_rate = 16000;
    int64_t stride = 320;
    int64_t num_codebooks = 4;  // K
    int64_t codebook_size = 2048; // V
    int64_t base_dim = 64;
    int64_t latent_dim = 2048;
    std::vector<int64_t> down_factors = {2, 4, 4, 5, 2};

    int64_t frame_rate() const { return sample_rate / stride; }

    void validate() const {
        if (sample_rate % stride != 0)
            throw std::invalid_argument("CodecConfig: sample_rate must be divisible by stride");
        if (num_codebooks < 1) throw std::invalid_argument("CodecConfig: need at least one codebook");
        if (codebook_size < 2) throw std::invalid_argument("CodecConfig: codebook_size must be >= 2");
        int64_t prod = 1;
        for (int64_t f : down_factors) prod *= f;
        if (prod != stride)
            throw std::invalid_argument("CodecConfig: down_factors product " + std::to_string(prod) +
                                        " != stride " + std::to_string(stride));
        if (base_dim < 1 || latent_dim < 1) throw std::invalid_argument("CodecConfig: bad dims");
    }

    // small configuration that keeps the 50 Hz frame-rate arithmetic intact
    static CodecConfig toy() {
        CodecConfig c;
        c.base_dim = 32;
        c.latent_dim = 128;
        c.codebook_size = 256;
        return c;
    }

    json to_json() const {
        return json{{"sample_rate", sample_rate}, {"stride", stride},       {"num_codebooks", num_codebooks},
                    {"codebook_size", codebook_size}, {"base_dim", base_dim}, {"latent_dim", latent_dim},
                    {"down_factors", down_factors}};
    }
    static CodecConfig from_json(const json& j) {
        CodecConfig c;
        c.sample_rate = j.at("sample_rate").get<int>();
        c.stride = j.at("stride").get<int64_t>();
        c.num_codebooks = j.at("num_codebooks").get<int64_t>();
        c.codebook_size = j.at("codebook_size").get<int64_t>();
        c.base_dim = j.at("base_dim").get<int64_t>();
        c.latent_dim = j.at("latent_dim").get<int64_t>();
        c.down_factors = j.at("down_factors").get<std::vector<int64_t>>();
        c.validate();
        return c;
    }
};

inline Waveform normalize_peak(Waveform w, float peak = 0.95f) {
    float mx = 0.0f;
    for (float s : w.samples) mx = std::max(mx, std::abs(s));
    if (mx > 1e-8f) {
        const float g = peak / mx;
        for (auto& s : w.samples) s *= g;
    }
    return w;
}

// ---------------------------------------------------------------------------
// residual vector quantizer with EMA codebook learning
// ---------------------------------------------------------------------------

struct Codebooks {
    int64_t num_codebooks = 0, codebook_size = 0, dim = 0;
    std::vector<nn::Tensor> embed;        // per stage: [V x D]
    std::vector<nn::Tensor> cluster_size; // per stage: [V]
    std::vector<nn::Tensor> embed_avg;    // per stage: [V x D]

    Codebooks() = default;
    Codebooks(int64_t k, int64_t v, int64_t d, Rng& rng) : num_codebooks(k), codebook_size(v), dim(d) {
        for (int64_t i = 0; i < k; ++i) {
            nn::Tensor e({v, d});
            nn::init_normal(e, rng, 0.1);
            embed.push_back(e);
            cluster_size.emplace_back(std::vector<int64_t>{v});
            embed_avg.push_back(e); // starts equal to embed
        }
    }
};

// Residual quantization, one stage per codebook; ties break to the lowest index.
inline CodeGrid quantize_rvq(const LatentFrames& z, const Codebooks& cb) {
    if (z.cols() != cb.dim)
        throw std::invalid_argument("quantize_rvq: latent dim " + std::to_string(z.cols()) + " != codebook dim " +
                                    std::to_string(cb.dim));
    if (!z.all_finite()) throw std::invalid_argument("quantize_rvq: non-finite latent input");
    const int64_t t_frames = z.rows(), d = z.cols();
    CodeGrid codes(t_frames, cb.num_codebooks);
    std::vector<float> residual(static_cast<size_t>(d));
    for (int64_t t = 0; t < t_frames; ++t) {
        for (int64_t j = 0; j < d; ++j) residual[j] = z.at(t, j);
        for (int64_t k = 0; k < cb.num_codebooks; ++k) {
            const nn::Tensor& e = cb.embed[k];
            int64_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int64_t v = 0; v < cb.codebook_size; ++v) {
                double dist = 0.0;
                const float* row = e.data.data() + v * d;
                for (int64_t j = 0; j < d; ++j) {
                    const double diff = residual[j] - row[j];
                    dist += diff * diff;
                }
                if (dist < best_d) {
                    best_d = dist;
                    best = v;
                }
            }
            codes.at(t, k) = static_cast<int32_t>(best);
            const float* row = e.data.data() + best * d;
            for (int64_t j = 0; j < d; ++j) residual[j] -= row[j];
        }
    }
    return codes;
}

inline LatentFrames dequantize_rvq(const CodeGrid& codes, const Codebooks& cb) {
    if (codes.num_codebooks != cb.num_codebooks)
        throw std::invalid_argument("dequantize_rvq: codebook count mismatch");
    codes.check_range(cb.codebook_size);
    LatentFrames z({codes.frames, cb.dim});
    for (int64_t t = 0; t < codes.frames; ++t)
        for (int64_t k = 0; k < cb.num_codebooks; ++k) {
            const float* row = cb.embed[k].data.data() + codes.at(t, k) * cb.dim;
            for (int64_t j = 0; j < cb.dim; ++j) z.at(t, j) += row[j];
        }
    return z;
}

// ---------------------------------------------------------------------------
// encoder / decoder conv stacks
// ---------------------------------------------------------------------------

namespace detail {

struct ResUnit {
    nn::Conv1d conv1, conv2;

    ResUnit() = default;
    ResUnit(const std::string& name, int64_t ch, Rng& rng)
        : conv1(name + ".c1", ch, std::max<int64_t>(ch / 2, 1), 3, 1, rng),
          conv2(name + ".c2", std::max<int64_t>(ch / 2, 1), ch, 1, 1, rng) {}

    nn::Value apply(nn::Graph& g, nn::Value x) {
        nn::Value h = conv2.apply(g, nn::elu(conv1.apply(g, nn::elu(x))));
        return nn::add(x, h);
    }
    void collect(std::vector<nn::Param*>& ps) {
        conv1.collect(ps);
        conv2.collect(ps);
    }
};

inline std::vector<int64_t> channel_schedule(const CodecConfig& cfg) {
    std::vector<int64_t> ch{cfg.base_dim};
    for (size_t i = 0; i < cfg.down_factors.size(); ++i)
        ch.push_back(std::min(ch.back() * 2, cfg.latent_dim));
    return ch;
}

} // namespace detail

// Encoder: conv_in, then per block (res unit -> strided downsampling conv),
// then a final projection to latent_dim. Feature maps are [channels x time].
struct CodecEncoder {
    CodecConfig cfg;
    nn::Conv1d conv_in;
    std::vector<detail::ResUnit> res_units;
    std::vector<nn::Conv1d> down;
    nn::Conv1d conv_out;

    CodecEncoder() = default;
    CodecEncoder(const std::string& name, const CodecConfig& c, Rng& rng) : cfg(c) {
        const auto ch = detail::channel_schedule(c);
        conv_in = nn::Conv1d(name + ".in", 1, ch[0], 7, 1, rng);
        for (size_t i = 0; i < c.down_factors.size(); ++i) {
            res_units.emplace_back(name + ".b" + std::to_string(i) + ".res", ch[i], rng);
            down.emplace_back(name + ".b" + std::to_string(i) + ".down", ch[i], ch[i + 1], 2 * c.down_factors[i],
                              c.down_factors[i], rng);
        }
        conv_out = nn::Conv1d(name + ".out", ch.back(), c.latent_dim, 3, 1, rng);
    }

    // x: [1 x samples], samples divisible by stride; returns [latent_dim x frames]
    nn::Value apply(nn::Graph& g, nn::Value x) {
        nn::Value h = conv_in.apply(g, x);
        for (size_t i = 0; i < down.size(); ++i) {
            h = res_units[i].apply(g, h);
            h = down[i].apply(g, nn::elu(h));
        }
        return conv_out.apply(g, nn::elu(h));
    }

    // intermediate block outputs at every resolution, for skip connections
    nn::Value apply_with_taps(nn::Graph& g, nn::Value x, std::vector<nn::Value>& taps) {
        nn::Value h = conv_in.apply(g, x);
        for (size_t i = 0; i < down.size(); ++i) {
            h = res_units[i].apply(g, h);
            h = down[i].apply(g, nn::elu(h));
            taps.push_back(h);
        }
        return conv_out.apply(g, nn::elu(h));
    }

    void collect(std::vector<nn::Param*>& ps) {
        conv_in.collect(ps);
        for (auto& r : res_units) r.collect(ps);
        for (auto& d : down) d.collect(ps);
        conv_out.collect(ps);
    }
};

struct CodecDecoder {
    CodecConfig cfg;
    nn::Conv1d conv_in;
    std::vector<nn::ConvTranspose1d> up;
    std::vector<detail::ResUnit> res_units;
    nn::Conv1d conv_out;

    CodecDecoder() = default;
    CodecDecoder(const std::string& name, const CodecConfig& c, Rng& rng) : cfg(c) {
        const auto ch = detail::channel_schedule(c);
        conv_in = nn::Conv1d(name + ".in", c.latent_dim, ch.back(), 7, 1, rng);
        const size_t nb = c.down_factors.size();
        for (size_t i = 0; i < nb; ++i) {
            const size_t j = nb - 1 - i; // mirror the encoder
            up.emplace_back(name + ".b" + std::to_string(i) + ".up", ch[j + 1], ch[j], 2 * c.down_factors[j],
                            c.down_factors[j], rng);
            res_units.emplace_back(name + ".b" + std::to_string(i) + ".res", ch[j], rng);
        }
        conv_out = nn::Conv1d(name + ".out", ch[0], 1, 7, 1, rng);
    }

    // z: [latent_dim x frames] -> [1 x frames*stride]
    nn::Value apply(nn::Graph& g, nn::Value z) {
        nn::Value h = conv_in.apply(g, z);
        for (size_t i = 0; i < up.size(); ++i) {
            h = up[i].apply(g, nn::elu(h));
            h = res_units[i].apply(g, h);
        }
        return conv_out.apply(g, nn::elu(h));
    }

    void collect(std::vector<nn::Param*>& ps) {
        conv_in.collect(ps);
        for (auto& u : up) u.collect(ps);
        for (auto& r : res_units) r.collect(ps);
        conv_out.collect(ps);
    }
};

// ---------------------------------------------------------------------------
// full codec model
// ---------------------------------------------------------------------------

class CodecModel {
public:
    CodecConfig cfg;
    CodecEncoder encoder;
    CodecDecoder decoder;
    Codebooks codebooks;

    CodecModel() = default;
    CodecModel(const CodecConfig& c, uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng(seed);
        encoder = CodecEncoder("enc", cfg, rng);
        decoder = CodecDecoder("dec", cfg, rng);
        codebooks = Codebooks(cfg.num_codebooks, cfg.codebook_size, cfg.latent_dim, rng);
    }

    // waveform -> [frames x latent_dim]; truncates to a whole number of frames
    LatentFrames encode(const Waveform& w) {
        if (w.sample_rate != cfg.sample_rate)
            throw std::invalid_argument("encode: sample rate " + std::to_string(w.sample_rate) + " != config " +
                                        std::to_string(cfg.sample_rate));
        const int64_t frames = w.size() / cfg.stride;
        if (frames < 1)
            throw std::invalid_argument("encode: input too short (" + std::to_string(w.size()) + " samples, stride " +
                                        std::to_string(cfg.stride) + ")");
        nn::Graph g;
        nn::Value x = g.constant(nn::Tensor({1, frames * cfg.stride},
                                            std::vector<float>(w.samples.begin(), w.samples.begin() + frames * cfg.stride)));
        nn::Value z = encoder.apply(g, x);
        nn::Tensor zt({frames, cfg.latent_dim});
        nn::as_mat(zt) = nn::as_mat(g.val(z)).transpose();
        return zt;
    }

    CodeGrid quantize(const LatentFrames& z) const { return quantize_rvq(z, codebooks); }
    LatentFrames dequantize(const CodeGrid& codes) const { return dequantize_rvq(codes, codebooks); }

    // [frames x latent_dim] -> waveform of frames*stride samples
    Waveform decode(const LatentFrames& z) {
        if (z.cols() != cfg.latent_dim)
            throw std::invalid_argument("decode: latent width " + std::to_string(z.cols()) + " != config latent_dim " +
                                        std::to_string(cfg.latent_dim));
        nn::Graph g;
        nn::Tensor zt({cfg.latent_dim, z.rows()});
        nn::as_mat(zt) = nn::as_mat(z).transpose();
        nn::Value y = decoder.apply(g, g.constant(std::move(zt)));
        Waveform w;
        w.sample_rate = cfg.sample_rate;
        w.samples = g.val(y).data;
        return w;
    }

    Waveform reconstruct(const Waveform& w) { return decode(dequantize(quantize(encode(w)))); }

    std::vector<nn::Param*> trainable_params() {
        std::vector<nn::Param*> ps;
        encoder.collect(ps);
        decoder.collect(ps);
        return ps;
    }

    std::map<std::string, nn::Tensor> named_tensors() {
        std::map<std::string, nn::Tensor> out;
        std::vector<nn::Param*> ps;
        encoder.collect(ps);
        decoder.collect(ps);
        for (nn::Param* p : ps) out[p->name] = p->value;
        for (int64_t k = 0; k < codebooks.num_codebooks; ++k) {
            const std::string pre = "cb." + std::to_string(k);
            out[pre + ".embed"] = codebooks.embed[k];
            out[pre + ".cluster_size"] = codebooks.cluster_size[k];
            out[pre + ".embed_avg"] = codebooks.embed_avg[k];
        }
        return out;
    }

    void load_tensors(const std::map<std::string, nn::Tensor>& t) {
        std::vector<nn::Param*> ps;
        encoder.collect(ps);
        decoder.collect(ps);
        for (nn::Param* p : ps) {
            auto it = t.find(p->name);
            if (it == t.end()) throw std::runtime_error("codec: checkpoint missing tensor " + p->name);
            if (it->second.shape != p->value.shape)
                throw std::runtime_error("codec: checkpoint shape mismatch for " + p->name);
            p->value = it->second;
        }
        for (int64_t k = 0; k < codebooks.num_codebooks; ++k) {
            const std::string pre = "cb." + std::to_string(k);
            codebooks.embed[k] = t.at(pre + ".embed");
            codebooks.cluster_size[k] = t.at(pre + ".cluster_size");
            codebooks.embed_avg[k] = t.at(pre + ".embed_avg");
        }
    }

    // hash of the encoder + quantizer tensors (the parts the watermark codec freezes)
    uint64_t frozen_parts_hash() {
        uint64_t h = 0xcbf29ce484222325ull;
        std::vector<nn::Param*> ps;
        encoder.collect(ps);
        for (nn::Param* p : ps) h = fnv1a64(p->value.data.data(), p->value.data.size() * 4, h);
        for (int64_t k = 0; k < codebooks.num_codebooks; ++k)
            h = fnv1a64(codebooks.embed[k].data.data(), codebooks.embed[k].data.size() * 4, h);
        return h;
    }

    void save(const std::string& dir) { save_checkpoint(dir, "codec", cfg.to_json(), named_tensors()); }

    static CodecModel load(const std::string& dir) {
        Checkpoint ck = load_checkpoint(dir, "codec");
        CodecModel m(CodecConfig::from_json(ck.config), 0);
        m.load_tensors(ck.tensors);
        return m;
    }
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct CodecTrainHyper {
    int64_t steps = 200;
    double lr = 3e-4;
    int64_t warmup_steps = 20;
    double crop_seconds = 0.5;
    double commit_weight = 0.25;
    double spec_weight = 1.0;
    double ema_decay = 0.99;
    double dead_code_threshold = 0.03;
    std::vector<int64_t> fft_sizes = {256, 1024};

    json to_json() const {
        return json{{"steps", steps},     {"lr", lr},
                    {"warmup_steps", warmup_steps}, {"crop_seconds", crop_seconds},
                    {"commit_weight", commit_weight}, {"spec_weight", spec_weight},
                    {"ema_decay", ema_decay}, {"dead_code_threshold", dead_code_threshold},
                    {"fft_sizes", fft_sizes}};
    }
};

struct TrainedCodec {
    CodecModel model;
    std::vector<json> metrics;
};

namespace detail {

// EMA centroid update with dead-code re-seeding from the batch
inline double rvq_ema_update(Codebooks& cb, const LatentFrames& z, const CodeGrid& codes, double decay,
                             double dead_threshold, Rng& rng) {
    const int64_t d = cb.dim;
    int64_t used_total = 0;
    std::vector<float> residual(static_cast<size_t>(d));
    // accumulate batch stats stage by stage
    std::vector<nn::Tensor> counts, sums;
    for (int64_t k = 0; k < cb.num_codebooks; ++k) {
        counts.emplace_back(std::vector<int64_t>{cb.codebook_size});
        sums.emplace_back(std::vector<int64_t>{cb.codebook_size, d});
    }
    for (int64_t t = 0; t < z.rows(); ++t) {
        for (int64_t j = 0; j < d; ++j) residual[j] = z.at(t, j);
        for (int64_t k = 0; k < cb.num_codebooks; ++k) {
            const int32_t idx = codes.at(t, k);
            counts[k][idx] += 1.0f;
            float* srow = sums[k].data.data() + idx * d;
            const float* erow = cb.embed[k].data.data() + idx * d;
            for (int64_t j = 0; j < d; ++j) {
                srow[j] += residual[j];
                residual[j] -= erow[j];
            }
        }
    }
    const float fdecay = static_cast<float>(decay);
    for (int64_t k = 0; k < cb.num_codebooks; ++k) {
        int64_t used = 0;
        for (int64_t v = 0; v < cb.codebook_size; ++v) {
            cb.cluster_size[k][v] = fdecay * cb.cluster_size[k][v] + (1.0f - fdecay) * counts[k][v];
            float* avg = cb.embed_avg[k].data.data() + v * d;
            const float* s = sums[k].data.data() + v * d;
            for (int64_t j = 0; j < d; ++j) avg[j] = fdecay * avg[j] + (1.0f - fdecay) * s[j];
            if (counts[k][v] > 0.0f) ++used;
        }
        used_total += used;
        // Laplace-smoothed normalization
        float total = 0.0f;
        for (int64_t v = 0; v < cb.codebook_size; ++v) total += cb.cluster_size[k][v];
        const float eps = 1e-5f;
        for (int64_t v = 0; v < cb.codebook_size; ++v) {
            const float n = (cb.cluster_size[k][v] + eps) / (total + static_cast<float>(cb.codebook_size) * eps) * total;
            float* e = cb.embed[k].data.data() + v * d;
            const float* avg = cb.embed_avg[k].data.data() + v * d;
            for (int64_t j = 0; j < d; ++j) e[j] = avg[j] / n;
        }
        // re-seed dead codes from random batch latents
        for (int64_t v = 0; v < cb.codebook_size; ++v) {
            if (cb.cluster_size[k][v] < dead_threshold) {
                const int64_t t = rng.uniform_int(z.rows());
                float* e = cb.embed[k].data.data() + v * d;
                for (int64_t j = 0; j < d; ++j) e[j] = z.at(t, j);
                cb.cluster_size[k][v] = 1.0f;
                float* avg = cb.embed_avg[k].data.data() + v * d;
                for (int64_t j = 0; j < d; ++j) avg[j] = e[j];
            }
        }
    }
    return static_cast<double>(used_total) / static_cast<double>(cb.num_codebooks * cb.codebook_size);
}

inline std::vector<Waveform> load_corpus_audio(const std::vector<ManifestEntry>& entries, int sample_rate) {
    std::vector<Waveform> out;
    for (const auto& e : entries) {
        Waveform w = read_wav(e.audio_path);
        if (w.sample_rate != sample_rate)
            throw std::runtime_error("corpus: " + e.audio_path + " sample rate " + std::to_string(w.sample_rate) +
                                     " != " + std::to_string(sample_rate));
        out.push_back(normalize_peak(std::move(w)));
    }
    return out;
}

inline std::vector<float> random_crop(const Waveform& w, int64_t crop_samples, Rng& rng) {
    if (w.size() <= crop_samples) return w.samples;
    const int64_t off = rng.uniform_int(w.size() - crop_samples + 1);
    return std::vector<float>(w.samples.begin() + off, w.samples.begin() + off + crop_samples);
}

} // namespace detail

inline TrainedCodec train_codec(const std::vector<ManifestEntry>& corpus, const CodecConfig& cfg,
                                const CodecTrainHyper& hyper, uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("train_codec: empty corpus");
    cfg.validate();
    auto audio = detail::load_corpus_audio(corpus, cfg.sample_rate);

    TrainedCodec result{CodecModel(cfg, seed), {}};
    CodecModel& model = result.model;
    Rng rng(seed ^ 0x5eedc0dec0ffeeull);

    nn::AdamW opt(model.trainable_params());
    const int64_t crop = std::max<int64_t>(cfg.stride, static_cast<int64_t>(hyper.crop_seconds * cfg.sample_rate) /
                                                            cfg.stride * cfg.stride);
    const auto t_start = std::chrono::steady_clock::now();
    for (int64_t step = 0; step < hyper.steps; ++step) {
        const auto& w = audio[rng.uniform_int(static_cast<int64_t>(audio.size()))];
        std::vector<float> x = detail::random_crop(w, crop, rng);
        const int64_t usable = static_cast<int64_t>(x.size()) / cfg.stride * cfg.stride;
        x.resize(usable);
        const int64_t frames = usable / cfg.stride;

        nn::Graph g;
        nn::Value input = g.leaf(nn::Tensor({1, usable}, x), false);
        nn::Value z_cw = model.encoder.apply(g, input); // [D x T]
        nn::Value z = nn::transpose(z_cw);              // [T x D]

        CodeGrid codes = quantize_rvq(g.val(z), model.codebooks);
        LatentFrames q = dequantize_rvq(codes, model.codebooks);

        nn::Value zq = nn::straight_through(z, q);
        nn::Value decoded = model.decoder.apply(g, nn::transpose(zq)); // [1 x usable]

        nn::Tensor target({1, usable}, x);
        nn::Value loss_l1 = nn::l1_loss(decoded, target);
        nn::Value loss_spec = nn::stft_logmag_l1(decoded, target, hyper.fft_sizes);
        nn::Value loss_commit = nn::mse_loss(z, q);
        nn::Value loss = nn::add(nn::add(loss_l1, nn::scale(loss_spec, hyper.spec_weight)),
                                 nn::scale(loss_commit, hyper.commit_weight));

        const double loss_v = g.val(loss)[0];
        if (!std::isfinite(loss_v))
            throw std::runtime_error("train_codec: non-finite loss at step " + std::to_string(step));

        opt.zero_grad();
        g.backward(loss);
        const double usage = detail::rvq_ema_update(model.codebooks, g.val(z), codes, hyper.ema_decay,
                                                    hyper.dead_code_threshold, rng);
        const double lr = nn::warmup_cosine_lr(step, hyper.steps, hyper.warmup_steps, hyper.lr, hyper.lr * 0.1);
        opt.step(lr);

        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        result.metrics.push_back(json{{"step", step},
                                      {"loss", loss_v},
                                      {"recon_l1", static_cast<double>(g.val(loss_l1)[0])},
                                      {"spectral", static_cast<double>(g.val(loss_spec)[0])},
                                      {"commit", static_cast<double>(g.val(loss_commit)[0])},
                                      {"codebook_usage", usage},
                                      {"frames", frames},
                                      {"lr", lr},
                                      {"seconds", secs}});
    }
    return result;
}

} // namespace respeak
