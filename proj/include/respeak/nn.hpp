#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "respeak/autodiff.hpp"
#include "respeak/rng.hpp"
#include "respeak/tensor.hpp"

namespace respeak::nn {

inline void init_uniform_fanin(Tensor& t, Rng& rng, int64_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
    for (auto& x : t.data) x = static_cast<float>(rng.uniform(-s, s));
}

inline void init_normal(Tensor& t, Rng& rng, double stddev) {
    for (auto& x : t.data) x = static_cast<float>(rng.normal(0.0, stddev));
}

struct Linear {
    Param w, b;
    int64_t in = 0, out = 0;

    Linear() = default;
    Linear(const std::string& name, int64_t in_, int64_t out_, Rng& rng, bool zero_init = false)
        : w(name + ".w", Tensor({in_, out_})), b(name + ".b", Tensor({out_})), in(in_), out(out_) {
        if (!zero_init) init_uniform_fanin(w.value, rng, in_);
    }

    Value apply(Graph& g, Value x) { return add_bias(matmul(x, g.param(w)), g.param(b)); }

    void collect(std::vector<Param*>& ps) {
        ps.push_back(&w);
        ps.push_back(&b);
    }
};

// feature maps are [channels x time]
struct Conv1d {
    Param w, b;
    int64_t c_in = 0, c_out = 0, k = 0, stride = 1, pad_l = 0, pad_r = 0;

    Conv1d() = default;
    Conv1d(const std::string& name, int64_t c_in_, int64_t c_out_, int64_t k_, int64_t stride_, Rng& rng)
        : w(name + ".w", Tensor({c_out_, c_in_ * k_})), b(name + ".b", Tensor({c_out_})),
          c_in(c_in_), c_out(c_out_), k(k_), stride(stride_) {
        // "same" padding for stride-dividing lengths: total pad = k - stride
        const int64_t total = k_ - stride_;
        if (total < 0) throw std::invalid_argument("Conv1d: kernel smaller than stride");
        pad_l = total / 2;
        pad_r = total - pad_l;
        init_uniform_fanin(w.value, rng, c_in_ * k_);
        init_uniform_fanin(b.value, rng, c_in_ * k_);
    }

    Value apply(Graph& g, Value x) { return conv1d(x, g.param(w), g.param(b), k, stride, pad_l, pad_r); }

    void collect(std::vector<Param*>& ps) {
        ps.push_back(&w);
        ps.push_back(&b);
    }
};

struct ConvTranspose1d {
    Param w, b;
    int64_t c_in = 0, c_out = 0, k = 0, stride = 1, trim_l = 0, trim_r = 0;

    ConvTranspose1d() = default;
    ConvTranspose1d(const std::string& name, int64_t c_in_, int64_t c_out_, int64_t k_, int64_t stride_, Rng& rng)
        : w(name + ".w", Tensor({c_out_ * k_, c_in_})), b(name + ".b", Tensor({c_out_})),
          c_in(c_in_), c_out(c_out_), k(k_), stride(stride_) {
        // trim so the output length is exactly stride * input length
        const int64_t total = k_ - stride_;
        if (total < 0) throw std::invalid_argument("ConvTranspose1d: kernel smaller than stride");
        trim_l = total / 2;
        trim_r = total - trim_l;
        init_uniform_fanin(w.value, rng, c_in_ * k_);
        init_uniform_fanin(b.value, rng, c_in_ * k_);
    }

    Value apply(Graph& g, Value x) {
        return conv_transpose1d(x, g.param(w), g.param(b), c_out, k, stride, trim_l, trim_r);
    }

    void collect(std::vector<Param*>& ps) {
        ps.push_back(&w);
        ps.push_back(&b);
    }
};

struct LayerNorm {
    Param gamma, beta;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int64_t dim) : gamma(name + ".g", Tensor({dim})), beta(name + ".b", Tensor({dim})) {
        gamma.value.fill(1.0f);
    }

    Value apply(Graph& g, Value x) { return layer_norm(x, g.param(gamma), g.param(beta)); }

    void collect(std::vector<Param*>& ps) {
        ps.push_back(&gamma);
        ps.push_back(&beta);
    }
};

struct EmbeddingTable {
    Param table;

    EmbeddingTable() = default;
    EmbeddingTable(const std::string& name, int64_t vocab, int64_t dim, Rng& rng)
        : table(name + ".w", Tensor({vocab, dim})) {
        init_normal(table.value, rng, 0.02);
    }

    Value apply(Graph& g, const std::vector<int32_t>& ids) { return embedding(g.param(table), ids); }

    void collect(std::vector<Param*>& ps) { ps.push_back(&table); }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

    explicit AdamW(std::vector<Param*> params) : params_(std::move(params)) {
        for (Param* p : params_) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }

    void zero_grad() {
        for (Param* p : params_) p->zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, t_);
        const double bc2 = 1.0 - std::pow(beta2, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            Param* p = params_[i];
            if (!p->trainable) continue;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (int64_t j = 0; j < p->value.numel(); ++j) {
                const double gj = p->grad[j];
                m[j] = static_cast<float>(beta1 * m[j] + (1.0 - beta1) * gj);
                v[j] = static_cast<float>(beta2 * v[j] + (1.0 - beta2) * gj * gj);
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p->value[j] -= static_cast<float>(lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value[j]));
            }
        }
    }

    const std::vector<Param*>& params() const { return params_; }

private:
    std::vector<Param*> params_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

inline double warmup_cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr,
                               double min_lr = 0.0) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const double progress =
        total_steps > warmup_steps
            ? static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps)
            : 1.0;
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

} // namespace respeak::nn
