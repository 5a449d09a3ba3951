#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "respeak/fft.hpp"
#include "respeak/tensor.hpp"

namespace respeak::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline MatMap as_mat(Tensor& t) { return MatMap(t.data.data(), t.rows(), t.cols()); }
inline ConstMatMap as_mat(const Tensor& t) { return ConstMatMap(t.data.data(), t.rows(), t.cols()); }

// A trainable parameter. Graph::backward accumulates into `grad`.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}
    void zero_grad() { grad.fill(0.0f); }
};

class Graph;

struct Value {
    Graph* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
};

// Reverse-mode tape. Nodes are created in topological order; backward walks
// the tape in reverse. All shapes are checked when ops are built.
class Graph {
public:
    struct Node {
        Tensor val;
        Tensor grad; // allocated lazily during backward
        bool needs_grad = false;
        bool grad_alloc = false;
        Param* bound = nullptr;
        std::function<void(Graph&)> backward;
    };

    std::vector<Node> nodes;

    Value constant(Tensor t) { return push(std::move(t), false, nullptr); }

    Value leaf(Tensor t, bool needs_grad = true) { return push(std::move(t), needs_grad, nullptr); }

    Value param(Param& p) { return push(p.value, p.trainable, &p); }

    const Tensor& val(Value v) const { return nodes[v.id].val; }

    Tensor& grad_of(Value v) {
        ensure_grad(v.id);
        return nodes[v.id].grad;
    }

    bool needs_grad(Value v) const { return nodes[v.id].needs_grad; }

    void backward(Value loss) {
        Node& top = nodes[loss.id];
        if (top.val.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
        ensure_grad(loss.id);
        top.grad.fill(1.0f);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes[i];
            if (!n.needs_grad || !n.grad_alloc || !n.backward) continue;
            n.backward(*this);
        }
        for (auto& n : nodes) {
            if (n.bound && n.grad_alloc) {
                for (int64_t i = 0; i < n.grad.numel(); ++i) n.bound->grad[i] += n.grad[i];
            }
        }
    }

    // --- internals used by op builders ---
    Value push(Tensor t, bool needs_grad, Param* bound) {
        nodes.push_back(Node{std::move(t), Tensor(), needs_grad, false, bound, nullptr});
        return Value{this, static_cast<int>(nodes.size()) - 1};
    }

    void ensure_grad(int id) {
        Node& n = nodes[id];
        if (!n.grad_alloc) {
            n.grad = Tensor(n.val.shape);
            n.grad_alloc = true;
        }
    }

    void set_backward(Value v, std::function<void(Graph&)> fn) { nodes[v.id].backward = std::move(fn); }

    // add src into the grad buffer of node `id`
    void accum_grad(int id, const Tensor& src) {
        ensure_grad(id);
        Tensor& g = nodes[id].grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += src[i];
    }
};

namespace detail {
inline void check_same_graph(Value a, Value b) {
    if (a.g != b.g) throw std::invalid_argument("op: values belong to different graphs");
}
} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Value add(Value a, Value b) {
    detail::check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    Value v = g.push(std::move(out), g.needs_grad(a) || g.needs_grad(b), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, ib = b.id, iv = v.id;
        g.set_backward(v, [ia, ib, iv](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            if (gr.nodes[ia].needs_grad) gr.accum_grad(ia, go);
            if (gr.nodes[ib].needs_grad) gr.accum_grad(ib, go);
        });
    }
    return v;
}

inline Value sub(Value a, Value b) {
    detail::check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    Value v = g.push(std::move(out), g.needs_grad(a) || g.needs_grad(b), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, ib = b.id, iv = v.id;
        g.set_backward(v, [ia, ib, iv](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            if (gr.nodes[ia].needs_grad) gr.accum_grad(ia, go);
            if (gr.nodes[ib].needs_grad) {
                gr.ensure_grad(ib);
                Tensor& gb = gr.nodes[ib].grad;
                for (int64_t i = 0; i < gb.numel(); ++i) gb[i] -= go[i];
            }
        });
    }
    return v;
}

inline Value mul(Value a, Value b) {
    detail::check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (!ta.same_shape(tb)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    Value v = g.push(std::move(out), g.needs_grad(a) || g.needs_grad(b), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, ib = b.id, iv = v.id;
        g.set_backward(v, [ia, ib, iv](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            const Tensor& va = gr.nodes[ia].val;
            const Tensor& vb = gr.nodes[ib].val;
            if (gr.nodes[ia].needs_grad) {
                gr.ensure_grad(ia);
                Tensor& ga = gr.nodes[ia].grad;
                for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * vb[i];
            }
            if (gr.nodes[ib].needs_grad) {
                gr.ensure_grad(ib);
                Tensor& gb = gr.nodes[ib].grad;
                for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += go[i] * va[i];
            }
        });
    }
    return v;
}

inline Value scale(Value a, double s) {
    Graph& g = *a.g;
    Tensor out = g.val(a);
    const float fs = static_cast<float>(s);
    for (auto& x : out.data) x *= fs;
    Value v = g.push(std::move(out), g.needs_grad(a), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, iv = v.id;
        g.set_backward(v, [ia, iv, fs](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            gr.ensure_grad(ia);
            Tensor& ga = gr.nodes[ia].grad;
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * fs;
        });
    }
    return v;
}

// x: [N x C], b: [C]; adds b to every row
inline Value add_bias(Value x, Value b) {
    detail::check_same_graph(x, b);
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    const Tensor& tb = g.val(b);
    if (tb.numel() != tx.cols()) throw std::invalid_argument("add_bias: bias length mismatch");
    Tensor out = tx;
    const int64_t n = tx.rows(), c = tx.cols();
    for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < c; ++j) out.at(r, j) += tb[j];
    Value v = g.push(std::move(out), g.needs_grad(x) || g.needs_grad(b), nullptr);
    if (g.needs_grad(v)) {
        int ix = x.id, ib = b.id, iv = v.id;
        g.set_backward(v, [ix, ib, iv, n, c](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            if (gr.nodes[ix].needs_grad) gr.accum_grad(ix, go);
            if (gr.nodes[ib].needs_grad) {
                gr.ensure_grad(ib);
                Tensor& gb = gr.nodes[ib].grad;
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < c; ++j) gb[j] += go.at(r, j);
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// matmul / layout ops
// ---------------------------------------------------------------------------

inline Value matmul(Value a, Value b, bool trans_a = false, bool trans_b = false) {
    detail::check_same_graph(a, b);
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    const int64_t am = trans_a ? ta.cols() : ta.rows();
    const int64_t ak = trans_a ? ta.rows() : ta.cols();
    const int64_t bk = trans_b ? tb.cols() : tb.rows();
    const int64_t bn = trans_b ? tb.rows() : tb.cols();
    if (ak != bk) throw std::invalid_argument("matmul: inner dimension mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out({am, bn});
    {
        auto A = as_mat(ta);
        auto B = as_mat(tb);
        auto C = as_mat(out);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    Value v = g.push(std::move(out), g.needs_grad(a) || g.needs_grad(b), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, ib = b.id, iv = v.id;
        g.set_backward(v, [ia, ib, iv, trans_a, trans_b](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            const Tensor& va = gr.nodes[ia].val;
            const Tensor& vb = gr.nodes[ib].val;
            auto G = as_mat(go);
            auto A = as_mat(va);
            auto B = as_mat(vb);
            if (gr.nodes[ia].needs_grad) {
                gr.ensure_grad(ia);
                auto GA = as_mat(gr.nodes[ia].grad);
                if (!trans_a && !trans_b) GA.noalias() += G * B.transpose();
                else if (trans_a && !trans_b) GA.noalias() += B * G.transpose();
                else if (!trans_a && trans_b) GA.noalias() += G * B;
                else GA.noalias() += B.transpose() * G.transpose();
            }
            if (gr.nodes[ib].needs_grad) {
                gr.ensure_grad(ib);
                auto GB = as_mat(gr.nodes[ib].grad);
                if (!trans_a && !trans_b) GB.noalias() += A.transpose() * G;
                else if (trans_a && !trans_b) GB.noalias() += A * G;
                else if (!trans_a && trans_b) GB.noalias() += G.transpose() * A;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        });
    }
    return v;
}

inline Value transpose(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    Tensor out({ta.cols(), ta.rows()});
    as_mat(out) = as_mat(ta).transpose();
    Value v = g.push(std::move(out), g.needs_grad(a), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, iv = v.id;
        g.set_backward(v, [ia, iv](Graph& gr) {
            gr.ensure_grad(ia);
            as_mat(gr.nodes[ia].grad) += as_mat(gr.nodes[iv].grad).transpose();
        });
    }
    return v;
}

inline Value slice_rows(Value a, int64_t r0, int64_t r1) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    if (r0 < 0 || r1 > ta.rows() || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    const int64_t c = ta.cols();
    Tensor out({r1 - r0, c});
    std::copy(ta.data.begin() + r0 * c, ta.data.begin() + r1 * c, out.data.begin());
    Value v = g.push(std::move(out), g.needs_grad(a), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, iv = v.id;
        g.set_backward(v, [ia, iv, r0, c](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            gr.ensure_grad(ia);
            Tensor& ga = gr.nodes[ia].grad;
            for (int64_t i = 0; i < go.numel(); ++i) ga[r0 * c + i] += go[i];
        });
    }
    return v;
}

inline Value slice_cols(Value a, int64_t c0, int64_t c1) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    if (c0 < 0 || c1 > ta.cols() || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Tensor out({ta.rows(), c1 - c0});
    as_mat(out) = as_mat(ta).middleCols(c0, c1 - c0);
    Value v = g.push(std::move(out), g.needs_grad(a), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, iv = v.id;
        g.set_backward(v, [ia, iv, c0, c1](Graph& gr) {
            gr.ensure_grad(ia);
            as_mat(gr.nodes[ia].grad).middleCols(c0, c1 - c0) += as_mat(gr.nodes[iv].grad);
        });
    }
    return v;
}

inline Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    Graph& g = *parts[0].g;
    int64_t rows = 0;
    const int64_t cols = g.val(parts[0]).cols();
    bool any_grad = false;
    for (Value p : parts) {
        detail::check_same_graph(parts[0], p);
        if (g.val(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += g.val(p).rows();
        any_grad = any_grad || g.needs_grad(p);
    }
    Tensor out({rows, cols});
    int64_t off = 0;
    for (Value p : parts) {
        const Tensor& t = g.val(p);
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + off);
        off += t.numel();
    }
    Value v = g.push(std::move(out), any_grad, nullptr);
    if (any_grad) {
        std::vector<int> ids;
        std::vector<int64_t> sizes;
        for (Value p : parts) {
            ids.push_back(p.id);
            sizes.push_back(g.val(p).numel());
        }
        int iv = v.id;
        g.set_backward(v, [ids, sizes, iv](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            int64_t off2 = 0;
            for (size_t i = 0; i < ids.size(); ++i) {
                if (gr.nodes[ids[i]].needs_grad) {
                    gr.ensure_grad(ids[i]);
                    Tensor& gp = gr.nodes[ids[i]].grad;
                    for (int64_t j = 0; j < sizes[i]; ++j) gp[j] += go[off2 + j];
                }
                off2 += sizes[i];
            }
        });
    }
    return v;
}

inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    Graph& g = *parts[0].g;
    const int64_t rows = g.val(parts[0]).rows();
    int64_t cols = 0;
    bool any_grad = false;
    for (Value p : parts) {
        detail::check_same_graph(parts[0], p);
        if (g.val(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += g.val(p).cols();
        any_grad = any_grad || g.needs_grad(p);
    }
    Tensor out({rows, cols});
    int64_t coff = 0;
    for (Value p : parts) {
        const Tensor& t = g.val(p);
        as_mat(out).middleCols(coff, t.cols()) = as_mat(t);
        coff += t.cols();
    }
    Value v = g.push(std::move(out), any_grad, nullptr);
    if (any_grad) {
        std::vector<int> ids;
        std::vector<int64_t> widths;
        for (Value p : parts) {
            ids.push_back(p.id);
            widths.push_back(g.val(p).cols());
        }
        int iv = v.id;
        g.set_backward(v, [ids, widths, iv](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            int64_t coff2 = 0;
            for (size_t i = 0; i < ids.size(); ++i) {
                if (gr.nodes[ids[i]].needs_grad) {
                    gr.ensure_grad(ids[i]);
                    as_mat(gr.nodes[ids[i]].grad) += as_mat(go).middleCols(coff2, widths[i]);
                }
                coff2 += widths[i];
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

namespace detail {
template <typename F, typename DF>
Value unary(Value a, F fwd, DF dfwd_from_input) {
    Graph& g = *a.g;
    Tensor out = g.val(a);
    for (auto& x : out.data) x = fwd(x);
    Value v = g.push(std::move(out), g.needs_grad(a), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, iv = v.id;
        g.set_backward(v, [ia, iv, dfwd_from_input](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            const Tensor& in = gr.nodes[ia].val;
            gr.ensure_grad(ia);
            Tensor& ga = gr.nodes[ia].grad;
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += go[i] * dfwd_from_input(in[i]);
        });
    }
    return v;
}
} // namespace detail

inline Value relu(Value a) {
    return detail::unary(
        a, [](float x) { return x > 0.0f ? x : 0.0f; }, [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
}

inline Value elu(Value a) {
    return detail::unary(
        a, [](float x) { return x > 0.0f ? x : std::expm1(x); },
        [](float x) { return x > 0.0f ? 1.0f : std::exp(x); });
}

inline Value gelu(Value a) {
    return detail::unary(
        a, [](float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678f)); },
        [](float x) {
            const float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678f));
            const float pdf = 0.3989422804f * std::exp(-0.5f * x * x);
            return cdf + x * pdf;
        });
}

inline Value tanh_act(Value a) {
    return detail::unary(
        a, [](float x) { return std::tanh(x); },
        [](float x) {
            const float t = std::tanh(x);
            return 1.0f - t * t;
        });
}

inline Value sigmoid(Value a) {
    return detail::unary(
        a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](float x) {
            const float s = 1.0f / (1.0f + std::exp(-x));
            return s * (1.0f - s);
        });
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

inline Value layer_norm(Value x, Value gamma, Value beta, float eps = 1e-5f) {
    detail::check_same_graph(x, gamma);
    detail::check_same_graph(x, beta);
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    const int64_t n = tx.rows(), c = tx.cols();
    if (g.val(gamma).numel() != c || g.val(beta).numel() != c)
        throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
    Tensor out({n, c});
    Tensor xhat({n, c});
    Tensor inv_sigma({n});
    const Tensor& tg = g.val(gamma);
    const Tensor& tb = g.val(beta);
    for (int64_t r = 0; r < n; ++r) {
        float mean = 0.0f;
        for (int64_t j = 0; j < c; ++j) mean += tx.at(r, j);
        mean /= static_cast<float>(c);
        float var = 0.0f;
        for (int64_t j = 0; j < c; ++j) {
            const float d = tx.at(r, j) - mean;
            var += d * d;
        }
        var /= static_cast<float>(c);
        const float is = 1.0f / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (int64_t j = 0; j < c; ++j) {
            const float xh = (tx.at(r, j) - mean) * is;
            xhat.at(r, j) = xh;
            out.at(r, j) = xh * tg[j] + tb[j];
        }
    }
    Value v = g.push(std::move(out), g.needs_grad(x) || g.needs_grad(gamma) || g.needs_grad(beta), nullptr);
    if (g.needs_grad(v)) {
        int ix = x.id, ig = gamma.id, ib = beta.id, iv = v.id;
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        auto is = std::make_shared<Tensor>(std::move(inv_sigma));
        g.set_backward(v, [ix, ig, ib, iv, xh, is, n, c](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            const Tensor& tg2 = gr.nodes[ig].val;
            if (gr.nodes[ig].needs_grad) {
                gr.ensure_grad(ig);
                Tensor& gg = gr.nodes[ig].grad;
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < c; ++j) gg[j] += go.at(r, j) * xh->at(r, j);
            }
            if (gr.nodes[ib].needs_grad) {
                gr.ensure_grad(ib);
                Tensor& gb = gr.nodes[ib].grad;
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t j = 0; j < c; ++j) gb[j] += go.at(r, j);
            }
            if (gr.nodes[ix].needs_grad) {
                gr.ensure_grad(ix);
                Tensor& gx = gr.nodes[ix].grad;
                for (int64_t r = 0; r < n; ++r) {
                    float m1 = 0.0f, m2 = 0.0f;
                    for (int64_t j = 0; j < c; ++j) {
                        const float dy = go.at(r, j) * tg2[j];
                        m1 += dy;
                        m2 += dy * xh->at(r, j);
                    }
                    m1 /= static_cast<float>(c);
                    m2 /= static_cast<float>(c);
                    const float isr = (*is)[r];
                    for (int64_t j = 0; j < c; ++j) {
                        const float dy = go.at(r, j) * tg2[j];
                        gx.at(r, j) += (dy - m1 - xh->at(r, j) * m2) * isr;
                    }
                }
            }
        });
    }
    return v;
}

// Row-wise softmax over scores [Q x S]. Row i may only attend to columns
// j <= i + query_offset; the rest get zero probability.
inline Value causal_softmax(Value a, int64_t query_offset) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    const int64_t q = ta.rows(), s = ta.cols();
    Tensor out({q, s});
    for (int64_t r = 0; r < q; ++r) {
        const int64_t hi = std::min<int64_t>(s - 1, r + query_offset);
        if (hi < 0) throw std::invalid_argument("causal_softmax: row with empty support");
        float mx = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j <= hi; ++j) mx = std::max(mx, ta.at(r, j));
        float z = 0.0f;
        for (int64_t j = 0; j <= hi; ++j) {
            const float e = std::exp(ta.at(r, j) - mx);
            out.at(r, j) = e;
            z += e;
        }
        for (int64_t j = 0; j <= hi; ++j) out.at(r, j) /= z;
        for (int64_t j = hi + 1; j < s; ++j) out.at(r, j) = 0.0f;
    }
    Value v = g.push(std::move(out), g.needs_grad(a), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, iv = v.id;
        g.set_backward(v, [ia, iv, q, s, query_offset](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            const Tensor& y = gr.nodes[iv].val;
            gr.ensure_grad(ia);
            Tensor& ga = gr.nodes[ia].grad;
            for (int64_t r = 0; r < q; ++r) {
                const int64_t hi = std::min<int64_t>(s - 1, r + query_offset);
                float dot = 0.0f;
                for (int64_t j = 0; j <= hi; ++j) dot += go.at(r, j) * y.at(r, j);
                for (int64_t j = 0; j <= hi; ++j) ga.at(r, j) += y.at(r, j) * (go.at(r, j) - dot);
            }
        });
    }
    return v;
}

inline Value softmax_rows(Value a) { return causal_softmax(a, a.g->val(a).cols()); }

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

inline Value embedding(Value table, const std::vector<int32_t>& ids) {
    Graph& g = *table.g;
    const Tensor& tt = g.val(table);
    const int64_t v_size = tt.rows(), e = tt.cols();
    Tensor out({static_cast<int64_t>(ids.size()), e});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v_size)
            throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " out of range [0," + std::to_string(v_size) + ")");
        std::copy(tt.data.begin() + ids[i] * e, tt.data.begin() + (ids[i] + 1) * e,
                  out.data.begin() + static_cast<int64_t>(i) * e);
    }
    Value v = g.push(std::move(out), g.needs_grad(table), nullptr);
    if (g.needs_grad(v)) {
        int it = table.id, iv = v.id;
        auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
        g.set_backward(v, [it, iv, ids_copy, e](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            gr.ensure_grad(it);
            Tensor& gt = gr.nodes[it].grad;
            for (size_t i = 0; i < ids_copy->size(); ++i) {
                const int64_t row = (*ids_copy)[i];
                for (int64_t j = 0; j < e; ++j) gt[row * e + j] += go[static_cast<int64_t>(i) * e + j];
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// conv1d / conv_transpose1d (feature maps are [channels x time])
// ---------------------------------------------------------------------------

namespace detail {
// X: [C x T] padded access; col matrix: [(C*k) x T_out], col(r = c*k + j, t) = X[c, t*stride + j - pad_l]
inline void im2col(const Tensor& x, int64_t k, int64_t stride, int64_t pad_l, int64_t t_out, Tensor& cols) {
    const int64_t c_in = x.rows(), t_in = x.cols();
    for (int64_t c = 0; c < c_in; ++c) {
        for (int64_t j = 0; j < k; ++j) {
            float* dst = cols.data.data() + (c * k + j) * t_out;
            for (int64_t t = 0; t < t_out; ++t) {
                const int64_t src = t * stride + j - pad_l;
                dst[t] = (src >= 0 && src < t_in) ? x.at(c, src) : 0.0f;
            }
        }
    }
}

inline void col2im_accum(const Tensor& cols, int64_t k, int64_t stride, int64_t pad_l, Tensor& x) {
    const int64_t c_in = x.rows(), t_in = x.cols();
    const int64_t t_out = cols.cols();
    for (int64_t c = 0; c < c_in; ++c) {
        for (int64_t j = 0; j < k; ++j) {
            const float* src = cols.data.data() + (c * k + j) * t_out;
            for (int64_t t = 0; t < t_out; ++t) {
                const int64_t dst = t * stride + j - pad_l;
                if (dst >= 0 && dst < t_in) x.at(c, dst) += src[t];
            }
        }
    }
}
} // namespace detail

// x: [C_in x T], w: [C_out x (C_in*k)], b: [C_out] (or invalid Value for none)
inline Value conv1d(Value x, Value w, Value b, int64_t k, int64_t stride, int64_t pad_l, int64_t pad_r) {
    detail::check_same_graph(x, w);
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    const int64_t c_in = tx.rows(), t_in = tx.cols();
    if (tw.cols() != c_in * k) throw std::invalid_argument("conv1d: weight shape mismatch");
    const int64_t c_out = tw.rows();
    const int64_t t_out = (t_in + pad_l + pad_r - k) / stride + 1;
    if (t_out <= 0) throw std::invalid_argument("conv1d: output length would be non-positive");
    Tensor cols({c_in * k, t_out});
    detail::im2col(tx, k, stride, pad_l, t_out, cols);
    Tensor out({c_out, t_out});
    as_mat(out).noalias() = as_mat(tw) * as_mat(cols);
    if (b.valid()) {
        const Tensor& tb = g.val(b);
        if (tb.numel() != c_out) throw std::invalid_argument("conv1d: bias length mismatch");
        for (int64_t c = 0; c < c_out; ++c)
            for (int64_t t = 0; t < t_out; ++t) out.at(c, t) += tb[c];
    }
    bool ng = g.needs_grad(x) || g.needs_grad(w) || (b.valid() && g.needs_grad(b));
    Value v = g.push(std::move(out), ng, nullptr);
    if (ng) {
        int ix = x.id, iw = w.id, ib = b.valid() ? b.id : -1, iv = v.id;
        auto cols_keep = std::make_shared<Tensor>(std::move(cols));
        g.set_backward(v, [ix, iw, ib, iv, cols_keep, k, stride, pad_l](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            const Tensor& tw2 = gr.nodes[iw].val;
            if (gr.nodes[iw].needs_grad) {
                gr.ensure_grad(iw);
                as_mat(gr.nodes[iw].grad).noalias() += as_mat(go) * as_mat(*cols_keep).transpose();
            }
            if (ib >= 0 && gr.nodes[ib].needs_grad) {
                gr.ensure_grad(ib);
                Tensor& gb = gr.nodes[ib].grad;
                for (int64_t c = 0; c < go.rows(); ++c)
                    for (int64_t t = 0; t < go.cols(); ++t) gb[c] += go.at(c, t);
            }
            if (gr.nodes[ix].needs_grad) {
                Tensor dcols({cols_keep->rows(), cols_keep->cols()});
                as_mat(dcols).noalias() = as_mat(tw2).transpose() * as_mat(go);
                gr.ensure_grad(ix);
                detail::col2im_accum(dcols, k, stride, pad_l, gr.nodes[ix].grad);
            }
        });
    }
    return v;
}

// Transposed conv. x: [C_in x T_in], w: [(C_out*k) x C_in], b: [C_out].
// Full output length (T_in-1)*stride + k, then trim_l/trim_r removed.
inline Value conv_transpose1d(Value x, Value w, Value b, int64_t c_out, int64_t k, int64_t stride,
                              int64_t trim_l, int64_t trim_r) {
    detail::check_same_graph(x, w);
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    const int64_t c_in = tx.rows(), t_in = tx.cols();
    if (tw.rows() != c_out * k || tw.cols() != c_in)
        throw std::invalid_argument("conv_transpose1d: weight shape mismatch");
    const int64_t t_full = (t_in - 1) * stride + k;
    const int64_t t_out = t_full - trim_l - trim_r;
    if (t_out <= 0) throw std::invalid_argument("conv_transpose1d: output length would be non-positive");
    Tensor cols({c_out * k, t_in});
    as_mat(cols).noalias() = as_mat(tw) * as_mat(tx);
    Tensor full({c_out, t_full});
    // overlap-add: full[c, t*stride + j] += cols[c*k + j, t]
    for (int64_t c = 0; c < c_out; ++c)
        for (int64_t j = 0; j < k; ++j) {
            const float* src = cols.data.data() + (c * k + j) * t_in;
            float* dst = full.data.data() + c * t_full + j;
            for (int64_t t = 0; t < t_in; ++t) dst[t * stride] += src[t];
        }
    Tensor out({c_out, t_out});
    for (int64_t c = 0; c < c_out; ++c)
        std::copy(full.data.begin() + c * t_full + trim_l, full.data.begin() + c * t_full + trim_l + t_out,
                  out.data.begin() + c * t_out);
    if (b.valid()) {
        const Tensor& tb = g.val(b);
        if (tb.numel() != c_out) throw std::invalid_argument("conv_transpose1d: bias length mismatch");
        for (int64_t c = 0; c < c_out; ++c)
            for (int64_t t = 0; t < t_out; ++t) out.at(c, t) += tb[c];
    }
    bool ng = g.needs_grad(x) || g.needs_grad(w) || (b.valid() && g.needs_grad(b));
    Value v = g.push(std::move(out), ng, nullptr);
    if (ng) {
        int ix = x.id, iw = w.id, ib = b.valid() ? b.id : -1, iv = v.id;
        g.set_backward(v, [ix, iw, ib, iv, c_out, k, stride, trim_l, t_full, t_in](Graph& gr) {
            const Tensor& go = gr.nodes[iv].grad;
            // re-pad the trimmed gradient to full length
            Tensor gfull({c_out, t_full});
            for (int64_t c = 0; c < c_out; ++c)
                for (int64_t t = 0; t < go.cols(); ++t) gfull.at(c, trim_l + t) = go.at(c, t);
            // dcols[c*k + j, t] = gfull[c, t*stride + j]
            Tensor dcols({c_out * k, t_in});
            for (int64_t c = 0; c < c_out; ++c)
                for (int64_t j = 0; j < k; ++j) {
                    float* dst = dcols.data.data() + (c * k + j) * t_in;
                    const float* src = gfull.data.data() + c * t_full + j;
                    for (int64_t t = 0; t < t_in; ++t) dst[t] = src[t * stride];
                }
            if (gr.nodes[iw].needs_grad) {
                gr.ensure_grad(iw);
                as_mat(gr.nodes[iw].grad).noalias() += as_mat(dcols) * as_mat(gr.nodes[ix].val).transpose();
            }
            if (ib >= 0 && gr.nodes[ib].needs_grad) {
                gr.ensure_grad(ib);
                Tensor& gb = gr.nodes[ib].grad;
                for (int64_t c = 0; c < go.rows(); ++c)
                    for (int64_t t = 0; t < go.cols(); ++t) gb[c] += go.at(c, t);
            }
            if (gr.nodes[ix].needs_grad) {
                gr.ensure_grad(ix);
                as_mat(gr.nodes[ix].grad).noalias() += as_mat(gr.nodes[iw].val).transpose() * as_mat(dcols);
            }
        });
    }
    return v;
}

// ---------------------------------------------------------------------------
// losses / reductions
// ---------------------------------------------------------------------------

inline Value sum_all(Value a) {
    Graph& g = *a.g;
    const Tensor& ta = g.val(a);
    Tensor out({1});
    double acc = 0.0;
    for (float x : ta.data) acc += x;
    out[0] = static_cast<float>(acc);
    Value v = g.push(std::move(out), g.needs_grad(a), nullptr);
    if (g.needs_grad(v)) {
        int ia = a.id, iv = v.id;
        g.set_backward(v, [ia, iv](Graph& gr) {
            const float go = gr.nodes[iv].grad[0];
            gr.ensure_grad(ia);
            for (auto& x : gr.nodes[ia].grad.data) x += go;
        });
    }
    return v;
}

inline Value mean_all(Value a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.g->val(a).numel())); }

// mean |x - target| with constant target
inline Value l1_loss(Value x, const Tensor& target) {
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    if (!tx.same_shape(target)) throw std::invalid_argument("l1_loss: shape mismatch");
    Tensor out({1});
    double acc = 0.0;
    for (int64_t i = 0; i < tx.numel(); ++i) acc += std::abs(tx[i] - target[i]);
    out[0] = static_cast<float>(acc / static_cast<double>(tx.numel()));
    Value v = g.push(std::move(out), g.needs_grad(x), nullptr);
    if (g.needs_grad(v)) {
        int ix = x.id, iv = v.id;
        auto tgt = std::make_shared<Tensor>(target);
        g.set_backward(v, [ix, iv, tgt](Graph& gr) {
            const float go = gr.nodes[iv].grad[0];
            const Tensor& vx = gr.nodes[ix].val;
            gr.ensure_grad(ix);
            Tensor& gx = gr.nodes[ix].grad;
            const float inv_n = 1.0f / static_cast<float>(vx.numel());
            for (int64_t i = 0; i < vx.numel(); ++i) {
                const float d = vx[i] - (*tgt)[i];
                gx[i] += go * inv_n * (d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f));
            }
        });
    }
    return v;
}

// mean (x - target)^2 with constant target
inline Value mse_loss(Value x, const Tensor& target) {
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    if (!tx.same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
    Tensor out({1});
    double acc = 0.0;
    for (int64_t i = 0; i < tx.numel(); ++i) {
        const double d = tx[i] - target[i];
        acc += d * d;
    }
    out[0] = static_cast<float>(acc / static_cast<double>(tx.numel()));
    Value v = g.push(std::move(out), g.needs_grad(x), nullptr);
    if (g.needs_grad(v)) {
        int ix = x.id, iv = v.id;
        auto tgt = std::make_shared<Tensor>(target);
        g.set_backward(v, [ix, iv, tgt](Graph& gr) {
            const float go = gr.nodes[iv].grad[0];
            const Tensor& vx = gr.nodes[ix].val;
            gr.ensure_grad(ix);
            Tensor& gx = gr.nodes[ix].grad;
            const float c = 2.0f / static_cast<float>(vx.numel());
            for (int64_t i = 0; i < vx.numel(); ++i) gx[i] += go * c * (vx[i] - (*tgt)[i]);
        });
    }
    return v;
}

// sum over rows r with mask[r] != 0 of -log softmax(logits[r])[target[r]].
// Rows with mask[r] == 0 contribute nothing and receive exactly zero gradient.
inline Value masked_nll_sum(Value logits, const std::vector<int32_t>& targets, const std::vector<uint8_t>& mask) {
    Graph& g = *logits.g;
    const Tensor& tl = g.val(logits);
    const int64_t n = tl.rows(), vsz = tl.cols();
    if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(mask.size()) != n)
        throw std::invalid_argument("masked_nll_sum: targets/mask length mismatch");
    Tensor out({1});
    double acc = 0.0;
    for (int64_t r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        if (targets[r] < 0 || targets[r] >= vsz) throw std::out_of_range("masked_nll_sum: target id out of range");
        float mx = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j < vsz; ++j) mx = std::max(mx, tl.at(r, j));
        double z = 0.0;
        for (int64_t j = 0; j < vsz; ++j) z += std::exp(static_cast<double>(tl.at(r, j) - mx));
        acc += std::log(z) - static_cast<double>(tl.at(r, targets[r]) - mx);
    }
    out[0] = static_cast<float>(acc);
    Value v = g.push(std::move(out), g.needs_grad(logits), nullptr);
    if (g.needs_grad(v)) {
        int il = logits.id, iv = v.id;
        auto tg = std::make_shared<std::vector<int32_t>>(targets);
        auto mk = std::make_shared<std::vector<uint8_t>>(mask);
        g.set_backward(v, [il, iv, tg, mk, n, vsz](Graph& gr) {
            const float go = gr.nodes[iv].grad[0];
            const Tensor& tl2 = gr.nodes[il].val;
            gr.ensure_grad(il);
            Tensor& gl = gr.nodes[il].grad;
            for (int64_t r = 0; r < n; ++r) {
                if (!(*mk)[r]) continue;
                float mx = -std::numeric_limits<float>::infinity();
                for (int64_t j = 0; j < vsz; ++j) mx = std::max(mx, tl2.at(r, j));
                double z = 0.0;
                for (int64_t j = 0; j < vsz; ++j) z += std::exp(static_cast<double>(tl2.at(r, j) - mx));
                for (int64_t j = 0; j < vsz; ++j) {
                    const float p = static_cast<float>(std::exp(static_cast<double>(tl2.at(r, j) - mx)) / z);
                    gl.at(r, j) += go * (p - (j == (*tg)[r] ? 1.0f : 0.0f));
                }
            }
        });
    }
    return v;
}

// mean over rows with mask != 0 of BCE-with-logits against float targets in {0,1}
inline Value masked_bce_logits(Value logits, const std::vector<float>& targets, const std::vector<uint8_t>& mask) {
    Graph& g = *logits.g;
    const Tensor& tl = g.val(logits);
    const int64_t n = tl.numel();
    if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(mask.size()) != n)
        throw std::invalid_argument("masked_bce_logits: targets/mask length mismatch");
    int64_t cnt = 0;
    for (auto m : mask) cnt += m ? 1 : 0;
    if (cnt == 0) throw std::invalid_argument("masked_bce_logits: empty mask");
    Tensor out({1});
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const double x = tl[i], y = targets[i];
        // log(1 + e^-|x|) + max(x,0) - x*y
        acc += std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * y;
    }
    out[0] = static_cast<float>(acc / static_cast<double>(cnt));
    Value v = g.push(std::move(out), g.needs_grad(logits), nullptr);
    if (g.needs_grad(v)) {
        int il = logits.id, iv = v.id;
        auto tg = std::make_shared<std::vector<float>>(targets);
        auto mk = std::make_shared<std::vector<uint8_t>>(mask);
        g.set_backward(v, [il, iv, tg, mk, n, cnt](Graph& gr) {
            const float go = gr.nodes[iv].grad[0];
            const Tensor& tl2 = gr.nodes[il].val;
            gr.ensure_grad(il);
            Tensor& gl = gr.nodes[il].grad;
            const float inv = 1.0f / static_cast<float>(cnt);
            for (int64_t i = 0; i < n; ++i) {
                if (!(*mk)[i]) continue;
                const float s = 1.0f / (1.0f + std::exp(-tl2[i]));
                gl[i] += go * inv * (s - (*tg)[i]);
            }
        });
    }
    return v;
}

// forward yields q (constant); gradient passes through to z unchanged
inline Value straight_through(Value z, const Tensor& q) {
    Graph& g = *z.g;
    if (!g.val(z).same_shape(q)) throw std::invalid_argument("straight_through: shape mismatch");
    Value v = g.push(q, g.needs_grad(z), nullptr);
    if (g.needs_grad(v)) {
        int iz = z.id, iv = v.id;
        g.set_backward(v, [iz, iv](Graph& gr) { gr.accum_grad(iz, gr.nodes[iv].grad); });
    }
    return v;
}

// Multi-resolution log-magnitude STFT distance (L1 on log magnitudes, mean
// over all bins and resolutions) between 1-D signal x and a constant ref.
inline Value stft_logmag_l1(Value x, const Tensor& ref, const std::vector<int64_t>& fft_sizes) {
    Graph& g = *x.g;
    const Tensor& tx = g.val(x);
    if (tx.numel() != ref.numel()) throw std::invalid_argument("stft_logmag_l1: length mismatch");
    const int64_t n = tx.numel();
    constexpr double kEps = 1e-5;

    struct WindowGrad {
        int64_t start;
        std::vector<double> dsig; // dL/d(signal segment), window already applied
    };
    auto wgrads = std::make_shared<std::vector<WindowGrad>>();
    double total = 0.0;
    int64_t count = 0;

    // first pass: count bins to fix normalization before computing grads
    std::vector<std::pair<int64_t, int64_t>> layout; // (n_fft, n_windows)
    for (int64_t n_fft : fft_sizes) {
        if (n_fft > n) continue;
        const int64_t hop = n_fft / 4;
        const int64_t n_win = (n - n_fft) / hop + 1;
        layout.push_back({n_fft, n_win});
        count += n_win * n_fft;
    }
    if (count == 0) throw std::invalid_argument("stft_logmag_l1: signal shorter than every FFT size");

    for (auto [n_fft, n_win] : layout) {
        const int64_t hop = n_fft / 4;
        const auto win = hann_window(static_cast<size_t>(n_fft));
        std::vector<std::complex<double>> bx(static_cast<size_t>(n_fft)), br(static_cast<size_t>(n_fft));
        for (int64_t w = 0; w < n_win; ++w) {
            const int64_t start = w * hop;
            for (int64_t i = 0; i < n_fft; ++i) {
                bx[i] = {static_cast<double>(tx[start + i]) * win[i], 0.0};
                br[i] = {static_cast<double>(ref[start + i]) * win[i], 0.0};
            }
            fft_inplace(bx);
            fft_inplace(br);
            WindowGrad wg;
            wg.start = start;
            std::vector<std::complex<double>> gbins(static_cast<size_t>(n_fft));
            for (int64_t j = 0; j < n_fft; ++j) {
                const double mx = std::abs(bx[j]);
                const double mr = std::abs(br[j]);
                const double diff = std::log(mx + kEps) - std::log(mr + kEps);
                total += std::abs(diff);
                const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                // d|X|/dX = X/|X|; guard |X| = 0
                const double dmag = sgn / (mx + kEps) / static_cast<double>(count);
                gbins[j] = mx > 0.0 ? bx[j] * (dmag / mx) : std::complex<double>(0.0, 0.0);
            }
            // adjoint of the DFT: dL/ds = Re(conj(FFT(conj(g))))
            for (auto& c : gbins) c = std::conj(c);
            fft_inplace(gbins);
            wg.dsig.resize(static_cast<size_t>(n_fft));
            for (int64_t i = 0; i < n_fft; ++i) wg.dsig[i] = std::real(gbins[i]) * win[i];
            wgrads->push_back(std::move(wg));
        }
    }

    Tensor out({1});
    out[0] = static_cast<float>(total / static_cast<double>(count));
    Value v = g.push(std::move(out), g.needs_grad(x), nullptr);
    if (g.needs_grad(v)) {
        int ix = x.id, iv = v.id;
        g.set_backward(v, [ix, iv, wgrads](Graph& gr) {
            const float go = gr.nodes[iv].grad[0];
            gr.ensure_grad(ix);
            Tensor& gx = gr.nodes[ix].grad;
            for (const auto& wg : *wgrads)
                for (size_t i = 0; i < wg.dsig.size(); ++i)
                    gx[wg.start + static_cast<int64_t>(i)] += go * static_cast<float>(wg.dsig[i]);
        });
    }
    return v;
}

} // namespace respeak::nn
