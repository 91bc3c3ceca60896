#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "layoutdiff/errors.hpp"
#include "layoutdiff/rng.hpp"

namespace layoutdiff::nn {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

// Named tensor with its gradient accumulator. Everything the optimizer and
// the checkpoint codec touch goes through a registry of these.
template <class S>
struct Param {
    std::string name;
    Mat<S> value;
    Mat<S> grad;

    void resize(Eigen::Index rows, Eigen::Index cols) {
        value = Mat<S>::Zero(rows, cols);
        grad = Mat<S>::Zero(rows, cols);
    }
    void zero_grad() { grad.setZero(); }
    long size() const { return static_cast<long>(value.size()); }
};

template <class S>
using ParamRefs = std::vector<Param<S>*>;

template <class S>
inline void xavier_init(Mat<S>& m, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            m(i, j) = static_cast<S>(rng.uniform(-bound, bound));
        }
    }
}

// y = x * W + b, x rows are tokens.
template <class S>
struct Linear {
    Param<S> weight;  // in x out
    Param<S> bias;    // 1 x out
    bool has_bias = true;

    void setup(const std::string& name, Eigen::Index in, Eigen::Index out, bool with_bias = true) {
        weight.name = name + ".weight";
        weight.resize(in, out);
        bias.name = name + ".bias";
        bias.resize(1, out);
        has_bias = with_bias;
    }

    void init_xavier(Rng& rng) { xavier_init(weight.value, rng); }

    void collect(ParamRefs<S>& refs) {
        refs.push_back(&weight);
        if (has_bias) refs.push_back(&bias);
    }

    Mat<S> forward(const Mat<S>& x) const {
        Mat<S> y = x * weight.value;
        if (has_bias) y.rowwise() += bias.value.row(0);
        return y;
    }

    // Accumulates parameter gradients, returns gradient w.r.t. the input.
    Mat<S> backward(const Mat<S>& x, const Mat<S>& grad_out) {
        weight.grad.noalias() += x.transpose() * grad_out;
        if (has_bias) bias.grad.row(0) += grad_out.colwise().sum();
        return grad_out * weight.value.transpose();
    }
};

// Parameter-free layer norm over each row; modulation supplies shift/scale.
template <class S>
struct LayerNormCache {
    Mat<S> xhat;
    Vec<S> inv_std;
};

template <class S>
inline Mat<S> layer_norm(const Mat<S>& x, LayerNormCache<S>& cache, S eps = static_cast<S>(1e-5)) {
    const Eigen::Index rows = x.rows(), cols = x.cols();
    cache.xhat.resize(rows, cols);
    cache.inv_std.resize(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const S mean = x.row(r).mean();
        const S var = (x.row(r).array() - mean).square().mean();
        const S inv = static_cast<S>(1) / std::sqrt(var + eps);
        cache.inv_std(r) = inv;
        cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
    }
    return cache.xhat;
}

template <class S>
inline Mat<S> layer_norm_backward(const LayerNormCache<S>& cache, const Mat<S>& grad_out) {
    const Eigen::Index rows = grad_out.rows(), cols = grad_out.cols();
    Mat<S> grad_in(rows, cols);
    const S inv_cols = static_cast<S>(1) / static_cast<S>(cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const S g_mean = grad_out.row(r).mean();
        const S gx_mean = (grad_out.row(r).array() * cache.xhat.row(r).array()).mean();
        grad_in.row(r) =
            cache.inv_std(r) *
            (grad_out.row(r).array() - g_mean - cache.xhat.row(r).array() * gx_mean);
        (void)inv_cols;
    }
    return grad_in;
}

template <class S>
inline Mat<S> silu(const Mat<S>& x) {
    return x.array() / (1 + (-x.array()).exp());
}

template <class S>
inline Mat<S> silu_backward(const Mat<S>& x, const Mat<S>& grad_out) {
    const auto sig = (1 + (-x.array()).exp()).inverse();
    return (grad_out.array() * (sig * (1 + x.array() * (1 - sig)))).matrix();
}

// Exact GELU (erf form); clean derivative.
template <class S>
inline Mat<S> gelu(const Mat<S>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    return x.unaryExpr([&](S v) {
        return static_cast<S>(0.5 * static_cast<double>(v) *
                              (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
    });
}

template <class S>
inline Mat<S> gelu_backward(const Mat<S>& x, const Mat<S>& grad_out) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Mat<S> grad(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = static_cast<double>(x(i));
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        grad(i) = grad_out(i) * static_cast<S>(cdf + v * pdf);
    }
    return grad;
}

// Sinusoidal features of a scalar, half sine / half cosine, DiT-style
// frequency ladder.
template <class S>
inline RowVec<S> sinusoidal_embedding(double value, int dim, double max_period = 10000.0) {
    RowVec<S> out(dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(max_period) * i / half);
        out(i) = static_cast<S>(std::cos(value * freq));
        out(half + i) = static_cast<S>(std::sin(value * freq));
    }
    if (dim % 2 == 1) out(dim - 1) = static_cast<S>(0);
    return out;
}

// One (query-range, key-range) pair inside a batched attention call.
struct AttnSpan {
    Eigen::Index q_offset = 0;
    Eigen::Index q_rows = 0;
    Eigen::Index k_offset = 0;
    Eigen::Index k_rows = 0;
};

template <class S>
struct AttentionCache {
    Mat<S> xq, xkv;             // inputs as given
    Mat<S> q, k, v;             // projected
    Mat<S> concat;              // per-head outputs merged, pre output-projection
    std::vector<Mat<S>> probs;  // span-major, then head-major: probs[span * heads + h]
    std::vector<AttnSpan> spans;
    const std::vector<bool>* key_valid = nullptr;  // indexed by kv row, nullptr = all valid
};

// Multi-head attention over a batch of independent spans packed into one
// matrix. Projections run as single GEMMs across the whole batch; only the
// score/softmax stage loops per span. Masked keys are excluded from the
// softmax; a query with no visible key yields a zero row.
template <class S>
struct MultiheadAttention {
    int heads = 1;
    Linear<S> wq, wk, wv, wo;

    void setup(const std::string& name, int d_model, int n_heads) {
        if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by heads");
        heads = n_heads;
        wq.setup(name + ".wq", d_model, d_model);
        wk.setup(name + ".wk", d_model, d_model);
        wv.setup(name + ".wv", d_model, d_model);
        wo.setup(name + ".wo", d_model, d_model);
    }

    void init_xavier(Rng& rng) {
        wq.init_xavier(rng);
        wk.init_xavier(rng);
        wv.init_xavier(rng);
        wo.init_xavier(rng);
    }

    void collect(ParamRefs<S>& refs) {
        wq.collect(refs);
        wk.collect(refs);
        wv.collect(refs);
        wo.collect(refs);
    }

    Mat<S> forward(const Mat<S>& xq, const Mat<S>& xkv, const std::vector<AttnSpan>& spans,
                   const std::vector<bool>* key_valid, AttentionCache<S>& cache) const {
        const Eigen::Index dm = xq.cols();
        const Eigen::Index dh = dm / heads;
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
        cache.xq = xq;
        cache.xkv = xkv;
        cache.q = wq.forward(xq);
        cache.k = wk.forward(xkv);
        cache.v = wv.forward(xkv);
        cache.spans = spans;
        cache.key_valid = key_valid;
        cache.probs.assign(spans.size() * static_cast<std::size_t>(heads), Mat<S>());
        cache.concat = Mat<S>::Zero(xq.rows(), dm);
        for (std::size_t si = 0; si < spans.size(); ++si) {
            const AttnSpan& sp = spans[si];
            for (int h = 0; h < heads; ++h) {
                const auto qh = cache.q.block(sp.q_offset, h * dh, sp.q_rows, dh);
                const auto kh = cache.k.block(sp.k_offset, h * dh, sp.k_rows, dh);
                const auto vh = cache.v.block(sp.k_offset, h * dh, sp.k_rows, dh);
                Mat<S> scores = qh * kh.transpose() * scale;
                Mat<S>& probs = cache.probs[si * static_cast<std::size_t>(heads) +
                                            static_cast<std::size_t>(h)];
                probs = masked_softmax(scores, sp, key_valid);
                cache.concat.block(sp.q_offset, h * dh, sp.q_rows, dh).noalias() = probs * vh;
            }
        }
        return wo.forward(cache.concat);
    }

    // Returns gradients w.r.t. xq and xkv (query and key/value inputs).
    std::pair<Mat<S>, Mat<S>> backward(AttentionCache<S>& cache, const Mat<S>& grad_out) {
        const Eigen::Index dm = cache.xq.cols();
        const Eigen::Index dh = dm / heads;
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
        Mat<S> g_concat = wo.backward(cache.concat, grad_out);
        Mat<S> gq = Mat<S>::Zero(cache.q.rows(), dm);
        Mat<S> gk = Mat<S>::Zero(cache.k.rows(), dm);
        Mat<S> gv = Mat<S>::Zero(cache.v.rows(), dm);
        for (std::size_t si = 0; si < cache.spans.size(); ++si) {
            const AttnSpan& sp = cache.spans[si];
            for (int h = 0; h < heads; ++h) {
                const Mat<S>& probs = cache.probs[si * static_cast<std::size_t>(heads) +
                                                  static_cast<std::size_t>(h)];
                const auto g_oh = g_concat.block(sp.q_offset, h * dh, sp.q_rows, dh);
                const auto kh = cache.k.block(sp.k_offset, h * dh, sp.k_rows, dh);
                const auto vh = cache.v.block(sp.k_offset, h * dh, sp.k_rows, dh);
                const auto qh = cache.q.block(sp.q_offset, h * dh, sp.q_rows, dh);
                Mat<S> g_probs = g_oh * vh.transpose();
                gv.block(sp.k_offset, h * dh, sp.k_rows, dh).noalias() += probs.transpose() * g_oh;
                // softmax backward: rows with all-masked keys have zero probs
                // and therefore zero gradient.
                Mat<S> g_scores(probs.rows(), probs.cols());
                for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                    const S dot = probs.row(r).dot(g_probs.row(r));
                    g_scores.row(r) =
                        probs.row(r).array() * (g_probs.row(r).array() - dot);
                }
                gq.block(sp.q_offset, h * dh, sp.q_rows, dh).noalias() += g_scores * kh * scale;
                gk.block(sp.k_offset, h * dh, sp.k_rows, dh).noalias() +=
                    g_scores.transpose() * qh * scale;
            }
        }
        Mat<S> g_xq = wq.backward(cache.xq, gq);
        Mat<S> g_xkv = wk.backward(cache.xkv, gk);
        g_xkv.noalias() += wv.backward(cache.xkv, gv);
        return {std::move(g_xq), std::move(g_xkv)};
    }

private:
    static Mat<S> masked_softmax(Mat<S>& scores, const AttnSpan& sp,
                                 const std::vector<bool>* key_valid) {
        Mat<S> probs = Mat<S>::Zero(scores.rows(), scores.cols());
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
            S max_score = std::numeric_limits<S>::lowest();
            bool any = false;
            for (Eigen::Index c = 0; c < scores.cols(); ++c) {
                if (key_valid && !(*key_valid)[static_cast<std::size_t>(sp.k_offset + c)]) continue;
                any = true;
                max_score = std::max(max_score, scores(r, c));
            }
            if (!any) continue;
            S sum = 0;
            for (Eigen::Index c = 0; c < scores.cols(); ++c) {
                if (key_valid && !(*key_valid)[static_cast<std::size_t>(sp.k_offset + c)]) continue;
                const S e = std::exp(scores(r, c) - max_score);
                probs(r, c) = e;
                sum += e;
            }
            probs.row(r) /= sum;
        }
        return probs;
    }
};

}  // namespace layoutdiff::nn
