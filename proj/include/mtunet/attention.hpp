#pragma once

// Attention mechanisms: windowed local self-attention, dynamic window
// aggregation, Gaussian-weighted axial attention, the local-global composite,
// and external attention against shared memory units.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtunet/conv.hpp"
#include "mtunet/ops.hpp"
#include "mtunet/optim.hpp"
#include "mtunet/tensor.hpp"

namespace mtunet {

// ---------------------------------------------------------------------------
// axial neighborhood
// ---------------------------------------------------------------------------

// Row i and column j of an Hg x Wg grid, deduplicated at (i,j): row entries
// first, then the column entries excluding the center. Distances are grid
// Euclidean distances to (i,j) in cell units.
struct AxialNeighborhood {
    std::vector<std::pair<std::int64_t, std::int64_t>> indices;
    std::vector<double> distances;
};

inline AxialNeighborhood axial_neighborhood(std::int64_t i, std::int64_t j, std::int64_t hg,
                                            std::int64_t wg) {
    if (i < 0 || i >= hg || j < 0 || j >= wg) {
        throw DimensionError("axial_neighborhood: (" + std::to_string(i) + "," +
                             std::to_string(j) + ") outside " + std::to_string(hg) + "x" +
                             std::to_string(wg) + " grid");
    }
    AxialNeighborhood nb;
    nb.indices.reserve(static_cast<std::size_t>(hg + wg - 1));
    nb.distances.reserve(static_cast<std::size_t>(hg + wg - 1));
    for (std::int64_t jj = 0; jj < wg; ++jj) {
        nb.indices.emplace_back(i, jj);
        nb.distances.push_back(static_cast<double>(std::llabs(j - jj)));
    }
    for (std::int64_t ii = 0; ii < hg; ++ii) {
        if (ii == i) continue;
        nb.indices.emplace_back(ii, j);
        nb.distances.push_back(static_cast<double>(std::llabs(i - ii)));
    }
    return nb;
}

// ---------------------------------------------------------------------------
// fused axial attention kernel
// ---------------------------------------------------------------------------

// Axial attention over a coarse grid with an additive distance bias inside
// the softmax logits: per position, logits = q.k/sqrt(C) + w * d^2 over the
// axial neighborhood. q/k/v are [N,C] token matrices with N = hg*wg; w is a
// one-element tensor. `weights_out`, when given, receives the per-position
// attention weights in neighborhood order.
template <typename S>
TensorPtr<S> gwaa_attend(const TensorPtr<S>& q, const TensorPtr<S>& k, const TensorPtr<S>& v,
                         const TensorPtr<S>& w, std::int64_t hg, std::int64_t wg,
                         std::vector<std::vector<S>>* weights_out = nullptr) {
    const std::int64_t n = hg * wg;
    if (q->shape.size() != 2 || q->shape[0] != n || q->shape != k->shape ||
        q->shape != v->shape) {
        throw DimensionError("gwaa_attend: q/k/v must be [" + std::to_string(n) + ",C], got " +
                             shape_str(q->shape) + ", " + shape_str(k->shape) + ", " +
                             shape_str(v->shape));
    }
    if (w->size() != 1) {
        throw DimensionError("gwaa_attend: w must have a single element, got " +
                             shape_str(w->shape));
    }
    const std::int64_t c = q->shape[1];
    const std::int64_t m = hg + wg - 1;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(c)));
    const S wv = w->data[0];

    auto out = zeros<S>({n, c});
    // Flat [n, m] attention map kept for the backward pass.
    auto attn = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * m));
    if (weights_out) weights_out->assign(static_cast<std::size_t>(n), {});

    std::vector<std::int64_t> nb_rows(static_cast<std::size_t>(m));
    std::vector<S> d2(static_cast<std::size_t>(m));
    std::vector<S> logits(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < hg; ++i) {
        for (std::int64_t j = 0; j < wg; ++j) {
            const std::int64_t idx = i * wg + j;
            std::int64_t t = 0;
            for (std::int64_t jj = 0; jj < wg; ++jj, ++t) {
                nb_rows[t] = i * wg + jj;
                d2[t] = static_cast<S>((j - jj) * (j - jj));
            }
            for (std::int64_t ii = 0; ii < hg; ++ii) {
                if (ii == i) continue;
                nb_rows[t] = ii * wg + j;
                d2[t] = static_cast<S>((i - ii) * (i - ii));
                ++t;
            }
            const S* qi = q->data.data() + idx * c;
            S mx = -std::numeric_limits<S>::infinity();
            for (std::int64_t a = 0; a < m; ++a) {
                const S* ka = k->data.data() + nb_rows[a] * c;
                S dot = S(0);
                for (std::int64_t ch = 0; ch < c; ++ch) dot += qi[ch] * ka[ch];
                logits[a] = dot * scale + wv * d2[a];
                mx = std::max(mx, logits[a]);
            }
            S sum = S(0);
            for (std::int64_t a = 0; a < m; ++a) {
                logits[a] = std::exp(logits[a] - mx);
                sum += logits[a];
            }
            S* attn_row = attn->data() + idx * m;
            for (std::int64_t a = 0; a < m; ++a) attn_row[a] = logits[a] / sum;
            S* oi = out->data.data() + idx * c;
            for (std::int64_t a = 0; a < m; ++a) {
                const S* va = v->data.data() + nb_rows[a] * c;
                for (std::int64_t ch = 0; ch < c; ++ch) oi[ch] += attn_row[a] * va[ch];
            }
            if (weights_out) {
                (*weights_out)[static_cast<std::size_t>(idx)]
                    .assign(attn_row, attn_row + m);
            }
        }
    }
    FlopCounter::instance().add(static_cast<std::uint64_t>(n) * m * c * 2);
    check_finite("gwaa_attend", *out);

    if (ops::detail::start_record<S>({q, k, v, w}, out)) {
        Tape<S>::active()->record([q, k, v, w, out, attn, hg, wg, c, m, scale] {
            if (!out->has_grad()) return;
            const std::int64_t n = hg * wg;
            if (q->requires_grad) q->ensure_grad();
            if (k->requires_grad) k->ensure_grad();
            if (v->requires_grad) v->ensure_grad();
            if (w->requires_grad) w->ensure_grad();
            std::vector<std::int64_t> nb_rows(static_cast<std::size_t>(m));
            std::vector<S> d2(static_cast<std::size_t>(m));
            std::vector<S> da(static_cast<std::size_t>(m));
            for (std::int64_t i = 0; i < hg; ++i) {
                for (std::int64_t j = 0; j < wg; ++j) {
                    const std::int64_t idx = i * wg + j;
                    std::int64_t t = 0;
                    for (std::int64_t jj = 0; jj < wg; ++jj, ++t) {
                        nb_rows[t] = i * wg + jj;
                        d2[t] = static_cast<S>((j - jj) * (j - jj));
                    }
                    for (std::int64_t ii = 0; ii < hg; ++ii) {
                        if (ii == i) continue;
                        nb_rows[t] = ii * wg + j;
                        d2[t] = static_cast<S>((i - ii) * (i - ii));
                        ++t;
                    }
                    const S* g = out->grad.data() + idx * c;
                    const S* attn_row = attn->data() + idx * m;
                    // d(attention weights), then softmax backward to logits.
                    S dot = S(0);
                    for (std::int64_t a = 0; a < m; ++a) {
                        const S* va = v->data.data() + nb_rows[a] * c;
                        S s = S(0);
                        for (std::int64_t ch = 0; ch < c; ++ch) s += g[ch] * va[ch];
                        da[a] = s;
                        dot += s * attn_row[a];
                    }
                    const S* qi = q->data.data() + idx * c;
                    for (std::int64_t a = 0; a < m; ++a) {
                        const S dlogit = attn_row[a] * (da[a] - dot);
                        const S* ka = k->data.data() + nb_rows[a] * c;
                        if (v->requires_grad) {
                            S* dv = v->grad.data() + nb_rows[a] * c;
                            for (std::int64_t ch = 0; ch < c; ++ch)
                                dv[ch] += attn_row[a] * g[ch];
                        }
                        if (q->requires_grad) {
                            S* dq = q->grad.data() + idx * c;
                            for (std::int64_t ch = 0; ch < c; ++ch)
                                dq[ch] += dlogit * ka[ch] * scale;
                        }
                        if (k->requires_grad) {
                            S* dk = k->grad.data() + nb_rows[a] * c;
                            for (std::int64_t ch = 0; ch < c; ++ch)
                                dk[ch] += dlogit * qi[ch] * scale;
                        }
                        if (w->requires_grad) w->grad[0] += dlogit * d2[a];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
TensorPtr<S> multi_head_attention(const TensorPtr<S>& q, const TensorPtr<S>& k,
                                  const TensorPtr<S>& v, std::int64_t heads) {
    const std::int64_t c = q->shape.back();
    const std::int64_t dh = c / heads;
    TensorPtr<S> merged;
    for (std::int64_t h = 0; h < heads; ++h) {
        auto qh = heads == 1 ? q : ops::slice_lastdim(q, h * dh, dh);
        auto kh = heads == 1 ? k : ops::slice_lastdim(k, h * dh, dh);
        auto vh = heads == 1 ? v : ops::slice_lastdim(v, h * dh, dh);
        auto logits = ops::scale(ops::matmul(qh, ops::transpose_last2(kh)),
                                 static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto attn = ops::softmax_lastdim(logits);
        auto oh = ops::matmul(attn, vh);
        merged = merged ? ops::concat_lastdim(merged, oh) : oh;
    }
    return merged;
}

inline void require_heads(std::int64_t channels, std::int64_t heads) {
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("heads=" + std::to_string(heads) + " must divide channels=" +
                          std::to_string(channels));
    }
}

}  // namespace detail

// Self-attention inside non-overlapping p x p windows. No information
// crosses a window boundary.
template <typename S>
struct LocalSelfAttention {
    std::int64_t channels = 0;
    std::int64_t window = 0;
    std::int64_t heads = 1;
    TensorPtr<S> w_q, w_k, w_v, w_out;

    LocalSelfAttention() = default;
    LocalSelfAttention(ParamInit<S>& init, const std::string& prefix, std::int64_t c,
                       std::int64_t p, std::int64_t num_heads)
        : channels(c), window(p), heads(num_heads) {
        detail::require_heads(c, num_heads);
        w_q = init.kaiming(prefix + ".w_q", {c, c}, c);
        w_k = init.kaiming(prefix + ".w_k", {c, c}, c);
        w_v = init.kaiming(prefix + ".w_v", {c, c}, c);
        w_out = init.kaiming(prefix + ".w_out", {c, c}, c);
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const {
        const std::int64_t h = x->shape[1], w = x->shape[2];
        auto wins = ops::window_partition(x, window);
        auto q = ops::matmul(wins, w_q);
        auto k = ops::matmul(wins, w_k);
        auto v = ops::matmul(wins, w_v);
        auto merged = detail::multi_head_attention(q, k, v, heads);
        auto o = ops::matmul(merged, w_out);
        return ops::window_reverse(o, h, w, window);
    }
};

enum class AggregatorMode { kDynamic, kStridedConv, kMaxPool };

inline AggregatorMode aggregator_mode_from_string(const std::string& mode) {
    if (mode == "dynamic") return AggregatorMode::kDynamic;
    if (mode == "strided-conv") return AggregatorMode::kStridedConv;
    if (mode == "max-pool") return AggregatorMode::kMaxPool;
    throw ConfigError("unknown aggregator mode: " + mode);
}

// Pools each p x p window into one global token. Dynamic mode scores every
// window position with a learned per-position channel map and takes the
// softmax-weighted sum; the alternatives are a p-stride convolution and
// channelwise max pooling.
template <typename S>
struct Aggregator {
    AggregatorMode mode = AggregatorMode::kDynamic;
    std::int64_t channels = 0;
    std::int64_t window = 0;
    TensorPtr<S> score_w;      // dynamic: [p*p, C]
    TensorPtr<S> conv_kernel;  // strided-conv: [C, C, p, p]

    Aggregator() = default;
    Aggregator(ParamInit<S>& init, const std::string& prefix, std::int64_t c, std::int64_t p,
               AggregatorMode m)
        : mode(m), channels(c), window(p) {
        if (mode == AggregatorMode::kDynamic) {
            score_w = init.kaiming(prefix + ".score_w", {p * p, c}, c);
        } else if (mode == AggregatorMode::kStridedConv) {
            conv_kernel = init.kaiming(prefix + ".conv_kernel", {c, c, p, p}, c * p * p);
        }
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const {
        const std::int64_t h = x->shape[1], w = x->shape[2];
        const std::int64_t hg = h / window, wg = w / window;
        switch (mode) {
            case AggregatorMode::kDynamic: {
                auto wins = ops::window_partition(x, window);  // [nw, p*p, C]
                auto logits = ops::sum_lastdim(ops::mul_suffix_broadcast(wins, score_w));
                auto weights = ops::softmax_lastdim(logits);   // [nw, p*p]
                auto w3 = ops::reshape(weights, {hg * wg, 1, window * window});
                auto pooled = ops::matmul(w3, wins);           // [nw, 1, C]
                return ops::tokens_to_channels(ops::reshape(pooled, {hg * wg, channels}), hg, wg);
            }
            case AggregatorMode::kStridedConv:
                return ops::detail::conv2d_any(x, conv_kernel, TensorPtr<S>(), window, 0);
            case AggregatorMode::kMaxPool:
                return ops::max_pool2d(x, window);
        }
        throw ConfigError("unknown aggregator mode");
    }
};

// Axial attention over the aggregated coarse grid with the learnable
// distance-bias coefficient w (one per head).
template <typename S>
struct GaussianAxialAttention {
    std::int64_t channels = 0;
    std::int64_t heads = 1;
    TensorPtr<S> w_q, w_k, w_v, w_out;
    TensorPtr<S> gauss_w;  // [heads]

    GaussianAxialAttention() = default;
    GaussianAxialAttention(ParamInit<S>& init, const std::string& prefix, std::int64_t c,
                           std::int64_t window, std::int64_t num_heads)
        : channels(c), heads(num_heads) {
        detail::require_heads(c, num_heads);
        w_q = init.kaiming(prefix + ".w_q", {c, c}, c);
        w_k = init.kaiming(prefix + ".w_k", {c, c}, c);
        w_v = init.kaiming(prefix + ".w_v", {c, c}, c);
        w_out = init.kaiming(prefix + ".w_out", {c, c}, c);
        // sigma_0 = p grid cells => w_0 = -1 / (2 p^2).
        const S w0 = static_cast<S>(-1.0 / (2.0 * static_cast<double>(window * window)));
        gauss_w = init.constant(prefix + ".w", {num_heads}, w0);
    }

    TensorPtr<S> forward(const TensorPtr<S>& g) const {
        const std::int64_t hg = g->shape[1], wg = g->shape[2];
        auto t = ops::channels_to_tokens(g);
        auto q = ops::matmul(t, w_q);
        auto k = ops::matmul(t, w_k);
        auto v = ops::matmul(t, w_v);
        const std::int64_t dh = channels / heads;
        TensorPtr<S> merged;
        for (std::int64_t h = 0; h < heads; ++h) {
            auto qh = heads == 1 ? q : ops::slice_lastdim(q, h * dh, dh);
            auto kh = heads == 1 ? k : ops::slice_lastdim(k, h * dh, dh);
            auto vh = heads == 1 ? v : ops::slice_lastdim(v, h * dh, dh);
            auto wh = heads == 1 ? gauss_w : ops::slice_lastdim(gauss_w, h, 1);
            auto oh = gwaa_attend(qh, kh, vh, wh, hg, wg);
            merged = merged ? ops::concat_lastdim(merged, oh) : oh;
        }
        auto o = ops::matmul(merged, w_out);
        return ops::tokens_to_channels(o, hg, wg);
    }
};

// Local-global composite: local windowed SA, window aggregation, axial
// attention on the coarse grid, nearest-neighbor upsampling, channel concat,
// and a learned 2C -> C fusion.
template <typename S>
struct LggSa {
    std::int64_t channels = 0;
    std::int64_t window = 0;
    LocalSelfAttention<S> lsa;
    Aggregator<S> agg;
    GaussianAxialAttention<S> gsa;
    TensorPtr<S> fuse_w;  // [2C, C]

    LggSa() = default;
    LggSa(ParamInit<S>& init, const std::string& prefix, std::int64_t c, std::int64_t p,
          std::int64_t heads, AggregatorMode mode)
        : channels(c),
          window(p),
          lsa(init, prefix + ".lsa", c, p, heads),
          agg(init, prefix + ".agg", c, p, mode),
          gsa(init, prefix + ".gsa", c, p, heads) {
        fuse_w = init.kaiming(prefix + ".fuse_w", {2 * c, c}, 2 * c);
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const {
        const std::int64_t h = x->shape[1], w = x->shape[2];
        auto z_local = lsa.forward(x);
        auto z_global = gsa.forward(agg.forward(z_local));
        auto z = ops::concat_channels(z_local, ops::upsample_nearest(z_global, window));
        auto fused = ops::matmul(ops::channels_to_tokens(z), fuse_w);
        return ops::tokens_to_channels(fused, h, w);
    }
};

// Attention against two dataset-level memory units shared by all samples,
// with the double normalization (softmax over tokens, then L1 over slots).
template <typename S>
struct ExternalAttention {
    std::int64_t channels = 0;
    std::int64_t dim = 0;  // enlarged channel width (2C)
    std::int64_t slots = 0;
    TensorPtr<S> w_q;    // [C, d]
    TensorPtr<S> m_k;    // [S, d]
    TensorPtr<S> m_v;    // [S, d]
    TensorPtr<S> w_out;  // [d, C]

    ExternalAttention() = default;
    ExternalAttention(ParamInit<S>& init, const std::string& prefix, std::int64_t c,
                      std::int64_t num_slots)
        : channels(c), dim(2 * c), slots(num_slots) {
        if (num_slots < 1) {
            throw ConfigError("ea_slots must be >= 1, got " + std::to_string(num_slots));
        }
        w_q = init.kaiming(prefix + ".w_q", {c, dim}, c);
        m_k = init.kaiming(prefix + ".m_k", {num_slots, dim}, dim);
        m_v = init.kaiming(prefix + ".m_v", {num_slots, dim}, dim);
        w_out = init.kaiming(prefix + ".w_out", {dim, c}, dim);
    }

    // tokens: [N, C] for a single sample.
    TensorPtr<S> forward(const TensorPtr<S>& tokens) const {
        auto q = ops::matmul(tokens, w_q);                          // [N, d]
        auto logits = ops::matmul(q, ops::transpose_last2(m_k));    // [N, S]
        auto col_softmax = ops::transpose_last2(
            ops::softmax_lastdim(ops::transpose_last2(logits)));    // softmax over tokens
        auto attn = ops::l1_normalize_lastdim(col_softmax);         // rows sum to 1
        return ops::matmul(ops::matmul(attn, m_v), w_out);          // [N, C]
    }
};

// Plain quadratic self-attention over all tokens. Reference implementation
// for complexity benchmarks and equivalence tests only.
template <typename S>
struct FullSelfAttention {
    std::int64_t channels = 0;
    TensorPtr<S> w_q, w_k, w_v, w_out;

    FullSelfAttention() = default;
    FullSelfAttention(ParamInit<S>& init, const std::string& prefix, std::int64_t c)
        : channels(c) {
        w_q = init.kaiming(prefix + ".w_q", {c, c}, c);
        w_k = init.kaiming(prefix + ".w_k", {c, c}, c);
        w_v = init.kaiming(prefix + ".w_v", {c, c}, c);
        w_out = init.kaiming(prefix + ".w_out", {c, c}, c);
    }

    TensorPtr<S> forward(const TensorPtr<S>& tokens) const {
        auto q = ops::matmul(tokens, w_q);
        auto k = ops::matmul(tokens, w_k);
        auto v = ops::matmul(tokens, w_v);
        auto logits = ops::scale(ops::matmul(q, ops::transpose_last2(k)),
                                 static_cast<S>(1.0 / std::sqrt(static_cast<double>(channels))));
        auto attn = ops::softmax_lastdim(logits);
        return ops::matmul(ops::matmul(attn, v), w_out);
    }
};

}  // namespace mtunet
