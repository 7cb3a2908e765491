#pragma once

// Autodiff primitives. Every op computes eagerly, verifies the output is
// finite, and (when a tape is active and an input is tracked) records a
// closure that accumulates gradients into its inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mtunet/gemm.hpp"
#include "mtunet/tensor.hpp"

namespace mtunet::ops {

namespace detail {

// Test hook: when set, matmul's dA rule is scaled by a wrong factor so that
// gradient checking can demonstrate it catches a broken backward rule.
inline bool& corrupt_matmul_backward() {
    thread_local bool flag = false;
    return flag;
}

template <typename S>
bool start_record(const std::initializer_list<TensorPtr<S>> inputs, const TensorPtr<S>& out) {
    if (Tape<S>::active() == nullptr) return false;
    bool any = false;
    for (const auto& in : inputs) any = any || in->requires_grad;
    out->requires_grad = any;
    return any;
}

inline Shape leading_dims(const Shape& shape, std::size_t drop) {
    return Shape(shape.begin(), shape.end() - static_cast<std::ptrdiff_t>(drop));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// a: [..., M, K], b: [K, N] or [..., K, N] with identical leading dims.
// Adds batch * M * K * N MACs to the FlopCounter.
template <typename S>
TensorPtr<S> matmul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() < 2 || b->shape.size() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a->shape) +
                             " and " + shape_str(b->shape));
    }
    const bool broadcast_b = b->shape.size() == 2 && a->shape.size() > 2;
    if (!broadcast_b && a->shape.size() != b->shape.size()) {
        throw DimensionError("matmul rank mismatch: " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    }
    const auto m = a->shape[a->shape.size() - 2];
    const auto k = a->shape[a->shape.size() - 1];
    const auto kb = b->shape[b->shape.size() - 2];
    const auto n = b->shape[b->shape.size() - 1];
    if (k != kb) {
        throw DimensionError("matmul inner extents differ: " + shape_str(a->shape) + " x " +
                             shape_str(b->shape));
    }
    if (!broadcast_b) {
        for (std::size_t i = 0; i + 2 < a->shape.size(); ++i) {
            if (a->shape[i] != b->shape[i]) {
                throw DimensionError("matmul batch extents differ: " + shape_str(a->shape) +
                                     " x " + shape_str(b->shape));
            }
        }
    }

    Shape out_shape = detail::leading_dims(a->shape, 2);
    const std::int64_t batch = numel(out_shape);
    out_shape.push_back(m);
    out_shape.push_back(n);
    auto out = zeros<S>(out_shape);

    for (std::int64_t i = 0; i < batch; ++i) {
        const S* pa = a->data.data() + i * m * k;
        const S* pb = b->data.data() + (broadcast_b ? 0 : i * k * n);
        mtunet::detail::gemm(false, false, m, n, k, S(1), pa, k, pb, n, S(0),
                             out->data.data() + i * m * n, n);
    }
    FlopCounter::instance().add(static_cast<std::uint64_t>(batch) * m * k * n);
    check_finite("matmul", *out);

    if (detail::start_record<S>({a, b}, out)) {
        Tape<S>::active()->record([a, b, out, batch, m, n, k, broadcast_b] {
            if (!out->has_grad()) return;
            const S corrupt = detail::corrupt_matmul_backward() ? S(1.001) : S(1);
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < batch; ++i) {
                    // dA = dC * B^T
                    mtunet::detail::gemm(false, true, m, k, n, corrupt,
                                         out->grad.data() + i * m * n, n,
                                         b->data.data() + (broadcast_b ? 0 : i * k * n), n, S(1),
                                         a->grad.data() + i * m * k, k);
                }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < batch; ++i) {
                    // dB = A^T * dC (accumulated over the batch when broadcast)
                    mtunet::detail::gemm(true, false, k, n, m, S(1), a->data.data() + i * m * k, k,
                                         out->grad.data() + i * m * n, n, S(1),
                                         b->grad.data() + (broadcast_b ? 0 : i * k * n), n);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void require_same_shape(const char* op, const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape != b->shape) {
        throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
    }
}

}  // namespace detail

template <typename S>
TensorPtr<S> add(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    detail::require_same_shape("add", a, b);
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    check_finite("add", *out);
    if (detail::start_record<S>({a, b}, out)) {
        Tape<S>::active()->record([a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> sub(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    detail::require_same_shape("sub", a, b);
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
    check_finite("sub", *out);
    if (detail::start_record<S>({a, b}, out)) {
        Tape<S>::active()->record([a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i) b->grad[i] -= out->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> mul(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    detail::require_same_shape("mul", a, b);
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
    check_finite("mul", *out);
    if (detail::start_record<S>({a, b}, out)) {
        Tape<S>::active()->record([a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i)
                    a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i)
                    b->grad[i] += out->grad[i] * a->data[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> div(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    detail::require_same_shape("div", a, b);
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] / b->data[i];
    check_finite("div", *out);
    if (detail::start_record<S>({a, b}, out)) {
        Tape<S>::active()->record([a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i)
                    a->grad[i] += out->grad[i] / b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i)
                    b->grad[i] -= out->grad[i] * out->data[i] / b->data[i];
            }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> scale(const TensorPtr<S>& a, S factor) {
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * factor;
    check_finite("scale", *out);
    if (detail::start_record<S>({a}, out)) {
        Tape<S>::active()->record([a, out, factor] {
            if (!out->has_grad() || !a->requires_grad) return;
            a->ensure_grad();
            for (std::int64_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * factor;
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> add_const(const TensorPtr<S>& a, S constant) {
    auto out = zeros<S>(a->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + constant;
    check_finite("add_const", *out);
    if (detail::start_record<S>({a}, out)) {
        Tape<S>::active()->record([a, out] {
            if (!out->has_grad() || !a->requires_grad) return;
            a->ensure_grad();
            for (std::int64_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        });
    }
    return out;
}

// x * w with w's shape a suffix of x's shape, tiled over the leading dims.
template <typename S>
TensorPtr<S> mul_suffix_broadcast(const TensorPtr<S>& x, const TensorPtr<S>& w) {
    if (w->shape.size() > x->shape.size()) {
        throw DimensionError("mul_suffix_broadcast rank mismatch: " + shape_str(x->shape) +
                             " vs " + shape_str(w->shape));
    }
    const std::size_t off = x->shape.size() - w->shape.size();
    for (std::size_t i = 0; i < w->shape.size(); ++i) {
        if (x->shape[off + i] != w->shape[i]) {
            throw DimensionError("mul_suffix_broadcast shape mismatch: " + shape_str(x->shape) +
                                 " vs " + shape_str(w->shape));
        }
    }
    const std::int64_t inner = w->size();
    const std::int64_t outer = x->size() / inner;
    auto out = zeros<S>(x->shape);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i)
            out->data[o * inner + i] = x->data[o * inner + i] * w->data[i];
    check_finite("mul_suffix_broadcast", *out);
    if (detail::start_record<S>({x, w}, out)) {
        Tape<S>::active()->record([x, w, out, outer, inner] {
            if (!out->has_grad()) return;
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < inner; ++i)
                        x->grad[o * inner + i] += out->grad[o * inner + i] * w->data[i];
            }
            if (w->requires_grad) {
                w->ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < inner; ++i)
                        w->grad[i] += out->grad[o * inner + i] * x->data[o * inner + i];
            }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> relu(const TensorPtr<S>& x) {
    auto out = zeros<S>(x->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) out->data[i] = x->data[i] > S(0) ? x->data[i] : S(0);
    check_finite("relu", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t i = 0; i < out->size(); ++i)
                if (x->data[i] > S(0)) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> gelu(const TensorPtr<S>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    auto out = zeros<S>(x->shape);
    for (std::int64_t i = 0; i < out->size(); ++i) {
        const double v = static_cast<double>(x->data[i]);
        out->data[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    check_finite("gelu", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out] {
            if (!out->has_grad() || !x->requires_grad) return;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            x->ensure_grad();
            for (std::int64_t i = 0; i < out->size(); ++i) {
                const double v = static_cast<double>(x->data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                x->grad[i] += out->grad[i] * static_cast<S>(cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family (last dimension)
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> softmax_lastdim(const TensorPtr<S>& x) {
    if (x->shape.empty() || x->shape.back() < 1) {
        throw DimensionError("softmax_lastdim needs a non-empty last dimension, got " +
                             shape_str(x->shape));
    }
    const std::int64_t n = x->shape.back();
    const std::int64_t rows = x->size() / n;
    auto out = zeros<S>(x->shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* px = x->data.data() + r * n;
        S* py = out->data.data() + r * n;
        S mx = px[0];
        for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, px[i]);
        S sum = S(0);
        for (std::int64_t i = 0; i < n; ++i) {
            py[i] = std::exp(px[i] - mx);
            sum += py[i];
        }
        for (std::int64_t i = 0; i < n; ++i) py[i] /= sum;
    }
    check_finite("softmax_lastdim", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, rows, n] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* y = out->data.data() + r * n;
                const S* g = out->grad.data() + r * n;
                S dot = S(0);
                for (std::int64_t i = 0; i < n; ++i) dot += g[i] * y[i];
                for (std::int64_t i = 0; i < n; ++i) x->grad[r * n + i] += y[i] * (g[i] - dot);
            }
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> log_softmax_lastdim(const TensorPtr<S>& x) {
    if (x->shape.empty() || x->shape.back() < 1) {
        throw DimensionError("log_softmax_lastdim needs a non-empty last dimension, got " +
                             shape_str(x->shape));
    }
    const std::int64_t n = x->shape.back();
    const std::int64_t rows = x->size() / n;
    auto out = zeros<S>(x->shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* px = x->data.data() + r * n;
        S* py = out->data.data() + r * n;
        S mx = px[0];
        for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, px[i]);
        S sum = S(0);
        for (std::int64_t i = 0; i < n; ++i) sum += std::exp(px[i] - mx);
        const S lse = mx + std::log(sum);
        for (std::int64_t i = 0; i < n; ++i) py[i] = px[i] - lse;
    }
    check_finite("log_softmax_lastdim", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, rows, n] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* y = out->data.data() + r * n;
                const S* g = out->grad.data() + r * n;
                S gsum = S(0);
                for (std::int64_t i = 0; i < n; ++i) gsum += g[i];
                for (std::int64_t i = 0; i < n; ++i)
                    x->grad[r * n + i] += g[i] - std::exp(y[i]) * gsum;
            }
        });
    }
    return out;
}

// Divides each last-dim row by its sum of absolute values. Intended for
// non-negative rows (post-softmax attention maps).
template <typename S>
TensorPtr<S> l1_normalize_lastdim(const TensorPtr<S>& x) {
    const std::int64_t n = x->shape.back();
    const std::int64_t rows = x->size() / n;
    auto out = zeros<S>(x->shape);
    std::vector<S> sums(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        S sum = S(0);
        for (std::int64_t i = 0; i < n; ++i) sum += std::abs(x->data[r * n + i]);
        if (sum <= S(0)) throw NumericError("l1_normalize_lastdim hit an all-zero row");
        sums[r] = sum;
        for (std::int64_t i = 0; i < n; ++i) out->data[r * n + i] = x->data[r * n + i] / sum;
    }
    check_finite("l1_normalize_lastdim", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, rows, n, sums = std::move(sums)] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* y = out->data.data() + r * n;
                const S* g = out->grad.data() + r * n;
                S dot = S(0);
                for (std::int64_t i = 0; i < n; ++i) dot += g[i] * y[i];
                for (std::int64_t i = 0; i < n; ++i) {
                    const S sign = x->data[r * n + i] < S(0) ? S(-1) : S(1);
                    x->grad[r * n + i] += (g[i] - sign * dot) / sums[r];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer norm (last dimension)
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> layer_norm_lastdim(const TensorPtr<S>& x, const TensorPtr<S>& gamma,
                                const TensorPtr<S>& beta, S eps = S(1e-5)) {
    if (x->shape.empty()) throw DimensionError("layer_norm_lastdim needs rank >= 1");
    const std::int64_t c = x->shape.back();
    if (gamma->shape != Shape{c} || beta->shape != Shape{c}) {
        throw DimensionError("layer_norm_lastdim affine shape mismatch: x " + shape_str(x->shape) +
                             ", gamma " + shape_str(gamma->shape) + ", beta " +
                             shape_str(beta->shape));
    }
    const std::int64_t rows = x->size() / c;
    auto out = zeros<S>(x->shape);
    std::vector<S> means(static_cast<std::size_t>(rows));
    std::vector<S> inv_stds(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* px = x->data.data() + r * c;
        S mean = S(0);
        for (std::int64_t i = 0; i < c; ++i) mean += px[i];
        mean /= static_cast<S>(c);
        S var = S(0);
        for (std::int64_t i = 0; i < c; ++i) var += (px[i] - mean) * (px[i] - mean);
        var /= static_cast<S>(c);
        const S inv = S(1) / std::sqrt(var + eps);
        means[r] = mean;
        inv_stds[r] = inv;
        for (std::int64_t i = 0; i < c; ++i)
            out->data[r * c + i] = (px[i] - mean) * inv * gamma->data[i] + beta->data[i];
    }
    check_finite("layer_norm_lastdim", *out);
    if (detail::start_record<S>({x, gamma, beta}, out)) {
        Tape<S>::active()->record(
            [x, gamma, beta, out, rows, c, means = std::move(means),
             inv_stds = std::move(inv_stds)] {
                if (!out->has_grad()) return;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const S* px = x->data.data() + r * c;
                    const S* g = out->grad.data() + r * c;
                    const S mean = means[r];
                    const S inv = inv_stds[r];
                    if (gamma->requires_grad) {
                        gamma->ensure_grad();
                        for (std::int64_t i = 0; i < c; ++i)
                            gamma->grad[i] += g[i] * (px[i] - mean) * inv;
                    }
                    if (beta->requires_grad) {
                        beta->ensure_grad();
                        for (std::int64_t i = 0; i < c; ++i) beta->grad[i] += g[i];
                    }
                    if (x->requires_grad) {
                        x->ensure_grad();
                        S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
                        for (std::int64_t i = 0; i < c; ++i) {
                            const S xhat = (px[i] - mean) * inv;
                            const S dxhat = g[i] * gamma->data[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for (std::int64_t i = 0; i < c; ++i) {
                            const S xhat = (px[i] - mean) * inv;
                            const S dxhat = g[i] * gamma->data[i];
                            x->grad[r * c + i] +=
                                inv / static_cast<S>(c) *
                                (static_cast<S>(c) * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> sum_all(const TensorPtr<S>& x) {
    S total = S(0);
    for (S v : x->data) total += v;
    auto out = make_tensor<S>({1}, {total});
    check_finite("sum_all", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[0];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> sum_lastdim(const TensorPtr<S>& x) {
    const std::int64_t n = x->shape.back();
    const std::int64_t rows = x->size() / n;
    auto out = zeros<S>(detail::leading_dims(x->shape, 1));
    for (std::int64_t r = 0; r < rows; ++r) {
        S s = S(0);
        for (std::int64_t i = 0; i < n; ++i) s += x->data[r * n + i];
        out->data[r] = s;
    }
    check_finite("sum_lastdim", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, rows, n] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t i = 0; i < n; ++i) x->grad[r * n + i] += out->grad[r];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> sum_axis0(const TensorPtr<S>& x) {
    if (x->shape.empty()) throw DimensionError("sum_axis0 needs rank >= 1");
    const std::int64_t n = x->shape[0];
    const std::int64_t inner = x->size() / n;
    auto out = zeros<S>(Shape(x->shape.begin() + 1, x->shape.end()));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < inner; ++j) out->data[j] += x->data[i * inner + j];
    check_finite("sum_axis0", *out);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, n, inner] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < inner; ++j) x->grad[i * inner + j] += out->grad[j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// data movement (pure permutations/copies; no finite check needed)
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> reshape(const TensorPtr<S>& x, Shape new_shape) {
    if (numel(new_shape) != x->size()) {
        throw DimensionError("reshape from " + shape_str(x->shape) + " to " +
                             shape_str(new_shape) + " changes element count");
    }
    auto out = make_tensor<S>(std::move(new_shape), x->data);
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t i = 0; i < x->size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> transpose_last2(const TensorPtr<S>& x) {
    if (x->shape.size() < 2) throw DimensionError("transpose_last2 needs rank >= 2");
    const std::int64_t m = x->shape[x->shape.size() - 2];
    const std::int64_t n = x->shape[x->shape.size() - 1];
    const std::int64_t batch = x->size() / (m * n);
    Shape out_shape = x->shape;
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    auto out = zeros<S>(out_shape);
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                out->data[b * m * n + j * m + i] = x->data[b * m * n + i * n + j];
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, batch, m, n] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t b = 0; b < batch; ++b)
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j)
                        x->grad[b * m * n + i * n + j] += out->grad[b * m * n + j * m + i];
        });
    }
    return out;
}

// [C, H, W] -> [H*W, C] token matrix.
template <typename S>
TensorPtr<S> channels_to_tokens(const TensorPtr<S>& x) {
    if (x->shape.size() != 3) {
        throw DimensionError("channels_to_tokens expects [C,H,W], got " + shape_str(x->shape));
    }
    const std::int64_t c = x->shape[0], hw = x->shape[1] * x->shape[2];
    auto out = zeros<S>({hw, c});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < hw; ++i) out->data[i * c + ch] = x->data[ch * hw + i];
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, c, hw] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t i = 0; i < hw; ++i)
                    x->grad[ch * hw + i] += out->grad[i * c + ch];
        });
    }
    return out;
}

// [H*W, C] -> [C, H, W].
template <typename S>
TensorPtr<S> tokens_to_channels(const TensorPtr<S>& t, std::int64_t h, std::int64_t w) {
    if (t->shape.size() != 2 || t->shape[0] != h * w) {
        throw DimensionError("tokens_to_channels expects [" + std::to_string(h * w) +
                             ",C], got " + shape_str(t->shape));
    }
    const std::int64_t c = t->shape[1], hw = h * w;
    auto out = zeros<S>({c, h, w});
    for (std::int64_t i = 0; i < hw; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) out->data[ch * hw + i] = t->data[i * c + ch];
    if (detail::start_record<S>({t}, out)) {
        Tape<S>::active()->record([t, out, c, hw] {
            if (!out->has_grad() || !t->requires_grad) return;
            t->ensure_grad();
            for (std::int64_t i = 0; i < hw; ++i)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    t->grad[i * c + ch] += out->grad[ch * hw + i];
        });
    }
    return out;
}

// [B, C, H, W] -> [B*H*W, C] token matrix.
template <typename S>
TensorPtr<S> batch_channels_to_tokens(const TensorPtr<S>& x) {
    if (x->shape.size() != 4) {
        throw DimensionError("batch_channels_to_tokens expects [B,C,H,W], got " +
                             shape_str(x->shape));
    }
    const std::int64_t b = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
    auto out = zeros<S>({b * hw, c});
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t i = 0; i < hw; ++i)
                out->data[(bi * hw + i) * c + ch] = x->data[(bi * c + ch) * hw + i];
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, b, c, hw] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t bi = 0; bi < b; ++bi)
                for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t i = 0; i < hw; ++i)
                        x->grad[(bi * c + ch) * hw + i] += out->grad[(bi * hw + i) * c + ch];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> slice_lastdim(const TensorPtr<S>& x, std::int64_t start, std::int64_t len) {
    const std::int64_t n = x->shape.back();
    if (start < 0 || len < 1 || start + len > n) {
        throw DimensionError("slice_lastdim [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of range for " +
                             shape_str(x->shape));
    }
    const std::int64_t rows = x->size() / n;
    Shape out_shape = x->shape;
    out_shape.back() = len;
    auto out = zeros<S>(out_shape);
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < len; ++i)
            out->data[r * len + i] = x->data[r * n + start + i];
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, rows, n, start, len] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t i = 0; i < len; ++i)
                    x->grad[r * n + start + i] += out->grad[r * len + i];
        });
    }
    return out;
}

template <typename S>
TensorPtr<S> concat_lastdim(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != b->shape.size() ||
        !std::equal(a->shape.begin(), a->shape.end() - 1, b->shape.begin())) {
        throw DimensionError("concat_lastdim leading dims differ: " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
    }
    const std::int64_t na = a->shape.back(), nb = b->shape.back();
    const std::int64_t rows = a->size() / na;
    Shape out_shape = a->shape;
    out_shape.back() = na + nb;
    auto out = zeros<S>(out_shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t i = 0; i < na; ++i) out->data[r * (na + nb) + i] = a->data[r * na + i];
        for (std::int64_t i = 0; i < nb; ++i)
            out->data[r * (na + nb) + na + i] = b->data[r * nb + i];
    }
    if (detail::start_record<S>({a, b}, out)) {
        Tape<S>::active()->record([a, b, out, rows, na, nb] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < na; ++i)
                        a->grad[r * na + i] += out->grad[r * (na + nb) + i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < nb; ++i)
                        b->grad[r * nb + i] += out->grad[r * (na + nb) + na + i];
            }
        });
    }
    return out;
}

// Concatenate [Ca,H,W] and [Cb,H,W] along the channel axis.
template <typename S>
TensorPtr<S> concat_channels(const TensorPtr<S>& a, const TensorPtr<S>& b) {
    if (a->shape.size() != 3 || b->shape.size() != 3 || a->shape[1] != b->shape[1] ||
        a->shape[2] != b->shape[2]) {
        throw DimensionError("concat_channels spatial dims differ: " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
    }
    auto out = zeros<S>({a->shape[0] + b->shape[0], a->shape[1], a->shape[2]});
    std::copy(a->data.begin(), a->data.end(), out->data.begin());
    std::copy(b->data.begin(), b->data.end(), out->data.begin() + a->size());
    if (detail::start_record<S>({a, b}, out)) {
        Tape<S>::active()->record([a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < b->size(); ++i)
                    b->grad[i] += out->grad[a->size() + i];
            }
        });
    }
    return out;
}

// Stack same-shaped tensors along a new leading axis.
template <typename S>
TensorPtr<S> stack0(const std::vector<TensorPtr<S>>& parts) {
    if (parts.empty()) throw DimensionError("stack0 needs at least one tensor");
    for (const auto& p : parts) {
        if (p->shape != parts[0]->shape) {
            throw DimensionError("stack0 shape mismatch: " + shape_str(parts[0]->shape) + " vs " +
                                 shape_str(p->shape));
        }
    }
    const std::int64_t each = parts[0]->size();
    Shape out_shape{static_cast<std::int64_t>(parts.size())};
    out_shape.insert(out_shape.end(), parts[0]->shape.begin(), parts[0]->shape.end());
    auto out = zeros<S>(out_shape);
    for (std::size_t b = 0; b < parts.size(); ++b)
        std::copy(parts[b]->data.begin(), parts[b]->data.end(),
                  out->data.begin() + static_cast<std::int64_t>(b) * each);
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    if (Tape<S>::active() && any) {
        out->requires_grad = true;
        Tape<S>::active()->record([parts, out, each] {
            if (!out->has_grad()) return;
            for (std::size_t b = 0; b < parts.size(); ++b) {
                if (!parts[b]->requires_grad) continue;
                parts[b]->ensure_grad();
                const S* g = out->grad.data() + static_cast<std::int64_t>(b) * each;
                for (std::int64_t i = 0; i < each; ++i) parts[b]->grad[i] += g[i];
            }
        });
    }
    return out;
}

// Nearest-neighbor upsampling of [C,h,w] by an integer factor.
template <typename S>
TensorPtr<S> upsample_nearest(const TensorPtr<S>& x, std::int64_t factor) {
    if (x->shape.size() != 3) {
        throw DimensionError("upsample_nearest expects [C,h,w], got " + shape_str(x->shape));
    }
    if (factor < 1) throw DimensionError("upsample_nearest factor must be >= 1");
    const std::int64_t c = x->shape[0], h = x->shape[1], w = x->shape[2];
    auto out = zeros<S>({c, h * factor, w * factor});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < h * factor; ++i)
            for (std::int64_t j = 0; j < w * factor; ++j)
                out->data[(ch * h * factor + i) * w * factor + j] =
                    x->data[(ch * h + i / factor) * w + j / factor];
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, c, h, w, factor] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t i = 0; i < h * factor; ++i)
                    for (std::int64_t j = 0; j < w * factor; ++j)
                        x->grad[(ch * h + i / factor) * w + j / factor] +=
                            out->grad[(ch * h * factor + i) * w * factor + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// window partition / reverse
// ---------------------------------------------------------------------------

// [C,H,W] -> [(H/p)*(W/p), p*p, C]; tiles and in-tile tokens in row-major order.
template <typename S>
TensorPtr<S> window_partition(const TensorPtr<S>& x, std::int64_t p) {
    if (x->shape.size() != 3) {
        throw DimensionError("window_partition expects [C,H,W], got " + shape_str(x->shape));
    }
    const std::int64_t c = x->shape[0], h = x->shape[1], w = x->shape[2];
    if (p < 1 || h % p != 0 || w % p != 0) {
        throw DimensionError("window_partition: H=" + std::to_string(h) +
                             ", W=" + std::to_string(w) + " not divisible by p=" +
                             std::to_string(p));
    }
    const std::int64_t th = h / p, tw = w / p;
    auto out = zeros<S>({th * tw, p * p, c});
    for (std::int64_t ti = 0; ti < th; ++ti)
        for (std::int64_t tj = 0; tj < tw; ++tj)
            for (std::int64_t u = 0; u < p; ++u)
                for (std::int64_t v = 0; v < p; ++v)
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        out->data[((ti * tw + tj) * p * p + u * p + v) * c + ch] =
                            x->data[(ch * h + ti * p + u) * w + tj * p + v];
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, c, h, w, p, th, tw] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t ti = 0; ti < th; ++ti)
                for (std::int64_t tj = 0; tj < tw; ++tj)
                    for (std::int64_t u = 0; u < p; ++u)
                        for (std::int64_t v = 0; v < p; ++v)
                            for (std::int64_t ch = 0; ch < c; ++ch)
                                x->grad[(ch * h + ti * p + u) * w + tj * p + v] +=
                                    out->grad[((ti * tw + tj) * p * p + u * p + v) * c + ch];
        });
    }
    return out;
}

// Exact inverse of window_partition.
template <typename S>
TensorPtr<S> window_reverse(const TensorPtr<S>& windows, std::int64_t h, std::int64_t w,
                            std::int64_t p) {
    if (windows->shape.size() != 3) {
        throw DimensionError("window_reverse expects [nw,p*p,C], got " +
                             shape_str(windows->shape));
    }
    if (p < 1 || h % p != 0 || w % p != 0 || windows->shape[0] != (h / p) * (w / p) ||
        windows->shape[1] != p * p) {
        throw DimensionError("window_reverse: windows " + shape_str(windows->shape) +
                             " inconsistent with H=" + std::to_string(h) + ", W=" +
                             std::to_string(w) + ", p=" + std::to_string(p));
    }
    const std::int64_t c = windows->shape[2];
    const std::int64_t th = h / p, tw = w / p;
    auto out = zeros<S>({c, h, w});
    for (std::int64_t ti = 0; ti < th; ++ti)
        for (std::int64_t tj = 0; tj < tw; ++tj)
            for (std::int64_t u = 0; u < p; ++u)
                for (std::int64_t v = 0; v < p; ++v)
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        out->data[(ch * h + ti * p + u) * w + tj * p + v] =
                            windows->data[((ti * tw + tj) * p * p + u * p + v) * c + ch];
    if (detail::start_record<S>({windows}, out)) {
        Tape<S>::active()->record([windows, out, c, h, w, p, th, tw] {
            if (!out->has_grad() || !windows->requires_grad) return;
            windows->ensure_grad();
            for (std::int64_t ti = 0; ti < th; ++ti)
                for (std::int64_t tj = 0; tj < tw; ++tj)
                    for (std::int64_t u = 0; u < p; ++u)
                        for (std::int64_t v = 0; v < p; ++v)
                            for (std::int64_t ch = 0; ch < c; ++ch)
                                windows->grad[((ti * tw + tj) * p * p + u * p + v) * c + ch] +=
                                    out->grad[(ch * h + ti * p + u) * w + tj * p + v];
        });
    }
    return out;
}

}  // namespace mtunet::ops
