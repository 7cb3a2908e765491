#pragma once

// 2D convolution ops (cross-correlation semantics, channels-first layout),
// lowered to GEMM through im2col/col2im.

#include <cstdint>
#include <string>
#include <vector>

#include "mtunet/gemm.hpp"
#include "mtunet/ops.hpp"
#include "mtunet/tensor.hpp"

namespace mtunet::ops {

namespace detail {

// Gathers [C,H,W] into a (C*k*k) x (H2*W2) matrix of receptive-field columns.
template <typename S>
void im2col(const S* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t h2, std::int64_t w2, S* cols) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t u = 0; u < k; ++u) {
            for (std::int64_t v = 0; v < k; ++v) {
                S* row = cols + ((ch * k + u) * k + v) * h2 * w2;
                for (std::int64_t oh = 0; oh < h2; ++oh) {
                    const std::int64_t ih = oh * stride - pad + u;
                    for (std::int64_t ow = 0; ow < w2; ++ow) {
                        const std::int64_t iw = ow * stride - pad + v;
                        row[oh * w2 + ow] = (ih >= 0 && ih < h && iw >= 0 && iw < w)
                                                ? x[(ch * h + ih) * w + iw]
                                                : S(0);
                    }
                }
            }
        }
    }
}

// Scatter-add inverse of im2col.
template <typename S>
void col2im(const S* cols, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t h2, std::int64_t w2, S* x) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t u = 0; u < k; ++u) {
            for (std::int64_t v = 0; v < k; ++v) {
                const S* row = cols + ((ch * k + u) * k + v) * h2 * w2;
                for (std::int64_t oh = 0; oh < h2; ++oh) {
                    const std::int64_t ih = oh * stride - pad + u;
                    if (ih < 0 || ih >= h) continue;
                    for (std::int64_t ow = 0; ow < w2; ++ow) {
                        const std::int64_t iw = ow * stride - pad + v;
                        if (iw >= 0 && iw < w) x[(ch * h + ih) * w + iw] += row[oh * w2 + ow];
                    }
                }
            }
        }
    }
}

// conv2d without the odd-kernel restriction; used internally by the strided
// aggregation path where the kernel equals the window size.
template <typename S>
TensorPtr<S> conv2d_any(const TensorPtr<S>& x, const TensorPtr<S>& kernel,
                        const TensorPtr<S>& bias, std::int64_t stride, std::int64_t pad) {
    if (x->shape.size() != 3) {
        throw DimensionError("conv2d expects input [C,H,W], got " + shape_str(x->shape));
    }
    if (kernel->shape.size() != 4 || kernel->shape[2] != kernel->shape[3]) {
        throw DimensionError("conv2d expects kernel [Cout,Cin,k,k], got " +
                             shape_str(kernel->shape));
    }
    const std::int64_t cin = x->shape[0], h = x->shape[1], w = x->shape[2];
    const std::int64_t cout = kernel->shape[0], k = kernel->shape[2];
    if (kernel->shape[1] != cin) {
        throw DimensionError("conv2d channel mismatch: input " + shape_str(x->shape) +
                             " vs kernel " + shape_str(kernel->shape));
    }
    if (stride < 1 || pad < 0) throw DimensionError("conv2d: stride must be >= 1 and pad >= 0");
    if (bias && bias->shape != Shape{cout}) {
        throw DimensionError("conv2d bias shape " + shape_str(bias->shape) + " != [" +
                             std::to_string(cout) + "]");
    }
    const std::int64_t h2 = (h + 2 * pad - k) / stride + 1;
    const std::int64_t w2 = (w + 2 * pad - k) / stride + 1;
    if (h + 2 * pad < k || w + 2 * pad < k || h2 < 1 || w2 < 1) {
        throw DimensionError("conv2d output extent < 1 for input " + shape_str(x->shape) +
                             ", k=" + std::to_string(k) + ", stride=" + std::to_string(stride) +
                             ", pad=" + std::to_string(pad));
    }

    auto cols = std::make_shared<std::vector<S>>(static_cast<std::size_t>(cin * k * k * h2 * w2));
    im2col(x->data.data(), cin, h, w, k, stride, pad, h2, w2, cols->data());

    auto out = zeros<S>({cout, h2, w2});
    // out[cout, h2*w2] = kernel[cout, cin*k*k] * cols
    mtunet::detail::gemm(false, false, cout, h2 * w2, cin * k * k, S(1), kernel->data.data(),
                         cin * k * k, cols->data(), h2 * w2, S(0), out->data.data(), h2 * w2);
    if (bias) {
        for (std::int64_t co = 0; co < cout; ++co)
            for (std::int64_t i = 0; i < h2 * w2; ++i) out->data[co * h2 * w2 + i] += bias->data[co];
    }
    FlopCounter::instance().add(static_cast<std::uint64_t>(cout) * cin * k * k * h2 * w2);
    check_finite("conv2d", *out);

    const bool track = bias ? detail::start_record<S>({x, kernel, bias}, out)
                            : detail::start_record<S>({x, kernel}, out);
    if (track) {
        Tape<S>::active()->record([x, kernel, bias, out, cols, cin, h, w, cout, k, stride, pad, h2,
                                   w2] {
            if (!out->has_grad()) return;
            const S* g = out->grad.data();
            if (kernel->requires_grad) {
                kernel->ensure_grad();
                // dK = dY * cols^T
                mtunet::detail::gemm(false, true, cout, cin * k * k, h2 * w2, S(1), g, h2 * w2,
                                     cols->data(), h2 * w2, S(1), kernel->grad.data(),
                                     cin * k * k);
            }
            if (x->requires_grad) {
                x->ensure_grad();
                std::vector<S> dcols(static_cast<std::size_t>(cin * k * k * h2 * w2));
                // dcols = K^T * dY
                mtunet::detail::gemm(true, false, cin * k * k, h2 * w2, cout, S(1),
                                     kernel->data.data(), cin * k * k, g, h2 * w2, S(0),
                                     dcols.data(), h2 * w2);
                col2im(dcols.data(), cin, h, w, k, stride, pad, h2, w2, x->grad.data());
            }
            if (bias && bias->requires_grad) {
                bias->ensure_grad();
                for (std::int64_t co = 0; co < cout; ++co) {
                    S s = S(0);
                    for (std::int64_t i = 0; i < h2 * w2; ++i) s += g[co * h2 * w2 + i];
                    bias->grad[co] += s;
                }
            }
        });
    }
    return out;
}

}  // namespace detail

// x: [Cin,H,W], kernel: [Cout,Cin,k,k] with k odd. Adds Cout*Cin*k^2*H'*W'
// MACs to the FlopCounter.
template <typename S>
TensorPtr<S> conv2d(const TensorPtr<S>& x, const TensorPtr<S>& kernel, const TensorPtr<S>& bias,
                    std::int64_t stride, std::int64_t pad) {
    if (kernel->shape.size() == 4 && kernel->shape[2] % 2 == 0) {
        throw DimensionError("conv2d kernel extent must be odd, got " +
                             std::to_string(kernel->shape[2]));
    }
    return detail::conv2d_any(x, kernel, bias, stride, pad);
}

template <typename S>
TensorPtr<S> conv2d(const TensorPtr<S>& x, const TensorPtr<S>& kernel, std::int64_t stride,
                    std::int64_t pad) {
    return conv2d(x, kernel, TensorPtr<S>(), stride, pad);
}

// Adjoint of conv2d with the same kernel tensor: for any x, y, K,
// <conv2d(x,K,s,p), y> == <x, conv_transpose2d(y,K,s,p)>.
// y: [Cout,H',W'], kernel: [Cout,Cin,k,k] -> [Cin, (H'-1)s - 2p + k, ...].
template <typename S>
TensorPtr<S> conv_transpose2d(const TensorPtr<S>& y, const TensorPtr<S>& kernel,
                              const TensorPtr<S>& bias, std::int64_t stride, std::int64_t pad) {
    if (y->shape.size() != 3) {
        throw DimensionError("conv_transpose2d expects input [C,H,W], got " + shape_str(y->shape));
    }
    if (kernel->shape.size() != 4 || kernel->shape[2] != kernel->shape[3]) {
        throw DimensionError("conv_transpose2d expects kernel [Cout,Cin,k,k], got " +
                             shape_str(kernel->shape));
    }
    const std::int64_t cout = y->shape[0], h2 = y->shape[1], w2 = y->shape[2];
    const std::int64_t cin = kernel->shape[1], k = kernel->shape[2];
    if (kernel->shape[0] != cout) {
        throw DimensionError("conv_transpose2d channel mismatch: input " + shape_str(y->shape) +
                             " vs kernel " + shape_str(kernel->shape));
    }
    if (stride < 1 || pad < 0) {
        throw DimensionError("conv_transpose2d: stride must be >= 1 and pad >= 0");
    }
    const std::int64_t h = (h2 - 1) * stride - 2 * pad + k;
    const std::int64_t w = (w2 - 1) * stride - 2 * pad + k;
    if (h < 1 || w < 1) {
        throw DimensionError("conv_transpose2d output extent < 1 for input " + shape_str(y->shape) +
                             ", k=" + std::to_string(k) + ", stride=" + std::to_string(stride) +
                             ", pad=" + std::to_string(pad));
    }
    if (bias && bias->shape != Shape{cin}) {
        throw DimensionError("conv_transpose2d bias shape " + shape_str(bias->shape) + " != [" +
                             std::to_string(cin) + "]");
    }

    auto out = zeros<S>({cin, h, w});
    {
        std::vector<S> cols(static_cast<std::size_t>(cin * k * k * h2 * w2));
        // cols = K^T * y, then scatter back onto the full-resolution grid.
        mtunet::detail::gemm(true, false, cin * k * k, h2 * w2, cout, S(1), kernel->data.data(),
                             cin * k * k, y->data.data(), h2 * w2, S(0), cols.data(), h2 * w2);
        detail::col2im(cols.data(), cin, h, w, k, stride, pad, h2, w2, out->data.data());
    }
    if (bias) {
        for (std::int64_t ci = 0; ci < cin; ++ci)
            for (std::int64_t i = 0; i < h * w; ++i) out->data[ci * h * w + i] += bias->data[ci];
    }
    FlopCounter::instance().add(static_cast<std::uint64_t>(cout) * cin * k * k * h2 * w2);
    check_finite("conv_transpose2d", *out);

    const bool track = bias ? detail::start_record<S>({y, kernel, bias}, out)
                            : detail::start_record<S>({y, kernel}, out);
    if (track) {
        Tape<S>::active()->record(
            [y, kernel, bias, out, cin, h, w, cout, k, stride, pad, h2, w2] {
                if (!out->has_grad()) return;
                std::vector<S> gcols(static_cast<std::size_t>(cin * k * k * h2 * w2));
                detail::im2col(out->grad.data(), cin, h, w, k, stride, pad, h2, w2, gcols.data());
                if (y->requires_grad) {
                    y->ensure_grad();
                    // dY = K * gcols
                    mtunet::detail::gemm(false, false, cout, h2 * w2, cin * k * k, S(1),
                                         kernel->data.data(), cin * k * k, gcols.data(), h2 * w2,
                                         S(1), y->grad.data(), h2 * w2);
                }
                if (kernel->requires_grad) {
                    kernel->ensure_grad();
                    // dK = y * gcols^T
                    mtunet::detail::gemm(false, true, cout, cin * k * k, h2 * w2, S(1),
                                         y->data.data(), h2 * w2, gcols.data(), h2 * w2, S(1),
                                         kernel->grad.data(), cin * k * k);
                }
                if (bias && bias->requires_grad) {
                    bias->ensure_grad();
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        S s = S(0);
                        for (std::int64_t i = 0; i < h * w; ++i) s += out->grad[ci * h * w + i];
                        bias->grad[ci] += s;
                    }
                }
            });
    }
    return out;
}

template <typename S>
TensorPtr<S> conv_transpose2d(const TensorPtr<S>& y, const TensorPtr<S>& kernel,
                              std::int64_t stride, std::int64_t pad) {
    return conv_transpose2d(y, kernel, TensorPtr<S>(), stride, pad);
}

// Channelwise max over non-overlapping p x p windows.
template <typename S>
TensorPtr<S> max_pool2d(const TensorPtr<S>& x, std::int64_t p) {
    if (x->shape.size() != 3) {
        throw DimensionError("max_pool2d expects [C,H,W], got " + shape_str(x->shape));
    }
    const std::int64_t c = x->shape[0], h = x->shape[1], w = x->shape[2];
    if (p < 1 || h % p != 0 || w % p != 0) {
        throw DimensionError("max_pool2d: H=" + std::to_string(h) + ", W=" + std::to_string(w) +
                             " not divisible by p=" + std::to_string(p));
    }
    const std::int64_t h2 = h / p, w2 = w / p;
    auto out = zeros<S>({c, h2, w2});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(c * h2 * w2));
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t oh = 0; oh < h2; ++oh) {
            for (std::int64_t ow = 0; ow < w2; ++ow) {
                std::int64_t best = (ch * h + oh * p) * w + ow * p;
                for (std::int64_t u = 0; u < p; ++u)
                    for (std::int64_t v = 0; v < p; ++v) {
                        const std::int64_t idx = (ch * h + oh * p + u) * w + ow * p + v;
                        if (x->data[idx] > x->data[best]) best = idx;
                    }
                out->data[(ch * h2 + oh) * w2 + ow] = x->data[best];
                argmax[(ch * h2 + oh) * w2 + ow] = best;
            }
        }
    }
    if (detail::start_record<S>({x}, out)) {
        Tape<S>::active()->record([x, out, argmax = std::move(argmax)] {
            if (!out->has_grad() || !x->requires_grad) return;
            x->ensure_grad();
            for (std::int64_t i = 0; i < out->size(); ++i) x->grad[argmax[i]] += out->grad[i];
        });
    }
    return out;
}

}  // namespace mtunet::ops
