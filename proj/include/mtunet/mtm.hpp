#pragma once

// Mixed Transformer Module: pre-norm residual composition of the local-global
// attention and external attention, plus the 2-stride transition layers that
// move between stages.

#include <cstdint>
#include <string>

#include "mtunet/attention.hpp"
#include "mtunet/conv.hpp"
#include "mtunet/ops.hpp"
#include "mtunet/optim.hpp"

namespace mtunet {

template <typename S>
struct LayerNormParams {
    TensorPtr<S> gamma, beta;

    LayerNormParams() = default;
    LayerNormParams(ParamInit<S>& init, const std::string& prefix, std::int64_t c) {
        gamma = init.ones_param(prefix + ".gamma", {c});
        beta = init.zeros_param(prefix + ".beta", {c});
    }
};

// Normalizes over the channel axis of a [C,H,W] map.
template <typename S>
TensorPtr<S> layer_norm_channels(const TensorPtr<S>& x, const LayerNormParams<S>& ln) {
    const std::int64_t h = x->shape[1], w = x->shape[2];
    auto t = ops::layer_norm_lastdim(ops::channels_to_tokens(x), ln.gamma, ln.beta);
    return ops::tokens_to_channels(t, h, w);
}

// h = X + LGG-SA(LN(X)); out = h + EA(LN(h)). Shape preserving; with zeroed
// output projections both branches vanish and the block is the identity.
template <typename S>
struct MtmBlock {
    std::int64_t channels = 0;
    LayerNormParams<S> norm1, norm2;
    LggSa<S> lgg;
    ExternalAttention<S> ea;

    MtmBlock() = default;
    MtmBlock(ParamInit<S>& init, const std::string& prefix, std::int64_t c, std::int64_t window,
             std::int64_t heads, std::int64_t ea_slots, AggregatorMode mode)
        : channels(c),
          norm1(init, prefix + ".norm1", c),
          norm2(init, prefix + ".norm2", c),
          lgg(init, prefix + ".lgg", c, window, heads, mode),
          ea(init, prefix + ".ea", c, ea_slots) {}

    TensorPtr<S> forward(const TensorPtr<S>& x) const {
        const std::int64_t h = x->shape[1], w = x->shape[2];
        auto hmid = ops::add(x, lgg.forward(layer_norm_channels(x, norm1)));
        auto t = ops::layer_norm_lastdim(ops::channels_to_tokens(hmid), norm2.gamma, norm2.beta);
        return ops::add(hmid, ops::tokens_to_channels(ea.forward(t), h, w));
    }
};

enum class TransitionDirection { kDown, kUp };

// 2-stride convolutional (down: C -> 2C, halves H/W) or deconvolutional
// (up: C -> C/2, doubles H/W) stage transition.
template <typename S>
struct Transition {
    TransitionDirection direction = TransitionDirection::kDown;
    std::int64_t c_in = 0, c_out = 0;
    TensorPtr<S> kernel, bias;

    Transition() = default;
    Transition(ParamInit<S>& init, const std::string& prefix, TransitionDirection dir,
               std::int64_t in, std::int64_t out)
        : direction(dir), c_in(in), c_out(out) {
        if (dir == TransitionDirection::kDown && out != 2 * in) {
            throw ConfigError("down transition must double channels: " + std::to_string(in) +
                              " -> " + std::to_string(out));
        }
        if (dir == TransitionDirection::kUp && in != 2 * out) {
            throw ConfigError("up transition must halve channels: " + std::to_string(in) +
                              " -> " + std::to_string(out));
        }
        if (dir == TransitionDirection::kDown) {
            kernel = init.kaiming(prefix + ".kernel", {out, in, 3, 3}, in * 9);
        } else {
            kernel = init.kaiming(prefix + ".kernel", {in, out, 4, 4}, in * 16);
        }
        bias = init.zeros_param(prefix + ".bias", {out});
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const {
        if (direction == TransitionDirection::kDown) {
            return ops::conv2d(x, kernel, bias, 2, 1);
        }
        return ops::conv_transpose2d(x, kernel, bias, 2, 1);
    }
};

}  // namespace mtunet
