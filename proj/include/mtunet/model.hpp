#pragma once

// MT-UNet assembly: convolutional stem and shallow stages, MTM deep stages,
// mirrored decoder with skip connections, segmentation head, and the
// combined cross-entropy + soft-Dice loss.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtunet/mtm.hpp"

namespace mtunet {

struct ModelConfig {
    std::int64_t input_size = 64;
    std::int64_t in_channels = 1;
    std::int64_t num_classes = 3;
    std::vector<std::int64_t> stage_widths = {32, 64, 128, 256};
    std::vector<std::int64_t> mtm_stages = {};  // empty -> the two deepest stages
    std::int64_t window = 4;
    std::int64_t ea_slots = 64;
    std::int64_t heads = 1;
    std::string aggregator = "dynamic";

    std::int64_t num_stages() const { return static_cast<std::int64_t>(stage_widths.size()); }
    std::int64_t stage_resolution(std::int64_t i) const { return input_size >> i; }

    // Window size clamped to the stage's grid so 1-window degenerate stages
    // still partition cleanly.
    std::int64_t effective_window(std::int64_t i) const {
        return std::min(window, stage_resolution(i));
    }

    std::vector<std::int64_t> effective_mtm_stages() const {
        if (!mtm_stages.empty()) return mtm_stages;
        const auto n = num_stages();
        if (n >= 2) return {n - 2, n - 1};
        return {n - 1};
    }

    bool is_mtm_stage(std::int64_t i) const {
        const auto stages = effective_mtm_stages();
        return std::find(stages.begin(), stages.end(), i) != stages.end();
    }

    void validate() const {
        if (input_size < 16 || (input_size & (input_size - 1)) != 0) {
            throw ConfigError("input_size must be a power of two >= 16, got " +
                              std::to_string(input_size));
        }
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (stage_widths.size() < 2) throw ConfigError("stage_widths needs at least 2 stages");
        for (std::size_t i = 0; i + 1 < stage_widths.size(); ++i) {
            if (stage_widths[i] < 1 || stage_widths[i + 1] != 2 * stage_widths[i]) {
                throw ConfigError("stage_widths must strictly double, got " +
                                  std::to_string(stage_widths[i]) + " -> " +
                                  std::to_string(stage_widths[i + 1]));
            }
        }
        if ((std::int64_t(1) << (num_stages() - 1)) > input_size) {
            throw ConfigError("stage_widths has more stages than input_size supports");
        }
        if (window < 1) throw ConfigError("window must be >= 1");
        if (ea_slots < 1) throw ConfigError("ea_slots must be >= 1");
        if (heads < 1) throw ConfigError("heads must be >= 1");
        for (auto s : effective_mtm_stages()) {
            if (s < 0 || s >= num_stages()) {
                throw ConfigError("mtm_stages index " + std::to_string(s) + " out of range");
            }
            const auto res = stage_resolution(s);
            const auto p = effective_window(s);
            if (res < 1 || res % p != 0) {
                throw ConfigError("mtm_stages: stage " + std::to_string(s) + " extent " +
                                  std::to_string(res) + " not divisible by window " +
                                  std::to_string(p));
            }
            if (stage_widths[static_cast<std::size_t>(s)] % heads != 0) {
                throw ConfigError("heads must divide the width of MTM stage " +
                                  std::to_string(s));
            }
        }
        aggregator_mode_from_string(aggregator);
    }
};

// Two 3x3 convolutions, each followed by channel layer norm and ReLU.
template <typename S>
struct ConvBlock {
    TensorPtr<S> k1, b1, k2, b2;
    LayerNormParams<S> n1, n2;

    ConvBlock() = default;
    ConvBlock(ParamInit<S>& init, const std::string& prefix, std::int64_t c) {
        k1 = init.kaiming(prefix + ".conv1.kernel", {c, c, 3, 3}, c * 9);
        b1 = init.zeros_param(prefix + ".conv1.bias", {c});
        n1 = LayerNormParams<S>(init, prefix + ".norm1", c);
        k2 = init.kaiming(prefix + ".conv2.kernel", {c, c, 3, 3}, c * 9);
        b2 = init.zeros_param(prefix + ".conv2.bias", {c});
        n2 = LayerNormParams<S>(init, prefix + ".norm2", c);
    }

    TensorPtr<S> forward(const TensorPtr<S>& x) const {
        auto h = ops::gelu(layer_norm_channels(ops::conv2d(x, k1, b1, 1, 1), n1));
        return ops::gelu(layer_norm_channels(ops::conv2d(h, k2, b2, 1, 1), n2));
    }
};

template <typename S>
struct StageBlock {
    std::optional<ConvBlock<S>> conv;
    std::optional<MtmBlock<S>> mtm;

    TensorPtr<S> forward(const TensorPtr<S>& x) const {
        return mtm ? mtm->forward(x) : conv->forward(x);
    }
};

// Skip fusion: channel concat followed by a learned 1x1 projection back to
// the stage width.
template <typename S>
struct SkipFusion {
    TensorPtr<S> kernel, bias;

    SkipFusion() = default;
    SkipFusion(ParamInit<S>& init, const std::string& prefix, std::int64_t c) {
        kernel = init.kaiming(prefix + ".kernel", {c, 2 * c, 1, 1}, 2 * c);
        bias = init.zeros_param(prefix + ".bias", {c});
    }

    TensorPtr<S> forward(const TensorPtr<S>& skip, const TensorPtr<S>& up) const {
        auto fused = ops::conv2d(ops::concat_channels(skip, up), kernel, bias, 1, 0);
        return ops::gelu(fused);
    }
};

template <typename S>
class MtUnet {
public:
    static std::unique_ptr<MtUnet<S>> build(const ModelConfig& config, std::uint64_t seed) {
        config.validate();
        auto model = std::unique_ptr<MtUnet<S>>(new MtUnet<S>());
        model->config_ = config;
        ParamInit<S> init(model->store_, seed);

        const auto& widths = config.stage_widths;
        const auto n = config.num_stages();

        model->stem_k_ = init.kaiming("stem.kernel", {widths[0], config.in_channels, 3, 3},
                                      config.in_channels * 9);
        model->stem_b_ = init.zeros_param("stem.bias", {widths[0]});
        model->stem_norm_ = LayerNormParams<S>(init, "stem.norm", widths[0]);

        for (std::int64_t i = 0; i < n; ++i) {
            model->enc_blocks_.push_back(
                model->make_stage(init, "enc" + std::to_string(i), i));
            if (i < n - 1) {
                model->downs_.emplace_back(init, "down" + std::to_string(i),
                                           TransitionDirection::kDown, widths[i], widths[i + 1]);
            }
        }
        for (std::int64_t i = n - 2; i >= 0; --i) {
            model->ups_.emplace(model->ups_.begin(),
                                Transition<S>(init, "up" + std::to_string(i),
                                              TransitionDirection::kUp, widths[i + 1], widths[i]));
            model->fusions_.emplace(model->fusions_.begin(),
                                    SkipFusion<S>(init, "fuse" + std::to_string(i), widths[i]));
            model->dec_blocks_.emplace(model->dec_blocks_.begin(),
                                       model->make_stage(init, "dec" + std::to_string(i), i));
        }
        model->head_k_ = init.kaiming("head.kernel", {config.num_classes, widths[0], 1, 1},
                                      widths[0]);
        model->head_b_ = init.zeros_param("head.bias", {config.num_classes});
        return model;
    }

    const ModelConfig& config() const { return config_; }
    ParameterStore<S>& store() { return store_; }
    const ParameterStore<S>& store() const { return store_; }
    std::int64_t parameter_count() const { return store_.parameter_count(); }

    // image: [in_channels, H, W] -> logits [num_classes, H, W].
    TensorPtr<S> forward_sample(const TensorPtr<S>& image) const {
        const Shape expected{config_.in_channels, config_.input_size, config_.input_size};
        if (image->shape != expected) {
            throw DimensionError("forward: expected image " + shape_str(expected) + ", got " +
                                 shape_str(image->shape));
        }
        auto x = run_stage("stem", [&] {
            return ops::gelu(
                layer_norm_channels(ops::conv2d(image, stem_k_, stem_b_, 1, 1), stem_norm_));
        });

        const auto n = config_.num_stages();
        std::vector<TensorPtr<S>> skips(static_cast<std::size_t>(n - 1));
        for (std::int64_t i = 0; i < n; ++i) {
            x = run_stage("enc" + std::to_string(i), [&] { return enc_blocks_[i].forward(x); });
            if (i < n - 1) {
                skips[i] = x;
                x = run_stage("down" + std::to_string(i), [&] { return downs_[i].forward(x); });
            }
        }
        for (std::int64_t i = n - 2; i >= 0; --i) {
            x = run_stage("up" + std::to_string(i), [&] { return ups_[i].forward(x); });
            x = run_stage("fuse" + std::to_string(i),
                          [&] { return fusions_[i].forward(skips[i], x); });
            x = run_stage("dec" + std::to_string(i), [&] { return dec_blocks_[i].forward(x); });
        }
        return run_stage("head", [&] { return ops::conv2d(x, head_k_, head_b_, 1, 0); });
    }

    // images: one [in_channels, H, W] tensor per sample -> [B, K, H, W].
    // Samples are processed independently; nothing couples batch members.
    TensorPtr<S> forward_batch(const std::vector<TensorPtr<S>>& images) const {
        std::vector<TensorPtr<S>> logits;
        logits.reserve(images.size());
        for (const auto& img : images) logits.push_back(forward_sample(img));
        return ops::stack0(logits);
    }

private:
    MtUnet() = default;

    StageBlock<S> make_stage(ParamInit<S>& init, const std::string& prefix, std::int64_t i) {
        StageBlock<S> block;
        const auto c = config_.stage_widths[static_cast<std::size_t>(i)];
        if (config_.is_mtm_stage(i)) {
            block.mtm.emplace(init, prefix + ".mtm", c, config_.effective_window(i),
                              config_.heads, config_.ea_slots,
                              aggregator_mode_from_string(config_.aggregator));
        } else {
            block.conv.emplace(init, prefix, c);
        }
        return block;
    }

    template <typename F>
    TensorPtr<S> run_stage(const std::string& name, F&& f) const {
        try {
            return f();
        } catch (const DimensionError& e) {
            throw DimensionError("at stage " + name + ": " + e.what());
        }
    }

    ModelConfig config_;
    ParameterStore<S> store_;
    TensorPtr<S> stem_k_, stem_b_;
    LayerNormParams<S> stem_norm_;
    std::vector<StageBlock<S>> enc_blocks_;
    std::vector<Transition<S>> downs_;
    std::vector<Transition<S>> ups_;        // index i: stage i+1 -> i
    std::vector<SkipFusion<S>> fusions_;    // index i: decoder stage i
    std::vector<StageBlock<S>> dec_blocks_; // index i: decoder stage i
    TensorPtr<S> head_k_, head_b_;
};

// 0.5 * cross-entropy + 0.5 * (1 - mean soft Dice), Dice smoothed with +1 in
// numerator and denominator, both terms averaged over the batch.
template <typename S>
struct LossParts {
    TensorPtr<S> total;
    double ce = 0.0;
    double dice_term = 0.0;  // 1 - mean soft Dice
};

template <typename S>
LossParts<S> segmentation_loss(const TensorPtr<S>& logits,
                               const std::vector<std::int64_t>& labels) {
    if (logits->shape.size() != 4) {
        throw DimensionError("segmentation_loss expects logits [B,K,H,W], got " +
                             shape_str(logits->shape));
    }
    const std::int64_t b = logits->shape[0], k = logits->shape[1];
    const std::int64_t hw = logits->shape[2] * logits->shape[3];
    if (static_cast<std::int64_t>(labels.size()) != b * hw) {
        throw DimensionError("segmentation_loss: label count " + std::to_string(labels.size()) +
                             " != " + std::to_string(b * hw));
    }
    std::vector<S> onehot(static_cast<std::size_t>(b * hw * k), S(0));
    for (std::int64_t i = 0; i < b * hw; ++i) {
        const auto cls = labels[static_cast<std::size_t>(i)];
        if (cls < 0 || cls >= k) {
            throw DataError("label " + std::to_string(cls) + " out of range [0," +
                            std::to_string(k) + ")");
        }
        onehot[i * k + cls] = S(1);
    }
    auto y = make_tensor<S>({b * hw, k}, std::move(onehot));

    auto tokens = ops::batch_channels_to_tokens(logits);  // [B*HW, K]
    auto logp = ops::log_softmax_lastdim(tokens);
    auto ce = ops::scale(ops::sum_all(ops::mul(y, logp)),
                         static_cast<S>(-1.0 / static_cast<double>(b * hw)));

    auto probs3 = ops::reshape(ops::softmax_lastdim(tokens), {b, hw, k});
    auto y3 = ops::reshape(y, {b, hw, k});
    auto inter = ops::sum_lastdim(ops::transpose_last2(ops::mul(probs3, y3)));  // [B, K]
    auto psum = ops::sum_lastdim(ops::transpose_last2(probs3));                 // [B, K]
    auto ysum = ops::sum_lastdim(ops::transpose_last2(y3));                     // [B, K]
    auto dice = ops::div(ops::add_const(ops::scale(inter, S(2)), S(1)),
                         ops::add_const(ops::add(psum, ysum), S(1)));
    auto mean_dice = ops::scale(ops::sum_all(dice), static_cast<S>(1.0 / static_cast<double>(b * k)));
    auto dice_term = ops::add_const(ops::scale(mean_dice, S(-1)), S(1));

    LossParts<S> parts;
    parts.ce = static_cast<double>(ce->data[0]);
    parts.dice_term = static_cast<double>(dice_term->data[0]);
    parts.total = ops::add(ops::scale(ce, S(0.5)), ops::scale(dice_term, S(0.5)));
    return parts;
}

// Argmax over the class axis of one sample's logits [K, H, W].
template <typename S>
std::vector<std::int64_t> argmax_classes(const Tensor<S>& logits) {
    const std::int64_t k = logits.shape[0], hw = logits.shape[1] * logits.shape[2];
    std::vector<std::int64_t> out(static_cast<std::size_t>(hw));
    for (std::int64_t i = 0; i < hw; ++i) {
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < k; ++c) {
            if (logits.data[c * hw + i] > logits.data[best * hw + i]) best = c;
        }
        out[i] = best;
    }
    return out;
}

}  // namespace mtunet
