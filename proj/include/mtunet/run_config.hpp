#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtunet/model.hpp"
#include "mtunet/synth.hpp"

namespace mtunet {

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t batch = 12;
    std::int64_t steps = 100;
};

struct TrainConfig {
    std::int64_t ckpt_every = 100;
    std::int64_t log_every = 10;
    bool fixed_batch = false;  // overfit mode: reuse the first `batch` samples
    bool augment = false;
    std::int64_t eval_count = 0;  // samples held out from the end of the dataset
};

// Tiny-model settings for the gradient-fidelity check.
struct GradcheckConfig {
    std::int64_t input_size = 16;
    std::vector<std::int64_t> stage_widths = {4, 8, 16, 32};
    std::int64_t ea_slots = 8;
    std::int64_t heads = 1;
    std::int64_t window = 4;
    std::int64_t num_classes = 3;
    double eps = 1e-4;
    double tol = 1e-3;
};

struct BenchConfig {
    std::int64_t channels = 16;
    std::int64_t window = 4;
    std::vector<std::int64_t> sizes = {16, 32, 64};
    std::int64_t repeats = 5;
};

// Full run configuration: every field has a default, file values override
// defaults, CLI flags override file values.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string precision = "f32";  // "f32" | "f64"
    ModelConfig model;
    synth::SynthSpec synth;
    OptimConfig optim;
    TrainConfig train;
    GradcheckConfig gradcheck;
    BenchConfig bench;

    void validate() const;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config_file(const std::string& path);

}  // namespace mtunet
