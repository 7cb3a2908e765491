#pragma once

#include <string>

#include "mtunet/run_config.hpp"

namespace mtunet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitGeneric = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Training loop: checkpoints every train.ckpt_every steps and at the end,
// (step, loss) CSV log, deterministic under (config, seed).
int run_train(const RunConfig& config, const std::string& out_dir);

// Per-sample and aggregate DSC/HD95 against a checkpoint. `data_dir` empty:
// evaluate the held-out tail of the configured synthetic dataset.
int run_eval(const RunConfig& config, const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_dir);

// Finite-difference check of the whole tiny model in double precision.
// `corrupt_backward` deliberately breaks one backward rule (negative control).
int run_gradcheck(const RunConfig& config, const std::string& out_dir, bool corrupt_backward);

// MAC + wall-time scaling of full SA, LSA, GSA, and LGG-SA.
int run_bench(const RunConfig& config, const std::string& out_dir);

// Materializes the configured synthetic dataset as tensor files.
int run_synth(const RunConfig& config, const std::string& out_dir);

}  // namespace mtunet::cli
