#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mtunet/commands.hpp"
#include "mtunet/error.hpp"
#include "mtunet/run_config.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts, const std::string& default_out) {
    opts.out_dir = default_out;
    cmd->add_option("--config", opts.config_path, "JSON config file");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "master seed (overrides config)");
}

mtunet::RunConfig load_config(const CommonOpts& opts) {
    mtunet::RunConfig config;
    if (!opts.config_path.empty()) config = mtunet::load_run_config_file(opts.config_path);
    if (opts.seed >= 0) config.seed = static_cast<std::uint64_t>(opts.seed);
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixed-Transformer U-Net: training, evaluation, gradient checking, "
                 "complexity benchmarks, and synthetic data generation"};
    app.require_subcommand(1);

    CommonOpts train_opts, eval_opts, grad_opts, bench_opts, synth_opts;
    std::int64_t steps = -1;
    std::string ckpt_path, data_dir;
    bool corrupt_backward = false;

    auto* train = app.add_subcommand("train", "train on synthetic data");
    add_common(train, train_opts, "out-train");
    train->add_option("--steps", steps, "training steps (overrides config)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (DSC / HD95)");
    add_common(eval, eval_opts, "out-eval");
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval->add_option("--data", data_dir, "dataset directory written by `synth`");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(gradcheck, grad_opts, "out-gradcheck");
    gradcheck->add_flag("--corrupt-backward", corrupt_backward)->group("");

    auto* bench = app.add_subcommand("bench", "attention MAC/wall-time scaling");
    add_common(bench, bench_opts, "out-bench");

    auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
    add_common(synth, synth_opts, "out-synth");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : mtunet::cli::kExitConfig;
    }

    try {
        if (train->parsed()) {
            auto config = load_config(train_opts);
            if (steps >= 0) config.optim.steps = steps;
            return mtunet::cli::run_train(config, train_opts.out_dir);
        }
        if (eval->parsed()) {
            return mtunet::cli::run_eval(load_config(eval_opts), ckpt_path, data_dir,
                                         eval_opts.out_dir);
        }
        if (gradcheck->parsed()) {
            return mtunet::cli::run_gradcheck(load_config(grad_opts), grad_opts.out_dir,
                                              corrupt_backward);
        }
        if (bench->parsed()) {
            return mtunet::cli::run_bench(load_config(bench_opts), bench_opts.out_dir);
        }
        if (synth->parsed()) {
            return mtunet::cli::run_synth(load_config(synth_opts), synth_opts.out_dir);
        }
    } catch (const mtunet::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return mtunet::cli::kExitConfig;
    } catch (const mtunet::DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return mtunet::cli::kExitConfig;
    } catch (const mtunet::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return mtunet::cli::kExitNumeric;
    } catch (const mtunet::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return mtunet::cli::kExitData;
    } catch (const mtunet::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return mtunet::cli::kExitData;
    } catch (const mtunet::CorruptionError& e) {
        std::cerr << "corruption error: " << e.what() << "\n";
        return mtunet::cli::kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return mtunet::cli::kExitGeneric;
    }
    return mtunet::cli::kExitGeneric;
}
