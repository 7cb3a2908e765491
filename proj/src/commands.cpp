#include "mtunet/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "mtunet/attention.hpp"
#include "mtunet/checkpoint.hpp"
#include "mtunet/gradcheck.hpp"
#include "mtunet/metrics.hpp"
#include "mtunet/model.hpp"
#include "mtunet/synth.hpp"
#include "mtunet/tensor_io.hpp"

namespace mtunet::cli {

namespace fs = std::filesystem;
using metrics::format_double;

namespace {

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    return x;
}

void write_config_echo(const RunConfig& config, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(out_dir + "/config.json", std::ios::trunc);
    out << run_config_to_json(config).dump(2) << "\n";
}

template <typename S>
TensorPtr<S> image_tensor(const synth::Sample& sample) {
    std::vector<S> data(sample.image.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<S>(sample.image[i]);
    return make_tensor<S>({1, sample.size, sample.size}, std::move(data));
}

void require_dataset_matches_model(const RunConfig& config) {
    if (config.synth.size != config.model.input_size) {
        throw ConfigError("synth.size " + std::to_string(config.synth.size) +
                          " != model.input_size " + std::to_string(config.model.input_size));
    }
    if (config.model.in_channels != 1) {
        throw ConfigError("synthetic data is single-channel; model.in_channels must be 1");
    }
    if (config.synth.num_classes != config.model.num_classes) {
        throw ConfigError("synth.num_classes " + std::to_string(config.synth.num_classes) +
                          " != model.num_classes " + std::to_string(config.model.num_classes));
    }
}

std::string sample_file(const std::string& dir, const char* kind, std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04lld.tns", kind, static_cast<long long>(index));
    return dir + "/" + buf;
}

void save_dataset(const std::string& dir, const std::vector<synth::Sample>& samples,
                  const synth::SynthSpec& spec) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["count"] = static_cast<std::int64_t>(samples.size());
    manifest["size"] = spec.size;
    manifest["num_classes"] = spec.num_classes;
    manifest["noise"] = spec.noise;
    manifest["seed"] = spec.seed;
    std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        io::save_tensor_file(sample_file(dir, "image", static_cast<std::int64_t>(i)),
                             {1, s.size, s.size}, s.image.data());
        std::vector<float> label_f(s.label.size());
        for (std::size_t j = 0; j < s.label.size(); ++j)
            label_f[j] = static_cast<float>(s.label[j]);
        io::save_tensor_file(sample_file(dir, "label", static_cast<std::int64_t>(i)),
                             {s.size, s.size}, label_f.data());
    }
}

std::vector<synth::Sample> load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw DataError("cannot open dataset manifest " + dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed dataset manifest: ") + e.what());
    }
    const auto count = manifest.at("count").get<std::int64_t>();
    const auto size = manifest.at("size").get<std::int64_t>();
    std::vector<synth::Sample> samples;
    samples.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        synth::Sample s;
        s.size = size;
        auto [ishape, image] = io::load_tensor_file_as<float>(sample_file(dir, "image", i));
        if (ishape != Shape{1, size, size}) {
            throw CorruptionError("dataset image " + std::to_string(i) + " has shape " +
                                  shape_str(ishape));
        }
        s.image = std::move(image);
        auto [lshape, label_f] = io::load_tensor_file_as<float>(sample_file(dir, "label", i));
        if (lshape != Shape{size, size}) {
            throw CorruptionError("dataset label " + std::to_string(i) + " has shape " +
                                  shape_str(lshape));
        }
        s.label.resize(label_f.size());
        for (std::size_t j = 0; j < label_f.size(); ++j)
            s.label[j] = static_cast<std::int64_t>(label_f[j]);
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename S>
int train_impl(const RunConfig& config, const std::string& out_dir) {
    require_dataset_matches_model(config);
    auto dataset = synth::generate(config.synth);
    const auto train_n = static_cast<std::int64_t>(dataset.size()) - config.train.eval_count;
    if (train_n < 1) throw ConfigError("no training samples left after eval_count hold-out");

    auto model = MtUnet<S>::build(config.model, config.seed);
    std::cout << "model parameters: " << model->parameter_count() << "\n";

    const std::string latest = out_dir + "/checkpoint_latest.ckpt";
    const std::string final_path = out_dir + "/checkpoint_final.ckpt";
    auto save_as = [&](const std::string& path) {
        const std::string tmp = path + ".tmp";
        io::save_checkpoint(tmp, model->store(), config.model, config.seed);
        fs::rename(tmp, path);
    };

    std::ofstream log(out_dir + "/loss_log.csv", std::ios::trunc);
    log << "step,loss\n";
    log.flush();

    const AdamConfig adam{config.optim.lr, config.optim.beta1, config.optim.beta2,
                          config.optim.eps};
    const auto batch_size = std::min<std::int64_t>(config.optim.batch, train_n);

    std::vector<std::int64_t> order(static_cast<std::size_t>(train_n));
    for (std::int64_t i = 0; i < train_n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::int64_t cursor = train_n;  // forces a shuffle before the first batch
    std::uint64_t epoch = 0;

    std::int64_t step = 0;
    try {
        for (step = 1; step <= config.optim.steps; ++step) {
            std::vector<std::int64_t> batch;
            if (config.train.fixed_batch) {
                for (std::int64_t i = 0; i < batch_size; ++i) batch.push_back(i);
            } else {
                for (std::int64_t i = 0; i < batch_size; ++i) {
                    if (cursor >= train_n) {
                        ++epoch;
                        std::mt19937_64 rng(mix64(config.seed, epoch));
                        std::shuffle(order.begin(), order.end(), rng);
                        cursor = 0;
                    }
                    batch.push_back(order[static_cast<std::size_t>(cursor++)]);
                }
            }

            TapeScope<S> scope;
            std::vector<TensorPtr<S>> images;
            std::vector<std::int64_t> labels;
            for (auto idx : batch) {
                synth::Sample sample = dataset[static_cast<std::size_t>(idx)];
                if (config.train.augment) {
                    synth::SplitMix64 rng(mix64(config.seed ^ 0xa06u,
                                                static_cast<std::uint64_t>(step * 4096 + idx)));
                    synth::random_augment(sample, rng);
                }
                images.push_back(image_tensor<S>(sample));
                labels.insert(labels.end(), sample.label.begin(), sample.label.end());
            }
            auto logits = model->forward_batch(images);
            auto loss = segmentation_loss<S>(logits, labels);
            const double loss_value = static_cast<double>(loss.total->data[0]);
            scope.backward(loss.total);
            adam_step(model->store(), adam);

            log << step << "," << format_double(loss_value, 9) << "\n";
            log.flush();
            if (config.train.log_every > 0 &&
                (step % config.train.log_every == 0 || step == 1)) {
                std::cout << "step " << step << " loss " << format_double(loss_value, 6)
                          << " (ce " << format_double(loss.ce, 6) << ", dice "
                          << format_double(loss.dice_term, 6) << ")\n";
            }
            if (step % config.train.ckpt_every == 0) save_as(latest);
        }
    } catch (const NumericError& e) {
        std::cerr << "training aborted at step " << step << ": " << e.what() << "\n";
        if (fs::exists(latest)) {
            std::cerr << "last good checkpoint retained at " << latest << "\n";
        }
        return kExitNumeric;
    }
    save_as(final_path);
    std::cout << "final checkpoint: " << final_path << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

template <typename S>
int eval_impl(const RunConfig& config, const std::string& ckpt_path, const std::string& data_dir,
              const std::string& out_dir) {
    auto model = MtUnet<S>::build(config.model, config.seed);
    io::load_checkpoint<S>(ckpt_path, model->store(), config.model);

    std::vector<synth::Sample> samples;
    if (!data_dir.empty()) {
        samples = load_dataset(data_dir);
    } else {
        require_dataset_matches_model(config);
        auto dataset = synth::generate(config.synth);
        const auto eval_n = config.train.eval_count > 0
                                ? config.train.eval_count
                                : static_cast<std::int64_t>(dataset.size());
        samples.assign(dataset.end() - eval_n, dataset.end());
    }
    if (samples.empty()) throw DataError("no samples to evaluate");

    const auto k = config.model.num_classes;
    std::ofstream csv(out_dir + "/metrics.csv", std::ios::trunc);
    csv << "sample,class,dsc,hd95\n";

    double dsc_sum = 0.0, hd_sum = 0.0;
    std::int64_t dsc_count = 0, hd_count = 0;
    std::vector<double> class_dsc_sum(static_cast<std::size_t>(k), 0.0);
    std::vector<double> class_hd_sum(static_cast<std::size_t>(k), 0.0);
    std::vector<std::int64_t> class_hd_count(static_cast<std::size_t>(k), 0);

    for (std::size_t si = 0; si < samples.size(); ++si) {
        const auto& sample = samples[si];
        if (sample.size != config.model.input_size) {
            throw DataError("sample " + std::to_string(si) + " size " +
                            std::to_string(sample.size) + " != model input " +
                            std::to_string(config.model.input_size));
        }
        auto logits = model->forward_sample(image_tensor<S>(sample));
        auto pred = argmax_classes(*logits);
        auto report = metrics::evaluate_labels(pred, sample.label, sample.size, sample.size, k);
        for (const auto& cm : report.per_class) {
            csv << si << "," << cm.class_id << "," << format_double(cm.dsc) << ","
                << (cm.hd95 ? format_double(*cm.hd95) : std::string()) << "\n";
            dsc_sum += cm.dsc;
            ++dsc_count;
            class_dsc_sum[static_cast<std::size_t>(cm.class_id)] += cm.dsc;
            if (cm.hd95) {
                hd_sum += *cm.hd95;
                ++hd_count;
                class_hd_sum[static_cast<std::size_t>(cm.class_id)] += *cm.hd95;
                ++class_hd_count[static_cast<std::size_t>(cm.class_id)];
            }
        }
    }
    const double mean_dsc = dsc_count ? dsc_sum / static_cast<double>(dsc_count) : 0.0;
    csv << "mean,all," << format_double(mean_dsc) << ","
        << (hd_count ? format_double(hd_sum / static_cast<double>(hd_count)) : std::string())
        << "\n";

    std::ofstream txt(out_dir + "/metrics.txt", std::ios::trunc);
    txt << "samples: " << samples.size() << "\n";
    for (std::int64_t cls = 1; cls < k; ++cls) {
        const auto n = static_cast<double>(samples.size());
        txt << "class " << cls << ": dsc="
            << format_double(class_dsc_sum[static_cast<std::size_t>(cls)] / n) << " hd95="
            << (class_hd_count[static_cast<std::size_t>(cls)] > 0
                    ? format_double(class_hd_sum[static_cast<std::size_t>(cls)] /
                                    static_cast<double>(
                                        class_hd_count[static_cast<std::size_t>(cls)]))
                    : std::string("missing"))
            << "\n";
    }
    txt << "mean: dsc=" << format_double(mean_dsc) << " hd95="
        << (hd_count ? format_double(hd_sum / static_cast<double>(hd_count))
                     : std::string("missing"))
        << "\n";

    std::cout << "mean_foreground_dsc=" << format_double(mean_dsc) << "\n";
    std::cout << "mean_hd95="
              << (hd_count ? format_double(hd_sum / static_cast<double>(hd_count))
                           : std::string("missing"))
              << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

ModelConfig gradcheck_model_config(const RunConfig& config) {
    ModelConfig m;
    m.input_size = config.gradcheck.input_size;
    m.in_channels = 1;
    m.num_classes = config.gradcheck.num_classes;
    m.stage_widths = config.gradcheck.stage_widths;
    m.window = config.gradcheck.window;
    m.ea_slots = config.gradcheck.ea_slots;
    m.heads = config.gradcheck.heads;
    return m;
}

int gradcheck_impl(const RunConfig& config, const std::string& out_dir, bool corrupt_backward) {
    const auto model_config = gradcheck_model_config(config);
    auto model = MtUnet<double>::build(model_config, config.seed);

    // One fixed random sample; gradcheck does not need realistic shapes.
    const auto n = model_config.input_size;
    synth::SplitMix64 rng(mix64(config.seed, 0x6c0de));
    std::vector<double> image(static_cast<std::size_t>(n * n));
    std::vector<std::int64_t> labels(static_cast<std::size_t>(n * n));
    for (auto& v : image) v = rng.uniform01();
    for (auto& v : labels) v = rng.below(model_config.num_classes);
    auto image_t = make_tensor<double>({1, n, n}, std::move(image));

    auto f = [&](ParameterStore<double>&) {
        auto logits = model->forward_batch({image_t});
        return segmentation_loss<double>(logits, labels).total;
    };

    ops::detail::corrupt_matmul_backward() = corrupt_backward;
    GradCheckReport report;
    try {
        report = grad_check(f, model->store(), config.gradcheck.eps);
    } catch (...) {
        ops::detail::corrupt_matmul_backward() = false;
        throw;
    }
    ops::detail::corrupt_matmul_backward() = false;

    std::ofstream txt(out_dir + "/gradcheck.txt", std::ios::trunc);
    auto emit = [&](std::ostream& os) {
        os << "parameter max_rel_err entries\n";
        for (const auto& e : report.per_param) {
            os << e.name << " " << format_double(e.max_rel_err, 9) << " " << e.count << "\n";
        }
        os << "max_rel_err=" << format_double(report.max_rel_err, 9)
           << " tol=" << format_double(config.gradcheck.tol, 9)
           << " result=" << (report.passes(config.gradcheck.tol) ? "PASS" : "FAIL") << "\n";
    };
    emit(txt);
    emit(std::cout);
    return report.passes(config.gradcheck.tol) ? kExitOk : kExitNumeric;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string mechanism;
    std::int64_t tokens = 0;
    std::uint64_t macs = 0;
    double wall_ms = 0.0;
};

template <typename F>
BenchRow measure(const std::string& mechanism, std::int64_t tokens, std::int64_t repeats, F&& f) {
    BenchRow row;
    row.mechanism = mechanism;
    row.tokens = tokens;
    auto& fc = FlopCounter::instance();
    fc.reset();
    f();
    row.macs = fc.macs();
    std::vector<double> times;
    for (std::int64_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    row.wall_ms = times[times.size() / 2];
    return row;
}

int bench_impl(const RunConfig& config, const std::string& out_dir) {
    const auto c = config.bench.channels;
    const auto p = config.bench.window;
    for (auto size : config.bench.sizes) {
        if (size % p != 0) {
            throw ConfigError("bench size " + std::to_string(size) +
                              " not divisible by window " + std::to_string(p));
        }
    }

    std::vector<BenchRow> rows;
    auto add_rows = [&](const std::string& mechanism, auto&& runner) {
        for (auto size : config.bench.sizes) {
            rows.push_back(measure(mechanism, size * size, config.bench.repeats,
                                   [&, size] { runner(size); }));
        }
    };

    ParameterStore<float> store;
    ParamInit<float> init(store, config.seed);
    FullSelfAttention<float> full(init, "full", c);
    LocalSelfAttention<float> lsa(init, "lsa", c, p, 1);
    GaussianAxialAttention<float> gsa(init, "gsa", c, p, 1);
    LggSa<float> lgg(init, "lgg", c, p, 1, AggregatorMode::kDynamic);

    auto grid_input = [&](std::int64_t size) {
        synth::SplitMix64 rng(mix64(config.seed, static_cast<std::uint64_t>(size)));
        std::vector<float> data(static_cast<std::size_t>(c * size * size));
        for (auto& v : data) v = static_cast<float>(rng.uniform01() - 0.5);
        return make_tensor<float>({c, size, size}, std::move(data));
    };
    auto token_input = [&](std::int64_t size) {
        synth::SplitMix64 rng(mix64(config.seed, static_cast<std::uint64_t>(size) * 7));
        std::vector<float> data(static_cast<std::size_t>(size * size * c));
        for (auto& v : data) v = static_cast<float>(rng.uniform01() - 0.5);
        return make_tensor<float>({size * size, c}, std::move(data));
    };

    add_rows("full_sa", [&](std::int64_t size) { full.forward(token_input(size)); });
    add_rows("lsa", [&](std::int64_t size) { lsa.forward(grid_input(size)); });
    // GSA operates on the aggregated coarse grid of an n-token input.
    add_rows("gsa", [&](std::int64_t size) { gsa.forward(grid_input(size / p)); });
    add_rows("lgg_sa", [&](std::int64_t size) { lgg.forward(grid_input(size)); });

    std::ofstream csv(out_dir + "/bench.csv", std::ios::trunc);
    csv << "mechanism,tokens,macs,wall_ms,mac_ratio\n";
    std::cout << "mechanism tokens macs wall_ms mac_ratio\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        std::string ratio;
        if (i > 0 && rows[i - 1].mechanism == row.mechanism) {
            ratio = format_double(static_cast<double>(row.macs) /
                                  static_cast<double>(rows[i - 1].macs), 3);
        }
        csv << row.mechanism << "," << row.tokens << "," << row.macs << ","
            << format_double(row.wall_ms, 3) << "," << ratio << "\n";
        std::cout << row.mechanism << " " << row.tokens << " " << row.macs << " "
                  << format_double(row.wall_ms, 3) << " " << (ratio.empty() ? "-" : ratio)
                  << "\n";
    }
    return kExitOk;
}

}  // namespace

int run_train(const RunConfig& config, const std::string& out_dir) {
    config.validate();
    write_config_echo(config, out_dir);
    if (config.precision == "f64") return train_impl<double>(config, out_dir);
    return train_impl<float>(config, out_dir);
}

int run_eval(const RunConfig& config, const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_dir) {
    config.validate();
    write_config_echo(config, out_dir);
    if (config.precision == "f64") return eval_impl<double>(config, ckpt_path, data_dir, out_dir);
    return eval_impl<float>(config, ckpt_path, data_dir, out_dir);
}

int run_gradcheck(const RunConfig& config, const std::string& out_dir, bool corrupt_backward) {
    gradcheck_model_config(config).validate();
    write_config_echo(config, out_dir);
    return gradcheck_impl(config, out_dir, corrupt_backward);
}

int run_bench(const RunConfig& config, const std::string& out_dir) {
    write_config_echo(config, out_dir);
    return bench_impl(config, out_dir);
}

int run_synth(const RunConfig& config, const std::string& out_dir) {
    write_config_echo(config, out_dir);
    auto samples = synth::generate(config.synth);
    save_dataset(out_dir, samples, config.synth);
    std::cout << "wrote " << samples.size() << " samples to " << out_dir << "\n";
    return kExitOk;
}

}  // namespace mtunet::cli
