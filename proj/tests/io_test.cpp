#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "mtunet/checkpoint.hpp"
#include "mtunet/model.hpp"
#include "mtunet/run_config.hpp"
#include "mtunet/synth.hpp"
#include "mtunet/tensor_io.hpp"

using namespace mtunet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("mtunet_io_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.input_size = 16;
    c.num_classes = 2;
    c.stage_widths = {4, 8};
    c.ea_slots = 4;
    return c;
}

}  // namespace

TEST_CASE("tensor file round trip is bit-exact") {
    TempDir dir;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    std::vector<float> data(3 * 4 * 5);
    for (auto& v : data) v = dist(rng);

    const auto path = dir.file("t.tns");
    io::save_tensor_file(path, {3, 4, 5}, data.data());
    auto [shape, loaded] = io::load_tensor_file_as<float>(path);
    CHECK(shape == Shape{3, 4, 5});
    CHECK(loaded == data);

    // Scalar tensor with an empty shape.
    const double scalar = -0.6180339887;
    io::save_tensor_file(dir.file("s.tns"), {}, &scalar);
    auto [sshape, svals] = io::load_tensor_file_as<double>(dir.file("s.tns"));
    CHECK(sshape.empty());
    REQUIRE(svals.size() == 1);
    CHECK(svals[0] == scalar);
}

TEST_CASE("tensor file errors are typed and specific") {
    TempDir dir;
    std::vector<float> data(6, 1.5f);
    const auto path = dir.file("t.tns");
    io::save_tensor_file(path, {2, 3}, data.data());

    // Truncate the body by one byte.
    auto bytes = read_bytes(path);
    std::ofstream(dir.file("trunc.tns"), std::ios::binary)
        << bytes.substr(0, bytes.size() - 1);
    try {
        io::load_tensor_file_as<float>(dir.file("trunc.tns"));
        FAIL("expected CorruptionError");
    } catch (const CorruptionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("24") != std::string::npos);  // expected byte count
        CHECK(msg.find("23") != std::string::npos);  // actual byte count
    }

    std::ofstream(dir.file("extra.tns"), std::ios::binary) << bytes << "x";
    CHECK_THROWS_AS(io::load_tensor_file_as<float>(dir.file("extra.tns")), CorruptionError);

    std::ofstream(dir.file("header.tns"), std::ios::binary)
        << "{\"byte_order\":\"little\",\"dtype\":\"f16\",\"shape\":[2,3]}\n";
    CHECK_THROWS_WITH_AS(io::load_tensor_file_as<float>(dir.file("header.tns")),
                         doctest::Contains("dtype"), ParseError);

    std::ofstream(dir.file("shape.tns"), std::ios::binary)
        << "{\"byte_order\":\"little\",\"dtype\":\"f32\",\"shape\":[2,0]}\n";
    CHECK_THROWS_WITH_AS(io::load_tensor_file_as<float>(dir.file("shape.tns")),
                         doctest::Contains("shape"), ParseError);

    std::ofstream(dir.file("garbage.tns"), std::ios::binary) << "not json\n";
    CHECK_THROWS_AS(io::load_tensor_file_as<float>(dir.file("garbage.tns")), ParseError);

    CHECK_THROWS_AS(io::load_tensor_file_as<double>(path), ParseError);  // dtype mismatch
}

TEST_CASE("checkpoint round trip restores parameters, moments, and step") {
    TempDir dir;
    auto config = tiny_config();
    auto model = MtUnet<float>::build(config, 77);

    // One training step so the moments are non-trivial.
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> img(16 * 16);
    for (auto& v : img) v = dist(rng);
    std::vector<std::int64_t> labels(16 * 16, 1);
    {
        TapeScope<float> scope;
        auto image = make_tensor<float>({1, 16, 16}, img);
        auto loss = segmentation_loss<float>(model->forward_batch({image}), labels);
        scope.backward(loss.total);
    }
    adam_step(model->store(), AdamConfig{});

    const auto path = dir.file("model.ckpt");
    io::save_checkpoint(path, model->store(), config, 77);

    auto restored = MtUnet<float>::build(config, 1);  // different init, fully overwritten
    auto meta = io::load_checkpoint<float>(path, restored->store(), config);
    CHECK(meta.seed == 77);
    CHECK(meta.step == 1);
    CHECK(restored->store().step() == 1);
    for (const auto& [name, e] : model->store().entries()) {
        const auto& r = restored->store().entries().at(name);
        CHECK(e.value->data == r.value->data);
        CHECK(e.m == r.m);
        CHECK(e.v == r.v);
    }

    // save -> load -> save produces a byte-identical second file.
    const auto path2 = dir.file("model2.ckpt");
    io::save_checkpoint(path2, restored->store(), config, meta.seed);
    CHECK(read_bytes(path) == read_bytes(path2));
}

TEST_CASE("fresh checkpoint round-trips zero moments and step zero") {
    TempDir dir;
    auto config = tiny_config();
    auto model = MtUnet<float>::build(config, 7);
    io::save_checkpoint(dir.file("fresh.ckpt"), model->store(), config, 7);
    auto restored = MtUnet<float>::build(config, 7);
    auto meta = io::load_checkpoint<float>(dir.file("fresh.ckpt"), restored->store(), config);
    CHECK(meta.step == 0);
    for (const auto& [name, e] : restored->store().entries()) {
        for (auto v : e.m) CHECK(v == 0.0f);
        for (auto v : e.v) CHECK(v == 0.0f);
    }
}

TEST_CASE("truncated checkpoint payload is a corruption error") {
    TempDir dir;
    auto config = tiny_config();
    auto model = MtUnet<float>::build(config, 13);
    io::save_checkpoint(dir.file("m.ckpt"), model->store(), config, 13);
    auto bytes = read_bytes(dir.file("m.ckpt"));
    std::ofstream(dir.file("trunc.ckpt"), std::ios::binary)
        << bytes.substr(0, bytes.size() - 8);
    auto other = MtUnet<float>::build(config, 13);
    CHECK_THROWS_AS(io::load_checkpoint<float>(dir.file("trunc.ckpt"), other->store(), config),
                    CorruptionError);
}

TEST_CASE("checkpoint config mismatch names the first offending field") {
    TempDir dir;
    auto config = tiny_config();
    auto model = MtUnet<float>::build(config, 9);
    io::save_checkpoint(dir.file("m.ckpt"), model->store(), config, 9);

    auto altered = config;
    altered.num_classes = 3;
    auto other = MtUnet<float>::build(altered, 9);
    CHECK_THROWS_WITH_AS(
        io::load_checkpoint<float>(dir.file("m.ckpt"), other->store(), altered),
        doctest::Contains("num_classes"), ConfigError);

    // dtype mismatch is also rejected.
    auto dbl = MtUnet<double>::build(config, 9);
    CHECK_THROWS_AS(io::load_checkpoint<double>(dir.file("m.ckpt"), dbl->store(), config),
                    ConfigError);
}

TEST_CASE("synthetic generation is deterministic and class-complete") {
    synth::SynthSpec spec;
    spec.seed = 99;
    spec.count = 6;
    spec.size = 32;
    spec.num_classes = 3;
    spec.noise = 0.05;

    auto a = synth::generate(spec);
    auto b = synth::generate(spec);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image == b[i].image);
        CHECK(a[i].label == b[i].label);
        std::vector<int> seen(3, 0);
        for (auto v : a[i].label) {
            REQUIRE(v >= 0);
            REQUIRE(v < 3);
            seen[static_cast<std::size_t>(v)] = 1;
        }
        CHECK(seen[1] == 1);
        CHECK(seen[2] == 1);
        for (auto v : a[i].image) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("zero noise makes intensities exactly the per-class base values") {
    synth::SynthSpec spec;
    spec.seed = 11;
    spec.count = 3;
    spec.size = 32;
    spec.num_classes = 4;
    spec.noise = 0.0;
    for (const auto& sample : synth::generate(spec)) {
        for (std::size_t i = 0; i < sample.image.size(); ++i) {
            const auto expected =
                static_cast<float>(synth::class_intensity(sample.label[i], 4));
            CHECK(sample.image[i] == expected);
        }
    }
}

TEST_CASE("flip and rotation augmentations are exact involutions/cycles") {
    synth::SynthSpec spec;
    spec.seed = 13;
    spec.count = 1;
    spec.size = 32;
    auto sample = synth::generate(spec)[0];
    auto original = sample;

    synth::flip_horizontal(sample);
    CHECK(sample.image != original.image);
    synth::flip_horizontal(sample);
    CHECK(sample.image == original.image);
    CHECK(sample.label == original.label);

    synth::rotate90(sample, 1);
    synth::rotate90(sample, 3);
    CHECK(sample.image == original.image);
    CHECK(sample.label == original.label);

    synth::SplitMix64 rng1(42), rng2(42);
    auto s1 = original, s2 = original;
    synth::random_augment(s1, rng1);
    synth::random_augment(s2, rng2);
    CHECK(s1.image == s2.image);
    CHECK(s1.label == s2.label);
}

TEST_CASE("synth spec validation") {
    synth::SynthSpec spec;
    spec.size = 16;
    CHECK_THROWS_AS(synth::generate(spec), ConfigError);
    spec = {};
    spec.num_classes = 1;
    CHECK_THROWS_AS(synth::generate(spec), ConfigError);
    spec = {};
    spec.noise = 0.5;
    CHECK_THROWS_AS(synth::generate(spec), ConfigError);
}

TEST_CASE("run config: defaults, file parsing, unknown fields") {
    RunConfig defaults;
    CHECK(defaults.optim.lr == 1e-4);
    CHECK(defaults.optim.batch == 12);
    CHECK(defaults.precision == "f32");
    defaults.validate();

    auto j = run_config_to_json(defaults);
    auto round = run_config_from_json(j);
    CHECK(run_config_to_json(round) == j);

    TempDir dir;
    std::ofstream(dir.file("cfg.json"))
        << R"({"seed": 9, "optim": {"lr": 0.001, "steps": 7}, "model": {"input_size": 32}})";
    auto cfg = load_run_config_file(dir.file("cfg.json"));
    CHECK(cfg.seed == 9);
    CHECK(cfg.optim.lr == 0.001);
    CHECK(cfg.optim.steps == 7);
    CHECK(cfg.model.input_size == 32);
    CHECK(cfg.optim.batch == 12);  // untouched default

    std::ofstream(dir.file("bad.json")) << R"({"optim": {"lrr": 0.001}})";
    CHECK_THROWS_WITH_AS(load_run_config_file(dir.file("bad.json")),
                         doctest::Contains("optim.lrr"), ConfigError);

    std::ofstream(dir.file("bad2.json")) << R"({"presicion": "f32"})";
    CHECK_THROWS_WITH_AS(load_run_config_file(dir.file("bad2.json")),
                         doctest::Contains("presicion"), ConfigError);
}
