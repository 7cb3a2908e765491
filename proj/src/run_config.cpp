#include "mtunet/run_config.hpp"

#include <fstream>
#include <set>

#include "mtunet/error.hpp"

namespace mtunet {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& section,
                const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) {
            throw ConfigError("unknown config field: " +
                              (section.empty() ? it.key() : section + "." + it.key()));
        }
    }
}

template <typename T>
void read_field(const json& j, const std::string& section, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config field " + (section.empty() ? std::string(key)
                                                             : section + "." + key) +
                          " has the wrong type");
    }
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
    json j;
    j["input_size"] = c.input_size;
    j["in_channels"] = c.in_channels;
    j["num_classes"] = c.num_classes;
    j["stage_widths"] = c.stage_widths;
    j["mtm_stages"] = c.mtm_stages;
    j["window"] = c.window;
    j["ea_slots"] = c.ea_slots;
    j["heads"] = c.heads;
    j["aggregator"] = c.aggregator;
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    check_keys(j, "model",
               {"input_size", "in_channels", "num_classes", "stage_widths", "mtm_stages",
                "window", "ea_slots", "heads", "aggregator"});
    ModelConfig c;
    read_field(j, "model", "input_size", c.input_size);
    read_field(j, "model", "in_channels", c.in_channels);
    read_field(j, "model", "num_classes", c.num_classes);
    read_field(j, "model", "stage_widths", c.stage_widths);
    read_field(j, "model", "mtm_stages", c.mtm_stages);
    read_field(j, "model", "window", c.window);
    read_field(j, "model", "ea_slots", c.ea_slots);
    read_field(j, "model", "heads", c.heads);
    read_field(j, "model", "aggregator", c.aggregator);
    return c;
}

void RunConfig::validate() const {
    if (precision != "f32" && precision != "f64") {
        throw ConfigError("precision must be \"f32\" or \"f64\", got " + precision);
    }
    model.validate();
    if (optim.batch < 1) throw ConfigError("optim.batch must be >= 1");
    if (optim.steps < 0) throw ConfigError("optim.steps must be >= 0");
    if (optim.lr <= 0) throw ConfigError("optim.lr must be > 0");
    if (train.ckpt_every < 1) throw ConfigError("train.ckpt_every must be >= 1");
    if (train.eval_count < 0 || train.eval_count > synth.count) {
        throw ConfigError("train.eval_count must lie in [0, synth.count]");
    }
}

json run_config_to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["precision"] = c.precision;
    j["model"] = model_config_to_json(c.model);
    j["synth"] = {{"seed", c.synth.seed},
                  {"count", c.synth.count},
                  {"size", c.synth.size},
                  {"num_classes", c.synth.num_classes},
                  {"noise", c.synth.noise}};
    j["optim"] = {{"lr", c.optim.lr},       {"beta1", c.optim.beta1}, {"beta2", c.optim.beta2},
                  {"eps", c.optim.eps},     {"batch", c.optim.batch}, {"steps", c.optim.steps}};
    j["train"] = {{"ckpt_every", c.train.ckpt_every},
                  {"log_every", c.train.log_every},
                  {"fixed_batch", c.train.fixed_batch},
                  {"augment", c.train.augment},
                  {"eval_count", c.train.eval_count}};
    j["gradcheck"] = {{"input_size", c.gradcheck.input_size},
                      {"stage_widths", c.gradcheck.stage_widths},
                      {"ea_slots", c.gradcheck.ea_slots},
                      {"heads", c.gradcheck.heads},
                      {"window", c.gradcheck.window},
                      {"num_classes", c.gradcheck.num_classes},
                      {"eps", c.gradcheck.eps},
                      {"tol", c.gradcheck.tol}};
    j["bench"] = {{"channels", c.bench.channels},
                  {"window", c.bench.window},
                  {"sizes", c.bench.sizes},
                  {"repeats", c.bench.repeats}};
    return j;
}

RunConfig run_config_from_json(const json& j) {
    check_keys(j, "", {"seed", "precision", "model", "synth", "optim", "train", "gradcheck",
                       "bench"});
    RunConfig c;
    read_field(j, "", "seed", c.seed);
    read_field(j, "", "precision", c.precision);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        check_keys(s, "synth", {"seed", "count", "size", "num_classes", "noise"});
        read_field(s, "synth", "seed", c.synth.seed);
        read_field(s, "synth", "count", c.synth.count);
        read_field(s, "synth", "size", c.synth.size);
        read_field(s, "synth", "num_classes", c.synth.num_classes);
        read_field(s, "synth", "noise", c.synth.noise);
    }
    if (j.contains("optim")) {
        const auto& s = j.at("optim");
        check_keys(s, "optim", {"lr", "beta1", "beta2", "eps", "batch", "steps"});
        read_field(s, "optim", "lr", c.optim.lr);
        read_field(s, "optim", "beta1", c.optim.beta1);
        read_field(s, "optim", "beta2", c.optim.beta2);
        read_field(s, "optim", "eps", c.optim.eps);
        read_field(s, "optim", "batch", c.optim.batch);
        read_field(s, "optim", "steps", c.optim.steps);
    }
    if (j.contains("train")) {
        const auto& s = j.at("train");
        check_keys(s, "train", {"ckpt_every", "log_every", "fixed_batch", "augment",
                                "eval_count"});
        read_field(s, "train", "ckpt_every", c.train.ckpt_every);
        read_field(s, "train", "log_every", c.train.log_every);
        read_field(s, "train", "fixed_batch", c.train.fixed_batch);
        read_field(s, "train", "augment", c.train.augment);
        read_field(s, "train", "eval_count", c.train.eval_count);
    }
    if (j.contains("gradcheck")) {
        const auto& s = j.at("gradcheck");
        check_keys(s, "gradcheck", {"input_size", "stage_widths", "ea_slots", "heads", "window",
                                    "num_classes", "eps", "tol"});
        read_field(s, "gradcheck", "input_size", c.gradcheck.input_size);
        read_field(s, "gradcheck", "stage_widths", c.gradcheck.stage_widths);
        read_field(s, "gradcheck", "ea_slots", c.gradcheck.ea_slots);
        read_field(s, "gradcheck", "heads", c.gradcheck.heads);
        read_field(s, "gradcheck", "window", c.gradcheck.window);
        read_field(s, "gradcheck", "num_classes", c.gradcheck.num_classes);
        read_field(s, "gradcheck", "eps", c.gradcheck.eps);
        read_field(s, "gradcheck", "tol", c.gradcheck.tol);
    }
    if (j.contains("bench")) {
        const auto& s = j.at("bench");
        check_keys(s, "bench", {"channels", "window", "sizes", "repeats"});
        read_field(s, "bench", "channels", c.bench.channels);
        read_field(s, "bench", "window", c.bench.window);
        read_field(s, "bench", "sizes", c.bench.sizes);
        read_field(s, "bench", "repeats", c.bench.repeats);
    }
    return c;
}

RunConfig load_run_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace mtunet
