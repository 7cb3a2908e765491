#pragma once

// Checkpoint file: a one-line JSON manifest (config echo, seed, step, and a
// name -> {shape, dtype, offsets} map) followed by the concatenated raw
// little-endian bodies of every parameter and its Adam moments.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtunet/error.hpp"
#include "mtunet/optim.hpp"
#include "mtunet/run_config.hpp"
#include "mtunet/tensor_io.hpp"

namespace mtunet::io {

template <typename S>
void save_checkpoint(const std::string& path, const ParameterStore<S>& store,
                     const ModelConfig& config, std::uint64_t seed) {
    nlohmann::json manifest;
    manifest["byte_order"] = "little";
    manifest["config"] = model_config_to_json(config);
    manifest["dtype"] = dtype_name<S>();
    manifest["seed"] = seed;
    manifest["step"] = store.step();

    nlohmann::json tensors(nlohmann::json::value_t::object);
    std::int64_t offset = 0;
    for (const auto& [name, e] : store.entries()) {
        const std::int64_t bytes = e.value->size() * static_cast<std::int64_t>(sizeof(S));
        nlohmann::json t;
        t["shape"] = e.value->shape;
        t["offset"] = offset;
        t["m_offset"] = offset + bytes;
        t["v_offset"] = offset + 2 * bytes;
        tensors[name] = t;
        offset += 3 * bytes;
    }
    manifest["tensors"] = tensors;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << manifest.dump() << "\n";
    for (const auto& [name, e] : store.entries()) {
        const auto bytes = static_cast<std::streamsize>(e.value->size() * sizeof(S));
        out.write(reinterpret_cast<const char*>(e.value->data.data()), bytes);
        out.write(reinterpret_cast<const char*>(e.m.data()), bytes);
        out.write(reinterpret_cast<const char*>(e.v.data()), bytes);
    }
    if (!out) throw DataError("write failed for " + path);
}

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::int64_t step = 0;
};

// Verifies the manifest's config echo against `expected` (first mismatched
// field wins the error message), then restores every parameter, its Adam
// moments, and the step counter into `store`.
template <typename S>
CheckpointMeta load_checkpoint(const std::string& path, ParameterStore<S>& store,
                               const ModelConfig& expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path + " for reading");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("missing checkpoint manifest in " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    if (!manifest.contains("dtype") || manifest["dtype"] != dtype_name<S>()) {
        throw ConfigError("checkpoint dtype " +
                          manifest.value("dtype", std::string("<missing>")) + " != requested " +
                          dtype_name<S>());
    }

    const auto stored = model_config_to_json(model_config_from_json(manifest.at("config")));
    const auto wanted = model_config_to_json(expected);
    for (auto it = wanted.begin(); it != wanted.end(); ++it) {
        if (stored.at(it.key()) != it.value()) {
            throw ConfigError("checkpoint config mismatch on field '" + it.key() + "': file has " +
                              stored.at(it.key()).dump() + ", expected " + it.value().dump());
        }
    }

    const auto& tensors = manifest.at("tensors");
    const std::streampos payload_start = in.tellg();
    for (auto& [name, e] : store.entries()) {
        if (!tensors.contains(name)) {
            throw CorruptionError("checkpoint manifest missing tensor '" + name + "'");
        }
        const auto& t = tensors.at(name);
        const Shape shape = t.at("shape").template get<Shape>();
        if (shape != e.value->shape) {
            throw CorruptionError("checkpoint tensor '" + name + "' shape " + shape_str(shape) +
                                  " != expected " + shape_str(e.value->shape));
        }
        const auto bytes = static_cast<std::streamsize>(e.value->size() * sizeof(S));
        auto read_at = [&](std::int64_t offset, S* dst) {
            in.seekg(payload_start + static_cast<std::streamoff>(offset));
            in.read(reinterpret_cast<char*>(dst), bytes);
            if (in.gcount() != bytes) {
                throw CorruptionError("checkpoint payload truncated reading tensor '" + name +
                                      "': expected " + std::to_string(bytes) + " bytes, got " +
                                      std::to_string(in.gcount()));
            }
        };
        read_at(t.at("offset").template get<std::int64_t>(), e.value->data.data());
        read_at(t.at("m_offset").template get<std::int64_t>(), e.m.data());
        read_at(t.at("v_offset").template get<std::int64_t>(), e.v.data());
        in.clear();
    }
    if (tensors.size() != store.entries().size()) {
        throw CorruptionError("checkpoint manifest holds " + std::to_string(tensors.size()) +
                              " tensors, store expects " +
                              std::to_string(store.entries().size()));
    }

    CheckpointMeta meta;
    meta.seed = manifest.at("seed").template get<std::uint64_t>();
    meta.step = manifest.at("step").template get<std::int64_t>();
    store.set_step(meta.step);
    return meta;
}

}  // namespace mtunet::io
