#include "mtunet/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mtunet/error.hpp"
#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "tensor file writer assumes a little-endian host");

namespace mtunet::io {

namespace {

using nlohmann::json;

template <typename S>
void save_impl(const std::string& path, const Shape& shape, const S* data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << header_line(shape, dtype_name<S>());
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(numel(shape) * sizeof(S)));
    if (!out) throw DataError("write failed for " + path);
}

template <typename S>
void read_body(std::ifstream& in, const std::string& path, std::int64_t count,
               std::vector<S>& out) {
    out.resize(static_cast<std::size_t>(count));
    const std::int64_t expected = count * static_cast<std::int64_t>(sizeof(S));
    in.read(reinterpret_cast<char*>(out.data()), expected);
    const std::int64_t got = in.gcount();
    if (got != expected) {
        throw CorruptionError("tensor body truncated in " + path + ": expected " +
                              std::to_string(expected) + " bytes, got " + std::to_string(got));
    }
    char extra;
    if (in.read(&extra, 1)) {
        throw CorruptionError("tensor body in " + path + " has trailing bytes beyond " +
                              std::to_string(expected));
    }
}

}  // namespace

std::string header_line(const Shape& shape, const std::string& dtype) {
    json j;
    j["byte_order"] = "little";
    j["dtype"] = dtype;
    j["shape"] = shape;
    return j.dump() + "\n";
}

TensorHeader parse_header_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed tensor header: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("tensor header is not an object");
    TensorHeader header;
    if (!j.contains("byte_order") || !j["byte_order"].is_string() ||
        j["byte_order"] != "little") {
        throw ParseError("tensor header field 'byte_order' must be \"little\"");
    }
    if (!j.contains("dtype") || !j["dtype"].is_string() ||
        (j["dtype"] != "f32" && j["dtype"] != "f64")) {
        throw ParseError("tensor header field 'dtype' must be \"f32\" or \"f64\"");
    }
    header.dtype = j["dtype"].get<std::string>();
    if (!j.contains("shape") || !j["shape"].is_array()) {
        throw ParseError("tensor header field 'shape' must be an array");
    }
    for (const auto& e : j["shape"]) {
        if (!e.is_number_integer() || e.get<std::int64_t>() < 1) {
            throw ParseError("tensor header field 'shape' must hold positive extents");
        }
        header.shape.push_back(e.get<std::int64_t>());
    }
    return header;
}

void save_tensor_file(const std::string& path, const Shape& shape, const float* data) {
    save_impl(path, shape, data);
}

void save_tensor_file(const std::string& path, const Shape& shape, const double* data) {
    save_impl(path, shape, data);
}

TensorHeader load_tensor_file(const std::string& path, std::vector<float>& f32,
                              std::vector<double>& f64) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path + " for reading");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("missing tensor header in " + path);
    auto header = parse_header_line(line);
    const auto count = numel(header.shape);
    if (header.dtype == "f32") {
        read_body(in, path, count, f32);
    } else {
        read_body(in, path, count, f64);
    }
    return header;
}

}  // namespace mtunet::io
