#pragma once

// Bit-exact tensor file format: a one-line JSON header
// {"byte_order":"little","dtype":"f32","shape":[...]} followed by the raw
// row-major little-endian body.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtunet/tensor.hpp"

namespace mtunet::io {

struct TensorHeader {
    Shape shape;
    std::string dtype;  // "f32" | "f64"
};

template <typename S>
constexpr const char* dtype_name() {
    if constexpr (sizeof(S) == 4) return "f32";
    else return "f64";
}

std::string header_line(const Shape& shape, const std::string& dtype);
TensorHeader parse_header_line(const std::string& line);

void save_tensor_file(const std::string& path, const Shape& shape, const float* data);
void save_tensor_file(const std::string& path, const Shape& shape, const double* data);

// Reads header + body; throws ParseError for malformed headers and
// CorruptionError when the body length disagrees with the header.
TensorHeader load_tensor_file(const std::string& path, std::vector<float>& f32,
                              std::vector<double>& f64);

template <typename S>
std::pair<Shape, std::vector<S>> load_tensor_file_as(const std::string& path) {
    std::vector<float> f32;
    std::vector<double> f64;
    auto header = load_tensor_file(path, f32, f64);
    if (header.dtype != dtype_name<S>()) {
        throw ParseError("tensor file " + path + " has dtype " + header.dtype + ", expected " +
                         dtype_name<S>());
    }
    if constexpr (sizeof(S) == 4) {
        return {header.shape, std::move(f32)};
    } else {
        return {header.shape, std::move(f64)};
    }
}

template <typename S>
void save_tensor(const std::string& path, const Tensor<S>& t) {
    save_tensor_file(path, t.shape, t.data.data());
}

template <typename S>
TensorPtr<S> load_tensor(const std::string& path) {
    auto [shape, data] = load_tensor_file_as<S>(path);
    return make_tensor<S>(std::move(shape), std::move(data));
}

}  // namespace mtunet::io
