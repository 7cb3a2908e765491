#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mtunet/error.hpp"

namespace mtunet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Cumulative multiply-accumulate counter. One instance per thread; matmul and
// the convolutions report their MAC cost here.
class FlopCounter {
public:
    static FlopCounter& instance() {
        thread_local FlopCounter counter;
        return counter;
    }

    void add(std::uint64_t macs) {
        if (enabled_) macs_ += macs;
    }
    void reset() { macs_ = 0; }
    void set_enabled(bool on) { enabled_ = on; }
    bool enabled() const { return enabled_; }
    std::uint64_t macs() const { return macs_; }

private:
    std::uint64_t macs_ = 0;
    bool enabled_ = true;
};

// Dense row-major tensor. Doubles as an autodiff node: ops allocate fresh
// tensors and, when a tape is active, record closures that fill `grad`.
template <typename S>
struct Tensor {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until a backward pass touches it
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, std::vector<S> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), S(0));
    }
    void clear_grad() { grad.clear(); }
    bool has_grad() const { return !grad.empty(); }
};

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

template <typename S>
TensorPtr<S> make_tensor(Shape shape, std::vector<S> data, bool requires_grad = false) {
    return std::make_shared<Tensor<S>>(std::move(shape), std::move(data), requires_grad);
}

template <typename S>
TensorPtr<S> zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return make_tensor<S>(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), S(0)),
                          requires_grad);
}

template <typename S>
TensorPtr<S> full(Shape shape, S value, bool requires_grad = false) {
    auto n = numel(shape);
    return make_tensor<S>(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), value),
                          requires_grad);
}

template <typename S>
void check_finite(const char* op, const Tensor<S>& t) {
    for (S v : t.data) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

// Reverse-mode tape. Ops append their backward rules in execution order,
// which is already topological for a define-by-run graph; backward() replays
// them in reverse. One tape per logical thread of execution.
template <typename S>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }
    std::size_t size() const { return rules_.size(); }

    // Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
    void backward(const TensorPtr<S>& loss) {
        if (!loss || loss->size() != 1) {
            throw DimensionError("backward expects a scalar loss tensor");
        }
        if (!loss->requires_grad) {
            throw StateError("loss does not depend on any tracked tensor");
        }
        loss->ensure_grad();
        loss->grad[0] += S(1);
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
        rules_.clear();
    }

    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

private:
    std::vector<std::function<void()>> rules_;
};

// RAII activation of a tape for the current thread.
template <typename S>
class TapeScope {
public:
    TapeScope() : prev_(Tape<S>::active()) { Tape<S>::active() = &tape_; }
    ~TapeScope() { Tape<S>::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    Tape<S>& tape() { return tape_; }
    void backward(const TensorPtr<S>& loss) { tape_.backward(loss); }

private:
    Tape<S> tape_;
    Tape<S>* prev_;
};

}  // namespace mtunet
