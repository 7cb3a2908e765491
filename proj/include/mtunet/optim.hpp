#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mtunet/tensor.hpp"

namespace mtunet {

// Named collection of trainable tensors plus per-parameter Adam state.
template <typename S>
class ParameterStore {
public:
    struct Entry {
        TensorPtr<S> value;
        std::vector<S> m;
        std::vector<S> v;
    };

    TensorPtr<S> add(const std::string& name, TensorPtr<S> value) {
        if (params_.count(name)) throw StateError("duplicate parameter name: " + name);
        value->requires_grad = true;
        auto& e = params_[name];
        e.value = value;
        e.m.assign(value->data.size(), S(0));
        e.v.assign(value->data.size(), S(0));
        return value;
    }

    TensorPtr<S> get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw StateError("unknown parameter: " + name);
        return it->second.value;
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    std::map<std::string, Entry>& entries() { return params_; }
    const std::map<std::string, Entry>& entries() const { return params_; }

    std::int64_t step() const { return step_; }
    void set_step(std::int64_t t) { step_ = t; }

    std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for (const auto& [name, e] : params_) n += e.value->size();
        return n;
    }

    void zero_grads() {
        for (auto& [name, e] : params_) e.value->clear_grad();
    }

private:
    std::map<std::string, Entry> params_;  // ordered => deterministic iteration
    std::int64_t step_ = 0;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam update over every parameter; zeroes grads and advances
// the step counter by exactly one.
template <typename S>
void adam_step(ParameterStore<S>& store, const AdamConfig& cfg = {}) {
    for (const auto& [name, e] : store.entries()) {
        if (!e.value->has_grad()) {
            throw StateError("adam_step: parameter '" + name + "' has no gradient");
        }
    }
    const std::int64_t t = store.step() + 1;
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    const S corr1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
    const S corr2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
    for (auto& [name, e] : store.entries()) {
        auto& p = *e.value;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const S g = p.grad[i];
            e.m[i] = b1 * e.m[i] + (S(1) - b1) * g;
            e.v[i] = b2 * e.v[i] + (S(1) - b2) * g * g;
            const S mhat = e.m[i] / corr1;
            const S vhat = e.v[i] / corr2;
            p.data[i] -= static_cast<S>(cfg.lr) * mhat / (std::sqrt(vhat) + static_cast<S>(cfg.eps));
        }
        p.clear_grad();
    }
    store.set_step(t);
}

// Deterministic parameter initialization. Draws are consumed in registration
// order, so a fixed (config, seed) pair always produces identical weights.
template <typename S>
class ParamInit {
public:
    ParamInit(ParameterStore<S>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

    // Kaiming-uniform with fan-in scaling: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    TensorPtr<S> kaiming(const std::string& name, Shape shape, std::int64_t fan_in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<S> data(static_cast<std::size_t>(numel(shape)));
        for (auto& v : data) v = static_cast<S>(dist(rng_));
        return store_.add(name, make_tensor<S>(std::move(shape), std::move(data)));
    }

    TensorPtr<S> constant(const std::string& name, Shape shape, S value) {
        std::vector<S> data(static_cast<std::size_t>(numel(shape)), value);
        return store_.add(name, make_tensor<S>(std::move(shape), std::move(data)));
    }

    TensorPtr<S> zeros_param(const std::string& name, Shape shape) {
        return constant(name, std::move(shape), S(0));
    }
    TensorPtr<S> ones_param(const std::string& name, Shape shape) {
        return constant(name, std::move(shape), S(1));
    }

    ParameterStore<S>& store() { return store_; }

private:
    ParameterStore<S>& store_;
    std::mt19937_64 rng_;
};

}  // namespace mtunet
