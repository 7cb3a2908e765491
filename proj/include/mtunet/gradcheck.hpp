#pragma once

// Central-difference verification of the tape gradients. Double precision
// only: float lacks the headroom for meaningful finite differences.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "mtunet/optim.hpp"
#include "mtunet/tensor.hpp"

namespace mtunet {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t count = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double max_rel_err = 0.0;

    bool passes(double tol) const { return max_rel_err < tol; }
};

// f must rebuild its graph from the store's current values on every call and
// return a scalar loss. The analytic pass runs once on a tape; the numeric
// probes run untaped.
inline GradCheckReport grad_check(
    const std::function<TensorPtr<double>(ParameterStore<double>&)>& f,
    ParameterStore<double>& store, double eps = 1e-5) {
    auto eval = [&]() -> double {
        auto loss = f(store);
        if (!loss || loss->size() != 1) throw DimensionError("grad_check: loss must be scalar");
        const double v = loss->data[0];
        if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
        return v;
    };

    // Analytic gradients.
    store.zero_grads();
    std::map<std::string, std::vector<double>> analytic;
    {
        TapeScope<double> scope;
        auto loss = f(store);
        if (!loss || loss->size() != 1) throw DimensionError("grad_check: loss must be scalar");
        if (!std::isfinite(loss->data[0])) throw NumericError("grad_check: loss is not finite");
        scope.backward(loss);
    }
    for (auto& [name, e] : store.entries()) {
        e.value->ensure_grad();  // parameters untouched by the loss check as all-zero
        analytic[name] = e.value->grad;
    }
    store.zero_grads();

    GradCheckReport report;
    for (auto& [name, e] : store.entries()) {
        GradCheckEntry entry;
        entry.name = name;
        entry.count = e.value->size();
        auto& data = e.value->data;
        const auto& a = analytic[name];
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double fp = eval();
            data[i] = saved - eps;
            const double fm = eval();
            data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-8});
            const double rel = std::abs(a[i] - numeric) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace mtunet
