// Python bindings for the core operations: tensor ops, window utilities,
// attention building blocks, segmentation metrics, synthetic data, and the
// full model forward pass.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <memory>

#include "mtunet/attention.hpp"
#include "mtunet/conv.hpp"
#include "mtunet/metrics.hpp"
#include "mtunet/model.hpp"
#include "mtunet/ops.hpp"
#include "mtunet/run_config.hpp"
#include "mtunet/synth.hpp"

namespace py = pybind11;
using mtunet::Shape;
using mtunet::TensorPtr;

namespace {

TensorPtr<double> from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = a.shape(i);
    std::vector<double> data(static_cast<std::size_t>(a.size()));
    std::memcpy(data.data(), a.data(), sizeof(double) * data.size());
    return mtunet::make_tensor<double>(std::move(shape), std::move(data));
}

py::array_t<double> to_numpy(const TensorPtr<double>& t) {
    std::vector<py::ssize_t> shape(t->shape.begin(), t->shape.end());
    py::array_t<double> out(shape);
    std::memcpy(out.mutable_data(), t->data.data(), sizeof(double) * t->data.size());
    return out;
}

mtunet::metrics::Mask mask_from_numpy(
    const py::array_t<bool, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw mtunet::DimensionError("mask must be 2-D");
    mtunet::metrics::Mask m;
    m.h = a.shape(0);
    m.w = a.shape(1);
    m.data.resize(static_cast<std::size_t>(m.h * m.w));
    for (py::ssize_t i = 0; i < a.size(); ++i) m.data[static_cast<std::size_t>(i)] = a.data()[i];
    return m;
}

class PyModel {
public:
    PyModel(const std::string& config_json, std::uint64_t seed) {
        auto config = mtunet::model_config_from_json(nlohmann::json::parse(config_json));
        model_ = mtunet::MtUnet<double>::build(config, seed);
    }

    py::array_t<double> forward(
        const py::array_t<double, py::array::c_style | py::array::forcecast>& image) {
        return to_numpy(model_->forward_sample(from_numpy(image)));
    }

    std::int64_t parameter_count() const { return model_->parameter_count(); }

    std::string config_json() const {
        return mtunet::model_config_to_json(model_->config()).dump();
    }

private:
    std::unique_ptr<mtunet::MtUnet<double>> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Mixed-Transformer U-Net core operations";

    py::register_exception<mtunet::DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<mtunet::ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def("matmul", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
                       const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
        return to_numpy(mtunet::ops::matmul(from_numpy(a), from_numpy(b)));
    });
    m.def("softmax", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return to_numpy(mtunet::ops::softmax_lastdim(from_numpy(x)));
    });
    m.def("layer_norm",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& gamma,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& beta) {
              return to_numpy(mtunet::ops::layer_norm_lastdim(from_numpy(x), from_numpy(gamma),
                                                              from_numpy(beta)));
          });
    m.def("gelu", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
        return to_numpy(mtunet::ops::gelu(from_numpy(x)));
    });
    m.def("conv2d",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& kernel,
             std::int64_t stride, std::int64_t pad) {
              return to_numpy(mtunet::ops::conv2d(from_numpy(x), from_numpy(kernel), stride, pad));
          },
          py::arg("x"), py::arg("kernel"), py::arg("stride") = 1, py::arg("pad") = 0);
    m.def("conv_transpose2d",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& kernel,
             std::int64_t stride, std::int64_t pad) {
              return to_numpy(
                  mtunet::ops::conv_transpose2d(from_numpy(x), from_numpy(kernel), stride, pad));
          },
          py::arg("x"), py::arg("kernel"), py::arg("stride") = 1, py::arg("pad") = 0);
    m.def("window_partition",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
             std::int64_t p) { return to_numpy(mtunet::ops::window_partition(from_numpy(x), p)); });
    m.def("window_reverse",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& windows,
             std::int64_t h, std::int64_t w, std::int64_t p) {
              return to_numpy(mtunet::ops::window_reverse(from_numpy(windows), h, w, p));
          });
    m.def("axial_neighborhood",
          [](std::int64_t i, std::int64_t j, std::int64_t hg, std::int64_t wg) {
              auto nb = mtunet::axial_neighborhood(i, j, hg, wg);
              return py::make_tuple(nb.indices, nb.distances);
          });

    m.def("dice_score",
          [](const py::array_t<bool, py::array::c_style | py::array::forcecast>& a,
             const py::array_t<bool, py::array::c_style | py::array::forcecast>& b) {
              return mtunet::metrics::dice_score(mask_from_numpy(a), mask_from_numpy(b));
          });
    m.def("hd95", [](const py::array_t<bool, py::array::c_style | py::array::forcecast>& a,
                     const py::array_t<bool, py::array::c_style | py::array::forcecast>& b)
              -> py::object {
        auto d = mtunet::metrics::hd95(mask_from_numpy(a), mask_from_numpy(b));
        if (!d) return py::none();
        return py::float_(*d);
    });

    m.def("synth_generate",
          [](std::uint64_t seed, std::int64_t count, std::int64_t size, std::int64_t num_classes,
             double noise) {
              mtunet::synth::SynthSpec spec{seed, count, size, num_classes, noise};
              py::list out;
              for (const auto& s : mtunet::synth::generate(spec)) {
                  py::array_t<float> image({std::int64_t(1), s.size, s.size});
                  std::memcpy(image.mutable_data(), s.image.data(),
                              sizeof(float) * s.image.size());
                  py::array_t<std::int64_t> label({s.size, s.size});
                  std::memcpy(label.mutable_data(), s.label.data(),
                              sizeof(std::int64_t) * s.label.size());
                  out.append(py::make_tuple(image, label));
              }
              return out;
          },
          py::arg("seed") = 1234, py::arg("count") = 4, py::arg("size") = 64,
          py::arg("num_classes") = 3, py::arg("noise") = 0.05);

    py::class_<PyModel>(m, "Model")
        .def(py::init<const std::string&, std::uint64_t>(), py::arg("config_json") = "{}",
             py::arg("seed") = 1)
        .def("forward", &PyModel::forward)
        .def("parameter_count", &PyModel::parameter_count)
        .def("config_json", &PyModel::config_json);
}
