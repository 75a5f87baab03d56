// pyuniap: python bindings for the core operations — tensor math, the
// prompt-conditioned model, dataset generation, and metrics.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "uniap/checkpoint.hpp"
#include "uniap/episodic.hpp"
#include "uniap/metrics.hpp"
#include "uniap/model.hpp"
#include "uniap/optim.hpp"
#include "uniap/synthdata.hpp"
#include "uniap/tensor.hpp"

namespace py = pybind11;
using namespace uniap;
using numkit::Tensor;

namespace {

Tensor<float> to_tensor(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<int>(a.shape(i));
    std::vector<float> data(a.data(), a.data() + a.size());
    return Tensor<float>::from_data(std::move(shape), std::move(data));
}

py::array_t<float> to_array(const Tensor<float>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> out(shape);
    std::copy(t.value().begin(), t.value().end(), out.mutable_data());
    return out;
}

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using PromptPair = std::pair<FloatArray, FloatArray>;

std::vector<std::pair<Tensor<float>, Tensor<float>>> to_prompts(
    const std::vector<PromptPair>& prompts) {
    std::vector<std::pair<Tensor<float>, Tensor<float>>> out;
    out.reserve(prompts.size());
    for (const auto& [img, lab] : prompts)
        out.emplace_back(to_tensor(img), to_tensor(lab));
    return out;
}

// Owning wrapper so python holds the parameters and config together.
struct PyModel {
    model::ModelParams<float> params;

    py::dict predict(const FloatArray& query, const std::vector<PromptPair>& prompts,
                     const std::string& task) {
        auto pred = episodic::predict(params, to_tensor(query), to_prompts(prompts),
                                      model::task_from_name(task));
        py::dict out;
        out["task"] = task;
        if (pred.dense.defined()) out["dense"] = to_array(pred.dense);
        if (pred.score.defined()) out["score"] = pred.score.item();
        return out;
    }

    void adapt(const std::vector<PromptPair>& prompts, const std::string& task,
               int steps, double lr, std::uint64_t seed) {
        episodic::AdaptConfig cfg;
        cfg.steps = steps;
        cfg.lr = lr;
        cfg.seed = seed;
        episodic::adapt(params, to_prompts(prompts), model::task_from_name(task), cfg);
    }

    void save(const std::string& path, std::uint64_t config_hash) {
        io::CheckpointMeta meta;
        meta.config_hash = config_hash;
        io::save_checkpoint(path, params, meta);
    }

    py::dict counts() const {
        py::dict d;
        d["shared"] = params.shared_numel();
        d["task_specific"] = params.task_specific_numel();
        d["banks"] = params.banks.size();
        return d;
    }
};

}  // namespace

PYBIND11_MODULE(pyuniap, m) {
    m.doc() = "few-shot multi-task perception core";
    m.attr("__version__") = io::kVersionString;

    // ---- numkit ------------------------------------------------------------
    m.def("softmax", [](const FloatArray& x, int axis) {
        return to_array(numkit::softmax(to_tensor(x), axis));
    }, py::arg("x"), py::arg("axis") = -1);
    m.def("matmul", [](const FloatArray& a, const FloatArray& b) {
        return to_array(numkit::matmul(to_tensor(a), to_tensor(b)));
    });
    m.def("gelu", [](const FloatArray& x) { return to_array(numkit::gelu(to_tensor(x))); });
    m.def("conv2d", [](const FloatArray& x, const FloatArray& w, const FloatArray& b,
                       int stride, int pad) {
        return to_array(numkit::conv2d(to_tensor(x), to_tensor(w), to_tensor(b), stride, pad));
    }, py::arg("x"), py::arg("w"), py::arg("b"), py::arg("stride") = 1, py::arg("pad") = 0);
    m.def("bce_with_logits", [](const FloatArray& z, const FloatArray& y) {
        return to_array(numkit::bce_with_logits(to_tensor(z), to_tensor(y)));
    });
    m.def("poly_lr", &numkit::poly_lr, py::arg("iter"), py::arg("warmup_iters"),
          py::arg("total_iters"), py::arg("base_lr"), py::arg("power") = 0.9);

    // gradient of sum(ops(x)) w.r.t. x, exercising the reverse-mode tape
    m.def("grad_sum_gelu", [](const FloatArray& x) {
        auto t = to_tensor(x);
        t.set_requires_grad(true);
        numkit::backward(numkit::sum(numkit::gelu(t)));
        std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
        py::array_t<float> out(shape);
        std::copy(t.grad().begin(), t.grad().end(), out.mutable_data());
        return out;
    });

    // ---- model ---------------------------------------------------------
    py::class_<model::ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("image_size", &model::ModelConfig::image_size)
        .def_readwrite("patch_size", &model::ModelConfig::patch_size)
        .def_readwrite("d", &model::ModelConfig::d)
        .def_readwrite("heads", &model::ModelConfig::heads)
        .def_readwrite("blocks", &model::ModelConfig::blocks)
        .def_readwrite("hierarchies", &model::ModelConfig::hierarchies)
        .def_readwrite("mlp_ratio", &model::ModelConfig::mlp_ratio)
        .def_readwrite("dec_channels", &model::ModelConfig::dec_channels)
        .def_readwrite("task_biases", &model::ModelConfig::task_biases)
        .def("validate", &model::ModelConfig::validate)
        .def("grid", &model::ModelConfig::grid)
        .def("tokens", &model::ModelConfig::tokens);

    py::class_<PyModel>(m, "Model")
        .def(py::init([](const model::ModelConfig& cfg, std::uint64_t seed) {
            return PyModel{model::init_params<float>(cfg, seed)};
        }), py::arg("config"), py::arg("seed") = 0)
        .def_static("load", [](const std::string& path, const model::ModelConfig& cfg) {
            return PyModel{io::load_checkpoint(path, cfg, 0, nullptr, /*force=*/true)};
        }, py::arg("path"), py::arg("config"))
        .def("predict", &PyModel::predict, py::arg("query"), py::arg("prompts"),
             py::arg("task"))
        .def("adapt", &PyModel::adapt, py::arg("prompts"), py::arg("task"),
             py::arg("steps") = 20, py::arg("lr") = 1e-3, py::arg("seed") = 0)
        .def("save", &PyModel::save, py::arg("path"), py::arg("config_hash") = 0)
        .def("counts", &PyModel::counts);

    // ---- synthdata -----------------------------------------------------
    m.def("generate_dataset", [](const std::string& dir, std::uint64_t seed, int canvas,
                                 int samples_per_class) {
        synthdata::DatasetSpec spec;
        spec.canvas = canvas;
        spec.samples_per_class = samples_per_class;
        auto man = synthdata::generate_dataset(spec, seed);
        synthdata::save_manifest(man, dir);
        py::dict d;
        d["classes"] = man.classes.size();
        d["samples"] = man.samples.size();
        d["hash"] = synthdata::manifest_hash(man);
        return d;
    }, py::arg("dir"), py::arg("seed") = 0, py::arg("canvas") = 48,
       py::arg("samples_per_class") = 12);
    m.def("rasterize_keypoint_heatmap", [](double kx, double ky, double sigma, int size) {
        auto v = synthdata::rasterize_keypoint_heatmap(kx, ky, sigma, size);
        py::array_t<float> out({size, size});
        std::copy(v.begin(), v.end(), out.mutable_data());
        return out;
    }, py::arg("kx"), py::arg("ky"), py::arg("sigma"), py::arg("size"));

    // ---- metrics ---------------------------------------------------------
    m.def("miou", [](const FloatArray& pred, const FloatArray& gt, float thr) {
        std::vector<float> p(pred.data(), pred.data() + pred.size());
        std::vector<float> g(gt.data(), gt.data() + gt.size());
        return metrics::miou(p, g, thr);
    }, py::arg("pred"), py::arg("gt"), py::arg("threshold") = 0.5f);
    m.def("pixel_accuracy", [](const FloatArray& pred, const FloatArray& gt, float thr) {
        std::vector<float> p(pred.data(), pred.data() + pred.size());
        std::vector<float> g(gt.data(), gt.data() + gt.size());
        return metrics::pixel_accuracy(p, g, thr);
    }, py::arg("pred"), py::arg("gt"), py::arg("threshold") = 0.5f);
    m.def("classification_accuracy", &metrics::classification_accuracy,
          py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5);
    m.def("extract_keypoint", [](const FloatArray& heatmap) {
        if (heatmap.ndim() != 2) throw std::invalid_argument("expected a 2-D heatmap");
        std::vector<float> h(heatmap.data(), heatmap.data() + heatmap.size());
        auto kp = metrics::extract_keypoint(h, static_cast<int>(heatmap.shape(0)),
                                            static_cast<int>(heatmap.shape(1)));
        return py::make_tuple(kp.x, kp.y, kp.confidence, kp.flat);
    });
}
