#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "uniap/model.hpp"
#include "uniap/optim.hpp"
#include "uniap/rng.hpp"
#include "uniap/tensor.hpp"

namespace testutil {

inline uniap::model::ModelConfig tiny_config() {
    uniap::model::ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.hierarchies = 2;
    cfg.mlp_ratio = 2;
    cfg.dec_channels = 8;
    cfg.validate();
    return cfg;
}

template <typename T>
uniap::numkit::Tensor<T> random_tensor(std::vector<int> shape,
                                       uniap::numkit::RngStream& rng,
                                       double scale = 1.0) {
    int n = uniap::numkit::shape_numel(shape);
    std::vector<T> data(n);
    for (auto& v : data) v = static_cast<T>(rng.normal() * scale);
    return uniap::numkit::Tensor<T>::from_data(std::move(shape), std::move(data));
}

// Central finite differences on every entry of every tensor in `flat`,
// compared against the autodiff gradients already stored there.
// `loss` must rebuild the graph from the current parameter values.
inline double max_rel_grad_error(uniap::numkit::ParamSet<double>& flat,
                                 const std::function<double()>& loss,
                                 double h = 1e-4, int max_entries_per_param = -1) {
    using uniap::numkit::NoGradGuard;
    double worst = 0.0;
    for (auto& p : flat.all()) {
        auto vals = p.tensor.mutable_value();
        auto grads = p.tensor.grad();
        int n = p.tensor.numel();
        int step = 1;
        if (max_entries_per_param > 0 && n > max_entries_per_param)
            step = n / max_entries_per_param;
        for (int i = 0; i < n; i += step) {
            double keep = vals[i];
            NoGradGuard ng;
            vals[i] = keep + h;
            double lp = loss();
            vals[i] = keep - h;
            double lm = loss();
            vals[i] = keep;
            double fd = (lp - lm) / (2 * h);
            double ad = grads[i];
            double denom = std::max({std::abs(fd), std::abs(ad), 1e-3});
            worst = std::max(worst, std::abs(fd - ad) / denom);
        }
    }
    return worst;
}

}  // namespace testutil
