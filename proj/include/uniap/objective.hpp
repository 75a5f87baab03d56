#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "uniap/model.hpp"
#include "uniap/tensor.hpp"

namespace uniap::objective {

using model::ModelParams;
using model::Prediction;
using model::TaskId;
using numkit::Tensor;

template <typename T>
struct TaskLoss {
    TaskId task;
    Tensor<T> value;  // scalar, graph-connected
    int count = 0;    // query items averaged
};

// Mean binary cross-entropy of the prediction's logits against a target in
// [0,1]: per-pixel for dense tasks, a single term for classification.
template <typename T>
TaskLoss<T> task_loss(const Prediction<T>& pred, const Tensor<T>& target, TaskId task) {
    using namespace numkit;
    if (pred.task != task) throw std::invalid_argument("task_loss: modality mismatch");
    TaskLoss<T> out;
    out.task = task;
    out.count = 1;
    if (task == TaskId::CLS) {
        if (target.numel() != 1)
            throw ShapeError("task_loss: CLS target must be scalar");
        out.value = mean(bce_with_logits(pred.score, reshape(target, {1})));
    } else {
        if (!pred.dense.defined() || pred.dense.shape() != target.shape())
            throw ShapeError("task_loss: dense prediction/target shape mismatch");
        out.value = mean(bce_with_logits(pred.dense, target));
    }
    return out;
}

// Sum_t exp(-s_t) * L_t + s_t. The log-variance parameters s_t realize the
// uncertainty weights w_t = exp(-s_t) with their log regularizer.
template <typename T>
Tensor<T> combined_loss(const std::vector<TaskLoss<T>>& losses, ModelParams<T>& params) {
    using namespace numkit;
    if (losses.empty()) throw std::invalid_argument("combined_loss: no losses");
    Tensor<T> total;
    for (const auto& l : losses) {
        std::string key = std::string("uncertainty.") + model::task_name(l.task);
        if (!params.uncertainty.contains(key))
            throw std::invalid_argument("combined_loss: missing s entry for task " +
                                        std::string(model::task_name(l.task)));
        auto& s = params.uncertainty.at(key).tensor;
        auto term = add(mul(exp(neg(s)), l.value), s);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

template <typename T>
struct EpisodeBatch {
    TaskId task;
    std::vector<Tensor<T>> query_images;
    std::vector<Tensor<T>> query_targets;  // dense maps or CLS scalars
    std::vector<std::pair<Tensor<T>, Tensor<T>>> prompts;
};

// Mean task loss over the episode's query set.
template <typename T>
TaskLoss<T> episode_task_loss(ModelParams<T>& params, const EpisodeBatch<T>& ep) {
    using namespace numkit;
    if (ep.query_images.empty())
        throw std::invalid_argument("episode objective: empty query set");
    Tensor<T> acc;
    for (size_t i = 0; i < ep.query_images.size(); ++i) {
        auto pred = model::forward(ep.query_images[i], ep.prompts, ep.task, params);
        auto l = task_loss(pred, ep.query_targets[i], ep.task);
        acc = acc.defined() ? add(acc, l.value) : l.value;
    }
    TaskLoss<T> out;
    out.task = ep.task;
    out.count = static_cast<int>(ep.query_images.size());
    out.value = scale(acc, T(1) / static_cast<T>(ep.query_images.size()));
    return out;
}

// Uncertainty-weighted objective over one episode; `weighted` selects the
// homoscedastic combination versus a plain sum.
template <typename T>
Tensor<T> episode_objective(ModelParams<T>& params, const EpisodeBatch<T>& ep,
                            bool weighted = true) {
    auto l = episode_task_loss(params, ep);
    if (!weighted) return l.value;
    return combined_loss<T>({l}, params);
}

}  // namespace uniap::objective
