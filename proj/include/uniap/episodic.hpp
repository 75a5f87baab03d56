#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "uniap/metrics.hpp"
#include "uniap/model.hpp"
#include "uniap/objective.hpp"
#include "uniap/synthdata.hpp"

namespace uniap::episodic {

using model::ModelParams;
using model::TaskId;
using numkit::RngStream;
using numkit::Tensor;

enum class AblationMode { baseline, awl, bt, awl_bt, awl_ft };

const char* ablation_name(AblationMode m);
AblationMode ablation_from_name(const std::string& s);
bool mode_uses_awl(AblationMode m);
bool mode_uses_task_biases(AblationMode m);

struct Episode {
    TaskId task;
    int class_id = 0;
    std::vector<std::pair<Tensor<float>, Tensor<float>>> prompts;  // (image, label)
    std::vector<Tensor<float>> query_images;
    std::vector<Tensor<float>> query_targets;  // [1,1,S,S] dense or scalar CLS
    std::vector<int> query_class_ids;
    std::vector<int> query_sample_ids;
    std::vector<int> prompt_sample_ids;
    int keypoint_index = -1;  // PE only
};

struct TrainConfig {
    long long total_iters = 500;
    long long warmup_iters = 50;
    double base_lr = 1e-3;             // parameters trained from scratch
    double base_lr_pretrained = 1e-4;  // unused at desk scale; kept in the config surface
    int batch_episodes = 1;
    int n_prompts = 2;  // N
    int n_queries = 2;  // Q
    std::uint64_t seed = 0;
    AblationMode mode = AblationMode::awl_bt;
    double heatmap_sigma = 1.5;
    std::string split = "train";

    void validate() const;
};

struct AdaptConfig {
    int steps = 100;
    double lr = 1e-3;
    double sub_split_ratio = 0.5;  // |P~| / |prompt set|
    bool full_scope = false;       // awl_ft widens the scope to all parameters
    std::uint64_t seed = 0;
};

struct LogRow {
    long long iter;
    TaskId task;
    double loss;
    double s_task;
    double lr;
};

// One parameter set aliasing every trainable tensor: shared weights, the bias
// banks (prefixed bank.<task>.), and the uncertainty parameters.
numkit::ParamSet<float> flatten_params(ModelParams<float>& params);

Episode sample_episode(const synthdata::DatasetManifest& ds,
                       const model::ModelConfig& cfg, TaskId task, int n_prompts,
                       int n_queries, RngStream& rng, const std::string& split,
                       double heatmap_sigma);

std::vector<LogRow> train(
    ModelParams<float>& params, const synthdata::DatasetManifest& ds,
    const TrainConfig& cfg,
    const std::function<void(long long, ModelParams<float>&)>& on_checkpoint = {});

// Bias-only (or full-scope) test-time adaptation on a prompt set, Eq.-(8)
// style: each step re-splits the prompts into a sub-prompt and sub-query set.
void adapt(ModelParams<float>& params,
           const std::vector<std::pair<Tensor<float>, Tensor<float>>>& prompt_set,
           TaskId task, const AdaptConfig& cfg);

model::Prediction<float> predict(
    ModelParams<float>& params, const Tensor<float>& query_image,
    const std::vector<std::pair<Tensor<float>, Tensor<float>>>& prompt_set,
    TaskId task);

struct EvalConfig {
    TaskId task = TaskId::PE;
    int shots = 10;
    int queries_per_class = 4;
    std::string mode = "OOD";  // ID / OOD / CE
    std::string split = "test";
    std::uint64_t seed = 0;
    double heatmap_sigma = 1.5;
    double pck_sigma = 0.2;
    bool adapted = false;
    AdaptConfig adapt_cfg;
};

// Few-shot evaluation over every class of the chosen split. PE reports
// PCK@pck_sigma, SS reports mIoU, CLS reports accuracy.
metrics::MetricReport evaluate(const ModelParams<float>& params,
                               const synthdata::DatasetManifest& ds,
                               const EvalConfig& cfg);

// Also reports pixel accuracy for SS runs.
metrics::MetricReport evaluate_pixel_accuracy(const ModelParams<float>& params,
                                              const synthdata::DatasetManifest& ds,
                                              const EvalConfig& cfg);

int worker_thread_cap();  // honors UNIAP_NUM_THREADS

}  // namespace uniap::episodic
