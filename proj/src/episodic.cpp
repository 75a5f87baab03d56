#include "uniap/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

namespace uniap::episodic {

using model::ModelConfig;
using numkit::Adam;
using numkit::ParamSet;
using objective::EpisodeBatch;

const char* ablation_name(AblationMode m) {
    switch (m) {
        case AblationMode::baseline: return "baseline";
        case AblationMode::awl: return "awl";
        case AblationMode::bt: return "bt";
        case AblationMode::awl_bt: return "awl_bt";
        case AblationMode::awl_ft: return "awl_ft";
    }
    throw std::invalid_argument("unknown ablation mode");
}

AblationMode ablation_from_name(const std::string& s) {
    for (auto m : {AblationMode::baseline, AblationMode::awl, AblationMode::bt,
                   AblationMode::awl_bt, AblationMode::awl_ft})
        if (s == ablation_name(m)) return m;
    throw std::invalid_argument("unknown ablation mode: " + s);
}

bool mode_uses_awl(AblationMode m) {
    return m == AblationMode::awl || m == AblationMode::awl_bt ||
           m == AblationMode::awl_ft;
}

bool mode_uses_task_biases(AblationMode m) {
    return m == AblationMode::bt || m == AblationMode::awl_bt ||
           m == AblationMode::awl_ft;
}

void TrainConfig::validate() const {
    if (warmup_iters >= total_iters)
        throw std::invalid_argument("train config: warmup must be below total iters");
    if (n_prompts < 1 || n_queries < 1)
        throw std::invalid_argument("train config: N and Q must be >= 1");
    if (batch_episodes < 1)
        throw std::invalid_argument("train config: batch_episodes must be >= 1");
}

ParamSet<float> flatten_params(ModelParams<float>& params) {
    ParamSet<float> flat;
    for (auto& p : params.shared.all()) flat.add(p.name, p.kind, p.tensor);
    for (size_t bi = 0; bi < params.banks.size(); ++bi) {
        std::string label = "all";
        if (params.cfg.task_biases) {
            for (const auto& [task, idx] : params.bank_index)
                if (idx == static_cast<int>(bi)) label = model::task_name(task);
        }
        for (auto& p : params.banks[bi].all())
            flat.add("bank." + label + "." + p.name, p.kind, p.tensor);
    }
    for (auto& p : params.uncertainty.all()) flat.add(p.name, p.kind, p.tensor);
    return flat;
}

namespace {

Tensor<float> image_tensor(const synthdata::CroppedSample& c) {
    return Tensor<float>::from_data({3, c.size, c.size}, c.image);
}

Tensor<float> mask_label(const synthdata::CroppedSample& c) {
    return Tensor<float>::from_data({1, c.size, c.size}, c.mask);
}

Tensor<float> heatmap_label(const synthdata::CroppedSample& c, int kp_index,
                            double sigma) {
    const auto& kp = c.keypoints.at(kp_index);
    double x = std::clamp(kp.x, 0.0, static_cast<double>(c.size - 1));
    double y = std::clamp(kp.y, 0.0, static_cast<double>(c.size - 1));
    auto hm = synthdata::rasterize_keypoint_heatmap(x, y, sigma, c.size);
    return Tensor<float>::from_data({1, c.size, c.size}, hm);
}

Tensor<float> as_dense_target(const Tensor<float>& label) {
    int s = label.shape()[1];
    std::vector<float> data(label.value().begin(), label.value().end());
    return Tensor<float>::from_data({1, 1, s, s}, std::move(data));
}

std::vector<int> samples_of_class(const synthdata::DatasetManifest& ds, int class_id,
                                  const std::string& split) {
    std::vector<int> out;
    for (size_t i = 0; i < ds.samples.size(); ++i)
        if (ds.samples[i].class_id == class_id && ds.samples[i].split == split)
            out.push_back(static_cast<int>(i));
    return out;
}

void shuffle_indices(std::vector<int>& idx, RngStream& rng) {
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
        std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
}

EpisodeBatch<float> to_batch(const Episode& ep) {
    EpisodeBatch<float> b;
    b.task = ep.task;
    b.prompts = ep.prompts;
    b.query_images = ep.query_images;
    b.query_targets = ep.query_targets;
    return b;
}

// Parameter-mask predicates over flattened names.
std::vector<bool> train_mask(const ParamSet<float>& flat, AblationMode mode,
                             TaskId task, bool task_biases) {
    std::vector<bool> mask(flat.size(), false);
    std::string bank_prefix =
        task_biases ? std::string("bank.") + model::task_name(task) + "."
                    : std::string("bank.all.");
    for (size_t i = 0; i < flat.size(); ++i) {
        const auto& name = flat.all()[i].name;
        if (name.rfind("bank.", 0) == 0)
            mask[i] = name.rfind(bank_prefix, 0) == 0;
        else if (name.rfind("uncertainty.", 0) == 0)
            mask[i] = mode_uses_awl(mode);
        else
            mask[i] = true;
    }
    return mask;
}

bool in_adapt_scope(const std::string& name, const std::string& bank_prefix) {
    if (name.rfind(bank_prefix, 0) == 0) return true;
    if (name.rfind("label_encoder.proj.", 0) == 0) return true;
    if (name.rfind("decoder.head.out.", 0) == 0) return true;
    return false;
}

}  // namespace

Episode sample_episode(const synthdata::DatasetManifest& ds, const ModelConfig& cfg,
                       TaskId task, int n_prompts, int n_queries, RngStream& rng,
                       const std::string& split, double heatmap_sigma) {
    int need = n_prompts + (task == TaskId::CLS ? (n_queries + 1) / 2 : n_queries);
    std::vector<int> eligible;
    for (const auto& [cid, cls] : ds.classes) {
        if (cls.split != split) continue;
        if (static_cast<int>(samples_of_class(ds, cid, split).size()) >= need)
            eligible.push_back(cid);
    }
    if (eligible.empty())
        throw std::invalid_argument("sample_episode: no class has enough samples");
    int class_id = eligible[rng.uniform_int(static_cast<int>(eligible.size()))];

    auto members = samples_of_class(ds, class_id, split);
    shuffle_indices(members, rng);

    Episode ep;
    ep.task = task;
    ep.class_id = class_id;
    if (task == TaskId::PE) {
        int family = ds.classes.at(class_id).family;
        ep.keypoint_index = rng.uniform_int(synthdata::family_keypoint_count(family));
    }

    auto crop = [&](int si) {
        return synthdata::crop_and_resize(ds.samples[si], cfg.image_size);
    };

    for (int i = 0; i < n_prompts; ++i) {
        int si = members[i];
        auto c = crop(si);
        Tensor<float> label;
        if (task == TaskId::PE)
            label = heatmap_label(c, ep.keypoint_index, heatmap_sigma);
        else if (task == TaskId::SS)
            label = mask_label(c);
        else
            label = Tensor<float>::zeros({1, cfg.image_size, cfg.image_size});
        ep.prompts.emplace_back(image_tensor(c), label);
        ep.prompt_sample_ids.push_back(ds.samples[si].id);
    }

    if (task == TaskId::CLS) {
        // positives from the episode class, negatives from the other classes
        int n_pos = (n_queries + 1) / 2;
        for (int i = 0; i < n_pos; ++i) {
            int si = members[n_prompts + i];
            auto c = crop(si);
            ep.query_images.push_back(image_tensor(c));
            ep.query_targets.push_back(Tensor<float>::scalar(1.0f));
            ep.query_class_ids.push_back(class_id);
            ep.query_sample_ids.push_back(ds.samples[si].id);
        }
        std::vector<int> others;
        for (size_t i = 0; i < ds.samples.size(); ++i)
            if (ds.samples[i].split == split && ds.samples[i].class_id != class_id)
                others.push_back(static_cast<int>(i));
        if (others.empty())
            throw std::runtime_error("sample_episode: CLS needs a second class");
        for (int i = n_pos; i < n_queries; ++i) {
            int si = others[rng.uniform_int(static_cast<int>(others.size()))];
            auto c = crop(si);
            ep.query_images.push_back(image_tensor(c));
            ep.query_targets.push_back(Tensor<float>::scalar(0.0f));
            ep.query_class_ids.push_back(ds.samples[si].class_id);
            ep.query_sample_ids.push_back(ds.samples[si].id);
        }
    } else {
        for (int i = 0; i < n_queries; ++i) {
            int si = members[n_prompts + i];
            auto c = crop(si);
            ep.query_images.push_back(image_tensor(c));
            Tensor<float> label = task == TaskId::PE
                                      ? heatmap_label(c, ep.keypoint_index, heatmap_sigma)
                                      : mask_label(c);
            ep.query_targets.push_back(as_dense_target(label));
            ep.query_class_ids.push_back(class_id);
            ep.query_sample_ids.push_back(ds.samples[si].id);
        }
    }
    return ep;
}

std::vector<LogRow> train(
    ModelParams<float>& params, const synthdata::DatasetManifest& ds,
    const TrainConfig& cfg,
    const std::function<void(long long, ModelParams<float>&)>& on_checkpoint) {
    cfg.validate();
    if (params.cfg.task_biases != mode_uses_task_biases(cfg.mode))
        throw std::invalid_argument(
            "train: model task_biases flag does not match the ablation mode");
    auto flat = flatten_params(params);
    // slightly faster second-moment adaptation helps short training budgets
    Adam<float> opt(0.9f, 0.99f);
    RngStream root(cfg.seed, "train");
    std::vector<LogRow> log;
    log.reserve(cfg.total_iters);

    const auto& tasks = params.cfg.tasks;
    for (long long iter = 0; iter < cfg.total_iters; ++iter) {
        auto it_rng = root.split("iter" + std::to_string(iter));
        TaskId task = tasks[it_rng.uniform_int(static_cast<int>(tasks.size()))];

        Tensor<float> loss;
        for (int b = 0; b < cfg.batch_episodes; ++b) {
            auto ep_rng = it_rng.split("episode" + std::to_string(b));
            auto ep = sample_episode(ds, params.cfg, task, cfg.n_prompts,
                                     cfg.n_queries, ep_rng, cfg.split,
                                     cfg.heatmap_sigma);
            auto l = objective::episode_objective(params, to_batch(ep),
                                                  mode_uses_awl(cfg.mode));
            loss = loss.defined() ? numkit::add(loss, l) : l;
        }
        if (cfg.batch_episodes > 1)
            loss = numkit::scale(loss, 1.0f / cfg.batch_episodes);

        flat.zero_grad();
        numkit::backward(loss);
        double lr = numkit::poly_lr(iter, cfg.warmup_iters, cfg.total_iters,
                                    cfg.base_lr);
        opt.step(flat, lr, train_mask(flat, cfg.mode, task, params.cfg.task_biases));

        std::string s_key = std::string("uncertainty.") + model::task_name(task);
        log.push_back(LogRow{iter, task, static_cast<double>(loss.item()),
                             static_cast<double>(params.uncertainty.at(s_key).tensor.item()),
                             lr});
        if (on_checkpoint) on_checkpoint(iter, params);
    }
    return log;
}

namespace {

// Shared driver for adaptation: `make_step_pairs` supplies the labeled
// prompt list for each step so PE evaluation can re-label per keypoint.
void adapt_impl(ModelParams<float>& params, TaskId task, const AdaptConfig& cfg,
                int prompt_count,
                const std::function<std::vector<std::pair<Tensor<float>, Tensor<float>>>(
                    RngStream&)>& make_step_pairs) {
    if (prompt_count < 1)
        throw std::invalid_argument("adapt: prompt set is empty");
    if (cfg.sub_split_ratio <= 0.0 || cfg.sub_split_ratio >= 1.0)
        throw std::invalid_argument("adapt: sub_split_ratio must be in (0,1)");

    auto flat = flatten_params(params);
    std::string bank_prefix =
        params.cfg.task_biases ? std::string("bank.") + model::task_name(task) + "."
                               : std::string("bank.all.");
    std::vector<bool> scope(flat.size(), false);
    for (size_t i = 0; i < flat.size(); ++i) {
        const auto& name = flat.all()[i].name;
        if (name.rfind("uncertainty.", 0) == 0) continue;
        if (name.rfind("bank.", 0) == 0 && name.rfind(bank_prefix, 0) != 0)
            continue;  // other tasks' banks never move
        scope[i] = cfg.full_scope || in_adapt_scope(name, bank_prefix);
    }
    bool any = false;
    for (bool b : scope) any = any || b;
    if (!any) throw std::invalid_argument("adapt: empty tunable scope");

    // freeze everything outside the scope so backward skips their gradients
    std::vector<bool> saved_rg(flat.size());
    for (size_t i = 0; i < flat.size(); ++i) {
        saved_rg[i] = flat.all()[i].tensor.requires_grad();
        flat.all()[i].tensor.set_requires_grad(scope[i]);
    }

    Adam<float> opt;
    RngStream root(cfg.seed, "adapt");
    // With a single prompt the sub-split degenerates: the one item serves as
    // both sub-prompt and sub-query.
    int n_sub_prompts =
        prompt_count == 1
            ? 1
            : std::clamp(static_cast<int>(std::lround(prompt_count * cfg.sub_split_ratio)),
                         1, prompt_count - 1);
    for (int step = 0; step < cfg.steps; ++step) {
        auto rng = root.split("step" + std::to_string(step));
        auto pairs = make_step_pairs(rng);
        std::vector<int> order(pairs.size());
        std::iota(order.begin(), order.end(), 0);
        shuffle_indices(order, rng);

        EpisodeBatch<float> batch;
        batch.task = task;
        for (int i = 0; i < n_sub_prompts; ++i) batch.prompts.push_back(pairs[order[i]]);
        size_t q0 = pairs.size() == 1 ? 0 : static_cast<size_t>(n_sub_prompts);
        for (size_t i = q0; i < order.size(); ++i) {
            const auto& [img, lab] = pairs[order[i]];
            batch.query_images.push_back(img);
            batch.query_targets.push_back(task == TaskId::CLS
                                              ? Tensor<float>::scalar(1.0f)
                                              : as_dense_target(lab));
        }
        auto loss = objective::episode_task_loss(params, batch).value;
        flat.zero_grad();
        numkit::backward(loss);
        opt.step(flat, cfg.lr, scope);
    }
    for (size_t i = 0; i < flat.size(); ++i)
        flat.all()[i].tensor.set_requires_grad(saved_rg[i]);
}

}  // namespace

void adapt(ModelParams<float>& params,
           const std::vector<std::pair<Tensor<float>, Tensor<float>>>& prompt_set,
           TaskId task, const AdaptConfig& cfg) {
    adapt_impl(params, task, cfg, static_cast<int>(prompt_set.size()),
               [&](RngStream&) { return prompt_set; });
}

model::Prediction<float> predict(
    ModelParams<float>& params, const Tensor<float>& query_image,
    const std::vector<std::pair<Tensor<float>, Tensor<float>>>& prompt_set,
    TaskId task) {
    numkit::NoGradGuard ng;
    return model::forward(query_image, prompt_set, task, params);
}

int worker_thread_cap() {
    if (const char* env = std::getenv("UNIAP_NUM_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

namespace {

struct ClassEvalData {
    int class_id = 0;
    std::vector<synthdata::CroppedSample> prompts;
    std::vector<synthdata::CroppedSample> queries;
    std::vector<synthdata::CroppedSample> negatives;  // CLS only
};

ClassEvalData gather_class_data(const synthdata::DatasetManifest& ds,
                                const model::ModelConfig& mcfg, const EvalConfig& cfg,
                                int class_id) {
    ClassEvalData out;
    out.class_id = class_id;
    RngStream rng(cfg.seed, "eval.class" + std::to_string(class_id));

    auto members = samples_of_class(ds, class_id, cfg.split);
    shuffle_indices(members, rng);
    int shots = std::min<int>(cfg.shots, std::max(1, static_cast<int>(members.size()) - 1));

    std::vector<int> prompt_ids;
    if (cfg.mode == "CE") {
        // prompts sourced from the training split
        auto train_classes = ds.class_ids("train");
        if (train_classes.empty()) throw std::runtime_error("eval: no train classes for CE");
        int pc = train_classes[rng.uniform_int(static_cast<int>(train_classes.size()))];
        auto train_members = samples_of_class(ds, pc, "train");
        shuffle_indices(train_members, rng);
        for (int i = 0; i < std::min<int>(shots, train_members.size()); ++i)
            prompt_ids.push_back(train_members[i]);
        for (int i = 0; i < std::min<int>(cfg.queries_per_class, members.size()); ++i)
            out.queries.push_back(synthdata::crop_and_resize(ds.samples[members[i]],
                                                             mcfg.image_size));
    } else {
        for (int i = 0; i < shots; ++i) prompt_ids.push_back(members[i]);
        int q = 0;
        for (size_t i = shots; i < members.size() && q < cfg.queries_per_class; ++i, ++q)
            out.queries.push_back(synthdata::crop_and_resize(ds.samples[members[i]],
                                                             mcfg.image_size));
    }
    for (int si : prompt_ids)
        out.prompts.push_back(synthdata::crop_and_resize(ds.samples[si], mcfg.image_size));

    if (cfg.task == TaskId::CLS) {
        std::vector<int> others;
        for (size_t i = 0; i < ds.samples.size(); ++i)
            if (ds.samples[i].split == cfg.split && ds.samples[i].class_id != class_id)
                others.push_back(static_cast<int>(i));
        shuffle_indices(others, rng);
        for (int i = 0; i < std::min<int>(cfg.queries_per_class, others.size()); ++i)
            out.negatives.push_back(
                synthdata::crop_and_resize(ds.samples[others[i]], mcfg.image_size));
    }
    if (out.prompts.empty() || out.queries.empty())
        throw std::runtime_error("eval: class " + std::to_string(class_id) +
                                 " has too few samples");
    return out;
}

double eval_one_class(const ModelParams<float>& frozen,
                      const synthdata::DatasetManifest& ds, const EvalConfig& cfg,
                      int class_id, bool pixel_acc) {
    auto mcfg = frozen.cfg;
    auto data = gather_class_data(ds, mcfg, cfg, class_id);
    auto params = frozen.template cast<float>();  // private copy per class

    int n_kp = 0;
    if (cfg.task == TaskId::PE)
        n_kp = synthdata::family_keypoint_count(ds.classes.at(class_id).family);

    if (cfg.adapted) {
        if (cfg.task == TaskId::PE) {
            adapt_impl(params, cfg.task, cfg.adapt_cfg,
                       static_cast<int>(data.prompts.size()), [&](RngStream& rng) {
                           int k = rng.uniform_int(n_kp);
                           std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
                           for (const auto& c : data.prompts)
                               pairs.emplace_back(image_tensor(c),
                                                  heatmap_label(c, k, cfg.heatmap_sigma));
                           return pairs;
                       });
        } else {
            std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
            for (const auto& c : data.prompts)
                pairs.emplace_back(image_tensor(c),
                                   cfg.task == TaskId::SS
                                       ? mask_label(c)
                                       : Tensor<float>::zeros({1, mcfg.image_size,
                                                               mcfg.image_size}));
            adapt(params, pairs, cfg.task, cfg.adapt_cfg);
        }
    }

    numkit::NoGradGuard ng;
    const int S = mcfg.image_size;
    if (cfg.task == TaskId::PE) {
        std::vector<metrics::KeypointPrediction> preds;
        std::vector<std::array<double, 2>> gts;
        std::vector<bool> vis;
        for (int k = 0; k < n_kp; ++k) {
            std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
            for (const auto& c : data.prompts)
                pairs.emplace_back(image_tensor(c), heatmap_label(c, k, cfg.heatmap_sigma));
            for (const auto& q : data.queries) {
                auto pred = model::forward(image_tensor(q), pairs, TaskId::PE, params);
                std::vector<float> hm(pred.dense.value().begin(),
                                      pred.dense.value().end());
                preds.push_back(metrics::extract_keypoint(hm, S, S));
                gts.push_back({q.keypoints[k].x, q.keypoints[k].y});
                vis.push_back(q.keypoints[k].visible);
            }
        }
        return metrics::pck(preds, gts, vis, S, S, cfg.pck_sigma);
    }
    if (cfg.task == TaskId::SS) {
        std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
        for (const auto& c : data.prompts)
            pairs.emplace_back(image_tensor(c), mask_label(c));
        double acc = 0;
        for (const auto& q : data.queries) {
            auto pred = model::forward(image_tensor(q), pairs, TaskId::SS, params);
            std::vector<float> logits(pred.dense.value().begin(),
                                      pred.dense.value().end());
            for (auto& v : logits) v = 1.0f / (1.0f + std::exp(-v));
            acc += pixel_acc ? metrics::pixel_accuracy(logits, q.mask)
                             : metrics::miou(logits, q.mask);
        }
        return acc / static_cast<double>(data.queries.size());
    }
    // CLS: positive queries from the class, negatives from the others
    std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
    for (const auto& c : data.prompts)
        pairs.emplace_back(image_tensor(c), Tensor<float>::zeros({1, S, S}));
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& q : data.queries) {
        auto pred = model::forward(image_tensor(q), pairs, TaskId::CLS, params);
        scores.push_back(pred.score.item());
        labels.push_back(1);
    }
    for (const auto& q : data.negatives) {
        auto pred = model::forward(image_tensor(q), pairs, TaskId::CLS, params);
        scores.push_back(pred.score.item());
        labels.push_back(0);
    }
    return metrics::classification_accuracy(scores, labels);
}

metrics::MetricReport evaluate_impl(const ModelParams<float>& params,
                                    const synthdata::DatasetManifest& ds,
                                    const EvalConfig& cfg, bool pixel_acc) {
    if (cfg.mode != "ID" && cfg.mode != "OOD" && cfg.mode != "CE")
        throw std::invalid_argument("eval: mode must be ID, OOD, or CE");
    if (cfg.mode == "OOD") {
        ds.check_split_disjointness();
        std::set<int> train_classes;
        for (const auto& s : ds.samples)
            if (s.split == "train") train_classes.insert(s.class_id);
        for (int cid : ds.class_ids(cfg.split))
            if (train_classes.count(cid))
                throw std::runtime_error("eval OOD: class " + std::to_string(cid) +
                                         " leaks into the train split");
    }
    auto classes = ds.class_ids(cfg.split);
    if (classes.empty()) throw std::runtime_error("eval: empty split " + cfg.split);

    metrics::MetricReport rep;
    rep.metric = cfg.task == TaskId::PE
                     ? "pck@" + std::to_string(cfg.pck_sigma).substr(0, 4)
                     : (cfg.task == TaskId::SS ? (pixel_acc ? "pixel_acc" : "miou")
                                               : "accuracy");
    rep.shots = cfg.shots;
    rep.mode = cfg.mode;
    rep.seed = cfg.seed;

    int n_threads = std::min<int>(worker_thread_cap(), static_cast<int>(classes.size()));
    if (n_threads <= 1) {
        for (int cid : classes)
            rep.per_class[cid] = eval_one_class(params, ds, cfg, cid, pixel_acc);
    } else {
        std::vector<double> vals(classes.size());
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < classes.size();
                     i = next.fetch_add(1))
                    vals[i] = eval_one_class(params, ds, cfg, classes[i], pixel_acc);
            });
        for (auto& th : pool) th.join();
        for (size_t i = 0; i < classes.size(); ++i) rep.per_class[classes[i]] = vals[i];
    }
    rep.finalize();
    return rep;
}

}  // namespace

metrics::MetricReport evaluate(const ModelParams<float>& params,
                               const synthdata::DatasetManifest& ds,
                               const EvalConfig& cfg) {
    return evaluate_impl(params, ds, cfg, false);
}

metrics::MetricReport evaluate_pixel_accuracy(const ModelParams<float>& params,
                                              const synthdata::DatasetManifest& ds,
                                              const EvalConfig& cfg) {
    if (cfg.task != TaskId::SS)
        throw std::invalid_argument("pixel accuracy is an SS metric");
    return evaluate_impl(params, ds, cfg, true);
}

}  // namespace uniap::episodic
