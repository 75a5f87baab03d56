#include "uniap/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "uniap/checkpoint.hpp"

namespace uniap::io {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& where,
                    const std::set<std::string>& known) {
    if (!j.is_object())
        throw std::invalid_argument("config: '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + it.key() + "' in " +
                                        where);
}

template <typename T>
void get_if(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

model::ModelConfig parse_model(const json& j) {
    reject_unknown(j, "model",
                   {"image_size", "patch_size", "d", "heads", "blocks", "hierarchies",
                    "mlp_ratio", "dec_channels", "tasks"});
    model::ModelConfig m;
    get_if(j, "image_size", m.image_size);
    get_if(j, "patch_size", m.patch_size);
    get_if(j, "d", m.d);
    get_if(j, "heads", m.heads);
    get_if(j, "blocks", m.blocks);
    get_if(j, "hierarchies", m.hierarchies);
    get_if(j, "mlp_ratio", m.mlp_ratio);
    get_if(j, "dec_channels", m.dec_channels);
    if (j.contains("tasks")) {
        m.tasks.clear();
        for (const auto& t : j.at("tasks"))
            m.tasks.push_back(model::task_from_name(t.get<std::string>()));
    }
    return m;
}

episodic::TrainConfig parse_train(const json& j) {
    reject_unknown(j, "train",
                   {"total_iters", "warmup_iters", "base_lr", "base_lr_pretrained",
                    "batch_episodes", "n_prompts", "n_queries", "seed", "ablation_mode",
                    "heatmap_sigma"});
    episodic::TrainConfig t;
    get_if(j, "total_iters", t.total_iters);
    get_if(j, "warmup_iters", t.warmup_iters);
    get_if(j, "base_lr", t.base_lr);
    get_if(j, "base_lr_pretrained", t.base_lr_pretrained);
    get_if(j, "batch_episodes", t.batch_episodes);
    get_if(j, "n_prompts", t.n_prompts);
    get_if(j, "n_queries", t.n_queries);
    get_if(j, "seed", t.seed);
    get_if(j, "heatmap_sigma", t.heatmap_sigma);
    if (j.contains("ablation_mode"))
        t.mode = episodic::ablation_from_name(j.at("ablation_mode").get<std::string>());
    return t;
}

episodic::AdaptConfig parse_adapt(const json& j) {
    reject_unknown(j, "adapt", {"steps", "lr", "sub_split_ratio", "seed"});
    episodic::AdaptConfig a;
    get_if(j, "steps", a.steps);
    get_if(j, "lr", a.lr);
    get_if(j, "sub_split_ratio", a.sub_split_ratio);
    get_if(j, "seed", a.seed);
    return a;
}

synthdata::DatasetSpec parse_dataset(const json& j) {
    reject_unknown(j, "dataset",
                   {"canvas", "samples_per_class", "families", "colors",
                    "train_classes", "val_classes", "test_classes", "noise_std"});
    synthdata::DatasetSpec s;
    get_if(j, "canvas", s.canvas);
    get_if(j, "samples_per_class", s.samples_per_class);
    get_if(j, "families", s.families);
    get_if(j, "colors", s.colors);
    get_if(j, "train_classes", s.train_classes);
    get_if(j, "val_classes", s.val_classes);
    get_if(j, "test_classes", s.test_classes);
    get_if(j, "noise_std", s.noise_std);
    return s;
}

}  // namespace

void RunConfig::validate(bool require_paths) const {
    model.validate();
    train.validate();
    if (split_mode != "ID" && split_mode != "OOD" && split_mode != "CE")
        throw std::invalid_argument("config: split_mode must be ID, OOD, or CE");
    for (size_t i = 1; i < shot_list.size(); ++i)
        if (shot_list[i] <= shot_list[i - 1])
            throw std::invalid_argument("config: shot_list must be strictly increasing");
    if (require_paths && !std::filesystem::exists(manifest_dir))
        throw std::invalid_argument("config: manifest_dir does not exist: " +
                                    manifest_dir);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
    }
    reject_unknown(j, "(root)",
                   {"model", "train", "adapt", "dataset", "manifest_dir", "output_dir",
                    "split_mode", "shot_list", "eval_task", "eval_queries_per_class",
                    "pck_sigma"});
    RunConfig cfg;
    if (j.contains("model")) cfg.model = parse_model(j["model"]);
    if (j.contains("train")) cfg.train = parse_train(j["train"]);
    if (j.contains("adapt")) cfg.adapt = parse_adapt(j["adapt"]);
    if (j.contains("dataset")) cfg.dataset = parse_dataset(j["dataset"]);
    get_if(j, "manifest_dir", cfg.manifest_dir);
    get_if(j, "output_dir", cfg.output_dir);
    get_if(j, "split_mode", cfg.split_mode);
    get_if(j, "shot_list", cfg.shot_list);
    if (j.contains("eval_task"))
        cfg.eval_task = model::task_from_name(j.at("eval_task").get<std::string>());
    get_if(j, "eval_queries_per_class", cfg.eval_queries_per_class);
    get_if(j, "pck_sigma", cfg.pck_sigma);

    cfg.model.task_biases = episodic::mode_uses_task_biases(cfg.train.mode);
    cfg.config_hash = fnv1a_hash(run_config_to_json(cfg));
    return cfg;
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    json tasks = json::array();
    for (auto t : cfg.model.tasks) tasks.push_back(model::task_name(t));
    j["model"] = {{"image_size", cfg.model.image_size},
                  {"patch_size", cfg.model.patch_size},
                  {"d", cfg.model.d},
                  {"heads", cfg.model.heads},
                  {"blocks", cfg.model.blocks},
                  {"hierarchies", cfg.model.hierarchies},
                  {"mlp_ratio", cfg.model.mlp_ratio},
                  {"dec_channels", cfg.model.dec_channels},
                  {"tasks", tasks}};
    j["train"] = {{"total_iters", cfg.train.total_iters},
                  {"warmup_iters", cfg.train.warmup_iters},
                  {"base_lr", cfg.train.base_lr},
                  {"base_lr_pretrained", cfg.train.base_lr_pretrained},
                  {"batch_episodes", cfg.train.batch_episodes},
                  {"n_prompts", cfg.train.n_prompts},
                  {"n_queries", cfg.train.n_queries},
                  {"seed", cfg.train.seed},
                  {"ablation_mode", episodic::ablation_name(cfg.train.mode)},
                  {"heatmap_sigma", cfg.train.heatmap_sigma}};
    j["adapt"] = {{"steps", cfg.adapt.steps},
                  {"lr", cfg.adapt.lr},
                  {"sub_split_ratio", cfg.adapt.sub_split_ratio},
                  {"seed", cfg.adapt.seed}};
    j["dataset"] = {{"canvas", cfg.dataset.canvas},
                    {"samples_per_class", cfg.dataset.samples_per_class},
                    {"families", cfg.dataset.families},
                    {"colors", cfg.dataset.colors},
                    {"train_classes", cfg.dataset.train_classes},
                    {"val_classes", cfg.dataset.val_classes},
                    {"test_classes", cfg.dataset.test_classes},
                    {"noise_std", cfg.dataset.noise_std}};
    j["manifest_dir"] = cfg.manifest_dir;
    j["output_dir"] = cfg.output_dir;
    j["split_mode"] = cfg.split_mode;
    j["shot_list"] = cfg.shot_list;
    j["eval_task"] = model::task_name(cfg.eval_task);
    j["eval_queries_per_class"] = cfg.eval_queries_per_class;
    j["pck_sigma"] = cfg.pck_sigma;
    return j.dump(1);
}

}  // namespace uniap::io
