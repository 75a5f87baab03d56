// uniap — few-shot multi-task perception experiments on synthetic shapes.
//
// Subcommands: gen-data, train, adapt, eval, sweep-shots, inspect.
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "uniap/checkpoint.hpp"
#include "uniap/episodic.hpp"
#include "uniap/model.hpp"
#include "uniap/runconfig.hpp"
#include "uniap/synthdata.hpp"

namespace fs = std::filesystem;
using namespace uniap;

namespace {

std::string csv_comment(std::uint64_t seed, std::uint64_t config_hash) {
    std::ostringstream os;
    os << "seed=" << seed << " config=" << std::hex << config_hash << std::dec
       << " version=" << io::kVersionString;
    return os.str();
}

std::string csv_header(std::uint64_t seed, std::uint64_t config_hash) {
    return "# " + csv_comment(seed, config_hash) + "\n";
}

void write_text(const std::string& path, const std::string& text) {
    fs::create_directories(fs::path(path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(path).parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << text;
}

model::ModelParams<float> load_params(const io::RunConfig& cfg, const std::string& ckpt,
                                      bool force, io::CheckpointMeta* meta = nullptr) {
    return io::load_checkpoint(ckpt, cfg.model, cfg.config_hash, meta, force);
}

std::string prompt_split(const std::string& split_mode) {
    return split_mode == "ID" ? "train" : "test";
}

int cmd_gen_data(const io::RunConfig& cfg, std::uint64_t seed) {
    cfg.validate(/*require_paths=*/false);
    if (cfg.manifest_dir.empty())
        throw std::invalid_argument("gen-data: config must set manifest_dir");
    auto m = synthdata::generate_dataset(cfg.dataset, seed);
    synthdata::save_manifest(m, cfg.manifest_dir);
    std::cout << "wrote manifest: " << cfg.manifest_dir << " (" << m.classes.size()
              << " classes, " << m.samples.size() << " samples, hash=" << std::hex
              << synthdata::manifest_hash(m) << std::dec << ")\n";
    return 0;
}

int cmd_train(io::RunConfig cfg, long long ckpt_every) {
    cfg.validate(/*require_paths=*/true);
    auto ds = synthdata::load_manifest(cfg.manifest_dir);
    auto params = model::init_params<float>(cfg.model, cfg.train.seed);
    fs::create_directories(cfg.output_dir);

    auto save = [&](long long iter, model::ModelParams<float>& p,
                    const std::string& name) {
        io::CheckpointMeta meta;
        meta.config_hash = cfg.config_hash;
        meta.iteration = static_cast<std::uint64_t>(iter);
        meta.rng_key = cfg.train.seed;
        io::save_checkpoint((fs::path(cfg.output_dir) / name).string(), p, meta);
    };

    std::function<void(long long, model::ModelParams<float>&)> on_ckpt;
    if (ckpt_every > 0)
        on_ckpt = [&](long long iter, model::ModelParams<float>& p) {
            if (iter % ckpt_every == 0) {
                char name[64];
                std::snprintf(name, sizeof(name), "ckpt_%06lld.ckpt", iter);
                save(iter, p, name);
            }
        };

    auto rows = episodic::train(params, ds, cfg.train, on_ckpt);

    std::ostringstream log;
    log << csv_header(cfg.train.seed, cfg.config_hash);
    log << "iter,task,loss,s_task,lr\n";
    for (const auto& r : rows)
        log << r.iter << ',' << model::task_name(r.task) << ',' << r.loss << ','
            << r.s_task << ',' << r.lr << '\n';
    write_text((fs::path(cfg.output_dir) / "train_log.csv").string(), log.str());

    save(cfg.train.total_iters, params, "final.ckpt");
    std::cout << "trained " << cfg.train.total_iters << " iters ("
              << episodic::ablation_name(cfg.train.mode) << "), final loss "
              << (rows.empty() ? 0.0 : rows.back().loss) << "; wrote "
              << (fs::path(cfg.output_dir) / "final.ckpt").string() << "\n";
    return 0;
}

int cmd_adapt(io::RunConfig cfg, const std::string& ckpt, const std::string& out,
              int shots, bool force) {
    cfg.validate(/*require_paths=*/true);
    auto ds = synthdata::load_manifest(cfg.manifest_dir);
    auto params = load_params(cfg, ckpt, force);

    numkit::RngStream rng(cfg.adapt.seed, "cli.adapt");
    auto ep = episodic::sample_episode(ds, cfg.model, cfg.eval_task, shots, 1, rng,
                                       prompt_split(cfg.split_mode),
                                       cfg.train.heatmap_sigma);
    auto acfg = cfg.adapt;
    acfg.full_scope = (cfg.train.mode == episodic::AblationMode::awl_ft);
    episodic::adapt(params, ep.prompts, cfg.eval_task, acfg);

    io::CheckpointMeta meta;
    meta.config_hash = cfg.config_hash;
    meta.iteration = static_cast<std::uint64_t>(acfg.steps);
    meta.rng_key = acfg.seed;
    std::string path = out.empty()
                           ? (fs::path(cfg.output_dir) / "adapted.ckpt").string()
                           : out;
    io::save_checkpoint(path, params, meta);
    std::cout << "adapted " << model::task_name(cfg.eval_task) << " on class "
              << ep.class_id << " with " << shots << " prompts for " << acfg.steps
              << " steps; wrote " << path << "\n";
    return 0;
}

episodic::EvalConfig make_eval_cfg(const io::RunConfig& cfg, int shots, bool adapted,
                                   std::uint64_t seed) {
    episodic::EvalConfig e;
    e.task = cfg.eval_task;
    e.shots = shots;
    e.queries_per_class = cfg.eval_queries_per_class;
    e.mode = cfg.split_mode;
    e.split = prompt_split(cfg.split_mode);
    e.seed = seed;
    e.heatmap_sigma = cfg.train.heatmap_sigma;
    e.pck_sigma = cfg.pck_sigma;
    e.adapted = adapted;
    e.adapt_cfg = cfg.adapt;
    e.adapt_cfg.full_scope = (cfg.train.mode == episodic::AblationMode::awl_ft);
    return e;
}

int cmd_eval(io::RunConfig cfg, const std::string& ckpt, int shots, bool adapted,
             std::uint64_t seed, bool force) {
    cfg.validate(/*require_paths=*/true);
    auto ds = synthdata::load_manifest(cfg.manifest_dir);
    ds.check_split_disjointness();
    auto params = load_params(cfg, ckpt, force);

    auto report = episodic::evaluate(params, ds, make_eval_cfg(cfg, shots, adapted, seed));

    std::string stem = "eval_" + std::string(model::task_name(cfg.eval_task)) + "_" +
                       std::to_string(shots) + (adapted ? "_adapted" : "");
    write_text((fs::path(cfg.output_dir) / (stem + ".csv")).string(),
               report.to_csv(csv_comment(seed, cfg.config_hash)));
    write_text((fs::path(cfg.output_dir) / (stem + ".json")).string(),
               report.to_json());
    std::cout << report.metric << " (" << report.mode << ", " << shots
              << "-shot, " << (adapted ? "adapted" : "unadapted")
              << "): " << report.macro << "\n";
    return 0;
}

int cmd_sweep_shots(io::RunConfig cfg, const std::string& ckpt, std::uint64_t seed,
                    bool force) {
    cfg.validate(/*require_paths=*/true);
    auto ds = synthdata::load_manifest(cfg.manifest_dir);
    ds.check_split_disjointness();
    auto params = load_params(cfg, ckpt, force);

    std::ostringstream csv;
    csv << csv_header(seed, cfg.config_hash);
    csv << "shots,metric,value,seed\n";
    for (int shots : cfg.shot_list) {
        auto report =
            episodic::evaluate(params, ds, make_eval_cfg(cfg, shots, true, seed));
        csv << shots << ',' << report.metric << ',' << report.macro << ',' << seed
            << '\n';
        std::cout << shots << "-shot " << report.metric << ": " << report.macro << "\n";
    }
    write_text((fs::path(cfg.output_dir) / "shot_curve.csv").string(), csv.str());
    return 0;
}

long long numel_by_kind(const numkit::ParamSet<float>& ps, numkit::ParamKind kind) {
    long long n = 0;
    for (const auto& p : ps.all())
        if (p.kind == kind) n += p.tensor.numel();
    return n;
}

int cmd_inspect(const io::RunConfig& cfg, const std::string& ckpt, bool force) {
    model::ModelParams<float> params =
        ckpt.empty() ? model::init_params<float>(cfg.model, cfg.train.seed)
                     : load_params(cfg, ckpt, force);

    long long shared_w = numel_by_kind(params.shared, numkit::ParamKind::weight);
    long long shared_b = numel_by_kind(params.shared, numkit::ParamKind::bias);
    long long bank = params.task_specific_numel();
    long long unc = 0;
    for (const auto& p : params.uncertainty.all()) unc += p.tensor.numel();
    long long shared_total = shared_w + shared_b;
    double ratio = shared_total > 0 ? 100.0 * double(bank) / double(shared_total) : 0.0;

    std::cout << "shared weights:        " << shared_w << "\n"
              << "shared biases:         " << shared_b << "\n"
              << "shared total:          " << shared_total << "\n"
              << "task-specific (bank):  " << bank << "  x " << params.banks.size()
              << " banks\n"
              << "uncertainty params:    " << unc << "\n"
              << "task-specific/shared:  " << ratio << " %\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uniap: few-shot multi-task perception on synthetic shapes"};
    app.require_subcommand(1);

    std::string config_path, ckpt, out;
    std::uint64_t seed = 0;
    bool seed_set = false, adapted = false, force = false;
    int shots = -1;
    long long ckpt_every = 0;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", config_path, "RunConfig JSON path");
        if (config_required) opt->required();
        sub->add_option("--seed", seed, "override the configured seed")
            ->each([&](const std::string&) { seed_set = true; });
    };

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    add_common(gen, true);

    auto* train = app.add_subcommand("train", "episodic multi-task training");
    add_common(train, true);
    train->add_option("--ckpt-every", ckpt_every,
                      "write an intermediate checkpoint every K iterations");

    auto* adapt = app.add_subcommand("adapt", "few-shot test-time adaptation");
    add_common(adapt, true);
    adapt->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    adapt->add_option("--out", out, "adapted checkpoint path");
    adapt->add_option("--shots", shots, "prompt count (default: last of shot_list)");
    adapt->add_flag("--force", force, "ignore config-hash mismatch");

    auto* evalc = app.add_subcommand("eval", "few-shot evaluation");
    add_common(evalc, true);
    evalc->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    evalc->add_option("--shots", shots, "prompt count (default: last of shot_list)");
    evalc->add_flag("--adapted", adapted, "adapt per class before evaluating");
    evalc->add_flag("--force", force, "ignore config-hash mismatch");
    std::string mode_override;
    evalc->add_option("--mode", mode_override, "split mode override: ID / OOD / CE");

    auto* sweep = app.add_subcommand("sweep-shots", "adapted eval across shot_list");
    add_common(sweep, true);
    sweep->add_option("--ckpt", ckpt, "trained checkpoint")->required();
    sweep->add_flag("--force", force, "ignore config-hash mismatch");

    auto* inspect = app.add_subcommand("inspect", "parameter accounting");
    add_common(inspect, true);
    inspect->add_option("--ckpt", ckpt, "checkpoint (default: fresh init)");
    inspect->add_flag("--force", force, "ignore config-hash mismatch");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        auto cfg = io::load_run_config(config_path);
        if (!mode_override.empty()) cfg.split_mode = mode_override;
        if (gen->parsed()) return cmd_gen_data(cfg, seed_set ? seed : cfg.train.seed);
        if (train->parsed()) {
            if (seed_set) cfg.train.seed = seed;
            return cmd_train(cfg, ckpt_every);
        }
        if (shots < 0) shots = cfg.shot_list.empty() ? 10 : cfg.shot_list.back();
        if (adapt->parsed()) {
            if (seed_set) cfg.adapt.seed = seed;
            return cmd_adapt(cfg, ckpt, out, shots, force);
        }
        if (evalc->parsed())
            return cmd_eval(cfg, ckpt, shots, adapted,
                            seed_set ? seed : cfg.adapt.seed, force);
        if (sweep->parsed())
            return cmd_sweep_shots(cfg, ckpt, seed_set ? seed : cfg.adapt.seed, force);
        if (inspect->parsed()) return cmd_inspect(cfg, ckpt, force);
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
