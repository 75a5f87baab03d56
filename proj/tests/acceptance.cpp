// Release acceptance harness. Runs the ten gates end to end and prints one
// PASS/FAIL line per gate; the exit code is the number of failed gates.
//
//  1. gradient fidelity        default model, 10 seeds, central FD in double
//  2. matching invariants      row sums, prompt permutation/duplication
//  3. loss stationarity        s_t -> ln L_t under gradient descent
//  4. bias isolation & recall  adaptation scope + bank switch round trip
//  5. metric oracles           PCK / mIoU / pixel accuracy vs brute force
//  6. overfit smoke            single class, N=1, Q=1, 500 iterations
//  7. few-shot trend           adapted 10-shot vs unadapted / 1-shot
//  8. ablation trend           awl+bt vs baseline; bt vs ft wall-clock
//  9. parameter accounting     task-specific/shared ratio < 2 %
// 10. determinism              byte-identical checkpoints, bit-exact round trip

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "test_util.hpp"
#include "uniap/checkpoint.hpp"
#include "uniap/episodic.hpp"
#include "uniap/metrics.hpp"
#include "uniap/model.hpp"
#include "uniap/objective.hpp"
#include "uniap/optim.hpp"
#include "uniap/rng.hpp"
#include "uniap/synthdata.hpp"
#include "uniap/tensor.hpp"

namespace fs = std::filesystem;
using namespace uniap;
using model::TaskId;
using numkit::RngStream;
using numkit::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

double secs_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool ok = false;
    std::string detail;
};

template <typename T>
Tensor<T> rand_signed(const std::vector<int>& shape, RngStream& rng, double scale) {
    auto t = Tensor<T>::zeros(shape);
    auto v = t.mutable_value();
    for (int i = 0; i < t.numel(); ++i)
        v[i] = static_cast<T>(scale * (2.0 * rng.uniform() - 1.0));
    return t;
}

template <typename T>
Tensor<T> rand_unit(const std::vector<int>& shape, RngStream& rng) {
    auto t = Tensor<T>::zeros(shape);
    auto v = t.mutable_value();
    for (int i = 0; i < t.numel(); ++i) v[i] = static_cast<T>(rng.uniform());
    return t;
}

float linf_diff(const Tensor<float>& a, const Tensor<float>& b) {
    float worst = 0;
    for (int i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.value()[i] - b.value()[i]));
    return worst;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), f, a, b, c);
    return buf;
}

// ---- 1. gradient fidelity ---------------------------------------------------

Outcome criterion1() {
    auto t0 = Clock::now();
    const std::array<TaskId, 3> cycle{TaskId::SS, TaskId::PE, TaskId::CLS};
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        TaskId task = cycle[seed % 3];
        model::ModelConfig cfg;  // default desk-scale model
        auto params = model::init_params<double>(cfg, seed);
        RngStream rng(seed, "acceptance.fd");
        const int S = cfg.image_size;

        objective::EpisodeBatch<double> ep;
        ep.task = task;
        ep.prompts = {{rand_signed<double>({3, S, S}, rng, 0.3),
                       rand_unit<double>({1, S, S}, rng)}};
        ep.query_images = {rand_signed<double>({3, S, S}, rng, 0.3)};
        ep.query_targets = {task == TaskId::CLS
                                ? Tensor<double>::scalar(seed % 2 ? 1.0 : 0.0)
                                : rand_unit<double>({1, 1, S, S}, rng)};

        numkit::ParamSet<double> flat;
        for (auto& p : params.shared.all()) flat.add(p.name, p.kind, p.tensor);
        for (auto& p : params.bank(task).all())
            flat.add("bank." + p.name, p.kind, p.tensor);
        for (auto& p : params.uncertainty.all()) flat.add(p.name, p.kind, p.tensor);

        flat.zero_grad();
        numkit::backward(objective::episode_objective(params, ep, true));
        double err = testutil::max_rel_grad_error(
            flat, [&]() { return objective::episode_objective(params, ep, true).item(); },
            1e-4, /*max_entries_per_param=*/1);
        worst = std::max(worst, err);
    }
    double el = secs_since(t0);
    return {worst < 1e-4 && el < 120.0,
            fmt("max rel err %.2e over 10 seeds, %.0fs (< 120s)", worst, el)};
}

// ---- 2. matching invariants -------------------------------------------------

Outcome criterion2() {
    auto cfg = testutil::tiny_config();
    const std::array<TaskId, 3> cycle{TaskId::SS, TaskId::PE, TaskId::CLS};
    double worst_row = 0, worst_inv = 0;
    for (int e = 0; e < 100; ++e) {
        RngStream rng(1000 + e, "acceptance.match");
        auto params = model::init_params<float>(cfg, 1000 + e);
        const int S = cfg.image_size;
        const int n = 1 + e % 3;
        std::vector<std::pair<Tensor<float>, Tensor<float>>> prompts;
        for (int i = 0; i < n; ++i)
            prompts.emplace_back(rand_signed<float>({3, S, S}, rng, 0.3),
                                 rand_signed<float>({1, S, S}, rng, 0.3));
        auto query = rand_signed<float>({3, S, S}, rng, 0.3);
        TaskId task = cycle[e % 3];

        // attention rows sum to 1 at every hierarchy
        auto qg = model::encode_image(query, task, params);
        std::vector<std::vector<model::TokenGrid<float>>> kgs;
        std::vector<model::TokenGrid<float>> vgs;
        for (const auto& p : prompts) {
            kgs.push_back(model::encode_image(p.first, task, params));
            vgs.push_back(model::encode_label(p.second, params));
        }
        for (int level = 0; level < cfg.hierarchies; ++level) {
            std::vector<model::TokenGrid<float>> ks, vs;
            for (int i = 0; i < n; ++i) {
                ks.push_back(kgs[i][level]);
                vs.push_back(vgs[i]);
            }
            std::vector<Tensor<float>> attn;
            (void)model::match(qg[level], ks, vs, level, params, &attn);
            for (const auto& a : attn) {
                int rows = a.shape()[0], cols = a.shape()[1];
                for (int r = 0; r < rows; ++r) {
                    double sum = 0;
                    for (int c = 0; c < cols; ++c) sum += a.value()[r * cols + c];
                    worst_row = std::max(worst_row, std::abs(sum - 1.0));
                }
            }
        }

        // prompt permutation and duplication leave predictions unchanged
        auto base = model::forward(query, prompts, task, params);
        auto perm = prompts;
        std::reverse(perm.begin(), perm.end());
        auto dup = prompts;
        dup.insert(dup.end(), prompts.begin(), prompts.end());
        auto out_p = model::forward(query, perm, task, params);
        auto out_d = model::forward(query, dup, task, params);
        if (task == TaskId::CLS) {
            worst_inv = std::max<double>(
                worst_inv, std::abs(base.score.item() - out_p.score.item()));
            worst_inv = std::max<double>(
                worst_inv, std::abs(base.score.item() - out_d.score.item()));
        } else {
            worst_inv = std::max<double>(worst_inv, linf_diff(base.dense, out_p.dense));
            worst_inv = std::max<double>(worst_inv, linf_diff(base.dense, out_d.dense));
        }
    }
    return {worst_row <= 1e-6 && worst_inv <= 1e-5,
            fmt("row-sum err %.2e (<= 1e-6), invariance Linf %.2e (<= 1e-5)",
                worst_row, worst_inv)};
}

// ---- 3. loss stationarity ---------------------------------------------------

Outcome criterion3() {
    auto cfg = testutil::tiny_config();
    double worst = 0;
    int worst_steps = 0;
    for (double L : {0.5, 1.0, std::exp(1.0), 5.0}) {
        auto params = model::init_params<float>(cfg, 2);
        auto& s = params.uncertainty.at("uncertainty.PE").tensor;
        int used = 5000;
        for (int step = 0; step < 5000; ++step) {
            objective::TaskLoss<float> l;
            l.task = TaskId::PE;
            l.value = Tensor<float>::scalar(static_cast<float>(L));
            l.count = 1;
            auto total = objective::combined_loss<float>({l}, params);
            params.uncertainty.zero_grad();
            numkit::backward(total);
            s.mutable_value()[0] -= 0.25f * s.grad()[0];  // plain gradient descent
            if (std::abs(s.value()[0] - std::log(L)) < 1e-3) {
                used = step + 1;
                break;
            }
        }
        worst = std::max(worst, std::abs(s.value()[0] - std::log(L)));
        worst_steps = std::max(worst_steps, used);
    }
    return {worst < 1e-3 && worst_steps <= 5000,
            fmt("|s - ln L| <= %.2e, worst %g steps (<= 5000)", worst,
                static_cast<double>(worst_steps))};
}

// ---- 4. bias isolation & recall ---------------------------------------------

bool in_pe_adapt_scope(const std::string& name) {
    return name.rfind("bank.PE.", 0) == 0 ||
           name.rfind("label_encoder.proj.", 0) == 0 ||
           name.rfind("decoder.head.out.", 0) == 0;
}

Outcome criterion4() {
    auto cfg = testutil::tiny_config();
    auto params = model::init_params<float>(cfg, 77);
    synthdata::DatasetSpec dspec;
    dspec.samples_per_class = 8;
    auto ds = synthdata::generate_dataset(dspec, 55);
    RngStream rng(56, "acceptance.adapt");
    auto ep = episodic::sample_episode(ds, cfg, TaskId::PE, 4, 1, rng, "train", 1.5);

    auto flat = episodic::flatten_params(params);
    std::vector<std::vector<float>> snap;
    for (auto& p : flat.all())
        snap.emplace_back(p.tensor.value().begin(), p.tensor.value().end());

    episodic::AdaptConfig acfg;
    acfg.steps = 5;
    acfg.lr = 1e-3;
    acfg.seed = 9;
    episodic::adapt(params, ep.prompts, TaskId::PE, acfg);

    int moved = 0;
    bool frozen_clean = true;
    for (size_t i = 0; i < flat.size(); ++i) {
        const auto& p = flat.all()[i];
        bool same = std::equal(snap[i].begin(), snap[i].end(), p.tensor.value().begin(),
                               [](float a, float b) {
                                   return std::memcmp(&a, &b, sizeof(float)) == 0;
                               });
        if (in_pe_adapt_scope(p.name)) {
            if (!same) ++moved;
        } else if (!same) {
            frozen_clean = false;
        }
    }

    // bank recall: running an SS prediction in between must not perturb PE
    numkit::NoGradGuard ng;
    auto pe1 = model::forward(ep.query_images[0], ep.prompts, TaskId::PE, params);
    auto ss_ep = episodic::sample_episode(ds, cfg, TaskId::SS, 2, 1, rng, "train", 1.5);
    (void)model::forward(ss_ep.query_images[0], ss_ep.prompts, TaskId::SS, params);
    auto pe2 = model::forward(ep.query_images[0], ep.prompts, TaskId::PE, params);
    bool recall = pe1.dense.numel() == pe2.dense.numel() &&
                  std::memcmp(pe1.dense.value().data(), pe2.dense.value().data(),
                              pe1.dense.numel() * sizeof(float)) == 0;

    return {frozen_clean && moved > 0 && recall,
            fmt("non-scope bit-identical=%g, scope tensors moved=%g, recall bit-exact=%g",
                frozen_clean ? 1.0 : 0.0, static_cast<double>(moved),
                recall ? 1.0 : 0.0)};
}

// ---- 5. metric oracles ------------------------------------------------------

Outcome criterion5() {
    RngStream rng(5, "acceptance.metrics");
    int bad_pck = 0, bad_miou = 0, bad_acc = 0;

    for (int t = 0; t < 100; ++t) {
        int k = 1 + rng.uniform_int(6);
        std::vector<metrics::KeypointPrediction> preds(k);
        std::vector<std::array<double, 2>> gts(k);
        std::vector<bool> vis(k);
        for (int i = 0; i < k; ++i) {
            preds[i].x = 8.0 * rng.uniform();
            preds[i].y = 8.0 * rng.uniform();
            gts[i] = {8.0 * rng.uniform(), 8.0 * rng.uniform()};
            vis[i] = rng.uniform() < 0.7;
        }
        vis[0] = true;
        double sigma = std::array<double, 3>{0.1, 0.2, 0.5}[t % 3];

        // brute force: count correct visible keypoints directly
        double thresh = sigma * std::max(8.0, 8.0);
        int total = 0, correct = 0;
        for (int i = 0; i < k; ++i) {
            if (!vis[i]) continue;
            ++total;
            double dx = preds[i].x - gts[i][0], dy = preds[i].y - gts[i][1];
            if (std::sqrt(dx * dx + dy * dy) <= thresh) ++correct;
        }
        double oracle = 100.0 * correct / total;
        if (metrics::pck(preds, gts, vis, 8.0, 8.0, sigma) != oracle) ++bad_pck;
    }

    for (int t = 0; t < 100; ++t) {
        std::vector<float> pred(64), gt(64);
        for (int i = 0; i < 64; ++i) {
            pred[i] = static_cast<float>(rng.uniform());
            gt[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
        }
        // brute force: confusion counts from explicit pixel loops
        long long tp = 0, fp = 0, fn = 0, tn = 0;
        for (int i = 0; i < 64; ++i) {
            bool p = pred[i] >= 0.5f, g = gt[i] >= 0.5f;
            if (p && g) ++tp;
            if (p && !g) ++fp;
            if (!p && g) ++fn;
            if (!p && !g) ++tn;
        }
        double fg = (tp + fp + fn) == 0 ? 1.0 : static_cast<double>(tp) / (tp + fp + fn);
        double bg = (tn + fp + fn) == 0 ? 1.0 : static_cast<double>(tn) / (tn + fp + fn);
        if (metrics::miou(pred, gt) != 0.5 * (fg + bg)) ++bad_miou;
        if (metrics::pixel_accuracy(pred, gt) != 100.0 * (tp + tn) / 64.0) ++bad_acc;
    }

    return {bad_pck == 0 && bad_miou == 0 && bad_acc == 0,
            fmt("mismatches: pck=%g, miou=%g, pixel-acc=%g over 100 instances each",
                static_cast<double>(bad_pck), static_cast<double>(bad_miou),
                static_cast<double>(bad_acc))};
}

// ---- 6. overfit smoke -------------------------------------------------------

Outcome criterion6() {
    auto t0 = Clock::now();
    synthdata::DatasetSpec dspec;
    dspec.samples_per_class = 250;
    auto one = synthdata::generate_dataset(dspec, 100);

    // Single train class in a coherent pose range. Triangle corners are
    // indistinguishable under the generator's full-circle rotation (the shape
    // is 3-fold symmetric), so corner identity across samples is only defined
    // when the poses agree; keep the six class-0 samples closest to 1 rad.
    std::vector<synthdata::Sample> c0;
    for (const auto& s : one.samples)
        if (s.class_id == 0) c0.push_back(s);
    std::sort(c0.begin(), c0.end(), [](const auto& a, const auto& b) {
        return std::fabs(a.rot - 1.0) < std::fabs(b.rot - 1.0);
    });
    c0.resize(6);
    one.samples = c0;
    std::map<int, synthdata::ClassInfo> kept;
    kept[0] = one.classes.at(0);
    one.classes = kept;

    int passed = 0;
    std::string per_seed;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        model::ModelConfig cfg;
        cfg.tasks = {TaskId::PE};
        cfg.d = 48;
        cfg.dec_channels = 16;
        auto params = model::init_params<float>(cfg, seed);

        episodic::TrainConfig tc;
        tc.total_iters = 500;
        tc.warmup_iters = 20;
        tc.base_lr = 3e-3;
        tc.batch_episodes = 3;
        tc.n_prompts = 1;
        tc.n_queries = 1;
        tc.seed = seed;
        tc.mode = episodic::AblationMode::bt;  // plain (unweighted) loss in the log
        auto log = episodic::train(params, one, tc);

        double tail = 0;
        for (size_t i = log.size() - 25; i < log.size(); ++i) tail += log[i].loss;
        tail /= 25.0;

        episodic::EvalConfig ec;
        ec.task = TaskId::PE;
        ec.shots = 1;
        ec.queries_per_class = 4;
        ec.mode = "ID";
        ec.split = "train";
        ec.seed = seed;
        double pck = episodic::evaluate(params, one, ec).macro;

        if (tail < 0.05 && pck == 100.0) ++passed;
        per_seed += fmt(" [loss %.3f, pck %.0f]", tail, pck);
    }
    double el = secs_since(t0);
    return {passed >= 2 && el < 300.0, std::to_string(passed) + "/3 seeds passed," +
                                           per_seed + fmt(" %.0fs (< 300s)", el)};
}

// ---- 7 & 8. trend experiments (shared training runs) ------------------------

struct TrendResults {
    std::vector<double> un10, ad10, ad1, base10;
    double awlbt_secs = 0;
    bool ready = false;
};

TrendResults g_trend;

episodic::AdaptConfig trend_adapt_cfg(std::uint64_t seed) {
    episodic::AdaptConfig a;
    a.steps = 100;
    a.lr = 5e-4;
    a.seed = seed;
    return a;
}

void run_trend_experiments() {
    if (g_trend.ready) return;
    synthdata::DatasetSpec dspec;
    dspec.samples_per_class = 16;
    dspec.train_classes = 4;
    dspec.val_classes = 0;
    dspec.test_classes = 2;
    auto ds = synthdata::generate_dataset(dspec, 200);

    auto t0 = Clock::now();
    for (std::uint64_t s = 0; s < 3; ++s) {
        std::uint64_t seed = 300 + s;

        model::ModelConfig mcfg;  // default, per-task bias banks
        auto params = model::init_params<float>(mcfg, seed);
        episodic::TrainConfig tc;
        tc.total_iters = 2000;
        tc.warmup_iters = 100;
        tc.base_lr = 1e-3;
        tc.n_prompts = 2;
        tc.n_queries = 1;
        tc.seed = seed;
        tc.mode = episodic::AblationMode::awl_bt;
        episodic::train(params, ds, tc);

        episodic::EvalConfig ec;
        ec.task = TaskId::PE;
        ec.queries_per_class = 4;
        ec.mode = "OOD";
        ec.split = "test";
        ec.seed = seed;
        ec.adapt_cfg = trend_adapt_cfg(seed);

        ec.shots = 10;
        ec.adapted = false;
        g_trend.un10.push_back(episodic::evaluate(params, ds, ec).macro);
        ec.adapted = true;
        g_trend.ad10.push_back(episodic::evaluate(params, ds, ec).macro);
        ec.shots = 1;
        g_trend.ad1.push_back(episodic::evaluate(params, ds, ec).macro);
    }
    g_trend.awlbt_secs = secs_since(t0);

    for (std::uint64_t s = 0; s < 3; ++s) {
        std::uint64_t seed = 300 + s;
        model::ModelConfig mcfg;
        mcfg.task_biases = false;  // baseline: one bias set, no uncertainty weighting
        auto params = model::init_params<float>(mcfg, seed);
        episodic::TrainConfig tc;
        tc.total_iters = 2000;
        tc.warmup_iters = 100;
        tc.base_lr = 1e-3;
        tc.n_prompts = 2;
        tc.n_queries = 1;
        tc.seed = seed;
        tc.mode = episodic::AblationMode::baseline;
        episodic::train(params, ds, tc);

        episodic::EvalConfig ec;
        ec.task = TaskId::PE;
        ec.queries_per_class = 4;
        ec.mode = "OOD";
        ec.split = "test";
        ec.seed = seed;
        ec.shots = 10;
        ec.adapted = true;
        ec.adapt_cfg = trend_adapt_cfg(seed);
        g_trend.base10.push_back(episodic::evaluate(params, ds, ec).macro);
    }
    g_trend.ready = true;
}

double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / v.size();
}

Outcome criterion7() {
    run_trend_experiments();
    double u = mean(g_trend.un10), a10 = mean(g_trend.ad10), a1 = mean(g_trend.ad1);
    bool ok = a10 >= u + 5.0 && a10 >= a1 && g_trend.awlbt_secs < 1800.0;
    return {ok, fmt("PCK@0.2 unadapted-10 %.1f, adapted-10 %.1f, adapted-1 %.1f", u,
                    a10, a1) +
                    fmt(", %.0fs (< 1800s)", g_trend.awlbt_secs)};
}

Outcome criterion8() {
    run_trend_experiments();
    double a10 = mean(g_trend.ad10), b10 = mean(g_trend.base10);

    // wall-clock: bias-only adaptation must beat full fine-tuning
    synthdata::DatasetSpec dspec;
    dspec.samples_per_class = 16;
    dspec.train_classes = 4;
    dspec.val_classes = 0;
    dspec.test_classes = 2;
    auto ds = synthdata::generate_dataset(dspec, 200);
    model::ModelConfig mcfg;
    auto base = model::init_params<float>(mcfg, 300);
    RngStream rng(301, "acceptance.clock");
    auto ep = episodic::sample_episode(ds, mcfg, TaskId::PE, 10, 1, rng, "test", 1.5);

    episodic::AdaptConfig acfg;
    acfg.steps = 10;
    acfg.lr = 1e-3;
    acfg.seed = 1;

    auto bt_params = base.cast<float>();
    auto t_bt = Clock::now();
    episodic::adapt(bt_params, ep.prompts, TaskId::PE, acfg);
    double bt_secs = secs_since(t_bt);

    auto ft_params = base.cast<float>();
    acfg.full_scope = true;
    auto t_ft = Clock::now();
    episodic::adapt(ft_params, ep.prompts, TaskId::PE, acfg);
    double ft_secs = secs_since(t_ft);

    bool ok = a10 >= b10 && bt_secs < ft_secs;
    return {ok, fmt("awl+bt %.1f vs baseline %.1f PCK; adapt bt %.2fs vs ft %.2fs",
                    a10, b10, bt_secs, ft_secs)};
}

// ---- 9. parameter accounting ------------------------------------------------

Outcome criterion9() {
    model::ModelConfig cfg;  // default model
    auto params = model::init_params<float>(cfg, 0);
    double ratio = 100.0 * static_cast<double>(params.task_specific_numel()) /
                   static_cast<double>(params.shared_numel());

    // cross-check against the CLI's inspect report when the binary is known
    double cli_ratio = ratio;
    if (const char* bin = std::getenv("UNIAP_CLI")) {
        fs::path dir = fs::temp_directory_path() / "uniap_acceptance_inspect";
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(dir / "d.json") << R"({"train": {"ablation_mode": "awl_bt"}})";
        fs::path out = dir / "out.txt";
        std::string cmd = "cd " + dir.string() + " && " + bin +
                          " inspect --config d.json > " + out.string() + " 2>&1";
        if (std::system(cmd.c_str()) == 0) {
            std::ifstream is(out);
            std::stringstream ss;
            ss << is.rdbuf();
            auto text = ss.str();
            auto pos = text.find("task-specific/shared:");
            if (pos != std::string::npos)
                cli_ratio = std::stod(text.substr(pos + 21));
        }
        fs::remove_all(dir);
    }
    bool ok = ratio < 2.0 && cli_ratio < 2.0;
    return {ok, fmt("task-specific/shared %.3f%% (inspect: %.3f%%), bound 2%%", ratio,
                    cli_ratio)};
}

// ---- 10. determinism & persistence ------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Outcome criterion10() {
    auto cfg = testutil::tiny_config();
    synthdata::DatasetSpec dspec;
    dspec.samples_per_class = 6;
    dspec.canvas = 24;
    auto ds = synthdata::generate_dataset(dspec, 11);

    fs::path dir = fs::temp_directory_path() / "uniap_acceptance_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);

    auto run_once = [&](const fs::path& out) {
        auto params = model::init_params<float>(cfg, 4);
        episodic::TrainConfig tc;
        tc.total_iters = 30;
        tc.warmup_iters = 5;
        tc.seed = 4;
        episodic::train(params, ds, tc);
        io::CheckpointMeta meta;
        meta.config_hash = 0xACCE;
        meta.iteration = 30;
        io::save_checkpoint(out.string(), params, meta);
        return params;
    };
    auto params = run_once(dir / "a.ckpt");
    run_once(dir / "b.ckpt");
    bool identical = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");

    io::CheckpointMeta meta;
    auto loaded = io::load_checkpoint((dir / "a.ckpt").string(), cfg, 0xACCE, &meta);
    bool roundtrip = meta.iteration == 30;
    auto f1 = episodic::flatten_params(params);
    auto f2 = episodic::flatten_params(loaded);
    for (size_t i = 0; i < f1.size() && roundtrip; ++i) {
        const auto& a = f1.all()[i].tensor;
        const auto& b = f2.at(f1.all()[i].name).tensor;
        roundtrip = a.numel() == b.numel() &&
                    std::memcmp(a.value().data(), b.value().data(),
                                a.numel() * sizeof(float)) == 0;
    }
    fs::remove_all(dir);
    return {identical && roundtrip,
            fmt("byte-identical=%g, round-trip bit-exact=%g", identical ? 1.0 : 0.0,
                roundtrip ? 1.0 : 0.0)};
}

}  // namespace

int main() {
    struct Gate {
        int id;
        const char* label;
        std::function<Outcome()> fn;
    };
    const std::vector<Gate> gates = {
        {1, "gradient fidelity", criterion1},
        {2, "matching invariants", criterion2},
        {3, "loss stationarity", criterion3},
        {4, "bias isolation & recall", criterion4},
        {5, "metric oracles", criterion5},
        {6, "overfit smoke", criterion6},
        {7, "few-shot trend", criterion7},
        {8, "ablation trend", criterion8},
        {9, "parameter accounting", criterion9},
        {10, "determinism & persistence", criterion10},
    };

    int failures = 0;
    for (const auto& g : gates) {
        auto t0 = Clock::now();
        Outcome o;
        try {
            o = g.fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.ok) ++failures;
        std::printf("%s criterion %2d (%s): %s [%.0fs]\n", o.ok ? "PASS" : "FAIL",
                    g.id, g.label, o.detail.c_str(), secs_since(t0));
        std::fflush(stdout);
    }
    std::printf("%d/10 criteria passed\n", 10 - failures);
    return failures == 0 ? 0 : 1;
}
