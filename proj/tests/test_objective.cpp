#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "uniap/objective.hpp"

using namespace uniap;
using namespace uniap::objective;
using numkit::RngStream;
using numkit::Tensor;

namespace {

Prediction<float> dense_pred(TaskId task, const Tensor<float>& logits) {
    Prediction<float> p;
    p.task = task;
    p.dense = logits;
    return p;
}

Prediction<float> cls_pred(float logit) {
    Prediction<float> p;
    p.task = TaskId::CLS;
    p.score = Tensor<float>::scalar(logit);
    return p;
}

}  // namespace

TEST_CASE("task_loss: logit 0 against target 0.5 gives ln 2") {
    auto logits = Tensor<float>::zeros({1, 1, 4, 4});
    auto target = Tensor<float>::full({1, 1, 4, 4}, 0.5f);
    auto l = task_loss(dense_pred(TaskId::SS, logits), target, TaskId::SS);
    CHECK(l.value.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("task_loss: saturated correct prediction is essentially zero") {
    auto logits = Tensor<float>::full({1, 1, 2, 2}, 25.0f);
    auto target = Tensor<float>::full({1, 1, 2, 2}, 1.0f);
    auto l = task_loss(dense_pred(TaskId::PE, logits), target, TaskId::PE);
    CHECK(l.value.item() < 1e-8f);
    CHECK(l.value.item() >= 0.0f);
}

TEST_CASE("task_loss: single CLS term, logit 0 target 1 gives ln 2") {
    auto l = task_loss(cls_pred(0.0f), Tensor<float>::scalar(1.0f), TaskId::CLS);
    CHECK(l.value.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("task_loss: rejects out-of-range targets and shape mismatch") {
    auto logits = Tensor<float>::zeros({1, 1, 2, 2});
    CHECK_THROWS_AS(task_loss(dense_pred(TaskId::SS, logits),
                              Tensor<float>::full({1, 1, 2, 2}, 1.5f), TaskId::SS),
                    std::invalid_argument);
    CHECK_THROWS_AS(task_loss(dense_pred(TaskId::SS, logits),
                              Tensor<float>::zeros({1, 1, 3, 3}), TaskId::SS),
                    numkit::ShapeError);
}

TEST_CASE("combined_loss: L=[1,1], s=[0,0] -> 2.0, and missing s throws") {
    auto cfg = testutil::tiny_config();
    auto params = model::init_params<float>(cfg, 1);
    std::vector<TaskLoss<float>> losses;
    for (auto t : {TaskId::PE, TaskId::SS}) {
        TaskLoss<float> l;
        l.task = t;
        l.value = Tensor<float>::scalar(1.0f);
        l.count = 1;
        losses.push_back(l);
    }
    CHECK(combined_loss(losses, params).item() == doctest::Approx(2.0).epsilon(1e-6));

    cfg.tasks = {TaskId::PE};
    auto params_pe = model::init_params<float>(cfg, 1);
    CHECK_THROWS_AS(combined_loss(losses, params_pe), std::invalid_argument);
}

TEST_CASE("combined_loss: gradient descent on s converges to ln L") {
    auto cfg = testutil::tiny_config();
    for (double L : {0.5, 1.0, std::exp(1.0), 5.0}) {
        auto params = model::init_params<float>(cfg, 2);
        auto& s = params.uncertainty.at("uncertainty.PE").tensor;
        numkit::Adam<float> opt;
        for (int step = 0; step < 5000; ++step) {
            TaskLoss<float> l;
            l.task = TaskId::PE;
            l.value = Tensor<float>::scalar(static_cast<float>(L));
            l.count = 1;
            auto total = combined_loss<float>({l}, params);
            params.uncertainty.zero_grad();
            numkit::backward(total);
            opt.step(params.uncertainty, 0.01,
                     std::vector<bool>(params.uncertainty.size(), true));
            if (std::abs(s.value()[0] - std::log(L)) < 1e-4) break;
        }
        CHECK(s.value()[0] == doctest::Approx(std::log(L)).epsilon(0).scale(1).epsilon(1e-3));
        // at the stationary point the per-task contribution is 1 + ln L
        TaskLoss<float> l;
        l.task = TaskId::PE;
        l.value = Tensor<float>::scalar(static_cast<float>(L));
        l.count = 1;
        CHECK(combined_loss<float>({l}, params).item() ==
              doctest::Approx(1.0 + std::log(L)).epsilon(1e-3));
    }
}

TEST_CASE("combined_loss: increasing s strictly decreases the effective weight") {
    auto cfg = testutil::tiny_config();
    auto params = model::init_params<float>(cfg, 3);
    auto& s = params.uncertainty.at("uncertainty.SS").tensor;
    double prev = std::numeric_limits<double>::infinity();
    for (float sv : {-1.0f, 0.0f, 1.0f, 2.0f}) {
        s.mutable_value()[0] = sv;
        double w = std::exp(-static_cast<double>(sv));
        CHECK(w < prev);
        prev = w;
        TaskLoss<float> l;
        l.task = TaskId::SS;
        l.value = Tensor<float>::scalar(3.0f);
        l.count = 1;
        CHECK(combined_loss<float>({l}, params).item() ==
              doctest::Approx(w * 3.0 + sv).epsilon(1e-5));
    }
}

TEST_CASE("episode_objective: single query with s=0 equals the task loss") {
    auto cfg = testutil::tiny_config();
    auto params = model::init_params<float>(cfg, 4);
    RngStream rng(5, "eo");
    EpisodeBatch<float> ep;
    ep.task = TaskId::SS;
    ep.prompts = {{testutil::random_tensor<float>({3, 16, 16}, rng, 0.3),
                   testutil::random_tensor<float>({1, 16, 16}, rng, 0.3)}};
    ep.query_images = {testutil::random_tensor<float>({3, 16, 16}, rng, 0.3)};
    ep.query_targets = {Tensor<float>::full({1, 1, 16, 16}, 1.0f)};

    auto weighted = episode_objective(params, ep, true).item();
    auto plain = episode_objective(params, ep, false).item();
    CHECK(weighted == doctest::Approx(plain).epsilon(1e-6));  // s initialized to 0

    // duplicated query leaves the mean objective unchanged
    ep.query_images.push_back(ep.query_images[0]);
    ep.query_targets.push_back(ep.query_targets[0]);
    CHECK(episode_objective(params, ep, false).item() ==
          doctest::Approx(plain).epsilon(1e-6));

    EpisodeBatch<float> empty;
    empty.task = TaskId::SS;
    empty.prompts = ep.prompts;
    CHECK_THROWS_AS(episode_objective(params, empty), std::invalid_argument);
}

TEST_CASE("episode_objective: toy-model gradients match finite differences") {
    auto cfg = testutil::tiny_config();
    cfg.blocks = 1;
    cfg.hierarchies = 1;
    auto params = model::init_params<double>(cfg, 6);
    RngStream rng(7, "eo.fd");

    EpisodeBatch<double> ep;
    ep.task = TaskId::SS;
    ep.prompts = {{testutil::random_tensor<double>({3, 16, 16}, rng, 0.3),
                   testutil::random_tensor<double>({1, 16, 16}, rng, 0.3)}};
    ep.query_images = {testutil::random_tensor<double>({3, 16, 16}, rng, 0.3)};
    ep.query_targets = {Tensor<double>::full({1, 1, 16, 16}, 1.0)};

    numkit::ParamSet<double> flat;
    for (auto& p : params.shared.all()) flat.add(p.name, p.kind, p.tensor);
    for (auto& p : params.bank(TaskId::SS).all())
        flat.add("bank." + p.name, p.kind, p.tensor);
    for (auto& p : params.uncertainty.all()) flat.add(p.name, p.kind, p.tensor);

    auto loss = [&]() { return episode_objective(params, ep, true); };
    flat.zero_grad();
    numkit::backward(loss());
    double err = testutil::max_rel_grad_error(
        flat, [&]() { return loss().item(); }, 1e-4, /*max_entries_per_param=*/4);
    CHECK(err < 1e-4);
}
