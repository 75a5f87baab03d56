#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "uniap/metrics.hpp"
#include "uniap/rng.hpp"
#include "uniap/synthdata.hpp"

using namespace uniap::metrics;
using uniap::numkit::RngStream;

TEST_CASE("extract_keypoint: one-hot, tie rule, flat flag") {
    std::vector<float> hm(8 * 8, 0.0f);
    hm[5 * 8 + 7] = 1.0f;
    auto kp = extract_keypoint(hm, 8, 8);
    CHECK(kp.x == 7.0);
    CHECK(kp.y == 5.0);
    CHECK(kp.confidence == 1.0f);
    CHECK_FALSE(kp.flat);

    std::vector<float> tie(4 * 4, 0.0f);
    tie[3] = 2.0f;
    tie[9] = 2.0f;  // equal maxima at flat indices 3 and 9 -> pick 3
    auto t = extract_keypoint(tie, 4, 4);
    CHECK(t.x == 3.0);
    CHECK(t.y == 0.0);

    std::vector<float> flat(4 * 4, 0.5f);
    auto f = extract_keypoint(flat, 4, 4);
    CHECK(f.flat);
    CHECK(f.x == 0.0);
    CHECK(f.y == 0.0);
}

TEST_CASE("extract_keypoint: recovers the rasterizer's peak exactly") {
    auto hm = uniap::synthdata::rasterize_keypoint_heatmap(11.0, 4.0, 1.5, 32);
    auto kp = extract_keypoint(hm, 32, 32);
    CHECK(kp.x == 11.0);
    CHECK(kp.y == 4.0);
}

TEST_CASE("pck: threshold boundary at sigma*max(bw,bh)") {
    std::vector<std::array<double, 2>> gts = {{50.0, 50.0}};
    std::vector<bool> vis = {true};
    // bbox 100x100, sigma 0.2 -> radius 20
    CHECK(pck({{69.0, 50.0, 1.0f, false}}, gts, vis, 100, 100, 0.2) == 100.0);
    CHECK(pck({{71.0, 50.0, 1.0f, false}}, gts, vis, 100, 100, 0.2) == 0.0);
}

TEST_CASE("pck: exact match, partial credit, and zero-visible error") {
    std::vector<std::array<double, 2>> gts = {{1, 1}, {2, 2}, {3, 3}, {4, 4}};
    std::vector<KeypointPrediction> preds = {
        {1, 1, 1, false}, {2, 2, 1, false}, {9, 9, 1, false}, {9, 1, 1, false}};
    std::vector<bool> vis(4, true);
    CHECK(pck(preds, gts, vis, 10, 10, 0.05) == 50.0);
    CHECK(pck(preds, preds.size() == 4 ? gts : gts, vis, 10, 10, 10.0) == 100.0);
    CHECK_THROWS_AS(pck(preds, gts, std::vector<bool>(4, false), 10, 10, 0.2),
                    std::invalid_argument);
    CHECK_THROWS_AS(pck(preds, gts, vis, 0, 0, 0.2), std::invalid_argument);
}

TEST_CASE("pck: invariant under joint translation") {
    RngStream rng(1, "pck.shift");
    std::vector<std::array<double, 2>> gts;
    std::vector<KeypointPrediction> preds;
    std::vector<bool> vis;
    for (int i = 0; i < 10; ++i) {
        gts.push_back({rng.uniform(0, 20), rng.uniform(0, 20)});
        preds.push_back({rng.uniform(0, 20), rng.uniform(0, 20), 1.0f, false});
        vis.push_back(true);
    }
    double base = pck(preds, gts, vis, 20, 15, 0.2);
    for (auto& g : gts) {
        g[0] += 100;
        g[1] += 50;
    }
    for (auto& p : preds) {
        p.x += 100;
        p.y += 50;
    }
    CHECK(pck(preds, gts, vis, 20, 15, 0.2) == base);
}

TEST_CASE("miou: identical, complementary, and half-overlap masks") {
    std::vector<float> full(16, 1.0f), none(16, 0.0f);
    CHECK(miou(full, full) == 1.0);
    CHECK(pixel_accuracy(full, full) == 100.0);
    CHECK(miou(full, none) == 0.0);

    // pred = left half of a 4x4, gt = everything
    std::vector<float> left(16, 0.0f);
    for (int i = 0; i < 4; ++i) left[i * 4] = left[i * 4 + 1] = 1.0f;
    // IoU_fg = 8/16 = 0.5; IoU_bg = 0/8 = 0 -> mIoU 0.25
    CHECK(miou(left, full) == doctest::Approx(0.25));
}

TEST_CASE("miou: class empty in both masks counts as IoU 1") {
    std::vector<float> none(9, 0.0f);
    CHECK(miou(none, none) == 1.0);  // fg empty-empty -> 1, bg identical -> 1
}

TEST_CASE("miou / pixel accuracy: brute-force oracle on 100 random 8x8 masks") {
    RngStream rng(2, "miou.oracle");
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> pred(64), gt(64);
        for (int i = 0; i < 64; ++i) {
            pred[i] = static_cast<float>(rng.uniform());
            gt[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
        }
        // independent pixel-count oracle
        int i00 = 0, i01 = 0, i10 = 0, i11 = 0;
        for (int i = 0; i < 64; ++i) {
            bool p = pred[i] >= 0.5f, g = gt[i] >= 0.5f;
            if (p && g) ++i11;
            else if (p && !g) ++i10;
            else if (!p && g) ++i01;
            else ++i00;
        }
        double iou_fg = (i11 + i10 + i01) == 0
                            ? 1.0
                            : double(i11) / double(i11 + i10 + i01);
        double iou_bg = (i00 + i10 + i01) == 0
                            ? 1.0
                            : double(i00) / double(i00 + i10 + i01);
        CHECK(miou(pred, gt) == doctest::Approx(0.5 * (iou_fg + iou_bg)).epsilon(1e-12));
        CHECK(pixel_accuracy(pred, gt) ==
              doctest::Approx(100.0 * (i11 + i00) / 64.0).epsilon(1e-12));
        CHECK(miou(pred, gt) >= 0.0);
        CHECK(miou(pred, gt) <= 1.0);
    }
}

TEST_CASE("miou: symmetric in pred and gt after thresholding") {
    RngStream rng(3, "miou.sym");
    std::vector<float> a(64), b(64);
    for (int i = 0; i < 64; ++i) {
        a[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
        b[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    }
    CHECK(miou(a, b) == miou(b, a));
}

TEST_CASE("classification_accuracy: boundary rule and hand counts") {
    CHECK(classification_accuracy({5.0, -5.0, 3.0}, {1, 0, 1}) == 100.0);
    // score 0 -> sigmoid exactly 0.5 -> predicted 1 under the >= rule
    CHECK(classification_accuracy({0.0, 0.0}, {0, 0}) == 0.0);
    CHECK(classification_accuracy({5.0, 5.0}, {1, 0}) == 50.0);
    CHECK_THROWS_AS(classification_accuracy({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(classification_accuracy({1.0}, {1, 0}), std::invalid_argument);
}

TEST_CASE("MetricReport: macro equals the mean of per-class values") {
    MetricReport r;
    r.metric = "pck@0.2";
    r.per_class = {{0, 10.0}, {1, 20.0}, {2, 60.0}};
    r.shots = 5;
    r.mode = "OOD";
    r.seed = 9;
    r.finalize();
    CHECK(r.macro == doctest::Approx(30.0).epsilon(1e-9));

    auto csv = r.to_csv("seed=9 config=abc version=x");
    CHECK(csv.find("# seed=9") != std::string::npos);
    CHECK(csv.find("class,metric,value,shots,mode,seed") != std::string::npos);
    CHECK(csv.find("0,pck@0.2,10,5,OOD,9") != std::string::npos);
    CHECK(csv.find("macro,pck@0.2,30,5,OOD,9") != std::string::npos);
    auto js = r.to_json();
    CHECK(js.find("\"macro\"") != std::string::npos);
}
