#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

namespace uniap::metrics {

struct KeypointPrediction {
    double x = 0, y = 0;
    float confidence = 0;
    bool flat = false;  // all-equal map, argmax defaulted to index 0
};

// Argmax decode of a single-channel map; ties break to the smallest
// row-major index.
KeypointPrediction extract_keypoint(const std::vector<float>& heatmap, int height,
                                    int width);

// Fraction (x100) of visible keypoints within sigma * max(bbox_w, bbox_h).
double pck(const std::vector<KeypointPrediction>& preds,
           const std::vector<std::array<double, 2>>& gts,
           const std::vector<bool>& visible, double bbox_w, double bbox_h,
           double sigma);

// Binary protocol: mean of foreground and background IoU. A class empty in
// both masks counts as IoU 1.
double miou(const std::vector<float>& pred_mask, const std::vector<float>& gt_mask,
            float threshold = 0.5f);

double pixel_accuracy(const std::vector<float>& pred_mask,
                      const std::vector<float>& gt_mask, float threshold = 0.5f);

// sigmoid(score) >= threshold predicts the positive class.
double classification_accuracy(const std::vector<double>& scores,
                               const std::vector<int>& labels,
                               double threshold = 0.5);

struct MetricReport {
    std::string metric;
    std::map<int, double> per_class;
    double macro = 0;
    int shots = 0;
    std::string mode;  // ID / OOD / CE
    std::uint64_t seed = 0;

    void finalize();  // macro = mean of per-class values
    std::string to_csv(const std::string& header_comment) const;
    std::string to_json() const;
};

}  // namespace uniap::metrics
