#include "uniap/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace uniap::metrics {

KeypointPrediction extract_keypoint(const std::vector<float>& heatmap, int height,
                                    int width) {
    if (heatmap.size() != static_cast<size_t>(height) * width)
        throw std::invalid_argument("extract_keypoint: size mismatch");
    size_t best = 0;
    for (size_t i = 1; i < heatmap.size(); ++i)
        if (heatmap[i] > heatmap[best]) best = i;
    KeypointPrediction kp;
    kp.x = static_cast<double>(best % width);
    kp.y = static_cast<double>(best / width);
    kp.confidence = heatmap[best];
    kp.flat = true;
    for (float v : heatmap)
        if (v != heatmap[0]) {
            kp.flat = false;
            break;
        }
    return kp;
}

double pck(const std::vector<KeypointPrediction>& preds,
           const std::vector<std::array<double, 2>>& gts,
           const std::vector<bool>& visible, double bbox_w, double bbox_h,
           double sigma) {
    if (preds.size() != gts.size() || preds.size() != visible.size())
        throw std::invalid_argument("pck: misaligned inputs");
    if (bbox_w <= 0 || bbox_h <= 0) throw std::invalid_argument("pck: invalid bbox");
    double thresh = sigma * std::max(bbox_w, bbox_h);
    int total = 0, correct = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (!visible[i]) continue;
        ++total;
        double dx = preds[i].x - gts[i][0];
        double dy = preds[i].y - gts[i][1];
        if (std::sqrt(dx * dx + dy * dy) <= thresh) ++correct;
    }
    if (total == 0) throw std::invalid_argument("pck: zero visible keypoints");
    return 100.0 * correct / total;
}

namespace {

struct Confusion {
    long long tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(const std::vector<float>& pred, const std::vector<float>& gt,
                    float threshold) {
    if (pred.size() != gt.size())
        throw std::invalid_argument("mask metric: shape mismatch");
    Confusion c;
    for (size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i] >= threshold;
        bool g = gt[i] >= threshold;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

}  // namespace

double miou(const std::vector<float>& pred_mask, const std::vector<float>& gt_mask,
            float threshold) {
    auto c = confusion(pred_mask, gt_mask, threshold);
    double iou_fg = (c.tp + c.fp + c.fn) == 0
                        ? 1.0
                        : static_cast<double>(c.tp) / (c.tp + c.fp + c.fn);
    double iou_bg = (c.tn + c.fp + c.fn) == 0
                        ? 1.0
                        : static_cast<double>(c.tn) / (c.tn + c.fp + c.fn);
    return 0.5 * (iou_fg + iou_bg);
}

double pixel_accuracy(const std::vector<float>& pred_mask,
                      const std::vector<float>& gt_mask, float threshold) {
    auto c = confusion(pred_mask, gt_mask, threshold);
    return 100.0 * (c.tp + c.tn) / static_cast<double>(pred_mask.size());
}

double classification_accuracy(const std::vector<double>& scores,
                               const std::vector<int>& labels, double threshold) {
    if (scores.empty()) throw std::invalid_argument("classification_accuracy: empty");
    if (scores.size() != labels.size())
        throw std::invalid_argument("classification_accuracy: misaligned inputs");
    int correct = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        double p = 1.0 / (1.0 + std::exp(-scores[i]));
        int pred = p >= threshold ? 1 : 0;
        if (pred == labels[i]) ++correct;
    }
    return 100.0 * correct / static_cast<double>(scores.size());
}

void MetricReport::finalize() {
    macro = 0;
    for (const auto& [id, v] : per_class) macro += v;
    if (!per_class.empty()) macro /= static_cast<double>(per_class.size());
}

std::string MetricReport::to_csv(const std::string& header_comment) const {
    std::ostringstream os;
    if (!header_comment.empty()) os << "# " << header_comment << "\n";
    os << "class,metric,value,shots,mode,seed\n";
    for (const auto& [id, v] : per_class)
        os << id << "," << metric << "," << v << "," << shots << "," << mode << ","
           << seed << "\n";
    os << "macro," << metric << "," << macro << "," << shots << "," << mode << ","
       << seed << "\n";
    return os.str();
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    j["metric"] = metric;
    j["macro"] = macro;
    j["shots"] = shots;
    j["mode"] = mode;
    j["seed"] = seed;
    for (const auto& [id, v] : per_class) j["per_class"][std::to_string(id)] = v;
    return j.dump(1);
}

}  // namespace uniap::metrics
