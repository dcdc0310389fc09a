#include "advperc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace advperc {

double rmse(std::span<const double> pred, std::span<const double> ref) {
  if (pred.size() != ref.size() || pred.empty()) {
    throw std::invalid_argument("rmse: size mismatch " + std::to_string(pred.size()) + " vs " +
                                std::to_string(ref.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - ref[i]) * (pred[i] - ref[i]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

double miou(std::span<const int> pred, std::span<const int> ref, int num_classes) {
  if (pred.size() != ref.size()) throw std::invalid_argument("miou: size mismatch");
  if (num_classes <= 0) throw std::invalid_argument("miou: num_classes must be positive");
  std::vector<std::size_t> inter(static_cast<std::size_t>(num_classes), 0), uni(inter);
  auto check = [&](int l) {
    if (l < 0 || l >= num_classes) throw std::invalid_argument("miou: label " + std::to_string(l) + " out of range");
    return static_cast<std::size_t>(l);
  };
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = check(pred[i]), r = check(ref[i]);
    if (p == r) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[r];
    }
  }
  double acc = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < uni.size(); ++c) {
    if (uni[c] == 0) continue;
    ++present;
    acc += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
  }
  return present == 0 ? 1.0 : acc / static_cast<double>(present);
}

double mean_ap(std::span<const Box> predictions, std::span<const Box> ground_truth, double iou_threshold) {
  for (const auto& b : predictions) {
    validate_box(b);
    if (!(b.score >= 0.0 && b.score <= 1.0)) throw std::invalid_argument("mean_ap: score outside [0,1]");
  }
  for (const auto& b : ground_truth) validate_box(b);
  if (ground_truth.empty()) return predictions.empty() ? 1.0 : 0.0;

  double total = 0.0;
  int classes = 0;
  for (int cls = 0; cls < det::kNumClasses; ++cls) {
    std::vector<const Box*> gts, preds;
    for (const auto& b : ground_truth) {
      if (b.cls == cls) gts.push_back(&b);
    }
    if (gts.empty()) continue;
    ++classes;
    for (const auto& b : predictions) {
      if (b.cls == cls) preds.push_back(&b);
    }
    std::stable_sort(preds.begin(), preds.end(), [](const Box* a, const Box* b) { return a->score > b->score; });

    std::vector<bool> matched(gts.size(), false);
    std::vector<double> recall, precision;
    std::size_t tp = 0;
    for (std::size_t k = 0; k < preds.size(); ++k) {
      double best = iou_threshold;
      std::size_t best_gt = gts.size();
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (matched[g]) continue;
        const double iou = box_iou(*preds[k], *gts[g]);
        if (iou >= best) {
          if (best_gt == gts.size() || iou > best) {
            best = iou;
            best_gt = g;
          }
        }
      }
      if (best_gt != gts.size()) {
        matched[best_gt] = true;
        ++tp;
      }
      recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
      precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    }
    // all-point interpolation: area under the monotone precision envelope
    for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t k = 0; k < recall.size(); ++k) {
      ap += (recall[k] - prev_recall) * precision[k];
      prev_recall = recall[k];
    }
    total += ap;
  }
  return total / static_cast<double>(classes);
}

double TaskMetrics::get(Task task) const {
  switch (task) {
    case Task::distance: return distance_rmse;
    case Task::segmentation: return seg_miou;
    case Task::motion: return motion_miou;
    case Task::detection: return det_map;
  }
  throw std::invalid_argument("TaskMetrics::get: unknown task");
}

TaskMetrics evaluate(const TaskOutputs& outputs, const TaskOutputs& clean, const Sample& sample) {
  TaskMetrics m;
  m.distance_rmse = rmse(outputs.distance.data(), clean.distance.data());
  m.seg_miou = miou(argmax_channels(outputs.segmentation), sample.gt_seg, seg::kNumClasses);
  m.motion_miou = miou(argmax_channels(outputs.motion), sample.gt_motion, motion::kNumClasses);
  m.det_map = mean_ap(decode_detections(outputs.detection), sample.gt_boxes);
  return m;
}

TaskMetrics evaluate(const Model& model, const Sample& sample) {
  const TaskOutputs out = forward(model, sample.frame_prev, sample.frame_curr);
  return evaluate(out, out, sample);
}

}  // namespace advperc
