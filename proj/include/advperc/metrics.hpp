#pragma once

#include <array>
#include <span>
#include <vector>

#include "advperc/labels.hpp"
#include "advperc/model.hpp"
#include "advperc/scene.hpp"

namespace advperc {

/// sqrt(mean((pred - ref)^2)).
double rmse(std::span<const double> pred, std::span<const double> ref);

/// Mean IoU over classes present in pred or ref.
double miou(std::span<const int> pred, std::span<const int> ref, int num_classes);

/// Per-class all-point-interpolated AP at the IoU threshold, averaged over classes
/// with ground truth. Predictions are matched in descending score order to the
/// best-overlapping unmatched ground truth of their class. With no ground truth at
/// all the result is 1 when there are no predictions and 0 otherwise.
double mean_ap(std::span<const Box> predictions, std::span<const Box> ground_truth, double iou_threshold = 0.5);

struct TaskMetrics {
  double distance_rmse = 0.0;  // vs the clean prediction
  double seg_miou = 0.0;
  double motion_miou = 0.0;
  double det_map = 0.0;

  double get(Task task) const;
  bool operator==(const TaskMetrics&) const = default;
};

/// Distance against the clean prediction; segmentation, motion and detection
/// against the sample's ground truth. Detections are decoded at objectness 0.5.
TaskMetrics evaluate(const TaskOutputs& outputs, const TaskOutputs& clean, const Sample& sample);
/// evaluate() on a fresh forward pass, with clean = outputs of the sample's own frames.
TaskMetrics evaluate(const Model& model, const Sample& sample);

}  // namespace advperc
