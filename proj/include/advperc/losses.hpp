#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "advperc/labels.hpp"
#include "advperc/ops.hpp"
#include "advperc/tensor.hpp"

namespace advperc {

struct Sample;
struct TaskOutputs;

/// Mean over classes present in `labels` of the Lovász extension of the
/// Jaccard loss on per-pixel errors |[y == c] - p_c|. probs is [1,C,H,W].
Tensor lovasz_softmax(const Tensor& probs, std::span<const int> labels);

/// Mean over pixels of -(1 - p_t)^gamma log(p_t), p_t floored at kProbFloor.
Tensor focal_loss(const Tensor& probs, std::span<const int> labels, double gamma);

/// Elementwise binary cross-entropy of probabilities against targets in [0,1].
Tensor binary_cross_entropy(const Tensor& probs, std::span<const double> targets,
                            ops::Reduction reduction = ops::Reduction::mean);

/// Regression and class targets of one positive grid cell.
struct CellTarget {
  std::size_t row = 0, col = 0;
  double tx = 0, ty = 0, w = 0, h = 0;
  int cls = 0;
};

/// Center-in-cell assignment; a later box replaces an earlier one in the same cell.
std::vector<CellTarget> assign_cells(std::span<const Box> boxes, std::size_t grid);

/// Objectness BCE averaged over all cells, plus box squared error and class
/// cross-entropy summed over positive cells and divided by max(1, positives).
/// pred is the [1,10,G,G] detection output.
Tensor detection_loss(const Tensor& pred, std::span<const Box> gt_boxes);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double learning_rate = 1.0;
  /// distance, segmentation, motion, detection; normalised to sum 1 on use.
  std::array<double, 4> loss_weights{1, 3, 1, 2};
  double focal_gamma = 2.0;
  /// Batch gradients whose global L2 norm exceeds this are rescaled to it; 0 disables.
  /// Typical norms are about 1; rare spikes of 5-30 otherwise wreck training at lr 1.
  double max_grad_norm = 2.0;
  std::uint64_t seed = 1;

  void validate() const;
  std::array<double, 4> normalized_weights() const;
};

struct LossTerms {
  Tensor total;
  /// Unweighted per-task values in Task order.
  std::array<double, 4> task{};
};

/// Weighted sum of distance MSE, segmentation Lovász, motion Lovász + focal
/// and detection loss. Throws naming the task whose term is non-finite.
LossTerms total_train_loss(const TaskOutputs& outputs, const Sample& sample, const TrainConfig& cfg);

}  // namespace advperc
