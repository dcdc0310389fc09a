#pragma once

#include <span>
#include <vector>

#include "advperc/attack.hpp"
#include "advperc/metrics.hpp"
#include "advperc/model.hpp"
#include "advperc/scene.hpp"

namespace advperc {

struct DefenseConfig {
  double radius = 1.0;      // Gaussian sigma in pixels
  double truncation = 3.0;  // kernel half-width in sigmas

  void validate() const;
};

/// Normalised 1-D kernel of length 2 * ceil(truncation * radius) + 1.
std::vector<double> gaussian_kernel(const DefenseConfig& cfg);

/// Separable per-channel Gaussian blur of an NCHW image with symmetric
/// (edge-repeating) reflection at the border.
Tensor gaussian_blur(const Tensor& image, const DefenseConfig& cfg);

/// Metrics of the blurred (frame_prev, frame_curr) pair; distance is scored
/// against the clean, unblurred prediction.
TaskMetrics defended_metrics(const Model& model, const Sample& sample, const Tensor& frame_curr,
                             const DefenseConfig& cfg);

/// defended_metrics on each result's adversarial frame; samples[i] must be the
/// sample results[i] was produced from.
std::vector<TaskMetrics> evaluate_defense(std::span<const AttackResult> results, std::span<const Sample> samples,
                                          const Model& model, const DefenseConfig& cfg);

}  // namespace advperc
