#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "advperc/labels.hpp"
#include "advperc/tensor.hpp"

namespace advperc {

struct ModelConfig {
  std::size_t input_size = 64;
  std::vector<std::size_t> encoder_channels{16, 32, 64};
  std::size_t seg_classes = seg::kNumClasses;
  std::size_t det_classes = det::kNumClasses;
  std::size_t det_grid = 8;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct ConvLayer {
  Tensor weight;  // [K, C, k, k]
  Tensor bias;    // [K]
  int stride = 1;
  int padding = 1;
};

/// Upsample-concat-conv decoder ending in a head conv at half resolution.
struct DenseDecoder {
  std::vector<ConvLayer> blocks;
  ConvLayer head;
};

struct Model {
  ModelConfig config;
  std::vector<ConvLayer> encoder;
  DenseDecoder distance;
  DenseDecoder segmentation;
  DenseDecoder motion;
  std::vector<ConvLayer> detection;

  /// Every weight and bias with a stable name, in checkpoint order.
  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<std::pair<std::string, const Tensor*>> parameters() const;
  std::size_t parameter_count() const;
  /// Copy whose parameters are gradient leaves.
  Model trainable() const;
  /// Copy whose parameters take no part in differentiation.
  Model frozen() const;
};

/// He-initialised model, deterministic in config.seed.
Model make_model(const ModelConfig& config);

/// The four task predictions for one frame pair.
struct TaskOutputs {
  Tensor distance;      // [1,1,H,W] sigmoid, 0 nearest
  Tensor segmentation;  // [1,7,H,W] channel softmax
  Tensor motion;        // [1,2,H,W] channel softmax, static/dynamic
  Tensor detection;     // [1,10,G,G] objectness, box, class probabilities
};

/// Encoder activations of one frame, shallow to deep.
using Features = std::vector<Tensor>;

Features encode(const Model& model, const Tensor& frame);
/// Decoders given the previous frame's features and the current frame.
TaskOutputs decode(const Model& model, const Features& prev, const Features& curr);
TaskOutputs forward(const Model& model, const Tensor& frame_prev, const Tensor& frame_curr);

/// Throws when any TaskOutputs range or normalisation invariant fails.
void check_outputs(const TaskOutputs& outputs, double tolerance = 1e-5);

/// Per-pixel argmax over channels of a [1,C,H,W] tensor.
std::vector<int> argmax_channels(const Tensor& probs);

/// Cells with objectness >= threshold as image-normalised boxes scored by objectness.
std::vector<Box> decode_detections(const Tensor& detection, double threshold = 0.5);

/// JSON container: config, then every parameter's name, shape and flat data.
void save_checkpoint(const Model& model, const std::filesystem::path& file);
Model load_checkpoint(const std::filesystem::path& file);
/// Throws when the stored config differs from `expected`.
Model load_checkpoint(const std::filesystem::path& file, const ModelConfig& expected);

}  // namespace advperc
