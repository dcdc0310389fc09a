#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advperc/labels.hpp"
#include "advperc/tensor.hpp"

namespace advperc {

/// A frame pair with exact ground truth for the current frame.
struct Sample {
  std::uint64_t seed = 0;
  Tensor frame_prev;  // [1,3,H,W] in [0,1]
  Tensor frame_curr;
  std::vector<double> gt_distance;  // H*W in [0,1], 0 nearest
  std::vector<int> gt_seg;          // H*W, seg::*
  std::vector<int> gt_motion;       // H*W, motion::*
  std::vector<Box> gt_boxes;
  /// Visible object id per pixel of frame_curr, -1 for background. Index into gt_boxes.
  std::vector<int> instance;

  std::size_t height() const { return frame_curr.dim(2); }
  std::size_t width() const { return frame_curr.dim(3); }
};

struct IntRange {
  int min = 0;
  int max = 0;
};

struct SceneParams {
  std::size_t size = 64;
  IntRange object_count{2, 5};  // vehicles, pedestrians and riders
  IntRange prop_count{0, 2};    // traffic signs and lights
  IntRange object_size{6, 16};  // px, longer side
  double dynamic_fraction = 0.5;
  IntRange dx{-4, 4};
  IntRange dy{-1, 1};
  double texture_scale = 6.0;      // px per background texture cell
  double noise_amplitude = 0.02;   // appearance noise attached to surfaces
  double frame_noise = 0.0;        // optional per-frame photometric noise

  /// Throws std::invalid_argument when a range is degenerate or out of domain.
  void validate() const;
};

Sample generate_scene(const SceneParams& params, std::uint64_t seed);

int horizon_row(std::size_t size);
/// Ground-plane distance of a background pixel row: 1 at and above the horizon, 0 at the bottom.
double background_distance(int row, std::size_t size);

/// Ground-truth cross-consistency checks; empty when the sample is valid.
std::vector<std::string> sample_violations(const Sample& sample);

struct Dataset {
  SceneParams params;
  std::uint64_t seed = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Test split takes floor(n * test_fraction) samples from the end.
Dataset generate_dataset(std::size_t n, const SceneParams& params, std::uint64_t seed,
                         double test_fraction = 1.0 / 6.0);

/// Per-sample seed, a pure function of the dataset seed and index.
std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index);

/// Directory layout: manifest.json plus one sample_XXXXX.bin per sample.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void save_sample(const Sample& sample, const std::filesystem::path& file);
Sample load_sample(const std::filesystem::path& file);

}  // namespace advperc
