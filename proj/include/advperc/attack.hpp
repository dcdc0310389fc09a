#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string_view>
#include <vector>

#include "advperc/labels.hpp"
#include "advperc/metrics.hpp"
#include "advperc/model.hpp"
#include "advperc/scene.hpp"

namespace advperc {

enum class AttackMode { whitebox, blackbox };
enum class Objective { untargeted, targeted };
enum class Recombination { softmax, nes };

std::string_view to_string(AttackMode mode);
std::string_view to_string(Objective objective);
std::string_view to_string(Recombination recombination);
AttackMode attack_mode_from_string(std::string_view name);
Objective objective_from_string(std::string_view name);
Recombination recombination_from_string(std::string_view name);

struct EsConfig {
  std::size_t population = 25;
  double sigma = 0.05;
  double mu = 0.0;
  double lr = 0.001;  // NES only
  Recombination recombination = Recombination::softmax;
  /// Mirrored noise pairs; with an odd population the last candidate is the unperturbed image.
  bool antithetic = false;
};

struct AttackConfig {
  Task task = Task::segmentation;
  AttackMode mode = AttackMode::whitebox;
  Objective objective = Objective::untargeted;
  std::size_t steps = 50;
  double alpha = 0.00015;
  EsConfig es;
  std::uint64_t seed = 1;
  std::optional<double> linf_budget;
  /// Pixels with clean distance below this are "near" for the targeted distance attack.
  double near_threshold = 0.3;
  /// Amplitude of the uniform random step taken when an untargeted white-box
  /// gradient is exactly zero (the untargeted distance loss starts at a minimum).
  double escape_noise = 1e-3;

  /// Throws std::invalid_argument. alpha = 0 is accepted and yields a no-op attack.
  void validate() const;
};

/// What the attack loss compares against: the clean prediction (untargeted) or
/// a target derived from it (targeted). Only the member for `task` is filled.
struct TargetSpec {
  Task task = Task::segmentation;
  Objective objective = Objective::untargeted;
  std::vector<double> distance;    // H*W
  std::vector<int> labels;         // H*W, segmentation or motion
  std::vector<double> objectness;  // G*G in {0,1}
  /// Segmentation target only: the class relabelled void (vehicle or road).
  int relabelled_class = -1;
};

/// Clean distance map, clean argmax labels, or clean objectness thresholded at 0.5.
TargetSpec untargeted_reference(const TaskOutputs& clean, Task task);
TargetSpec make_target(const TaskOutputs& clean, const AttackConfig& cfg, std::mt19937_64& rng);
TargetSpec make_reference(const TaskOutputs& clean, const AttackConfig& cfg, std::mt19937_64& rng);

/// Sum-reduced MSE (distance), cross-entropy (segmentation, motion) or
/// objectness binary cross-entropy (detection).
Tensor attack_loss(const TaskOutputs& outputs, const TargetSpec& reference);

struct WhiteboxStep {
  Tensor image;        // next iterate
  double loss = 0.0;   // J at the input image
  TaskOutputs outputs; // predictions at the input image
  bool zero_gradient = false;
};

/// One signed gradient step on frame_curr: ascent for untargeted, descent for
/// targeted, clamped to [0,1].
WhiteboxStep whitebox_step(const Tensor& image, const Tensor& frame_prev, const Model& model,
                           const TargetSpec& reference, const AttackConfig& cfg);

/// Forward-only view of the model: returns predictions, never gradients.
class ForwardOracle {
 public:
  virtual ~ForwardOracle() = default;
  virtual TaskOutputs query(const Tensor& frame_curr) = 0;
};

/// Oracle over a model and a fixed previous frame (its features are computed once).
class ModelOracle final : public ForwardOracle {
 public:
  ModelOracle(const Model& model, const Tensor& frame_prev);
  TaskOutputs query(const Tensor& frame_curr) override;

 private:
  Model model_;
  Features prev_;
};

/// Generic ES update of `image` maximising `fitness`, which is evaluated
/// exactly es.population times on clamped candidates.
Tensor es_update(const Tensor& image, const std::function<double(const Tensor&)>& fitness, const EsConfig& es,
                 std::mt19937_64& rng);

/// ES step on frame_curr with fitness J (untargeted) or -J (targeted).
Tensor es_step(const Tensor& image, ForwardOracle& oracle, const TargetSpec& reference, const AttackConfig& cfg,
               std::mt19937_64& rng);

struct StepRecord {
  TaskMetrics metrics;
  double attack_loss = 0.0;
  double perturbation_l2 = 0.0;
};

struct AttackResult {
  std::uint64_t sample_seed = 0;
  AttackConfig config;
  TargetSpec reference;
  Tensor clean;        // frame_curr
  Tensor adversarial;  // final iterate
  Tensor perturbation; // adversarial - clean, exactly
  std::vector<StepRecord> curve;  // steps + 1 entries, entry 0 is clean
};

AttackResult run_attack(const Sample& sample, const Model& model, const AttackConfig& cfg);

/// Per-run RNG derived from the attack seed and the sample seed.
std::mt19937_64 attack_rng(const AttackConfig& cfg, std::uint64_t sample_seed);

/// clamp(0.5 + gain * perturbation).
Tensor render_perturbation(const AttackResult& result, double gain = 10.0);

/// Lossless little-endian double image container.
void write_image(const Tensor& image, const std::filesystem::path& file);
Tensor read_image(const std::filesystem::path& file);

/// Binary PPM of a [1,3,H,W] image in [0,1].
void write_ppm(const Tensor& image, const std::filesystem::path& file);
Tensor read_ppm(const std::filesystem::path& file);

}  // namespace advperc
