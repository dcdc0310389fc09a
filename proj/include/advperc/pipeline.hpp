#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advperc/attack.hpp"
#include "advperc/defense.hpp"
#include "advperc/report.hpp"
#include "advperc/train.hpp"

namespace advperc {

/// Line-oriented progress sink; empty means silent.
using Log = std::function<void(const std::string&)>;

/// Raised for bad user input (configs, paths, missing artifacts), as opposed to
/// runtime or numeric failures.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DataSpec {
  std::size_t count = 600;
  std::uint64_t seed = 7;
  SceneParams scene;
};

Dataset generate_data(const DataSpec& spec, const std::filesystem::path& dir, const Log& log = {});

/// Trains from make_model(model_cfg) and writes the checkpoint plus
/// `<checkpoint stem>.history.csv` next to it.
TrainResult train_model(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const std::filesystem::path& checkpoint, const Log& log = {});

struct AttackPlan {
  AttackConfig base;                 // task/mode/objective are overridden per condition
  std::vector<Condition> conditions; // empty means all 16
  std::size_t workers = 1;
  std::optional<std::size_t> sample_limit;  // first n test samples only
  bool renders = true;                       // 10x perturbation PPMs
};

/// Runs each condition over the test split and writes, per condition,
/// `<name>/curve.csv`, `<name>/adversarial/*.bin`, `<name>/perturbation/*.bin`
/// and optionally `<name>/render/*.ppm`; `manifest.json` records configs, seeds
/// and per-condition completion. Returns the condition directories written.
std::vector<std::filesystem::path> attack_grid(const Model& model, const Dataset& dataset, const AttackPlan& plan,
                                               const std::filesystem::path& out, const Log& log = {},
                                               const std::string& checkpoint_label = {},
                                               const std::string& dataset_label = {});

/// Blurs every stored adversarial frame, appends defended rows to each curve
/// CSV (replacing earlier ones), and writes `blur.csv` with clean and
/// blurred-clean metrics for the blur-only table.
void defend(const std::filesystem::path& results, const Model& model, const Dataset& dataset, const DefenseConfig& cfg,
            std::size_t workers = 1, const Log& log = {});

struct ReportFiles {
  std::vector<std::filesystem::path> written;
};

/// Reads a results directory and writes curve statistics and plots per
/// condition, `effect_table.csv`, `blur_table.csv` (when defended) and
/// `findings.csv`. Throws ValidationError, writing nothing, when the directory
/// holds no complete condition.
ReportFiles report(const std::filesystem::path& results, const std::filesystem::path& out, const Log& log = {});

/// Finite-difference check of the summed attack losses w.r.t. frame_curr on a
/// 64x64 sample, over `coordinates` sampled input positions.
ops::GradCheckReport check_model_gradient(const Model& model, std::size_t coordinates, std::uint64_t seed);

/// Runs `fn(i)` for i in [0, n) on `workers` threads; the first exception is rethrown.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace advperc
