#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advperc/attack.hpp"
#include "advperc/metrics.hpp"

namespace advperc {

/// One attack condition: which task is attacked, how, and to what end.
struct Condition {
  Task task = Task::segmentation;
  AttackMode mode = AttackMode::whitebox;
  Objective objective = Objective::untargeted;

  /// "segmentation_whitebox_untargeted"
  std::string name() const;
  bool operator==(const Condition&) const = default;
};

/// The 16 conditions in table order: task, then mode, then objective.
std::vector<Condition> all_conditions();
std::optional<Condition> condition_from_name(std::string_view name);

/// Per-step mean and population standard deviation over samples.
struct CurveStats {
  std::vector<std::array<double, 4>> mean;  // [step][Task]
  std::vector<std::array<double, 4>> std;
  std::vector<double> loss_mean;
  std::vector<double> loss_std;
  std::vector<double> l2_mean;

  std::size_t steps() const { return mean.empty() ? 0 : mean.size() - 1; }
};

/// Throws std::invalid_argument on an empty set or ragged curve lengths.
CurveStats aggregate_curves(std::span<const std::vector<StepRecord>> curves);
CurveStats aggregate_curves(std::span<const AttackResult> results);

/// Mean metrics over samples.
TaskMetrics mean_metrics(std::span<const TaskMetrics> metrics);

/// Table cell: distance is the absolute RMSE, other tasks the relative change
/// 100 (m - clean) / clean. NaN when the clean value is 0.
std::array<double, 4> effect(const TaskMetrics& clean, const TaskMetrics& changed);

struct EffectRow {
  Condition condition;
  std::array<double, 4> attack{};   // NaN when the condition was not run
  std::array<double, 4> defense{};  // NaN when no defended metrics exist
};

struct EffectTable {
  std::vector<EffectRow> rows;  // always all 16 conditions, in table order
};

/// Inputs for one table row: the clean (step-0) metrics of the samples, the
/// final-step attacked metrics and optionally the blurred-adversarial metrics.
struct ConditionMetrics {
  Condition condition;
  std::vector<TaskMetrics> clean;
  std::vector<TaskMetrics> attacked;
  std::vector<TaskMetrics> defended;
};

EffectTable effect_table(std::span<const ConditionMetrics> conditions);

/// Input-blurring effect on clean inputs, one row per task.
struct BlurRow {
  Task task = Task::distance;
  double original = 0.0;
  double blurred = 0.0;
  double effect = 0.0;  // as in effect(): absolute for distance, % otherwise
};

std::vector<BlurRow> blur_table(std::span<const TaskMetrics> clean, std::span<const TaskMetrics> blurred);

/// A curve CSV row: per-sample step record, or a defended final-step record.
struct CurveRow {
  std::size_t sample = 0;  // index into the test split
  std::size_t step = 0;
  TaskMetrics metrics;
  std::optional<double> attack_loss;  // absent for defended rows
  double perturbation_l2 = 0.0;
  bool defended = false;
};

inline constexpr std::string_view kCurveHeader =
    "sample,step,distance_rmse,seg_miou,motion_miou,det_map,attack_loss,perturbation_l2,defended";

std::vector<CurveRow> curve_rows(std::size_t sample, const AttackResult& result);
void write_curve_csv(std::span<const CurveRow> rows, const std::filesystem::path& file);
/// Throws std::runtime_error naming the file and line on malformed input.
std::vector<CurveRow> read_curve_csv(const std::filesystem::path& file);

/// Per-sample curves (undefended rows, grouped by sample in ascending order).
std::vector<std::vector<StepRecord>> curves_of(std::span<const CurveRow> rows);

void write_curve_stats_csv(const CurveStats& stats, const std::filesystem::path& file);
void write_effect_table_csv(const EffectTable& table, const std::filesystem::path& file);
void write_blur_table_csv(std::span<const BlurRow> rows, const std::filesystem::path& file);

/// Binary PPM with four panels (distance, segmentation, motion, detection in
/// reading order), each a mean line over a shaded +-std band, step on x.
void plot_curves(const CurveStats& stats, const std::filesystem::path& file);

/// A qualitative claim checked on the data; `holds` is empty when undecidable.
struct Finding {
  std::string claim;
  std::optional<bool> holds;
  std::string detail;
};

/// White-box vs black-box perturbation size at matched loss increase, per task
/// (untargeted), and motion as the least-degraded non-attacked task.
std::vector<Finding> directional_findings(std::span<const ConditionMetrics> conditions,
                                          std::span<const std::pair<Condition, CurveStats>> curves);
void write_findings(std::span<const Finding> findings, const std::filesystem::path& file);

/// Shortest round-trip decimal, "NA" for NaN.
std::string format_number(double value);

}  // namespace advperc
