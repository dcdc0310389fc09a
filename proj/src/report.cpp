#include "advperc/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace advperc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::ofstream open_out(const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& file) {
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

double parse_double(std::string_view text, const std::filesystem::path& file, std::size_t line) {
  if (text == "NA") return kNaN;
  double value = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw std::runtime_error(file.string() + ":" + std::to_string(line) + ": bad number '" + std::string(text) + "'");
  }
  return value;
}

std::size_t parse_index(std::string_view text, const std::filesystem::path& file, std::size_t line) {
  std::size_t value = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw std::runtime_error(file.string() + ":" + std::to_string(line) + ": bad integer '" + std::string(text) + "'");
  }
  return value;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == sep) {
      parts.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return parts;
}

std::array<double, 4> as_array(const TaskMetrics& m) { return {m.distance_rmse, m.seg_miou, m.motion_miou, m.det_map}; }

const char* metric_name(Task task) {
  switch (task) {
    case Task::distance: return "distance_rmse";
    case Task::segmentation: return "seg_miou";
    case Task::motion: return "motion_miou";
    case Task::detection: return "det_map";
  }
  return "";
}

}  // namespace

std::string format_number(double value) {
  if (std::isnan(value)) return "NA";
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc()) throw std::runtime_error("format_number failed");
  return std::string(buf, end);
}

std::string Condition::name() const {
  return std::string(to_string(task)) + "_" + std::string(to_string(mode)) + "_" + std::string(to_string(objective));
}

std::vector<Condition> all_conditions() {
  std::vector<Condition> out;
  for (Task task : kAllTasks) {
    for (AttackMode mode : {AttackMode::whitebox, AttackMode::blackbox}) {
      for (Objective objective : {Objective::untargeted, Objective::targeted}) out.push_back({task, mode, objective});
    }
  }
  return out;
}

std::optional<Condition> condition_from_name(std::string_view name) {
  for (const auto& c : all_conditions()) {
    if (c.name() == name) return c;
  }
  return std::nullopt;
}

CurveStats aggregate_curves(std::span<const std::vector<StepRecord>> curves) {
  if (curves.empty()) throw std::invalid_argument("aggregate_curves: no curves");
  const std::size_t len = curves.front().size();
  for (std::size_t s = 0; s < curves.size(); ++s) {
    if (curves[s].size() != len) {
      throw std::invalid_argument("aggregate_curves: curve " + std::to_string(s) + " has " +
                                  std::to_string(curves[s].size()) + " entries, expected " + std::to_string(len));
    }
  }
  const double n = static_cast<double>(curves.size());
  CurveStats stats;
  stats.mean.assign(len, {});
  stats.std.assign(len, {});
  stats.loss_mean.assign(len, 0.0);
  stats.loss_std.assign(len, 0.0);
  stats.l2_mean.assign(len, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (const auto& curve : curves) {
      const auto m = as_array(curve[t].metrics);
      for (std::size_t k = 0; k < 4; ++k) stats.mean[t][k] += m[k];
      stats.loss_mean[t] += curve[t].attack_loss;
      stats.l2_mean[t] += curve[t].perturbation_l2;
    }
    for (auto& v : stats.mean[t]) v /= n;
    stats.loss_mean[t] /= n;
    stats.l2_mean[t] /= n;
    for (const auto& curve : curves) {
      const auto m = as_array(curve[t].metrics);
      for (std::size_t k = 0; k < 4; ++k) stats.std[t][k] += (m[k] - stats.mean[t][k]) * (m[k] - stats.mean[t][k]);
      const double dl = curve[t].attack_loss - stats.loss_mean[t];
      stats.loss_std[t] += dl * dl;
    }
    for (auto& v : stats.std[t]) v = std::sqrt(v / n);
    stats.loss_std[t] = std::sqrt(stats.loss_std[t] / n);
  }
  return stats;
}

CurveStats aggregate_curves(std::span<const AttackResult> results) {
  std::vector<std::vector<StepRecord>> curves;
  curves.reserve(results.size());
  for (const auto& r : results) curves.push_back(r.curve);
  return aggregate_curves(curves);
}

TaskMetrics mean_metrics(std::span<const TaskMetrics> metrics) {
  if (metrics.empty()) throw std::invalid_argument("mean_metrics: no metrics");
  TaskMetrics m;
  for (const auto& x : metrics) {
    m.distance_rmse += x.distance_rmse;
    m.seg_miou += x.seg_miou;
    m.motion_miou += x.motion_miou;
    m.det_map += x.det_map;
  }
  const double n = static_cast<double>(metrics.size());
  m.distance_rmse /= n;
  m.seg_miou /= n;
  m.motion_miou /= n;
  m.det_map /= n;
  return m;
}

std::array<double, 4> effect(const TaskMetrics& clean, const TaskMetrics& changed) {
  const auto c = as_array(clean), a = as_array(changed);
  std::array<double, 4> out{};
  out[0] = a[0];
  for (std::size_t k = 1; k < 4; ++k) out[k] = c[k] == 0.0 ? kNaN : 100.0 * (a[k] - c[k]) / c[k];
  return out;
}

EffectTable effect_table(std::span<const ConditionMetrics> conditions) {
  EffectTable table;
  for (const auto& condition : all_conditions()) {
    EffectRow row{condition, {kNaN, kNaN, kNaN, kNaN}, {kNaN, kNaN, kNaN, kNaN}};
    for (const auto& cm : conditions) {
      if (!(cm.condition == condition)) continue;
      if (cm.clean.size() != cm.attacked.size()) {
        throw std::invalid_argument("effect_table: " + condition.name() + " has mismatched clean/attacked counts");
      }
      if (cm.clean.empty()) continue;
      const TaskMetrics clean = mean_metrics(cm.clean);
      row.attack = effect(clean, mean_metrics(cm.attacked));
      if (!cm.defended.empty()) {
        if (cm.defended.size() != cm.clean.size()) {
          throw std::invalid_argument("effect_table: " + condition.name() + " has mismatched defended count");
        }
        row.defense = effect(clean, mean_metrics(cm.defended));
      }
    }
    table.rows.push_back(row);
  }
  return table;
}

std::vector<BlurRow> blur_table(std::span<const TaskMetrics> clean, std::span<const TaskMetrics> blurred) {
  if (clean.size() != blurred.size()) throw std::invalid_argument("blur_table: mismatched sample counts");
  const TaskMetrics c = mean_metrics(clean), b = mean_metrics(blurred);
  const auto e = effect(c, b);
  std::vector<BlurRow> rows;
  for (Task task : kAllTasks) {
    const auto k = static_cast<std::size_t>(task);
    rows.push_back({task, c.get(task), b.get(task), e[k]});
  }
  return rows;
}

std::vector<CurveRow> curve_rows(std::size_t sample, const AttackResult& result) {
  std::vector<CurveRow> rows;
  for (std::size_t t = 0; t < result.curve.size(); ++t) {
    const auto& r = result.curve[t];
    rows.push_back({sample, t, r.metrics, r.attack_loss, r.perturbation_l2, false});
  }
  return rows;
}

void write_curve_csv(std::span<const CurveRow> rows, const std::filesystem::path& file) {
  auto out = open_out(file);
  out << kCurveHeader << '\n';
  for (const auto& r : rows) {
    out << r.sample << ',' << r.step << ',' << format_number(r.metrics.distance_rmse) << ','
        << format_number(r.metrics.seg_miou) << ',' << format_number(r.metrics.motion_miou) << ','
        << format_number(r.metrics.det_map) << ',' << (r.attack_loss ? format_number(*r.attack_loss) : "NA") << ','
        << format_number(r.perturbation_l2) << ',' << (r.defended ? 1 : 0) << '\n';
  }
  finish(out, file);
}

std::vector<CurveRow> read_curve_csv(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::string line;
  if (!std::getline(in, line) || line != kCurveHeader) {
    throw std::runtime_error(file.string() + ":1: unexpected header");
  }
  std::vector<CurveRow> rows;
  for (std::size_t n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 9) throw std::runtime_error(file.string() + ":" + std::to_string(n) + ": expected 9 fields");
    CurveRow r;
    r.sample = parse_index(f[0], file, n);
    r.step = parse_index(f[1], file, n);
    r.metrics = {parse_double(f[2], file, n), parse_double(f[3], file, n), parse_double(f[4], file, n),
                 parse_double(f[5], file, n)};
    if (f[6] != "NA") r.attack_loss = parse_double(f[6], file, n);
    r.perturbation_l2 = parse_double(f[7], file, n);
    if (f[8] != "0" && f[8] != "1") throw std::runtime_error(file.string() + ":" + std::to_string(n) + ": bad flag");
    r.defended = f[8] == "1";
    rows.push_back(r);
  }
  return rows;
}

std::vector<std::vector<StepRecord>> curves_of(std::span<const CurveRow> rows) {
  std::map<std::size_t, std::vector<const CurveRow*>> by_sample;
  for (const auto& r : rows) {
    if (!r.defended) by_sample[r.sample].push_back(&r);
  }
  std::vector<std::vector<StepRecord>> curves;
  for (auto& [sample, list] : by_sample) {
    std::stable_sort(list.begin(), list.end(), [](const CurveRow* a, const CurveRow* b) { return a->step < b->step; });
    std::vector<StepRecord> curve;
    for (std::size_t t = 0; t < list.size(); ++t) {
      if (list[t]->step != t) {
        throw std::invalid_argument("curves_of: sample " + std::to_string(sample) + " is missing step " +
                                    std::to_string(t));
      }
      curve.push_back({list[t]->metrics, list[t]->attack_loss.value_or(kNaN), list[t]->perturbation_l2});
    }
    curves.push_back(std::move(curve));
  }
  return curves;
}

void write_curve_stats_csv(const CurveStats& stats, const std::filesystem::path& file) {
  auto out = open_out(file);
  out << "step";
  for (Task task : kAllTasks) out << ',' << metric_name(task) << "_mean," << metric_name(task) << "_std";
  out << ",attack_loss_mean,attack_loss_std,perturbation_l2_mean\n";
  for (std::size_t t = 0; t < stats.mean.size(); ++t) {
    out << t;
    for (std::size_t k = 0; k < 4; ++k) out << ',' << format_number(stats.mean[t][k]) << ',' << format_number(stats.std[t][k]);
    out << ',' << format_number(stats.loss_mean[t]) << ',' << format_number(stats.loss_std[t]) << ','
        << format_number(stats.l2_mean[t]) << '\n';
  }
  finish(out, file);
}

void write_effect_table_csv(const EffectTable& table, const std::filesystem::path& file) {
  auto out = open_out(file);
  out << "attacked_task,mode,objective";
  for (const char* col : {"A", "D"}) {
    out << ',' << col << "_distance_rmse," << col << "_seg_miou_rel_pct," << col << "_motion_miou_rel_pct," << col
        << "_det_map_rel_pct";
  }
  out << '\n';
  for (const auto& row : table.rows) {
    out << to_string(row.condition.task) << ',' << to_string(row.condition.mode) << ','
        << to_string(row.condition.objective);
    for (double v : row.attack) out << ',' << format_number(v);
    for (double v : row.defense) out << ',' << format_number(v);
    out << '\n';
  }
  finish(out, file);
}

void write_blur_table_csv(std::span<const BlurRow> rows, const std::filesystem::path& file) {
  auto out = open_out(file);
  out << "task,metric,original,blurred,effect,effect_kind\n";
  for (const auto& r : rows) {
    out << to_string(r.task) << ',' << metric_name(r.task) << ',' << format_number(r.original) << ','
        << format_number(r.blurred) << ',' << format_number(r.effect) << ','
        << (r.task == Task::distance ? "absolute" : "relative_pct") << '\n';
  }
  finish(out, file);
}

void plot_curves(const CurveStats& stats, const std::filesystem::path& file) {
  constexpr int pw = 240, ph = 160, margin = 12;
  constexpr int width = 2 * pw, height = 2 * ph;
  std::vector<unsigned char> px(static_cast<std::size_t>(width * height * 3), 255);
  auto put = [&](int x, int y, unsigned char r, unsigned char g, unsigned char b) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const auto i = static_cast<std::size_t>((y * width + x) * 3);
    px[i] = r;
    px[i + 1] = g;
    px[i + 2] = b;
  };
  const std::size_t len = stats.mean.size();
  for (std::size_t k = 0; k < 4; ++k) {
    const int ox = static_cast<int>(k % 2) * pw, oy = static_cast<int>(k / 2) * ph;
    const int x0 = ox + margin, x1 = ox + pw - margin, y0 = oy + margin, y1 = oy + ph - margin;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t t = 0; t < len; ++t) {
      lo = std::min(lo, stats.mean[t][k] - stats.std[t][k]);
      hi = std::max(hi, stats.mean[t][k] + stats.std[t][k]);
    }
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    auto to_x = [&](double t) {
      return x0 + static_cast<int>(std::lround(len > 1 ? t / static_cast<double>(len - 1) * (x1 - x0) : 0.0));
    };
    auto to_y = [&](double v) { return y1 - static_cast<int>(std::lround((v - lo) / (hi - lo) * (y1 - y0))); };
    auto value_at = [&](const std::vector<std::array<double, 4>>& s, double t) {
      const auto a = static_cast<std::size_t>(std::floor(t));
      const std::size_t b = std::min(a + 1, len - 1);
      const double f = t - static_cast<double>(a);
      return s[a][k] * (1.0 - f) + s[b][k] * f;
    };
    for (int x = x0; x <= x1 && len > 0; ++x) {
      const double t = len > 1 ? static_cast<double>(x - x0) / (x1 - x0) * static_cast<double>(len - 1) : 0.0;
      const double m = value_at(stats.mean, t), s = value_at(stats.std, t);
      for (int y = to_y(m + s); y <= to_y(m - s); ++y) put(x, y, 190, 210, 240);
    }
    for (std::size_t t = 0; t + 1 < len; ++t) {
      const int xa = to_x(static_cast<double>(t)), xb = to_x(static_cast<double>(t + 1));
      const int ya = to_y(stats.mean[t][k]), yb = to_y(stats.mean[t + 1][k]);
      const int n = std::max({std::abs(xb - xa), std::abs(yb - ya), 1});
      for (int i = 0; i <= n; ++i) {
        put(xa + (xb - xa) * i / n, ya + (yb - ya) * i / n, 20, 50, 140);
      }
    }
    for (int x = x0; x <= x1; ++x) {
      put(x, y0, 0, 0, 0);
      put(x, y1, 0, 0, 0);
    }
    for (int y = y0; y <= y1; ++y) {
      put(x0, y, 0, 0, 0);
      put(x1, y, 0, 0, 0);
    }
  }
  auto out = open_out(file);
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  finish(out, file);
}

std::vector<Finding> directional_findings(std::span<const ConditionMetrics> conditions,
                                          std::span<const std::pair<Condition, CurveStats>> curves) {
  std::vector<Finding> findings;
  auto find_curve = [&](const Condition& c) -> const CurveStats* {
    for (const auto& [cond, stats] : curves) {
      if (cond == c) return &stats;
    }
    return nullptr;
  };

  // white-box reaches the black-box loss increase with a smaller perturbation
  for (Task task : kAllTasks) {
    Finding f;
    f.claim = "whitebox L2 < blackbox L2 at matched loss increase (" + std::string(to_string(task)) + ", untargeted)";
    const CurveStats* wb = find_curve({task, AttackMode::whitebox, Objective::untargeted});
    const CurveStats* bb = find_curve({task, AttackMode::blackbox, Objective::untargeted});
    if (!wb || !bb || wb->mean.empty() || bb->mean.empty()) {
      f.detail = "conditions not run";
    } else {
      const double target = bb->loss_mean.back() - bb->loss_mean.front();
      if (!(target > 0.0)) {
        f.detail = "blackbox loss did not increase (" + format_number(target) + ")";
      } else {
        std::optional<std::size_t> step;
        for (std::size_t t = 0; t < wb->loss_mean.size() && !step; ++t) {
          if (wb->loss_mean[t] - wb->loss_mean.front() >= target) step = t;
        }
        if (!step) {
          f.detail = "whitebox never reached the blackbox loss increase " + format_number(target);
        } else {
          f.holds = wb->l2_mean[*step] < bb->l2_mean.back();
          f.detail = "loss increase " + format_number(target) + ": whitebox L2 " + format_number(wb->l2_mean[*step]) +
                     " at step " + std::to_string(*step) + ", blackbox L2 " + format_number(bb->l2_mean.back());
        }
      }
    }
    findings.push_back(f);
  }

  // relative degradation of the non-attacked classification tasks
  std::array<double, 4> total{};
  std::array<int, 4> count{};
  double own_total = 0.0, motion_total = 0.0;
  int own_count = 0;
  for (const auto& cm : conditions) {
    if (cm.condition.task == Task::motion || cm.clean.empty()) continue;
    const auto e = effect(mean_metrics(cm.clean), mean_metrics(cm.attacked));
    for (Task t : {Task::segmentation, Task::motion, Task::detection}) {
      const auto k = static_cast<std::size_t>(t);
      if (t == cm.condition.task || std::isnan(e[k])) continue;
      total[k] += e[k];
      ++count[k];
    }
    const auto own = static_cast<std::size_t>(cm.condition.task);
    if (cm.condition.task != Task::distance && !std::isnan(e[own]) && !std::isnan(e[2])) {
      own_total += e[own];
      motion_total += e[2];
      ++own_count;
    }
  }
  Finding least;
  least.claim = "motion is the least-degraded non-attacked task (mean relative change)";
  if (count[2] == 0) {
    least.detail = "no non-motion conditions";
  } else {
    const double motion = total[2] / count[2];
    bool holds = true;
    std::ostringstream detail;
    detail << "motion " << format_number(motion) << "%";
    for (Task t : {Task::segmentation, Task::detection}) {
      const auto k = static_cast<std::size_t>(t);
      if (count[k] == 0) continue;
      const double other = total[k] / count[k];
      detail << ", " << to_string(t) << ' ' << format_number(other) << "%";
      holds = holds && motion > other;
    }
    least.holds = holds;
    least.detail = detail.str();
  }
  findings.push_back(least);

  Finding own;
  own.claim = "attacking segmentation/detection degrades motion less than the attacked task";
  if (own_count == 0) {
    own.detail = "no segmentation or detection conditions";
  } else {
    own.holds = motion_total / own_count > own_total / own_count;
    own.detail = "motion " + format_number(motion_total / own_count) + "%, attacked task " +
                 format_number(own_total / own_count) + "%";
  }
  findings.push_back(own);
  return findings;
}

void write_findings(std::span<const Finding> findings, const std::filesystem::path& file) {
  auto out = open_out(file);
  out << "claim,result,detail\n";
  for (const auto& f : findings) {
    out << '"' << f.claim << "\"," << (f.holds ? (*f.holds ? "pass" : "fail") : "undecided") << ",\"" << f.detail
        << "\"\n";
  }
  finish(out, file);
}

}  // namespace advperc
