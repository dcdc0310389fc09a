#include "advperc/pipeline.hpp"

#include <atomic>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "advperc/config.hpp"
#include "advperc/ops.hpp"

namespace advperc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifest = "manifest.json";

void say(const Log& log, const std::string& line) {
  if (log) log(line);
}

std::string sample_file(std::size_t index, std::string_view ext) {
  std::ostringstream name;
  name << "sample_" << std::setw(5) << std::setfill('0') << index << ext;
  return name.str();
}

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ValidationError("cannot read " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& file) {
  std::ofstream out(file);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

json load_results_manifest(const fs::path& results) {
  const fs::path file = results / kManifest;
  if (!fs::exists(file)) throw ValidationError("no attack results in " + results.string() + " (missing manifest)");
  json m = read_json(file);
  if (m.value("format", "") != "advperc-results") throw ValidationError(file.string() + ": not a results manifest");
  return m;
}

std::vector<Condition> complete_conditions(const json& manifest, const fs::path& results) {
  std::vector<Condition> out;
  if (!manifest.contains("conditions")) return out;
  for (const auto& c : all_conditions()) {
    const auto it = manifest["conditions"].find(c.name());
    if (it == manifest["conditions"].end() || it->value("status", "") != "complete") continue;
    if (fs::exists(results / c.name() / "curve.csv")) out.push_back(c);
  }
  return out;
}

void check_dataset(const json& manifest, const Dataset& dataset) {
  if (manifest.at("dataset_seed").get<std::uint64_t>() != dataset.seed) {
    throw ValidationError("dataset seed " + std::to_string(dataset.seed) + " does not match the results (" +
                          std::to_string(manifest.at("dataset_seed").get<std::uint64_t>()) + ")");
  }
  if (manifest.at("test_samples").get<std::size_t>() > dataset.test.size()) {
    throw ValidationError("dataset has fewer test samples than the results");
  }
}

}  // namespace

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    threads.emplace_back([&] {
      for (std::size_t i; !failed && (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

Dataset generate_data(const DataSpec& spec, const fs::path& dir, const Log& log) {
  spec.scene.validate();
  if (spec.count == 0) throw ValidationError("gen-data: sample count must be positive");
  Dataset ds = generate_dataset(spec.count, spec.scene, spec.seed);
  save_dataset(ds, dir);
  say(log, "gen-data: " + std::to_string(ds.train.size()) + " train / " + std::to_string(ds.test.size()) +
               " test samples -> " + dir.string());
  return ds;
}

TrainResult train_model(const Dataset& dataset, const ModelConfig& model_cfg, const TrainConfig& cfg,
                        const fs::path& checkpoint, const Log& log) {
  model_cfg.validate();
  cfg.validate();
  if (dataset.train.empty()) throw ValidationError("train: dataset has no training samples");
  TrainResult result = train(make_model(model_cfg), dataset, cfg, [&](std::size_t epoch, const EpochStats& s) {
    std::ostringstream line;
    line << "train: epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << s.loss << " max grad norm "
         << s.max_grad_norm << " (" << s.clipped_batches << " batches clipped)";
    say(log, line.str());
  });
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  save_checkpoint(result.model, checkpoint);
  fs::path history = checkpoint;
  history.replace_extension(".history.csv");
  std::ofstream out(history);
  out << "epoch,loss,distance,segmentation,motion,detection,max_grad_norm,clipped_batches\n";
  for (std::size_t e = 0; e < result.history.size(); ++e) {
    const auto& h = result.history[e];
    out << e + 1 << ',' << format_number(h.loss);
    for (double t : h.task) out << ',' << format_number(t);
    out << ',' << format_number(h.max_grad_norm) << ',' << h.clipped_batches << '\n';
  }
  if (!out) throw std::runtime_error("cannot write " + history.string());
  say(log, "train: checkpoint -> " + checkpoint.string());
  return result;
}

std::vector<fs::path> attack_grid(const Model& model, const Dataset& dataset, const AttackPlan& plan, const fs::path& out,
                                  const Log& log, const std::string& checkpoint_label, const std::string& dataset_label) {
  const std::vector<Condition> conditions = plan.conditions.empty() ? all_conditions() : plan.conditions;
  std::size_t n = dataset.test.size();
  if (plan.sample_limit) n = std::min(n, *plan.sample_limit);
  if (n == 0) throw ValidationError("attack: no test samples");
  for (const auto& c : conditions) {
    AttackConfig cfg = plan.base;
    cfg.task = c.task;
    cfg.mode = c.mode;
    cfg.objective = c.objective;
    try {
      cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw ValidationError(e.what());
    }
  }

  fs::create_directories(out);
  json manifest;
  if (fs::exists(out / kManifest)) {
    manifest = load_results_manifest(out);
    if (manifest.at("dataset_seed").get<std::uint64_t>() != dataset.seed ||
        manifest.at("test_samples").get<std::size_t>() != n) {
      throw ValidationError("attack: " + out.string() + " holds results for a different dataset or sample count");
    }
  } else {
    manifest = {{"format", "advperc-results"}, {"version", 1}, {"conditions", json::object()}};
  }
  manifest["dataset"] = dataset_label;
  manifest["dataset_seed"] = dataset.seed;
  manifest["scene"] = to_json(dataset.params);
  manifest["test_samples"] = n;
  manifest["checkpoint"] = checkpoint_label;
  manifest["model"] = to_json(model.config);
  manifest["workers"] = plan.workers;

  std::vector<fs::path> written;
  for (const auto& c : conditions) {
    AttackConfig cfg = plan.base;
    cfg.task = c.task;
    cfg.mode = c.mode;
    cfg.objective = c.objective;
    const fs::path dir = out / c.name();
    fs::remove_all(dir);
    manifest["conditions"][c.name()] = {{"status", "incomplete"}, {"samples", 0}, {"config", to_json(cfg)}};
    write_json(manifest, out / kManifest);

    std::vector<AttackResult> results(n);
    std::atomic<std::size_t> done{0};
    std::mutex log_mutex;
    try {
      parallel_for(n, plan.workers, [&](std::size_t i) {
        results[i] = run_attack(dataset.test[i], model, cfg);
        const std::size_t k = ++done;
        if (log && (k % 10 == 0 || k == n)) {
          std::lock_guard lock(log_mutex);
          log("attack: " + c.name() + " " + std::to_string(k) + "/" + std::to_string(n));
        }
      });
      fs::create_directories(dir / "adversarial");
      fs::create_directories(dir / "perturbation");
      if (plan.renders) fs::create_directories(dir / "render");
      std::vector<CurveRow> rows;
      for (std::size_t i = 0; i < n; ++i) {
        write_image(results[i].adversarial, dir / "adversarial" / sample_file(i, ".bin"));
        write_image(results[i].perturbation, dir / "perturbation" / sample_file(i, ".bin"));
        if (plan.renders) write_ppm(render_perturbation(results[i]), dir / "render" / sample_file(i, ".ppm"));
        const auto r = curve_rows(i, results[i]);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      write_curve_csv(rows, dir / "curve.csv");
    } catch (const std::exception& e) {
      manifest["conditions"][c.name()]["error"] = e.what();
      write_json(manifest, out / kManifest);
      throw std::runtime_error("attack-engine: " + c.name() + ": " + e.what());
    }
    manifest["conditions"][c.name()]["status"] = "complete";
    manifest["conditions"][c.name()]["samples"] = n;
    write_json(manifest, out / kManifest);
    written.push_back(dir);
  }
  return written;
}

void defend(const fs::path& results, const Model& model, const Dataset& dataset, const DefenseConfig& cfg,
            std::size_t workers, const Log& log) {
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  json manifest = load_results_manifest(results);
  check_dataset(manifest, dataset);
  const auto conditions = complete_conditions(manifest, results);
  if (conditions.empty()) throw ValidationError("defend: no complete attack conditions in " + results.string());
  const std::size_t n = manifest.at("test_samples").get<std::size_t>();
  manifest["defense"] = {{"config", to_json(cfg)}, {"status", "incomplete"}};
  write_json(manifest, results / kManifest);

  for (const auto& c : conditions) {
    const fs::path dir = results / c.name();
    std::vector<CurveRow> rows;
    for (auto& r : read_curve_csv(dir / "curve.csv")) {
      if (!r.defended) rows.push_back(r);
    }
    const auto curves = curves_of(rows);
    if (curves.size() != n) throw std::runtime_error("defense: " + c.name() + " has " + std::to_string(curves.size()) +
                                                     " sample curves, expected " + std::to_string(n));
    std::vector<TaskMetrics> defended(n);
    parallel_for(n, workers, [&](std::size_t i) {
      try {
        const Tensor adv = read_image(dir / "adversarial" / sample_file(i, ".bin"));
        defended[i] = defended_metrics(model, dataset.test[i], adv, cfg);
      } catch (const std::exception& e) {
        throw std::runtime_error("defense: " + c.name() + ", sample " + std::to_string(i) + ": " + e.what());
      }
    });
    for (std::size_t i = 0; i < n; ++i) {
      const auto& last = curves[i].back();
      rows.push_back({i, curves[i].size() - 1, defended[i], std::nullopt, last.perturbation_l2, true});
    }
    write_curve_csv(rows, dir / "curve.csv");
    say(log, "defend: " + c.name());
  }

  std::vector<TaskMetrics> clean(n), blurred(n);
  parallel_for(n, workers, [&](std::size_t i) {
    clean[i] = evaluate(model, dataset.test[i]);
    blurred[i] = defended_metrics(model, dataset.test[i], dataset.test[i].frame_curr, cfg);
  });
  std::vector<CurveRow> rows;
  for (std::size_t i = 0; i < n; ++i) {
    rows.push_back({i, 0, clean[i], std::nullopt, 0.0, false});
    rows.push_back({i, 0, blurred[i], std::nullopt, 0.0, true});
  }
  write_curve_csv(rows, results / "blur.csv");
  manifest["defense"]["status"] = "complete";
  write_json(manifest, results / kManifest);
  say(log, "defend: blur-only metrics -> " + (results / "blur.csv").string());
}

ReportFiles report(const fs::path& results, const fs::path& out, const Log& log) {
  // everything is read and checked before the first file is written
  const json manifest = load_results_manifest(results);
  const auto conditions = complete_conditions(manifest, results);
  if (conditions.empty()) throw ValidationError("report: no complete attack conditions in " + results.string());

  std::vector<ConditionMetrics> metrics;
  std::vector<std::pair<Condition, CurveStats>> stats;
  std::map<std::size_t, TaskMetrics> baseline;
  for (const auto& c : conditions) {
    const auto rows = read_curve_csv(results / c.name() / "curve.csv");
    const auto curves = curves_of(rows);
    if (curves.empty()) throw ValidationError("report: " + c.name() + " has no curves");
    ConditionMetrics cm{c, {}, {}, {}};
    for (std::size_t i = 0; i < curves.size(); ++i) {
      cm.clean.push_back(curves[i].front().metrics);
      cm.attacked.push_back(curves[i].back().metrics);
      const auto [it, fresh] = baseline.emplace(i, curves[i].front().metrics);
      if (!fresh && !(it->second == curves[i].front().metrics)) {
        throw std::runtime_error("report: " + c.name() + ", sample " + std::to_string(i) +
                                 ": step-0 metrics differ from other conditions");
      }
    }
    std::map<std::size_t, TaskMetrics> defended;
    for (const auto& r : rows) {
      if (r.defended) defended[r.sample] = r.metrics;
    }
    if (!defended.empty()) {
      if (defended.size() != curves.size()) throw std::runtime_error("report: " + c.name() + ": partial defense rows");
      for (const auto& [i, m] : defended) cm.defended.push_back(m);
    }
    stats.emplace_back(c, aggregate_curves(curves));
    metrics.push_back(std::move(cm));
  }
  std::vector<TaskMetrics> blur_clean, blur_blurred;
  if (fs::exists(results / "blur.csv")) {
    for (const auto& r : read_curve_csv(results / "blur.csv")) (r.defended ? blur_blurred : blur_clean).push_back(r.metrics);
  }

  ReportFiles files;
  fs::create_directories(out);
  for (const auto& [c, s] : stats) {
    const fs::path csv = out / "curves" / (c.name() + ".csv");
    const fs::path plot = out / "plots" / (c.name() + ".ppm");
    write_curve_stats_csv(s, csv);
    plot_curves(s, plot);
    files.written.push_back(csv);
    files.written.push_back(plot);
  }
  write_effect_table_csv(effect_table(metrics), out / "effect_table.csv");
  files.written.push_back(out / "effect_table.csv");
  if (!blur_clean.empty()) {
    write_blur_table_csv(blur_table(blur_clean, blur_blurred), out / "blur_table.csv");
    files.written.push_back(out / "blur_table.csv");
  }
  write_findings(directional_findings(metrics, stats), out / "findings.csv");
  files.written.push_back(out / "findings.csv");
  say(log, "report: " + std::to_string(files.written.size()) + " files -> " + out.string());
  return files;
}

ops::GradCheckReport check_model_gradient(const Model& model, std::size_t coordinates, std::uint64_t seed) {
  const Sample sample = generate_scene(SceneParams{}, seed);
  const Model frozen = model.frozen();
  const TrainConfig cfg;
  const auto f = [&](const Tensor& frame) {
    return total_train_loss(forward(frozen, sample.frame_prev, frame), sample, cfg).total;
  };
  const auto coords = ops::sample_coordinates(sample.frame_curr.numel(), coordinates, seed);
  return ops::finite_diff_check(f, sample.frame_curr, 1e-4, coords);
}

}  // namespace advperc
