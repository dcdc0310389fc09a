// Command-line driver: gen-data, train, attack, defend, report, check-grad.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <set>

#include "advperc/config.hpp"
#include "advperc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace advperc;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string out;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ValidationError("config " + path + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    static const std::set<std::string> known{"data", "model", "train", "attack", "defense"};
    if (!known.contains(key)) throw ValidationError("config " + path + ": unknown section '" + key + "'");
  }
  return j;
}

json section(const json& config, const char* name) { return config.contains(name) ? config.at(name) : json::object(); }

void log_line(const std::string& line) { std::cerr << line << std::endl; }

void require_dir(const std::string& path, const char* what) {
  if (path.empty() || !fs::is_directory(path)) throw ValidationError(std::string(what) + " directory not found: " + path);
}

void require_file(const std::string& path, const char* what) {
  if (path.empty() || !fs::is_regular_file(path)) throw ValidationError(std::string(what) + " not found: " + path);
}

template <typename T, typename Parse>
std::vector<T> selection(const std::vector<std::string>& names, const std::vector<T>& all, Parse parse) {
  if (names.empty() || (names.size() == 1 && names[0] == "all")) return all;
  std::vector<T> out;
  for (const auto& n : names) out.push_back(parse(n));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial attacks on a multi-task perception network"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool with_out = true) {
    sub->add_option("--config", common.config, "JSON config with data/model/train/attack/defense sections");
    sub->add_option("--seed", common.seed, "Seed for this stage (dataset, training or attack)");
    sub->add_option("--workers", common.workers, "Worker threads for per-sample work")->check(CLI::PositiveNumber);
    if (with_out) sub->add_option("--out", common.out, "Output path")->required();
  };

  // gen-data
  std::optional<std::size_t> count;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic scene dataset");
  add_common(gen);
  gen->add_option("--count", count, "Number of samples (the last sixth form the test split)");

  // train
  std::string data_dir, checkpoint;
  std::optional<std::size_t> epochs;
  auto* tr = app.add_subcommand("train", "Train the four-task network");
  add_common(tr);
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--epochs", epochs, "Training epochs");

  // attack
  std::vector<std::string> tasks, modes, objectives;
  std::optional<std::size_t> steps, samples;
  bool no_render = false;
  auto* atk = app.add_subcommand("attack", "Run the attack grid (or a subset) over the test split");
  add_common(atk);
  atk->add_option("--data", data_dir, "Dataset directory")->required();
  atk->add_option("--checkpoint", checkpoint, "Trained model checkpoint")->required();
  atk->add_option("--task", tasks, "distance|segmentation|motion|detection|all")->delimiter(',');
  atk->add_option("--mode", modes, "whitebox|blackbox|all")->delimiter(',');
  atk->add_option("--objective", objectives, "untargeted|targeted|all")->delimiter(',');
  atk->add_option("--steps", steps, "Attack steps");
  atk->add_option("--samples", samples, "Attack only the first N test samples");
  atk->add_flag("--no-render", no_render, "Skip the 10x perturbation images");

  // defend
  std::string results_dir;
  std::optional<double> radius;
  auto* def = app.add_subcommand("defend", "Evaluate the blur defense on stored adversarial examples");
  add_common(def, false);
  def->add_option("--results", results_dir, "Attack results directory")->required();
  def->add_option("--data", data_dir, "Dataset directory")->required();
  def->add_option("--checkpoint", checkpoint, "Trained model checkpoint")->required();
  def->add_option("--radius", radius, "Gaussian sigma in pixels");

  // report
  auto* rep = app.add_subcommand("report", "Write curve statistics, plots and effect tables");
  add_common(rep);
  rep->add_option("--results", results_dir, "Attack results directory")->required();

  // check-grad
  std::size_t coordinates = 512;
  double tolerance = 1e-4;
  auto* grad = app.add_subcommand("check-grad", "Finite-difference check of the model gradient w.r.t. the input");
  add_common(grad, false);
  grad->add_option("--checkpoint", checkpoint, "Model checkpoint (default: freshly initialised model)");
  grad->add_option("--coordinates", coordinates, "Number of sampled input coordinates")->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const json config = load_config(common.config);

    if (command == "gen-data") {
      DataSpec spec;
      const json data = section(config, "data");
      for (const auto& [key, value] : data.items()) {
        if (key == "count") spec.count = value.get<std::size_t>();
        else if (key == "seed") spec.seed = value.get<std::uint64_t>();
        else if (key == "scene") spec.scene = scene_params_from_json(value);
        else throw ValidationError("config data: unknown key '" + key + "'");
      }
      if (count) spec.count = *count;
      if (common.seed) spec.seed = *common.seed;
      generate_data(spec, common.out, log_line);

    } else if (command == "train") {
      require_dir(data_dir, "dataset");
      ModelConfig model_cfg = model_config_from_json(section(config, "model"));
      TrainConfig cfg = train_config_from_json(section(config, "train"));
      if (epochs) cfg.epochs = *epochs;
      if (common.seed) {
        cfg.seed = *common.seed;
        model_cfg.seed = *common.seed;
      }
      train_model(load_dataset(data_dir), model_cfg, cfg, common.out, log_line);

    } else if (command == "attack") {
      require_dir(data_dir, "dataset");
      require_file(checkpoint, "checkpoint");
      AttackPlan plan;
      plan.base = attack_config_from_json(section(config, "attack"));
      if (steps) plan.base.steps = *steps;
      if (common.seed) plan.base.seed = *common.seed;
      plan.workers = common.workers;
      plan.sample_limit = samples;
      plan.renders = !no_render;
      const auto task_list = selection<Task>(tasks, {kAllTasks.begin(), kAllTasks.end()}, task_from_string);
      const auto mode_list =
          selection<AttackMode>(modes, {AttackMode::whitebox, AttackMode::blackbox}, attack_mode_from_string);
      const auto objective_list = selection<Objective>(
          objectives, {Objective::untargeted, Objective::targeted}, objective_from_string);
      for (Task t : task_list) {
        for (AttackMode m : mode_list) {
          for (Objective o : objective_list) plan.conditions.push_back({t, m, o});
        }
      }
      const Model model = load_checkpoint(checkpoint);
      attack_grid(model, load_dataset(data_dir), plan, common.out, log_line, checkpoint, data_dir);

    } else if (command == "defend") {
      require_dir(results_dir, "results");
      require_dir(data_dir, "dataset");
      require_file(checkpoint, "checkpoint");
      DefenseConfig cfg = defense_config_from_json(section(config, "defense"));
      if (radius) cfg.radius = *radius;
      defend(results_dir, load_checkpoint(checkpoint), load_dataset(data_dir), cfg, common.workers, log_line);

    } else if (command == "report") {
      require_dir(results_dir, "results");
      report(results_dir, common.out, log_line);

    } else if (command == "check-grad") {
      Model model;
      if (checkpoint.empty()) {
        model = make_model(model_config_from_json(section(config, "model")));
      } else {
        require_file(checkpoint, "checkpoint");
        model = load_checkpoint(checkpoint);
      }
      const auto r = check_model_gradient(model, coordinates, common.seed.value_or(1));
      std::cout << "check-grad: " << r.checked << " coordinates, max relative error " << r.max_rel_error
                << " (worst index " << r.worst_index << "), " << r.skipped_nonsmooth << " skipped at kinks\n";
      if (!(r.max_rel_error < tolerance)) {
        std::cerr << "advperc check-grad: max relative error " << r.max_rel_error << " exceeds " << tolerance << '\n';
        return kRuntime;
      }
    }
  } catch (const ValidationError& e) {
    std::cerr << "advperc " << command << ": " << e.what() << '\n';
    return kValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "advperc " << command << ": " << e.what() << '\n';
    return kValidation;
  } catch (const json::exception& e) {
    std::cerr << "advperc " << command << ": config: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "advperc " << command << ": " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
