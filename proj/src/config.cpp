#include "advperc/config.hpp"

#include <set>
#include <stdexcept>
#include <string>

namespace advperc {

namespace {

using nlohmann::json;

json range(const IntRange& r) { return json::array({r.min, r.max}); }

IntRange range_from(const json& r) {
  if (!r.is_array() || r.size() != 2) throw std::invalid_argument("expected a [min, max] pair");
  return {r.at(0).get<int>(), r.at(1).get<int>()};
}

// Reads the keys of `j` through `read`, rejecting any key not in `known`.
template <typename Read>
void read_keys(const json& j, std::string_view what, const std::set<std::string>& known, Read read) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument(std::string(what) + ": unknown key '" + key + "'");
    try {
      read(key, value);
    } catch (const json::exception& e) {
      throw std::invalid_argument(std::string(what) + "." + key + ": " + e.what());
    }
  }
}

}  // namespace

json to_json(const SceneParams& p) {
  return {{"size", p.size},
          {"object_count", range(p.object_count)},
          {"prop_count", range(p.prop_count)},
          {"object_size", range(p.object_size)},
          {"dynamic_fraction", p.dynamic_fraction},
          {"dx", range(p.dx)},
          {"dy", range(p.dy)},
          {"texture_scale", p.texture_scale},
          {"noise_amplitude", p.noise_amplitude},
          {"frame_noise", p.frame_noise}};
}

json to_json(const ModelConfig& c) {
  return {{"input_size", c.input_size}, {"encoder_channels", c.encoder_channels}, {"seg_classes", c.seg_classes},
          {"det_classes", c.det_classes}, {"det_grid", c.det_grid},           {"seed", c.seed}};
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"loss_weights", c.loss_weights},
          {"focal_gamma", c.focal_gamma},
          {"max_grad_norm", c.max_grad_norm},
          {"seed", c.seed}};
}

json to_json(const AttackConfig& c) {
  return {{"task", to_string(c.task)},
          {"mode", to_string(c.mode)},
          {"objective", to_string(c.objective)},
          {"steps", c.steps},
          {"alpha", c.alpha},
          {"es",
           {{"population", c.es.population},
            {"sigma", c.es.sigma},
            {"mu", c.es.mu},
            {"lr", c.es.lr},
            {"recombination", to_string(c.es.recombination)},
            {"antithetic", c.es.antithetic}}},
          {"seed", c.seed},
          {"linf_budget", c.linf_budget ? json(*c.linf_budget) : json(nullptr)},
          {"near_threshold", c.near_threshold},
          {"escape_noise", c.escape_noise}};
}

json to_json(const DefenseConfig& c) {
  return {{"kind", "gaussian_blur"}, {"radius", c.radius}, {"truncation", c.truncation}};
}

SceneParams scene_params_from_json(const json& j, SceneParams p) {
  read_keys(j, "scene",
            {"size", "object_count", "prop_count", "object_size", "dynamic_fraction", "dx", "dy", "texture_scale",
             "noise_amplitude", "frame_noise"},
            [&](const std::string& k, const json& v) {
              if (k == "size") p.size = v.get<std::size_t>();
              if (k == "object_count") p.object_count = range_from(v);
              if (k == "prop_count") p.prop_count = range_from(v);
              if (k == "object_size") p.object_size = range_from(v);
              if (k == "dynamic_fraction") p.dynamic_fraction = v.get<double>();
              if (k == "dx") p.dx = range_from(v);
              if (k == "dy") p.dy = range_from(v);
              if (k == "texture_scale") p.texture_scale = v.get<double>();
              if (k == "noise_amplitude") p.noise_amplitude = v.get<double>();
              if (k == "frame_noise") p.frame_noise = v.get<double>();
            });
  return p;
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  read_keys(j, "model", {"input_size", "encoder_channels", "seg_classes", "det_classes", "det_grid", "seed"},
            [&](const std::string& k, const json& v) {
              if (k == "input_size") c.input_size = v.get<std::size_t>();
              if (k == "encoder_channels") c.encoder_channels = v.get<std::vector<std::size_t>>();
              if (k == "seg_classes") c.seg_classes = v.get<std::size_t>();
              if (k == "det_classes") c.det_classes = v.get<std::size_t>();
              if (k == "det_grid") c.det_grid = v.get<std::size_t>();
              if (k == "seed") c.seed = v.get<std::uint64_t>();
            });
  return c;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  read_keys(j, "train", {"epochs", "batch_size", "learning_rate", "loss_weights", "focal_gamma", "max_grad_norm", "seed"},
            [&](const std::string& k, const json& v) {
              if (k == "epochs") c.epochs = v.get<std::size_t>();
              if (k == "batch_size") c.batch_size = v.get<std::size_t>();
              if (k == "learning_rate") c.learning_rate = v.get<double>();
              if (k == "loss_weights") c.loss_weights = v.get<std::array<double, 4>>();
              if (k == "focal_gamma") c.focal_gamma = v.get<double>();
              if (k == "max_grad_norm") c.max_grad_norm = v.get<double>();
              if (k == "seed") c.seed = v.get<std::uint64_t>();
            });
  return c;
}

AttackConfig attack_config_from_json(const json& j, AttackConfig c) {
  read_keys(j, "attack",
            {"task", "mode", "objective", "steps", "alpha", "es", "seed", "linf_budget", "near_threshold",
             "escape_noise"},
            [&](const std::string& k, const json& v) {
              if (k == "task") c.task = task_from_string(v.get<std::string>());
              if (k == "mode") c.mode = attack_mode_from_string(v.get<std::string>());
              if (k == "objective") c.objective = objective_from_string(v.get<std::string>());
              if (k == "steps") c.steps = v.get<std::size_t>();
              if (k == "alpha") c.alpha = v.get<double>();
              if (k == "seed") c.seed = v.get<std::uint64_t>();
              if (k == "linf_budget") {
                c.linf_budget = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
              }
              if (k == "near_threshold") c.near_threshold = v.get<double>();
              if (k == "escape_noise") c.escape_noise = v.get<double>();
              if (k == "es") {
                read_keys(v, "attack.es", {"population", "sigma", "mu", "lr", "recombination", "antithetic"},
                          [&](const std::string& e, const json& w) {
                            if (e == "population") c.es.population = w.get<std::size_t>();
                            if (e == "sigma") c.es.sigma = w.get<double>();
                            if (e == "mu") c.es.mu = w.get<double>();
                            if (e == "lr") c.es.lr = w.get<double>();
                            if (e == "recombination") c.es.recombination = recombination_from_string(w.get<std::string>());
                            if (e == "antithetic") c.es.antithetic = w.get<bool>();
                          });
              }
            });
  return c;
}

DefenseConfig defense_config_from_json(const json& j, DefenseConfig c) {
  read_keys(j, "defense", {"kind", "radius", "truncation"}, [&](const std::string& k, const json& v) {
    if (k == "kind" && v.get<std::string>() != "gaussian_blur") {
      throw std::invalid_argument("defense: only kind 'gaussian_blur' is supported");
    }
    if (k == "radius") c.radius = v.get<double>();
    if (k == "truncation") c.truncation = v.get<double>();
  });
  return c;
}

}  // namespace advperc
