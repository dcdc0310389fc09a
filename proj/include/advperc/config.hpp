#pragma once

#include <json.hpp>

#include "advperc/attack.hpp"
#include "advperc/defense.hpp"
#include "advperc/losses.hpp"
#include "advperc/model.hpp"
#include "advperc/scene.hpp"

namespace advperc {

// JSON forms of the configuration structs. The *_from_json readers start from
// `base` and override only the keys present; an unknown key throws
// std::invalid_argument so that typos in config files do not pass silently.

nlohmann::json to_json(const SceneParams& p);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const AttackConfig& c);
nlohmann::json to_json(const DefenseConfig& c);

SceneParams scene_params_from_json(const nlohmann::json& j, SceneParams base = {});
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
AttackConfig attack_config_from_json(const nlohmann::json& j, AttackConfig base = {});
DefenseConfig defense_config_from_json(const nlohmann::json& j, DefenseConfig base = {});

}  // namespace advperc
