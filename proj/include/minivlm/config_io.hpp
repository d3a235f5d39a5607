#pragma once

// JSON conversions for the config structs, shared by checkpoints, the CLI's
// resolved-config echo and tests.

#include "json.hpp"
#include "minivlm/data.hpp"
#include "minivlm/fusion.hpp"
#include "minivlm/lm.hpp"
#include "minivlm/train.hpp"

namespace minivlm {

nlohmann::json to_json(const LMConfig& c);
LMConfig lm_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const AGPConfig& c);
AGPConfig agp_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const MLPConfig& c);
MLPConfig mlp_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const DatasetManifest& m);

}  // namespace minivlm
