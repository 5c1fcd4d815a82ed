#pragma once

// Plain-text run configuration: flat `section.key = value` lines, '#'
// comments. Resolution order is defaults < file < explicit overrides.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tbub/inference.h"
#include "tbub/model.h"
#include "tbub/training.h"

namespace tbub {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  BudgetMode budget_mode = BudgetMode::kDynamic;
  std::string train_data;
  std::string val_data;
  std::string out_dir = "run";

  RunConfig();
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Parses `key = value` lines; throws kFormat naming the line.
KeyValues parse_key_values(std::string_view text);

// Applies one setting; throws kArgument for unknown keys or bad values.
// `seed` sets both model.seed and train.seed.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// Splits "key=value"; throws kArgument without '='.
std::pair<std::string, std::string> split_assignment(std::string_view s);

// Defaults, then the file (if any), then overrides, then validation.
// model.budget = 0 resolves to the variant's natural budget (2L for ours).
RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file, const KeyValues& overrides);

// Canonical key=value listing (sorted keys); parsing it back yields the same config.
std::string to_text(const RunConfig& cfg);
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace tbub
