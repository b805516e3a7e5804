#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "comvit/model.hpp"
#include "comvit/train.hpp"

namespace comvit {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool operator==(const RunConfig&) const = default;
};

/// Published architecture and recipe (224x224 RGB, 7x256, 300 epochs).
RunConfig paper_preset();

/// Same recipe on a laptop budget: 64x64 grayscale, 2 classes, a narrower
/// encoder, 20 epochs at batch 64 with the schedule and mixup cutoff scaled
/// to the shorter run.
RunConfig desk_preset();

RunConfig preset(std::string_view name);

/// Sets one dotted key, e.g. "model.hidden" or "train.base_lr".
/// Unknown keys and unparsable values raise ConfigError.
void apply_setting(RunConfig& config, std::string_view key, std::string_view value);

/// Flat `key = value` lines; '#' starts a comment; blank lines ignored.
void apply_config_text(RunConfig& config, std::string_view text);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

/// Every key with its current value, in the same format apply_config_text reads.
std::string render_config(const RunConfig& config);

std::vector<std::string> config_keys();

}  // namespace comvit
