#pragma once

// Run configuration: every hyperparameter addressable through `key = value`
// text (config file, CLI overrides, checkpoint header). Unknown keys are
// rejected so typos cannot silently fall back to defaults.

#include <string>
#include <vector>

#include "dsparse/model.hpp"
#include "dsparse/train.hpp"

namespace dsparse {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::size_t runs = 1;
};

// Canonical key order used by config_to_text.
const std::vector<std::string>& config_keys();

void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& cfg, const std::string& key);

std::string config_to_text(const RunConfig& cfg);
// Applies `key = value` lines ('#' starts a comment) on top of cfg.
void apply_config_text(RunConfig& cfg, const std::string& text,
                       const std::string& source_name);
RunConfig load_config_file(const std::string& path);
// Each override is a single "key=value" token.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides);

} // namespace dsparse
