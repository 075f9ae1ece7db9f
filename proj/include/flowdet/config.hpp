#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowdet/sampling.hpp"
#include "flowdet/scene.hpp"
#include "flowdet/training.hpp"

namespace flowdet {

// Flat key=value run configuration. Every key is declared in the schema with
// a type, default, and constraint; unknown keys are rejected and all
// violations are reported in one error.
struct RunConfig {
  std::map<std::string, std::string> values;

  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_str(const std::string& key) const;
};

// Schema entry, exposed so the CLI can print the defaults table.
struct ConfigKey {
  const char* name;
  const char* type;  // "int" | "real" | "bool" | "string"
  const char* default_value;
  const char* help;
};

const std::vector<ConfigKey>& config_schema();

RunConfig default_config();

// Parses a key=value file ('#' comments, blank lines allowed).
RunConfig load_config_file(const std::string& path);

// Applies "key=value" override strings (CLI flags win over the file).
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);

// Applies FLOWDET_SEED if present in the environment.
void apply_env_seed(RunConfig& config);

// Full validation; throws ConfigError listing every violation at once.
void validate_config(const RunConfig& config);

// Canonical provenance hash over all key=value pairs.
std::string config_hash(const RunConfig& config);

// --- converters into module configs (validate first) ---
SceneConfig to_scene_config(const RunConfig& config);
TrainConfig to_train_config(const RunConfig& config);
SamplerConfig to_sampler_config(const RunConfig& config);

}  // namespace flowdet
