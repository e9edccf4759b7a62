// SPDX-License-Identifier: Apache-2.0
//
// INI run configurations. A training config has [task] and [run] sections;
// a herding-bound config has one [vectors] section. Unknown sections and
// keys are rejected. Every key can be overridden from the command line.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "ordbal/experiment.hpp"

namespace ordbal {

struct ConfigOverrides {
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
  std::optional<std::size_t> m;
  std::optional<std::uint32_t> epochs;
  std::optional<double> alpha;
  std::optional<std::string> engine;
  std::optional<std::string> transport;
};

/// Parses, applies overrides, and validates. Throws ConfigError.
ExperimentConfig parse_experiment_config(std::string_view ini_text,
                                         const ConfigOverrides& overrides = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const ConfigOverrides& overrides = {});

VectorExperimentConfig parse_vector_config(std::string_view ini_text,
                                           const ConfigOverrides& overrides = {});
VectorExperimentConfig load_vector_config(const std::filesystem::path& path,
                                          const ConfigOverrides& overrides = {});

/// Fully resolved config in INI form; parsing it yields the same config.
std::string render_config(const ExperimentConfig& config);
std::string render_config(const VectorExperimentConfig& config);

nlohmann::json config_to_json(const ExperimentConfig& config);
nlohmann::json config_to_json(const VectorExperimentConfig& config);

/// FNV-1a over the fields that determine the numbers a run produces
/// (output path and transport excluded). Exchanged in Hello.
std::uint64_t config_hash(const ExperimentConfig& config);

}  // namespace ordbal
