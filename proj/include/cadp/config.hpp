#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cadp/data.hpp"
#include "cadp/network.hpp"
#include "cadp/training.hpp"

namespace cadp {

/// Flattened configuration: section names prefix keys ("vat.epsilon").
/// Arrays are stored comma-joined, strings unquoted.
using KeyValues = std::map<std::string, std::string>;

/// TOML subset: comments, [section] headers, key = value with quoted strings,
/// bare numbers/booleans and flat arrays. Duplicate keys are errors.
KeyValues parse_toml(const std::string& text, const std::string& origin = "<string>");
/// JSON object; nested objects flatten into dotted keys.
KeyValues parse_json(const std::string& text, const std::string& origin = "<string>");
/// Chooses the parser by extension (.json, anything else TOML).
/// A missing or unreadable file is a ConfigError.
KeyValues read_config_file(const std::string& path);
/// Writes a map back as TOML (top-level keys first, then one table per prefix).
std::string format_toml(const KeyValues& kv);

enum class DatasetKind { kMoons, kDigits };

struct DigitsConfig {
  std::string images;  // IDX image file, gzipped or raw
  std::string labels;
  std::size_t count = 0;  // 0 keeps every image; otherwise a seeded subsample
  std::uint64_t color_seed = 11;
  std::size_t color_grid = 4;
  std::size_t pad = 32;  // images are zero-padded to pad x pad
};

struct ArchConfig {
  std::string kind = "mlp";  // mlp | small-cnn | large-cnn
  std::vector<std::size_t> widths{64, 64};
  double noise_sigma = 1.0;  // CNN gaussian-noise layers
  bool instance_norm = false;
};

/// Everything one run needs. Key reference: README "Configuration".
struct ExperimentConfig {
  TrainConfig train;
  std::size_t refine_iterations = 0;  // 0 reuses train.iterations
  DatasetKind dataset = DatasetKind::kMoons;
  MoonsConfig moons;
  DigitsConfig digits;
  ArchConfig arch;
  std::string output_dir = "out";
  std::string preset;  // empty when none was applied
  std::string budget = "desk";

  /// Keys that are not part of the schema are ConfigErrors.
  static ExperimentConfig from_map(const KeyValues& kv);
  KeyValues to_map() const;
  void validate() const;
  /// Classifier architecture for the configured dataset.
  ArchitectureSpec architecture() const;
};

/// One row of the per-task hyperparameter table or a desk-scale setup.
struct Preset {
  std::string name;
  std::string task;
  std::string instance_norm;  // table column: "yes", "no" or "yes, no"
  bool from_table = false;    // false for desk-scale presets
  std::string note;
  KeyValues overrides;
};

const std::vector<Preset>& presets();
const Preset& find_preset(const std::string& name);

/// Resolution order: schema defaults, preset overrides, file keys,
/// `cli_overrides`. The preset comes from `preset_override` when given,
/// otherwise from the file's `preset` key. Relative data paths resolve against
/// the config file's directory.
ExperimentConfig load_experiment(const std::optional<std::string>& config_path,
                                 const std::optional<std::string>& preset_override, const KeyValues& cli_overrides);

struct DomainPairData {
  DomainDataset source;
  DomainDataset target;  // labels used for evaluation only
};
/// Builds the source and target domains described by the config.
DomainPairData build_domains(const ExperimentConfig& cfg);

}  // namespace cadp
