#pragma once

// Experiment configuration: an INI-style file with [sections] and
// `key = value` lines, plus `section.key=value` overrides. Every key is known
// in advance; anything else is rejected.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dualmod/data.hpp"
#include "dualmod/network.hpp"
#include "dualmod/preprocess.hpp"
#include "dualmod/synthetic.hpp"

namespace dualmod {

struct DataConfig {
  std::string manifest;  // empty: generate a synthetic dataset
  double labeled_fraction = 0.25;
  int val_count = 0;
  int test_count = 8;
  std::uint64_t split_seed = 7;
  Extent3 patch_shape{16, 16, 16};
  NormalizeMode normalize = NormalizeMode::minmax;
  double ct_window_level = 40.0;
  double ct_window_width = 400.0;
  bool crop_nonzero = false;
};

struct SyntheticConfig {
  int count = 24;
  std::uint64_t seed = 7;
  SynthSpec spec;
};

struct LossConfig {
  double alpha = 1.0;
  long alpha_rampup_iters = 0;
  double dice_epsilon = 1e-5;
};

struct TrainConfig {
  long max_iters = 2000;
  int batch_size = 4;
  int labeled_per_batch = 2;
  double lr_initial = 1e-2;
  double lr_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  long eval_every = 0;        // 0: validate only after the last iteration
  long checkpoint_every = 0;  // 0: only the final and best checkpoints
  std::uint64_t seed = 7;
  bool mcml_enabled = true;
};

struct GradCheckConfig {
  double step = 1e-3;
  double tolerance = 1e-3;
  int entries_per_tensor = 24;
  Extent3 patch_shape{8, 8, 8};
  bool zero_fusion = false;
  std::uint64_t seed = 3;
};

struct ExperimentConfig {
  DataConfig data;
  SyntheticConfig synthetic;
  NetworkConfig network;
  LossConfig losses;
  TrainConfig trainer;
  GradCheckConfig check_grad;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
  /// Canonical text form; parse_config(to_text()) reproduces the config.
  [[nodiscard]] std::string to_text() const;
  /// FNV-1a of to_text().
  [[nodiscard]] std::uint64_t hash() const;
};

/// Applies `section.key = value` to `cfg`; throws ConfigError for unknown
/// keys and malformed values.
void set_config_value(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value);

/// Parses INI text on top of the defaults.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<string>");
ExperimentConfig load_config(const std::string& path);

/// Applies "section.key=value" strings in order.
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides);

/// Every accepted dotted key, in canonical order.
std::vector<std::string> config_keys();

}  // namespace dualmod
