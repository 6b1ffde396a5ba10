#pragma once

// Run configuration (plain `key = value` lines with dotted sections), named
// experiment variants and the train-then-evaluate driver shared by the
// command-line tool and the acceptance checks.

#include "autoassign/assign.hpp"
#include "autoassign/gradsuite.hpp"
#include "autoassign/toydet.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace autoassign {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(int line, std::string key, const std::string& message);
  int line() const { return line_; }
  const std::string& key() const { return key_; }

 private:
  int line_;
  std::string key_;
};

struct RunConfig {
  std::uint64_t seed = 1;
  SceneGenConfig scene = standard_benchmark();
  int train_scenes = 1024;
  int test_scenes = 100;
  /// Test-set scene whose weight maps train writes at the end.
  int probe_scene = 0;
  /// num_categories and image_size follow the scene settings.
  ModelConfig model;
  PriorMode prior_mode = PriorMode::kCategory;
  double prior_mu_init = 0.0;
  double prior_sigma_init = 1.0;
  AssignConfig assign;
  TrainConfig train;
  InferenceConfig infer;
  double eval_iou = 0.5;
  GradSuiteConfig gradcheck;
  /// Test-set scene exported by dump-weights.
  int dump_scene = 0;

  void validate() const;
  /// Model settings with the scene-derived fields and seed filled in.
  ModelConfig resolved_model() const;
};

/// Overrides defaults with the given lines. Unknown keys, duplicate keys and
/// malformed values throw ConfigError.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::string& path);
/// Every key with its effective value, in a form parse_run_config accepts.
std::string serialize_run_config(const RunConfig& cfg);
/// cfg with one key replaced; the result is validated as a whole.
RunConfig override_run_config(const RunConfig& cfg, std::string_view key, std::string_view value);

// ---- variants ---------------------------------------------------------------

/// autoassign, uniform-inbox, center-sampling, center-sampling+scale-ranges,
/// cls-only, loc-only, no-obj, explicit-obj, fixed-prior, shared-prior,
/// none-prior.
const std::vector<std::string>& variant_names();
/// Throws std::invalid_argument listing the valid names.
RunConfig apply_variant(RunConfig cfg, std::string_view name);

// ---- experiments ------------------------------------------------------------

struct Datasets {
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> test;
};

Datasets make_datasets(const RunConfig& cfg);

struct ExperimentResult {
  DetectorModel model;
  CenterPrior prior;
  std::vector<TrainLogRecord> log;
  EvalResult eval;
};

/// Fresh model and prior from the config, trained on data.train and scored
/// on data.test.
ExperimentResult run_experiment(const RunConfig& cfg, const Datasets& data, const TrainLogger& logger = {});

/// Model parameters followed by prior.mu and prior.sigma.
std::vector<Parameter*> checkpoint_parameters(DetectorModel& model, CenterPrior& prior);

EvalResult evaluate(const RunConfig& cfg, const DetectorModel& model, std::span<const SyntheticScene> scenes);

/// Weight maps of one scene under the current model and prior, as CSV files
/// in `directory`. Returns the paths written.
std::vector<std::string> export_scene_weights(const RunConfig& cfg, const DetectorModel& model,
                                              CenterPrior& prior, const SyntheticScene& scene,
                                              const std::string& directory);

}  // namespace autoassign
