#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ctxguard/attacks.hpp"
#include "ctxguard/backbone.hpp"
#include "ctxguard/encoder.hpp"
#include "ctxguard/eval.hpp"
#include "ctxguard/scenegen.hpp"
#include "ctxguard/scg.hpp"

namespace ctxguard {

struct DatasetConfig {
  std::size_t train_scenes = 800;
  std::size_t val_scenes = 200;
  double leak_prob = 0.1;
  SceneOptions scene;
};

struct BackboneConfig {
  BackboneTrainOptions train;
  /// Fraction of the train split (leading scenes) the backbone sees; the
  /// rescoring module trains on the rest.
  double holdout_split = 0.5;
};

struct AttackConfig {
  double epsilon = 0.06;
  int fff_iters = 400;
  double target_fool = 0.8;
  int max_epochs = 5;
  int inner_steps = 10;
};

struct EvalConfig {
  AucMode auc_mode = AucMode::RankStatistic;
};

/// Every knob of a run. Loaded from JSON; unknown keys are rejected.
inline ScgOptions run_scg_defaults() {
  ScgOptions o;
  o.max_iters = 150;
  return o;
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "run";
  DatasetConfig dataset;
  BackboneConfig backbone;
  EncoderConfig encoder;
  ScgOptions scg = run_scg_defaults();
  double tedm_l2 = 0.0;
  AttackConfig attack;
  EvalConfig eval;

  /// Throws ConfigError on any invalid value.
  void validate() const;
  ContextModel context_model() const;
};

/// Throws ConfigError for malformed JSON, unknown keys, wrong types or values.
RunConfig config_from_string(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included.
std::string config_to_string(const RunConfig& cfg);

}  // namespace ctxguard
