#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advtrain/attack.hpp"
#include "advtrain/dataset.hpp"
#include "advtrain/ensemble.hpp"
#include "advtrain/weight_perturb.hpp"

namespace advtrain {

enum class Method {
  AT,
  AT_TE,
  MLCAT_WP,
  MLCAT_WP_TE,
  AT_TE_XEC,
  MLCAT_WP_XEC,
  AT_TE_BS,
  MLCAT_WP_TE_BS,
  AT_TE_CS,
  MLCAT_WP_TE_CS,
  MLCAT_WP_XE_BS,
};

Method parse_method(const std::string& name);
std::string method_name(Method m);
const std::vector<Method>& all_methods();

bool method_uses_te(Method m);
bool method_uses_wp(Method m);
bool method_uses_helper(Method m);   // trains on the boundary sample x'
bool method_uses_clean(Method m);    // trains on the clean sample x
bool method_uses_boundary_track(Method m);

struct MethodSpec {
  Method method = Method::AT;
  std::optional<RampSchedule> te;
  std::optional<WPSpec> wp;
  AttackSpec attack;
  AttackObjective::Mode attack_loss = AttackObjective::Mode::cross_entropy_only;

  void validate() const;
};

struct LrSchedule {
  float base_lr = 0.1f;
  std::vector<int> decay_epochs = {100, 150};
  float decay_factor = 0.1f;
};

// base_lr * factor^(number of decay epochs passed); epochs are 1-indexed and
// the decay applies from the decay epoch itself.
float lr_at(const LrSchedule& schedule, int epoch);

struct OptimizerSpec {
  LrSchedule schedule;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::string architecture = "resnet18";
  int64_t classes = 10;
  MethodSpec method;
  AttackSpec eval_attack;
  OptimizerSpec optim;
  int epochs = 200;
  int batch_size = 128;
  uint64_t seed = 1;
  int eval_every = 1;
  std::string output_dir = "runs/out";
  std::string selection_metric = "robust";
  double bucket_lo = 0.0;
  double bucket_hi = 0.5;
  bool dump_attacks = false;
  bool separate_helper_pass = false;
  bool resume = false;
  bool full_diagnostics_pass = false;  // exact post-epoch sweep over train data

  void validate() const;

  // Strict parse: unknown keys raise ConfigError naming the key.
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);
  std::string to_json_text() const;

  // Dotted-path overrides, e.g. "train.epochs=3" or "attack.steps=5".
  void apply_override(const std::string& key_eq_value);
};

}  // namespace advtrain
