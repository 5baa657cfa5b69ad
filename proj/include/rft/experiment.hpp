#pragma once

#include <cstdint>
#include <string>

#include "rft/attacks.hpp"
#include "rft/model.hpp"
#include "rft/training.hpp"

namespace rft {

// One experiment: dataset, architecture, objective, and attack budgets,
// loaded from a versioned JSON file. Unknown keys are errors, as are keys
// that cannot take effect under the chosen objective kind. The loader
// materializes every default, so a saved snapshot reloads to the same
// config exactly.
struct ExperimentConfig {
  std::string name;
  // report row label; defaults to standard / adversarial / ours by kind
  std::string label;
  std::string dataset_name;  // "mnist" or "cifar10"
  std::string dataset_dir;
  // examples drawn from the split before use; 0 means the whole split
  int subset = 0;
  NetworkSpec network;
  ObjectiveConfig objective;
  TrainConfig train;
  AttackConfig eval_fgsm;
  AttackConfig eval_pgd;
  std::string out_dir;
  std::uint64_t seed = 1;

  // base_dir anchors a relative "network" path; the key may instead hold
  // the spec inline, which is how snapshots embed it.
  static ExperimentConfig from_json_text(const std::string& text,
                                         const std::string& base_dir);
  static ExperimentConfig load(const std::string& path);

  // Fully resolved snapshot with the network inline.
  std::string to_json_text() const;

  // Re-checks cross-field constraints; used after flag overrides.
  void validate() const;
};

}  // namespace rft
