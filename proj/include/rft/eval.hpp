#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rft/attacks.hpp"
#include "rft/dataset.hpp"
#include "rft/model.hpp"

namespace rft {

// Canonical attack budgets, keyed on DatasetHandle::name. mnist: epsilon 0.2
// on [0,1] inputs, pgd 20 steps of 0.01. cifar10: epsilon 4 on raw [0,255]
// inputs, pgd 12 steps of 1. fgsm is the single-step variant at the same
// epsilon. Unknown names are rejected.
AttackConfig default_fgsm_attack(const DatasetHandle& data);
AttackConfig default_pgd_attack(const DatasetHandle& data);

// Fractions correct on one example set under clean, fgsm, and pgd inputs.
// All three conditions run over the identical examples in the same order.
struct AccuracyReport {
  std::string dataset_name;
  int sample_count = 0;
  double clean = 0.0;
  double fgsm = 0.0;
  double pgd = 0.0;
  AttackConfig fgsm_attack;
  AttackConfig pgd_attack;
};

// Mean of (z - z*)^2 over features, positions, and examples, one entry per
// normalization layer in network order. z is the pre-affine normalized
// value under running statistics, so the result is independent of the
// affine scale gamma.
struct DistortionReport {
  std::string dataset_name;
  int sample_count = 0;
  AttackConfig attack;
  std::vector<double> layer_means;
};

// Deterministic pass over the whole set in order. Attack configs default to
// the dataset's canonical budgets. Requires populated running statistics
// and at least one example.
AccuracyReport evaluate_accuracy(
    Model& model, const DatasetHandle& test,
    std::optional<AttackConfig> fgsm_attack = std::nullopt,
    std::optional<AttackConfig> pgd_attack = std::nullopt,
    int batch_size = 100);

// As above; the adversary defaults to the dataset's pgd budget. A single
// step attack with step_size = epsilon measures under fgsm instead.
DistortionReport evaluate_distortions(
    Model& model, const DatasetHandle& test,
    std::optional<AttackConfig> attack = std::nullopt, int batch_size = 100);

struct RunReport {
  std::string label;
  AccuracyReport accuracy;
  DistortionReport distortion;
};

// CSV text, stable schemas. accuracy_csv columns: model,dataset,clean,fgsm,
// pgd. distortion_csv columns: model,layer_index,mean_distortion with
// layer_index counting normalization layers from zero in network order.
// Values print in shortest round-trip form.
struct ComparisonTables {
  std::string accuracy_csv;
  std::string distortion_csv;
};

// Merges runs into the two tables, one accuracy row and one distortion
// series per label. Runs on the same dataset must agree on layer count.
ComparisonTables compare_runs(const std::vector<RunReport>& runs);

}  // namespace rft
