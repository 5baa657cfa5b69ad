#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rft/attacks.hpp"
#include "rft/dataset.hpp"
#include "rft/model.hpp"
#include "rft/tape.hpp"

namespace rft {

enum class ObjectiveKind { kStandard, kAdversarial, kDistortionRegularized };

const char* objective_kind_name(ObjectiveKind kind);
ObjectiveKind objective_kind_from_name(const std::string& name);

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::kStandard;
  // weight on the clean-loss term; the adversarial term gets 1 - alpha
  float alpha = 0.2f;
  // per-normalization-layer weights on the distortion sums, first layer first
  std::vector<float> betas;
  // inner adversary used during training (single signed step)
  AttackConfig attack;

  // normalization_layers is the model's tap count; betas must match it for
  // the distortion-regularized objective.
  void validate(int normalization_layers) const;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 64;
  float learning_rate = 0.01f;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;     // epochs between checkpoints, 0 disables
  std::string checkpoint_dir;   // required when checkpoint_every > 0

  void validate() const;
};

// Scalar loss plus the values of its components, for metrics and diagnostics.
struct LossBreakdown {
  TensorPtr total;
  TensorPtr clean_logits;
  double clean = 0.0;
  double adversarial = 0.0;
  double distortion = 0.0;
};

// Per-layer feature distortion sums and their weighted total, tape-connected
// so gradients flow into both forward passes.
struct DistortionTerm {
  std::vector<TensorPtr> layer_sums;
  TensorPtr total;
};

// Softmax cross-entropy on clean inputs, train-mode forward.
TensorPtr loss_standard(Model& model, Tape& tape, const LabeledBatch& batch);

// alpha * J(x) + (1 - alpha) * J(x*), x* from a single signed gradient step
// with the current parameters. x* enters as a constant: no gradient flows
// through its generation. The clean pass runs first and is the only one that
// updates running statistics; the adversary then reads them in eval mode.
LossBreakdown loss_adversarial(Model& model, Tape& tape,
                               const LabeledBatch& batch,
                               const ObjectiveConfig& cfg);

// Per-layer distortion between the two tap lists: for each layer, the sum
// over features of the batch-and-position mean of (z - z*)^2, weighted by
// betas. Symmetric in its tap arguments and zero when they coincide.
DistortionTerm distortion_term(Tape& tape,
                               const std::vector<TensorPtr>& taps_clean,
                               const std::vector<TensorPtr>& taps_adv,
                               const std::vector<float>& betas);

// loss_adversarial plus the distortion term between the clean-pass and
// adversarial-pass taps of the same batch.
LossBreakdown loss_distortion_regularized(Model& model, Tape& tape,
                                          const LabeledBatch& batch,
                                          const ObjectiveConfig& cfg);

// The same composite objective with a caller-supplied adversarial batch held
// constant. Exposed so gradient checks can pin x* while sweeping parameters;
// betas empty means no distortion term.
LossBreakdown objective_with_fixed_adversary(Model& model, Tape& tape,
                                             const LabeledBatch& batch,
                                             const TensorPtr& x_adv,
                                             float alpha,
                                             const std::vector<float>& betas);

struct MetricRecord {
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

using MetricsSink = std::function<void(const MetricRecord&)>;

// Optimizes the model in place: seeded shuffle per epoch, one SGD step per
// batch, per-epoch loss and clean accuracy emitted to the sink and returned
// as history. Aborts with diagnostics if the loss goes non-finite.
std::vector<MetricRecord> train(Model& model, const DatasetHandle& data,
                                const ObjectiveConfig& objective,
                                const TrainConfig& tc,
                                const MetricsSink& sink = nullptr);

}  // namespace rft
