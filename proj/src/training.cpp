#include "rft/training.hpp"

#include <cmath>
#include <sstream>

#include "rft/errors.hpp"
#include "rft/ops.hpp"
#include "rft/rng.hpp"

namespace rft {

const char* objective_kind_name(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::kStandard:
      return "standard";
    case ObjectiveKind::kAdversarial:
      return "adversarial";
    case ObjectiveKind::kDistortionRegularized:
      return "distortion-regularized";
  }
  return "unknown";
}

ObjectiveKind objective_kind_from_name(const std::string& name) {
  if (name == "standard") return ObjectiveKind::kStandard;
  if (name == "adversarial") return ObjectiveKind::kAdversarial;
  if (name == "distortion-regularized") {
    return ObjectiveKind::kDistortionRegularized;
  }
  throw ConfigError("unknown objective kind: " + name);
}

void ObjectiveConfig::validate(int normalization_layers) const {
  if (kind == ObjectiveKind::kStandard) return;
  if (!std::isfinite(alpha) || alpha < 0.0f || alpha > 1.0f) {
    throw ConfigError("objective alpha must be in [0,1], got " +
                      std::to_string(alpha));
  }
  attack.validate();
  if (kind == ObjectiveKind::kDistortionRegularized) {
    if (static_cast<int>(betas.size()) != normalization_layers) {
      throw ConfigError(
          "betas length " + std::to_string(betas.size()) +
          " does not match the model's normalization layer count " +
          std::to_string(normalization_layers));
    }
    for (std::size_t i = 0; i < betas.size(); ++i) {
      if (!std::isfinite(betas[i]) || betas[i] < 0.0f) {
        throw ConfigError("beta " + std::to_string(i) +
                          " must be finite and non-negative, got " +
                          std::to_string(betas[i]));
      }
    }
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) {
    throw ConfigError("epochs must be at least 1, got " +
                      std::to_string(epochs));
  }
  if (batch_size < 1) {
    throw ConfigError("batch_size must be at least 1, got " +
                      std::to_string(batch_size));
  }
  if (!std::isfinite(learning_rate) || learning_rate <= 0.0f) {
    throw ConfigError("learning_rate must be positive, got " +
                      std::to_string(learning_rate));
  }
  if (!std::isfinite(momentum) || momentum < 0.0f || momentum >= 1.0f) {
    throw ConfigError("momentum must be in [0,1), got " +
                      std::to_string(momentum));
  }
  if (checkpoint_every < 0) {
    throw ConfigError("checkpoint_every must be non-negative, got " +
                      std::to_string(checkpoint_every));
  }
  if (checkpoint_every > 0 && checkpoint_dir.empty()) {
    throw ConfigError("checkpoint_every is set but checkpoint_dir is empty");
  }
}

TensorPtr loss_standard(Model& model, Tape& tape, const LabeledBatch& batch) {
  auto result = model.forward(tape, batch.inputs, ForwardOptions{});
  return softmax_cross_entropy(tape, result.logits, batch.labels);
}

DistortionTerm distortion_term(Tape& tape,
                               const std::vector<TensorPtr>& taps_clean,
                               const std::vector<TensorPtr>& taps_adv,
                               const std::vector<float>& betas) {
  if (taps_clean.size() != taps_adv.size()) {
    throw ShapeError("tap list sizes differ: " +
                     std::to_string(taps_clean.size()) + " vs " +
                     std::to_string(taps_adv.size()));
  }
  if (betas.size() != taps_clean.size()) {
    throw ConfigError("betas length " + std::to_string(betas.size()) +
                      " does not match tap count " +
                      std::to_string(taps_clean.size()));
  }
  DistortionTerm term;
  TensorPtr total;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    auto per_feature = feature_mean_sq_diff(tape, taps_clean[i], taps_adv[i]);
    auto layer_sum = sum_all(tape, per_feature);
    term.layer_sums.push_back(layer_sum);
    auto weighted = scale(tape, layer_sum, betas[i]);
    total = total ? add(tape, total, weighted) : weighted;
  }
  if (!total) total = Tensor::from_scalar(0.0f);
  term.total = total;
  return term;
}

namespace {

// Clean train-mode pass (the only one that updates running statistics), then
// the adversarial pass on x_adv normalized with its own batch statistics.
// x_adv is a constant: it carries no gradient.
LossBreakdown composite_from_adversary(Model& model, Tape& tape,
                                       const LabeledBatch& batch,
                                       const TensorPtr& x_adv,
                                       const ForwardResult& clean,
                                       const TensorPtr& j_clean, float alpha,
                                       const std::vector<float>& betas) {
  ForwardOptions adv_opts;
  adv_opts.bn_mode = BnMode::kTrainNoUpdate;
  auto adv = model.forward(tape, x_adv->detached(), adv_opts);
  auto j_adv = softmax_cross_entropy(tape, adv.logits, batch.labels);

  auto total = add(tape, scale(tape, j_clean, alpha),
                   scale(tape, j_adv, 1.0f - alpha));
  LossBreakdown lb;
  lb.clean_logits = clean.logits;
  lb.clean = j_clean->item();
  lb.adversarial = j_adv->item();
  if (!betas.empty()) {
    auto term = distortion_term(tape, clean.taps, adv.taps, betas);
    lb.distortion = term.total->item();
    total = add(tape, total, term.total);
  }
  lb.total = total;
  return lb;
}

LossBreakdown run_objective(Model& model, Tape& tape, const LabeledBatch& batch,
                            const AttackConfig& attack, float alpha,
                            const std::vector<float>& betas) {
  auto clean = model.forward(tape, batch.inputs, ForwardOptions{});
  auto j_clean = softmax_cross_entropy(tape, clean.logits, batch.labels);
  auto x_adv = fgsm(model, batch.inputs, batch.labels, attack);
  return composite_from_adversary(model, tape, batch, x_adv, clean, j_clean,
                                  alpha, betas);
}

}  // namespace

LossBreakdown loss_adversarial(Model& model, Tape& tape,
                               const LabeledBatch& batch,
                               const ObjectiveConfig& cfg) {
  if (cfg.kind != ObjectiveKind::kAdversarial) {
    throw ConfigError("loss_adversarial requires the adversarial objective");
  }
  return run_objective(model, tape, batch, cfg.attack, cfg.alpha, {});
}

LossBreakdown loss_distortion_regularized(Model& model, Tape& tape,
                                          const LabeledBatch& batch,
                                          const ObjectiveConfig& cfg) {
  if (cfg.kind != ObjectiveKind::kDistortionRegularized) {
    throw ConfigError(
        "loss_distortion_regularized requires the distortion-regularized "
        "objective");
  }
  return run_objective(model, tape, batch, cfg.attack, cfg.alpha, cfg.betas);
}

LossBreakdown objective_with_fixed_adversary(Model& model, Tape& tape,
                                             const LabeledBatch& batch,
                                             const TensorPtr& x_adv,
                                             float alpha,
                                             const std::vector<float>& betas) {
  auto clean = model.forward(tape, batch.inputs, ForwardOptions{});
  auto j_clean = softmax_cross_entropy(tape, clean.logits, batch.labels);
  return composite_from_adversary(model, tape, batch, x_adv, clean, j_clean,
                                  alpha, betas);
}

namespace {

LossBreakdown compute_objective(Model& model, Tape& tape,
                                const LabeledBatch& batch,
                                const ObjectiveConfig& cfg) {
  switch (cfg.kind) {
    case ObjectiveKind::kStandard: {
      auto result = model.forward(tape, batch.inputs, ForwardOptions{});
      auto loss = softmax_cross_entropy(tape, result.logits, batch.labels);
      LossBreakdown lb;
      lb.total = loss;
      lb.clean_logits = result.logits;
      lb.clean = loss->item();
      return lb;
    }
    case ObjectiveKind::kAdversarial:
      return run_objective(model, tape, batch, cfg.attack, cfg.alpha, {});
    case ObjectiveKind::kDistortionRegularized:
      return run_objective(model, tape, batch, cfg.attack, cfg.alpha,
                           cfg.betas);
  }
  throw ConfigError("unknown objective kind");
}

int count_hits(const TensorPtr& logits, const std::vector<int>& labels) {
  const int n = logits->shape().dim(0);
  const int k = logits->shape().dim(1);
  auto d = logits->data();
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < k; ++c) {
      if (d[i * k + c] > d[i * k + best]) best = c;
    }
    if (best == labels[i]) ++hits;
  }
  return hits;
}

}  // namespace

std::vector<MetricRecord> train(Model& model, const DatasetHandle& data,
                                const ObjectiveConfig& objective,
                                const TrainConfig& tc,
                                const MetricsSink& sink) {
  objective.validate(model.spec().normalization_layer_count());
  tc.validate();

  RngStream root(tc.seed);
  SgdOptimizer opt(model.parameters(), tc.learning_rate, tc.momentum);
  std::vector<MetricRecord> history;
  auto emit = [&](int epoch, const char* metric, double value) {
    MetricRecord r{epoch, "train", metric, value};
    history.push_back(r);
    if (sink) sink(r);
  };

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    auto shuffle_rng = root.derive("shuffle-epoch-" + std::to_string(epoch));
    Batcher batcher(data, tc.batch_size, true, shuffle_rng);
    double sum_total = 0.0, sum_clean = 0.0, sum_adv = 0.0, sum_dist = 0.0;
    long long hits = 0, count = 0;
    LabeledBatch batch;
    int batch_index = 0;
    while (batcher.next(batch)) {
      Tape tape;
      auto lb = compute_objective(model, tape, batch, objective);
      const double total = lb.total->item();
      if (!std::isfinite(total)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " batch " << batch_index
            << ": total=" << total << " clean=" << lb.clean
            << " adversarial=" << lb.adversarial
            << " distortion=" << lb.distortion;
        throw TrainingError(msg.str());
      }
      model.zero_grad();
      tape.backward(lb.total);
      opt.step();

      const int n = batch.inputs->shape().dim(0);
      sum_total += total * n;
      sum_clean += lb.clean * n;
      sum_adv += lb.adversarial * n;
      sum_dist += lb.distortion * n;
      hits += count_hits(lb.clean_logits, batch.labels);
      count += n;
      ++batch_index;
    }

    const double dn = static_cast<double>(count);
    emit(epoch, "loss", sum_total / dn);
    emit(epoch, "accuracy", static_cast<double>(hits) / dn);
    if (objective.kind != ObjectiveKind::kStandard) {
      emit(epoch, "loss_clean", sum_clean / dn);
      emit(epoch, "loss_adversarial", sum_adv / dn);
    }
    if (objective.kind == ObjectiveKind::kDistortionRegularized) {
      emit(epoch, "loss_distortion", sum_dist / dn);
    }
    if (tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0) {
      model.save_checkpoint(
          tc.checkpoint_dir + "/epoch-" + std::to_string(epoch) + ".ckpt",
          {{"epoch", std::to_string(epoch)},
           {"objective", objective_kind_name(objective.kind)}});
    }
  }
  return history;
}

}  // namespace rft
