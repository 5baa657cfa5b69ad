#include "rft/eval.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "rft/errors.hpp"
#include "rft/tape.hpp"

namespace rft {

namespace {

AttackConfig budget_for(const DatasetHandle& data) {
  AttackConfig cfg;
  cfg.clip_min = data.clip_min;
  cfg.clip_max = data.clip_max;
  if (data.name == "mnist") {
    cfg.epsilon = 0.2f;
  } else if (data.name == "cifar10") {
    cfg.epsilon = 4.0f;
  } else {
    throw ConfigError("no canonical attack budget for dataset '" + data.name +
                      "'");
  }
  return cfg;
}

void check_eval_inputs(const DatasetHandle& test, int batch_size) {
  if (test.size() == 0) {
    throw DataError("evaluation needs at least one example");
  }
  if (batch_size < 1) {
    throw ConfigError("batch_size must be at least 1, got " +
                      std::to_string(batch_size));
  }
}

int count_hits(const TensorPtr& logits, const std::vector<int>& labels) {
  const int n = logits->shape().dim(0);
  const int k = logits->shape().dim(1);
  const float* p = logits->data().data();
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < k; ++c) {
      if (p[i * k + c] > p[i * k + best]) best = c;
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return hits;
}

std::string format_value(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

AttackConfig default_fgsm_attack(const DatasetHandle& data) {
  AttackConfig cfg = budget_for(data);
  cfg.step_size = cfg.epsilon;
  cfg.steps = 1;
  return cfg;
}

AttackConfig default_pgd_attack(const DatasetHandle& data) {
  AttackConfig cfg = budget_for(data);
  if (data.name == "mnist") {
    cfg.step_size = 0.01f;
    cfg.steps = 20;
  } else {
    cfg.step_size = 1.0f;
    cfg.steps = 12;
  }
  return cfg;
}

AccuracyReport evaluate_accuracy(Model& model, const DatasetHandle& test,
                                 std::optional<AttackConfig> fgsm_attack,
                                 std::optional<AttackConfig> pgd_attack,
                                 int batch_size) {
  check_eval_inputs(test, batch_size);
  AccuracyReport report;
  report.dataset_name = test.name;
  report.sample_count = test.size();
  report.fgsm_attack = fgsm_attack ? *fgsm_attack : default_fgsm_attack(test);
  report.pgd_attack = pgd_attack ? *pgd_attack : default_pgd_attack(test);
  report.fgsm_attack.validate();
  report.pgd_attack.validate();

  const ForwardOptions opts{BnMode::kEval, true};
  std::int64_t clean_hits = 0, fgsm_hits = 0, pgd_hits = 0;
  RngStream unused(0);
  Batcher batcher(test, batch_size, false, unused);
  LabeledBatch batch;
  while (batcher.next(batch)) {
    {
      Tape tape;
      clean_hits += count_hits(model.forward(tape, batch.inputs, opts).logits,
                               batch.labels);
    }
    auto x_fgsm = fgsm(model, batch.inputs, batch.labels, report.fgsm_attack);
    {
      Tape tape;
      fgsm_hits +=
          count_hits(model.forward(tape, x_fgsm, opts).logits, batch.labels);
    }
    auto x_pgd = pgd(model, batch.inputs, batch.labels, report.pgd_attack);
    {
      Tape tape;
      pgd_hits +=
          count_hits(model.forward(tape, x_pgd, opts).logits, batch.labels);
    }
  }
  const double n = static_cast<double>(report.sample_count);
  report.clean = static_cast<double>(clean_hits) / n;
  report.fgsm = static_cast<double>(fgsm_hits) / n;
  report.pgd = static_cast<double>(pgd_hits) / n;
  return report;
}

DistortionReport evaluate_distortions(Model& model, const DatasetHandle& test,
                                      std::optional<AttackConfig> attack,
                                      int batch_size) {
  check_eval_inputs(test, batch_size);
  DistortionReport report;
  report.dataset_name = test.name;
  report.sample_count = test.size();
  report.attack = attack ? *attack : default_pgd_attack(test);
  report.attack.validate();

  const int layer_count = model.spec().normalization_layer_count();
  std::vector<double> sums(static_cast<std::size_t>(layer_count), 0.0);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(layer_count), 0);

  const ForwardOptions opts{BnMode::kEval, true};
  RngStream unused(0);
  Batcher batcher(test, batch_size, false, unused);
  LabeledBatch batch;
  while (batcher.next(batch)) {
    auto x_adv = pgd(model, batch.inputs, batch.labels, report.attack);
    Tape tape;
    auto clean = model.forward(tape, batch.inputs, opts);
    auto adv = model.forward(tape, x_adv, opts);
    for (int l = 0; l < layer_count; ++l) {
      auto z = clean.taps[static_cast<std::size_t>(l)]->data();
      auto za = adv.taps[static_cast<std::size_t>(l)]->data();
      double acc = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double d = static_cast<double>(z[i]) - za[i];
        acc += d * d;
      }
      sums[static_cast<std::size_t>(l)] += acc;
      counts[static_cast<std::size_t>(l)] +=
          static_cast<std::int64_t>(z.size());
    }
  }
  report.layer_means.resize(static_cast<std::size_t>(layer_count));
  for (int l = 0; l < layer_count; ++l) {
    report.layer_means[static_cast<std::size_t>(l)] =
        sums[static_cast<std::size_t>(l)] /
        static_cast<double>(counts[static_cast<std::size_t>(l)]);
  }
  return report;
}

ComparisonTables compare_runs(const std::vector<RunReport>& runs) {
  if (runs.empty()) throw ConfigError("compare_runs needs at least one run");
  std::map<std::string, std::pair<std::string, std::size_t>> layer_counts;
  for (const auto& run : runs) {
    const auto& d = run.distortion;
    auto it = layer_counts.find(d.dataset_name);
    if (it == layer_counts.end()) {
      layer_counts.emplace(d.dataset_name,
                           std::make_pair(run.label, d.layer_means.size()));
    } else if (it->second.second != d.layer_means.size()) {
      throw ShapeError("layer count mismatch on dataset '" + d.dataset_name +
                       "': run '" + it->second.first + "' has " +
                       std::to_string(it->second.second) + " layers, run '" +
                       run.label + "' has " +
                       std::to_string(d.layer_means.size()));
    }
  }

  ComparisonTables tables;
  tables.accuracy_csv = "model,dataset,clean,fgsm,pgd\n";
  for (const auto& run : runs) {
    const auto& a = run.accuracy;
    tables.accuracy_csv += run.label + "," + a.dataset_name + "," +
                           format_value(a.clean) + "," +
                           format_value(a.fgsm) + "," + format_value(a.pgd) +
                           "\n";
  }
  tables.distortion_csv = "model,layer_index,mean_distortion\n";
  for (const auto& run : runs) {
    const auto& d = run.distortion;
    for (std::size_t l = 0; l < d.layer_means.size(); ++l) {
      tables.distortion_csv += run.label + "," + std::to_string(l) + "," +
                               format_value(d.layer_means[l]) + "\n";
    }
  }
  return tables;
}

}  // namespace rft
