#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "rft/errors.hpp"
#include "rft/eval.hpp"
#include "rft/ops.hpp"
#include "rft/tape.hpp"
#include "rft/training.hpp"

using namespace rft;

namespace {

// Noise images with labels assigned round-robin, so any label-independent
// predictor scores 1/classes on average.
DatasetHandle noise_handle(const std::string& name, int n, int channels,
                           int height, int width, int classes, float lo,
                           float hi, std::uint64_t seed) {
  DatasetHandle d;
  d.name = name;
  d.split = "test";
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.clip_min = lo;
  d.clip_max = hi;
  RngStream rng(seed);
  d.images.resize(static_cast<std::size_t>(n) * channels * height * width);
  for (auto& v : d.images) v = lo + (hi - lo) * rng.next_float();
  d.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) d.labels[static_cast<std::size_t>(i)] = i % classes;
  return d;
}

NetworkSpec small_spec(int classes) {
  NetworkSpec s;
  s.name = "small8";
  s.input_channels = 1;
  s.input_height = 8;
  s.input_width = 8;
  s.classes = classes;
  LayerSpec conv;
  conv.kind = LayerKind::kConv;
  conv.kh = 3;
  conv.kw = 3;
  conv.in_channels = 1;
  conv.out_channels = 4;
  conv.normalize = true;
  conv.activation = Activation::kRelu;
  LayerSpec pool;
  pool.kind = LayerKind::kMaxpool;
  LayerSpec fc;
  fc.kind = LayerKind::kDense;
  fc.units = 16;
  fc.normalize = true;
  fc.activation = Activation::kRelu;
  LayerSpec out;
  out.kind = LayerKind::kSoftmaxOutput;
  s.layers = {conv, pool, fc, out};
  s.validate();
  return s;
}

// One train-mode pass populates running statistics without touching weights.
void warm_stats(Model& model, const DatasetHandle& data, int batch_size,
                int passes = 1) {
  RngStream rng(0);
  Batcher batcher(data, batch_size, false, rng);
  LabeledBatch batch;
  REQUIRE(batcher.next(batch));
  for (int i = 0; i < passes; ++i) {
    Tape tape;
    model.forward(tape, batch.inputs, ForwardOptions{BnMode::kTrain, true});
  }
}

std::vector<float> flatten_state(Model& model) {
  std::vector<float> out;
  for (const auto& p : model.parameters()) {
    auto d = p->data();
    out.insert(out.end(), d.begin(), d.end());
  }
  for (auto* st : model.bn_states()) {
    out.insert(out.end(), st->running_mean.begin(), st->running_mean.end());
    out.insert(out.end(), st->running_var.begin(), st->running_var.end());
    out.push_back(static_cast<float>(st->batches_seen));
  }
  return out;
}

AttackConfig unit_attack(float eps, float step, int steps) {
  AttackConfig cfg;
  cfg.epsilon = eps;
  cfg.step_size = step;
  cfg.steps = steps;
  cfg.clip_min = 0.0f;
  cfg.clip_max = 1.0f;
  return cfg;
}

}  // namespace

TEST_CASE("canonical attack budgets follow the dataset") {
  DatasetHandle mnist;
  mnist.name = "mnist";
  mnist.clip_min = 0.0f;
  mnist.clip_max = 1.0f;
  auto mf = default_fgsm_attack(mnist);
  CHECK(mf.epsilon == 0.2f);
  CHECK(mf.step_size == 0.2f);
  CHECK(mf.steps == 1);
  CHECK(mf.clip_min == 0.0f);
  CHECK(mf.clip_max == 1.0f);
  auto mp = default_pgd_attack(mnist);
  CHECK(mp.epsilon == 0.2f);
  CHECK(mp.step_size == 0.01f);
  CHECK(mp.steps == 20);

  DatasetHandle cifar;
  cifar.name = "cifar10";
  cifar.clip_min = 0.0f;
  cifar.clip_max = 255.0f;
  auto cf = default_fgsm_attack(cifar);
  CHECK(cf.epsilon == 4.0f);
  CHECK(cf.steps == 1);
  auto cp = default_pgd_attack(cifar);
  CHECK(cp.epsilon == 4.0f);
  CHECK(cp.step_size == 1.0f);
  CHECK(cp.steps == 12);
  CHECK(cp.clip_max == 255.0f);

  DatasetHandle other;
  other.name = "svhn";
  CHECK_THROWS_AS(default_pgd_attack(other), ConfigError);
  CHECK_THROWS_AS(default_fgsm_attack(other), ConfigError);
}

TEST_CASE("untrained model scores chance and zero epsilon collapses conditions") {
  auto data = noise_handle("mnist", 1000, 1, 28, 28, 10, 0.0f, 1.0f, 71);
  auto spec = fixtures::tiny28_spec(4, 16);
  RngStream rng(21);
  auto model = Model::build(spec, rng);

  // eval before any statistics exist is an error
  CHECK_THROWS_AS(evaluate_accuracy(model, data), TrainingError);

  warm_stats(model, data, 64);
  auto zero = unit_attack(0.0f, 0.0f, 1);
  auto report = evaluate_accuracy(model, data, zero, zero);
  CHECK(report.sample_count == 1000);
  CHECK(report.dataset_name == "mnist");
  CHECK(report.clean >= 0.0);
  CHECK(report.clean <= 1.0);
  CHECK(std::abs(report.clean - 0.1) <= 0.05);
  CHECK(report.fgsm == report.clean);
  CHECK(report.pgd == report.clean);

  DatasetHandle empty = data;
  empty.images.clear();
  empty.labels.clear();
  CHECK_THROWS_AS(evaluate_accuracy(model, empty), DataError);
  CHECK_THROWS_AS(evaluate_distortions(model, empty), DataError);
  CHECK_THROWS_AS(evaluate_accuracy(model, data, zero, zero, 0), ConfigError);
}

TEST_CASE("zero epsilon distortion report is zero at every layer") {
  auto data = noise_handle("mnist", 200, 1, 28, 28, 10, 0.0f, 1.0f, 72);
  auto spec = fixtures::tiny28_spec(4, 16);
  RngStream rng(22);
  auto model = Model::build(spec, rng);
  warm_stats(model, data, 64);

  auto report = evaluate_distortions(model, data, unit_attack(0.0f, 0.0f, 1));
  CHECK(report.layer_means.size() ==
        static_cast<std::size_t>(spec.normalization_layer_count()));
  CHECK(report.sample_count == 200);
  for (double v : report.layer_means) CHECK(v == 0.0);
}

TEST_CASE("attack conditions degrade a trained model in order") {
  const int classes = 4;
  auto spec = small_spec(classes);
  RngStream rng(23);
  auto model = Model::build(spec, rng);

  // fixed class prototypes plus small noise make a quickly learnable task
  RngStream proto_rng(24);
  std::vector<float> protos(static_cast<std::size_t>(classes) * 64);
  for (auto& v : protos) v = proto_rng.next_float();
  auto draw_example = [&](RngStream& r, int cls, float* dst) {
    for (int i = 0; i < 64; ++i) {
      float v = protos[static_cast<std::size_t>(cls) * 64 + i] +
                0.1f * (r.next_float() - 0.5f);
      dst[i] = std::min(1.0f, std::max(0.0f, v));
    }
  };

  RngStream train_rng(25);
  SgdOptimizer opt(model.parameters(), 0.05f, 0.9f);
  for (int iter = 0; iter < 100; ++iter) {
    const int n = 16;
    auto x = Tensor::zeros(Shape{n, 1, 8, 8});
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = i % classes;
      draw_example(train_rng, i % classes, x->data().data() + i * 64);
    }
    Tape tape;
    auto fr = model.forward(tape, x, ForwardOptions{BnMode::kTrain, false});
    auto loss = softmax_cross_entropy(tape, fr.logits, labels);
    model.zero_grad();
    tape.backward(loss);
    opt.step();
  }

  DatasetHandle test;
  test.name = "proto";
  test.split = "test";
  test.channels = 1;
  test.height = 8;
  test.width = 8;
  test.clip_min = 0.0f;
  test.clip_max = 1.0f;
  const int n_test = 1000;
  test.images.resize(static_cast<std::size_t>(n_test) * 64);
  test.labels.resize(static_cast<std::size_t>(n_test));
  RngStream test_rng(26);
  for (int i = 0; i < n_test; ++i) {
    test.labels[static_cast<std::size_t>(i)] = i % classes;
    draw_example(test_rng, i % classes,
                 test.images.data() + static_cast<std::size_t>(i) * 64);
  }

  auto report = evaluate_accuracy(model, test, unit_attack(0.25f, 0.25f, 1),
                                  unit_attack(0.25f, 0.0625f, 8));
  CHECK(report.clean >= 0.9);
  CHECK(report.fgsm <= report.clean);
  CHECK(report.pgd <= report.fgsm);
  CHECK(report.clean - report.pgd >= 0.1);

  // explicit configs must not consult dataset defaults: "proto" has none
  CHECK_THROWS_AS(evaluate_accuracy(model, test), ConfigError);
}

TEST_CASE("evaluation leaves the model bit-unchanged") {
  auto data = noise_handle("mnist", 120, 1, 28, 28, 10, 0.0f, 1.0f, 73);
  auto spec = fixtures::tiny28_spec(4, 16);
  RngStream rng(27);
  auto model = Model::build(spec, rng);
  warm_stats(model, data, 64);

  auto before = flatten_state(model);
  evaluate_accuracy(model, data, unit_attack(0.1f, 0.1f, 1),
                    unit_attack(0.1f, 0.05f, 3));
  evaluate_distortions(model, data, unit_attack(0.1f, 0.05f, 3));
  auto after = flatten_state(model);
  REQUIRE(before.size() == after.size());
  CHECK(std::memcmp(before.data(), after.data(),
                    before.size() * sizeof(float)) == 0);
}

TEST_CASE("doubling every gamma leaves the distortion report unchanged") {
  // with two classes the loss gradient direction is scale-free, so the
  // attack trajectory is identical and the invariance is tight
  auto data = noise_handle("mnist", 256, 1, 8, 8, 2, 0.0f, 1.0f, 74);
  auto spec = small_spec(2);

  RngStream ra(28);
  auto a = Model::build(spec, ra);
  RngStream rb(28);
  auto b = Model::build(spec, rb);
  // parameter order per layer is weight, bias, gamma, beta
  auto pb = b.parameters();
  for (std::size_t idx : {std::size_t{2}, std::size_t{6}}) {
    for (auto& v : pb[idx]->data()) v *= 2.0f;
  }
  warm_stats(a, data, 64, 30);
  warm_stats(b, data, 64, 30);

  auto cfg = unit_attack(0.15f, 0.05f, 5);
  auto ra_report = evaluate_distortions(a, data, cfg);
  auto rb_report = evaluate_distortions(b, data, cfg);
  REQUIRE(ra_report.layer_means.size() == rb_report.layer_means.size());
  for (std::size_t l = 0; l < ra_report.layer_means.size(); ++l) {
    const double va = ra_report.layer_means[l];
    const double vb = rb_report.layer_means[l];
    CHECK(va > 0.0);
    CHECK(std::abs(va - vb) <= 1e-3 * std::max(va, vb));
  }
}

TEST_CASE("comparison tables reproduce the reference layout") {
  auto make_run = [](const std::string& label, double clean, double fgsm_v,
                     double pgd_v, std::vector<double> means) {
    RunReport run;
    run.label = label;
    run.accuracy.dataset_name = "mnist";
    run.accuracy.sample_count = 10000;
    run.accuracy.clean = clean;
    run.accuracy.fgsm = fgsm_v;
    run.accuracy.pgd = pgd_v;
    run.distortion.dataset_name = "mnist";
    run.distortion.sample_count = 10000;
    run.distortion.layer_means = std::move(means);
    return run;
  };

  auto standard = make_run("standard", 0.9939, 0.0922, 0.0, {0.5, 1.25, 4.0});
  auto adversarial =
      make_run("adversarial", 0.9932, 0.9492, 0.0612, {0.25, 0.5, 1.0});
  auto ours = make_run("ours", 0.9903, 0.9713, 0.9171, {0.125, 0.25, 0.5});

  SUBCASE("three-run fixture") {
    auto tables = compare_runs({standard, adversarial, ours});
    CHECK(tables.accuracy_csv ==
          "model,dataset,clean,fgsm,pgd\n"
          "standard,mnist,0.9939,0.0922,0\n"
          "adversarial,mnist,0.9932,0.9492,0.0612\n"
          "ours,mnist,0.9903,0.9713,0.9171\n");
    CHECK(tables.distortion_csv ==
          "model,layer_index,mean_distortion\n"
          "standard,0,0.5\n"
          "standard,1,1.25\n"
          "standard,2,4\n"
          "adversarial,0,0.25\n"
          "adversarial,1,0.5\n"
          "adversarial,2,1\n"
          "ours,0,0.125\n"
          "ours,1,0.25\n"
          "ours,2,0.5\n");
  }

  SUBCASE("single run passes through") {
    auto tables = compare_runs({standard});
    CHECK(tables.accuracy_csv ==
          "model,dataset,clean,fgsm,pgd\n"
          "standard,mnist,0.9939,0.0922,0\n");
  }

  SUBCASE("identical runs produce identical rows") {
    auto twin = standard;
    twin.label = "standard";
    auto tables = compare_runs({standard, twin});
    const std::string row = "standard,mnist,0.9939,0.0922,0\n";
    CHECK(tables.accuracy_csv == "model,dataset,clean,fgsm,pgd\n" + row + row);
  }

  SUBCASE("mismatched layer counts on one dataset are rejected") {
    auto bad = adversarial;
    bad.distortion.layer_means = {0.25, 0.5};
    CHECK_THROWS_WITH_AS(compare_runs({standard, bad}),
                         doctest::Contains("layer count"), ShapeError);
  }

  SUBCASE("different datasets may differ in depth") {
    auto cifar = ours;
    cifar.label = "cifar-ours";
    cifar.accuracy.dataset_name = "cifar10";
    cifar.distortion.dataset_name = "cifar10";
    cifar.distortion.layer_means.assign(11, 0.5);
    CHECK_NOTHROW(compare_runs({standard, cifar}));
  }

  SUBCASE("empty input is rejected") {
    CHECK_THROWS_AS(compare_runs({}), ConfigError);
  }
}
