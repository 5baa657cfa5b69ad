#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <doctest.h>

#include "fd_composite.hpp"
#include "fixtures.hpp"
#include "rft/dataset.hpp"
#include "rft/errors.hpp"
#include "rft/model.hpp"
#include "rft/ops.hpp"
#include "rft/rng.hpp"
#include "rft/tape.hpp"
#include "rft/training.hpp"

using namespace rft;

namespace {

TensorPtr uniform_batch(RngStream& rng, const Shape& shape, float lo, float hi) {
  auto t = Tensor::zeros(shape);
  for (auto& v : t->data()) v = lo + (hi - lo) * rng.next_float();
  return t;
}

LabeledBatch balanced_batch(RngStream& rng, const NetworkSpec& spec, int per_class) {
  LabeledBatch b;
  const int n = per_class * spec.classes;
  b.inputs = uniform_batch(
      rng, Shape{n, spec.input_channels, spec.input_height, spec.input_width},
      0.0f, 1.0f);
  b.labels.resize(n);
  for (int i = 0; i < n; ++i) b.labels[i] = i % spec.classes;
  return b;
}

AttackConfig unit_attack(float eps) {
  AttackConfig a;
  a.epsilon = eps;
  a.step_size = eps;
  a.steps = 1;
  a.clip_min = 0.0f;
  a.clip_max = 1.0f;
  return a;
}

// Twin models built from the same seed start bitwise identical.
Model twin(std::uint64_t seed, const NetworkSpec& spec) {
  RngStream rng(seed);
  return Model::build(spec, rng);
}

}  // namespace

TEST_CASE("standard loss starts near ln(10) and recomposes exactly") {
  auto spec = fixtures::tiny28_spec();
  RngStream rng(601);
  auto model_a = twin(41, spec);
  auto model_b = twin(41, spec);
  auto batch = balanced_batch(rng, spec, 10);

  Tape tape;
  auto loss = loss_standard(model_a, tape, batch);
  const double v = loss->item();
  CHECK(v >= 0.0);
  CHECK(std::abs(v - std::log(10.0)) <= 0.2);

  // independent recomposition on an identical twin
  Tape tape_b;
  auto r = model_b.forward(tape_b, batch.inputs, ForwardOptions{});
  auto manual = softmax_cross_entropy(tape_b, r.logits, batch.labels);
  CHECK(manual->item() == v);
}

TEST_CASE("adversarial loss degeneracies and recomposition") {
  auto spec = fixtures::tiny28_spec(4, 16);
  RngStream rng(602);
  auto batch = balanced_batch(rng, spec, 3);

  SUBCASE("alpha=1 equals the standard loss exactly") {
    auto a = twin(42, spec);
    auto b = twin(42, spec);
    ObjectiveConfig cfg;
    cfg.kind = ObjectiveKind::kAdversarial;
    cfg.alpha = 1.0f;
    cfg.attack = unit_attack(0.1f);
    Tape ta, tb;
    auto adv = loss_adversarial(a, ta, batch, cfg);
    auto std_loss = loss_standard(b, tb, batch);
    CHECK(adv.total->item() == std_loss->item());
  }

  SUBCASE("epsilon=0 collapses to the standard loss") {
    auto a = twin(43, spec);
    auto b = twin(43, spec);
    ObjectiveConfig cfg;
    cfg.kind = ObjectiveKind::kAdversarial;
    cfg.alpha = 0.2f;
    cfg.attack = unit_attack(0.0f);
    Tape ta, tb;
    auto adv = loss_adversarial(a, ta, batch, cfg);
    auto std_loss = loss_standard(b, tb, batch);
    CHECK(std::abs(adv.total->item() - std_loss->item()) <= 1e-6);
  }

  SUBCASE("alpha=0.2 recomposes from two independent evaluations") {
    auto a = twin(44, spec);
    auto b = twin(44, spec);
    ObjectiveConfig cfg;
    cfg.kind = ObjectiveKind::kAdversarial;
    cfg.alpha = 0.2f;
    cfg.attack = unit_attack(0.1f);
    Tape ta;
    auto adv = loss_adversarial(a, ta, batch, cfg);

    // replay the same sequence by hand on the twin
    Tape tb;
    auto clean = b.forward(tb, batch.inputs, ForwardOptions{});
    auto j_clean = softmax_cross_entropy(tb, clean.logits, batch.labels);
    auto x_adv = fgsm(b, batch.inputs, batch.labels, cfg.attack);
    ForwardOptions nu;
    nu.bn_mode = BnMode::kTrainNoUpdate;
    auto advr = b.forward(tb, x_adv, nu);
    auto j_adv = softmax_cross_entropy(tb, advr.logits, batch.labels);
    const double expected = 0.2 * j_clean->item() + 0.8 * j_adv->item();
    CHECK(std::abs(adv.total->item() - expected) <= 1e-6);
    CHECK(adv.clean == j_clean->item());
    CHECK(adv.adversarial == j_adv->item());
  }
}

TEST_CASE("distortion term matches hand computation and is symmetric") {
  Tape tape;
  // two layers, 2 features each, batch of 2
  auto c1 = Tensor::from_data(Shape{2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  auto a1 = Tensor::from_data(Shape{2, 2}, {1.5f, 1.0f, 2.0f, 6.0f});
  auto c2 = Tensor::from_data(Shape{2, 2}, {0.0f, 1.0f, 0.0f, 1.0f});
  auto a2 = Tensor::from_data(Shape{2, 2}, {0.5f, 1.0f, -0.5f, 3.0f});
  const std::vector<float> betas = {1.0f, 2.0f};

  // layer 1: d_11 = ((1-1.5)^2 + (3-2)^2)/2 = 0.625, d_12 = ((2-1)^2+(4-6)^2)/2 = 2.5
  // layer 2: d_21 = (0.25+0.25)/2 = 0.25, d_22 = (0+4)/2 = 2
  const double want = 1.0 * (0.625 + 2.5) + 2.0 * (0.25 + 2.0);

  auto term = distortion_term(tape, {c1, c2}, {a1, a2}, betas);
  REQUIRE(term.layer_sums.size() == 2);
  CHECK(std::abs(term.layer_sums[0]->item() - 3.125) <= 1e-6);
  CHECK(std::abs(term.layer_sums[1]->item() - 2.25) <= 1e-6);
  CHECK(std::abs(term.total->item() - want) <= 1e-6);

  SUBCASE("symmetry") {
    Tape t2;
    auto flipped = distortion_term(t2, {a1, a2}, {c1, c2}, betas);
    CHECK(flipped.total->item() == term.total->item());
  }

  SUBCASE("identical taps give zero") {
    Tape t2;
    auto zero = distortion_term(t2, {c1, c2}, {c1, c2}, betas);
    CHECK(zero.total->item() == 0.0);
  }

  SUBCASE("zero betas give zero total but keep layer sums") {
    Tape t2;
    auto z = distortion_term(t2, {c1, c2}, {a1, a2}, {0.0f, 0.0f});
    CHECK(z.total->item() == 0.0);
    CHECK(z.layer_sums[0]->item() > 0.0);
  }

  SUBCASE("length mismatches are rejected") {
    Tape t2;
    CHECK_THROWS_AS(distortion_term(t2, {c1, c2}, {a1}, betas), ShapeError);
    CHECK_THROWS_AS(distortion_term(t2, {c1, c2}, {a1, a2}, {1.0f}),
                    ConfigError);
  }

  SUBCASE("non-negative on random taps") {
    RngStream rng(603);
    Tape t2;
    auto ra = uniform_batch(rng, Shape{3, 4}, -2.0f, 2.0f);
    auto rb = uniform_batch(rng, Shape{3, 4}, -2.0f, 2.0f);
    auto t = distortion_term(t2, {ra}, {rb}, {0.7f});
    CHECK(t.total->item() >= 0.0);
  }
}

TEST_CASE("regularized loss degeneracies") {
  auto spec = fixtures::tiny28_spec(4, 16);
  RngStream rng(604);
  auto batch = balanced_batch(rng, spec, 3);

  SUBCASE("zero betas reduce to the adversarial loss") {
    auto a = twin(45, spec);
    auto b = twin(45, spec);
    ObjectiveConfig reg;
    reg.kind = ObjectiveKind::kDistortionRegularized;
    reg.alpha = 0.2f;
    reg.betas = {0.0f, 0.0f};
    reg.attack = unit_attack(0.1f);
    ObjectiveConfig adv;
    adv.kind = ObjectiveKind::kAdversarial;
    adv.alpha = 0.2f;
    adv.attack = unit_attack(0.1f);
    Tape ta, tb;
    auto lr = loss_distortion_regularized(a, ta, batch, reg);
    auto la = loss_adversarial(b, tb, batch, adv);
    CHECK(std::abs(lr.total->item() - la.total->item()) <= 1e-6);
    CHECK(lr.distortion == 0.0);
  }

  SUBCASE("epsilon=0 reduces to the standard loss") {
    auto a = twin(46, spec);
    auto b = twin(46, spec);
    ObjectiveConfig reg;
    reg.kind = ObjectiveKind::kDistortionRegularized;
    reg.alpha = 0.2f;
    reg.betas = {0.3f, 0.7f};
    reg.attack = unit_attack(0.0f);
    Tape ta, tb;
    auto lr = loss_distortion_regularized(a, ta, batch, reg);
    auto ls = loss_standard(b, tb, batch);
    CHECK(std::abs(lr.total->item() - ls->item()) <= 1e-6);
    CHECK(lr.distortion == 0.0);  // x* = x makes both passes identical
  }
}

TEST_CASE("composite objective gradient matches finite differences") {
  auto report = fdcheck::run_composite_fd();
  REQUIRE_MESSAGE(report.ok, report.detail);
  CHECK(report.coords_checked > 300);
  MESSAGE("composite fd: " << report.coords_checked
                           << " coordinates, worst rel diff "
                           << report.worst_rel);
}

TEST_CASE("attack generation does not leak into running statistics") {
  auto spec = fixtures::tiny28_spec(4, 16);
  RngStream rng(605);
  auto batch = balanced_batch(rng, spec, 3);

  auto a = twin(47, spec);
  auto b = twin(47, spec);

  ObjectiveConfig reg;
  reg.kind = ObjectiveKind::kDistortionRegularized;
  reg.alpha = 0.2f;
  reg.betas = {0.3f, 0.7f};
  reg.attack = unit_attack(0.15f);
  Tape ta;
  loss_distortion_regularized(a, ta, batch, reg);

  // the clean train-mode pass alone produces the same statistics
  Tape tb;
  b.forward(tb, batch.inputs, ForwardOptions{});

  auto sa = a.bn_states();
  auto sb = b.bn_states();
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    REQUIRE(sa[i]->batches_seen == sb[i]->batches_seen);
    REQUIRE(std::memcmp(sa[i]->running_mean.data(), sb[i]->running_mean.data(),
                        sa[i]->running_mean.size() * sizeof(float)) == 0);
    REQUIRE(std::memcmp(sa[i]->running_var.data(), sb[i]->running_var.data(),
                        sa[i]->running_var.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("objective and train config validation") {
  ObjectiveConfig cfg;
  cfg.kind = ObjectiveKind::kDistortionRegularized;
  cfg.alpha = 0.2f;
  cfg.betas = {1e-7f, 1e-7f, 3e-7f};
  cfg.attack = unit_attack(0.2f);
  CHECK_NOTHROW(cfg.validate(3));
  CHECK_THROWS_AS(cfg.validate(11), ConfigError);

  auto bad = cfg;
  bad.alpha = 1.5f;
  CHECK_THROWS_AS(bad.validate(3), ConfigError);
  bad = cfg;
  bad.betas[1] = -1e-7f;
  CHECK_THROWS_AS(bad.validate(3), ConfigError);
  bad = cfg;
  bad.attack.epsilon = -1.0f;
  CHECK_THROWS_AS(bad.validate(3), ConfigError);

  // standard objective ignores the adversarial fields entirely
  ObjectiveConfig std_cfg;
  std_cfg.kind = ObjectiveKind::kStandard;
  std_cfg.alpha = 99.0f;
  std_cfg.betas = {-1.0f};
  CHECK_NOTHROW(std_cfg.validate(3));

  CHECK(objective_kind_from_name("standard") == ObjectiveKind::kStandard);
  CHECK(objective_kind_from_name("adversarial") == ObjectiveKind::kAdversarial);
  CHECK(objective_kind_from_name("distortion-regularized") ==
        ObjectiveKind::kDistortionRegularized);
  CHECK_THROWS_AS(objective_kind_from_name("fancy"), ConfigError);

  TrainConfig tc;
  CHECK_NOTHROW(tc.validate());
  auto tbad = tc;
  tbad.epochs = 0;
  CHECK_THROWS_AS(tbad.validate(), ConfigError);
  tbad = tc;
  tbad.batch_size = 0;
  CHECK_THROWS_AS(tbad.validate(), ConfigError);
  tbad = tc;
  tbad.learning_rate = 0.0f;
  CHECK_THROWS_AS(tbad.validate(), ConfigError);
  tbad = tc;
  tbad.momentum = 1.0f;
  CHECK_THROWS_AS(tbad.validate(), ConfigError);
  tbad = tc;
  tbad.checkpoint_every = 1;
  CHECK_THROWS_AS(tbad.validate(), ConfigError);  // dir missing
}

TEST_CASE("training improves accuracy deterministically") {
  auto full = load_mnist(fixtures::data_dir().string(), "train");
  RngStream sub_rng(606);
  auto data = subset(full, 1000, sub_rng);
  auto spec = fixtures::tiny28_spec();

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 64;
  tc.learning_rate = 0.02f;
  tc.momentum = 0.9f;
  tc.seed = 7;
  ObjectiveConfig obj;
  obj.kind = ObjectiveKind::kStandard;

  auto run = [&](Model& m) { return train(m, data, obj, tc); };
  auto a = twin(48, spec);
  auto b = twin(48, spec);
  auto ha = run(a);
  auto hb = run(b);

  // per-epoch records: loss, accuracy
  REQUIRE(ha.size() == 4);
  double acc1 = -1, acc2 = -1;
  for (const auto& r : ha) {
    if (r.metric == "accuracy" && r.epoch == 1) acc1 = r.value;
    if (r.metric == "accuracy" && r.epoch == 2) acc2 = r.value;
  }
  CHECK(acc1 >= 0.0);
  CHECK(acc2 > acc1);

  REQUIRE(hb.size() == ha.size());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].epoch == hb[i].epoch);
    CHECK(ha[i].metric == hb[i].metric);
    CHECK(ha[i].value == hb[i].value);
  }
  // trained parameters are bitwise identical too
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(std::memcmp(pa[i]->data().data(), pb[i]->data().data(),
                        pa[i]->numel() * sizeof(float)) == 0);
  }
}

TEST_CASE("training with the regularized objective emits its loss terms") {
  auto full = load_mnist(fixtures::data_dir().string(), "train");
  RngStream sub_rng(607);
  auto data = subset(full, 200, sub_rng);
  auto spec = fixtures::tiny28_spec(4, 16);
  auto model = twin(49, spec);

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 32;
  tc.seed = 8;
  ObjectiveConfig obj;
  obj.kind = ObjectiveKind::kDistortionRegularized;
  obj.alpha = 0.2f;
  obj.betas = {1e-3f, 1e-3f};
  obj.attack = unit_attack(0.2f);

  std::vector<MetricRecord> sunk;
  auto history =
      train(model, data, obj, tc, [&](const MetricRecord& r) { sunk.push_back(r); });
  REQUIRE(history.size() == 5);
  CHECK(history.size() == sunk.size());
  bool saw_distortion = false;
  for (const auto& r : history) {
    if (r.metric == "loss_distortion") {
      saw_distortion = true;
      CHECK(r.value >= 0.0);
    }
  }
  CHECK(saw_distortion);
}

TEST_CASE("training aborts with diagnostics on non-finite loss") {
  // a pure linear readout lets the poisoned pixel reach the loss directly
  NetworkSpec spec;
  spec.name = "probe";
  spec.input_channels = 1;
  spec.input_height = 2;
  spec.input_width = 2;
  spec.classes = 3;
  LayerSpec out;
  out.kind = LayerKind::kSoftmaxOutput;
  spec.layers = {out};
  spec.validate();
  auto model = twin(50, spec);

  DatasetHandle data;
  data.name = "mnist";
  data.split = "train";
  data.channels = 1;
  data.height = 2;
  data.width = 2;
  data.clip_max = 1.0f;
  data.images.assign(64 * 4, 0.5f);
  data.images[3] = INFINITY;
  data.labels.assign(64, 1);

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 64;
  ObjectiveConfig obj;
  obj.kind = ObjectiveKind::kStandard;
  CHECK_THROWS_WITH_AS(train(model, data, obj, tc),
                       doctest::Contains("epoch"), TrainingError);
}

TEST_CASE("training checkpoints on cadence") {
  namespace fs = std::filesystem;
  auto full = load_mnist(fixtures::data_dir().string(), "train");
  RngStream sub_rng(608);
  auto data = subset(full, 128, sub_rng);
  auto spec = fixtures::tiny28_spec(4, 16);
  auto model = twin(51, spec);

  fs::path dir = fs::temp_directory_path() / "rft_train_ckpt";
  fs::create_directories(dir);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 64;
  tc.seed = 9;
  tc.checkpoint_every = 1;
  tc.checkpoint_dir = dir.string();
  ObjectiveConfig obj;
  obj.kind = ObjectiveKind::kStandard;
  train(model, data, obj, tc);

  for (int e = 1; e <= 2; ++e) {
    auto path = dir / ("epoch-" + std::to_string(e) + ".ckpt");
    REQUIRE(fs::exists(path));
    auto loaded = Model::load_checkpoint(spec, path.string());
    CHECK(loaded.metadata().at("epoch") == std::to_string(e));
    CHECK(loaded.metadata().at("objective") == "standard");
  }
}
