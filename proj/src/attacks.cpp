#include "rft/attacks.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "rft/errors.hpp"
#include "rft/ops.hpp"
#include "rft/tape.hpp"

namespace rft {

void AttackConfig::validate() const {
  if (!std::isfinite(epsilon) || epsilon < 0.0f) {
    throw ConfigError("attack epsilon must be finite and non-negative, got " +
                      std::to_string(epsilon));
  }
  if (!std::isfinite(step_size) || step_size < 0.0f) {
    throw ConfigError("attack step_size must be finite and non-negative, got " +
                      std::to_string(step_size));
  }
  if (steps < 1) {
    throw ConfigError("attack steps must be at least 1, got " +
                      std::to_string(steps));
  }
  if (!std::isfinite(clip_min) || !std::isfinite(clip_max) ||
      !(clip_min < clip_max)) {
    throw ConfigError("attack clip range must be finite with clip_min < clip_max");
  }
}

namespace {

// Per-element bounds for the eps-ball around x0 intersected with the clip
// range. Nudged by ulps so that the float differences bound - x0 and
// x0 - bound never exceed eps; the returned example then satisfies the
// budget exactly under float comparison.
void ball_bounds(const float* x0, std::size_t n, float eps, float clip_min,
                 float clip_max, std::vector<float>& lo, std::vector<float>& hi) {
  lo.resize(n);
  hi.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    float h = x0[i] + eps;
    while (h - x0[i] > eps) h = std::nextafterf(h, -INFINITY);
    float l = x0[i] - eps;
    while (x0[i] - l > eps) l = std::nextafterf(l, INFINITY);
    hi[i] = std::min(h, clip_max);
    lo[i] = std::max(l, clip_min);
  }
}

TensorPtr ascend(Model& model, const TensorPtr& x0,
                 const std::vector<int>& labels, float step_size, int steps,
                 const std::vector<float>& lo, const std::vector<float>& hi) {
  ForwardOptions opts;
  opts.bn_mode = BnMode::kEval;
  opts.freeze_params = true;

  TensorPtr cur = x0->clone();
  {
    auto c = cur->data();
    for (std::size_t i = 0; i < c.size(); ++i) {
      c[i] = std::min(std::max(c[i], lo[i]), hi[i]);
    }
  }
  for (int step = 0; step < steps; ++step) {
    cur->set_requires_grad(true);
    Tape tape;
    auto result = model.forward(tape, cur, opts);
    auto loss = softmax_cross_entropy(tape, result.logits, labels);
    tape.backward(loss);

    auto next = Tensor::zeros(x0->shape());
    auto g = cur->grad();
    auto c = cur->data();
    auto out = next->data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      float s = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
      float v = c[i] + step_size * s;
      out[i] = std::min(std::max(v, lo[i]), hi[i]);
    }
    cur = next;
  }
  return cur;
}

TensorPtr run_attack(Model& model, const TensorPtr& x,
                     const std::vector<int>& labels, float eps, float step_size,
                     int steps, float clip_min, float clip_max) {
  if (x->shape().rank() < 2) {
    throw ShapeError("attack input must be batched, got rank " +
                     std::to_string(x->shape().rank()));
  }
  if (static_cast<int>(labels.size()) != x->shape().dim(0)) {
    throw ShapeError("attack got " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(x->shape().dim(0)));
  }
  std::vector<float> lo, hi;
  ball_bounds(x->data().data(), x->numel(), eps, clip_min, clip_max, lo, hi);
  return ascend(model, x, labels, step_size, steps, lo, hi);
}

}  // namespace

TensorPtr fgsm(Model& model, const TensorPtr& x, const std::vector<int>& labels,
               const AttackConfig& cfg) {
  cfg.validate();
  return run_attack(model, x, labels, cfg.epsilon, cfg.epsilon, 1, cfg.clip_min,
                    cfg.clip_max);
}

TensorPtr pgd(Model& model, const TensorPtr& x, const std::vector<int>& labels,
              const AttackConfig& cfg) {
  cfg.validate();
  return run_attack(model, x, labels, cfg.epsilon, cfg.step_size, cfg.steps,
                    cfg.clip_min, cfg.clip_max);
}

}  // namespace rft
