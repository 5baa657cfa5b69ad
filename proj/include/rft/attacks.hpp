#pragma once

#include <vector>

#include "rft/model.hpp"
#include "rft/tensor.hpp"

namespace rft {

// l-infinity attack budget and iteration schedule, in input units (so 0.2 on
// unit-interval images, 4 on raw 0-255 images).
struct AttackConfig {
  float epsilon = 0.0f;
  float step_size = 0.0f;
  int steps = 1;
  float clip_min = 0.0f;
  float clip_max = 1.0f;

  void validate() const;
};

// One signed gradient step of size epsilon: x* = clip(x + eps * sign(dJ/dx)).
// The model runs in eval mode with frozen parameters, so parameters and
// running statistics are untouched and the result is per-example
// deterministic. sign(0) = 0.
TensorPtr fgsm(Model& model, const TensorPtr& x, const std::vector<int>& labels,
               const AttackConfig& cfg);

// cfg.steps iterations of step_size-sized signed gradient steps, each
// projected onto the eps-ball around the original x intersected with the
// clip range. Starts at x itself (no random start). steps=1 with
// step_size=epsilon is bit-identical to fgsm.
TensorPtr pgd(Model& model, const TensorPtr& x, const std::vector<int>& labels,
              const AttackConfig& cfg);

}  // namespace rft
