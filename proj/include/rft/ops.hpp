#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rft/tape.hpp"
#include "rft/tensor.hpp"

namespace rft {

enum class Padding { kSame, kValid };

// How a batch-normalization forward treats statistics:
//   kTrain          - normalize with batch statistics, update running stats
//   kTrainNoUpdate  - normalize with batch statistics, leave running stats
//   kEval           - normalize with running statistics (must exist)
enum class BnMode { kTrain, kTrainNoUpdate, kEval };

// Running mean/variance of one normalization stage. `batches_seen` guards
// eval-mode use before any statistics were recorded.
struct BatchNormState {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  std::int64_t batches_seen = 0;
};

struct BatchNormOut {
  TensorPtr output;      // gamma * normalized + beta
  TensorPtr normalized;  // pre-affine normalized value z
};

// 2-D cross-correlation, stride 1. input [N,C,H,W], kernel [F,C,kh,kw],
// bias [F]. kSame keeps the spatial size (zero padding, split floor/ceil);
// kValid shrinks it by the kernel extent.
TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, Padding padding);

// Non-overlapping 2x2 window maxima over [N,C,H,W] with even H and W.
// Backward routes each window's gradient to its argmax position only.
TensorPtr maxpool2x2(Tape& tape, const TensorPtr& input);

// Affine map: input [N,D] x weight [D,U] + bias [U] -> [N,U].
TensorPtr dense(Tape& tape, const TensorPtr& input, const TensorPtr& weight,
                const TensorPtr& bias);

// Elementwise max(0, x). The subgradient at exactly 0 is 0.
TensorPtr relu(Tape& tape, const TensorPtr& input);

// Batch normalization over the feature axis: per channel for [N,C,H,W]
// inputs, per unit for [N,U]. Returns both the affine output and the
// pre-affine normalized value; gradients flow through either or both.
// `momentum` is the retained fraction of the old running statistic
// (new = momentum * old + (1 - momentum) * batch).
BatchNormOut batchnorm(Tape& tape, const TensorPtr& input,
                       const TensorPtr& gamma, const TensorPtr& beta,
                       BatchNormState& state, BnMode mode, float momentum,
                       float eps);

// Mean over the batch of -log softmax(logits)[label], stabilized by
// max-subtraction. logits [N,K]; labels must lie in [0, K).
TensorPtr softmax_cross_entropy(Tape& tape, const TensorPtr& logits,
                                const std::vector<int>& labels);

// View of `input` with a new shape (same element count), tape-connected.
TensorPtr reshape(Tape& tape, const TensorPtr& input, Shape shape);

// Elementwise helpers used to assemble objectives.
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape& tape, const TensorPtr& a, float factor);
TensorPtr sum_all(Tape& tape, const TensorPtr& a);

// Per-feature mean of (a - b)^2 over batch and spatial positions:
// [N,C,H,W] -> [C], [N,U] -> [U]. This is the d_j vector of one
// normalization layer given its clean and perturbed normalized values.
TensorPtr feature_mean_sq_diff(Tape& tape, const TensorPtr& a,
                               const TensorPtr& b);

// Classical momentum update: v <- momentum * v + g; p <- p - lr * v.
void sgd_step(std::span<float> param, std::span<const float> grad,
              std::span<float> velocity, float learning_rate, float momentum);

// Convenience wrapper applying sgd_step across a parameter list.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<TensorPtr> params, float learning_rate,
               float momentum);

  void step();
  void zero_grad();

  float learning_rate() const { return learning_rate_; }

 private:
  std::vector<TensorPtr> params_;
  std::vector<std::vector<float>> velocities_;
  float learning_rate_;
  float momentum_;
};

}  // namespace rft
