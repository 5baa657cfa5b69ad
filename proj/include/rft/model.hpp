#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rft/ops.hpp"
#include "rft/rng.hpp"
#include "rft/tape.hpp"
#include "rft/tensor.hpp"

namespace rft {

enum class LayerKind { kConv, kMaxpool, kDense, kSoftmaxOutput };
enum class Activation { kNone, kRelu };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  // conv
  int kh = 0, kw = 0;
  int in_channels = 0, out_channels = 0;
  Padding padding = Padding::kSame;
  // dense
  int units = 0;
  // conv and dense may carry a normalization stage and an activation
  bool normalize = false;
  Activation activation = Activation::kNone;
};

// Declarative architecture. The layer list must chain shape-wise from the
// input extent to a final softmax-output layer; `validate` checks this and
// every other structural rule, naming the first offending layer.
struct NetworkSpec {
  std::string name;
  int input_channels = 0;
  int input_height = 0;
  int input_width = 0;
  int classes = 10;
  float bn_momentum = 0.9f;
  float bn_eps = 1e-5f;
  std::vector<LayerSpec> layers;

  void validate() const;
  int normalization_layer_count() const;
  // Feature count (channels or units) of each normalization layer, in order.
  std::vector<int> tap_feature_counts() const;

  // Hash of everything that determines parameter shapes and forward
  // semantics; checkpoints store it to refuse incompatible loads.
  std::uint64_t structural_hash() const;

  static NetworkSpec from_json_text(const std::string& text);
  std::string to_json_text() const;
};

struct ForwardOptions {
  BnMode bn_mode = BnMode::kTrain;
  // Run with parameters detached from the tape: input gradients still flow,
  // parameter gradients are neither computed nor accumulated. Used by attack
  // generation, which needs only the input gradient.
  bool freeze_params = false;
};

struct ForwardResult {
  TensorPtr logits;
  // Pre-affine normalized value z of every normalization layer, in network
  // order; tape-connected so gradients flow through them.
  std::vector<TensorPtr> taps;
};

class Model {
 public:
  // He-normal weights (std = sqrt(2 / fan_in)) on hidden layers, small
  // gaussian on the output layer so initial logits are near uniform, zero
  // biases, gamma = 1, beta = 0, empty running statistics. Same seed, same
  // parameters, bitwise.
  static Model build(NetworkSpec spec, RngStream& rng);

  static Model load_checkpoint(const NetworkSpec& spec,
                               const std::string& path);
  void save_checkpoint(
      const std::string& path,
      const std::map<std::string, std::string>& metadata = {}) const;

  const NetworkSpec& spec() const { return spec_; }

  ForwardResult forward(Tape& tape, const TensorPtr& x,
                        const ForwardOptions& opts);

  // Trainable parameters in deterministic order (weights, biases, gammas,
  // betas, layer by layer). Running statistics are not parameters.
  std::vector<TensorPtr> parameters();
  std::int64_t parameter_count() const;
  void zero_grad();

  std::vector<BatchNormState*> bn_states();
  const std::map<std::string, std::string>& metadata() const {
    return metadata_;
  }

 private:
  struct LayerParams {
    TensorPtr weight;
    TensorPtr bias;
    TensorPtr gamma;
    TensorPtr beta;
    BatchNormState bn;
  };

  Model() = default;

  NetworkSpec spec_;
  std::vector<LayerParams> layers_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace rft
