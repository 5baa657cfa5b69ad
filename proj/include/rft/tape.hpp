#pragma once

#include <functional>
#include <vector>

#include "rft/tensor.hpp"

namespace rft {

// Reverse-mode gradient tape. Operations append records in creation order;
// backward replays the closures exactly once each, in reverse, accumulating
// gradients into every tensor on the path that needs them. Gradients sum over
// fan-out because every closure adds into its inputs' buffers.
//
// A tape is owned by one logical thread. After backward (and clear) it can be
// reused for a fresh forward pass.
class Tape {
 public:
  // Appends one operation record. `outputs` are the tensors the operation
  // produced; `backward` applies the chain rule from their gradients to the
  // operation's inputs. Operations only record when some input needs a
  // gradient, so forward-only evaluation stays record-free.
  void record(std::vector<TensorPtr> outputs, std::function<void()> backward) {
    records_.push_back({std::move(outputs), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and runs the recorded closures in reverse
  // creation order. Closures whose outputs never received a gradient are
  // skipped; they cannot contribute.
  void backward(const TensorPtr& loss) {
    if (loss->numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " +
                       loss->shape().str());
    }
    loss->grad()[0] = 1.0f;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      bool live = false;
      for (const auto& out : it->outputs) {
        if (out->has_grad()) {
          live = true;
          break;
        }
      }
      if (live) it->backward();
    }
  }

  // Drops all records (and with them the captured intermediate tensors).
  void clear() { records_.clear(); }

  std::size_t size() const { return records_.size(); }

 private:
  struct Record {
    std::vector<TensorPtr> outputs;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
};

}  // namespace rft
