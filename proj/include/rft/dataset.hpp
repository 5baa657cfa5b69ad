#pragma once

#include <string>
#include <vector>

#include "rft/rng.hpp"
#include "rft/tensor.hpp"

namespace rft {

struct LabeledBatch {
  TensorPtr inputs;         // [N,C,H,W] in dataset units
  std::vector<int> labels;  // values in [0,10)
};

// Immutable in-memory dataset. clip_min/clip_max record the scaling the
// attack budgets assume: [0,1] for mnist, [0,255] for cifar10.
struct DatasetHandle {
  std::string name;
  std::string split;
  int channels = 0;
  int height = 0;
  int width = 0;
  float clip_min = 0.0f;
  float clip_max = 1.0f;
  std::vector<float> images;  // size() * channels * height * width
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  int example_numel() const { return channels * height * width; }
};

// IDX pair from dir using the canonical file names (train-* for "train",
// t10k-* for "test"). Validates magics 2051/2049, counts, and dimensions;
// pixel bytes are scaled to [0,1].
DatasetHandle load_mnist(const std::string& dir, const std::string& split);

// IDX image/label pair at arbitrary paths, validated the same way. name and
// split are left empty for the caller to stamp.
DatasetHandle load_idx_pair(const std::string& images_path,
                            const std::string& labels_path);

// CIFAR-10 binary batches from dir: data_batch_1..5.bin for "train",
// test_batch.bin for "test", each exactly 10000 records of 3073 bytes
// (label byte + channel-major pixels). Pixels stay on the raw 0-255 scale.
DatasetHandle load_cifar10(const std::string& dir, const std::string& split);

// Writes a single-channel handle back out as an IDX pair. Data loaded from
// IDX files reproduces the source bytes exactly.
void save_mnist_idx(const DatasetHandle& data, const std::string& images_path,
                    const std::string& labels_path);

// One deterministic pass over the dataset in batch_size chunks; the final
// batch may be short. shuffle draws a single permutation from rng up front.
class Batcher {
 public:
  Batcher(const DatasetHandle& data, int batch_size, bool shuffle,
          RngStream& rng);

  // Fills out with the next batch; false once the pass is complete.
  bool next(LabeledBatch& out);
  int batch_count() const;

 private:
  const DatasetHandle* data_;
  std::vector<int> order_;
  int batch_size_;
  std::size_t pos_ = 0;
};

// Seeded sample of n examples without replacement, preserving source order.
// n = size returns the dataset unchanged.
DatasetHandle subset(const DatasetHandle& data, int n, RngStream& rng);

}  // namespace rft
