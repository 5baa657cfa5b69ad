#pragma once

#include <cstdint>
#include <string>

namespace rft {

// Procedurally rendered digit-glyph datasets written in the exact on-disk
// layouts the loaders expect (IDX pair per split, CIFAR-10 binary batches).
// The renders are jittered and noisy but linearly separable, so the full
// pipeline can train and evaluate without any external files.

// Writes train-images-idx3-ubyte / train-labels-idx1-ubyte and the t10k pair
// into dir. Counts are free; the canonical sizes are 60000/10000.
void write_synth_mnist(const std::string& dir, int train_count, int test_count,
                       std::uint64_t seed);

// Writes test_batch.bin and data_batch_1..train_files.bin into dir. Each file
// holds exactly 10000 records; train_files must be in [0,5].
void write_synth_cifar10(const std::string& dir, int train_files,
                         std::uint64_t seed);

}  // namespace rft
