#pragma once

#include <filesystem>
#include <string>

#include "rft/dataset.hpp"
#include "rft/model.hpp"
#include "rft/synth.hpp"

namespace fixtures {

// Shared synthetic data directory, written once per process.
inline const std::filesystem::path& data_dir() {
  static const std::filesystem::path dir = [] {
    std::filesystem::path d =
        std::filesystem::temp_directory_path() / "rft_dataset_fixtures";
    std::filesystem::create_directories(d);
    rft::write_synth_mnist(d.string(), 6000, 400, 91);
    rft::write_synth_cifar10(d.string(), 0, 92);
    return d;
  }();
  return dir;
}

// Small net over 28x28 inputs for fast end-to-end training tests.
inline rft::NetworkSpec tiny28_spec(int conv_filters = 8, int hidden = 32) {
  rft::NetworkSpec s;
  s.name = "tiny28";
  s.input_channels = 1;
  s.input_height = 28;
  s.input_width = 28;
  s.classes = 10;
  rft::LayerSpec conv;
  conv.kind = rft::LayerKind::kConv;
  conv.kh = 3;
  conv.kw = 3;
  conv.in_channels = 1;
  conv.out_channels = conv_filters;
  conv.normalize = true;
  conv.activation = rft::Activation::kRelu;
  rft::LayerSpec pool;
  pool.kind = rft::LayerKind::kMaxpool;
  rft::LayerSpec fc;
  fc.kind = rft::LayerKind::kDense;
  fc.units = hidden;
  fc.normalize = true;
  fc.activation = rft::Activation::kRelu;
  rft::LayerSpec out;
  out.kind = rft::LayerKind::kSoftmaxOutput;
  s.layers = {conv, pool, fc, out};
  s.validate();
  return s;
}

}  // namespace fixtures
