#include "rft/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace rft {
namespace {

using nlohmann::json;

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kMaxpool: return "maxpool";
    case LayerKind::kDense: return "dense";
    case LayerKind::kSoftmaxOutput: return "softmax-output";
  }
  return "?";
}

std::string layer_label(size_t i, const LayerSpec& ls) {
  return "layer " + std::to_string(i) + " (" + kind_name(ls.kind) + ")";
}

// Shape walk shared by validate, build and checkpoint layout. Returns the
// flattened input width of dense layers and the running extent.
struct Extents {
  bool flat = false;
  int c = 0, h = 0, w = 0;
  int units = 0;
  std::int64_t flat_dim() const {
    return flat ? units : static_cast<std::int64_t>(c) * h * w;
  }
};

Extents advance(const NetworkSpec& spec, Extents e, size_t i) {
  const LayerSpec& ls = spec.layers[i];
  switch (ls.kind) {
    case LayerKind::kConv:
      if (ls.padding == Padding::kValid) {
        e.h = e.h - ls.kh + 1;
        e.w = e.w - ls.kw + 1;
      }
      e.c = ls.out_channels;
      break;
    case LayerKind::kMaxpool:
      e.h /= 2;
      e.w /= 2;
      break;
    case LayerKind::kDense:
      e.flat = true;
      e.units = ls.units;
      break;
    case LayerKind::kSoftmaxOutput:
      e.flat = true;
      e.units = spec.classes;
      break;
  }
  return e;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("unknown key \"" + it.key() + "\" in " + ctx);
    }
  }
}

const json& need(const json& obj, const char* key, const std::string& ctx) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ConfigError("missing key \"" + std::string(key) + "\" in " + ctx);
  }
  return *it;
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

void NetworkSpec::validate() const {
  if (input_channels < 1 || input_height < 1 || input_width < 1) {
    throw ConfigError("input extent must be positive, got " +
                      std::to_string(input_channels) + "x" +
                      std::to_string(input_height) + "x" +
                      std::to_string(input_width));
  }
  if (classes < 2) {
    throw ConfigError("classes must be at least 2, got " +
                      std::to_string(classes));
  }
  if (layers.empty() || layers.back().kind != LayerKind::kSoftmaxOutput) {
    throw ConfigError("layer list must end with a softmax-output layer");
  }

  Extents e{false, input_channels, input_height, input_width, 0};
  for (size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& ls = layers[i];
    const std::string at = layer_label(i, ls);
    if (ls.kind == LayerKind::kSoftmaxOutput && i + 1 != layers.size()) {
      throw ConfigError(at + ": softmax-output must be the final layer");
    }
    if (ls.normalize &&
        (ls.kind == LayerKind::kMaxpool ||
         ls.kind == LayerKind::kSoftmaxOutput)) {
      throw ConfigError(at + ": only conv and dense layers can normalize");
    }
    switch (ls.kind) {
      case LayerKind::kConv: {
        if (e.flat) throw ConfigError(at + ": conv after a dense layer");
        if (ls.kh < 1 || ls.kw < 1 || ls.out_channels < 1) {
          throw ConfigError(at + ": kernel extent and filter count must be "
                                 "positive");
        }
        if (ls.in_channels != e.c) {
          throw ConfigError(at + ": in_channels " +
                            std::to_string(ls.in_channels) +
                            " does not match incoming channel count " +
                            std::to_string(e.c));
        }
        if (ls.padding == Padding::kValid && (ls.kh > e.h || ls.kw > e.w)) {
          throw ConfigError(at + ": kernel exceeds incoming extent " +
                            std::to_string(e.h) + "x" + std::to_string(e.w));
        }
        break;
      }
      case LayerKind::kMaxpool: {
        if (e.flat) throw ConfigError(at + ": maxpool after a dense layer");
        if (e.h % 2 != 0 || e.w % 2 != 0) {
          throw ConfigError(at + ": incoming extent " + std::to_string(e.h) +
                            "x" + std::to_string(e.w) + " is not even");
        }
        if (ls.activation != Activation::kNone) {
          throw ConfigError(at + ": maxpool carries no activation");
        }
        break;
      }
      case LayerKind::kDense: {
        if (ls.units < 1) {
          throw ConfigError(at + ": units must be positive");
        }
        break;
      }
      case LayerKind::kSoftmaxOutput: {
        if (ls.activation != Activation::kNone) {
          throw ConfigError(at + ": softmax-output carries no activation");
        }
        break;
      }
    }
    e = advance(*this, e, i);
  }
}

int NetworkSpec::normalization_layer_count() const {
  int n = 0;
  for (const auto& ls : layers) n += ls.normalize ? 1 : 0;
  return n;
}

std::vector<int> NetworkSpec::tap_feature_counts() const {
  std::vector<int> out;
  for (const auto& ls : layers) {
    if (!ls.normalize) continue;
    out.push_back(ls.kind == LayerKind::kConv ? ls.out_channels : ls.units);
  }
  return out;
}

std::uint64_t NetworkSpec::structural_hash() const {
  json j;
  j["input"] = {input_channels, input_height, input_width};
  j["classes"] = classes;
  j["bn"] = {bn_momentum, bn_eps};
  json arr = json::array();
  for (const auto& ls : layers) {
    arr.push_back({kind_name(ls.kind), ls.kh, ls.kw, ls.in_channels,
                   ls.out_channels,
                   ls.padding == Padding::kSame ? "same" : "valid", ls.units,
                   ls.normalize, ls.activation == Activation::kRelu});
  }
  j["layers"] = arr;
  return fnv1a(j.dump());
}

NetworkSpec NetworkSpec::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("network spec is not valid JSON: ") +
                      e.what());
  }
  if (!j.is_object()) throw ConfigError("network spec must be a JSON object");
  check_keys(j,
             {"schema_version", "name", "input", "classes", "bn_momentum",
              "bn_eps", "layers"},
             "network spec");
  if (need(j, "schema_version", "network spec").get<int>() != 1) {
    throw ConfigError("unsupported network spec schema_version");
  }

  NetworkSpec spec;
  spec.name = need(j, "name", "network spec").get<std::string>();
  const json& in = need(j, "input", "network spec");
  check_keys(in, {"channels", "height", "width"}, "input");
  spec.input_channels = need(in, "channels", "input").get<int>();
  spec.input_height = need(in, "height", "input").get<int>();
  spec.input_width = need(in, "width", "input").get<int>();
  spec.classes = j.value("classes", 10);
  spec.bn_momentum = j.value("bn_momentum", 0.9f);
  spec.bn_eps = j.value("bn_eps", 1e-5f);

  const json& layers = need(j, "layers", "network spec");
  if (!layers.is_array() || layers.empty()) {
    throw ConfigError("\"layers\" must be a non-empty array");
  }
  for (size_t i = 0; i < layers.size(); ++i) {
    const json& lj = layers[i];
    const std::string ctx = "layers[" + std::to_string(i) + "]";
    const std::string kind = need(lj, "kind", ctx).get<std::string>();
    LayerSpec ls;
    if (kind == "conv") {
      check_keys(lj,
                 {"kind", "kh", "kw", "in_channels", "out_channels", "padding",
                  "normalize", "activation"},
                 ctx);
      ls.kind = LayerKind::kConv;
      ls.kh = need(lj, "kh", ctx).get<int>();
      ls.kw = need(lj, "kw", ctx).get<int>();
      ls.in_channels = need(lj, "in_channels", ctx).get<int>();
      ls.out_channels = need(lj, "out_channels", ctx).get<int>();
      const std::string pad = lj.value("padding", "same");
      if (pad == "same") {
        ls.padding = Padding::kSame;
      } else if (pad == "valid") {
        ls.padding = Padding::kValid;
      } else {
        throw ConfigError(ctx + ": padding must be \"same\" or \"valid\"");
      }
    } else if (kind == "maxpool") {
      check_keys(lj, {"kind"}, ctx);
      ls.kind = LayerKind::kMaxpool;
    } else if (kind == "dense") {
      check_keys(lj, {"kind", "units", "normalize", "activation"}, ctx);
      ls.kind = LayerKind::kDense;
      ls.units = need(lj, "units", ctx).get<int>();
    } else if (kind == "softmax-output") {
      check_keys(lj, {"kind"}, ctx);
      ls.kind = LayerKind::kSoftmaxOutput;
    } else {
      throw ConfigError(ctx + ": unknown layer kind \"" + kind + "\"");
    }
    if (kind == "conv" || kind == "dense") {
      ls.normalize = lj.value("normalize", false);
      const std::string act = lj.value("activation", "none");
      if (act == "relu") {
        ls.activation = Activation::kRelu;
      } else if (act == "none") {
        ls.activation = Activation::kNone;
      } else {
        throw ConfigError(ctx + ": activation must be \"relu\" or \"none\"");
      }
    }
    spec.layers.push_back(ls);
  }
  spec.validate();
  return spec;
}

std::string NetworkSpec::to_json_text() const {
  json j;
  j["schema_version"] = 1;
  j["name"] = name;
  j["input"] = {{"channels", input_channels},
                {"height", input_height},
                {"width", input_width}};
  j["classes"] = classes;
  j["bn_momentum"] = bn_momentum;
  j["bn_eps"] = bn_eps;
  json arr = json::array();
  for (const auto& ls : layers) {
    json lj;
    lj["kind"] = kind_name(ls.kind);
    if (ls.kind == LayerKind::kConv) {
      lj["kh"] = ls.kh;
      lj["kw"] = ls.kw;
      lj["in_channels"] = ls.in_channels;
      lj["out_channels"] = ls.out_channels;
      lj["padding"] = ls.padding == Padding::kSame ? "same" : "valid";
    }
    if (ls.kind == LayerKind::kDense) lj["units"] = ls.units;
    if (ls.kind == LayerKind::kConv || ls.kind == LayerKind::kDense) {
      lj["normalize"] = ls.normalize;
      lj["activation"] = ls.activation == Activation::kRelu ? "relu" : "none";
    }
    arr.push_back(lj);
  }
  j["layers"] = arr;
  return j.dump(2) + "\n";
}

Model Model::build(NetworkSpec spec, RngStream& rng) {
  spec.validate();
  Model m;
  m.spec_ = std::move(spec);

  Extents e{false, m.spec_.input_channels, m.spec_.input_height,
            m.spec_.input_width, 0};
  for (size_t i = 0; i < m.spec_.layers.size(); ++i) {
    const LayerSpec& ls = m.spec_.layers[i];
    LayerParams lp;
    if (ls.kind == LayerKind::kConv) {
      const int fan_in = ls.in_channels * ls.kh * ls.kw;
      const float std = std::sqrt(2.0f / static_cast<float>(fan_in));
      lp.weight = Tensor::zeros(
          Shape{ls.out_channels, ls.in_channels, ls.kh, ls.kw}, true);
      for (auto& v : lp.weight->data()) v = std * rng.next_normal();
      lp.bias = Tensor::zeros(Shape{ls.out_channels}, true);
    } else if (ls.kind == LayerKind::kDense ||
               ls.kind == LayerKind::kSoftmaxOutput) {
      const int d = static_cast<int>(e.flat_dim());
      const int u =
          ls.kind == LayerKind::kDense ? ls.units : m.spec_.classes;
      // relu-preserving scale for hidden layers; the output layer starts
      // small so initial logits are near uniform
      const float std = ls.kind == LayerKind::kDense
                            ? std::sqrt(2.0f / static_cast<float>(d))
                            : 0.01f;
      lp.weight = Tensor::zeros(Shape{d, u}, true);
      for (auto& v : lp.weight->data()) v = std * rng.next_normal();
      lp.bias = Tensor::zeros(Shape{u}, true);
    }
    if (ls.normalize) {
      const int f =
          ls.kind == LayerKind::kConv ? ls.out_channels : ls.units;
      lp.gamma = Tensor::full(Shape{f}, 1.0f, true);
      lp.beta = Tensor::zeros(Shape{f}, true);
      lp.bn.running_mean.assign(static_cast<size_t>(f), 0.0f);
      lp.bn.running_var.assign(static_cast<size_t>(f), 0.0f);
    }
    m.layers_.push_back(std::move(lp));
    e = advance(m.spec_, e, i);
  }
  return m;
}

ForwardResult Model::forward(Tape& tape, const TensorPtr& x,
                             const ForwardOptions& opts) {
  const Shape& xs = x->shape();
  if (xs.rank() != 4 || xs.dim(1) != spec_.input_channels ||
      xs.dim(2) != spec_.input_height || xs.dim(3) != spec_.input_width) {
    throw ShapeError("input " + xs.str() + " does not match network input [" +
                     std::to_string(spec_.input_channels) + "," +
                     std::to_string(spec_.input_height) + "," +
                     std::to_string(spec_.input_width) + "]");
  }
  const int n = xs.dim(0);

  auto param = [&](const TensorPtr& p) {
    return opts.freeze_params ? p->detached() : p;
  };

  ForwardResult res;
  TensorPtr cur = x;
  for (size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& ls = spec_.layers[i];
    LayerParams& lp = layers_[i];
    switch (ls.kind) {
      case LayerKind::kConv:
        cur = conv2d(tape, cur, param(lp.weight), param(lp.bias), ls.padding);
        break;
      case LayerKind::kMaxpool:
        cur = maxpool2x2(tape, cur);
        break;
      case LayerKind::kDense:
      case LayerKind::kSoftmaxOutput:
        if (cur->shape().rank() != 2) {
          cur = reshape(tape, cur,
                        Shape{n, static_cast<int>(cur->numel() / n)});
        }
        cur = dense(tape, cur, param(lp.weight), param(lp.bias));
        break;
    }
    if (ls.normalize) {
      auto r = batchnorm(tape, cur, param(lp.gamma), param(lp.beta), lp.bn,
                         opts.bn_mode, spec_.bn_momentum, spec_.bn_eps);
      cur = r.output;
      res.taps.push_back(r.normalized);
    }
    if (ls.activation == Activation::kRelu) cur = relu(tape, cur);
  }
  res.logits = cur;
  return res;
}

std::vector<TensorPtr> Model::parameters() {
  std::vector<TensorPtr> out;
  for (auto& lp : layers_) {
    for (const auto& t : {lp.weight, lp.bias, lp.gamma, lp.beta}) {
      if (t) out.push_back(t);
    }
  }
  return out;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& lp : layers_) {
    for (const auto& t : {lp.weight, lp.bias, lp.gamma, lp.beta}) {
      if (t) n += t->numel();
    }
  }
  return n;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p->zero_grad();
}

std::vector<BatchNormState*> Model::bn_states() {
  std::vector<BatchNormState*> out;
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (spec_.layers[i].normalize) out.push_back(&layers_[i].bn);
  }
  return out;
}

namespace {

// Payload layout: one float32 array per parameter and running-statistic
// buffer, layer by layer, in a fixed order shared by save and load.
constexpr char kMagic[8] = {'R', 'F', 'T', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void Model::save_checkpoint(
    const std::string& path,
    const std::map<std::string, std::string>& metadata) const {
  json manifest;
  manifest["format_version"] = 1;
  manifest["spec_hash"] = hash_hex(spec_.structural_hash());
  manifest["metadata"] = metadata.empty() ? json::object() : json(metadata);

  json tensors = json::array();
  std::vector<std::pair<const float*, size_t>> blobs;
  auto add = [&](const std::string& name, const float* data, size_t n,
                 const std::vector<int>& dims) {
    tensors.push_back({{"name", name}, {"shape", dims}});
    blobs.emplace_back(data, n);
  };
  json bn_meta = json::array();
  for (size_t i = 0; i < layers_.size(); ++i) {
    const LayerParams& lp = layers_[i];
    const std::string base = "layer" + std::to_string(i);
    if (lp.weight) {
      add(base + ".weight", lp.weight->data().data(),
          lp.weight->data().size(), lp.weight->shape().dims());
      add(base + ".bias", lp.bias->data().data(), lp.bias->data().size(),
          lp.bias->shape().dims());
    }
    if (spec_.layers[i].normalize) {
      add(base + ".gamma", lp.gamma->data().data(), lp.gamma->data().size(),
          lp.gamma->shape().dims());
      add(base + ".beta", lp.beta->data().data(), lp.beta->data().size(),
          lp.beta->shape().dims());
      const int f = static_cast<int>(lp.bn.running_mean.size());
      add(base + ".running_mean", lp.bn.running_mean.data(),
          lp.bn.running_mean.size(), {f});
      add(base + ".running_var", lp.bn.running_var.data(),
          lp.bn.running_var.size(), {f});
      bn_meta.push_back(
          {{"layer", i}, {"batches_seen", lp.bn.batches_seen}});
    }
  }
  manifest["tensors"] = tensors;
  manifest["bn"] = bn_meta;

  const std::string mtext = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(kMagic, sizeof kMagic);
  const uint32_t mlen = static_cast<uint32_t>(mtext.size());
  out.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& [ptr, n] : blobs) {
    out.write(reinterpret_cast<const char*>(ptr),
              static_cast<std::streamsize>(n * sizeof(float)));
  }
  out.flush();
  if (!out) throw DataError("write to " + path + " failed");
}

Model Model::load_checkpoint(const NetworkSpec& spec,
                             const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kMagic + 4 ||
      std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError(path + " is not a checkpoint (bad magic)");
  }
  uint32_t mlen = 0;
  std::memcpy(&mlen, bytes.data() + sizeof kMagic, 4);
  const size_t header = sizeof kMagic + 4;
  if (bytes.size() < header + mlen) {
    throw DataError(path + " truncated inside the manifest (need " +
                    std::to_string(header + mlen) + " bytes, have " +
                    std::to_string(bytes.size()) + ")");
  }
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + static_cast<long>(header),
                           bytes.begin() + static_cast<long>(header + mlen));
  } catch (const json::parse_error& e) {
    throw DataError(path + ": manifest is not valid JSON: " + e.what());
  }
  if (manifest.value("format_version", 0) != 1) {
    throw DataError(path + ": unsupported checkpoint format_version");
  }
  const std::string want_hash = hash_hex(spec.structural_hash());
  const std::string got_hash = manifest.value("spec_hash", "");
  if (got_hash != want_hash) {
    throw DataError(path + " was written for a different network structure (" +
                    got_hash + " != " + want_hash + ")");
  }

  // A spec-hash match guarantees layout agreement, so rebuild the expected
  // tensor list and verify the manifest matches it entry for entry.
  RngStream dummy(0);
  Model m = Model::build(spec, dummy);
  struct Slot {
    std::string name;
    std::vector<int> dims;
    float* dst;
    size_t n;
  };
  std::vector<Slot> slots;
  for (size_t i = 0; i < m.layers_.size(); ++i) {
    LayerParams& lp = m.layers_[i];
    const std::string base = "layer" + std::to_string(i);
    auto push_tensor = [&](const std::string& name, const TensorPtr& t) {
      slots.push_back(
          {name, t->shape().dims(), t->data().data(), t->data().size()});
    };
    if (lp.weight) {
      push_tensor(base + ".weight", lp.weight);
      push_tensor(base + ".bias", lp.bias);
    }
    if (spec.layers[i].normalize) {
      push_tensor(base + ".gamma", lp.gamma);
      push_tensor(base + ".beta", lp.beta);
      const int f = static_cast<int>(lp.bn.running_mean.size());
      slots.push_back({base + ".running_mean", {f},
                       lp.bn.running_mean.data(), lp.bn.running_mean.size()});
      slots.push_back({base + ".running_var", {f}, lp.bn.running_var.data(),
                       lp.bn.running_var.size()});
    }
  }

  const json& tensors = manifest["tensors"];
  if (!tensors.is_array() || tensors.size() != slots.size()) {
    throw DataError(path + ": manifest lists " +
                    std::to_string(tensors.size()) + " tensors, expected " +
                    std::to_string(slots.size()));
  }
  size_t offset = header + mlen;
  for (size_t i = 0; i < slots.size(); ++i) {
    const json& tj = tensors[i];
    const std::string name = tj.value("name", "");
    const std::vector<int> dims = tj.value("shape", std::vector<int>{});
    if (name != slots[i].name || dims != slots[i].dims) {
      throw DataError(path + ": tensor " + std::to_string(i) + " is \"" +
                      name + "\", expected \"" + slots[i].name + "\"");
    }
    const size_t nbytes = slots[i].n * sizeof(float);
    if (bytes.size() < offset + nbytes) {
      throw DataError(path + " truncated at byte " + std::to_string(offset) +
                      " while reading " + name);
    }
    std::memcpy(slots[i].dst, bytes.data() + offset, nbytes);
    offset += nbytes;
  }
  if (offset != bytes.size()) {
    throw DataError(path + " has " + std::to_string(bytes.size() - offset) +
                    " trailing bytes after the last tensor");
  }

  for (const auto& bj : manifest.value("bn", json::array())) {
    const size_t layer = bj.value("layer", size_t{0});
    if (layer >= m.layers_.size() || !spec.layers[layer].normalize) {
      throw DataError(path + ": bn entry references layer " +
                      std::to_string(layer));
    }
    m.layers_[layer].bn.batches_seen = bj.value("batches_seen", int64_t{0});
  }
  if (manifest.contains("metadata") && manifest["metadata"].is_object()) {
    for (auto it = manifest["metadata"].begin();
         it != manifest["metadata"].end(); ++it) {
      m.metadata_[it.key()] = it.value().get<std::string>();
    }
  }
  return m;
}

}  // namespace rft
