#include "rft/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>

#include "rft/errors.hpp"

namespace rft {

namespace {

constexpr std::uint32_t kIdxImageMagic = 2051;
constexpr std::uint32_t kIdxLabelMagic = 2049;
constexpr std::size_t kCifarRecordBytes = 3073;
constexpr std::size_t kCifarRecordsPerFile = 10000;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open " + path);
  auto size = static_cast<std::size_t>(f.tellg());
  std::vector<unsigned char> bytes(size);
  f.seekg(0);
  if (size > 0 &&
      !f.read(reinterpret_cast<char*>(bytes.data()),
              static_cast<std::streamsize>(size))) {
    throw DataError("cannot read " + path);
  }
  return bytes;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                   const std::string& path) {
  if (off + 4 > b.size()) {
    throw DataError(path + ": truncated header, need 4 bytes at offset " +
                    std::to_string(off) + ", file has " +
                    std::to_string(b.size()));
  }
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void append_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for " + path);
}

void check_label(int label, const std::string& path, std::size_t offset) {
  if (label < 0 || label >= 10) {
    throw DataError(path + ": label value " + std::to_string(label) +
                    " out of range [0,10) at offset " + std::to_string(offset));
  }
}

}  // namespace

DatasetHandle load_idx_pair(const std::string& images_path,
                            const std::string& labels_path) {
  auto ib = read_file(images_path);
  auto lb = read_file(labels_path);

  const auto image_magic = be32(ib, 0, images_path);
  if (image_magic != kIdxImageMagic) {
    throw DataError(images_path + ": expected image magic 2051, got " +
                    std::to_string(image_magic) + " at offset 0");
  }
  const auto count = be32(ib, 4, images_path);
  const auto rows = be32(ib, 8, images_path);
  const auto cols = be32(ib, 12, images_path);
  if (count < 1 || rows < 1 || cols < 1 || rows > 4096 || cols > 4096) {
    throw DataError(images_path + ": implausible header, count=" +
                    std::to_string(count) + " rows=" + std::to_string(rows) +
                    " cols=" + std::to_string(cols));
  }
  const std::size_t expected_image_bytes =
      16 + std::size_t(count) * rows * cols;
  if (ib.size() != expected_image_bytes) {
    throw DataError(images_path + ": expected " +
                    std::to_string(expected_image_bytes) + " bytes, found " +
                    std::to_string(ib.size()) +
                    " (pixel data starts at offset 16)");
  }

  const auto label_magic = be32(lb, 0, labels_path);
  if (label_magic != kIdxLabelMagic) {
    throw DataError(labels_path + ": expected label magic 2049, got " +
                    std::to_string(label_magic) + " at offset 0");
  }
  const auto label_count = be32(lb, 4, labels_path);
  if (lb.size() != 8 + std::size_t(label_count)) {
    throw DataError(labels_path + ": expected " +
                    std::to_string(8 + std::size_t(label_count)) +
                    " bytes, found " + std::to_string(lb.size()) +
                    " (label data starts at offset 8)");
  }
  if (label_count != count) {
    throw DataError(images_path + ": image count " + std::to_string(count) +
                    " != label count " + std::to_string(label_count) + " in " +
                    labels_path);
  }

  DatasetHandle h;
  h.channels = 1;
  h.height = static_cast<int>(rows);
  h.width = static_cast<int>(cols);
  h.clip_min = 0.0f;
  h.clip_max = 1.0f;
  h.images.resize(std::size_t(count) * rows * cols);
  for (std::size_t i = 0; i < h.images.size(); ++i) {
    h.images[i] = float(ib[16 + i]) / 255.0f;
  }
  h.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    h.labels[i] = lb[8 + i];
    check_label(h.labels[i], labels_path, 8 + i);
  }
  return h;
}

DatasetHandle load_mnist(const std::string& dir, const std::string& split) {
  std::string prefix;
  if (split == "train") {
    prefix = "train";
  } else if (split == "test") {
    prefix = "t10k";
  } else {
    throw ConfigError("mnist split must be train or test, got " + split);
  }
  DatasetHandle h = load_idx_pair(dir + "/" + prefix + "-images-idx3-ubyte",
                                  dir + "/" + prefix + "-labels-idx1-ubyte");
  h.name = "mnist";
  h.split = split;
  return h;
}

DatasetHandle load_cifar10(const std::string& dir, const std::string& split) {
  std::vector<std::string> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) {
      files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    }
  } else if (split == "test") {
    files.push_back(dir + "/test_batch.bin");
  } else {
    throw ConfigError("cifar10 split must be train or test, got " + split);
  }

  DatasetHandle h;
  h.name = "cifar10";
  h.split = split;
  h.channels = 3;
  h.height = 32;
  h.width = 32;
  h.clip_min = 0.0f;
  h.clip_max = 255.0f;
  h.images.reserve(files.size() * kCifarRecordsPerFile * 3072);
  h.labels.reserve(files.size() * kCifarRecordsPerFile);

  for (const auto& path : files) {
    auto bytes = read_file(path);
    const std::size_t expected = kCifarRecordsPerFile * kCifarRecordBytes;
    if (bytes.size() != expected) {
      throw DataError(path + ": expected " + std::to_string(expected) +
                      " bytes (10000 records of 3073), found " +
                      std::to_string(bytes.size()));
    }
    for (std::size_t rec = 0; rec < kCifarRecordsPerFile; ++rec) {
      const std::size_t off = rec * kCifarRecordBytes;
      const int label = bytes[off];
      check_label(label, path, off);
      h.labels.push_back(label);
      for (std::size_t p = 0; p < 3072; ++p) {
        h.images.push_back(float(bytes[off + 1 + p]));
      }
    }
  }
  return h;
}

void save_mnist_idx(const DatasetHandle& data, const std::string& images_path,
                    const std::string& labels_path) {
  if (data.channels != 1) {
    throw ConfigError("idx serialization requires single-channel data, got " +
                      std::to_string(data.channels) + " channels");
  }
  std::vector<unsigned char> ib;
  ib.reserve(16 + data.images.size());
  append_be32(ib, kIdxImageMagic);
  append_be32(ib, static_cast<std::uint32_t>(data.size()));
  append_be32(ib, static_cast<std::uint32_t>(data.height));
  append_be32(ib, static_cast<std::uint32_t>(data.width));
  for (float v : data.images) {
    long q = std::lround(double(v) * 255.0);
    ib.push_back(static_cast<unsigned char>(std::clamp(q, 0L, 255L)));
  }
  std::vector<unsigned char> lb;
  lb.reserve(8 + data.labels.size());
  append_be32(lb, kIdxLabelMagic);
  append_be32(lb, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lb.push_back(static_cast<unsigned char>(l));
  write_file(images_path, ib);
  write_file(labels_path, lb);
}

Batcher::Batcher(const DatasetHandle& data, int batch_size, bool shuffle,
                 RngStream& rng)
    : data_(&data), batch_size_(batch_size) {
  if (batch_size < 1) {
    throw ConfigError("batch_size must be at least 1, got " +
                      std::to_string(batch_size));
  }
  if (data.size() < 1) throw DataError("cannot batch an empty dataset");
  order_.resize(data.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (shuffle) rng.shuffle(order_);
}

bool Batcher::next(LabeledBatch& out) {
  if (pos_ >= order_.size()) return false;
  const int n =
      static_cast<int>(std::min<std::size_t>(batch_size_, order_.size() - pos_));
  const int ex = data_->example_numel();
  out.inputs =
      Tensor::zeros(Shape{n, data_->channels, data_->height, data_->width});
  out.labels.resize(n);
  auto dst = out.inputs->data();
  for (int i = 0; i < n; ++i) {
    const int idx = order_[pos_ + i];
    std::copy_n(data_->images.begin() + std::size_t(idx) * ex, ex,
                dst.begin() + std::size_t(i) * ex);
    out.labels[i] = data_->labels[idx];
  }
  pos_ += n;
  return true;
}

int Batcher::batch_count() const {
  return static_cast<int>((order_.size() + batch_size_ - 1) / batch_size_);
}

DatasetHandle subset(const DatasetHandle& data, int n, RngStream& rng) {
  if (n < 1) throw ConfigError("subset size must be at least 1, got " +
                               std::to_string(n));
  if (n > data.size()) {
    throw ConfigError("subset size " + std::to_string(n) +
                      " exceeds dataset size " + std::to_string(data.size()));
  }
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  order.resize(n);
  std::sort(order.begin(), order.end());

  DatasetHandle out;
  out.name = data.name;
  out.split = data.split;
  out.channels = data.channels;
  out.height = data.height;
  out.width = data.width;
  out.clip_min = data.clip_min;
  out.clip_max = data.clip_max;
  const int ex = data.example_numel();
  out.images.resize(std::size_t(n) * ex);
  out.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    std::copy_n(data.images.begin() + std::size_t(order[i]) * ex, ex,
                out.images.begin() + std::size_t(i) * ex);
    out.labels[i] = data.labels[order[i]];
  }
  return out;
}

}  // namespace rft
