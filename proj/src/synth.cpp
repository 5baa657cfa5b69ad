#include "rft/synth.hpp"

#include <algorithm>
#include <fstream>
#include <vector>

#include "rft/errors.hpp"
#include "rft/rng.hpp"

namespace rft {

namespace {

// 5x7 digit bitmaps, row-major, '1' = ink.
const char* const kGlyphs[10][7] = {
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
};

constexpr int kScale = 3;  // glyphs render as 15x21

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

void render_gray(unsigned char* out, int digit, RngStream& rng) {
  for (int i = 0; i < 28 * 28; ++i) {
    out[i] = static_cast<unsigned char>(rng.next_below(30));
  }
  const int row0 = 2 + static_cast<int>(rng.next_below(5));
  const int col0 = 4 + static_cast<int>(rng.next_below(9));
  const int base = 160 + static_cast<int>(rng.next_below(96));
  for (int gr = 0; gr < 7; ++gr) {
    for (int gc = 0; gc < 5; ++gc) {
      if (kGlyphs[digit][gr][gc] != '1') continue;
      for (int dr = 0; dr < kScale; ++dr) {
        for (int dc = 0; dc < kScale; ++dc) {
          const int r = row0 + gr * kScale + dr;
          const int c = col0 + gc * kScale + dc;
          const float m = 0.8f + 0.2f * rng.next_float();
          out[r * 28 + c] = static_cast<unsigned char>(
              std::min(255, static_cast<int>(float(base) * m)));
        }
      }
    }
  }
}

void render_color(unsigned char* out, int digit, RngStream& rng) {
  int fg[3], bg[3];
  for (int ch = 0; ch < 3; ++ch) {
    fg[ch] = 140 + static_cast<int>(rng.next_below(116));
    bg[ch] = static_cast<int>(rng.next_below(90));
  }
  const int row0 = 3 + static_cast<int>(rng.next_below(7));
  const int col0 = 6 + static_cast<int>(rng.next_below(10));
  std::vector<bool> ink(32 * 32, false);
  for (int gr = 0; gr < 7; ++gr) {
    for (int gc = 0; gc < 5; ++gc) {
      if (kGlyphs[digit][gr][gc] != '1') continue;
      for (int dr = 0; dr < kScale; ++dr) {
        for (int dc = 0; dc < kScale; ++dc) {
          ink[(row0 + gr * kScale + dr) * 32 + (col0 + gc * kScale + dc)] = true;
        }
      }
    }
  }
  for (int ch = 0; ch < 3; ++ch) {
    for (int p = 0; p < 32 * 32; ++p) {
      const int center = ink[p] ? fg[ch] : bg[ch];
      const int noise = static_cast<int>(rng.next_below(41)) - 20;
      out[ch * 1024 + p] =
          static_cast<unsigned char>(std::clamp(center + noise, 0, 255));
    }
  }
}

void write_idx_split(const std::string& dir, const std::string& prefix,
                     int count, RngStream& rng) {
  std::vector<unsigned char> ib;
  ib.reserve(16 + std::size_t(count) * 28 * 28);
  append_be32(ib, 2051);
  append_be32(ib, static_cast<std::uint32_t>(count));
  append_be32(ib, 28);
  append_be32(ib, 28);
  std::vector<unsigned char> lb;
  lb.reserve(8 + count);
  append_be32(lb, 2049);
  append_be32(lb, static_cast<std::uint32_t>(count));

  unsigned char pixels[28 * 28];
  for (int i = 0; i < count; ++i) {
    const int digit = i % 10;
    render_gray(pixels, digit, rng);
    ib.insert(ib.end(), pixels, pixels + 28 * 28);
    lb.push_back(static_cast<unsigned char>(digit));
  }
  write_file(dir + "/" + prefix + "-images-idx3-ubyte", ib);
  write_file(dir + "/" + prefix + "-labels-idx1-ubyte", lb);
}

void write_cifar_file(const std::string& path, RngStream& rng) {
  std::vector<unsigned char> bytes;
  bytes.reserve(10000 * 3073);
  unsigned char pixels[3 * 1024];
  for (int i = 0; i < 10000; ++i) {
    const int digit = i % 10;
    render_color(pixels, digit, rng);
    bytes.push_back(static_cast<unsigned char>(digit));
    bytes.insert(bytes.end(), pixels, pixels + 3 * 1024);
  }
  write_file(path, bytes);
}

}  // namespace

void write_synth_mnist(const std::string& dir, int train_count, int test_count,
                       std::uint64_t seed) {
  if (train_count < 1 || test_count < 1) {
    throw ConfigError("synthetic split counts must be positive");
  }
  RngStream rng(seed);
  auto train_rng = rng.derive("synth-mnist-train");
  auto test_rng = rng.derive("synth-mnist-test");
  write_idx_split(dir, "train", train_count, train_rng);
  write_idx_split(dir, "t10k", test_count, test_rng);
}

void write_synth_cifar10(const std::string& dir, int train_files,
                         std::uint64_t seed) {
  if (train_files < 0 || train_files > 5) {
    throw ConfigError("cifar train_files must be in [0,5], got " +
                      std::to_string(train_files));
  }
  RngStream rng(seed);
  auto test_rng = rng.derive("synth-cifar-test");
  write_cifar_file(dir + "/test_batch.bin", test_rng);
  for (int i = 1; i <= train_files; ++i) {
    auto file_rng = rng.derive("synth-cifar-train-" + std::to_string(i));
    write_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin",
                     file_rng);
  }
}

}  // namespace rft
