// SPDX-License-Identifier: Apache-2.0
//
// CIFAR-10 binary batches: 3073-byte records, one label byte followed by
// 1024 red, 1024 green and 1024 blue bytes (row-major 32x32 planes).
#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include "spu/data/dataset.hpp"

namespace spu {

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

struct ImageNorm {
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> std{0.2470, 0.2435, 0.2616};

  static ImageNorm identity() { return {{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}}; }
};

struct CifarOptions {
  ImageNorm norm;
  std::size_t image_size = kCifarSide;  // bilinear resize when != 32
};

class DataFormatError : public std::runtime_error {
 public:
  DataFormatError(const std::string& file, std::size_t offset, const std::string& msg)
      : std::runtime_error(file + ": byte " + std::to_string(offset) + ": " + msg), file_(file), offset_(offset) {}
  const std::string& file() const noexcept { return file_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string file_;
  std::size_t offset_;
};

/// Bilinear resize of an (H, W, C) image, half-pixel centers, edge clamped.
template <typename T>
std::vector<T> resize_bilinear(std::span<const T> src, std::size_t h, std::size_t w, std::size_t c, std::size_t oh,
                               std::size_t ow) {
  std::vector<T> out(oh * ow * c);
  const double sy = static_cast<double>(h) / static_cast<double>(oh);
  const double sx = static_cast<double>(w) / static_cast<double>(ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < ow; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double ax = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(src[(yy * w + xx) * c + k]); };
        const double v = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) + ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1));
        out[(y * ow + x) * c + k] = static_cast<T>(v);
      }
    }
  }
  return out;
}

/// Decodes one record into an (H, W, 3) image.
template <typename T>
std::vector<T> decode_cifar_record(const std::uint8_t* rec, const CifarOptions& opt) {
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  std::vector<T> img(plane * 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = static_cast<double>(rec[1 + c * plane + p]) / 255.0;
      img[p * 3 + c] = static_cast<T>((v - opt.norm.mean[c]) / opt.norm.std[c]);
    }
  if (opt.image_size != kCifarSide)
    img = resize_bilinear<T>(img, kCifarSide, kCifarSide, 3, opt.image_size, opt.image_size);
  return img;
}

/// Appends every record of one batch file to `out`.
template <typename T>
void load_cifar10_file(const std::filesystem::path& path, Dataset<T>& out, const CifarOptions& opt = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (out.empty() && out.pixels.empty()) {
    out.height = out.width = opt.image_size;
    out.channels = 3;
    out.num_classes = 10;
  }
  const std::size_t whole = bytes.size() / kCifarRecord;
  if (bytes.size() % kCifarRecord != 0)
    throw DataFormatError(path.string(), whole * kCifarRecord,
                          "truncated record " + std::to_string(whole) + " (" +
                              std::to_string(bytes.size() % kCifarRecord) + " of " + std::to_string(kCifarRecord) +
                              " bytes)");
  for (std::size_t r = 0; r < whole; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= 10)
      throw DataFormatError(path.string(), r * kCifarRecord,
                            "record " + std::to_string(r) + " has label " + std::to_string(rec[0]) + " (must be < 10)");
    const auto img = decode_cifar_record<T>(rec, opt);
    out.push_back(img, rec[0]);
  }
}

struct CifarSplits {
  Dataset<float> train, eval;
};

/// data_batch_1..5.bin (those present) for training, test_batch.bin for evaluation.
inline CifarSplits load_cifar10_binary(const std::filesystem::path& dir, const CifarOptions& opt = {}) {
  CifarSplits s;
  bool any = false;
  for (int b = 1; b <= 5; ++b) {
    const auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (!std::filesystem::exists(p)) continue;
    load_cifar10_file(p, s.train, opt);
    any = true;
  }
  if (!any) throw std::runtime_error(dir.string() + ": no data_batch_*.bin files");
  const auto test = dir / "test_batch.bin";
  if (std::filesystem::exists(test)) load_cifar10_file(test, s.eval, opt);
  return s;
}

/// Inverse of the decoder for a native-size, identity-normalized image.
template <typename T>
std::array<std::uint8_t, kCifarRecord> encode_cifar_record(std::span<const T> image, int label) {
  require(image.size() == kCifarSide * kCifarSide * 3, "encode_cifar_record: expects a 32x32x3 image");
  require(label >= 0 && label < 10, "encode_cifar_record: label must be < 10");
  std::array<std::uint8_t, kCifarRecord> rec{};
  rec[0] = static_cast<std::uint8_t>(label);
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = std::clamp(std::round(static_cast<double>(image[p * 3 + c]) * 255.0), 0.0, 255.0);
      rec[1 + c * plane + p] = static_cast<std::uint8_t>(v);
    }
  return rec;
}

}  // namespace spu
