// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "spu/tensor.hpp"

namespace spu {

/// Images stored contiguously as (N, H, W, C) with integer labels.
template <typename T>
struct Dataset {
  std::size_t height = 0, width = 0, channels = 0;
  int num_classes = 0;
  std::vector<T> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t image_numel() const { return height * width * channels; }
  Shape image_shape() const { return {height, width, channels}; }

  void push_back(std::span<const T> image, int label) {
    require(image.size() == image_numel(), "dataset: image size mismatch");
    require(label >= 0 && label < num_classes, "dataset: label " + std::to_string(label) + " out of range");
    pixels.insert(pixels.end(), image.begin(), image.end());
    labels.push_back(label);
  }

  std::span<const T> image(std::size_t i) const { return {pixels.data() + i * image_numel(), image_numel()}; }

  /// (N, H, W, C) batch of the given sample indices.
  Tensor<T> batch(std::span<const std::size_t> idx) const {
    Tensor<T> x({idx.size(), height, width, channels});
    const std::size_t n = image_numel();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      require(idx[b] < size(), "dataset: index out of range");
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(idx[b] * n), n,
                  x.vec().begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return x;
  }
  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
  }

  /// Samples [begin, end) as a new dataset.
  Dataset slice(std::size_t begin, std::size_t end) const {
    require(begin <= end && end <= size(), "dataset: slice out of range");
    Dataset d = *this;
    d.pixels.assign(pixels.begin() + static_cast<std::ptrdiff_t>(begin * image_numel()),
                    pixels.begin() + static_cast<std::ptrdiff_t>(end * image_numel()));
    d.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
    return d;
  }
};

}  // namespace spu
