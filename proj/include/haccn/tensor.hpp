#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "haccn/error.hpp"

namespace haccn {

// Dense channels x height x width grid, row-major within a channel.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {
    if (c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  }

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  double& operator()(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double operator()(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  std::span<double> channel(int c) { return {data.data() + c * plane(), plane()}; }
  std::span<const double> channel(int c) const { return {data.data() + c * plane(), plane()}; }

  bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

// 3-channel image with values nominally in [0, 1].
using Image = Tensor;

}  // namespace haccn
