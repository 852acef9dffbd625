#pragma once

#include <vector>

#include "haccn/density.hpp"
#include "haccn/tensor.hpp"

namespace haccn {

// One annotated image held in memory.
struct Sample {
  Image image;
  PointAnnotation ann;
  double count() const { return static_cast<double>(ann.points.size()); }
};

using Dataset = std::vector<Sample>;

}  // namespace haccn
