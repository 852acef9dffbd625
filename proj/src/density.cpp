#include "haccn/density.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace haccn {

void PointAnnotation::validate() const {
  if (width <= 0 || height <= 0) throw InvalidData("annotation '" + image_id + "' has non-positive size");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!(p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height)) {
      throw InvalidData("annotation '" + image_id + "': point " + std::to_string(i) + " (" + std::to_string(p.x) +
                        ", " + std::to_string(p.y) + ") is outside the " + std::to_string(width) + "x" +
                        std::to_string(height) + " image");
    }
  }
}

double DensityMap::sum() const {
  // Fixed-order fold.
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

std::size_t SegmentationMask::foreground() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

std::string_view class_name(DensityClass c) {
  switch (c) {
    case DensityClass::kZero: return "zero";
    case DensityClass::kVeryLow: return "very-low";
    case DensityClass::kLow: return "low";
    case DensityClass::kMedium: return "medium";
    case DensityClass::kHigh: return "high";
    case DensityClass::kVeryHigh: return "very-high";
  }
  return "unknown";
}

void ClassBoundaries::validate() const {
  if (!(thresholds[0] > 0.0 && thresholds[0] <= 1.0)) {
    throw InvalidArgument("first class threshold must lie in (0, 1] so that only count 0 is class zero");
  }
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > thresholds[i - 1])) throw InvalidArgument("class thresholds must be strictly increasing");
  }
}

ClassBoundaries boundaries_from_quantiles(std::span<const double> counts) {
  std::vector<double> positive;
  for (double c : counts) {
    if (c > 0.0) positive.push_back(c);
  }
  ClassBoundaries b;
  b.thresholds[0] = 1.0;
  if (positive.empty()) {
    for (std::size_t i = 1; i < b.thresholds.size(); ++i) b.thresholds[i] = static_cast<double>(i + 1);
    return b;
  }
  std::sort(positive.begin(), positive.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(positive.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, positive.size() - 1);
    return positive[lo] + (pos - static_cast<double>(lo)) * (positive[hi] - positive[lo]);
  };
  const std::array<double, 4> qs{0.2, 0.4, 0.6, 0.8};
  for (std::size_t i = 0; i < qs.size(); ++i) {
    double t = std::round(quantile(qs[i]));
    t = std::max(t, b.thresholds[i] + 1.0);
    b.thresholds[i + 1] = t;
  }
  return b;
}

DensityMap generate_density_map(const PointAnnotation& ann, double sigma) {
  if (!(sigma > 0.0)) throw InvalidArgument("sigma must be positive");
  ann.validate();
  DensityMap out(ann.height, ann.width, 1);
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
  const int side = 2 * radius + 1;
  std::vector<double> kernel(static_cast<std::size_t>(side) * side);

  for (const auto& p : ann.points) {
    const int cx = std::clamp(static_cast<int>(std::lround(p.x)), 0, ann.width - 1);
    const int cy = std::clamp(static_cast<int>(std::lround(p.y)), 0, ann.height - 1);
    const int y0 = std::max(0, cy - radius), y1 = std::min(ann.height - 1, cy + radius);
    const int x0 = std::max(0, cx - radius), x1 = std::min(ann.width - 1, cx + radius);
    double mass = 0.0;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - p.x, dy = y - p.y;
        const double v = std::exp(-(dx * dx + dy * dy) * inv_two_sigma2);
        kernel[static_cast<std::size_t>(y - y0) * side + (x - x0)] = v;
        mass += v;
      }
    }
    const double inv_mass = 1.0 / mass;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        out(y, x) += kernel[static_cast<std::size_t>(y - y0) * side + (x - x0)] * inv_mass;
      }
    }
  }
  return out;
}

SegmentationMask derive_segmentation_mask(const DensityMap& dmap, double threshold) {
  if (!(threshold >= 0.0)) throw InvalidArgument("segmentation threshold must be non-negative");
  if (dmap.values.size() != static_cast<std::size_t>(dmap.height) * dmap.width) {
    throw ShapeError("density map storage does not match its shape");
  }
  SegmentationMask m{dmap.height, dmap.width, dmap.scale, std::vector<std::uint8_t>(dmap.values.size())};
  std::transform(dmap.values.begin(), dmap.values.end(), m.values.begin(),
                 [threshold](double v) { return static_cast<std::uint8_t>(v > threshold ? 1 : 0); });
  return m;
}

DensityClass assign_density_class(double count, const ClassBoundaries& b) {
  b.validate();
  int cls = 0;
  for (double t : b.thresholds) {
    if (count >= t) ++cls;
  }
  return static_cast<DensityClass>(cls);
}

DensityMap downsample_density_map(const DensityMap& dmap, int factor) {
  if (factor <= 0) throw InvalidArgument("downsampling factor must be positive");
  if (factor == 1) return dmap;
  const int oh = (dmap.height + factor - 1) / factor;
  const int ow = (dmap.width + factor - 1) / factor;
  DensityMap out(oh, ow, dmap.scale * factor);
  for (int y = 0; y < dmap.height; ++y) {
    for (int x = 0; x < dmap.width; ++x) out(y / factor, x / factor) += dmap(y, x);
  }
  return out;
}

DensityMap flip_horizontal(const DensityMap& dmap) {
  DensityMap out(dmap.height, dmap.width, dmap.scale);
  for (int y = 0; y < dmap.height; ++y) {
    for (int x = 0; x < dmap.width; ++x) out(y, dmap.width - 1 - x) = dmap(y, x);
  }
  return out;
}

DensityMap crop(const DensityMap& dmap, int y0, int x0, int h, int w) {
  DensityMap out(h, w, dmap.scale);
  for (int y = 0; y < h; ++y) {
    const int sy = y0 + y;
    if (sy < 0 || sy >= dmap.height) continue;
    for (int x = 0; x < w; ++x) {
      const int sx = x0 + x;
      if (sx >= 0 && sx < dmap.width) out(y, x) = dmap(sy, sx);
    }
  }
  return out;
}

}  // namespace haccn
