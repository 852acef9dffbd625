#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "haccn/error.hpp"

namespace haccn {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Head locations for one image, in pixel coordinates of the source image.
struct PointAnnotation {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<Point> points;

  // Throws InvalidData naming the first point outside [0,w) x [0,h).
  void validate() const;
};

// Non-negative persons-per-pixel grid; `scale` is the downsampling factor
// relative to the source image.
struct DensityMap {
  int height = 0;
  int width = 0;
  int scale = 1;
  std::vector<double> values;

  DensityMap() = default;
  DensityMap(int h, int w, int s = 1) : height(h), width(w), scale(s), values(static_cast<std::size_t>(h) * w, 0.0) {}

  double& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  double operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double sum() const;
};

struct SegmentationMask {
  int height = 0;
  int width = 0;
  int scale = 1;
  std::vector<std::uint8_t> values;

  std::uint8_t operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t foreground() const;
};

inline constexpr int kNumClasses = 6;

enum class DensityClass : int { kZero = 0, kVeryLow, kLow, kMedium, kHigh, kVeryHigh };

std::string_view class_name(DensityClass c);

// Five strictly increasing thresholds. Class k covers [t[k-1], t[k]) with
// t[-1] = 0 and t[5] = inf, so a count equal to a threshold lands in the
// higher class. The first threshold must be in (0, 1] so class 0 is exactly
// the zero count.
struct ClassBoundaries {
  std::array<double, kNumClasses - 1> thresholds{1.0, 50.0, 150.0, 400.0, 800.0};

  void validate() const;
  // Lower edge of class c (0 for class 0).
  double lower(int c) const { return c == 0 ? 0.0 : thresholds[c - 1]; }
};

// Thresholds 1 and the 20/40/60/80% quantiles of the positive counts, nudged
// to stay strictly increasing. Used to re-derive boundaries for toy datasets.
ClassBoundaries boundaries_from_quantiles(std::span<const double> counts);

inline constexpr double kDefaultSigma = 4.0;
inline constexpr double kDefaultSegThreshold = 1e-3;

// Sum of one truncated Gaussian per point; each kernel is evaluated on a
// (6*sigma+1)^2 window clipped to the image and renormalised to unit mass, so
// the map sums to the point count even for points on the border.
DensityMap generate_density_map(const PointAnnotation& ann, double sigma = kDefaultSigma);

// mask(y, x) = 1 iff density(y, x) > threshold.
SegmentationMask derive_segmentation_mask(const DensityMap& dmap, double threshold = kDefaultSegThreshold);

DensityClass assign_density_class(double count, const ClassBoundaries& b = {});

// Sum pooling over factor x factor blocks; the grid is zero-padded at the
// bottom/right when the factor does not divide it.
DensityMap downsample_density_map(const DensityMap& dmap, int factor);

// Horizontal mirror (x -> w-1-x).
DensityMap flip_horizontal(const DensityMap& dmap);

// Sub-grid [y0, y0+h) x [x0, x0+w); regions outside the source read as zero.
DensityMap crop(const DensityMap& dmap, int y0, int x0, int h, int w);

}  // namespace haccn
