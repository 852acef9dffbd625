#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haccn/dataset.hpp"
#include "haccn/density.hpp"
#include "haccn/model.hpp"
#include "haccn/params.hpp"

namespace haccn {

struct CountResult {
  std::string image_id;
  double gt_count = 0.0;
  double pred_count = 0.0;
};

double count_from_density(const DensityMap& dmap);

// Mean absolute count error.
double mae(std::span<const CountResult> results);
// Root of the mean squared count error (reported as "MSE" by convention).
double mse(std::span<const CountResult> results);

struct InferenceResult {
  DensityMap density;  // cropped to ceil(H/4) x ceil(W/4)
  double count = 0.0;
};

// Reflect-pads the image to a multiple of `pad_multiple` (>= 32, itself a
// multiple of 32), runs the network, crops the density back to the valid
// ceil(H/4) x ceil(W/4) region and sums it.
InferenceResult infer_full_image(const HaCcn& model, const NetworkParams& params, const Image& image,
                                 int pad_multiple = 32);

Image reflect_pad(const Image& image, int height, int width);

std::vector<CountResult> evaluate_dataset(const HaCcn& model, const NetworkParams& params, const Dataset& data);

struct BinReport {
  double lo = 0.0;
  double hi = 0.0;  // +inf for the last bin
  std::size_t n_images = 0;
  std::optional<double> mae;  // absent for empty bins
};

struct EvalReport {
  double mae = 0.0;
  double mse = 0.0;
  std::size_t n_images = 0;
  std::vector<BinReport> per_bin;
};

// Bins are [e0, e1), [e1, e2), ..., [e_{n-1}, inf); counts below e0 go to
// the first bin. Edges must be strictly increasing.
std::vector<BinReport> density_level_report(std::span<const CountResult> results, std::span<const double> bin_edges);

// Lower edges of five quantile bins (0, q20, q40, q60, q80) of the GT counts,
// deduplicated.
std::vector<double> quantile_bin_edges(std::span<const CountResult> results, int bins = 5);

EvalReport make_report(std::span<const CountResult> results, std::span<const double> bin_edges);

std::string report_to_json(const EvalReport& report, const std::string& config_json = {});
std::string bins_to_csv(std::span<const BinReport> bins);

struct MetricTriple {
  std::optional<double> s;  // target-trained model on target
  double ns = 0.0;          // source-trained model on target
  std::optional<double> c;  // ns - s
};

struct CrossDatasetReport {
  MetricTriple mae;
  MetricTriple mse;
};

// NS always; S and C only when target parameters are supplied.
CrossDatasetReport cross_dataset_eval(const HaCcn& source_model, const NetworkParams& source_params,
                                      const HaCcn* target_model, const NetworkParams* target_params,
                                      const Dataset& target);
std::string cross_dataset_to_json(const CrossDatasetReport& r);

}  // namespace haccn
