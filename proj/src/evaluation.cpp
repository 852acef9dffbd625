#include "haccn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace haccn {

double count_from_density(const DensityMap& dmap) { return dmap.sum(); }

double mae(std::span<const CountResult> results) {
  if (results.empty()) throw InvalidArgument("MAE of an empty result set");
  double s = 0.0;
  for (const auto& r : results) s += std::abs(r.gt_count - r.pred_count);
  return s / static_cast<double>(results.size());
}

double mse(std::span<const CountResult> results) {
  if (results.empty()) throw InvalidArgument("MSE of an empty result set");
  double s = 0.0;
  for (const auto& r : results) {
    const double e = r.gt_count - r.pred_count;
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(results.size()));
}

Image reflect_pad(const Image& image, int height, int width) {
  if (height < image.height || width < image.width) throw ShapeError("reflect_pad target smaller than image");
  if (height == image.height && width == image.width) return image;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Image out(image.channels, height, width);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < height; ++y) {
      const int sy = reflect(y, image.height);
      for (int x = 0; x < width; ++x) out(c, y, x) = image(c, sy, reflect(x, image.width));
    }
  }
  return out;
}

InferenceResult infer_full_image(const HaCcn& model, const NetworkParams& params, const Image& image,
                                 int pad_multiple) {
  if (pad_multiple < 32 || pad_multiple % 32 != 0) throw InvalidArgument("pad_multiple must be a multiple of 32");
  auto round_up = [pad_multiple](int v) { return (v + pad_multiple - 1) / pad_multiple * pad_multiple; };
  const Image padded = reflect_pad(image, round_up(image.height), round_up(image.width));
  const auto fwd = model.forward(padded, params);
  InferenceResult r;
  r.density = crop(fwd.density, 0, 0, (image.height + 3) / 4, (image.width + 3) / 4);
  r.count = count_from_density(r.density);
  return r;
}

std::vector<CountResult> evaluate_dataset(const HaCcn& model, const NetworkParams& params, const Dataset& data) {
  std::vector<CountResult> out;
  out.reserve(data.size());
  for (const auto& s : data) {
    out.push_back({s.ann.image_id, s.count(), infer_full_image(model, params, s.image).count});
  }
  return out;
}

std::vector<BinReport> density_level_report(std::span<const CountResult> results, std::span<const double> bin_edges) {
  if (bin_edges.empty()) throw InvalidArgument("at least one bin edge is required");
  for (std::size_t i = 1; i < bin_edges.size(); ++i) {
    if (!(bin_edges[i] > bin_edges[i - 1])) throw InvalidArgument("bin edges must be strictly increasing");
  }
  std::vector<BinReport> bins(bin_edges.size());
  std::vector<double> err(bin_edges.size(), 0.0);
  for (std::size_t i = 0; i < bins.size(); ++i) {
    bins[i].lo = bin_edges[i];
    bins[i].hi = i + 1 < bin_edges.size() ? bin_edges[i + 1] : std::numeric_limits<double>::infinity();
  }
  for (const auto& r : results) {
    const auto it = std::upper_bound(bin_edges.begin(), bin_edges.end(), r.gt_count);
    const std::size_t b = it == bin_edges.begin() ? 0 : static_cast<std::size_t>(it - bin_edges.begin()) - 1;
    bins[b].n_images += 1;
    err[b] += std::abs(r.gt_count - r.pred_count);
  }
  for (std::size_t i = 0; i < bins.size(); ++i) {
    if (bins[i].n_images > 0) bins[i].mae = err[i] / static_cast<double>(bins[i].n_images);
  }
  return bins;
}

std::vector<double> quantile_bin_edges(std::span<const CountResult> results, int bins) {
  if (bins < 1) throw InvalidArgument("need at least one bin");
  std::vector<double> counts;
  for (const auto& r : results) counts.push_back(r.gt_count);
  std::sort(counts.begin(), counts.end());
  std::vector<double> edges{0.0};
  if (counts.empty()) return edges;
  for (int i = 1; i < bins; ++i) {
    const double pos = static_cast<double>(i) / bins * static_cast<double>(counts.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const auto hi = std::min(lo + 1, counts.size() - 1);
    const double q = counts[lo] + (pos - static_cast<double>(lo)) * (counts[hi] - counts[lo]);
    if (q > edges.back()) edges.push_back(q);
  }
  return edges;
}

EvalReport make_report(std::span<const CountResult> results, std::span<const double> bin_edges) {
  EvalReport r;
  r.mae = mae(results);
  r.mse = mse(results);
  r.n_images = results.size();
  r.per_bin = density_level_report(results, bin_edges);
  return r;
}

namespace {

nlohmann::json bins_json(std::span<const BinReport> bins) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : bins) {
    nlohmann::json e{{"lo", b.lo}, {"n_images", b.n_images}};
    e["hi"] = std::isinf(b.hi) ? nlohmann::json(nullptr) : nlohmann::json(b.hi);
    e["mae"] = b.mae ? nlohmann::json(*b.mae) : nlohmann::json(nullptr);
    arr.push_back(std::move(e));
  }
  return arr;
}

}  // namespace

std::string report_to_json(const EvalReport& report, const std::string& config_json) {
  nlohmann::json j{{"mae", report.mae}, {"mse", report.mse}, {"n_images", report.n_images},
                   {"per_bin", bins_json(report.per_bin)}};
  if (!config_json.empty()) j["config"] = nlohmann::json::parse(config_json);
  return j.dump(2);
}

std::string bins_to_csv(std::span<const BinReport> bins) {
  std::ostringstream os;
  os.precision(10);
  os << "bin_lo,bin_hi,n_images,mae\n";
  for (const auto& b : bins) {
    os << b.lo << ',';
    if (!std::isinf(b.hi)) os << b.hi;
    os << ',' << b.n_images << ',';
    if (b.mae) os << *b.mae;
    os << '\n';
  }
  return os.str();
}

CrossDatasetReport cross_dataset_eval(const HaCcn& source_model, const NetworkParams& source_params,
                                      const HaCcn* target_model, const NetworkParams* target_params,
                                      const Dataset& target) {
  if (target.empty()) throw InvalidArgument("cross-dataset evaluation needs a non-empty target set");
  if ((target_model == nullptr) != (target_params == nullptr)) {
    throw InvalidArgument("target model and target parameters must be given together");
  }
  const auto ns = evaluate_dataset(source_model, source_params, target);
  CrossDatasetReport r;
  r.mae.ns = mae(ns);
  r.mse.ns = mse(ns);
  if (target_params) {
    const auto s = evaluate_dataset(*target_model, *target_params, target);
    r.mae.s = mae(s);
    r.mse.s = mse(s);
    r.mae.c = r.mae.ns - *r.mae.s;
    r.mse.c = r.mse.ns - *r.mse.s;
  }
  return r;
}

std::string cross_dataset_to_json(const CrossDatasetReport& r) {
  auto triple = [](const MetricTriple& t) {
    return nlohmann::json{{"S", t.s ? nlohmann::json(*t.s) : nlohmann::json(nullptr)},
                          {"NS", t.ns},
                          {"C", t.c ? nlohmann::json(*t.c) : nlohmann::json(nullptr)}};
  };
  return nlohmann::json{{"mae", triple(r.mae)}, {"mse", triple(r.mse)}}.dump(2);
}

}  // namespace haccn
