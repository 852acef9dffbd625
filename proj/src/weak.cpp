#include "haccn/weak.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "json.hpp"

namespace haccn {

void AggregationMethod::validate() const {
  if (kind == Aggregation::kLse && !(r > 0.0)) throw InvalidArgument("LSE aggregation needs r > 0");
}

AggregationMethod parse_aggregation(std::string_view name, double r) {
  AggregationMethod m;
  m.r = r;
  if (name == "gap") m.kind = Aggregation::kGap;
  else if (name == "gmp") m.kind = Aggregation::kGmp;
  else if (name == "lse") m.kind = Aggregation::kLse;
  else throw InvalidArgument("unknown aggregation '" + std::string(name) + "' (expected gap, gmp, lse)");
  m.validate();
  return m;
}

std::string_view aggregation_name(Aggregation a) {
  switch (a) {
    case Aggregation::kGap: return "gap";
    case Aggregation::kGmp: return "gmp";
    case Aggregation::kLse: return "lse";
  }
  return "unknown";
}

double aggregate_plane(std::span<const double> plane, const AggregationMethod& m) {
  m.validate();
  if (plane.empty()) throw ShapeError("cannot aggregate an empty score plane");
  switch (m.kind) {
    case Aggregation::kGap: {
      double s = 0.0;
      for (double v : plane) s += v;
      return s / static_cast<double>(plane.size());
    }
    case Aggregation::kGmp:
      return *std::max_element(plane.begin(), plane.end());
    case Aggregation::kLse: {
      // Shift by the max so the exponentials stay finite.
      const double mx = *std::max_element(plane.begin(), plane.end());
      double s = 0.0;
      for (double v : plane) s += std::exp(m.r * (v - mx));
      return mx + std::log(s / static_cast<double>(plane.size())) / m.r;
    }
  }
  return 0.0;
}

ClassScores aggregate_scores(const Tensor& scores, const AggregationMethod& m) {
  if (scores.channels != kNumClasses) {
    throw ShapeError("score maps must have " + std::to_string(kNumClasses) + " planes, got " +
                     std::to_string(scores.channels));
  }
  ClassScores out{};
  for (int c = 0; c < kNumClasses; ++c) out[static_cast<std::size_t>(c)] = aggregate_plane(scores.channel(c), m);
  return out;
}

Tensor aggregate_scores_backward(const Tensor& scores, const AggregationMethod& m, const ClassScores& d_agg) {
  Tensor d(scores.channels, scores.height, scores.width);
  const double n = static_cast<double>(scores.plane());
  for (int c = 0; c < scores.channels; ++c) {
    const auto plane = scores.channel(c);
    auto dp = d.channel(c);
    const double g = d_agg[static_cast<std::size_t>(c)];
    switch (m.kind) {
      case Aggregation::kGap:
        for (double& v : dp) v = g / n;
        break;
      case Aggregation::kGmp: {
        const auto it = std::max_element(plane.begin(), plane.end());
        dp[static_cast<std::size_t>(it - plane.begin())] = g;
        break;
      }
      case Aggregation::kLse: {
        const double mx = *std::max_element(plane.begin(), plane.end());
        double s = 0.0;
        for (std::size_t i = 0; i < plane.size(); ++i) {
          dp[i] = std::exp(m.r * (plane[i] - mx));
          s += dp[i];
        }
        for (double& v : dp) v = g * v / s;
        break;
      }
    }
  }
  return d;
}

ClassificationLoss classification_loss(const ClassScores& aggregated, int label) {
  if (label < 0 || label >= kNumClasses) throw InvalidArgument("class label out of range");
  ClassificationLoss r;
  const double mx = *std::max_element(aggregated.begin(), aggregated.end());
  double z = 0.0;
  for (std::size_t c = 0; c < aggregated.size(); ++c) {
    r.probs[c] = std::exp(aggregated[c] - mx);
    z += r.probs[c];
  }
  for (double& p : r.probs) p /= z;

  constexpr double kEps = 1e-12;
  const double inv_k = 1.0 / kNumClasses;
  ClassScores d_p{};
  for (std::size_t c = 0; c < aggregated.size(); ++c) {
    const double p = std::clamp(r.probs[c], kEps, 1.0 - kEps);
    const double y = static_cast<int>(c) == label ? 1.0 : 0.0;
    r.value -= inv_k * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    d_p[c] = -inv_k * (y / p - (1.0 - y) / (1.0 - p));
  }
  double dot = 0.0;
  for (std::size_t c = 0; c < aggregated.size(); ++c) dot += d_p[c] * r.probs[c];
  for (std::size_t k = 0; k < aggregated.size(); ++k) r.d_scores[k] = r.probs[k] * (d_p[k] - dot);
  return r;
}

void ClassPriors::validate() const {
  if (n[0] != 0.0) throw InvalidArgument("prior of the zero-density class must be 0");
  for (std::size_t c = 1; c < n.size(); ++c) {
    if (!(n[c] >= n[c - 1])) throw InvalidArgument("class priors must be non-decreasing");
  }
}

ClassPriors compute_class_priors(std::span<const double> source_counts, const ClassBoundaries& b) {
  if (source_counts.empty()) throw InvalidArgument("class priors need a non-empty source set");
  b.validate();
  ClassScores sum{}, num{};
  for (double c : source_counts) {
    const auto k = static_cast<std::size_t>(assign_density_class(c, b));
    sum[k] += c;
    num[k] += 1.0;
  }
  ClassPriors p;
  for (int k = 1; k < kNumClasses; ++k) {
    const auto i = static_cast<std::size_t>(k);
    if (num[i] > 0.0) {
      p.n[i] = sum[i] / num[i];
    } else if (k < kNumClasses - 1) {
      p.n[i] = 0.5 * (b.lower(k) + b.thresholds[i]);
    } else {
      p.n[i] = 2.0 * b.lower(k);
    }
  }
  p.n[0] = 0.0;
  return p;
}

std::string priors_to_json(const ClassPriors& p, const ClassBoundaries& b) {
  nlohmann::json j{{"boundaries", b.thresholds}, {"n", p.n}};
  return j.dump(2);
}

std::pair<ClassPriors, ClassBoundaries> priors_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ClassPriors p;
    ClassBoundaries b;
    const auto& bj = j.at("boundaries");
    const auto& nj = j.at("n");
    if (bj.size() != b.thresholds.size() || nj.size() != p.n.size()) {
      throw InvalidData("priors file needs 5 boundaries and 6 class means");
    }
    for (std::size_t i = 0; i < b.thresholds.size(); ++i) b.thresholds[i] = bj[i].get<double>();
    for (std::size_t i = 0; i < p.n.size(); ++i) p.n[i] = nj[i].get<double>();
    b.validate();
    p.validate();
    return {p, b};
  } catch (const nlohmann::json::exception& e) {
    throw InvalidData(std::string("malformed priors file: ") + e.what());
  }
}

DensityMap generate_pseudo_gt(const Tensor& scores, const ClassPriors& priors, PseudoGtNormalization norm) {
  if (scores.channels != kNumClasses) throw ShapeError("pseudo ground truth needs 6 score planes");
  priors.validate();
  DensityMap out(scores.height, scores.width, 4);
  const std::size_t plane = scores.plane();
  if (norm == PseudoGtNormalization::kPixelSoftmax) {
    const double inv_area = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < kNumClasses; ++c) mx = std::max(mx, scores.data[c * plane + i]);
      double z = 0.0, acc = 0.0;
      for (int c = 0; c < kNumClasses; ++c) {
        const double e = std::exp(scores.data[c * plane + i] - mx);
        z += e;
        acc += priors.n[static_cast<std::size_t>(c)] * e;
      }
      out.values[i] = acc / z * inv_area;
    }
    return out;
  }
  for (int c = 0; c < kNumClasses; ++c) {
    const auto p = scores.channel(c);
    const double mx = *std::max_element(p.begin(), p.end());
    double z = 0.0;
    for (double v : p) z += std::exp(v - mx);
    const double w = priors.n[static_cast<std::size_t>(c)] / z;
    for (std::size_t i = 0; i < plane; ++i) out.values[i] += w * std::exp(p[i] - mx);
  }
  return out;
}

std::vector<int> inject_label_noise(std::span<const int> labels, double fraction, Rng& rng) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("label noise fraction must be in [0, 1]");
  std::vector<int> out(labels.begin(), labels.end());
  const auto n_flip = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(labels.size())));
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates: the first n_flip entries are a uniform sample.
  for (std::size_t i = 0; i < n_flip; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                            static_cast<std::int64_t>(idx.size()) - 1));
    std::swap(idx[i], idx[j]);
    int& l = out[idx[i]];
    if (l <= 0) l = 1;
    else if (l >= kNumClasses - 1) l = kNumClasses - 2;
    else l += rng.bernoulli(0.5) ? 1 : -1;
  }
  return out;
}

std::vector<CamSample> make_cam_samples(const HaCcn& model, const NetworkParams& params, const std::vector<Image>& images,
                                        std::span<const int> labels) {
  if (images.size() != labels.size()) throw InvalidArgument("one label per image is required");
  std::vector<CamSample> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back({model.forward(images[i], params).fused, labels[i]});
  }
  return out;
}

double cam_accuracy(const HaCcn& model, const NetworkParams& params, const std::vector<CamSample>& samples,
                    const AggregationMethod& agg) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const auto a = aggregate_scores(model.cam_forward(s.fused, params), agg);
    const auto best = static_cast<int>(std::max_element(a.begin(), a.end()) - a.begin());
    if (best == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

CamTrainLog cam_train(const HaCcn& model, NetworkParams& params, const std::vector<CamSample>& samples,
                      const CamTrainConfig& cfg) {
  cfg.aggregation.validate();
  if (cfg.batch_size <= 0) throw InvalidArgument("CAM batch size must be positive");
  model.check_params(params);
  CamTrainLog log;
  if (cfg.iterations > 0 && samples.empty()) throw InvalidArgument("no CAM training samples");
  const GroupSet cam_only{ParamGroup::kCam};
  Adam adam(params, cfg.learning_rate, 0.9, 0.999);
  Gradients grads(params);
  Rng rng(cfg.seed ^ 0xc2b2ae3d27d4eb4full);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  for (int it = 0; it < cfg.iterations; ++it) {
    grads.zero();
    double loss = 0.0;
    const double inv_b = 1.0 / cfg.batch_size;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const CamSample& s = samples[order[cursor++]];
      StackTape tape;
      const Tensor scores = model.cam_forward(s.fused, params, &tape);
      const auto agg = aggregate_scores(scores, cfg.aggregation);
      auto cl = classification_loss(agg, s.label);
      for (double& g : cl.d_scores) g *= inv_b;
      loss += cl.value * inv_b;
      model.cam_backward(tape, aggregate_scores_backward(scores, cfg.aggregation, cl.d_scores), params, grads);
    }
    if (!std::isfinite(loss)) throw Diverged("CAM training diverged at iteration " + std::to_string(it + 1));
    adam.step(params, grads, cam_only);
    log.losses.push_back(loss);
  }
  log.train_accuracy = cam_accuracy(model, params, samples, cfg.aggregation);
  return log;
}

void AdaptConfig::validate() const {
  aggregation.validate();
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw InvalidArgument("label_noise must be in [0, 1]");
  if (patch_size <= 0 || patch_size % 32 != 0) throw InvalidArgument("patch_size must be a positive multiple of 32");
  if (patches_per_image <= 0 || batch_size <= 0) throw InvalidArgument("patch and batch counts must be positive");
  if (cam_source_iterations < 0 || cam_target_iterations < 0 || finetune_iterations < 0) {
    throw InvalidArgument("iteration counts must be non-negative");
  }
  if (finetune_groups.contains(ParamGroup::kBackbone)) {
    throw InvalidArgument("the backbone stays frozen during weakly supervised fine-tuning");
  }
  if (boundaries) boundaries->validate();
}

namespace {

std::vector<TrainSample> adaptation_patches(const Dataset& data, const AdaptConfig& cfg, Rng& rng) {
  TrainConfig t;
  t.patch_size = cfg.patch_size;
  t.patches_per_image = cfg.patches_per_image;
  t.sigma = cfg.sigma;
  return make_multiscale_patches(data, t, rng, cfg.patch_scales);
}

template <typename F>
auto run_stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const Diverged& e) {
    throw Diverged("stage '" + name + "': " + e.what());
  }
}

}  // namespace

AdaptResult adapt(const HaCcn& model, const NetworkParams& pretrained, const Dataset& source, const Dataset& target,
                  const AdaptConfig& cfg, const std::optional<std::vector<int>>& target_image_labels) {
  cfg.validate();
  model.check_params(pretrained);
  if (source.empty() || target.empty()) throw InvalidArgument("adaptation needs non-empty source and target sets");
  if (target_image_labels && target_image_labels->size() != target.size()) {
    throw InvalidArgument("one image-level label per target image is required");
  }
  Rng rng(cfg.seed);
  AdaptResult result;
  result.params = pretrained;
  result.params.copy_group_from(model.init_params(cfg.seed ^ 0xca11ab1eull), ParamGroup::kCam);

  // Source patches: labels from true counts; priors from the same counts.
  const auto src_patches = adaptation_patches(source, cfg, rng);
  std::vector<double> src_counts;
  for (const auto& p : src_patches) src_counts.push_back(p.window_count);
  result.boundaries = cfg.boundaries ? *cfg.boundaries : boundaries_from_quantiles(src_counts);
  result.priors = compute_class_priors(src_counts, result.boundaries);

  std::vector<Image> images;
  std::vector<int> labels;
  for (const auto& p : src_patches) {
    images.push_back(p.image);
    labels.push_back(static_cast<int>(assign_density_class(p.window_count, result.boundaries)));
  }
  CamTrainConfig cam_cfg{cfg.cam_source_iterations, cfg.batch_size, cfg.cam_learning_rate, cfg.aggregation, cfg.seed};
  auto log1 = run_stage("cam-source", [&] {
    return cam_train(model, result.params, make_cam_samples(model, result.params, images, labels), cam_cfg);
  });
  result.stages.push_back({"cam-source", std::move(log1.losses), log1.train_accuracy});

  // Target patches: only labels are used from here on.
  auto tgt_patches = adaptation_patches(target, cfg, rng);
  images.clear();
  labels.clear();
  std::unordered_map<std::string, int> image_label;
  if (target_image_labels) {
    for (std::size_t i = 0; i < target.size(); ++i) image_label[target[i].ann.image_id] = (*target_image_labels)[i];
  }
  for (const auto& p : tgt_patches) {
    images.push_back(p.image);
    labels.push_back(target_image_labels ? image_label.at(p.image_id)
                                         : static_cast<int>(assign_density_class(p.window_count, result.boundaries)));
  }
  labels = inject_label_noise(labels, cfg.label_noise, rng);
  cam_cfg.iterations = cfg.cam_target_iterations;
  cam_cfg.seed = cfg.seed + 1;
  const auto tgt_cam = make_cam_samples(model, result.params, images, labels);
  auto log2 = run_stage("cam-target", [&] { return cam_train(model, result.params, tgt_cam, cam_cfg); });
  result.stages.push_back({"cam-target", std::move(log2.losses), log2.train_accuracy});

  // Pseudo ground truth replaces the (unavailable) target density maps.
  std::vector<TrainSample> pseudo;
  pseudo.reserve(tgt_patches.size());
  for (std::size_t i = 0; i < tgt_patches.size(); ++i) {
    TrainSample s;
    s.image_id = tgt_patches[i].image_id;
    s.image = std::move(tgt_patches[i].image);
    s.density = generate_pseudo_gt(model.cam_forward(tgt_cam[i].fused, result.params), result.priors, cfg.pseudo_norm);
    s.label = static_cast<DensityClass>(labels[i]);
    pseudo.push_back(std::move(s));
  }
  TrainConfig ft;
  ft.learning_rate = cfg.finetune_learning_rate;
  ft.iterations = cfg.finetune_iterations;
  ft.batch_size = cfg.batch_size;
  ft.patch_size = cfg.patch_size;
  ft.seg_loss_weight = 0.0;
  ft.seed = cfg.seed + 2;
  auto fitted = run_stage("finetune", [&] {
    return fit(model, std::move(result.params), pseudo, ft, cfg.finetune_groups);
  });
  std::vector<double> losses;
  for (const auto& r : fitted.history) losses.push_back(r.total_loss);
  result.stages.push_back({"finetune", std::move(losses), std::nullopt});
  result.params = std::move(fitted.params);
  return result;
}

}  // namespace haccn
