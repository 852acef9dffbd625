#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haccn/dataset.hpp"
#include "haccn/density.hpp"
#include "haccn/model.hpp"
#include "haccn/params.hpp"
#include "haccn/rng.hpp"
#include "haccn/training.hpp"

namespace haccn {

using ClassScores = std::array<double, kNumClasses>;

enum class Aggregation { kGap, kGmp, kLse };

struct AggregationMethod {
  Aggregation kind = Aggregation::kLse;
  double r = 4.0;  // LSE sharpness

  void validate() const;
};

AggregationMethod parse_aggregation(std::string_view name, double r = 4.0);
std::string_view aggregation_name(Aggregation a);

// Maps each of the 6 score planes to one image-level score:
//   GAP  mean, GMP  max,
//   LSE  (1/r) log( (1/wh) sum_ij exp(r S_ij) )
ClassScores aggregate_scores(const Tensor& scores, const AggregationMethod& m);
double aggregate_plane(std::span<const double> plane, const AggregationMethod& m);
// d(aggregate)/d(scores) contracted with `d_agg`.
Tensor aggregate_scores_backward(const Tensor& scores, const AggregationMethod& m, const ClassScores& d_agg);

struct ClassificationLoss {
  double value = 0.0;
  ClassScores d_scores{};  // gradient w.r.t. the aggregated scores
  ClassScores probs{};
};

// Soft-max over the aggregated scores followed by binary cross-entropy
// against the one-hot label, averaged over the classes.
ClassificationLoss classification_loss(const ClassScores& aggregated, int label);

// Mean source count per density class. n[0] is always 0; classes without
// source images fall back to the interval midpoint (top class: twice its
// lower edge).
struct ClassPriors {
  ClassScores n{};
  void validate() const;
};

ClassPriors compute_class_priors(std::span<const double> source_counts, const ClassBoundaries& b);

std::string priors_to_json(const ClassPriors& p, const ClassBoundaries& b);
std::pair<ClassPriors, ClassBoundaries> priors_from_json(const std::string& text);

enum class PseudoGtNormalization {
  kPixelSoftmax,  // per-pixel soft-max over classes, divided by w*h
  kPlaneSoftmax,  // per-plane spatial soft-max (each plane sums to one)
};

// D(i,j) = sum_c n(c) * normalised S^c(i,j). Output scale is 4 (the score
// maps live at the fused-feature resolution).
DensityMap generate_pseudo_gt(const Tensor& scores, const ClassPriors& priors,
                              PseudoGtNormalization norm = PseudoGtNormalization::kPixelSoftmax);

// Replaces exactly round(fraction * N) labels, chosen without replacement,
// with a neighbouring class (index +-1, uniform when both exist).
std::vector<int> inject_label_noise(std::span<const int> labels, double fraction, Rng& rng);

// Fused features of a frozen counting network paired with a class label.
struct CamSample {
  Tensor fused;
  int label = 0;
};

std::vector<CamSample> make_cam_samples(const HaCcn& model, const NetworkParams& params, const std::vector<Image>& images,
                                        std::span<const int> labels);

struct CamTrainConfig {
  int iterations = 200;
  int batch_size = 4;
  double learning_rate = 1e-3;
  AggregationMethod aggregation;
  std::uint64_t seed = 0;
};

struct CamTrainLog {
  std::vector<double> losses;  // one per iteration
  double train_accuracy = 0.0;
};

// Trains only the CAM group; every other tensor is left untouched.
CamTrainLog cam_train(const HaCcn& model, NetworkParams& params, const std::vector<CamSample>& samples,
                      const CamTrainConfig& cfg);

double cam_accuracy(const HaCcn& model, const NetworkParams& params, const std::vector<CamSample>& samples,
                    const AggregationMethod& agg);

struct AdaptConfig {
  AggregationMethod aggregation;
  double label_noise = 0.15;
  int patch_size = 64;
  int patches_per_image = 9;
  std::vector<double> patch_scales{0.5, 0.75, 1.0};
  int cam_source_iterations = 300;
  int cam_target_iterations = 150;
  int finetune_iterations = 300;
  int batch_size = 4;
  double cam_learning_rate = 1e-3;
  double finetune_learning_rate = 1e-4;
  PseudoGtNormalization pseudo_norm = PseudoGtNormalization::kPixelSoftmax;
  GroupSet finetune_groups{ParamGroup::kBranchBlocks, ParamGroup::kFusion};
  std::optional<ClassBoundaries> boundaries;  // default: quantiles of the source patch counts
  double sigma = kDefaultSigma;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptStageLog {
  std::string stage;
  std::vector<double> losses;
  std::optional<double> accuracy;
};

struct AdaptResult {
  NetworkParams params;
  ClassPriors priors;
  ClassBoundaries boundaries;
  std::vector<AdaptStageLog> stages;
};

// Three stages in order: CAM training on labelled source patches, CAM
// fine-tuning on target patches with (noisy) image-level labels, then
// fine-tuning of `finetune_groups` on pseudo ground truth synthesised by the
// CAM. Target point annotations are only used to derive per-patch labels when
// `target_image_labels` is absent; patches inherit the image label otherwise.
AdaptResult adapt(const HaCcn& model, const NetworkParams& pretrained, const Dataset& source, const Dataset& target,
                  const AdaptConfig& cfg, const std::optional<std::vector<int>>& target_image_labels = std::nullopt);

}  // namespace haccn
