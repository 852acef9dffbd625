#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haccn/dataset.hpp"
#include "haccn/density.hpp"
#include "haccn/model.hpp"
#include "haccn/params.hpp"
#include "haccn/rng.hpp"

namespace haccn {

// Every field is a key of the flat `key = value` config file.
struct TrainConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;  // Adam momentum
  double beta2 = 0.999;
  int batch_size = 1;
  int iterations = 1000;
  double seg_loss_weight = 1.0;
  int patch_size = 224;
  int patches_per_image = 9;
  double val_fraction = 0.10;
  int val_interval = 100;
  std::uint64_t seed = 0;
  double sigma = kDefaultSigma;
  double seg_threshold = kDefaultSegThreshold;
  double noise_std = 0.01;  // fraction of the [0, 1] pixel range
  bool flip = true;
  double grad_clip = 10.0;  // global L2 norm; 0 disables
  bool squared_loss = true;

  void validate() const;
};

// Parses `key = value` lines; '#' starts a comment. Unknown keys are errors.
TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
std::string format_train_config(const TrainConfig& c);

struct TrainSample {
  std::string image_id;
  Image image;             // patch_size x patch_size
  DensityMap density;      // scale 4
  SegmentationMask mask;   // scale 4
  DensityClass label = DensityClass::kZero;
  double window_count = 0.0;  // annotated points inside the crop window
  int y0 = 0, x0 = 0, size = 0;
  bool flipped = false;
};

// Loss value together with its gradient w.r.t. the prediction.
struct LossGrad {
  double value = 0.0;
  Tensor grad;  // 1 x h x w
};

// Squared L2 distance summed over pixels (unsquared Euclidean norm when
// `squared` is false).
LossGrad density_loss(const DensityMap& pred, const DensityMap& gt, bool squared = true);
// Batch mean of density_loss.
double density_loss(std::span<const DensityMap> pred, std::span<const DensityMap> gt, bool squared = true);

// Mean binary cross-entropy of sigmoid(logits) against the mask.
LossGrad segmentation_loss(const Tensor& logits, const SegmentationMask& mask);

// density + lambda * segmentation.
double total_loss(const DensityMap& pred, const DensityMap& gt, const Tensor& seg_logits, const SegmentationMask& mask,
                  double lambda, bool squared = true);

// Crops patches_per_image random patch_size windows per image (zero padding
// images that are smaller), flips half of them horizontally (image and
// supervision together), and adds Gaussian noise to the image only. The
// density patch is built from the points inside the window, so its sum is
// exactly the window count.
std::vector<TrainSample> make_training_patches(const Dataset& dataset, const TrainConfig& cfg, Rng& rng,
                                               const ClassBoundaries& boundaries = {});

// Multi-scale variant: each window has side s * patch_size, s drawn from
// `scales`, and is resampled to patch_size; its density map is regenerated
// from the rescaled points inside the window.
std::vector<TrainSample> make_multiscale_patches(const Dataset& dataset, const TrainConfig& cfg, Rng& rng,
                                                 std::span<const double> scales,
                                                 const ClassBoundaries& boundaries = {});

struct HistoryRow {
  int iteration = 0;
  double density_loss = 0.0;
  double seg_loss = 0.0;
  double total_loss = 0.0;
  std::optional<double> val_mae;
};

std::string history_to_csv(std::span<const HistoryRow> rows);

struct TrainResult {
  NetworkParams params;       // after the last iteration
  NetworkParams best_params;  // lowest validation MAE (== params without validation)
  std::vector<HistoryRow> history;
  std::optional<double> best_val_mae;
};

class Adam {
 public:
  Adam(const NetworkParams& params, double lr, double beta1, double beta2, double eps = 1e-8);
  // Updates only tensors in `groups`.
  void step(NetworkParams& params, const Gradients& grads, const GroupSet& groups);

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

using ProgressFn = std::function<void(const HistoryRow&)>;

// Runs the optimisation loop over prepared samples. Only `trainable` groups
// change. The segmentation term is used only for a supervised SAM. Throws
// Diverged on a non-finite loss.
TrainResult fit(const HaCcn& model, NetworkParams params, const std::vector<TrainSample>& samples,
                const TrainConfig& cfg, const GroupSet& trainable, const Dataset& validation = {},
                const ProgressFn& progress = {});

// Full supervised training: validation split, patch extraction, fit.
// `init` overrides random initialisation (e.g. pre-trained backbone weights).
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config, const Dataset& dataset,
                  const std::optional<NetworkParams>& init = std::nullopt, const ProgressFn& progress = {});

// Split off the validation images: the last round(val_fraction * n) images
// of a seeded permutation.
std::pair<Dataset, Dataset> split_validation(const Dataset& dataset, double val_fraction, std::uint64_t seed);

}  // namespace haccn
