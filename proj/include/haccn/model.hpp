#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "haccn/density.hpp"
#include "haccn/layers.hpp"
#include "haccn/params.hpp"
#include "haccn/tensor.hpp"

namespace haccn {

// Architecture switches. channel_scale = 1 gives the full VGG16 widths
// (conv3 256, conv4/conv5 512, branch outputs 24, GAM hidden 64); smaller
// values shrink every width proportionally for desk-scale runs.
struct ModelConfig {
  bool enable_sam = true;
  bool enable_gam = true;
  bool enable_multiscale = true;
  bool sam_supervised = true;
  double channel_scale = 1.0;
  int input_size = 224;

  void validate() const;
  int width(int base) const;
  bool operator==(const ModelConfig&) const = default;
};

// Named rows of the architecture ablation.
enum class Ablation { kVgg, kMs, kMsSamSelf, kMsSam, kFull };

Ablation parse_ablation(std::string_view name);
std::string_view ablation_name(Ablation a);
ModelConfig apply_ablation(ModelConfig base, Ablation a);

enum class FeatureSource { kConv3, kConv4, kConv5, kFused };

struct ForwardOptions {
  // Replace the spatial (resp. channel) attention by all-ones.
  bool force_sa_one = false;
  bool force_sg_one = false;
};

struct BackboneFeatures {
  Tensor conv3;  // input / 4
  Tensor conv4;  // input / 8
  Tensor conv5;  // input / 16
};

struct SpatialAttentionOutput {
  Tensor sa;          // 1 x h x w, in [0, 1]
  Tensor actuated;    // conv3 * sa
  Tensor seg_logits;  // 1 x h x w
};

struct GlobalAttentionOutput {
  std::vector<double> pooled;  // per-channel spatial mean
  std::vector<double> sg;      // per-channel attention in [0, 1]
  Tensor actuated;             // x * sg
};

struct ForwardResult {
  DensityMap density;       // scale 4
  Tensor seg_logits;        // empty when SAM is disabled
  Tensor sa;                // empty when SAM is disabled
  std::vector<double> sg4;  // empty when the conv4 GAM is absent
  std::vector<double> sg5;
  BackboneFeatures features;
  // Inputs of the three reduction branches (after actuation). Entries for
  // absent branches are empty.
  std::array<Tensor, 3> branch_inputs;
  Tensor fused;  // concatenated branch outputs, the fusion/CAM input
};

// Activations kept from a forward pass for backpropagation.
struct StackTape {
  std::vector<Tensor> acts;  // acts[0] = input, acts[i+1] = output of layer i
};

struct GamTape {
  std::vector<double> pooled, h1, h2, sg;
};

struct ForwardTape {
  std::array<StackTape, 5> backbone;
  std::array<std::vector<int>, 4> pool_argmax;
  StackTape sam;
  std::optional<GamTape> gam4, gam5;
  std::array<StackTape, 3> branch;
  StackTape fusion;
  ForwardOptions options;
};

struct OutputGrads {
  Tensor d_density;     // 1 x h x w, required
  Tensor d_seg_logits;  // optional (empty = zero)
};

// HA-CCN: VGG16 backbone with taps at conv3/conv4/conv5, a spatial attention
// module on conv3, channel attention on conv4/conv5, per-branch reduction to
// a common resolution, and a fusion head producing a 1/4-resolution density
// map. A CAM head for weak supervision reads the same fused features.
class HaCcn {
 public:
  explicit HaCcn(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  NetworkParams init_params(std::uint64_t seed) const;
  // Fails with InvalidData when names or shapes disagree with this config.
  void check_params(const NetworkParams& params) const;

  BackboneFeatures backbone_forward(const Image& image, const NetworkParams& params,
                                    ForwardTape* tape = nullptr) const;
  SpatialAttentionOutput spatial_attention(const Tensor& conv3, const NetworkParams& params, bool force_one = false,
                                           StackTape* tape = nullptr) const;
  // which: 4 or 5
  GlobalAttentionOutput global_attention(const Tensor& x, int which, const NetworkParams& params,
                                         bool force_one = false, GamTape* tape = nullptr) const;
  // which: 3, 4 or 5. Output has width(24) channels at conv3 resolution.
  Tensor branch_reduce(const Tensor& x, int which, const NetworkParams& params, StackTape* tape = nullptr) const;
  DensityMap fuse_and_predict(std::span<const Tensor* const> branches, const NetworkParams& params,
                              StackTape* tape = nullptr, Tensor* fused_out = nullptr) const;

  ForwardResult forward(const Image& image, const NetworkParams& params, const ForwardOptions& options = {},
                        ForwardTape* tape = nullptr) const;

  // Accumulates dLoss/dparam into `grads` for every group in `trainable`;
  // backpropagation stops as soon as nothing upstream is trainable.
  void backward(const ForwardTape& tape, const ForwardResult& fwd, const NetworkParams& params,
                const OutputGrads& out, Gradients& grads, const GroupSet& trainable) const;

  // CAM head: 6 raw score planes at the fused-feature resolution.
  Tensor cam_forward(const Tensor& fused, const NetworkParams& params, StackTape* tape = nullptr) const;
  void cam_backward(const StackTape& tape, const Tensor& d_scores, const NetworkParams& params,
                    Gradients& grads) const;

  int fused_channels() const;
  int branch_channels() const { return config_.width(24); }
  // Branch indices (0 = conv3, 1 = conv4, 2 = conv5) active under this config.
  std::vector<int> active_branches() const;

 private:
  struct ConvLayer {
    layers::ConvShape shape;
    std::size_t weight = 0;
    std::size_t bias = 0;
    bool relu = true;
  };
  using Stack = std::vector<ConvLayer>;

  struct FcLayer {
    int in = 0, out = 0;
    std::size_t weight = 0, bias = 0;
  };
  struct Gam {
    std::array<FcLayer, 3> fc;
  };

  Tensor run_stack(const Stack& stack, const Tensor& in, const NetworkParams& params, StackTape* tape) const;
  Tensor backprop_stack(const Stack& stack, const StackTape& tape, Tensor dout, const NetworkParams& params,
                        Gradients& grads, bool param_grads, bool want_input_grad) const;
  std::vector<double> backprop_gam(const Gam& gam, const GamTape& tape, const Tensor& x, const Tensor& d_actuated,
                                   const NetworkParams& params, Gradients& grads, bool param_grads,
                                   Tensor* d_x) const;

  ModelConfig config_;
  NetworkParams layout_;  // names/shapes/groups; values unused
  std::array<Stack, 5> backbone_;
  Stack sam_;
  std::optional<Gam> gam4_, gam5_;
  std::array<Stack, 3> branch_;
  Stack fusion_;
  Stack cam_;
};

}  // namespace haccn
