#include "haccn/model.hpp"

#include <cmath>

#include "haccn/rng.hpp"

namespace haccn {

namespace {

constexpr std::array<std::array<int, 3>, 5> kVggWidths{{{64, 64, 0}, {128, 128, 0}, {256, 256, 256}, {512, 512, 512},
                                                         {512, 512, 512}}};
constexpr std::array<int, 5> kVggDepth{2, 2, 3, 3, 3};
constexpr std::array<int, 3> kBranchUpsample{1, 2, 4};
constexpr std::array<int, 3> kBranchName{3, 4, 5};

}  // namespace

void ModelConfig::validate() const {
  if (!(channel_scale > 0.0) || channel_scale > 1.0) throw InvalidArgument("channel_scale must be in (0, 1]");
  if (input_size <= 0 || input_size % 32 != 0) throw InvalidArgument("input_size must be a positive multiple of 32");
  if (enable_sam && !enable_multiscale) {
    throw InvalidArgument("the spatial attention module gates conv3 features, which only the multi-scale model uses");
  }
}

int ModelConfig::width(int base) const {
  return std::max(1, static_cast<int>(std::lround(base * channel_scale)));
}

Ablation parse_ablation(std::string_view name) {
  if (name == "vgg") return Ablation::kVgg;
  if (name == "ms") return Ablation::kMs;
  if (name == "ms+sam-self") return Ablation::kMsSamSelf;
  if (name == "ms+sam") return Ablation::kMsSam;
  if (name == "full") return Ablation::kFull;
  throw InvalidArgument("unknown ablation '" + std::string(name) + "' (expected vgg, ms, ms+sam-self, ms+sam, full)");
}

std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kVgg: return "vgg";
    case Ablation::kMs: return "ms";
    case Ablation::kMsSamSelf: return "ms+sam-self";
    case Ablation::kMsSam: return "ms+sam";
    case Ablation::kFull: return "full";
  }
  return "unknown";
}

ModelConfig apply_ablation(ModelConfig base, Ablation a) {
  base.enable_multiscale = a != Ablation::kVgg;
  base.enable_sam = a == Ablation::kMsSamSelf || a == Ablation::kMsSam || a == Ablation::kFull;
  base.sam_supervised = a == Ablation::kMsSam || a == Ablation::kFull;
  base.enable_gam = a == Ablation::kFull;
  return base;
}

HaCcn::HaCcn(ModelConfig config) : config_(config) {
  config_.validate();
  auto conv = [this](const std::string& name, ParamGroup g, int cin, int cout, int k, bool relu) {
    ConvLayer l;
    l.shape = {cin, cout, k};
    l.weight = layout_.add(name + ".weight", g, {cout, cin, k, k});
    l.bias = layout_.add(name + ".bias", g, {cout});
    l.relu = relu;
    return l;
  };

  int cin = 3;
  for (int b = 0; b < 5; ++b) {
    for (int i = 0; i < kVggDepth[b]; ++i) {
      const int cout = config_.width(kVggWidths[b][i]);
      backbone_[b].push_back(conv("backbone.conv" + std::to_string(b + 1) + "_" + std::to_string(i + 1),
                                  ParamGroup::kBackbone, cin, cout, 3, true));
      cin = cout;
    }
  }
  const int c3 = config_.width(256), c45 = config_.width(512);
  const int w64 = config_.width(64), w32 = config_.width(32), w24 = config_.width(24);

  if (config_.enable_sam) {
    sam_.push_back(conv("sam.conv1", ParamGroup::kSam, c3, w64, 3, true));
    sam_.push_back(conv("sam.conv2", ParamGroup::kSam, w64, w64, 3, true));
    sam_.push_back(conv("sam.conv3", ParamGroup::kSam, w64, w32, 3, true));
    sam_.push_back(conv("sam.conv4", ParamGroup::kSam, w32, 1, 3, false));
  }
  auto gam = [&](const std::string& name) {
    Gam g;
    const std::array<std::pair<int, int>, 3> dims{{{c45, w64}, {w64, w64}, {w64, c45}}};
    for (int i = 0; i < 3; ++i) {
      const std::string base = name + ".fc" + std::to_string(i + 1);
      g.fc[i].in = dims[i].first;
      g.fc[i].out = dims[i].second;
      g.fc[i].weight = layout_.add(base + ".weight", ParamGroup::kGam, {dims[i].second, dims[i].first});
      g.fc[i].bias = layout_.add(base + ".bias", ParamGroup::kGam, {dims[i].second});
    }
    return g;
  };
  if (config_.enable_gam && config_.enable_multiscale) gam4_ = gam("gam4");
  if (config_.enable_gam) gam5_ = gam("gam5");

  for (int b : active_branches()) {
    const std::string name = "branch" + std::to_string(kBranchName[b]);
    const int in = b == 0 ? c3 : c45;
    branch_[b].push_back(conv(name + ".conv1", ParamGroup::kBranchBlocks, in, w64, 1, true));
    branch_[b].push_back(conv(name + ".conv2", ParamGroup::kBranchBlocks, w64, w64, 3, true));
    branch_[b].push_back(conv(name + ".conv3", ParamGroup::kBranchBlocks, w64, w24, 1, true));
  }
  const int fin = fused_channels();
  fusion_.push_back(conv("fusion.conv1", ParamGroup::kFusion, fin, w64, 1, true));
  fusion_.push_back(conv("fusion.conv2", ParamGroup::kFusion, w64, w64, 3, true));
  fusion_.push_back(conv("fusion.conv3", ParamGroup::kFusion, w64, 1, 1, true));

  cam_.push_back(conv("cam.conv1", ParamGroup::kCam, fin, w64, 3, true));
  cam_.push_back(conv("cam.conv2", ParamGroup::kCam, w64, w64, 3, true));
  cam_.push_back(conv("cam.conv3", ParamGroup::kCam, w64, w32, 3, true));
  cam_.push_back(conv("cam.conv4", ParamGroup::kCam, w32, kNumClasses, 3, false));
}

std::vector<int> HaCcn::active_branches() const {
  if (config_.enable_multiscale) return {0, 1, 2};
  return {2};
}

int HaCcn::fused_channels() const {
  return branch_channels() * static_cast<int>(active_branches().size());
}

NetworkParams HaCcn::init_params(std::uint64_t seed) const {
  NetworkParams p = layout_;
  Rng rng(seed);
  for (auto& t : p.all()) {
    if (t.shape.size() == 1) continue;  // biases start at zero
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= static_cast<std::size_t>(t.shape[d]);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.values) v = rng.normal(0.0, stddev);
  }
  // the density head ends in a ReLU; a small positive offset keeps it from starting dead
  for (double& v : p[fusion_.back().bias].values) v = 0.01;
  return p;
}

void HaCcn::check_params(const NetworkParams& params) const {
  if (params.size() != layout_.size()) {
    throw InvalidData("parameter set has " + std::to_string(params.size()) + " tensors, model expects " +
                      std::to_string(layout_.size()));
  }
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const Param& want = layout_[i];
    const Param& got = params[i];
    if (got.name != want.name) throw InvalidData("expected parameter '" + want.name + "', found '" + got.name + "'");
    if (got.shape != want.shape || got.values.size() != want.values.size()) {
      throw InvalidData("shape mismatch for parameter '" + want.name + "'");
    }
    if (got.group != want.group) throw InvalidData("group mismatch for parameter '" + want.name + "'");
  }
}

Tensor HaCcn::run_stack(const Stack& stack, const Tensor& in, const NetworkParams& params, StackTape* tape) const {
  if (tape) {
    tape->acts.clear();
    tape->acts.push_back(in);
  }
  Tensor x = in;
  for (const auto& l : stack) {
    x = layers::conv2d(x, l.shape, params[l.weight].values, params[l.bias].values);
    if (l.relu) layers::relu_inplace(x);
    if (tape) tape->acts.push_back(x);
  }
  return x;
}

Tensor HaCcn::backprop_stack(const Stack& stack, const StackTape& tape, Tensor dout, const NetworkParams& params,
                             Gradients& grads, bool param_grads, bool want_input_grad) const {
  for (std::size_t i = stack.size(); i-- > 0;) {
    const auto& l = stack[i];
    if (l.relu) layers::relu_backward_inplace(dout, tape.acts[i + 1]);
    const bool need_input = want_input_grad || i > 0;
    if (!param_grads && !need_input) return {};
    std::span<double> dw, db;
    if (param_grads) {
      dw = grads.values[l.weight];
      db = grads.values[l.bias];
    }
    dout = layers::conv2d_backward(tape.acts[i], dout, l.shape, params[l.weight].values, dw, db, need_input);
  }
  return want_input_grad ? dout : Tensor{};
}

BackboneFeatures HaCcn::backbone_forward(const Image& image, const NetworkParams& params, ForwardTape* tape) const {
  if (image.channels != 3) throw ShapeError("backbone expects a 3-channel image");
  if (image.height % 32 != 0 || image.width % 32 != 0 || image.height == 0 || image.width == 0) {
    throw ShapeError("image size " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " is not a multiple of 32; pad it first");
  }
  BackboneFeatures f;
  Tensor x = image;
  for (int b = 0; b < 5; ++b) {
    x = run_stack(backbone_[b], x, params, tape ? &tape->backbone[b] : nullptr);
    if (b == 2) f.conv3 = x;
    if (b == 3) f.conv4 = x;
    if (b < 4) {
      auto pooled = layers::maxpool2(x);
      if (tape) tape->pool_argmax[b] = std::move(pooled.argmax);
      x = std::move(pooled.out);
    }
  }
  f.conv5 = std::move(x);
  return f;
}

SpatialAttentionOutput HaCcn::spatial_attention(const Tensor& conv3, const NetworkParams& params, bool force_one,
                                                StackTape* tape) const {
  if (!config_.enable_sam) throw InvalidArgument("spatial attention is disabled in this configuration");
  SpatialAttentionOutput out;
  out.seg_logits = run_stack(sam_, conv3, params, tape);
  out.sa = Tensor(1, conv3.height, conv3.width, 1.0);
  if (!force_one) {
    for (std::size_t i = 0; i < out.sa.size(); ++i) out.sa.data[i] = layers::sigmoid(out.seg_logits.data[i]);
  }
  out.actuated = conv3;
  const std::size_t plane = conv3.plane();
  for (int c = 0; c < conv3.channels; ++c) {
    double* row = out.actuated.data.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) row[i] *= out.sa.data[i];
  }
  return out;
}

GlobalAttentionOutput HaCcn::global_attention(const Tensor& x, int which, const NetworkParams& params, bool force_one,
                                              GamTape* tape) const {
  const std::optional<Gam>& gam = which == 4 ? gam4_ : gam5_;
  if (!gam) throw InvalidArgument("no global attention module on conv" + std::to_string(which));
  if (x.channels != gam->fc[0].in) {
    throw ShapeError("global attention expects " + std::to_string(gam->fc[0].in) + " channels, got " +
                     std::to_string(x.channels));
  }
  GlobalAttentionOutput out;
  out.pooled.resize(static_cast<std::size_t>(x.channels));
  const double inv_area = 1.0 / static_cast<double>(x.plane());
  for (int c = 0; c < x.channels; ++c) {
    double s = 0.0;
    for (double v : x.channel(c)) s += v;
    out.pooled[static_cast<std::size_t>(c)] = s * inv_area;
  }
  auto fc = [&params](const FcLayer& l, std::span<const double> in) {
    return layers::linear(in, l.out, params[l.weight].values, params[l.bias].values);
  };
  auto relu = [](std::vector<double> v) {
    for (double& e : v) e = e > 0.0 ? e : 0.0;
    return v;
  };
  auto h1 = relu(fc(gam->fc[0], out.pooled));
  auto h2 = relu(fc(gam->fc[1], h1));
  auto z = fc(gam->fc[2], h2);
  out.sg.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out.sg[i] = force_one ? 1.0 : layers::sigmoid(z[i]);

  out.actuated = x;
  for (int c = 0; c < x.channels; ++c) {
    for (double& v : out.actuated.channel(c)) v *= out.sg[static_cast<std::size_t>(c)];
  }
  if (tape) *tape = GamTape{out.pooled, std::move(h1), std::move(h2), out.sg};
  return out;
}

Tensor HaCcn::branch_reduce(const Tensor& x, int which, const NetworkParams& params, StackTape* tape) const {
  if (which < 3 || which > 5) throw InvalidArgument("branch must be conv3, conv4 or conv5");
  const int b = which - 3;
  if (branch_[b].empty()) throw InvalidArgument("branch conv" + std::to_string(which) + " is not part of this model");
  Tensor reduced = run_stack(branch_[b], x, params, tape);
  return layers::upsample_bilinear(reduced, kBranchUpsample[b]);
}

DensityMap HaCcn::fuse_and_predict(std::span<const Tensor* const> branches, const NetworkParams& params,
                                   StackTape* tape, Tensor* fused_out) const {
  if (branches.size() != active_branches().size()) throw ShapeError("wrong number of branch feature maps");
  for (const Tensor* t : branches) {
    if (t->channels != branch_channels()) throw ShapeError("branch feature maps must have width(24) channels");
  }
  Tensor fused = layers::concat_channels(branches);
  Tensor out = run_stack(fusion_, fused, params, tape);
  DensityMap d(out.height, out.width, 4);
  d.values = std::move(out.data);
  if (fused_out) *fused_out = std::move(fused);
  return d;
}

ForwardResult HaCcn::forward(const Image& image, const NetworkParams& params, const ForwardOptions& options,
                             ForwardTape* tape) const {
  ForwardResult r;
  if (tape) tape->options = options;
  r.features = backbone_forward(image, params, tape);

  if (config_.enable_multiscale) {
    if (config_.enable_sam) {
      auto sam = spatial_attention(r.features.conv3, params, options.force_sa_one, tape ? &tape->sam : nullptr);
      r.sa = std::move(sam.sa);
      r.seg_logits = std::move(sam.seg_logits);
      r.branch_inputs[0] = std::move(sam.actuated);
    } else {
      r.branch_inputs[0] = r.features.conv3;
    }
  }
  auto gate = [&](const Tensor& x, int which, std::vector<double>& sg, std::optional<GamTape>* gt) {
    if (!(which == 4 ? gam4_ : gam5_)) return x;
    GamTape local;
    auto g = global_attention(x, which, params, options.force_sg_one, gt ? &local : nullptr);
    if (gt) *gt = std::move(local);
    sg = std::move(g.sg);
    return std::move(g.actuated);
  };
  if (config_.enable_multiscale) r.branch_inputs[1] = gate(r.features.conv4, 4, r.sg4, tape ? &tape->gam4 : nullptr);
  r.branch_inputs[2] = gate(r.features.conv5, 5, r.sg5, tape ? &tape->gam5 : nullptr);

  std::vector<Tensor> reduced;
  std::vector<const Tensor*> ptrs;
  const auto active = active_branches();
  reduced.reserve(active.size());
  for (int b : active) {
    reduced.push_back(branch_reduce(r.branch_inputs[b], kBranchName[b], params, tape ? &tape->branch[b] : nullptr));
  }
  for (const auto& t : reduced) ptrs.push_back(&t);
  r.density = fuse_and_predict(ptrs, params, tape ? &tape->fusion : nullptr, &r.fused);
  return r;
}

std::vector<double> HaCcn::backprop_gam(const Gam& gam, const GamTape& tape, const Tensor& x, const Tensor& d_actuated,
                                        const NetworkParams& params, Gradients& grads, bool param_grads,
                                        Tensor* d_x) const {
  const std::size_t channels = static_cast<std::size_t>(x.channels);
  if (d_x) {
    *d_x = d_actuated;
    for (int c = 0; c < x.channels; ++c) {
      for (double& v : d_x->channel(c)) v *= tape.sg[static_cast<std::size_t>(c)];
    }
  }
  std::vector<double> d_z(channels);
  for (int c = 0; c < x.channels; ++c) {
    const auto xs = x.channel(c);
    const auto ds = d_actuated.channel(c);
    double dsg = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) dsg += ds[i] * xs[i];
    const double s = tape.sg[static_cast<std::size_t>(c)];
    d_z[static_cast<std::size_t>(c)] = dsg * s * (1.0 - s);
  }
  auto back = [&](const FcLayer& l, std::span<const double> in, std::span<const double> dy) {
    if (param_grads) return layers::linear_backward(in, dy, params[l.weight].values, grads.values[l.weight],
                                                    grads.values[l.bias]);
    std::vector<double> sw(params[l.weight].values.size()), sb(params[l.bias].values.size());
    return layers::linear_backward(in, dy, params[l.weight].values, sw, sb);
  };
  auto d_h2 = back(gam.fc[2], tape.h2, d_z);
  for (std::size_t i = 0; i < d_h2.size(); ++i) {
    if (!(tape.h2[i] > 0.0)) d_h2[i] = 0.0;
  }
  auto d_h1 = back(gam.fc[1], tape.h1, d_h2);
  for (std::size_t i = 0; i < d_h1.size(); ++i) {
    if (!(tape.h1[i] > 0.0)) d_h1[i] = 0.0;
  }
  auto d_pooled = back(gam.fc[0], tape.pooled, d_h1);
  if (d_x) {
    const double inv_area = 1.0 / static_cast<double>(x.plane());
    for (int c = 0; c < x.channels; ++c) {
      const double g = d_pooled[static_cast<std::size_t>(c)] * inv_area;
      for (double& v : d_x->channel(c)) v += g;
    }
  }
  return d_pooled;
}

void HaCcn::backward(const ForwardTape& tape, const ForwardResult& fwd, const NetworkParams& params,
                     const OutputGrads& out, Gradients& grads, const GroupSet& trainable) const {
  const bool t_bb = trainable.contains(ParamGroup::kBackbone);
  const bool t_sam = config_.enable_sam && trainable.contains(ParamGroup::kSam);
  const bool t_gam = config_.enable_gam && trainable.contains(ParamGroup::kGam);
  const bool t_br = trainable.contains(ParamGroup::kBranchBlocks);
  const bool t_fu = trainable.contains(ParamGroup::kFusion);
  const bool sa_live = config_.enable_sam && !tape.options.force_sa_one;
  const bool sg_live = config_.enable_gam && !tape.options.force_sg_one;

  if (out.d_density.height != fwd.density.height || out.d_density.width != fwd.density.width) {
    throw ShapeError("density gradient shape mismatch");
  }
  const bool need_fused = t_br || (t_sam && sa_live) || (t_gam && sg_live) || t_bb;
  Tensor d_fused = backprop_stack(fusion_, tape.fusion, out.d_density, params, grads, t_fu, need_fused);

  std::array<Tensor, 3> d_in;
  if (need_fused) {
    const auto active = active_branches();
    const int bc = branch_channels();
    for (std::size_t k = 0; k < active.size(); ++k) {
      const int b = active[k];
      Tensor d_up(bc, d_fused.height, d_fused.width);
      std::copy_n(d_fused.data.begin() + static_cast<std::ptrdiff_t>(k * d_up.size()), d_up.size(), d_up.data.begin());
      const Tensor& reduced = tape.branch[b].acts.back();
      Tensor d_red = layers::upsample_bilinear_backward(d_up, kBranchUpsample[b], reduced.height, reduced.width);
      const bool upstream = t_bb || (b == 0 ? (t_sam && sa_live) : (t_gam && sg_live));
      d_in[b] = backprop_stack(branch_[b], tape.branch[b], std::move(d_red), params, grads, t_br, upstream);
    }
  }

  Tensor d_conv3, d_conv4, d_conv5;
  // conv3 / SAM
  if (config_.enable_sam) {
    const Tensor& x = fwd.features.conv3;
    Tensor d_logits(1, x.height, x.width);
    bool any = false;
    if (!d_in[0].data.empty()) {
      if (t_bb) {
        d_conv3 = d_in[0];
        const std::size_t plane = x.plane();
        for (int c = 0; c < x.channels; ++c) {
          double* row = d_conv3.data.data() + c * plane;
          for (std::size_t i = 0; i < plane; ++i) row[i] *= fwd.sa.data[i];
        }
      }
      if (sa_live) {
        const std::size_t plane = x.plane();
        for (std::size_t i = 0; i < plane; ++i) {
          double dsa = 0.0;
          for (int c = 0; c < x.channels; ++c) dsa += d_in[0].data[c * plane + i] * x.data[c * plane + i];
          const double s = fwd.sa.data[i];
          d_logits.data[i] = dsa * s * (1.0 - s);
        }
        any = true;
      }
    }
    if (!out.d_seg_logits.data.empty()) {
      if (out.d_seg_logits.size() != d_logits.size()) throw ShapeError("segmentation gradient shape mismatch");
      for (std::size_t i = 0; i < d_logits.size(); ++i) d_logits.data[i] += out.d_seg_logits.data[i];
      any = true;
    }
    if (any && (t_sam || t_bb)) {
      Tensor d_x = backprop_stack(sam_, tape.sam, std::move(d_logits), params, grads, t_sam, t_bb);
      if (t_bb) {
        if (d_conv3.data.empty()) d_conv3 = Tensor(x.channels, x.height, x.width);
        for (std::size_t i = 0; i < d_x.size(); ++i) d_conv3.data[i] += d_x.data[i];
      }
    }
  } else if (t_bb && !d_in[0].data.empty()) {
    d_conv3 = std::move(d_in[0]);
  }

  auto gam_back = [&](int b, const std::optional<Gam>& gam, const std::optional<GamTape>& gt, const Tensor& x,
                      Tensor& d_x) {
    if (d_in[b].data.empty()) return;
    if (!gam) {
      if (t_bb) d_x = std::move(d_in[b]);
      return;
    }
    backprop_gam(*gam, *gt, x, d_in[b], params, grads, t_gam && sg_live, t_bb ? &d_x : nullptr);
  };
  if (config_.enable_multiscale) gam_back(1, gam4_, tape.gam4, fwd.features.conv4, d_conv4);
  gam_back(2, gam5_, tape.gam5, fwd.features.conv5, d_conv5);

  if (!t_bb) return;
  Tensor d = d_conv5.data.empty() ? Tensor(fwd.features.conv5.channels, fwd.features.conv5.height,
                                           fwd.features.conv5.width)
                                  : std::move(d_conv5);
  for (int b = 4; b >= 0; --b) {
    if (b == 3 && !d_conv4.data.empty()) {
      for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += d_conv4.data[i];
    }
    if (b == 2 && !d_conv3.data.empty()) {
      for (std::size_t i = 0; i < d.size(); ++i) d.data[i] += d_conv3.data[i];
    }
    d = backprop_stack(backbone_[b], tape.backbone[b], std::move(d), params, grads, true, b > 0);
    if (b > 0) {
      const Tensor& prev = tape.backbone[b - 1].acts.back();
      d = layers::maxpool2_backward(d, tape.pool_argmax[b - 1], prev.height, prev.width);
    }
  }
}

Tensor HaCcn::cam_forward(const Tensor& fused, const NetworkParams& params, StackTape* tape) const {
  if (fused.channels != fused_channels()) {
    throw ShapeError("CAM expects " + std::to_string(fused_channels()) + " fused channels, got " +
                     std::to_string(fused.channels));
  }
  return run_stack(cam_, fused, params, tape);
}

void HaCcn::cam_backward(const StackTape& tape, const Tensor& d_scores, const NetworkParams& params,
                         Gradients& grads) const {
  backprop_stack(cam_, tape, d_scores, params, grads, true, false);
}

}  // namespace haccn
