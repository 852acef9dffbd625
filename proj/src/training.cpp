#include "haccn/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "haccn/evaluation.hpp"
#include "haccn/layers.hpp"

namespace haccn {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidArgument("Adam betas must be in [0, 1)");
  if (batch_size <= 0) throw InvalidArgument("batch_size must be positive");
  if (iterations < 0) throw InvalidArgument("iterations must be non-negative");
  if (!(seg_loss_weight >= 0.0)) throw InvalidArgument("seg_loss_weight must be non-negative");
  if (patch_size <= 0 || patch_size % 32 != 0) throw InvalidArgument("patch_size must be a positive multiple of 32");
  if (patches_per_image <= 0) throw InvalidArgument("patches_per_image must be positive");
  if (!(val_fraction >= 0.0 && val_fraction <= 0.5)) throw InvalidArgument("val_fraction must be in [0, 0.5]");
  if (val_interval <= 0) throw InvalidArgument("val_interval must be positive");
  if (!(sigma > 0.0)) throw InvalidArgument("sigma must be positive");
  if (!(seg_threshold >= 0.0)) throw InvalidArgument("seg_threshold must be non-negative");
  if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be non-negative");
  if (!(grad_clip >= 0.0)) throw InvalidArgument("grad_clip must be non-negative");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw InvalidArgument("bad value for '" + key + "': '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument("bad boolean for '" + key + "': '" + v + "'");
}

}  // namespace

TrainConfig parse_train_config(const std::string& text, TrainConfig c) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string val = trim(std::string_view(t).substr(eq + 1));
    if (key == "learning_rate") c.learning_rate = parse_number<double>(key, val);
    else if (key == "beta1") c.beta1 = parse_number<double>(key, val);
    else if (key == "beta2") c.beta2 = parse_number<double>(key, val);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, val);
    else if (key == "iterations") c.iterations = parse_number<int>(key, val);
    else if (key == "seg_loss_weight") c.seg_loss_weight = parse_number<double>(key, val);
    else if (key == "patch_size") c.patch_size = parse_number<int>(key, val);
    else if (key == "patches_per_image") c.patches_per_image = parse_number<int>(key, val);
    else if (key == "val_fraction") c.val_fraction = parse_number<double>(key, val);
    else if (key == "val_interval") c.val_interval = parse_number<int>(key, val);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "sigma") c.sigma = parse_number<double>(key, val);
    else if (key == "seg_threshold") c.seg_threshold = parse_number<double>(key, val);
    else if (key == "noise_std") c.noise_std = parse_number<double>(key, val);
    else if (key == "flip") c.flip = parse_bool(key, val);
    else if (key == "grad_clip") c.grad_clip = parse_number<double>(key, val);
    else if (key == "squared_loss") c.squared_loss = parse_bool(key, val);
    else throw InvalidArgument("unknown train config key '" + key + "' on line " + std::to_string(lineno));
  }
  c.validate();
  return c;
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "learning_rate = " << c.learning_rate << "\nbeta1 = " << c.beta1 << "\nbeta2 = " << c.beta2
     << "\nbatch_size = " << c.batch_size << "\niterations = " << c.iterations
     << "\nseg_loss_weight = " << c.seg_loss_weight << "\npatch_size = " << c.patch_size
     << "\npatches_per_image = " << c.patches_per_image << "\nval_fraction = " << c.val_fraction
     << "\nval_interval = " << c.val_interval << "\nseed = " << c.seed << "\nsigma = " << c.sigma
     << "\nseg_threshold = " << c.seg_threshold << "\nnoise_std = " << c.noise_std
     << "\nflip = " << (c.flip ? "true" : "false") << "\ngrad_clip = " << c.grad_clip
     << "\nsquared_loss = " << (c.squared_loss ? "true" : "false") << '\n';
  return os.str();
}

LossGrad density_loss(const DensityMap& pred, const DensityMap& gt, bool squared) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("density loss: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  LossGrad r{0.0, Tensor(1, pred.height, pred.width)};
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double d = pred.values[i] - gt.values[i];
    r.value += d * d;
    r.grad.data[i] = 2.0 * d;
  }
  if (!squared) {
    const double norm = std::sqrt(r.value);
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
      r.grad.data[i] = norm > 0.0 ? (pred.values[i] - gt.values[i]) / norm : 0.0;
    }
    r.value = norm;
  }
  return r;
}

double density_loss(std::span<const DensityMap> pred, std::span<const DensityMap> gt, bool squared) {
  if (pred.size() != gt.size() || pred.empty()) throw ShapeError("density loss needs equally sized, non-empty batches");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += density_loss(pred[i], gt[i], squared).value;
  return s / static_cast<double>(pred.size());
}

LossGrad segmentation_loss(const Tensor& logits, const SegmentationMask& mask) {
  if (logits.channels != 1 || logits.height != mask.height || logits.width != mask.width) {
    throw ShapeError("segmentation loss: logits and mask shapes differ");
  }
  const double n = static_cast<double>(logits.size());
  LossGrad r{0.0, Tensor(1, logits.height, logits.width)};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits.data[i];
    const double y = mask.values[i];
    r.value += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    r.grad.data[i] = (layers::sigmoid(z) - y) / n;
  }
  r.value /= n;
  return r;
}

double total_loss(const DensityMap& pred, const DensityMap& gt, const Tensor& seg_logits, const SegmentationMask& mask,
                  double lambda, bool squared) {
  double t = density_loss(pred, gt, squared).value;
  if (lambda != 0.0) t += lambda * segmentation_loss(seg_logits, mask).value;
  return t;
}

namespace {

Image crop_image(const Image& img, int y0, int x0, int h, int w) {
  Image out(img.channels, h, w);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      const int sy = y0 + y;
      if (sy < 0 || sy >= img.height) continue;
      for (int x = 0; x < w; ++x) {
        const int sx = x0 + x;
        if (sx >= 0 && sx < img.width) out(c, y, x) = img(c, sy, sx);
      }
    }
  }
  return out;
}

Image flip_image(const Image& img) {
  Image out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) out(c, y, img.width - 1 - x) = img(c, y, x);
    }
  }
  return out;
}

// Bilinear resampling of the window [y0, y0+side) x [x0, x0+side) to out x out.
Image resample_window(const Image& img, int y0, int x0, int side, int out_size) {
  Image out(img.channels, out_size, out_size);
  const double step = static_cast<double>(side) / out_size;
  auto sample = [&](int c, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(side - 1));
    x = std::clamp(x, 0.0, static_cast<double>(side - 1));
    const int iy = static_cast<int>(y), ix = static_cast<int>(x);
    const int jy = std::min(iy + 1, side - 1), jx = std::min(ix + 1, side - 1);
    const double fy = y - iy, fx = x - ix;
    auto px = [&](int yy, int xx) {
      const int sy = y0 + yy, sx = x0 + xx;
      return (sy >= 0 && sy < img.height && sx >= 0 && sx < img.width) ? img(c, sy, sx) : 0.0;
    };
    return (1 - fy) * ((1 - fx) * px(iy, ix) + fx * px(iy, jx)) + fy * ((1 - fx) * px(jy, ix) + fx * px(jy, jx));
  };
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < out_size; ++y) {
      for (int x = 0; x < out_size; ++x) out(c, y, x) = sample(c, (y + 0.5) * step - 0.5, (x + 0.5) * step - 0.5);
    }
  }
  return out;
}

void finish_sample(TrainSample& s, DensityMap full_res, const TrainConfig& cfg, Rng& rng,
                   const ClassBoundaries& boundaries) {
  s.flipped = cfg.flip && rng.bernoulli(0.5);
  if (s.flipped) {
    s.image = flip_image(s.image);
    full_res = flip_horizontal(full_res);
  }
  if (cfg.noise_std > 0.0) {
    for (double& v : s.image.data) v += rng.normal(0.0, cfg.noise_std);
  }
  s.density = downsample_density_map(full_res, 4);
  s.mask = derive_segmentation_mask(s.density, cfg.seg_threshold);
  s.label = assign_density_class(s.window_count, boundaries);
}

}  // namespace

std::vector<TrainSample> make_training_patches(const Dataset& dataset, const TrainConfig& cfg, Rng& rng,
                                               const ClassBoundaries& boundaries) {
  if (dataset.empty()) throw InvalidArgument("cannot make training patches from an empty dataset");
  cfg.validate();
  const int p = cfg.patch_size;
  std::vector<TrainSample> out;
  out.reserve(dataset.size() * static_cast<std::size_t>(cfg.patches_per_image));
  for (const auto& item : dataset) {
    for (int k = 0; k < cfg.patches_per_image; ++k) {
      TrainSample s;
      s.image_id = item.ann.image_id;
      s.size = p;
      s.y0 = static_cast<int>(rng.uniform_int(0, std::max(0, item.image.height - p)));
      s.x0 = static_cast<int>(rng.uniform_int(0, std::max(0, item.image.width - p)));
      s.image = crop_image(item.image, s.y0, s.x0, p, p);
      PointAnnotation local{item.ann.image_id, p, p, {}};
      for (const auto& pt : item.ann.points) {
        if (pt.y >= s.y0 && pt.y < s.y0 + p && pt.x >= s.x0 && pt.x < s.x0 + p) {
          local.points.push_back({pt.x - s.x0, pt.y - s.y0});
        }
      }
      s.window_count = static_cast<double>(local.points.size());
      finish_sample(s, generate_density_map(local, cfg.sigma), cfg, rng, boundaries);
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<TrainSample> make_multiscale_patches(const Dataset& dataset, const TrainConfig& cfg, Rng& rng,
                                                 std::span<const double> scales, const ClassBoundaries& boundaries) {
  if (dataset.empty()) throw InvalidArgument("cannot make training patches from an empty dataset");
  if (scales.empty()) throw InvalidArgument("need at least one patch scale");
  cfg.validate();
  const int p = cfg.patch_size;
  std::vector<TrainSample> out;
  for (const auto& item : dataset) {
    for (int k = 0; k < cfg.patches_per_image; ++k) {
      const double scale = scales[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(scales.size()) - 1))];
      if (!(scale > 0.0)) throw InvalidArgument("patch scales must be positive");
      const int side = std::max(4, static_cast<int>(std::lround(scale * p)));
      TrainSample s;
      s.image_id = item.ann.image_id;
      s.size = side;
      s.y0 = static_cast<int>(rng.uniform_int(0, std::max(0, item.image.height - side)));
      s.x0 = static_cast<int>(rng.uniform_int(0, std::max(0, item.image.width - side)));
      s.image = resample_window(item.image, s.y0, s.x0, side, p);
      PointAnnotation local{item.ann.image_id, p, p, {}};
      const double f = static_cast<double>(p) / side;
      for (const auto& pt : item.ann.points) {
        if (pt.y >= s.y0 && pt.y < s.y0 + side && pt.x >= s.x0 && pt.x < s.x0 + side) {
          local.points.push_back({std::min((pt.x - s.x0) * f, std::nextafter(static_cast<double>(p), 0.0)),
                                  std::min((pt.y - s.y0) * f, std::nextafter(static_cast<double>(p), 0.0))});
        }
      }
      s.window_count = static_cast<double>(local.points.size());
      finish_sample(s, generate_density_map(local, cfg.sigma), cfg, rng, boundaries);
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::string history_to_csv(std::span<const HistoryRow> rows) {
  std::ostringstream os;
  os.precision(10);
  os << "iteration,density_loss,seg_loss,total_loss,val_mae\n";
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.density_loss << ',' << r.seg_loss << ',' << r.total_loss << ',';
    if (r.val_mae) os << *r.val_mae;
    os << '\n';
  }
  return os.str();
}

Adam::Adam(const NetworkParams& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params.all()) {
    m_.emplace_back(p.values.size(), 0.0);
    v_.emplace_back(p.values.size(), 0.0);
  }
}

void Adam::step(NetworkParams& params, const Gradients& grads, const GroupSet& groups) {
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!groups.contains(params[i].group)) continue;
    auto& w = params[i].values;
    const auto& g = grads.values[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
    }
  }
}

TrainResult fit(const HaCcn& model, NetworkParams params, const std::vector<TrainSample>& samples,
                const TrainConfig& cfg, const GroupSet& trainable, const Dataset& validation,
                const ProgressFn& progress) {
  cfg.validate();
  model.check_params(params);
  TrainResult result;
  if (cfg.iterations > 0 && samples.empty()) throw InvalidArgument("no training samples");

  const bool use_seg = model.config().enable_sam && model.config().sam_supervised && cfg.seg_loss_weight > 0.0;
  Adam adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2);
  Gradients grads(params);
  Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::optional<double> best;
  NetworkParams best_params = params;

  for (int it = 1; it <= cfg.iterations; ++it) {
    grads.zero();
    HistoryRow row;
    row.iteration = it;
    const double inv_b = 1.0 / cfg.batch_size;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const TrainSample& s = samples[order[cursor++]];
      ForwardTape tape;
      const auto fwd = model.forward(s.image, params, {}, &tape);
      auto dl = density_loss(fwd.density, s.density, cfg.squared_loss);
      OutputGrads og;
      og.d_density = std::move(dl.grad);
      for (double& g : og.d_density.data) g *= inv_b;
      row.density_loss += dl.value * inv_b;
      if (use_seg) {
        auto sl = segmentation_loss(fwd.seg_logits, s.mask);
        og.d_seg_logits = std::move(sl.grad);
        for (double& g : og.d_seg_logits.data) g *= cfg.seg_loss_weight * inv_b;
        row.seg_loss += sl.value * inv_b;
      }
      model.backward(tape, fwd, params, og, grads, trainable);
    }
    row.total_loss = row.density_loss + (use_seg ? cfg.seg_loss_weight * row.seg_loss : 0.0);
    if (!std::isfinite(row.total_loss)) {
      throw Diverged("training diverged at iteration " + std::to_string(it) +
                     " (density loss " + std::to_string(row.density_loss) + ", segmentation loss " +
                     std::to_string(row.seg_loss) + ")");
    }
    if (cfg.grad_clip > 0.0) {
      const double norm = std::sqrt(grads.squared_norm(params, trainable));
      if (norm > cfg.grad_clip) grads.scale(cfg.grad_clip / norm);
    }
    adam.step(params, grads, trainable);

    if (!validation.empty() && (it % cfg.val_interval == 0 || it == cfg.iterations)) {
      row.val_mae = mae(evaluate_dataset(model, params, validation));
      if (!best || *row.val_mae < *best) {
        best = row.val_mae;
        best_params = params;
      }
    }
    if (progress) progress(row);
    result.history.push_back(row);
  }
  result.best_val_mae = best;
  result.best_params = best ? std::move(best_params) : params;
  result.params = std::move(params);
  return result;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& dataset, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed ^ 0x5bd1e995ull);
  rng.shuffle(idx);
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(dataset.size())));
  Dataset train, val;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    (i + n_val >= idx.size() ? val : train).push_back(dataset[idx[i]]);
  }
  return {std::move(train), std::move(val)};
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config, const Dataset& dataset,
                  const std::optional<NetworkParams>& init, const ProgressFn& progress) {
  train_config.validate();
  const HaCcn model(model_config);
  NetworkParams params = init ? *init : model.init_params(train_config.seed);
  model.check_params(params);
  if (train_config.iterations == 0) {
    return TrainResult{params, params, {}, std::nullopt};
  }
  auto [train_set, val_set] = split_validation(dataset, train_config.val_fraction, train_config.seed);
  Rng rng(train_config.seed);
  const auto samples = make_training_patches(train_set, train_config, rng);
  GroupSet trainable = GroupSet::all();
  trainable.erase(ParamGroup::kCam);
  return fit(model, std::move(params), samples, train_config, trainable, val_set, progress);
}

}  // namespace haccn
