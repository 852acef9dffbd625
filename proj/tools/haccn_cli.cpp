// haccn: command-line front end (synth, gen-gt, train, adapt, eval, plot).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "haccn/error.hpp"
#include "haccn/evaluation.hpp"
#include "haccn/io.hpp"
#include "haccn/synth.hpp"
#include "haccn/training.hpp"
#include "haccn/weak.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace haccn;

namespace {

constexpr const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  2  bad arguments or configuration\n"
    "  3  bad input data (malformed annotations, shape mismatch, corrupt map)\n"
    "  4  training diverged (non-finite loss)\n"
    "  5  file system / I/O failure\n"
    "Set HACCN_DETERMINISTIC=1 to force deterministic mode (recorded in run manifests).";

bool deterministic_mode() {
  const char* v = std::getenv("HACCN_DETERMINISTIC");
  return v && std::string(v) == "1";
}

// Written next to every command's outputs. No timestamps, so reruns with the
// same inputs produce the same file.
struct Manifest {
  std::string command;
  json args = json::object();
  json inputs = json::object();
  json outputs = json::object();

  void input(const fs::path& p) {
    if (fs::is_regular_file(p)) inputs[p.generic_string()] = io::sha256_file(p);
  }
  void input_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) return;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) input(f);
  }
  void output(const fs::path& p) { outputs[p.generic_string()] = io::sha256_file(p); }

  void write(const fs::path& path) const {
    json j{{"command", command},
           {"args", args},
           {"deterministic", deterministic_mode()},
           {"inputs", inputs},
           {"outputs", outputs}};
    io::write_text(path, j.dump(2) + "\n");
  }
};

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw IoError(what + " directory not found: " + p.string());
}
void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw IoError(what + " not found: " + p.string());
}

ClassBoundaries parse_boundaries(const std::vector<double>& v) {
  ClassBoundaries b;
  if (v.empty()) return b;
  if (v.size() != b.thresholds.size()) throw InvalidArgument("--boundaries needs exactly 5 values");
  std::copy(v.begin(), v.end(), b.thresholds.begin());
  b.validate();
  return b;
}

GroupSet parse_groups(const std::vector<std::string>& names) {
  GroupSet g;
  for (const auto& n : names) g.insert(parse_group(n));
  return g;
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  int n = 20;
  std::string preset = "source";
  int size = 64;
  std::uint64_t seed = 0;
  std::vector<double> boundaries;
};

void cmd_synth(const SynthArgs& a) {
  const auto preset = synth::parse_preset(a.preset);
  const auto b = parse_boundaries(a.boundaries);
  if (a.n <= 0) throw InvalidArgument("--n must be positive");
  if (a.size < 32) throw InvalidArgument("--size must be at least 32");
  synth::generate_dataset(a.out, a.n, synth::preset_spec(preset, a.size), a.seed, std::string(synth::preset_name(preset)),
                          b);
  Manifest m{"synth"};
  m.args = {{"n", a.n}, {"preset", a.preset}, {"size", a.size}, {"seed", a.seed}, {"boundaries", b.thresholds}};
  m.output(a.out / "manifest.json");
  m.output(a.out / "annotations.json");
  m.output(a.out / "labels.json");
  m.write(a.out / "run_manifest.json");
  std::cout << "wrote " << a.n << " images to " << a.out.string() << "\n";
}

// ---- gen-gt ---------------------------------------------------------------

struct GenGtArgs {
  fs::path annotations;
  fs::path out;
  double sigma = kDefaultSigma;
  double seg_threshold = kDefaultSegThreshold;
  int scale = 4;
};

void cmd_gen_gt(const GenGtArgs& a) {
  if (!(a.sigma > 0.0)) throw InvalidArgument("--sigma must be positive");
  if (!(a.seg_threshold >= 0.0)) throw InvalidArgument("--seg-threshold must be non-negative");
  if (a.scale < 1) throw InvalidArgument("--scale must be >= 1");
  fs::path ann_file = fs::is_directory(a.annotations) ? a.annotations / "annotations.json" : a.annotations;
  require_file(ann_file, "annotation file");
  const auto anns = io::read_annotations(ann_file);
  Manifest m{"gen-gt"};
  m.args = {{"sigma", a.sigma}, {"seg_threshold", a.seg_threshold}, {"scale", a.scale}};
  m.input(ann_file);
  for (const auto& ann : anns) {
    auto full = generate_density_map(ann, a.sigma);
    auto d = a.scale == 1 ? full : downsample_density_map(full, a.scale);
    const auto dm = a.out / (ann.image_id + ".dmap");
    const auto sm = a.out / (ann.image_id + ".smsk");
    io::write_dmap(dm, d);
    io::write_smsk(sm, derive_segmentation_mask(d, a.seg_threshold));
    m.output(dm);
    m.output(sm);
  }
  m.write(a.out / "run_manifest.json");
  std::cout << "wrote " << anns.size() << " density maps to " << a.out.string() << "\n";
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  fs::path data;
  fs::path out;
  fs::path config;
  std::string ablation = "full";
  double channel_scale = 0.25;
  std::optional<int> iterations, batch_size, patch_size, patches_per_image;
  std::optional<double> lr, seg_loss_weight, val_fraction;
  std::optional<std::uint64_t> seed;
  fs::path init;
};

void cmd_train(const TrainArgs& a) {
  ModelConfig mc;
  mc.channel_scale = a.channel_scale;
  mc = apply_ablation(mc, parse_ablation(a.ablation));
  TrainConfig tc;
  if (!a.config.empty()) {
    require_file(a.config, "config file");
    tc = parse_train_config(io::read_text(a.config));
  }
  if (a.iterations) tc.iterations = *a.iterations;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.patch_size) tc.patch_size = *a.patch_size;
  if (a.patches_per_image) tc.patches_per_image = *a.patches_per_image;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.seg_loss_weight) tc.seg_loss_weight = *a.seg_loss_weight;
  if (a.val_fraction) tc.val_fraction = *a.val_fraction;
  if (a.seed) tc.seed = *a.seed;
  mc.input_size = tc.patch_size;
  mc.validate();
  tc.validate();
  require_dir(a.data, "data");

  std::optional<NetworkParams> init;
  if (!a.init.empty()) {
    auto ck = io::load_checkpoint(a.init);
    HaCcn(mc).check_params(ck.params);
    init = std::move(ck.params);
  }
  const Dataset data = synth::load_dataset(a.data);
  auto progress = [&](const HistoryRow& r) {
    if (r.iteration % std::max(1, tc.iterations / 10) == 0 || r.val_mae) {
      std::cerr << "iter " << r.iteration << " loss " << r.total_loss;
      if (r.val_mae) std::cerr << " val_mae " << *r.val_mae;
      std::cerr << "\n";
    }
  };
  const auto result = train(mc, tc, data, init, progress);

  Manifest m{"train"};
  m.args = json::parse(io::config_to_json(mc));
  m.args["ablation"] = a.ablation;
  m.args["train"] = format_train_config(tc);
  m.input_dir(a.data);
  if (!a.config.empty()) m.input(a.config);
  const auto ck = a.out / "model.hckp";
  io::save_checkpoint(ck, mc, result.best_params);
  io::write_text(a.out / "history.csv", history_to_csv(result.history));
  io::write_text(a.out / "train.cfg", format_train_config(tc));
  m.output(ck);
  m.output(a.out / "history.csv");
  m.output(a.out / "train.cfg");
  m.write(a.out / "run_manifest.json");
  std::cout << "checkpoint " << ck.string();
  if (result.best_val_mae) std::cout << " (val MAE " << *result.best_val_mae << ")";
  std::cout << "\n";
}

// ---- adapt ----------------------------------------------------------------

struct AdaptArgs {
  fs::path checkpoint;
  fs::path source;
  fs::path target;
  fs::path target_labels;
  fs::path out;
  std::string agg = "lse";
  double lse_r = 4.0;
  double label_noise = 0.15;
  int patch_size = 64;
  int cam_source_iterations = 300;
  int cam_target_iterations = 150;
  int finetune_iterations = 300;
  int batch_size = 4;
  double cam_lr = 1e-3;
  double finetune_lr = 1e-4;
  std::vector<std::string> finetune_groups{"branch_blocks", "fusion"};
  std::string pseudo_norm = "pixel";
  std::vector<double> boundaries;
  std::uint64_t seed = 0;
};

void cmd_adapt(const AdaptArgs& a) {
  AdaptConfig cfg;
  cfg.aggregation = parse_aggregation(a.agg, a.lse_r);
  cfg.label_noise = a.label_noise;
  cfg.patch_size = a.patch_size;
  cfg.cam_source_iterations = a.cam_source_iterations;
  cfg.cam_target_iterations = a.cam_target_iterations;
  cfg.finetune_iterations = a.finetune_iterations;
  cfg.batch_size = a.batch_size;
  cfg.cam_learning_rate = a.cam_lr;
  cfg.finetune_learning_rate = a.finetune_lr;
  cfg.finetune_groups = parse_groups(a.finetune_groups);
  if (a.pseudo_norm == "pixel") {
    cfg.pseudo_norm = PseudoGtNormalization::kPixelSoftmax;
  } else if (a.pseudo_norm == "plane") {
    cfg.pseudo_norm = PseudoGtNormalization::kPlaneSoftmax;
  } else {
    throw InvalidArgument("--pseudo-norm must be pixel or plane");
  }
  if (!a.boundaries.empty()) cfg.boundaries = parse_boundaries(a.boundaries);
  cfg.seed = a.seed;
  cfg.validate();
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.source, "source");
  require_dir(a.target, "target");

  auto ck = io::load_checkpoint(a.checkpoint);
  HaCcn model(ck.config);
  const Dataset source = synth::load_dataset(a.source);
  const Dataset target = synth::load_dataset(a.target);
  std::optional<std::vector<int>> labels;
  if (!a.target_labels.empty()) {
    std::map<std::string, int> by_id;
    for (const auto& l : io::read_labels(a.target_labels)) by_id[l.image_id] = l.class_index;
    labels.emplace();
    for (const auto& s : target) {
      auto it = by_id.find(s.ann.image_id);
      if (it == by_id.end()) throw InvalidData("no image-level label for '" + s.ann.image_id + "'");
      labels->push_back(it->second);
    }
  }
  const auto result = adapt(model, ck.params, source, target, cfg, labels);

  Manifest m{"adapt"};
  m.args = {{"aggregation", a.agg},        {"lse_r", a.lse_r},
            {"label_noise", a.label_noise}, {"patch_size", a.patch_size},
            {"cam_source_iterations", a.cam_source_iterations},
            {"cam_target_iterations", a.cam_target_iterations},
            {"finetune_iterations", a.finetune_iterations},
            {"batch_size", a.batch_size},   {"cam_lr", a.cam_lr},
            {"finetune_lr", a.finetune_lr}, {"finetune_groups", a.finetune_groups},
            {"pseudo_norm", a.pseudo_norm}, {"seed", a.seed}};
  m.input(a.checkpoint);
  m.input_dir(a.source);
  m.input_dir(a.target);
  if (!a.target_labels.empty()) m.input(a.target_labels);
  const auto out_ck = a.out / "adapted.hckp";
  io::save_checkpoint(out_ck, ck.config, result.params);
  io::write_text(a.out / "priors.json", priors_to_json(result.priors, result.boundaries));
  json stages = json::array();
  for (const auto& s : result.stages) {
    json j{{"stage", s.stage}, {"iterations", s.losses.size()}};
    if (!s.losses.empty()) j["final_loss"] = s.losses.back();
    if (s.accuracy) j["accuracy"] = *s.accuracy;
    stages.push_back(j);
  }
  io::write_text(a.out / "stages.json", stages.dump(2) + "\n");
  m.output(out_ck);
  m.output(a.out / "priors.json");
  m.output(a.out / "stages.json");
  m.write(a.out / "run_manifest.json");
  std::cout << "adapted checkpoint " << out_ck.string() << "\n";
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  fs::path pred_dir, gt_dir;
  fs::path checkpoint, data;
  fs::path target_checkpoint;
  bool cross_dataset = false;
  fs::path out;
  fs::path write_pred;
  std::vector<double> bins;
};

std::vector<CountResult> compare_dirs(const fs::path& pred_dir, const fs::path& gt_dir, Manifest& m) {
  std::vector<fs::path> gts;
  for (const auto& e : fs::directory_iterator(gt_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".dmap") gts.push_back(e.path());
  }
  std::sort(gts.begin(), gts.end());
  if (gts.empty()) throw InvalidData("no .dmap files in " + gt_dir.string());
  std::vector<CountResult> out;
  for (const auto& g : gts) {
    const auto p = pred_dir / g.filename();
    if (!fs::is_regular_file(p)) throw InvalidData("prediction missing for " + g.filename().string());
    const auto gt = io::read_dmap(g);
    const auto pred = io::read_dmap(p);
    m.input(g);
    m.input(p);
    out.push_back({g.stem().string(), count_from_density(gt), count_from_density(pred)});
  }
  return out;
}

void cmd_eval(const EvalArgs& a) {
  const bool dir_mode = !a.pred_dir.empty() || !a.gt_dir.empty();
  if (dir_mode && (a.pred_dir.empty() || a.gt_dir.empty())) {
    throw InvalidArgument("--pred-dir and --gt-dir go together");
  }
  if (!dir_mode && (a.checkpoint.empty() || a.data.empty())) {
    throw InvalidArgument("either --pred-dir/--gt-dir or --checkpoint/--data is required");
  }
  if (dir_mode && a.cross_dataset) throw InvalidArgument("--cross-dataset needs --checkpoint/--data");
  if (!a.target_checkpoint.empty() && !a.cross_dataset) throw InvalidArgument("--target-checkpoint needs --cross-dataset");
  for (std::size_t i = 1; i < a.bins.size(); ++i) {
    if (!(a.bins[i] > a.bins[i - 1])) throw InvalidArgument("--bins must be strictly increasing");
  }

  Manifest m{"eval"};
  std::string config_json;
  std::vector<CountResult> results;
  json cross;
  if (dir_mode) {
    require_dir(a.pred_dir, "prediction");
    require_dir(a.gt_dir, "ground-truth");
    results = compare_dirs(a.pred_dir, a.gt_dir, m);
  } else {
    require_file(a.checkpoint, "checkpoint");
    require_dir(a.data, "data");
    auto ck = io::load_checkpoint(a.checkpoint);
    m.input(a.checkpoint);
    m.input_dir(a.data);
    config_json = io::config_to_json(ck.config);
    HaCcn model(ck.config);
    const Dataset data = synth::load_dataset(a.data);
    for (const auto& s : data) {
      auto inf = infer_full_image(model, ck.params, s.image);
      results.push_back({s.ann.image_id, static_cast<double>(s.count()), inf.count});
      if (!a.write_pred.empty()) {
        const auto p = a.write_pred / (s.ann.image_id + ".dmap");
        io::write_dmap(p, inf.density);
        m.output(p);
      }
    }
    if (a.cross_dataset) {
      std::optional<io::Checkpoint> tck;
      std::optional<HaCcn> tmodel;
      if (!a.target_checkpoint.empty()) {
        require_file(a.target_checkpoint, "target checkpoint");
        tck = io::load_checkpoint(a.target_checkpoint);
        tmodel.emplace(tck->config);
        m.input(a.target_checkpoint);
      }
      const auto r = cross_dataset_eval(model, ck.params, tmodel ? &*tmodel : nullptr, tck ? &tck->params : nullptr, data);
      cross = json::parse(cross_dataset_to_json(r));
    }
  }
  const auto edges = a.bins.empty() ? quantile_bin_edges(results) : a.bins;
  const auto report = make_report(results, edges);
  json j = json::parse(report_to_json(report, config_json));
  if (!cross.is_null()) j["cross_dataset"] = cross;
  const std::string text = j.dump(2) + "\n";
  if (a.out.empty()) {
    std::cout << text;
    return;
  }
  io::write_text(a.out, text);
  m.output(a.out);
  m.write(a.out.parent_path() / (a.out.stem().string() + ".manifest.json"));
  std::cout << "MAE " << report.mae << " MSE " << report.mse << " (" << report.n_images << " images)\n";
}

// ---- plot -----------------------------------------------------------------

struct PlotArgs {
  fs::path checkpoint, data;
  fs::path report;
  fs::path out;
  int n = 4;
};

std::array<std::uint8_t, 3> heat(double t) {
  // blue -> cyan -> yellow -> red
  t = std::clamp(t, 0.0, 1.0);
  double r, g, b;
  if (t < 1.0 / 3) {
    r = 0.0, g = 3 * t, b = 1.0;
  } else if (t < 2.0 / 3) {
    r = 3 * t - 1, g = 1.0, b = 2 - 3 * t;
  } else {
    r = 1.0, g = 3 - 3 * t, b = 0.0;
  }
  return {static_cast<std::uint8_t>(std::lround(255 * r)), static_cast<std::uint8_t>(std::lround(255 * g)),
          static_cast<std::uint8_t>(std::lround(255 * b))};
}

// Input | ground truth | estimate, density maps upsampled by nearest neighbour
// and coloured on a shared scale.
void render_triptych(const fs::path& path, const Image& img, const DensityMap& gt, const DensityMap& pred) {
  const int h = img.height, w = img.width;
  double vmax = 1e-12;
  for (double v : gt.values) vmax = std::max(vmax, v);
  for (double v : pred.values) vmax = std::max(vmax, v);
  const int gap = 4;
  const int total_w = 3 * w + 2 * gap;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * total_w * 3, 255);
  auto put = [&](int y, int x, std::array<std::uint8_t, 3> c) {
    auto* p = &rgb[(static_cast<std::size_t>(y) * total_w + x) * 3];
    p[0] = c[0], p[1] = c[1], p[2] = c[2];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::array<std::uint8_t, 3> c{};
      for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(255 * std::clamp(img(k, y, x), 0.0, 1.0)));
      put(y, x, c);
      auto sample = [&](const DensityMap& d) {
        const int dy = std::min(d.height - 1, y / d.scale), dx = std::min(d.width - 1, x / d.scale);
        return heat(d(dy, dx) / vmax);
      };
      put(y, w + gap + x, sample(gt));
      put(y, 2 * (w + gap) + x, sample(pred));
    }
  }
  io::write_png_rgb8(path, h, total_w, rgb);
}

void cmd_plot(const PlotArgs& a) {
  if (a.report.empty() && (a.checkpoint.empty() || a.data.empty())) {
    throw InvalidArgument("plot needs --report and/or --checkpoint with --data");
  }
  if (a.n < 0) throw InvalidArgument("--n must be non-negative");
  Manifest m{"plot"};
  m.args = {{"n", a.n}};
  if (!a.report.empty()) {
    require_file(a.report, "report");
    m.input(a.report);
    const auto j = json::parse(io::read_text(a.report));
    if (!j.contains("per_bin")) throw InvalidData("report has no per_bin section");
    std::vector<BinReport> bins;
    for (const auto& b : j.at("per_bin")) {
      BinReport r;
      r.lo = b.at("lo").get<double>();
      r.hi = b.at("hi").is_null() ? std::numeric_limits<double>::infinity() : b.at("hi").get<double>();
      r.n_images = b.at("n_images").get<std::size_t>();
      if (!b.at("mae").is_null()) r.mae = b.at("mae").get<double>();
      bins.push_back(r);
    }
    const auto p = a.out / "density_level_mae.csv";
    io::write_text(p, bins_to_csv(bins));
    m.output(p);
  }
  if (!a.checkpoint.empty()) {
    require_file(a.checkpoint, "checkpoint");
    require_dir(a.data, "data");
    auto ck = io::load_checkpoint(a.checkpoint);
    m.input(a.checkpoint);
    HaCcn model(ck.config);
    const Dataset data = synth::load_dataset(a.data);
    const int n = std::min<int>(a.n, static_cast<int>(data.size()));
    for (int i = 0; i < n; ++i) {
      const auto& s = data[static_cast<std::size_t>(i)];
      const auto pred = infer_full_image(model, ck.params, s.image).density;
      const auto gt = downsample_density_map(generate_density_map(s.ann), 4);
      const auto p = a.out / (s.ann.image_id + "_density.png");
      render_triptych(p, s.image, gt, pred);
      m.output(p);
    }
  }
  m.write(a.out / "run_manifest.json");
  std::cout << "plots written to " << a.out.string() << "\n";
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InvalidArgument*>(&e)) return 2;
  if (dynamic_cast<const InvalidData*>(&e)) return 3;
  if (dynamic_cast<const Diverged*>(&e)) return 4;
  if (dynamic_cast<const IoError*>(&e)) return 5;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 5;
  if (dynamic_cast<const json::exception*>(&e)) return 3;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"haccn: density-map crowd counting with attention and weak adaptation"};
  app.footer(kExitCodes);
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic annotated dataset");
  synth_cmd->add_option("--out", sa.out, "output directory")->required();
  synth_cmd->add_option("--n", sa.n, "number of images");
  synth_cmd->add_option("--preset", sa.preset, "source | target");
  synth_cmd->add_option("--size", sa.size, "image side in pixels");
  synth_cmd->add_option("--seed", sa.seed);
  synth_cmd->add_option("--boundaries", sa.boundaries, "5 class thresholds for labels.json")->delimiter(',');

  GenGtArgs ga;
  auto* gt_cmd = app.add_subcommand("gen-gt", "density maps and segmentation masks from point annotations");
  gt_cmd->add_option("--annotations", ga.annotations, "annotations.json or a dataset directory")->required();
  gt_cmd->add_option("--out", ga.out, "output directory")->required();
  gt_cmd->add_option("--sigma", ga.sigma, "Gaussian kernel width");
  gt_cmd->add_option("--seg-threshold", ga.seg_threshold, "mask threshold on the written map");
  gt_cmd->add_option("--scale", ga.scale, "sum-pooling factor of the written maps");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "supervised training on an annotated dataset");
  train_cmd->add_option("--data", ta.data, "dataset directory")->required();
  train_cmd->add_option("--out", ta.out, "output directory")->required();
  train_cmd->add_option("--config", ta.config, "key = value training config; flags override it");
  train_cmd->add_option("--ablation", ta.ablation, "vgg | ms | ms+sam-self | ms+sam | full");
  train_cmd->add_option("--channel-scale", ta.channel_scale, "width multiplier (1 = full VGG16)");
  train_cmd->add_option("--init", ta.init, "checkpoint to start from");
  train_cmd->add_option("--iterations", ta.iterations);
  train_cmd->add_option("--batch-size", ta.batch_size);
  train_cmd->add_option("--patch-size", ta.patch_size);
  train_cmd->add_option("--patches-per-image", ta.patches_per_image);
  train_cmd->add_option("--lr", ta.lr);
  train_cmd->add_option("--seg-loss-weight", ta.seg_loss_weight);
  train_cmd->add_option("--val-fraction", ta.val_fraction);
  train_cmd->add_option("--seed", ta.seed);

  AdaptArgs aa;
  auto* adapt_cmd = app.add_subcommand("adapt", "weakly supervised adaptation to a target dataset");
  adapt_cmd->add_option("--checkpoint", aa.checkpoint, "source-trained checkpoint")->required();
  adapt_cmd->add_option("--source", aa.source, "source dataset directory")->required();
  adapt_cmd->add_option("--target", aa.target, "target dataset directory")->required();
  adapt_cmd->add_option("--target-labels", aa.target_labels, "image-level labels; default: per-patch from counts");
  adapt_cmd->add_option("--out", aa.out, "output directory")->required();
  adapt_cmd->add_option("--agg", aa.agg, "gap | gmp | lse");
  adapt_cmd->add_option("--lse-r", aa.lse_r, "LSE sharpness");
  adapt_cmd->add_option("--label-noise", aa.label_noise, "fraction of target labels moved to a neighbouring class");
  adapt_cmd->add_option("--patch-size", aa.patch_size);
  adapt_cmd->add_option("--cam-source-iterations", aa.cam_source_iterations);
  adapt_cmd->add_option("--cam-target-iterations", aa.cam_target_iterations);
  adapt_cmd->add_option("--finetune-iterations", aa.finetune_iterations);
  adapt_cmd->add_option("--batch-size", aa.batch_size);
  adapt_cmd->add_option("--cam-lr", aa.cam_lr);
  adapt_cmd->add_option("--finetune-lr", aa.finetune_lr);
  adapt_cmd->add_option("--finetune-groups", aa.finetune_groups, "parameter groups updated on pseudo ground truth")
      ->delimiter(',');
  adapt_cmd->add_option("--pseudo-norm", aa.pseudo_norm, "pixel | plane");
  adapt_cmd->add_option("--boundaries", aa.boundaries, "5 class thresholds")->delimiter(',');
  adapt_cmd->add_option("--seed", aa.seed);

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "count metrics (MAE, MSE, per density level)");
  eval_cmd->add_option("--pred-dir", ea.pred_dir, "predicted .dmap files");
  eval_cmd->add_option("--gt-dir", ea.gt_dir, "ground-truth .dmap files (matched by name)");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "model to run on --data");
  eval_cmd->add_option("--data", ea.data, "dataset directory");
  eval_cmd->add_flag("--cross-dataset", ea.cross_dataset, "report S / NS / C on --data");
  eval_cmd->add_option("--target-checkpoint", ea.target_checkpoint, "target-trained model for S and C");
  eval_cmd->add_option("--write-pred", ea.write_pred, "directory for predicted .dmap files");
  eval_cmd->add_option("--bins", ea.bins, "density-level bin edges")->delimiter(',');
  eval_cmd->add_option("--out", ea.out, "report JSON (stdout when absent)");

  PlotArgs pa;
  auto* plot_cmd = app.add_subcommand("plot", "density heatmaps and per-level MAE bars");
  plot_cmd->add_option("--checkpoint", pa.checkpoint);
  plot_cmd->add_option("--data", pa.data);
  plot_cmd->add_option("--report", pa.report, "eval report JSON; written as CSV bar data");
  plot_cmd->add_option("--n", pa.n, "number of images to render");
  plot_cmd->add_option("--out", pa.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) cmd_synth(sa);
    if (*gt_cmd) cmd_gen_gt(ga);
    if (*train_cmd) cmd_train(ta);
    if (*adapt_cmd) cmd_adapt(aa);
    if (*eval_cmd) cmd_eval(ea);
    if (*plot_cmd) cmd_plot(pa);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
