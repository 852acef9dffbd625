#include "haccn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "haccn/io.hpp"
#include "haccn/rng.hpp"
#include "json.hpp"

namespace haccn::synth {

Background parse_background(std::string_view name) {
  if (name == "flat") return Background::kFlat;
  if (name == "gradient") return Background::kGradient;
  if (name == "noise-texture") return Background::kNoiseTexture;
  throw InvalidArgument("unknown background '" + std::string(name) + "'");
}

std::string_view background_name(Background b) {
  switch (b) {
    case Background::kFlat: return "flat";
    case Background::kGradient: return "gradient";
    case Background::kNoiseTexture: return "noise-texture";
  }
  return "unknown";
}

void SceneSpec::validate() const {
  if (size <= 0) throw InvalidArgument("scene size must be positive");
  if (count_min < 0 || count_max < count_min) throw InvalidArgument("count range must satisfy 0 <= min <= max");
  if (cluster_count <= 0) throw InvalidArgument("cluster_count must be positive");
  if (!(cluster_spread > 0.0)) throw InvalidArgument("cluster_spread must be positive");
  if (!(blob_radius_min > 0.0) || blob_radius_max < blob_radius_min) throw InvalidArgument("bad blob radius range");
  if (!(blob_strength >= 0.0 && blob_strength <= 1.0)) throw InvalidArgument("blob_strength must be in [0, 1]");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finaliser over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

void paint_background(Image& img, Background bg, Rng& rng) {
  const int n = img.height;
  std::array<double, 3> base{0.30 + 0.05 * rng.uniform(), 0.32 + 0.05 * rng.uniform(), 0.35 + 0.05 * rng.uniform()};
  switch (bg) {
    case Background::kFlat:
      for (int c = 0; c < 3; ++c) std::fill_n(img.channel(c).begin(), img.plane(), base[static_cast<std::size_t>(c)]);
      break;
    case Background::kGradient: {
      const double slope = rng.uniform(0.1, 0.25);
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < n; ++y) {
          const double v = base[static_cast<std::size_t>(c)] + slope * (static_cast<double>(y) / n - 0.5);
          for (int x = 0; x < img.width; ++x) img(c, y, x) = v;
        }
      }
      break;
    }
    case Background::kNoiseTexture: {
      struct Wave {
        double fx, fy, phase, amp;
      };
      std::array<Wave, 3> waves{};
      for (auto& w : waves) {
        w = {rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3), rng.uniform(0.0, 2.0 * std::numbers::pi),
             rng.uniform(0.02, 0.06)};
      }
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < img.width; ++x) {
          double t = 0.0;
          for (const auto& w : waves) t += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
          const double grain = rng.normal(0.0, 0.03);
          for (int c = 0; c < 3; ++c) img(c, y, x) = base[static_cast<std::size_t>(c)] + t + grain;
        }
      }
      break;
    }
  }
}

void paint_blob(Image& img, const Point& p, double radius, double strength, const std::array<double, 3>& color) {
  const int reach = static_cast<int>(std::ceil(radius));
  const int cy = static_cast<int>(std::floor(p.y)), cx = static_cast<int>(std::floor(p.x));
  for (int y = std::max(0, cy - reach); y <= std::min(img.height - 1, cy + reach + 1); ++y) {
    for (int x = std::max(0, cx - reach); x <= std::min(img.width - 1, cx + reach + 1); ++x) {
      const double dx = x + 0.5 - p.x, dy = y + 0.5 - p.y;
      const double t = (dx * dx + dy * dy) / (radius * radius);
      if (t >= 1.0) continue;
      const double a = strength * (1.0 - t);
      for (int c = 0; c < 3; ++c) img(c, y, x) = (1.0 - a) * img(c, y, x) + a * color[static_cast<std::size_t>(c)];
    }
  }
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, const std::string& image_id) {
  spec.validate();
  Rng rng(spec.seed);
  Scene s;
  s.image = Image(3, spec.size, spec.size);
  s.ann = PointAnnotation{image_id, spec.size, spec.size, {}};
  paint_background(s.image, spec.background, rng);

  const auto count = rng.uniform_int(spec.count_min, spec.count_max);
  std::vector<Point> centres(static_cast<std::size_t>(spec.cluster_count));
  for (auto& c : centres) c = {rng.uniform(0.15, 0.85) * spec.size, rng.uniform(0.15, 0.85) * spec.size};
  auto inside = [&](const Point& p) { return p.x >= 0.0 && p.x < spec.size && p.y >= 0.0 && p.y < spec.size; };
  for (std::int64_t i = 0; i < count; ++i) {
    const auto& c = centres[static_cast<std::size_t>(rng.uniform_int(0, spec.cluster_count - 1))];
    Point p{};
    bool placed = false;
    for (int attempt = 0; attempt < 32 && !placed; ++attempt) {
      p = {c.x + rng.normal(0.0, spec.cluster_spread), c.y + rng.normal(0.0, spec.cluster_spread)};
      placed = inside(p);
    }
    if (!placed) p = {rng.uniform(0.0, spec.size), rng.uniform(0.0, spec.size)};
    s.ann.points.push_back(p);
    paint_blob(s.image, p, rng.uniform(spec.blob_radius_min, spec.blob_radius_max), spec.blob_strength,
               spec.blob_color);
  }
  for (double& v : s.image.data) v = std::clamp(v, 0.0, 1.0);
  return s;
}

Preset parse_preset(std::string_view name) {
  if (name == "source") return Preset::kSource;
  if (name == "target" || name == "shift") return Preset::kTarget;
  throw InvalidArgument("unknown preset '" + std::string(name) + "' (expected source or target)");
}

std::string_view preset_name(Preset p) { return p == Preset::kSource ? "source" : "target"; }

SceneSpec preset_spec(Preset p, int size) {
  SceneSpec s;
  s.size = size;
  const double area_scale = static_cast<double>(size) * size / (64.0 * 64.0);
  if (p == Preset::kSource) {
    s.count_min = 0;
    s.count_max = static_cast<int>(std::lround(40 * area_scale));
    s.cluster_count = 3;
    s.cluster_spread = 0.16 * size;
    s.blob_radius_min = 2.5;
    s.blob_radius_max = 3.5;
    s.blob_strength = 0.85;
    s.blob_color = {0.95, 0.85, 0.55};
    s.background = Background::kGradient;
  } else {
    s.count_min = static_cast<int>(std::lround(10 * area_scale));
    s.count_max = static_cast<int>(std::lround(30 * area_scale));
    s.cluster_count = 2;
    s.cluster_spread = 0.12 * size;
    s.blob_radius_min = 1.8;
    s.blob_radius_max = 2.6;
    s.blob_strength = 0.6;
    s.blob_color = {0.85, 0.9, 0.95};
    s.background = Background::kNoiseTexture;
  }
  return s;
}

namespace {

std::string image_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%04d", i);
  return buf;
}

}  // namespace

Dataset generate_dataset_in_memory(int n_images, const SceneSpec& spec_template, std::uint64_t seed) {
  if (n_images < 0) throw InvalidArgument("n_images must be non-negative");
  Dataset out;
  out.reserve(static_cast<std::size_t>(n_images));
  for (int i = 0; i < n_images; ++i) {
    SceneSpec spec = spec_template;
    spec.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    auto scene = generate_scene(spec, image_name(i));
    out.push_back({std::move(scene.image), std::move(scene.ann)});
  }
  return out;
}

void generate_dataset(const std::filesystem::path& dir, int n_images, const SceneSpec& spec_template,
                      std::uint64_t seed, const std::string& preset_label, const ClassBoundaries& boundaries) {
  namespace fs = std::filesystem;
  boundaries.validate();
  const Dataset data = generate_dataset_in_memory(n_images, spec_template, seed);
  try {
    fs::create_directories(dir / "images");
  } catch (const fs::filesystem_error& e) {
    throw IoError(e.what());
  }
  std::vector<PointAnnotation> anns;
  std::vector<io::ImageLabel> labels;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& s : data) {
    const fs::path rel = fs::path("images") / (s.ann.image_id + ".png");
    io::write_png(dir / rel, s.image);
    files[rel.generic_string()] = io::sha256_file(dir / rel);
    anns.push_back(s.ann);
    labels.push_back({s.ann.image_id, static_cast<int>(assign_density_class(s.count(), boundaries))});
  }
  io::write_annotations(dir / "annotations.json", anns);
  io::write_labels(dir / "labels.json", labels);
  files["annotations.json"] = io::sha256_file(dir / "annotations.json");
  files["labels.json"] = io::sha256_file(dir / "labels.json");

  const SceneSpec& t = spec_template;
  nlohmann::json manifest{
      {"preset", preset_label},
      {"seed", seed},
      {"n_images", n_images},
      {"scene_seeds", nlohmann::json::array()},
      {"spec",
       {{"size", t.size},
        {"count_range", {t.count_min, t.count_max}},
        {"cluster_count", t.cluster_count},
        {"cluster_spread", t.cluster_spread},
        {"blob_radius_range", {t.blob_radius_min, t.blob_radius_max}},
        {"blob_strength", t.blob_strength},
        {"blob_color", t.blob_color},
        {"background", background_name(t.background)}}},
      {"class_boundaries", boundaries.thresholds},
      {"files", files}};
  for (int i = 0; i < n_images; ++i) manifest["scene_seeds"].push_back(mix_seed(seed, static_cast<std::uint64_t>(i)));
  io::write_text(dir / "manifest.json", manifest.dump(2));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto anns = io::read_annotations(dir / "annotations.json");
  Dataset out;
  out.reserve(anns.size());
  for (const auto& a : anns) {
    Image img = io::read_png(dir / "images" / (a.image_id + ".png"));
    if (img.height != a.height || img.width != a.width) {
      throw InvalidData("image '" + a.image_id + "' size disagrees with its annotation");
    }
    out.push_back({std::move(img), a});
  }
  return out;
}

}  // namespace haccn::synth
