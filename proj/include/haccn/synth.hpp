#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "haccn/dataset.hpp"
#include "haccn/density.hpp"

namespace haccn::synth {

enum class Background { kFlat, kGradient, kNoiseTexture };

Background parse_background(std::string_view name);
std::string_view background_name(Background b);

// Parameters of one synthetic crowd scene. People are radial blobs scattered
// around a few cluster centres; the annotation points are the blob centres.
struct SceneSpec {
  std::uint64_t seed = 0;
  int size = 64;
  int count_min = 0;
  int count_max = 30;
  int cluster_count = 3;
  double cluster_spread = 10.0;
  double blob_radius_min = 2.0;
  double blob_radius_max = 3.5;
  double blob_strength = 0.8;  // peak blend weight of a blob over the background
  std::array<double, 3> blob_color{0.95, 0.85, 0.55};
  Background background = Background::kGradient;

  void validate() const;
};

struct Scene {
  Image image;
  PointAnnotation ann;
};

Scene generate_scene(const SceneSpec& spec, const std::string& image_id = "scene");

enum class Preset { kSource, kTarget };

Preset parse_preset(std::string_view name);
std::string_view preset_name(Preset p);

// Source: wide count range, large bright blobs on a gradient. Target: shifted
// count range, smaller dimmer blobs on a noise texture.
SceneSpec preset_spec(Preset p, int size = 64);

// Scene i uses seed mix(seed, i); ids are "img_0000", "img_0001", ...
Dataset generate_dataset_in_memory(int n_images, const SceneSpec& spec_template, std::uint64_t seed);

// Writes images/*.png, annotations.json, labels.json (class from the true
// count) and manifest.json (seeds, preset, SHA-256 of every file).
void generate_dataset(const std::filesystem::path& dir, int n_images, const SceneSpec& spec_template,
                      std::uint64_t seed, const std::string& preset_label,
                      const ClassBoundaries& boundaries = {});

// Reads annotations.json and the referenced PNGs.
Dataset load_dataset(const std::filesystem::path& dir);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace haccn::synth
