#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "haccn/density.hpp"
#include "haccn/model.hpp"
#include "haccn/params.hpp"
#include "haccn/tensor.hpp"

namespace haccn::io {

namespace fs = std::filesystem;

// DMAP container: "DMAP", u32 version (1), u32 height, u32 width, u32 scale,
// then height*width little-endian float32, row-major.
inline constexpr std::uint32_t kMapVersion = 1;

std::vector<std::uint8_t> encode_dmap(const DensityMap& m);
DensityMap decode_dmap(const std::vector<std::uint8_t>& bytes);
void write_dmap(const fs::path& path, const DensityMap& m);
DensityMap read_dmap(const fs::path& path);

// Same header with magic "SMSK"; payload is one byte per pixel in {0, 1}.
std::vector<std::uint8_t> encode_smsk(const SegmentationMask& m);
SegmentationMask decode_smsk(const std::vector<std::uint8_t>& bytes);
void write_smsk(const fs::path& path, const SegmentationMask& m);
SegmentationMask read_smsk(const fs::path& path);

// Annotation file: JSON list of {"image_id", "width", "height", "points": [[x, y], ...]}.
// A single object is accepted too.
std::vector<PointAnnotation> parse_annotations(const std::string& json_text);
std::string annotations_to_json(const std::vector<PointAnnotation>& anns);
std::vector<PointAnnotation> read_annotations(const fs::path& path);
void write_annotations(const fs::path& path, const std::vector<PointAnnotation>& anns);

// Image-level label file: JSON list of {"image_id", "class_index": 0..5}.
struct ImageLabel {
  std::string image_id;
  int class_index = 0;
};
std::vector<ImageLabel> read_labels(const fs::path& path);
void write_labels(const fs::path& path, const std::vector<ImageLabel>& labels);

// 8-bit RGB PNG <-> 3-channel image in [0, 1].
void write_png(const fs::path& path, const Image& image);
Image read_png(const fs::path& path);
// Raw interleaved RGB8 rows.
void write_png_rgb8(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& rgb);

std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& text);

// Checkpoint: "HCKP", u32 version, config JSON, then named float64 tensors
// with group and shape metadata. Loading checks every name/shape against the
// stored config's layout.
struct Checkpoint {
  ModelConfig config;
  NetworkParams params;
};
void save_checkpoint(const fs::path& path, const ModelConfig& config, const NetworkParams& params);
Checkpoint load_checkpoint(const fs::path& path);

std::vector<std::uint8_t> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

// Hex SHA-256 of a byte buffer / file.
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_file(const fs::path& path);

}  // namespace haccn::io
