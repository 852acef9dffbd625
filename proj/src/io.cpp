#include "haccn/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>
#include <png.h>

#include "json.hpp"

namespace haccn::io {

using nlohmann::json;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw InvalidData(what_ + ": truncated data");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint8_t byte() {
    need(1);
    return bytes_[pos_++];
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

struct GridHeader {
  std::uint32_t height, width, scale;
};

GridHeader read_header(Reader& r, const char* magic) {
  if (r.str(4) != magic) throw InvalidData(std::string("bad magic, expected ") + magic);
  const auto version = r.u32();
  if (version != kMapVersion) throw InvalidData("unsupported " + std::string(magic) + " version " + std::to_string(version));
  GridHeader h{r.u32(), r.u32(), r.u32()};
  if (h.scale == 0) throw InvalidData("scale must be positive");
  return h;
}

void write_header(std::vector<std::uint8_t>& out, const char* magic, int h, int w, int scale) {
  out.insert(out.end(), magic, magic + 4);
  put_u32(out, kMapVersion);
  put_u32(out, static_cast<std::uint32_t>(h));
  put_u32(out, static_cast<std::uint32_t>(w));
  put_u32(out, static_cast<std::uint32_t>(scale));
}

}  // namespace

std::vector<std::uint8_t> encode_dmap(const DensityMap& m) {
  if (m.values.size() != static_cast<std::size_t>(m.height) * m.width) throw ShapeError("density map size mismatch");
  std::vector<std::uint8_t> out;
  out.reserve(20 + 4 * m.values.size());
  write_header(out, "DMAP", m.height, m.width, m.scale);
  for (double v : m.values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

DensityMap decode_dmap(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "DMAP");
  const auto h = read_header(r, "DMAP");
  DensityMap m(static_cast<int>(h.height), static_cast<int>(h.width), static_cast<int>(h.scale));
  for (double& v : m.values) v = std::bit_cast<float>(r.u32());
  if (!r.done()) throw InvalidData("DMAP: trailing bytes");
  return m;
}

void write_dmap(const fs::path& path, const DensityMap& m) { write_bytes(path, encode_dmap(m)); }
DensityMap read_dmap(const fs::path& path) { return decode_dmap(read_bytes(path)); }

std::vector<std::uint8_t> encode_smsk(const SegmentationMask& m) {
  if (m.values.size() != static_cast<std::size_t>(m.height) * m.width) throw ShapeError("mask size mismatch");
  std::vector<std::uint8_t> out;
  write_header(out, "SMSK", m.height, m.width, m.scale);
  out.insert(out.end(), m.values.begin(), m.values.end());
  return out;
}

SegmentationMask decode_smsk(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "SMSK");
  const auto h = read_header(r, "SMSK");
  SegmentationMask m{static_cast<int>(h.height), static_cast<int>(h.width), static_cast<int>(h.scale), {}};
  m.values.resize(static_cast<std::size_t>(h.height) * h.width);
  for (auto& v : m.values) {
    v = r.byte();
    if (v > 1) throw InvalidData("SMSK: payload byte outside {0, 1}");
  }
  if (!r.done()) throw InvalidData("SMSK: trailing bytes");
  return m;
}

void write_smsk(const fs::path& path, const SegmentationMask& m) { write_bytes(path, encode_smsk(m)); }
SegmentationMask read_smsk(const fs::path& path) { return decode_smsk(read_bytes(path)); }

namespace {

PointAnnotation annotation_from_json(const json& j) {
  try {
    PointAnnotation a;
    a.image_id = j.at("image_id").get<std::string>();
    a.width = j.at("width").get<int>();
    a.height = j.at("height").get<int>();
    for (const auto& p : j.at("points")) {
      if (!p.is_array() || p.size() != 2) throw InvalidData("points must be [x, y] pairs");
      a.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    a.validate();
    return a;
  } catch (const json::exception& e) {
    throw InvalidData(std::string("malformed annotation: ") + e.what());
  }
}

json annotation_to_json(const PointAnnotation& a) {
  json pts = json::array();
  for (const auto& p : a.points) pts.push_back({p.x, p.y});
  return {{"image_id", a.image_id}, {"width", a.width}, {"height", a.height}, {"points", pts}};
}

json parse_or_throw(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InvalidData(what + ": " + e.what());
  }
}

}  // namespace

std::vector<PointAnnotation> parse_annotations(const std::string& json_text) {
  const json j = parse_or_throw(json_text, "annotation file");
  std::vector<PointAnnotation> out;
  if (j.is_object()) {
    out.push_back(annotation_from_json(j));
  } else if (j.is_array()) {
    for (const auto& e : j) out.push_back(annotation_from_json(e));
  } else {
    throw InvalidData("annotation file must hold an object or a list of objects");
  }
  return out;
}

std::string annotations_to_json(const std::vector<PointAnnotation>& anns) {
  json j = json::array();
  for (const auto& a : anns) j.push_back(annotation_to_json(a));
  return j.dump(1);
}

std::vector<PointAnnotation> read_annotations(const fs::path& path) { return parse_annotations(read_text(path)); }

void write_annotations(const fs::path& path, const std::vector<PointAnnotation>& anns) {
  write_text(path, annotations_to_json(anns));
}

std::vector<ImageLabel> read_labels(const fs::path& path) {
  const json j = parse_or_throw(read_text(path), path.string());
  if (!j.is_array()) throw InvalidData("label file must hold a list");
  std::vector<ImageLabel> out;
  try {
    for (const auto& e : j) {
      ImageLabel l{e.at("image_id").get<std::string>(), e.at("class_index").get<int>()};
      if (l.class_index < 0 || l.class_index >= kNumClasses) {
        throw InvalidData("class_index out of range for '" + l.image_id + "'");
      }
      out.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw InvalidData(std::string("malformed label file: ") + e.what());
  }
  return out;
}

void write_labels(const fs::path& path, const std::vector<ImageLabel>& labels) {
  json j = json::array();
  for (const auto& l : labels) j.push_back({{"image_id", l.image_id}, {"class_index", l.class_index}});
  write_text(path, j.dump(1));
}

void write_png_rgb8(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) throw ShapeError("RGB buffer size mismatch");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

void write_png(const fs::path& path, const Image& image) {
  if (image.channels != 3) throw ShapeError("PNG export expects a 3-channel image");
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image(c, y, x), 0.0, 1.0);
        rgb[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  write_png_rgb8(path, image.height, image.width, rgb);
}

Image read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out(3, static_cast<int>(img.height), static_cast<int>(img.width));
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) out(c, y, x) = rgb[(static_cast<std::size_t>(y) * out.width + x) * 3 + c] / 255.0;
    }
  }
  return out;
}

std::string config_to_json(const ModelConfig& c) {
  json j{{"enable_sam", c.enable_sam},         {"enable_gam", c.enable_gam},
         {"enable_multiscale", c.enable_multiscale}, {"sam_supervised", c.sam_supervised},
         {"channel_scale", c.channel_scale},   {"input_size", c.input_size}};
  return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
  const json j = parse_or_throw(text, "model config");
  ModelConfig c;
  try {
    c.enable_sam = j.at("enable_sam").get<bool>();
    c.enable_gam = j.at("enable_gam").get<bool>();
    c.enable_multiscale = j.at("enable_multiscale").get<bool>();
    c.sam_supervised = j.at("sam_supervised").get<bool>();
    c.channel_scale = j.at("channel_scale").get<double>();
    c.input_size = j.at("input_size").get<int>();
  } catch (const json::exception& e) {
    throw InvalidData(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void save_checkpoint(const fs::path& path, const ModelConfig& config, const NetworkParams& params) {
  HaCcn(config).check_params(params);
  std::vector<std::uint8_t> out{'H', 'C', 'K', 'P'};
  put_u32(out, kCheckpointVersion);
  const std::string cfg = config_to_json(config);
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.all()) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, static_cast<std::uint32_t>(p.group));
    put_u32(out, static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  write_bytes(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto bytes = read_bytes(path);
  Reader r(bytes, "checkpoint " + path.string());
  if (r.str(4) != "HCKP") throw InvalidData(path.string() + " is not a checkpoint");
  if (r.u32() != kCheckpointVersion) throw InvalidData("unsupported checkpoint version");
  Checkpoint ck;
  ck.config = config_from_json(r.str(r.u32()));
  const HaCcn model(ck.config);
  ck.params = model.init_params(0);
  const auto n = r.u32();
  if (n != ck.params.size()) {
    throw InvalidData("checkpoint holds " + std::to_string(n) + " tensors, its config implies " +
                      std::to_string(ck.params.size()));
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str(r.u32());
    Param& p = ck.params[ck.params.index_of(name)];
    const auto group = r.u32();
    if (group != static_cast<std::uint32_t>(p.group)) throw InvalidData("group mismatch for '" + name + "'");
    std::vector<int> shape(r.u32());
    for (int& d : shape) d = static_cast<int>(r.u32());
    if (shape != p.shape) throw InvalidData("shape mismatch for '" + name + "'");
    for (double& v : p.values) v = std::bit_cast<double>(r.u64());
  }
  if (!r.done()) throw InvalidData("checkpoint has trailing bytes");
  return ck;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const fs::path& path) {
  const auto b = read_bytes(path);
  return {b.begin(), b.end()};
}

std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr)) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

}  // namespace haccn::io
