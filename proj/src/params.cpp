#include "haccn/params.hpp"

#include <cstring>
#include <numeric>

namespace haccn {

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kSam: return "sam";
    case ParamGroup::kGam: return "gam";
    case ParamGroup::kBranchBlocks: return "branch_blocks";
    case ParamGroup::kFusion: return "fusion";
    case ParamGroup::kCam: return "cam";
  }
  return "unknown";
}

ParamGroup parse_group(std::string_view name) {
  for (int g = 0; g < kNumParamGroups; ++g) {
    if (group_name(static_cast<ParamGroup>(g)) == name) return static_cast<ParamGroup>(g);
  }
  throw InvalidArgument("unknown parameter group '" + std::string(name) + "'");
}

std::size_t NetworkParams::add(std::string name, ParamGroup group, std::vector<int> shape) {
  if (index_.contains(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                        [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  const std::size_t idx = params_.size();
  index_.emplace(name, idx);
  params_.push_back(Param{std::move(name), group, std::move(shape), std::vector<double>(n, 0.0)});
  return idx;
}

std::size_t NetworkParams::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw InvalidData("no parameter named '" + std::string(name) + "'");
  return it->second;
}

std::size_t NetworkParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.values.size();
  return n;
}

std::size_t NetworkParams::scalar_count(ParamGroup g) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.group == g) n += p.values.size();
  }
  return n;
}

std::uint64_t NetworkParams::checksum(const GroupSet& groups) const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& p : params_) {
    if (!groups.contains(p.group)) continue;
    mix(p.name.data(), p.name.size());
    mix(p.values.data(), p.values.size() * sizeof(double));
  }
  return h;
}

void NetworkParams::copy_group_from(const NetworkParams& src, ParamGroup g) {
  for (auto& p : params_) {
    if (p.group != g) continue;
    const Param& s = src[src.index_of(p.name)];
    if (s.shape != p.shape) throw InvalidData("shape mismatch for parameter '" + p.name + "'");
    p.values = s.values;
  }
}

Gradients::Gradients(const NetworkParams& p) {
  values.reserve(p.size());
  for (const auto& t : p.all()) values.emplace_back(t.values.size(), 0.0);
}

void Gradients::zero() {
  for (auto& v : values) std::fill(v.begin(), v.end(), 0.0);
}

double Gradients::squared_norm(const NetworkParams& p, const GroupSet& groups) const {
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!groups.contains(p[i].group)) continue;
    for (double g : values[i]) s += g * g;
  }
  return s;
}

void Gradients::scale(double f) {
  for (auto& v : values) {
    for (double& g : v) g *= f;
  }
}

}  // namespace haccn
