#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "haccn/error.hpp"

namespace haccn {

// Disjoint partition of the network's parameters. Fine-tuning stages freeze
// and unfreeze whole groups.
enum class ParamGroup : int { kBackbone = 0, kSam, kGam, kBranchBlocks, kFusion, kCam };
inline constexpr int kNumParamGroups = 6;

std::string_view group_name(ParamGroup g);
ParamGroup parse_group(std::string_view name);

struct Param {
  std::string name;
  ParamGroup group = ParamGroup::kBackbone;
  std::vector<int> shape;
  std::vector<double> values;
};

// Subset of groups, e.g. the trainable set of a fine-tuning stage.
class GroupSet {
 public:
  GroupSet() = default;
  GroupSet(std::initializer_list<ParamGroup> groups) {
    for (auto g : groups) insert(g);
  }
  static GroupSet all() {
    GroupSet s;
    s.bits_ = (1u << kNumParamGroups) - 1;
    return s;
  }
  void insert(ParamGroup g) { bits_ |= 1u << static_cast<int>(g); }
  void erase(ParamGroup g) { bits_ &= ~(1u << static_cast<int>(g)); }
  bool contains(ParamGroup g) const { return (bits_ >> static_cast<int>(g)) & 1u; }
  bool empty() const { return bits_ == 0; }

 private:
  unsigned bits_ = 0;
};

class NetworkParams {
 public:
  // Returns the index of the new tensor; names must be unique.
  std::size_t add(std::string name, ParamGroup group, std::vector<int> shape);

  std::size_t size() const { return params_.size(); }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  Param& operator[](std::size_t i) { return params_[i]; }
  std::span<const Param> all() const { return params_; }
  std::span<Param> all() { return params_; }

  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  std::size_t scalar_count() const;
  std::size_t scalar_count(ParamGroup g) const;

  // Order-dependent FNV-1a hash over the raw bytes of every tensor in `groups`.
  std::uint64_t checksum(const GroupSet& groups = GroupSet::all()) const;

  // Overwrites every tensor of group `g` with the same-named tensor of `src`;
  // names and shapes must agree.
  void copy_group_from(const NetworkParams& src, ParamGroup g);

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Gradient buffers aligned index-for-index with a NetworkParams.
struct Gradients {
  std::vector<std::vector<double>> values;

  explicit Gradients(const NetworkParams& p);
  void zero();
  double squared_norm(const NetworkParams& p, const GroupSet& groups) const;
  void scale(double f);
};

}  // namespace haccn
