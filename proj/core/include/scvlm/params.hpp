#pragma once

// Named parameter arrays and the binary checkpoint container.
//
// Checkpoint layout (all integers little-endian, see docs/checkpoint_format.md):
//   "SCVLMCK1"                      8-byte magic
//   u32 container version (1)
//   str version tag                 u32 length + UTF-8 bytes
//   u64 initialisation seed
//   u32 metadata count, then per entry: str key, str value
//   u32 array count,    then per array: str name, u32 ndim (2), u64 rows, u64 cols,
//                                        rows*cols f64 values, row-major
// Entries are written in lexicographic name order.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "scvlm/random.hpp"

namespace scvlm {

class ParamSet {
 public:
  std::string version = "scvlm-ref-1";
  std::uint64_t seed = 0;
  std::map<std::string, std::string> metadata;

  Eigen::MatrixXd& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  bool contains(const std::string& name) const { return arrays_.contains(name); }
  Eigen::MatrixXd& at(const std::string& name);
  const Eigen::MatrixXd& at(const std::string& name) const;
  const std::map<std::string, Eigen::MatrixXd>& arrays() const { return arrays_; }
  std::map<std::string, Eigen::MatrixXd>& arrays() { return arrays_; }

  // Same names and shapes, all zeros, no metadata.
  ParamSet zeros_like() const;
  // Zeros for the arrays whose names start with `prefix` only.
  ParamSet zeros_like(std::string_view prefix) const;
  void set_zero();
  // this += alpha * other, for every array of `other` (names must exist here).
  void add_scaled(const ParamSet& other, double alpha);
  bool all_finite() const;
  std::size_t size() const;  // total number of scalars

  const std::string& meta(const std::string& key) const;
  int meta_int(const std::string& key) const;
  double meta_double(const std::string& key) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::map<std::string, Eigen::MatrixXd> arrays_;
};

std::vector<std::uint8_t> serialize_params(const ParamSet& params);
ParamSet deserialize_params(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

// Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
void init_uniform(Eigen::MatrixXd& m, int fan_in, int fan_out, Rng& rng);

}  // namespace scvlm
