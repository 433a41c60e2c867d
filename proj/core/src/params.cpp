#include "scvlm/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "scvlm/errors.hpp"
#include "scvlm/random.hpp"

namespace scvlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'C', 'V', 'L', 'M', 'C', 'K', '1'};
constexpr std::uint32_t kContainerVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (n > in_.size() - pos_) throw IoError("checkpoint truncated");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > in_.size() - pos_) throw IoError("checkpoint truncated");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

Eigen::MatrixXd& ParamSet::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  auto [it, inserted] = arrays_.try_emplace(name, Eigen::MatrixXd::Zero(rows, cols));
  if (!inserted) throw ValidationError("parameter '" + name + "' defined twice");
  return it->second;
}

Eigen::MatrixXd& ParamSet::at(const std::string& name) {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw CompatibilityError("missing parameter '" + name + "'");
  return it->second;
}

const Eigen::MatrixXd& ParamSet::at(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw CompatibilityError("missing parameter '" + name + "'");
  return it->second;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  out.version = version;
  out.seed = seed;
  for (const auto& [name, m] : arrays_) out.arrays_.emplace(name, Eigen::MatrixXd::Zero(m.rows(), m.cols()));
  return out;
}

ParamSet ParamSet::zeros_like(std::string_view prefix) const {
  ParamSet out;
  out.version = version;
  out.seed = seed;
  for (const auto& [name, m] : arrays_) {
    if (name.starts_with(prefix)) out.arrays_.emplace(name, Eigen::MatrixXd::Zero(m.rows(), m.cols()));
  }
  return out;
}

void ParamSet::set_zero() {
  for (auto& [_, m] : arrays_) m.setZero();
}

void ParamSet::add_scaled(const ParamSet& other, double alpha) {
  for (const auto& [name, g] : other.arrays_) {
    auto& m = at(name);
    if (m.rows() != g.rows() || m.cols() != g.cols()) {
      throw CompatibilityError("shape mismatch for parameter '" + name + "'");
    }
    m += alpha * g;
  }
}

bool ParamSet::all_finite() const {
  for (const auto& [_, m] : arrays_) {
    if (!m.allFinite()) return false;
  }
  return true;
}

std::size_t ParamSet::size() const {
  std::size_t n = 0;
  for (const auto& [_, m] : arrays_) n += static_cast<std::size_t>(m.size());
  return n;
}

const std::string& ParamSet::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw CompatibilityError("checkpoint lacks metadata '" + key + "'");
  return it->second;
}

int ParamSet::meta_int(const std::string& key) const {
  try {
    return std::stoi(meta(key));
  } catch (const std::logic_error&) {
    throw CompatibilityError("checkpoint metadata '" + key + "' is not an integer");
  }
}

double ParamSet::meta_double(const std::string& key) const {
  try {
    return std::stod(meta(key));
  } catch (const std::logic_error&) {
    throw CompatibilityError("checkpoint metadata '" + key + "' is not a number");
  }
}

std::vector<std::uint8_t> serialize_params(const ParamSet& p) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kContainerVersion);
  w.str(p.version);
  w.u64(p.seed);
  w.u32(static_cast<std::uint32_t>(p.metadata.size()));
  for (const auto& [k, v] : p.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(p.arrays().size()));
  for (const auto& [name, m] : p.arrays()) {
    w.str(name);
    w.u32(2);
    w.u64(static_cast<std::uint64_t>(m.rows()));
    w.u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
    }
  }
  return w.take();
}

ParamSet deserialize_params(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError("not a scvlm checkpoint");
  if (r.u32() != kContainerVersion) throw CompatibilityError("unsupported checkpoint version");
  ParamSet p;
  p.version = r.str();
  p.seed = r.u64();
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    p.metadata[k] = r.str();
  }
  const std::uint32_t n_arrays = r.u32();
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    const std::string name = r.str();
    if (r.u32() != 2) throw CompatibilityError("array '" + name + "' is not two-dimensional");
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw IoError("array '" + name + "' too large");
    auto& m = p.add(name, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index a = 0; a < m.rows(); ++a) {
      for (Eigen::Index b = 0; b < m.cols(); ++b) m(a, b) = r.f64();
    }
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint");
  return p;
}

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  const auto bytes = serialize_params(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_params(bytes);
}

void init_uniform(Eigen::MatrixXd& m, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-a, a);
  }
}

}  // namespace scvlm
