#include "scvlm/encoders.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "scvlm/errors.hpp"
#include "scvlm/random.hpp"
#include "scvlm/text.hpp"

namespace scvlm {

namespace {

Eigen::VectorXd sigmoid(const Eigen::VectorXd& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

// Standardised pixels are scaled to this standard deviation.
constexpr double kInputScale = 0.5;
// Variance floor, in squared 8-bit levels, for flat frames.
constexpr double kInputEpsilon = 1.0;

void expect_shape(const ParamSet& params, const std::string& name, Eigen::Index rows,
                  Eigen::Index cols) {
  const auto& m = params.at(name);
  if (m.rows() != rows || m.cols() != cols) {
    throw CompatibilityError("parameter '" + name + "' has shape " + std::to_string(m.rows()) +
                             "x" + std::to_string(m.cols()) + ", expected " +
                             std::to_string(rows) + "x" + std::to_string(cols));
  }
}

}  // namespace

std::vector<int> sample_frame_indices(int total, int count) {
  if (total < 1 || count < 1) throw ValidationError("frame sampling needs total >= 1 and count >= 1");
  std::vector<int> idx(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    // Exact integer form of floor((i + 0.5) * total / count).
    idx[static_cast<std::size_t>(i)] =
        static_cast<int>((static_cast<long long>(2 * i + 1) * total) / (2LL * count));
  }
  return idx;
}

FrameSequence sample_frames(const FrameSequence& seq, int count) {
  const auto idx = sample_frame_indices(seq.frames(), count);
  return seq.select(idx);
}

// ---------------------------------------------------------------------------

TwoLayerPerceptron::TwoLayerPerceptron(std::string prefix, int in, int hidden, int out)
    : w1_(prefix + ".w1"), b1_(prefix + ".b1"), w2_(prefix + ".w2"), b2_(prefix + ".b2"),
      in_(in), hidden_(hidden), out_(out) {}

void TwoLayerPerceptron::init(ParamSet& params, Rng& rng) const {
  init_uniform(params.add(w1_, hidden_, in_), in_, hidden_, rng);
  params.add(b1_, hidden_, 1);
  init_uniform(params.add(w2_, out_, hidden_), hidden_, out_, rng);
  params.add(b2_, out_, 1);
}

void TwoLayerPerceptron::check_params(const ParamSet& params) const {
  expect_shape(params, w1_, hidden_, in_);
  expect_shape(params, b1_, hidden_, 1);
  expect_shape(params, w2_, out_, hidden_);
  expect_shape(params, b2_, out_, 1);
}

Eigen::VectorXd TwoLayerPerceptron::forward(const ParamSet& params, const Eigen::VectorXd& x,
                                            Tape* tape) const {
  Eigen::VectorXd h = (params.at(w1_) * x + params.at(b1_)).array().tanh().matrix();
  Eigen::VectorXd y = params.at(w2_) * h + params.at(b2_);
  if (tape) {
    tape->input = x;
    tape->hidden = std::move(h);
  }
  return y;
}

Eigen::VectorXd TwoLayerPerceptron::backward(const ParamSet& params, const Tape& tape,
                                             const Eigen::VectorXd& grad_out, ParamSet& grads) const {
  grads.at(w2_).noalias() += grad_out * tape.hidden.transpose();
  grads.at(b2_) += grad_out;
  const Eigen::VectorXd dh = params.at(w2_).transpose() * grad_out;
  const Eigen::VectorXd da = dh.array() * (1.0 - tape.hidden.array().square());
  grads.at(w1_).noalias() += da * tape.input.transpose();
  grads.at(b1_) += da;
  return params.at(w1_).transpose() * da;
}

// ---------------------------------------------------------------------------

std::string_view aggregation_name(Aggregation a) {
  return a == Aggregation::Mean ? "mean" : "recurrent";
}

Aggregation parse_aggregation(std::string_view name) {
  if (name == "mean") return Aggregation::Mean;
  if (name == "recurrent" || name == "gru" || name == "lstm") return Aggregation::Recurrent;
  throw ConfigError("unknown aggregation '" + std::string(name) + "' (expected mean|recurrent)");
}

FrameAggregator::FrameAggregator(std::string prefix, Aggregation mode, int dim)
    : prefix_(std::move(prefix)), mode_(mode), dim_(dim) {}

void FrameAggregator::init(ParamSet& params, Rng& rng) const {
  if (mode_ == Aggregation::Mean) return;
  for (const char* gate : {"z", "r", "n"}) {
    init_uniform(params.add(prefix_ + ".w_" + gate, dim_, dim_), dim_, dim_, rng);
    init_uniform(params.add(prefix_ + ".u_" + gate, dim_, dim_), dim_, dim_, rng);
    params.add(prefix_ + ".b_" + gate, dim_, 1);
  }
}

Eigen::VectorXd FrameAggregator::forward(const ParamSet& params, const Eigen::MatrixXd& frames,
                                         Tape* tape) const {
  if (frames.cols() < 1) throw ValidationError("aggregation needs at least one frame");
  if (tape) {
    tape->input = frames;
    tape->steps.clear();
  }
  if (mode_ == Aggregation::Mean) return frames.rowwise().mean();

  const auto& wz = params.at(prefix_ + ".w_z");
  const auto& uz = params.at(prefix_ + ".u_z");
  const auto& bz = params.at(prefix_ + ".b_z");
  const auto& wr = params.at(prefix_ + ".w_r");
  const auto& ur = params.at(prefix_ + ".u_r");
  const auto& br = params.at(prefix_ + ".b_r");
  const auto& wn = params.at(prefix_ + ".w_n");
  const auto& un = params.at(prefix_ + ".u_n");
  const auto& bn = params.at(prefix_ + ".b_n");

  Eigen::VectorXd h = Eigen::VectorXd::Zero(frames.rows());
  for (Eigen::Index f = 0; f < frames.cols(); ++f) {
    const Eigen::VectorXd x = frames.col(f);
    Eigen::VectorXd z = sigmoid(wz * x + uz * h + bz);
    Eigen::VectorXd r = sigmoid(wr * x + ur * h + br);
    Eigen::VectorXd n = (wn * x + un * r.cwiseProduct(h) + bn).array().tanh().matrix();
    Eigen::VectorXd next = (1.0 - z.array()) * h.array() + z.array() * n.array();
    if (tape) tape->steps.push_back({h, std::move(z), std::move(r), std::move(n)});
    h = std::move(next);
  }
  return h;
}

Eigen::MatrixXd FrameAggregator::backward(const ParamSet& params, const Tape& tape,
                                          const Eigen::VectorXd& grad_out, ParamSet& grads) const {
  const Eigen::Index frames = tape.input.cols();
  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(tape.input.rows(), frames);
  if (mode_ == Aggregation::Mean) {
    dx.colwise() = grad_out / static_cast<double>(frames);
    return dx;
  }

  const auto& wz = params.at(prefix_ + ".w_z");
  const auto& uz = params.at(prefix_ + ".u_z");
  const auto& wr = params.at(prefix_ + ".w_r");
  const auto& ur = params.at(prefix_ + ".u_r");
  const auto& wn = params.at(prefix_ + ".w_n");
  const auto& un = params.at(prefix_ + ".u_n");
  auto& gwz = grads.at(prefix_ + ".w_z");
  auto& guz = grads.at(prefix_ + ".u_z");
  auto& gbz = grads.at(prefix_ + ".b_z");
  auto& gwr = grads.at(prefix_ + ".w_r");
  auto& gur = grads.at(prefix_ + ".u_r");
  auto& gbr = grads.at(prefix_ + ".b_r");
  auto& gwn = grads.at(prefix_ + ".w_n");
  auto& gun = grads.at(prefix_ + ".u_n");
  auto& gbn = grads.at(prefix_ + ".b_n");

  Eigen::VectorXd dh = grad_out;
  for (Eigen::Index f = frames - 1; f >= 0; --f) {
    const Step& s = tape.steps[static_cast<std::size_t>(f)];
    const Eigen::VectorXd x = tape.input.col(f);
    const Eigen::VectorXd dn = dh.cwiseProduct(s.z);
    const Eigen::VectorXd dz = dh.cwiseProduct(s.n - s.h_prev);
    Eigen::VectorXd dh_prev = dh.cwiseProduct((1.0 - s.z.array()).matrix());

    const Eigen::VectorXd dan = dn.array() * (1.0 - s.n.array().square());
    const Eigen::VectorXd rh = s.r.cwiseProduct(s.h_prev);
    gwn.noalias() += dan * x.transpose();
    gun.noalias() += dan * rh.transpose();
    gbn += dan;
    const Eigen::VectorXd drh = un.transpose() * dan;
    const Eigen::VectorXd dr = drh.cwiseProduct(s.h_prev);
    dh_prev += drh.cwiseProduct(s.r);

    const Eigen::VectorXd daz = dz.array() * s.z.array() * (1.0 - s.z.array());
    gwz.noalias() += daz * x.transpose();
    guz.noalias() += daz * s.h_prev.transpose();
    gbz += daz;
    const Eigen::VectorXd dar = dr.array() * s.r.array() * (1.0 - s.r.array());
    gwr.noalias() += dar * x.transpose();
    gur.noalias() += dar * s.h_prev.transpose();
    gbr += dar;

    dx.col(f) = wn.transpose() * dan + wz.transpose() * daz + wr.transpose() * dar;
    dh_prev += uz.transpose() * daz + ur.transpose() * dar;
    dh = std::move(dh_prev);
  }
  return dx;
}

Eigen::VectorXd aggregate_frames(const Eigen::MatrixXd& frame_embeddings, Aggregation mode,
                                 const ParamSet* params, const std::string& prefix) {
  FrameAggregator agg(prefix, mode, static_cast<int>(frame_embeddings.rows()));
  if (mode == Aggregation::Recurrent && !params) {
    throw ValidationError("recurrent aggregation needs parameters");
  }
  static const ParamSet kEmpty;
  return agg.forward(params ? *params : kEmpty, frame_embeddings, nullptr);
}

// ---------------------------------------------------------------------------

void VideoEncoderConfig::validate() const {
  if (patch < 1 || height < patch || width < patch || height % patch != 0 || width % patch != 0) {
    throw ConfigError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not a multiple of the patch size " + std::to_string(patch));
  }
  if (frames < 1 || patch_dim < 1 || pool < 1 || hidden < 1 || embed_dim < 1) {
    throw ConfigError("video encoder dimensions must be positive");
  }
  if ((height / patch) % pool != 0 || (width / patch) % pool != 0) {
    throw ConfigError("the patch grid " + std::to_string(height / patch) + "x" + std::to_string(width / patch) +
                      " does not divide into cells of " + std::to_string(pool) + "x" + std::to_string(pool) +
                      " patches");
  }
}

void VideoEncoderConfig::write_metadata(ParamSet& params, const std::string& prefix) const {
  auto& m = params.metadata;
  m[prefix + ".height"] = std::to_string(height);
  m[prefix + ".width"] = std::to_string(width);
  m[prefix + ".patch"] = std::to_string(patch);
  m[prefix + ".frames"] = std::to_string(frames);
  m[prefix + ".patch_dim"] = std::to_string(patch_dim);
  m[prefix + ".pool"] = std::to_string(pool);
  m[prefix + ".hidden"] = std::to_string(hidden);
  m[prefix + ".embed_dim"] = std::to_string(embed_dim);
  m[prefix + ".aggregation"] = std::string(aggregation_name(aggregation));
}

VideoEncoderConfig VideoEncoderConfig::read_metadata(const ParamSet& params, const std::string& prefix) {
  VideoEncoderConfig c;
  c.height = params.meta_int(prefix + ".height");
  c.width = params.meta_int(prefix + ".width");
  c.patch = params.meta_int(prefix + ".patch");
  c.frames = params.meta_int(prefix + ".frames");
  c.patch_dim = params.meta_int(prefix + ".patch_dim");
  c.pool = params.meta_int(prefix + ".pool");
  c.hidden = params.meta_int(prefix + ".hidden");
  c.embed_dim = params.meta_int(prefix + ".embed_dim");
  try {
    c.aggregation = parse_aggregation(params.meta(prefix + ".aggregation"));
  } catch (const ConfigError& e) {
    throw CompatibilityError(e.what());
  }
  return c;
}

VideoEncoder::VideoEncoder(VideoEncoderConfig config, std::string prefix)
    : config_(config),
      prefix_(prefix),
      weight_(prefix + ".patch.weight"),
      bias_(prefix + ".patch.bias"),
      position_(prefix + ".patch.position"),
      aggregator_(prefix + ".gru", config.aggregation, config.frame_dim()),
      head_(prefix + ".mlp", config.frame_dim(), config.hidden, config.embed_dim) {
  config_.validate();
  const int gh = config_.height / config_.patch;
  const int gw = config_.width / config_.patch;
  const int pool = config_.pool;
  cell_.resize(static_cast<std::size_t>(gh * gw));
  for (int y = 0; y < gh; ++y) {
    for (int x = 0; x < gw; ++x) cell_[static_cast<std::size_t>(y * gw + x)] = 1 + (y / pool) * (gw / pool) + x / pool;
  }
  cell_weight_ = 1.0 / (pool * pool);
  frame_weight_ = 1.0 / (gh * gw);
}

void VideoEncoder::init(ParamSet& params, Rng& rng) const {
  init_uniform(params.add(weight_, config_.patch_dim, patch_len()), patch_len(), config_.patch_dim, rng);
  params.add(bias_, config_.patch_dim, 1);
  init_uniform(params.add(position_, config_.patch_dim, num_patches()), num_patches(),
               config_.patch_dim, rng);
  aggregator_.init(params, rng);
  head_.init(params, rng);
}

void VideoEncoder::check_geometry(const FrameSequence& seq) const {
  if (seq.height() != config_.height || seq.width() != config_.width) {
    throw CompatibilityError("clip is " + std::to_string(seq.height()) + "x" +
                             std::to_string(seq.width()) + " but the video encoder expects " +
                             std::to_string(config_.height) + "x" + std::to_string(config_.width));
  }
}

void VideoEncoder::check_params(const ParamSet& params) const {
  expect_shape(params, weight_, config_.patch_dim, patch_len());
  expect_shape(params, bias_, config_.patch_dim, 1);
  expect_shape(params, position_, config_.patch_dim, num_patches());
  const int p = config_.frame_dim();
  if (config_.aggregation == Aggregation::Recurrent) {
    const std::string base = prefix_ + ".gru.";
    for (const char* gate : {"z", "r", "n"}) {
      expect_shape(params, base + "w_" + gate, p, p);
      expect_shape(params, base + "u_" + gate, p, p);
      expect_shape(params, base + "b_" + gate, p, 1);
    }
  }
  head_.check_params(params);
}

Eigen::MatrixXd VideoEncoder::patch_matrix(const FrameSequence& seq, int frame) const {
  const int ps = config_.patch;
  const int gw = config_.width / ps;
  const auto px = seq.frame(frame);

  // Per-channel standardisation over the frame removes global brightness and offset.
  std::array<double, 3> mean{};
  std::array<double, 3> sq{};
  for (std::size_t i = 0; i < px.size(); ++i) {
    mean[i % 3] += px[i];
    sq[i % 3] += static_cast<double>(px[i]) * px[i];
  }
  const double count = static_cast<double>(px.size() / 3);
  std::array<double, 3> scale{};
  for (std::size_t c = 0; c < 3; ++c) {
    mean[c] /= count;
    const double var = std::max(sq[c] / count - mean[c] * mean[c], 0.0);
    scale[c] = kInputScale / std::sqrt(var + kInputEpsilon);
  }

  Eigen::MatrixXd x(patch_len(), num_patches());
  for (int gy = 0; gy < config_.height / ps; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const int n = gy * gw + gx;
      int q = 0;
      for (int py = 0; py < ps; ++py) {
        const std::size_t row = (static_cast<std::size_t>(gy * ps + py) * config_.width + gx * ps) * 3;
        for (int k = 0; k < ps * 3; ++k) {
          const auto c = static_cast<std::size_t>(k % 3);
          x(q++, n) = (px[row + static_cast<std::size_t>(k)] - mean[c]) * scale[c];
        }
      }
    }
  }
  return x;
}

Embedding VideoEncoder::encode(const ParamSet& params, const FrameSequence& seq) const {
  return forward(params, seq, nullptr);
}

Embedding VideoEncoder::forward(const ParamSet& params, const FrameSequence& seq, Tape* tape) const {
  check_geometry(seq);
  const auto& w = params.at(weight_);
  const auto& b = params.at(bias_);
  const auto& pos = params.at(position_);
  const auto idx = sample_frame_indices(seq.frames(), config_.frames);

  const int pd = config_.patch_dim;
  Eigen::MatrixXd frame_emb = Eigen::MatrixXd::Zero(config_.frame_dim(), config_.frames);
  if (tape) {
    tape->patches.clear();
    tape->activations.clear();
  }
  for (int f = 0; f < config_.frames; ++f) {
    Eigen::MatrixXd x = patch_matrix(seq, idx[static_cast<std::size_t>(f)]);
    Eigen::MatrixXd a = w * x + pos;
    a.colwise() += b.col(0);
    Eigen::MatrixXd h = a.array().tanh().matrix();
    frame_emb.col(f).head(pd) = h.rowwise().mean();
    for (int n = 0; n < num_patches(); ++n) {
      frame_emb.col(f).segment(cell_[static_cast<std::size_t>(n)] * pd, pd) += h.col(n) * cell_weight_;
    }
    if (tape) {
      tape->patches.push_back(std::move(x));
      tape->activations.push_back(std::move(h));
    }
  }
  const Eigen::VectorXd pooled = aggregator_.forward(params, frame_emb, tape ? &tape->aggregation : nullptr);
  return head_.forward(params, pooled, tape ? &tape->head : nullptr);
}

void VideoEncoder::backward(const ParamSet& params, const Tape& tape, const Embedding& grad_out,
                            ParamSet& grads) const {
  const Eigen::VectorXd dpooled = head_.backward(params, tape.head, grad_out, grads);
  const Eigen::MatrixXd dframes = aggregator_.backward(params, tape.aggregation, dpooled, grads);
  auto& gw = grads.at(weight_);
  auto& gb = grads.at(bias_);
  auto& gpos = grads.at(position_);
  const int pd = config_.patch_dim;
  for (std::size_t f = 0; f < tape.patches.size(); ++f) {
    const auto& h = tape.activations[f];
    Eigen::MatrixXd da = (1.0 - h.array().square()).matrix();
    const auto df = dframes.col(static_cast<Eigen::Index>(f));
    for (int n = 0; n < num_patches(); ++n) {
      da.col(n).array() *= (df.head(pd) * frame_weight_ +
                            df.segment(cell_[static_cast<std::size_t>(n)] * pd, pd) * cell_weight_).array();
    }
    gw.noalias() += da * tape.patches[f].transpose();
    gb += da.rowwise().sum();
    gpos += da;
  }
}

// ---------------------------------------------------------------------------

void TextEncoderConfig::validate() const {
  if (slots < 1 || token_dim < 1 || hidden < 1 || embed_dim < 1) {
    throw ConfigError("text encoder dimensions must be positive");
  }
}

void TextEncoderConfig::write_metadata(ParamSet& params, const std::string& prefix) const {
  auto& m = params.metadata;
  m[prefix + ".slots"] = std::to_string(slots);
  m[prefix + ".token_dim"] = std::to_string(token_dim);
  m[prefix + ".hidden"] = std::to_string(hidden);
  m[prefix + ".embed_dim"] = std::to_string(embed_dim);
}

TextEncoderConfig TextEncoderConfig::read_metadata(const ParamSet& params, const std::string& prefix) {
  TextEncoderConfig c;
  c.slots = params.meta_int(prefix + ".slots");
  c.token_dim = params.meta_int(prefix + ".token_dim");
  c.hidden = params.meta_int(prefix + ".hidden");
  c.embed_dim = params.meta_int(prefix + ".embed_dim");
  return c;
}

TextEncoder::TextEncoder(TextEncoderConfig config, std::string prefix)
    : config_(config),
      table_(prefix + ".token.table"),
      head_(prefix + ".mlp", config.token_dim, config.hidden, config.embed_dim) {
  config_.validate();
}

int TextEncoder::slot_of(std::string_view token) const {
  return static_cast<int>(fnv1a64(token) % static_cast<std::uint64_t>(config_.slots));
}

void TextEncoder::init(ParamSet& params, Rng& rng) const {
  // Each slot is looked up on its own, so the table is initialised as if fan_in were 1.
  init_uniform(params.add(table_, config_.slots, config_.token_dim), 1, 1, rng);
  head_.init(params, rng);
}

void TextEncoder::check_params(const ParamSet& params) const {
  expect_shape(params, table_, config_.slots, config_.token_dim);
  head_.check_params(params);
}

Embedding TextEncoder::encode(const ParamSet& params, std::string_view text) const {
  return forward(params, text, nullptr);
}

Embedding TextEncoder::forward(const ParamSet& params, std::string_view text, Tape* tape) const {
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw ValidationError("label text '" + std::string(text) + "' has no tokens");
  const auto& table = params.at(table_);
  std::vector<int> slots;
  slots.reserve(tokens.size());
  for (const auto& tok : tokens) slots.push_back(slot_of(tok));
  // Summing in slot order makes the result bit-identical under token permutation.
  std::sort(slots.begin(), slots.end());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(config_.token_dim);
  for (int s : slots) mean += table.row(s).transpose();
  mean /= static_cast<double>(tokens.size());
  if (tape) tape->slots = std::move(slots);
  return head_.forward(params, mean, tape ? &tape->head : nullptr);
}

void TextEncoder::backward(const ParamSet& params, const Tape& tape, const Embedding& grad_out,
                           ParamSet& grads) const {
  const Eigen::VectorXd dmean = head_.backward(params, tape.head, grad_out, grads);
  auto& gtable = grads.at(table_);
  const double inv = 1.0 / static_cast<double>(tape.slots.size());
  for (int s : tape.slots) gtable.row(s) += (dmean * inv).transpose();
}

}  // namespace scvlm
