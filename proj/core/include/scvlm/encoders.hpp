#pragma once

// Reference video and text encoders with hand-written reverse-mode gradients.
//
// Video: sample F frames -> split each frame into non-overlapping patches ->
// per-patch affine projection plus a learned per-position bias, tanh ->
// two-level spatial pyramid: the mean over all patches followed by the means
// over square cells of pool x pool patches (pool 1 keeps every patch) ->
// temporal aggregation (mean or gated recurrent) ->
// two-layer tanh perceptron to the embedding dimension.
//
// Text: canonical tokens hashed into a fixed number of slots -> mean of the
// slot vectors -> two-layer tanh perceptron. Token order is ignored.
//
// All parameters live in a ParamSet under a name prefix ("video.", "text.")
// so one checkpoint can hold several encoders plus task heads.

#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "scvlm/data_model.hpp"
#include "scvlm/params.hpp"

namespace scvlm {

using Embedding = Eigen::VectorXd;

// Indices floor((i + 0.5) * total / count), i = 0 .. count-1.
std::vector<int> sample_frame_indices(int total, int count);
FrameSequence sample_frames(const FrameSequence& seq, int count);

class TwoLayerPerceptron {
 public:
  TwoLayerPerceptron(std::string prefix, int in, int hidden, int out);

  struct Tape {
    Eigen::VectorXd input;
    Eigen::VectorXd hidden;  // post-tanh
  };

  void init(ParamSet& params, Rng& rng) const;
  void check_params(const ParamSet& params) const;
  Eigen::VectorXd forward(const ParamSet& params, const Eigen::VectorXd& x, Tape* tape) const;
  // Accumulates parameter gradients into `grads` and returns d(loss)/d(input).
  Eigen::VectorXd backward(const ParamSet& params, const Tape& tape, const Eigen::VectorXd& grad_out,
                           ParamSet& grads) const;

  int in() const { return in_; }
  int out() const { return out_; }

 private:
  std::string w1_, b1_, w2_, b2_;
  int in_, hidden_, out_;
};

enum class Aggregation { Mean, Recurrent };

std::string_view aggregation_name(Aggregation a);
Aggregation parse_aggregation(std::string_view name);

// Collapses F frame embeddings (columns of a D x F matrix) into one vector.
class FrameAggregator {
 public:
  FrameAggregator(std::string prefix, Aggregation mode, int dim);

  struct Step {
    Eigen::VectorXd h_prev, z, r, n;
  };
  struct Tape {
    Eigen::MatrixXd input;
    std::vector<Step> steps;
  };

  Aggregation mode() const { return mode_; }
  void init(ParamSet& params, Rng& rng) const;  // no parameters in mean mode
  Eigen::VectorXd forward(const ParamSet& params, const Eigen::MatrixXd& frames, Tape* tape) const;
  Eigen::MatrixXd backward(const ParamSet& params, const Tape& tape, const Eigen::VectorXd& grad_out,
                           ParamSet& grads) const;

 private:
  std::string prefix_;
  Aggregation mode_;
  int dim_;
};

// Convenience wrapper: parameter-free mean, or a recurrent pass with `params`.
Eigen::VectorXd aggregate_frames(const Eigen::MatrixXd& frame_embeddings, Aggregation mode,
                                 const ParamSet* params = nullptr,
                                 const std::string& prefix = "video.gru");

struct VideoEncoderConfig {
  int height = 64;
  int width = 64;
  int patch = 8;
  int frames = 8;
  int patch_dim = 32;
  int pool = 2;
  int hidden = 64;
  int embed_dim = 128;
  Aggregation aggregation = Aggregation::Mean;

  void validate() const;
  // Pyramid cells per frame: the whole frame plus the pool x pool cells.
  int cells() const { return 1 + (height / patch / pool) * (width / patch / pool); }
  int frame_dim() const { return patch_dim * cells(); }
  void write_metadata(ParamSet& params, const std::string& prefix) const;
  static VideoEncoderConfig read_metadata(const ParamSet& params, const std::string& prefix);
  friend bool operator==(const VideoEncoderConfig&, const VideoEncoderConfig&) = default;
};

class VideoEncoder {
 public:
  explicit VideoEncoder(VideoEncoderConfig config, std::string prefix = "video");

  struct Tape {
    std::vector<Eigen::MatrixXd> patches;      // per frame: patch_len x num_patches
    std::vector<Eigen::MatrixXd> activations;  // per frame: patch_dim x num_patches (post-tanh)
    FrameAggregator::Tape aggregation;
    TwoLayerPerceptron::Tape head;
  };

  const VideoEncoderConfig& config() const { return config_; }
  int num_patches() const { return (config_.height / config_.patch) * (config_.width / config_.patch); }
  int patch_len() const { return config_.patch * config_.patch * 3; }
  // Fine pyramid cell (1-based, row-major) of every patch; cell 0 is the whole frame.
  const std::vector<int>& cell_of_patch() const { return cell_; }

  void init(ParamSet& params, Rng& rng) const;
  // Throws CompatibilityError when the clip geometry differs from the encoder's.
  void check_geometry(const FrameSequence& seq) const;
  // Checks that every parameter exists with the expected shape.
  void check_params(const ParamSet& params) const;

  Embedding encode(const ParamSet& params, const FrameSequence& seq) const;
  Embedding forward(const ParamSet& params, const FrameSequence& seq, Tape* tape) const;
  void backward(const ParamSet& params, const Tape& tape, const Embedding& grad_out,
                ParamSet& grads) const;

 private:
  Eigen::MatrixXd patch_matrix(const FrameSequence& seq, int frame) const;

  VideoEncoderConfig config_;
  std::string prefix_;
  std::string weight_, bias_, position_;
  std::vector<int> cell_;
  double cell_weight_ = 1.0;   // 1 / patches per fine cell
  double frame_weight_ = 1.0;  // 1 / patches per frame
  FrameAggregator aggregator_;
  TwoLayerPerceptron head_;
};

struct TextEncoderConfig {
  int slots = 4096;
  int token_dim = 64;
  int hidden = 64;
  int embed_dim = 128;

  void validate() const;
  void write_metadata(ParamSet& params, const std::string& prefix) const;
  static TextEncoderConfig read_metadata(const ParamSet& params, const std::string& prefix);
  friend bool operator==(const TextEncoderConfig&, const TextEncoderConfig&) = default;
};

class TextEncoder {
 public:
  explicit TextEncoder(TextEncoderConfig config, std::string prefix = "text");

  struct Tape {
    std::vector<int> slots;
    TwoLayerPerceptron::Tape head;
  };

  const TextEncoderConfig& config() const { return config_; }
  int slot_of(std::string_view token) const;

  void init(ParamSet& params, Rng& rng) const;
  void check_params(const ParamSet& params) const;
  Embedding encode(const ParamSet& params, std::string_view text) const;
  Embedding forward(const ParamSet& params, std::string_view text, Tape* tape) const;
  void backward(const ParamSet& params, const Tape& tape, const Embedding& grad_out,
                ParamSet& grads) const;

 private:
  TextEncoderConfig config_;
  std::string table_;
  TwoLayerPerceptron head_;
};

}  // namespace scvlm
