#pragma once

// Conflict-type classification by matching video embeddings against the
// embeddings of the label texts. Logits are cosine similarities divided by a
// learned temperature; training minimises a symmetric video->text / text->video
// objective over the full trainable label set.

#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "scvlm/clips.hpp"
#include "scvlm/encoders.hpp"
#include "scvlm/params.hpp"
#include "scvlm/training.hpp"

namespace scvlm {

inline constexpr const char* kLogTau = "contrastive.log_tau";  // 1 x 1
inline constexpr double kInitialTau = 0.07;
inline constexpr double kMinTau = 0.01;
inline constexpr double kMaxTau = 1.0;

class ContrastiveModel {
 public:
  ContrastiveModel(const VideoEncoderConfig& video, const TextEncoderConfig& text, std::uint64_t seed,
                   double initial_tau = kInitialTau);
  // Throws CompatibilityError if the parameters do not describe a contrastive model.
  explicit ContrastiveModel(ParamSet params);

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const VideoEncoder& video_encoder() const { return video_; }
  const TextEncoder& text_encoder() const { return text_; }

  // exp(log_tau) clamped to [kMinTau, kMaxTau].
  double tau() const;
  void clamp_tau();

  int epoch() const;
  double best_val_accuracy() const;
  void set_training_metadata(int epoch, double best_val_accuracy);

 private:
  ParamSet params_;
  VideoEncoder video_;
  TextEncoder text_;
};

// v.t / (|v||t|); throws ValidationError when either vector has zero norm.
double cosine_similarity(const Embedding& v, const Embedding& t);

struct SimilarityMatrix {
  Eigen::MatrixXd cosine;  // B x M, entries in [-1, 1]
  double tau = 1.0;
  Eigen::MatrixXd logits() const { return cosine / tau; }
};

// Rows of `a` against rows of `b`.
Eigen::MatrixXd cosine_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

SimilarityMatrix similarity_logits(const ContrastiveModel& model, std::span<const FrameSequence> videos,
                                   std::span<const int> label_ids);

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& m);

enum class MatchDirection { VideoToText, TextToVideo };

// VideoToText: B x M one-hot rows. TextToVideo: M x B rows normalised over the
// videos sharing that label; labels with no video in the batch get an all-zero row.
Eigen::MatrixXd build_targets(std::span<const int> batch_labels, std::span<const int> label_ids,
                              MatchDirection direction);

struct ContrastiveLoss {
  double total = 0.0;
  double video_to_text = 0.0;  // mean cross-entropy over videos
  double text_to_video = 0.0;  // mean KL over labels present in the batch
  Eigen::MatrixXd grad_logits;  // d(total)/d(logits), B x M
};

// `logits` is B x M with the temperature already applied; column j scores label_ids[j].
ContrastiveLoss contrastive_loss(const Eigen::MatrixXd& logits, std::span<const int> batch_labels,
                                 std::span<const int> label_ids);

// Label embeddings, L2-normalised, one row per trainable vocabulary entry.
struct LabelBank {
  std::vector<int> ids;
  Eigen::MatrixXd normalized;
};

LabelBank encode_labels(const ContrastiveModel& model, const LabelVocabulary& vocabulary);

struct ConflictPrediction {
  int label_id = 0;
  std::vector<std::pair<int, double>> ranked;  // (vocabulary id, cosine), descending, ties by id
};

ConflictPrediction infer_conflict_type(const ContrastiveModel& model, const LabelBank& bank,
                                       const FrameSequence& seq);
ConflictPrediction infer_conflict_type(const ContrastiveModel& model, const FrameSequence& seq,
                                       const LabelVocabulary& vocabulary);

// Ranking rule shared by inference and evaluation.
ConflictPrediction rank_labels(std::span<const int> ids, const Eigen::VectorXd& scores);

struct ContrastiveTrainConfig {
  TrainConfig train;
  VideoEncoderConfig video;
  TextEncoderConfig text;
  double initial_tau = kInitialTau;
};

struct ContrastiveResult {
  ContrastiveModel model;
  TrainingOutcome outcome;
};

// Batch objective against every trainable label; gradients accumulate into `grads`
// (which must hold every array of the model) when non-null.
ContrastiveLoss contrastive_batch_loss(const ContrastiveModel& model, std::span<const Clip> clips,
                                       std::span<const std::size_t> batch, ParamSet* grads,
                                       int threads = 0);

// Top-1 accuracy of infer_conflict_type over clips carrying a conflict type.
double conflict_accuracy(const ContrastiveModel& model, std::span<const Clip> clips, int threads = 0);

ContrastiveResult train_contrastive(const ContrastiveTrainConfig& config, std::span<const Clip> train,
                                    std::span<const Clip> val);

}  // namespace scvlm
