#pragma once

// Event-type classification: video encoder followed by an affine head onto
// the four event types, trained with cross-entropy.

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "scvlm/clips.hpp"
#include "scvlm/encoders.hpp"
#include "scvlm/params.hpp"
#include "scvlm/training.hpp"

namespace scvlm {

// Scores aligned with EventType order.
using ScoreVector = Eigen::Vector4d;

inline constexpr const char* kClassifierWeight = "classifier.weight";  // 4 x D
inline constexpr const char* kClassifierBias = "classifier.bias";      // 4 x 1

class SupervisedModel {
 public:
  // Fresh model with seeded initialisation.
  SupervisedModel(const VideoEncoderConfig& config, std::uint64_t seed);
  // Wraps loaded parameters; throws CompatibilityError if they do not describe a supervised model.
  explicit SupervisedModel(ParamSet params);

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const VideoEncoder& encoder() const { return encoder_; }

  int epoch() const;
  double best_val_accuracy() const;
  void set_training_metadata(int epoch, double best_val_accuracy);

 private:
  ParamSet params_;
  VideoEncoder encoder_;
};

// Affine map W e + b with W stored as rows of `weight`.
ScoreVector classifier_scores(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& bias,
                              const Embedding& embedding);

ScoreVector forward_scores(const SupervisedModel& model, const FrameSequence& seq);

Eigen::VectorXd softmax(const Eigen::VectorXd& scores);
double cross_entropy(const Eigen::VectorXd& scores, int label);
double cross_entropy(const ScoreVector& scores, EventType label);
// d(cross_entropy)/d(scores) = softmax(scores) - onehot(label).
Eigen::VectorXd cross_entropy_grad(const Eigen::VectorXd& scores, int label);

// Index of the largest entry; ties resolve to the lowest index.
int argmax_lowest(const Eigen::VectorXd& scores);
EventType predict_event_type(const ScoreVector& scores);
EventType predict_event_type(const SupervisedModel& model, const FrameSequence& seq);

struct SupervisedTrainConfig {
  TrainConfig train;
  VideoEncoderConfig encoder;
  bool freeze_encoder = false;
};

struct SupervisedResult {
  SupervisedModel model;
  TrainingOutcome outcome;
};

// Mean batch cross-entropy over `batch` and its gradient (accumulated into `grads`).
double supervised_batch_loss(const SupervisedModel& model, std::span<const Clip> clips,
                             std::span<const std::size_t> batch, ParamSet* grads, int threads = 0);

double event_accuracy(const SupervisedModel& model, std::span<const Clip> clips, int threads = 0);

SupervisedResult train_supervised(const SupervisedTrainConfig& config, std::span<const Clip> train,
                                  std::span<const Clip> val);

// Classifier head trained directly on fixed feature vectors, for frozen encoders.
struct LinearHead {
  Eigen::MatrixXd weight;  // classes x dim
  Eigen::MatrixXd bias;    // classes x 1
};

struct LinearHeadResult {
  LinearHead head;
  TrainingOutcome outcome;
};

LinearHeadResult train_linear_head(const TrainConfig& config, int classes,
                                   std::span<const Eigen::VectorXd> train_features,
                                   std::span<const int> train_labels,
                                   std::span<const Eigen::VectorXd> val_features,
                                   std::span<const int> val_labels);

}  // namespace scvlm
