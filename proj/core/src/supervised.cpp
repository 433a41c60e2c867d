#include "scvlm/supervised.hpp"

#include <cmath>
#include <string>

#include "scvlm/errors.hpp"
#include "scvlm/random.hpp"

namespace scvlm {

namespace {

constexpr const char* kKindKey = "model.kind";
constexpr const char* kKind = "supervised";
constexpr const char* kEpochKey = "train.epoch";
constexpr const char* kBestKey = "train.best_val_accuracy";

VideoEncoderConfig checked_config(const ParamSet& params) {
  if (!params.metadata.contains(kKindKey) || params.meta(kKindKey) != kKind) {
    throw CompatibilityError("checkpoint does not hold an event-type classifier");
  }
  return VideoEncoderConfig::read_metadata(params, "video");
}

struct HeadStep {
  double loss;
  Eigen::VectorXd grad_input;
};

// Cross-entropy of the affine head on one example; gradients scaled by `scale` are accumulated.
HeadStep head_step(const Eigen::MatrixXd& w, const Eigen::MatrixXd& b, const Eigen::VectorXd& x,
                   int label, double scale, Eigen::MatrixXd& gw, Eigen::MatrixXd& gb) {
  const Eigen::VectorXd scores = w * x + b.col(0);
  const double loss = cross_entropy(scores, label);
  const Eigen::VectorXd ds = cross_entropy_grad(scores, label) * scale;
  gw.noalias() += ds * x.transpose();
  gb.col(0) += ds;
  return {loss, w.transpose() * ds};
}

void check_finite_step(double loss, const ParamSet& grads, int epoch, int batch_index) {
  if (!std::isfinite(loss) || !grads.all_finite()) {
    throw NumericError("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch_index) + " (loss = " + std::to_string(loss) + ")");
  }
}

}  // namespace

SupervisedModel::SupervisedModel(const VideoEncoderConfig& config, std::uint64_t seed)
    : encoder_(config, "video") {
  params_.seed = seed;
  Rng rng(mix_seed(seed, "supervised.init"));
  encoder_.init(params_, rng);
  init_uniform(params_.add(kClassifierWeight, kNumEventTypes, config.embed_dim), config.embed_dim,
               kNumEventTypes, rng);
  params_.add(kClassifierBias, kNumEventTypes, 1);
  config.write_metadata(params_, "video");
  params_.metadata[kKindKey] = kKind;
  set_training_metadata(0, 0.0);
}

SupervisedModel::SupervisedModel(ParamSet params)
    : params_(std::move(params)), encoder_(checked_config(params_), "video") {
  encoder_.check_params(params_);
  const auto& w = params_.at(kClassifierWeight);
  const auto& b = params_.at(kClassifierBias);
  if (w.rows() != kNumEventTypes || w.cols() != encoder_.config().embed_dim || b.rows() != kNumEventTypes ||
      b.cols() != 1) {
    throw CompatibilityError("classifier shape does not match the video encoder output");
  }
}

int SupervisedModel::epoch() const { return params_.meta_int(kEpochKey); }
double SupervisedModel::best_val_accuracy() const { return params_.meta_double(kBestKey); }

void SupervisedModel::set_training_metadata(int epoch, double best_val_accuracy) {
  params_.metadata[kEpochKey] = std::to_string(epoch);
  params_.metadata[kBestKey] = std::to_string(best_val_accuracy);
}

ScoreVector classifier_scores(const Eigen::MatrixXd& weight, const Eigen::MatrixXd& bias,
                              const Embedding& embedding) {
  if (weight.rows() != kNumEventTypes || weight.cols() != embedding.size()) {
    throw ValidationError("classifier weight does not match the embedding dimension");
  }
  return weight * embedding + bias.col(0);
}

ScoreVector forward_scores(const SupervisedModel& model, const FrameSequence& seq) {
  const Embedding e = model.encoder().encode(model.params(), seq);
  return classifier_scores(model.params().at(kClassifierWeight), model.params().at(kClassifierBias), e);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& scores) {
  const Eigen::ArrayXd e = (scores.array() - scores.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

double cross_entropy(const Eigen::VectorXd& scores, int label) {
  if (label < 0 || label >= scores.size()) throw ValidationError("label index out of range");
  const double m = scores.maxCoeff();
  const double lse = m + std::log((scores.array() - m).exp().sum());
  return lse - scores[label];
}

double cross_entropy(const ScoreVector& scores, EventType label) {
  return cross_entropy(Eigen::VectorXd(scores), event_index(label));
}

Eigen::VectorXd cross_entropy_grad(const Eigen::VectorXd& scores, int label) {
  Eigen::VectorXd g = softmax(scores);
  g[label] -= 1.0;
  return g;
}

int argmax_lowest(const Eigen::VectorXd& scores) {
  if (scores.size() == 0) throw ValidationError("argmax of an empty vector");
  int best = 0;
  for (int i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

EventType predict_event_type(const ScoreVector& scores) {
  return event_type_from_index(argmax_lowest(scores));
}

EventType predict_event_type(const SupervisedModel& model, const FrameSequence& seq) {
  return predict_event_type(forward_scores(model, seq));
}

double supervised_batch_loss(const SupervisedModel& model, std::span<const Clip> clips,
                             std::span<const std::size_t> batch, ParamSet* grads, int threads) {
  const ParamSet& p = model.params();
  const auto& w = p.at(kClassifierWeight);
  const auto& b = p.at(kClassifierBias);
  const double scale = 1.0 / static_cast<double>(batch.size());
  std::vector<double> losses(batch.size());
  std::vector<ParamSet> partial(grads ? batch.size() : 0);

  parallel_for(batch.size(), threads, [&](std::size_t k) {
    const Clip& clip = clips[batch[k]];
    const int label = event_index(clip.event_type);
    VideoEncoder::Tape tape;
    const Embedding e = model.encoder().forward(p, clip.frames, grads ? &tape : nullptr);
    if (!grads) {
      losses[k] = cross_entropy(Eigen::VectorXd(classifier_scores(w, b, e)), label);
      return;
    }
    ParamSet& g = partial[k] = grads->zeros_like();
    const HeadStep hs = head_step(w, b, e, label, scale, g.at(kClassifierWeight), g.at(kClassifierBias));
    losses[k] = hs.loss;
    model.encoder().backward(p, tape, hs.grad_input, g);
  });

  double loss = 0.0;
  for (double l : losses) loss += l;
  if (grads) {
    for (const ParamSet& g : partial) grads->add_scaled(g, 1.0);
  }
  return loss * scale;
}

double event_accuracy(const SupervisedModel& model, std::span<const Clip> clips, int threads) {
  if (clips.empty()) throw ValidationError("accuracy over an empty split");
  std::vector<char> hit(clips.size());
  parallel_for(clips.size(), threads, [&](std::size_t i) {
    hit[i] = predict_event_type(model, clips[i].frames) == clips[i].event_type;
  });
  double n = 0;
  for (char h : hit) n += h;
  return n / static_cast<double>(clips.size());
}

SupervisedResult train_supervised(const SupervisedTrainConfig& config, std::span<const Clip> train,
                                  std::span<const Clip> val) {
  if (train.empty() || val.empty()) throw ValidationError("training and validation splits must be non-empty");
  SupervisedModel model(config.encoder, config.train.seed);
  ParamSet best = model.params();
  ParamSet grads = model.params().zeros_like();
  const double lr = config.train.learning_rate;
  const int threads = config.train.threads;

  // A frozen encoder yields fixed embeddings; compute them once.
  std::vector<Eigen::VectorXd> frozen;
  if (config.freeze_encoder) {
    frozen.resize(train.size());
    parallel_for(train.size(), threads, [&](std::size_t i) {
      frozen[i] = model.encoder().encode(model.params(), train[i].frames);
    });
  }

  TrainingHooks hooks;
  hooks.step = [&](std::span<const std::size_t> batch, int epoch, int batch_index) {
    grads.set_zero();
    double loss = 0.0;
    if (config.freeze_encoder) {
      const double scale = 1.0 / static_cast<double>(batch.size());
      const auto& w = model.params().at(kClassifierWeight);
      const auto& b = model.params().at(kClassifierBias);
      for (std::size_t i : batch) {
        loss += head_step(w, b, frozen[i], event_index(train[i].event_type), scale,
                          grads.at(kClassifierWeight), grads.at(kClassifierBias))
                    .loss;
      }
      loss *= scale;
    } else {
      loss = supervised_batch_loss(model, train, batch, &grads, threads);
    }
    check_finite_step(loss, grads, epoch, batch_index);
    model.params().add_scaled(grads, -lr);
    return loss;
  };
  hooks.validate = [&] { return event_accuracy(model, val, threads); };
  hooks.on_best = [&](int) { best = model.params(); };

  TrainingOutcome outcome = run_minibatch_training(train.size(), config.train, hooks);
  model.params() = std::move(best);
  model.set_training_metadata(outcome.best_epoch, outcome.best_val_accuracy);
  return {std::move(model), std::move(outcome)};
}

LinearHeadResult train_linear_head(const TrainConfig& config, int classes,
                                   std::span<const Eigen::VectorXd> train_features,
                                   std::span<const int> train_labels,
                                   std::span<const Eigen::VectorXd> val_features,
                                   std::span<const int> val_labels) {
  if (train_features.empty() || val_features.empty()) {
    throw ValidationError("training and validation splits must be non-empty");
  }
  if (train_features.size() != train_labels.size() || val_features.size() != val_labels.size()) {
    throw ValidationError("feature and label counts differ");
  }
  if (classes < 2) throw ValidationError("a classifier needs at least two classes");
  const auto dim = train_features.front().size();

  ParamSet params;
  Rng rng(mix_seed(config.seed, "linear_head.init"));
  init_uniform(params.add("weight", classes, dim), static_cast<int>(dim), classes, rng);
  params.add("bias", classes, 1);
  ParamSet grads = params.zeros_like();
  ParamSet best = params;

  TrainingHooks hooks;
  hooks.step = [&](std::span<const std::size_t> batch, int epoch, int batch_index) {
    grads.set_zero();
    const double scale = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t i : batch) {
      loss += head_step(params.at("weight"), params.at("bias"), train_features[i], train_labels[i], scale,
                        grads.at("weight"), grads.at("bias"))
                  .loss;
    }
    loss *= scale;
    check_finite_step(loss, grads, epoch, batch_index);
    params.add_scaled(grads, -config.learning_rate);
    return loss;
  };
  hooks.validate = [&] {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < val_features.size(); ++i) {
      const Eigen::VectorXd s = params.at("weight") * val_features[i] + params.at("bias").col(0);
      hit += argmax_lowest(s) == val_labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(val_features.size());
  };
  hooks.on_best = [&](int) { best = params; };

  TrainingOutcome outcome = run_minibatch_training(train_features.size(), config, hooks);
  return {LinearHead{best.at("weight"), best.at("bias")}, std::move(outcome)};
}

}  // namespace scvlm
