#include "scvlm/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "scvlm/errors.hpp"
#include "scvlm/random.hpp"

namespace scvlm {

namespace {

constexpr const char* kKindKey = "model.kind";
constexpr const char* kKind = "contrastive";
constexpr const char* kEpochKey = "train.epoch";
constexpr const char* kBestKey = "train.best_val_accuracy";

const ParamSet& checked(const ParamSet& params) {
  if (!params.metadata.contains(kKindKey) || params.meta(kKindKey) != kKind) {
    throw CompatibilityError("checkpoint does not hold a conflict-type matcher");
  }
  return params;
}

double norm_or_throw(const Eigen::VectorXd& v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw ValidationError("cosine similarity of a zero-norm embedding");
  return n;
}

int column_of(std::span<const int> label_ids, int label) {
  const auto it = std::find(label_ids.begin(), label_ids.end(), label);
  if (it == label_ids.end()) {
    throw ValidationError("label " + std::to_string(label) + " is not in the matched label set");
  }
  return static_cast<int>(it - label_ids.begin());
}

int checked_conflict(const Clip& clip) {
  if (!clip.conflict_type || !LabelVocabulary::standard().is_trainable(*clip.conflict_type)) {
    throw ValidationError("event '" + clip.event_id + "' has no trainable conflict type");
  }
  return *clip.conflict_type;
}

// Gradient of u = x / |x| pulled back to x.
Eigen::VectorXd normalize_backward(const Eigen::VectorXd& u, double norm, const Eigen::VectorXd& du) {
  return (du - du.dot(u) * u) / norm;
}

}  // namespace

ContrastiveModel::ContrastiveModel(const VideoEncoderConfig& video, const TextEncoderConfig& text,
                                   std::uint64_t seed, double initial_tau)
    : video_(video, "video"), text_(text, "text") {
  if (video.embed_dim != text.embed_dim) {
    throw ConfigError("video and text encoders must share the embedding dimension");
  }
  if (!(initial_tau >= kMinTau && initial_tau <= kMaxTau)) {
    throw ConfigError("initial temperature must lie in [0.01, 1]");
  }
  params_.seed = seed;
  Rng rng(mix_seed(seed, "contrastive.init"));
  video_.init(params_, rng);
  text_.init(params_, rng);
  params_.add(kLogTau, 1, 1)(0, 0) = std::log(initial_tau);
  video.write_metadata(params_, "video");
  text.write_metadata(params_, "text");
  params_.metadata[kKindKey] = kKind;
  set_training_metadata(0, 0.0);
}

ContrastiveModel::ContrastiveModel(ParamSet params)
    : params_(std::move(params)),
      video_(VideoEncoderConfig::read_metadata(checked(params_), "video"), "video"),
      text_(TextEncoderConfig::read_metadata(params_, "text"), "text") {
  video_.check_params(params_);
  text_.check_params(params_);
  if (video_.config().embed_dim != text_.config().embed_dim) {
    throw CompatibilityError("video and text embedding dimensions differ");
  }
  const auto& lt = params_.at(kLogTau);
  if (lt.rows() != 1 || lt.cols() != 1 || !std::isfinite(lt(0, 0))) {
    throw CompatibilityError("temperature parameter is malformed");
  }
}

double ContrastiveModel::tau() const {
  return std::clamp(std::exp(params_.at(kLogTau)(0, 0)), kMinTau, kMaxTau);
}

void ContrastiveModel::clamp_tau() {
  double& lt = params_.at(kLogTau)(0, 0);
  lt = std::clamp(lt, std::log(kMinTau), std::log(kMaxTau));
}

int ContrastiveModel::epoch() const { return params_.meta_int(kEpochKey); }
double ContrastiveModel::best_val_accuracy() const { return params_.meta_double(kBestKey); }

void ContrastiveModel::set_training_metadata(int epoch, double best_val_accuracy) {
  params_.metadata[kEpochKey] = std::to_string(epoch);
  params_.metadata[kBestKey] = std::to_string(best_val_accuracy);
}

double cosine_similarity(const Embedding& v, const Embedding& t) {
  if (v.size() != t.size()) throw ValidationError("cosine similarity of vectors with different sizes");
  const double c = v.dot(t) / (norm_or_throw(v) * norm_or_throw(t));
  return std::clamp(c, -1.0, 1.0);
}

Eigen::MatrixXd cosine_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw ValidationError("cosine matrix of embeddings with different sizes");
  Eigen::MatrixXd out(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      out(i, j) = cosine_similarity(a.row(i).transpose(), b.row(j).transpose());
    }
  }
  return out;
}

SimilarityMatrix similarity_logits(const ContrastiveModel& model, std::span<const FrameSequence> videos,
                                   std::span<const int> label_ids) {
  if (videos.empty() || label_ids.empty()) throw ValidationError("similarity needs videos and labels");
  const auto& vocab = LabelVocabulary::standard();
  const int d = model.video_encoder().config().embed_dim;
  Eigen::MatrixXd v(static_cast<Eigen::Index>(videos.size()), d);
  Eigen::MatrixXd t(static_cast<Eigen::Index>(label_ids.size()), d);
  for (std::size_t i = 0; i < videos.size(); ++i) {
    v.row(static_cast<Eigen::Index>(i)) = model.video_encoder().encode(model.params(), videos[i]).transpose();
  }
  for (std::size_t j = 0; j < label_ids.size(); ++j) {
    t.row(static_cast<Eigen::Index>(j)) =
        model.text_encoder().encode(model.params(), vocab.text(label_ids[j])).transpose();
  }
  return {cosine_matrix(v, t), model.tau()};
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& m) {
  if (!m.allFinite()) throw NumericError("softmax of non-finite values");
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const Eigen::ArrayXd e = (m.row(i).array() - m.row(i).maxCoeff()).exp();
    out.row(i) = (e / e.sum()).matrix().transpose();
  }
  return out;
}

Eigen::MatrixXd build_targets(std::span<const int> batch_labels, std::span<const int> label_ids,
                              MatchDirection direction) {
  const auto b = static_cast<Eigen::Index>(batch_labels.size());
  const auto m = static_cast<Eigen::Index>(label_ids.size());
  Eigen::MatrixXd v2t = Eigen::MatrixXd::Zero(b, m);
  for (Eigen::Index i = 0; i < b; ++i) v2t(i, column_of(label_ids, batch_labels[static_cast<std::size_t>(i)])) = 1.0;
  if (direction == MatchDirection::VideoToText) return v2t;
  Eigen::MatrixXd t2v = v2t.transpose();
  for (Eigen::Index j = 0; j < m; ++j) {
    const double count = t2v.row(j).sum();
    if (count > 0.0) t2v.row(j) /= count;
  }
  return t2v;
}

ContrastiveLoss contrastive_loss(const Eigen::MatrixXd& logits, std::span<const int> batch_labels,
                                 std::span<const int> label_ids) {
  const auto b = logits.rows();
  if (b == 0 || static_cast<std::size_t>(b) != batch_labels.size() ||
      static_cast<std::size_t>(logits.cols()) != label_ids.size()) {
    throw ValidationError("logit shape does not match the batch and label set");
  }
  if (!logits.allFinite()) throw NumericError("non-finite logits");

  ContrastiveLoss out;
  out.grad_logits = Eigen::MatrixXd::Zero(b, logits.cols());

  const Eigen::MatrixXd q_vt = build_targets(batch_labels, label_ids, MatchDirection::VideoToText);
  const Eigen::MatrixXd p_vt = softmax_rows(logits);
  for (Eigen::Index i = 0; i < b; ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.video_to_text += lse - logits.row(i).dot(q_vt.row(i));
  }
  out.video_to_text /= static_cast<double>(b);
  out.grad_logits += 0.5 * (p_vt - q_vt) / static_cast<double>(b);

  const Eigen::MatrixXd lt = logits.transpose();
  const Eigen::MatrixXd q_tv = build_targets(batch_labels, label_ids, MatchDirection::TextToVideo);
  const Eigen::MatrixXd p_tv = softmax_rows(lt);
  std::vector<Eigen::Index> kept;
  for (Eigen::Index j = 0; j < lt.rows(); ++j) {
    if (q_tv.row(j).sum() > 0.0) kept.push_back(j);
  }
  const auto r = static_cast<double>(kept.size());
  for (Eigen::Index j : kept) {
    const double m = lt.row(j).maxCoeff();
    const double lse = m + std::log((lt.row(j).array() - m).exp().sum());
    double kl = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
      const double q = q_tv(j, i);
      if (q > 0.0) kl += q * (std::log(q) - (lt(j, i) - lse));
    }
    out.text_to_video += kl;
    out.grad_logits.col(j) += 0.5 * (p_tv.row(j) - q_tv.row(j)).transpose() / r;
  }
  out.text_to_video /= r;
  out.total = 0.5 * (out.video_to_text + out.text_to_video);
  return out;
}

LabelBank encode_labels(const ContrastiveModel& model, const LabelVocabulary& vocabulary) {
  LabelBank bank;
  bank.ids = vocabulary.trainable_ids();
  if (bank.ids.empty()) throw ValidationError("no trainable labels to match against");
  bank.normalized.resize(static_cast<Eigen::Index>(bank.ids.size()), model.text_encoder().config().embed_dim);
  for (std::size_t j = 0; j < bank.ids.size(); ++j) {
    const Embedding t = model.text_encoder().encode(model.params(), vocabulary.text(bank.ids[j]));
    bank.normalized.row(static_cast<Eigen::Index>(j)) = (t / norm_or_throw(t)).transpose();
  }
  return bank;
}

ConflictPrediction rank_labels(std::span<const int> ids, const Eigen::VectorXd& scores) {
  if (ids.empty() || static_cast<std::size_t>(scores.size()) != ids.size()) {
    throw ValidationError("label ranking needs one score per label");
  }
  ConflictPrediction out;
  for (std::size_t j = 0; j < ids.size(); ++j) out.ranked.emplace_back(ids[j], scores[static_cast<Eigen::Index>(j)]);
  std::sort(out.ranked.begin(), out.ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  out.label_id = out.ranked.front().first;
  return out;
}

ConflictPrediction infer_conflict_type(const ContrastiveModel& model, const LabelBank& bank,
                                       const FrameSequence& seq) {
  const Embedding v = model.video_encoder().encode(model.params(), seq);
  const Eigen::VectorXd u = v / norm_or_throw(v);
  const Eigen::VectorXd scores = (bank.normalized * u).cwiseMax(-1.0).cwiseMin(1.0);
  return rank_labels(bank.ids, scores);
}

ConflictPrediction infer_conflict_type(const ContrastiveModel& model, const FrameSequence& seq,
                                       const LabelVocabulary& vocabulary) {
  return infer_conflict_type(model, encode_labels(model, vocabulary), seq);
}

ContrastiveLoss contrastive_batch_loss(const ContrastiveModel& model, std::span<const Clip> clips,
                                       std::span<const std::size_t> batch, ParamSet* grads, int threads) {
  const auto& vocab = LabelVocabulary::standard();
  const ParamSet& p = model.params();
  const std::vector<int> ids = vocab.trainable_ids();
  const int d = model.video_encoder().config().embed_dim;
  const auto b = static_cast<Eigen::Index>(batch.size());
  const auto m = static_cast<Eigen::Index>(ids.size());

  std::vector<int> labels(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) labels[k] = checked_conflict(clips[batch[k]]);

  std::vector<VideoEncoder::Tape> vtapes(grads ? batch.size() : 0);
  Eigen::MatrixXd v(b, d);
  parallel_for(batch.size(), threads, [&](std::size_t k) {
    v.row(static_cast<Eigen::Index>(k)) =
        model.video_encoder().forward(p, clips[batch[k]].frames, grads ? &vtapes[k] : nullptr).transpose();
  });
  std::vector<TextEncoder::Tape> ttapes(grads ? ids.size() : 0);
  Eigen::MatrixXd t(m, d);
  for (std::size_t j = 0; j < ids.size(); ++j) {
    t.row(static_cast<Eigen::Index>(j)) =
        model.text_encoder().forward(p, vocab.text(ids[j]), grads ? &ttapes[j] : nullptr).transpose();
  }

  Eigen::VectorXd vn(b), tn(m);
  Eigen::MatrixXd u(b, d), w(m, d);
  for (Eigen::Index i = 0; i < b; ++i) {
    vn[i] = norm_or_throw(v.row(i).transpose());
    u.row(i) = v.row(i) / vn[i];
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    tn[j] = norm_or_throw(t.row(j).transpose());
    w.row(j) = t.row(j) / tn[j];
  }
  const Eigen::MatrixXd cosine = u * w.transpose();
  const double log_tau = p.at(kLogTau)(0, 0);
  const double tau = model.tau();
  const Eigen::MatrixXd logits = cosine / tau;
  ContrastiveLoss loss = contrastive_loss(logits, labels, ids);
  if (!grads) return loss;

  const Eigen::MatrixXd& g = loss.grad_logits;
  if (std::exp(log_tau) >= kMinTau && std::exp(log_tau) <= kMaxTau) {
    grads->at(kLogTau)(0, 0) += -(g.array() * logits.array()).sum();
  }
  const Eigen::MatrixXd dcos = g / tau;
  const Eigen::MatrixXd du = dcos * w;
  const Eigen::MatrixXd dw = dcos.transpose() * u;

  std::vector<ParamSet> partial(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t k) {
    const auto i = static_cast<Eigen::Index>(k);
    partial[k] = grads->zeros_like("video.");
    const Eigen::VectorXd dv = normalize_backward(u.row(i).transpose(), vn[i], du.row(i).transpose());
    model.video_encoder().backward(p, vtapes[k], dv, partial[k]);
  });
  for (const ParamSet& pg : partial) grads->add_scaled(pg, 1.0);
  for (std::size_t j = 0; j < ids.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    const Eigen::VectorXd dt = normalize_backward(w.row(jj).transpose(), tn[jj], dw.row(jj).transpose());
    model.text_encoder().backward(p, ttapes[j], dt, *grads);
  }
  return loss;
}

double conflict_accuracy(const ContrastiveModel& model, std::span<const Clip> clips, int threads) {
  if (clips.empty()) throw ValidationError("accuracy over an empty split");
  const LabelBank bank = encode_labels(model, LabelVocabulary::standard());
  std::vector<char> hit(clips.size());
  parallel_for(clips.size(), threads, [&](std::size_t i) {
    hit[i] = infer_conflict_type(model, bank, clips[i].frames).label_id == checked_conflict(clips[i]);
  });
  return static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) / static_cast<double>(clips.size());
}

ContrastiveResult train_contrastive(const ContrastiveTrainConfig& config, std::span<const Clip> train,
                                    std::span<const Clip> val) {
  if (train.empty() || val.empty()) throw ValidationError("training and validation splits must be non-empty");
  for (const Clip& c : train) checked_conflict(c);
  for (const Clip& c : val) checked_conflict(c);

  ContrastiveModel model(config.video, config.text, config.train.seed, config.initial_tau);
  ParamSet best = model.params();
  ParamSet grads = model.params().zeros_like();
  const int threads = config.train.threads;

  TrainingHooks hooks;
  hooks.step = [&](std::span<const std::size_t> batch, int epoch, int batch_index) {
    grads.set_zero();
    const ContrastiveLoss loss = contrastive_batch_loss(model, train, batch, &grads, threads);
    if (!std::isfinite(loss.total) || !grads.all_finite()) {
      throw NumericError("non-finite contrastive loss or gradient at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batch_index) + " (loss = " + std::to_string(loss.total) +
                         ", tau = " + std::to_string(model.tau()) + ")");
    }
    model.params().add_scaled(grads, -config.train.learning_rate);
    model.clamp_tau();
    return loss.total;
  };
  hooks.validate = [&] { return conflict_accuracy(model, val, threads); };
  hooks.on_best = [&](int) { best = model.params(); };

  TrainingOutcome outcome = run_minibatch_training(train.size(), config.train, hooks);
  model.params() = std::move(best);
  model.set_training_metadata(outcome.best_epoch, outcome.best_val_accuracy);
  return {std::move(model), std::move(outcome)};
}

}  // namespace scvlm
