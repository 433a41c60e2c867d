#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scvlm/contrastive.hpp"
#include "scvlm/errors.hpp"
#include "scvlm/synthgen.hpp"

namespace scvlm {
namespace {

VideoEncoderConfig small_video(Aggregation agg = Aggregation::Mean) {
  VideoEncoderConfig c;
  c.height = 32;
  c.width = 32;
  c.frames = 3;
  c.patch_dim = 4;
  c.pool = 2;
  c.hidden = 6;
  c.embed_dim = 5;
  c.aggregation = agg;
  return c;
}

TextEncoderConfig small_text() {
  TextEncoderConfig c;
  c.slots = 64;
  c.token_dim = 4;
  c.hidden = 6;
  c.embed_dim = 5;
  return c;
}

std::vector<Clip> conflict_clips(int n, std::uint64_t seed) {
  std::vector<Clip> out;
  for (int i = 0; i < n; ++i) {
    synth::SceneSpec s;
    s.event_type = i % 2 ? EventType::Crash : EventType::NearCrash;
    s.conflict_type = 1 + i % 3;
    s.seed = seed * 100 + static_cast<std::uint64_t>(i);
    s.height = 32;
    s.width = 32;
    s.num_frames = 9;
    out.push_back({"c" + std::to_string(i), sample_frames(synth::render_event(s), 3), s.event_type, s.conflict_type});
  }
  return out;
}

std::vector<double> as_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

TEST(Cosine, HandValues) {
  EXPECT_NEAR(cosine_similarity(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(1, 2, 3)), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 1)), 0.0);
  EXPECT_NEAR(cosine_similarity(Eigen::Vector2d(1, 2), Eigen::Vector2d(2, 1)), 0.8, 1e-15);
  EXPECT_THROW(cosine_similarity(Eigen::Vector2d(0, 0), Eigen::Vector2d(2, 1)), ValidationError);
}

TEST(Cosine, SymmetricBoundedAndMatchesOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    Eigen::MatrixXd a(3, 4), b(2, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform(-2, 2);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.uniform(-2, 2);
    const auto c = cosine_matrix(a, b);
    const auto ct = cosine_matrix(b, a);
    EXPECT_TRUE(c.isApprox(ct.transpose(), 1e-15));
    for (Eigen::Index i = 0; i < 3; ++i)
      for (Eigen::Index j = 0; j < 2; ++j) {
        EXPECT_LE(std::abs(c(i, j)), 1.0);
        EXPECT_NEAR(c(i, j), testing::cosine_oracle(as_vec(a.row(i).transpose()), as_vec(b.row(j).transpose())), 1e-12);
        EXPECT_DOUBLE_EQ(cosine_similarity(a.row(i).transpose(), b.row(j).transpose()),
                         cosine_similarity(b.row(j).transpose(), a.row(i).transpose()));
      }
  }
}

TEST(SimilarityLogits, TemperatureScalingAndOracle) {
  ContrastiveModel model(small_video(), small_text(), 3, 1.0);
  const auto clips = conflict_clips(2, 1);
  const std::vector<FrameSequence> videos = {clips[0].frames, clips[1].frames};
  const std::vector<int> labels = {1, 2};
  const auto s1 = similarity_logits(model, videos, labels);
  EXPECT_DOUBLE_EQ(s1.tau, 1.0);
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 2; ++j) {
      const auto v = model.video_encoder().encode(model.params(), videos[static_cast<std::size_t>(i)]);
      const auto t = model.text_encoder().encode(model.params(), LabelVocabulary::standard().text(labels[static_cast<std::size_t>(j)]));
      EXPECT_NEAR(s1.logits()(i, j), testing::cosine_oracle(as_vec(v), as_vec(t)), 1e-12);
    }
  model.params().at(kLogTau)(0, 0) = std::log(0.5);
  const auto s2 = similarity_logits(model, videos, labels);
  EXPECT_TRUE(s2.logits().isApprox(2.0 * s1.logits(), 1e-14));
  EXPECT_THROW(similarity_logits(model, {}, labels), ValidationError);
}

TEST(SoftmaxRows, HandValuesAndStability) {
  Eigen::MatrixXd m(3, 2);
  m << 0, 0, std::log(1.0), std::log(3.0), 1000, 0;
  const auto p = softmax_rows(m);
  EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(p(1, 0), 0.25, 1e-15);
  EXPECT_NEAR(p(1, 1), 0.75, 1e-15);
  EXPECT_NEAR(p(2, 0), 1.0, 1e-15);
  EXPECT_TRUE(p.allFinite());
  m(0, 0) = std::nan("");
  EXPECT_THROW(softmax_rows(m), NumericError);
}

TEST(SoftmaxRows, RowsSumToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    Eigen::MatrixXd m(4, 16);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-100, 100);
    const auto p = softmax_rows(m);
    for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-9);
  }
}

TEST(Targets, VideoToTextAndTextToVideo) {
  const std::vector<int> ids = {1, 2};
  const std::vector<int> distinct = {1, 2};
  EXPECT_EQ(build_targets(distinct, ids, MatchDirection::VideoToText), Eigen::MatrixXd::Identity(2, 2));
  const std::vector<int> same = {1, 1};
  const auto t2v = build_targets(same, ids, MatchDirection::TextToVideo);
  EXPECT_EQ(t2v.row(0), Eigen::RowVector2d(0.5, 0.5));
  EXPECT_EQ(t2v.row(1), Eigen::RowVector2d(0, 0));
  const auto v2t = build_targets(same, ids, MatchDirection::VideoToText);
  EXPECT_EQ(v2t.col(0), Eigen::Vector2d(1, 1));
  EXPECT_EQ(v2t.col(1), Eigen::Vector2d(0, 0));
  const std::vector<int> unknown = {5};
  EXPECT_THROW(build_targets(unknown, ids, MatchDirection::VideoToText), ValidationError);
}

TEST(Targets, RowInvariants) {
  Rng rng(7);
  const auto ids = LabelVocabulary::standard().trainable_ids();
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> labels(1 + rng.below(12));
    for (auto& l : labels) l = rng.range(1, 16);
    const auto q = build_targets(labels, ids, MatchDirection::VideoToText);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      EXPECT_DOUBLE_EQ(q.row(i).sum(), 1.0);
      for (Eigen::Index j = 0; j < q.cols(); ++j) EXPECT_EQ(q(i, j) > 0, labels[static_cast<std::size_t>(i)] == ids[static_cast<std::size_t>(j)]);
    }
    const auto r = build_targets(labels, ids, MatchDirection::TextToVideo);
    for (Eigen::Index j = 0; j < r.rows(); ++j) {
      const double s = r.row(j).sum();
      EXPECT_TRUE(s == 0.0 || std::abs(s - 1.0) < 1e-12);
      for (Eigen::Index i = 0; i < r.cols(); ++i) EXPECT_TRUE(r(j, i) == 0.0 || (r(j, i) > 0.0 && r(j, i) <= 1.0));
    }
  }
}

TEST(ContrastiveLoss, HandValues) {
  Eigen::MatrixXd logits(2, 2);
  logits << 1, 0, 0, 1;
  const std::vector<int> labels = {1, 2}, ids = {1, 2};
  const auto l = contrastive_loss(logits, labels, ids);
  const double want = std::log(1.0 + std::exp(-1.0));
  EXPECT_NEAR(l.video_to_text, want, 1e-12);
  EXPECT_NEAR(l.text_to_video, want, 1e-12);
  EXPECT_NEAR(l.total, 0.31326, 1e-5);
  EXPECT_NEAR(l.total, want, 1e-12);

  const std::vector<int> four = {1, 2, 3, 4};
  const std::vector<int> one_label = {3};
  const auto flat = contrastive_loss(Eigen::MatrixXd::Constant(1, 4, 0.7), one_label, four);
  EXPECT_NEAR(flat.video_to_text, std::log(4.0), 1e-12);

  Eigen::MatrixXd sep = Eigen::MatrixXd::Constant(2, 2, -1000);
  sep.diagonal().setConstant(1000);
  EXPECT_NEAR(contrastive_loss(sep, labels, ids).total, 0.0, 1e-12);
  Eigen::MatrixXd bad = logits;
  bad(0, 0) = INFINITY;
  EXPECT_THROW(contrastive_loss(bad, labels, ids), NumericError);
  EXPECT_THROW(contrastive_loss(logits, one_label, ids), ValidationError);
}

TEST(ContrastiveLoss, DistinctLabelsReduceToTransposedCrossEntropy) {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const int b = 1 + static_cast<int>(rng.below(6));
    std::vector<int> ids(16);
    for (int j = 0; j < 16; ++j) ids[static_cast<std::size_t>(j)] = j + 1;
    std::vector<int> labels(ids.begin(), ids.end());
    Rng(trial).shuffle(std::span<int>(labels));
    labels.resize(static_cast<std::size_t>(b));
    Eigen::MatrixXd logits(b, 16);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-10, 10);
    const auto l = contrastive_loss(logits, labels, ids);
    // Cross-entropy of each present label's column over the batch.
    double ce = 0.0;
    for (int i = 0; i < b; ++i) {
      const Eigen::VectorXd col = logits.col(labels[static_cast<std::size_t>(i)] - 1);
      const double lse = col.maxCoeff() + std::log((col.array() - col.maxCoeff()).exp().sum());
      ce += lse - col(i);
    }
    EXPECT_NEAR(l.text_to_video, ce / b, 1e-9);
  }
}

TEST(ContrastiveLoss, TranslationInvariantAndGradientConsistent) {
  Rng rng(13);
  const std::vector<int> ids = {1, 2, 3, 4, 5};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> labels(4);
    for (auto& x : labels) x = rng.range(1, 5);
    Eigen::MatrixXd logits(4, 5);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-5, 5);
    const auto l = contrastive_loss(logits, labels, ids);
    const Eigen::MatrixXd shifted = logits.array() + rng.uniform(-100, 100);
    EXPECT_NEAR(contrastive_loss(shifted, labels, ids).total, l.total, 1e-9);
    const auto i = static_cast<Eigen::Index>(rng.below(4));
    const auto j = static_cast<Eigen::Index>(rng.below(5));
    Eigen::MatrixXd up = logits, down = logits;
    up(i, j) += 1e-6;
    down(i, j) -= 1e-6;
    const double fd = (contrastive_loss(up, labels, ids).total - contrastive_loss(down, labels, ids).total) / 2e-6;
    EXPECT_NEAR(l.grad_logits(i, j), fd, 1e-7);
  }
}

TEST(ContrastiveModel, TemperatureClamp) {
  ContrastiveModel model(small_video(), small_text(), 1);
  EXPECT_NEAR(model.tau(), kInitialTau, 1e-15);
  model.params().at(kLogTau)(0, 0) = std::log(1e-4);
  EXPECT_DOUBLE_EQ(model.tau(), kMinTau);
  model.clamp_tau();
  EXPECT_NEAR(std::exp(model.params().at(kLogTau)(0, 0)), kMinTau, 1e-15);
  model.params().at(kLogTau)(0, 0) = 3.0;
  model.clamp_tau();
  EXPECT_NEAR(model.tau(), kMaxTau, 1e-15);
  EXPECT_THROW(ContrastiveModel(small_video(), small_text(), 1, 2.0), ConfigError);
  auto other = small_text();
  other.embed_dim = 7;
  EXPECT_THROW(ContrastiveModel(small_video(), other, 1), ConfigError);
}

TEST(ContrastiveModel, CheckpointRoundTrip) {
  ContrastiveModel model(small_video(Aggregation::Recurrent), small_text(), 4, 0.3);
  ContrastiveModel back(deserialize_params(serialize_params(model.params())));
  EXPECT_DOUBLE_EQ(back.tau(), model.tau());
  const auto clip = conflict_clips(1, 3)[0].frames;
  EXPECT_EQ(infer_conflict_type(back, clip, LabelVocabulary::standard()).ranked,
            infer_conflict_type(model, clip, LabelVocabulary::standard()).ranked);
  auto p = model.params();
  p.metadata["model.kind"] = "supervised";
  EXPECT_THROW(ContrastiveModel{p}, CompatibilityError);
}

TEST(BatchLoss, GradientsMatchFiniteDifferencesIncludingLogTau) {
  const auto clips = conflict_clips(5, 2);
  const std::vector<std::size_t> batch = {0, 1, 2, 3, 4};
  for (auto agg : {Aggregation::Mean, Aggregation::Recurrent}) {
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
      ContrastiveModel model(small_video(agg), small_text(), seed, 0.3);
      auto g = model.params().zeros_like();
      contrastive_batch_loss(model, clips, batch, &g, 1);
      EXPECT_NE(g.at(kLogTau)(0, 0), 0.0);
      Rng rng(seed + 7);
      const auto check = testing::check_gradients(
          model.params(), g, [&] { return contrastive_batch_loss(model, clips, batch, nullptr, 1).total; }, rng, 5);
      EXPECT_LT(check.worst, 1e-4) << check.worst_array;
    }
  }
}

TEST(BatchLoss, RejectsClipsWithoutConflict) {
  auto clips = conflict_clips(2, 1);
  clips[1].conflict_type.reset();
  ContrastiveModel model(small_video(), small_text(), 1);
  const std::vector<std::size_t> batch = {0, 1};
  EXPECT_THROW(contrastive_batch_loss(model, clips, batch, nullptr, 1), ValidationError);
}

TEST(Inference, RankingRulesAndOracle) {
  const std::vector<int> single = {7};
  EXPECT_EQ(rank_labels(single, Eigen::VectorXd::Constant(1, -0.3)).label_id, 7);
  const auto ids = LabelVocabulary::standard().trainable_ids();
  const auto tied = rank_labels(ids, Eigen::VectorXd::Constant(16, 0.2));
  EXPECT_EQ(tied.label_id, 1);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(tied.ranked[k].first, static_cast<int>(k) + 1);

  ContrastiveModel model(small_video(), small_text(), 9);
  const auto clip = conflict_clips(1, 5)[0].frames;
  const auto pred = infer_conflict_type(model, clip, LabelVocabulary::standard());
  ASSERT_EQ(pred.ranked.size(), 16u);
  const auto v = as_vec(model.video_encoder().encode(model.params(), clip));
  std::vector<double> cos(17);
  for (int id : ids) cos[static_cast<std::size_t>(id)] = testing::cosine_oracle(
      v, as_vec(model.text_encoder().encode(model.params(), LabelVocabulary::standard().text(id))));
  for (std::size_t k = 0; k + 1 < 16; ++k) {
    const int a = pred.ranked[k].first, b = pred.ranked[k + 1].first;
    EXPECT_NEAR(pred.ranked[k].second, cos[static_cast<std::size_t>(a)], 1e-12);
    EXPECT_TRUE(cos[static_cast<std::size_t>(a)] > cos[static_cast<std::size_t>(b)] - 1e-12);
  }
  EXPECT_EQ(pred.label_id, pred.ranked[0].first);
}

TEST(Inference, LabelInvariantUnderTemperature) {
  const auto clips = conflict_clips(6, 8);
  ContrastiveModel model(small_video(), small_text(), 2);
  std::vector<int> before;
  for (const auto& c : clips) before.push_back(infer_conflict_type(model, c.frames, LabelVocabulary::standard()).label_id);
  for (double tau : {0.01, 0.2, 1.0}) {
    model.params().at(kLogTau)(0, 0) = std::log(tau);
    for (std::size_t i = 0; i < clips.size(); ++i)
      EXPECT_EQ(infer_conflict_type(model, clips[i].frames, LabelVocabulary::standard()).label_id, before[i]);
  }
}

TEST(TrainContrastive, ZeroLearningRateAndDeterminism) {
  const auto clips = conflict_clips(8, 4);
  ContrastiveTrainConfig cfg;
  cfg.video = small_video();
  cfg.text = small_text();
  cfg.train.epochs = 1;
  cfg.train.learning_rate = 0.0;
  cfg.train.batch_size = 3;
  const auto frozen = train_contrastive(cfg, std::span(clips).first(6), std::span(clips).subspan(6));
  const ContrastiveModel initial(cfg.video, cfg.text, cfg.train.seed);
  EXPECT_EQ(frozen.model.params().arrays(), initial.params().arrays());

  cfg.train.epochs = 2;
  cfg.train.learning_rate = 0.05;
  cfg.train.threads = 1;
  const auto a = train_contrastive(cfg, std::span(clips).first(6), std::span(clips).subspan(6));
  cfg.train.threads = 2;
  const auto b = train_contrastive(cfg, std::span(clips).first(6), std::span(clips).subspan(6));
  EXPECT_EQ(a.outcome.log, b.outcome.log);
  EXPECT_EQ(serialize_params(a.model.params()), serialize_params(b.model.params()));
  EXPECT_GE(a.model.tau(), kMinTau);
  EXPECT_LE(a.model.tau(), kMaxTau);
}

}  // namespace
}  // namespace scvlm
