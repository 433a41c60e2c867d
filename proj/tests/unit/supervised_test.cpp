#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scvlm/errors.hpp"
#include "scvlm/supervised.hpp"
#include "scvlm/synthgen.hpp"

namespace scvlm {
namespace {

VideoEncoderConfig small_video() {
  VideoEncoderConfig c;
  c.height = 32;
  c.width = 32;
  c.frames = 3;
  c.patch_dim = 4;
  c.pool = 2;
  c.hidden = 6;
  c.embed_dim = 5;
  return c;
}

std::vector<Clip> small_clips(int n, std::uint64_t seed) {
  std::vector<Clip> out;
  for (int i = 0; i < n; ++i) {
    synth::SceneSpec s;
    s.event_type = event_type_from_index(i % 4);
    if (is_sce(s.event_type)) s.conflict_type = 1 + i % 16;
    s.seed = seed * 1000 + static_cast<std::uint64_t>(i);
    s.height = 32;
    s.width = 32;
    s.num_frames = 9;
    out.push_back({"e" + std::to_string(i), sample_frames(synth::render_event(s), 3), s.event_type, s.conflict_type});
  }
  return out;
}

TEST(CrossEntropy, HandValues) {
  EXPECT_NEAR(cross_entropy(Eigen::Vector4d(0, 0, 0, 0), EventType::Crash), std::log(4.0), 1e-9);
  EXPECT_NEAR(cross_entropy(Eigen::Vector4d(0, 0, 0, 0), EventType::NormalDriving), 1.3862944, 1e-7);
  const double denom = std::exp(1) + std::exp(2) + std::exp(3) + std::exp(4);
  EXPECT_NEAR(cross_entropy(Eigen::Vector4d(1, 2, 3, 4), EventType::NormalDriving), -std::log(std::exp(4) / denom), 1e-12);
  EXPECT_NEAR(cross_entropy(Eigen::Vector4d(1, 2, 3, 4), EventType::NormalDriving), 0.4402, 1e-4);
  const double big = cross_entropy(Eigen::Vector4d(1000, 0, 0, 0), EventType::Crash);
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 0.0, 1e-12);
  EXPECT_THROW(cross_entropy(Eigen::VectorXd::Zero(4), 4), ValidationError);
}

TEST(CrossEntropy, TranslationInvariantAndNonNegative) {
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    Eigen::VectorXd s(4);
    for (int k = 0; k < 4; ++k) s(k) = rng.uniform(-30, 30);
    const int label = static_cast<int>(rng.below(4));
    const double base = cross_entropy(s, label);
    EXPECT_GE(base, 0.0);
    const Eigen::VectorXd shifted = s.array() + rng.uniform(-500, 500);
    EXPECT_NEAR(cross_entropy(shifted, label), base, 1e-9);
    EXPECT_NEAR(softmax(s).sum(), 1.0, 1e-12);
  }
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Eigen::VectorXd s(4);
  s << 0.3, -1.0, 2.0, 0.5;
  const auto g = cross_entropy_grad(s, 2);
  for (int k = 0; k < 4; ++k) {
    Eigen::VectorXd up = s, down = s;
    up(k) += 1e-6;
    down(k) -= 1e-6;
    EXPECT_NEAR(g(k), (cross_entropy(up, 2) - cross_entropy(down, 2)) / 2e-6, 1e-8);
  }
}

TEST(Predict, ArgmaxAndTieRule) {
  EXPECT_EQ(predict_event_type(ScoreVector(0.1, 0.9, 0.2, 0.3)), EventType::TireStrike);
  EXPECT_EQ(predict_event_type(ScoreVector(0.5, 0.5, 0.1, 0.1)), EventType::Crash);
  EXPECT_EQ(predict_event_type(ScoreVector(0, 0, 0, 0)), EventType::Crash);
  EXPECT_EQ(argmax_lowest(Eigen::Vector3d(1, 3, 3)), 1);
}

TEST(Predict, ScaleInvariant) {
  Rng rng(9);
  for (int i = 0; i < 5000; ++i) {
    ScoreVector s;
    for (int k = 0; k < 4; ++k) s(k) = std::round(rng.uniform(-5, 5) * 4) / 4;  // frequent ties
    const double c = std::exp(rng.uniform(-10, 10));
    EXPECT_EQ(predict_event_type(ScoreVector(s * c)), predict_event_type(s));
  }
}

TEST(ForwardScores, BiasPassthroughAndAffineOracle) {
  SupervisedModel model(small_video(), 3);
  auto& p = model.params();
  const auto clip = small_clips(1, 1)[0].frames;
  for (auto& [name, arr] : p.arrays()) arr.setZero();
  p.at(kClassifierBias) << 1, 0, 0, 0;
  EXPECT_EQ(forward_scores(model, clip), ScoreVector(1, 0, 0, 0));

  SupervisedModel fresh(small_video(), 4);
  const auto e = fresh.encoder().encode(fresh.params(), clip);
  const auto& w = fresh.params().at(kClassifierWeight);
  const auto& b = fresh.params().at(kClassifierBias);
  const auto scores = forward_scores(fresh, clip);
  for (int k = 0; k < 4; ++k) {
    double s = b(k, 0);
    for (Eigen::Index j = 0; j < e.size(); ++j) s += w(k, j) * e(j);
    EXPECT_NEAR(scores(k), s, 1e-12);
  }
  EXPECT_EQ(scores, forward_scores(fresh, clip));
  EXPECT_THROW(classifier_scores(w, b, Eigen::VectorXd::Zero(e.size() + 1)), ValidationError);
}

TEST(SupervisedModel, CheckpointIdentity) {
  SupervisedModel model(small_video(), 3);
  model.set_training_metadata(7, 0.5);
  SupervisedModel back(deserialize_params(serialize_params(model.params())));
  EXPECT_EQ(back.epoch(), 7);
  EXPECT_DOUBLE_EQ(back.best_val_accuracy(), 0.5);
  EXPECT_EQ(back.encoder().config(), small_video());
  ParamSet empty;
  EXPECT_THROW(SupervisedModel{empty}, CompatibilityError);
}

TEST(SupervisedBatchLoss, GradientsMatchFiniteDifferences) {
  const auto clips = small_clips(8, 2);
  const std::vector<std::size_t> batch = {0, 1, 2, 3, 5, 6};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SupervisedModel model(small_video(), seed);
    auto g = model.params().zeros_like();
    supervised_batch_loss(model, clips, batch, &g, 1);
    Rng rng(seed + 50);
    const auto check = testing::check_gradients(
        model.params(), g, [&] { return supervised_batch_loss(model, clips, batch, nullptr, 1); }, rng, 5);
    EXPECT_LT(check.worst, 1e-4) << check.worst_array;
  }
}

TEST(SupervisedBatchLoss, IndependentOfThreadCount) {
  const auto clips = small_clips(8, 3);
  const std::vector<std::size_t> batch = {7, 0, 3, 4, 1};
  SupervisedModel model(small_video(), 1);
  auto g1 = model.params().zeros_like();
  auto g4 = model.params().zeros_like();
  EXPECT_EQ(supervised_batch_loss(model, clips, batch, &g1, 1), supervised_batch_loss(model, clips, batch, &g4, 4));
  EXPECT_EQ(g1, g4);
}

TEST(TrainSupervised, ZeroLearningRateKeepsInitialParameters) {
  const auto clips = small_clips(8, 4);
  SupervisedTrainConfig cfg;
  cfg.encoder = small_video();
  cfg.train.epochs = 1;
  cfg.train.learning_rate = 0.0;
  cfg.train.seed = 6;
  const auto result = train_supervised(cfg, std::span(clips).first(6), std::span(clips).subspan(6));
  const SupervisedModel initial(small_video(), 6);
  EXPECT_EQ(result.model.params().arrays(), initial.params().arrays());
  ASSERT_EQ(result.outcome.log.size(), 1u);
  EXPECT_EQ(result.outcome.best_epoch, 1);
}

TEST(TrainSupervised, FrozenEncoderOnlyMovesTheHead) {
  const auto clips = small_clips(8, 6);
  SupervisedTrainConfig cfg;
  cfg.encoder = small_video();
  cfg.train.epochs = 2;
  cfg.train.batch_size = 2;
  cfg.train.learning_rate = 0.5;
  cfg.freeze_encoder = true;
  const auto result = train_supervised(cfg, std::span(clips).first(6), std::span(clips).subspan(6));
  const SupervisedModel initial(small_video(), cfg.train.seed);
  for (const auto& [name, arr] : initial.params().arrays()) {
    if (name.rfind("video.", 0) == 0) EXPECT_EQ(result.model.params().at(name), arr) << name;
  }
  EXPECT_NE(result.model.params().at(kClassifierWeight), initial.params().at(kClassifierWeight));
}

TEST(TrainSupervised, DeterministicLogsAndCheckpoint) {
  const auto clips = small_clips(12, 5);
  SupervisedTrainConfig cfg;
  cfg.encoder = small_video();
  cfg.train.epochs = 3;
  cfg.train.batch_size = 4;
  cfg.train.seed = 2;
  cfg.train.threads = 1;
  const auto a = train_supervised(cfg, std::span(clips).first(9), std::span(clips).subspan(9));
  cfg.train.threads = 3;
  const auto b = train_supervised(cfg, std::span(clips).first(9), std::span(clips).subspan(9));
  EXPECT_EQ(a.outcome.log, b.outcome.log);
  EXPECT_EQ(serialize_params(a.model.params()), serialize_params(b.model.params()));
  EXPECT_EQ(a.model.epoch(), a.outcome.best_epoch);
  EXPECT_THROW(train_supervised(cfg, std::span(clips).first(9), std::span<const Clip>{}), ValidationError);
}

// Two Gaussian blobs at (+2, +2) and (-2, -2) in feature space, encoder replaced by identity.
TEST(TrainLinearHead, ToyLossStrictlyDecreases) {
  Rng rng(1);
  std::vector<Eigen::VectorXd> train, val;
  std::vector<int> train_y, val_y;
  for (int i = 0; i < 60; ++i) {
    const int y = i % 2;
    const double c = y ? 2.0 : -2.0;
    Eigen::VectorXd f(2);
    f << c + rng.uniform(-1, 1), c + rng.uniform(-1, 1);
    (i < 40 ? train : val).push_back(f);
    (i < 40 ? train_y : val_y).push_back(y);
  }
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.05;
  const auto r = train_linear_head(cfg, 2, train, train_y, val, val_y);
  ASSERT_EQ(r.outcome.log.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(r.outcome.log[e].train_loss, r.outcome.log[e - 1].train_loss);
  EXPECT_DOUBLE_EQ(r.outcome.best_val_accuracy, 1.0);
}

TEST(MinibatchDriver, ShufflesCoverEveryIndexAndTiesKeepEarliest) {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 3;
  std::vector<std::vector<std::size_t>> seen(4);
  std::vector<int> best_calls;
  const std::vector<double> accuracy = {0.5, 0.75, 0.75, 0.25};
  TrainingHooks hooks;
  hooks.step = [&](std::span<const std::size_t> b, int epoch, int) {
    seen[static_cast<std::size_t>(epoch - 1)].insert(seen[static_cast<std::size_t>(epoch - 1)].end(), b.begin(), b.end());
    return 1.0;
  };
  int epoch = 0;
  hooks.validate = [&] { return accuracy[static_cast<std::size_t>(epoch++)]; };
  hooks.on_best = [&](int e) { best_calls.push_back(e); };
  const auto out = run_minibatch_training(10, cfg, hooks);
  for (auto& s : seen) {
    auto sorted = s;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> all(10);
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(sorted, all);
  }
  EXPECT_NE(seen[0], seen[1]);
  EXPECT_EQ(out.best_epoch, 2);
  EXPECT_EQ(best_calls, (std::vector<int>{1, 2}));
  EXPECT_EQ(epoch_record_json({1, 0.5, 0.25}), R"({"epoch":1,"train_loss":0.5,"val_accuracy":0.25})");

  cfg.batch_size = 0;
  EXPECT_THROW(run_minibatch_training(10, cfg, hooks), ConfigError);
  cfg.batch_size = 2;
  cfg.learning_rate = -1;
  EXPECT_THROW(run_minibatch_training(10, cfg, hooks), ConfigError);
}

TEST(MinibatchDriver, NumericErrorPropagates) {
  TrainConfig cfg;
  TrainingHooks hooks;
  hooks.step = [](std::span<const std::size_t>, int, int) -> double { throw NumericError("nan"); };
  hooks.validate = [] { return 0.0; };
  EXPECT_THROW(run_minibatch_training(4, cfg, hooks), NumericError);
}

TEST(ParallelFor, VisitsEveryIndexOnceAndRethrows) {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { ++hits[i]; });
  EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 100);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw IoError("boom");
               }),
               IoError);
}

}  // namespace
}  // namespace scvlm
