#include <bit>
#include <cmath>
#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "scvlm/encoders.hpp"
#include "scvlm/errors.hpp"
#include "scvlm/params.hpp"
#include "scvlm/synthgen.hpp"
#include "scvlm/text.hpp"

namespace scvlm {
namespace {

using testing::TempDir;

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

FrameSequence random_clip(int frames, int h, int w, std::uint64_t seed) {
  FrameSequence seq(frames, h, w, 15.0);
  Rng rng(seed);
  for (int t = 0; t < frames; ++t)
    for (auto& v : seq.frame(t)) v = static_cast<std::uint8_t>(rng.below(256));
  return seq;
}

ParamSet init_video(const VideoEncoder& enc, std::uint64_t seed) {
  ParamSet p;
  Rng rng(seed);
  enc.init(p, rng);
  return p;
}

// Scalar re-derivation of the mean-mode video encoder forward pass.
std::vector<double> video_oracle(const VideoEncoderConfig& c, const ParamSet& p, const FrameSequence& seq) {
  const int ps = c.patch, gh = c.height / ps, gw = c.width / ps, pd = c.patch_dim;
  const int fine_w = gw / c.pool, fine_h = gh / c.pool;
  const int cells = 1 + fine_w * fine_h;
  const auto& w = p.at("video.patch.weight");
  const auto& b = p.at("video.patch.bias");
  const auto& pos = p.at("video.patch.position");
  std::vector<double> pooled(static_cast<std::size_t>(pd * cells), 0.0);
  for (int f = 0; f < c.frames; ++f) {
    const int t = static_cast<int>(std::floor((f + 0.5) * seq.frames() / c.frames));
    double mean[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
    for (int y = 0; y < c.height; ++y)
      for (int x = 0; x < c.width; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          mean[ch] += seq.at(t, y, x, ch);
          sq[ch] += seq.at(t, y, x, ch) * static_cast<double>(seq.at(t, y, x, ch));
        }
    double scale[3];
    const double n_px = c.height * c.width;
    for (int ch = 0; ch < 3; ++ch) {
      mean[ch] /= n_px;
      scale[ch] = 0.5 / std::sqrt(std::max(sq[ch] / n_px - mean[ch] * mean[ch], 0.0) + 1.0);
    }
    for (int py = 0; py < gh; ++py) {
      for (int px = 0; px < gw; ++px) {
        const int patch = py * gw + px;
        const int cell = 1 + (py / c.pool) * fine_w + px / c.pool;
        for (int k = 0; k < pd; ++k) {
          double a = b(k, 0) + pos(k, patch);
          int q = 0;
          for (int yy = 0; yy < ps; ++yy)
            for (int xx = 0; xx < ps; ++xx)
              for (int ch = 0; ch < 3; ++ch, ++q)
                a += w(k, q) * (seq.at(t, py * ps + yy, px * ps + xx, ch) - mean[ch]) * scale[ch];
          const double h = std::tanh(a) / c.frames;
          pooled[static_cast<std::size_t>(k)] += h / (gh * gw);
          pooled[static_cast<std::size_t>(cell * pd + k)] += h / (c.pool * c.pool);
        }
      }
    }
  }
  const auto& w1 = p.at("video.mlp.w1");
  const auto& b1 = p.at("video.mlp.b1");
  const auto& w2 = p.at("video.mlp.w2");
  const auto& b2 = p.at("video.mlp.b2");
  std::vector<double> hidden(static_cast<std::size_t>(c.hidden));
  for (int i = 0; i < c.hidden; ++i) {
    double s = b1(i, 0);
    for (std::size_t j = 0; j < pooled.size(); ++j) s += w1(i, static_cast<Eigen::Index>(j)) * pooled[j];
    hidden[static_cast<std::size_t>(i)] = std::tanh(s);
  }
  std::vector<double> out(static_cast<std::size_t>(c.embed_dim));
  for (int i = 0; i < c.embed_dim; ++i) {
    double s = b2(i, 0);
    for (int j = 0; j < c.hidden; ++j) s += w2(i, j) * hidden[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

TEST(SampleFrames, IndexFormula) {
  EXPECT_EQ(sample_frame_indices(8, 8), (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(sample_frame_indices(77, 8), (std::vector<int>{4, 14, 24, 33, 43, 52, 62, 72}));
  EXPECT_EQ(sample_frame_indices(3, 8), (std::vector<int>{0, 0, 0, 1, 1, 2, 2, 2}));
  EXPECT_THROW(sample_frame_indices(0, 8), ValidationError);
  EXPECT_THROW(sample_frame_indices(5, 0), ValidationError);
}

TEST(SampleFrames, NonDecreasingAndInRange) {
  for (int t = 1; t <= 120; ++t) {
    for (int f = 1; f <= 20; ++f) {
      const auto idx = sample_frame_indices(t, f);
      ASSERT_EQ(static_cast<int>(idx.size()), f);
      for (int i = 0; i < f; ++i) {
        EXPECT_EQ(idx[static_cast<std::size_t>(i)], static_cast<int>(std::floor((i + 0.5) * t / f)));
        EXPECT_GE(idx[static_cast<std::size_t>(i)], 0);
        EXPECT_LT(idx[static_cast<std::size_t>(i)], t);
        if (i) EXPECT_LE(idx[static_cast<std::size_t>(i) - 1], idx[static_cast<std::size_t>(i)]);
      }
    }
  }
}

TEST(AggregateFrames, MeanMode) {
  Eigen::MatrixXd one(3, 1);
  one << 1, -2, 4;
  EXPECT_EQ(aggregate_frames(one, Aggregation::Mean), Eigen::VectorXd(one.col(0)));
  Eigen::MatrixXd two(2, 2);
  two << 1, 0, 0, 1;
  EXPECT_EQ(aggregate_frames(two, Aggregation::Mean), Eigen::Vector2d(0.5, 0.5));
}

TEST(AggregateFrames, RecurrentZeroWeightsGiveZero) {
  FrameAggregator agg("g", Aggregation::Recurrent, 3);
  ParamSet p;
  Rng rng(1);
  agg.init(p, rng);
  p.set_zero();
  const Eigen::MatrixXd frames = Eigen::MatrixXd::Random(3, 5);
  EXPECT_EQ(aggregate_frames(frames, Aggregation::Recurrent, &p, "g"), Eigen::VectorXd::Zero(3));
  EXPECT_THROW(aggregate_frames(frames, Aggregation::Recurrent), ValidationError);
}

TEST(AggregateFrames, RecurrentMatchesHandStep) {
  FrameAggregator agg("g", Aggregation::Recurrent, 1);
  ParamSet p;
  Rng rng(1);
  agg.init(p, rng);
  p.set_zero();
  p.at("g.w_z")(0, 0) = 1.0;
  p.at("g.w_n")(0, 0) = 2.0;
  Eigen::MatrixXd x(1, 1);
  x << 0.5;
  // z = sigmoid(0.5), n = tanh(1), h = z * n.
  const double expected = 1.0 / (1.0 + std::exp(-0.5)) * std::tanh(1.0);
  EXPECT_NEAR(aggregate_frames(x, Aggregation::Recurrent, &p, "g")(0), expected, 1e-15);
  EXPECT_EQ(parse_aggregation("recurrent"), Aggregation::Recurrent);
  EXPECT_THROW(parse_aggregation("attention"), ConfigError);
}

TEST(VideoEncoder, MatchesScalarOracle) {
  const auto cfg = small_video();
  const VideoEncoder enc(cfg);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = init_video(enc, seed);
    const auto clip = random_clip(7, 32, 32, seed + 100);
    const auto got = enc.encode(p, clip);
    const auto want = video_oracle(cfg, p, clip);
    ASSERT_EQ(got.size(), static_cast<Eigen::Index>(want.size()));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got(static_cast<Eigen::Index>(i)), want[i], 1e-12);
  }
}

TEST(VideoEncoder, PyramidGeometry) {
  VideoEncoderConfig def;
  EXPECT_EQ(def.cells(), 17);
  EXPECT_EQ(def.frame_dim(), 32 * 17);
  const VideoEncoder enc(small_video());
  EXPECT_EQ(enc.num_patches(), 16);
  EXPECT_EQ(enc.cell_of_patch(), (std::vector<int>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  auto bad = small_video();
  bad.pool = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_video();
  bad.height = 30;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(VideoEncoder, ZeroParamsGiveZeroAndBiasPassesThrough) {
  const VideoEncoder enc(small_video());
  auto p = init_video(enc, 3);
  p.set_zero();
  const FrameSequence black(4, 32, 32, 15.0);
  EXPECT_EQ(enc.encode(p, black), Eigen::VectorXd::Zero(5));
  p.at("video.mlp.b2") << 1, 2, 3, 4, 5;
  EXPECT_EQ(enc.encode(p, random_clip(4, 32, 32, 1)), Eigen::VectorXd(p.at("video.mlp.b2").col(0)));
}

TEST(VideoEncoder, DeterministicFiniteAndGeometryChecked) {
  const VideoEncoder enc(small_video(Aggregation::Recurrent));
  const auto p = init_video(enc, 4);
  const auto clip = random_clip(9, 32, 32, 2);
  const auto a = enc.encode(p, clip);
  EXPECT_EQ(a, enc.encode(p, clip));
  EXPECT_TRUE(a.allFinite());
  EXPECT_THROW(enc.encode(p, random_clip(9, 32, 64, 2)), CompatibilityError);
  ParamSet wrong;
  wrong.add("video.patch.weight", 1, 1);
  EXPECT_THROW(enc.check_params(wrong), CompatibilityError);
  EXPECT_NO_THROW(enc.check_params(p));
}

TEST(VideoEncoder, InputStandardisationIgnoresGlobalBrightness) {
  const VideoEncoder enc(small_video());
  const auto p = init_video(enc, 8);
  synth::SceneSpec s;
  s.event_type = EventType::Crash;
  s.conflict_type = 1;
  s.height = 32;
  s.width = 32;
  s.num_frames = 9;
  s.environment_tags = {synth::EnvTag::Day, synth::EnvTag::Clear, synth::EnvTag::Highway};
  const auto day = enc.encode(p, synth::render_event(s));
  s.environment_tags = {synth::EnvTag::Night, synth::EnvTag::Clear, synth::EnvTag::Highway};
  const auto night = enc.encode(p, synth::render_event(s));
  EXPECT_LT((day - night).norm(), 0.05 * day.norm());
}

// Scalar probe: sum of embedding entries.
TEST(VideoEncoder, GradientsMatchFiniteDifferences) {
  for (auto agg : {Aggregation::Mean, Aggregation::Recurrent}) {
    const VideoEncoder enc(small_video(agg));
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto p = init_video(enc, seed);
      const auto clip = random_clip(5, 32, 32, seed + 20);
      VideoEncoder::Tape tape;
      const auto out = enc.forward(p, clip, &tape);
      auto g = p.zeros_like();
      enc.backward(p, tape, Eigen::VectorXd::Ones(out.size()), g);
      Rng rng(seed);
      const auto check = testing::check_gradients(p, g, [&] { return enc.encode(p, clip).sum(); }, rng, 6);
      EXPECT_LT(check.worst, 1e-4) << check.worst_array << " aggregation " << aggregation_name(agg);
    }
  }
}

TEST(TextEncoder, BagOfTokensAndDistinctLabels) {
  const TextEncoder enc(TextEncoderConfig{});
  ParamSet p;
  Rng rng(0);
  enc.init(p, rng);
  const auto a = enc.encode(p, "Conflict with a lead vehicle");
  EXPECT_EQ(a, enc.encode(p, "Conflict with a lead vehicle"));
  EXPECT_EQ(a, enc.encode(p, "vehicle lead a with Conflict"));
  EXPECT_EQ(a.size(), 128);
  const auto texts = LabelVocabulary::standard().trainable_texts();
  for (std::size_t i = 0; i < texts.size(); ++i)
    for (std::size_t j = i + 1; j < texts.size(); ++j)
      EXPECT_NE(enc.encode(p, texts[i]), enc.encode(p, texts[j])) << texts[i] << " / " << texts[j];
  EXPECT_THROW(enc.encode(p, " ,.; "), ValidationError);
}

TEST(TextEncoder, MatchesScalarOracle) {
  const auto cfg = small_text();
  const TextEncoder enc(cfg);
  ParamSet p;
  Rng rng(5);
  enc.init(p, rng);
  const std::string text = "Conflict with vehicle turning into another vehicle path (same direction)";
  const auto tokens = tokenize(text);
  std::vector<double> mean(static_cast<std::size_t>(cfg.token_dim), 0.0);
  for (const auto& tok : tokens)
    for (int k = 0; k < cfg.token_dim; ++k)
      mean[static_cast<std::size_t>(k)] +=
          p.at("text.token.table")(static_cast<Eigen::Index>(fnv1a64(tok) % 64), k) / tokens.size();
  const auto got = enc.encode(p, text);
  for (int i = 0; i < cfg.embed_dim; ++i) {
    double s = p.at("text.mlp.b2")(i, 0);
    for (int j = 0; j < cfg.hidden; ++j) {
      double a = p.at("text.mlp.b1")(j, 0);
      for (int k = 0; k < cfg.token_dim; ++k) a += p.at("text.mlp.w1")(j, k) * mean[static_cast<std::size_t>(k)];
      s += p.at("text.mlp.w2")(i, j) * std::tanh(a);
    }
    EXPECT_NEAR(got(i), s, 1e-12);
  }
}

TEST(TextEncoder, GradientsMatchFiniteDifferences) {
  const TextEncoder enc(small_text());
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ParamSet p;
    Rng init(seed);
    enc.init(p, init);
    const std::string text = "Conflict with a following vehicle";
    TextEncoder::Tape tape;
    const auto out = enc.forward(p, text, &tape);
    auto g = p.zeros_like();
    enc.backward(p, tape, Eigen::VectorXd::Ones(out.size()), g);
    // Every used table row, plus random coordinates everywhere.
    for (int s : tape.slots)
      for (int k = 0; k < 4; ++k) {
        auto& v = p.at("text.token.table")(s, k);
        const double saved = v;
        v = saved + 1e-5;
        const double up = enc.encode(p, text).sum();
        v = saved - 1e-5;
        const double down = enc.encode(p, text).sum();
        v = saved;
        const double fd = (up - down) / 2e-5;
        EXPECT_LT(std::abs(fd - g.at("text.token.table")(s, k)), 1e-4 * std::max(1.0, std::abs(fd)));
      }
    Rng rng(seed);
    const auto check = testing::check_gradients(p, g, [&] { return enc.encode(p, text).sum(); }, rng, 6);
    EXPECT_LT(check.worst, 1e-4) << check.worst_array;
  }
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_str(std::vector<std::uint8_t>& b, const std::string& s) {
  put_u32(b, static_cast<std::uint32_t>(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

TEST(Checkpoint, ByteLayout) {
  ParamSet p;
  p.version = "v";
  p.seed = 5;
  p.metadata["k"] = "x";
  p.add("b", 1, 1)(0, 0) = 0.25;
  auto& a = p.add("a", 2, 1);
  a << 1.0, -2.0;
  std::vector<std::uint8_t> want;
  for (char c : std::string("SCVLMCK1")) want.push_back(static_cast<std::uint8_t>(c));
  put_u32(want, 1);
  put_str(want, "v");
  put_u64(want, 5);
  put_u32(want, 1);
  put_str(want, "k");
  put_str(want, "x");
  put_u32(want, 2);
  for (auto [name, values] : {std::pair<std::string, std::vector<double>>{"a", {1.0, -2.0}}, {"b", {0.25}}}) {
    put_str(want, name);
    put_u32(want, 2);
    put_u64(want, values.size());
    put_u64(want, 1);
    for (double v : values) put_u64(want, std::bit_cast<std::uint64_t>(v));
  }
  EXPECT_EQ(serialize_params(p), want);
  EXPECT_EQ(deserialize_params(want), p);
}

TEST(Checkpoint, RoundTripGivesBitIdenticalEncodings) {
  TempDir dir("ckpt");
  const VideoEncoder enc(small_video(Aggregation::Recurrent));
  auto p = init_video(enc, 11);
  enc.config().write_metadata(p, "video");
  save_checkpoint(p, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back, p);
  EXPECT_EQ(VideoEncoderConfig::read_metadata(back, "video"), enc.config());
  const auto clip = random_clip(6, 32, 32, 3);
  EXPECT_EQ(enc.encode(back, clip), enc.encode(p, clip));
}

TEST(Checkpoint, RejectsCorruptInput) {
  ParamSet p;
  p.add("a", 2, 2).setOnes();
  auto bytes = serialize_params(p);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_params(truncated), IoError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_params(trailing), IoError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_params(magic), IoError);
  auto version = bytes;
  version[8] = 9;
  EXPECT_THROW(deserialize_params(version), CompatibilityError);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}

TEST(Init, GlorotUniformBounds) {
  Eigen::MatrixXd m(40, 60);
  Rng rng(2);
  init_uniform(m, 60, 40, rng);
  const double a = std::sqrt(6.0 / 100.0);
  EXPECT_LE(m.cwiseAbs().maxCoeff(), a);
  EXPECT_GT(m.cwiseAbs().maxCoeff(), 0.9 * a);
  EXPECT_NEAR(m.mean(), 0.0, 0.02);
}

}  // namespace
}  // namespace scvlm
