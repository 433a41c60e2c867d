#include "scvlm/synthgen.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

#include "scvlm/errors.hpp"
#include "scvlm/frame_io.hpp"
#include "scvlm/random.hpp"

namespace scvlm::synth {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

enum class Side { Ahead, Behind, Lateral };

// Agent archetype per conflict type, in pixels at the 64 x 64 reference size.
// gap_speed is the approach speed along the axis that carries the separation;
// cross_speed moves the agent along the other axis and keeps going after the
// centre frame.
struct AgentProfile {
  int w;
  int h;
  Rgb color;
  Side side;
  double gap_speed;
  double cross_speed;
  int cross_offset;
};

// Index 0 is the background traffic used for normal driving.
constexpr std::array<AgentProfile, 17> kProfiles = {{
    {8, 12, {120, 35, 35}, Side::Ahead, 0.0, 0.0, 0},       // normal traffic
    {8, 12, {200, 40, 40}, Side::Ahead, 0.8, 0.0, 0},       // 1 lead vehicle
    {4, 6, {110, 70, 30}, Side::Lateral, 0.3, 0.9, 0},      // 2 single vehicle (roadside object)
    {8, 12, {240, 140, 20}, Side::Ahead, 0.4, 0.5, 3},      // 3 turning into path, same dir
    {8, 12, {150, 150, 150}, Side::Lateral, 0.1, 1.0, 0},   // 4 parked vehicle
    {8, 12, {230, 210, 40}, Side::Lateral, 0.3, 0.1, 0},    // 5 adjacent lane
    {8, 12, {150, 60, 210}, Side::Ahead, 0.7, 0.6, 2},      // 6 turning across, opposite dir
    {8, 12, {40, 210, 210}, Side::Behind, 0.6, 0.0, 0},     // 7 following vehicle
    {8, 12, {230, 60, 170}, Side::Ahead, 1.0, 0.25, 2},     // 8 turning into path, opposite dir
    {12, 8, {250, 150, 150}, Side::Ahead, 0.0, 1.1, 0},     // 9 crossing through intersection
    {6, 4, {170, 120, 60}, Side::Ahead, 0.1, 0.6, 0},       // 10 animal
    {8, 12, {30, 140, 120}, Side::Lateral, 0.4, -0.3, 0},   // 11 turning across, same dir
    {8, 12, {150, 230, 60}, Side::Lateral, 0.25, -0.15, 0}, // 12 merging vehicle
    {4, 7, {30, 30, 140}, Side::Lateral, 0.15, 0.5, 0},     // 13 pedal cyclist
    {4, 4, {235, 185, 150}, Side::Ahead, 0.0, 0.45, 0},     // 14 pedestrian
    {6, 4, {15, 15, 15}, Side::Ahead, 1.0, 0.0, 0},         // 15 obstacle / object
    {8, 12, {130, 180, 255}, Side::Ahead, 1.6, 0.2, 2},     // 16 oncoming traffic
}};

constexpr Rgb kOffRoad = {50, 110, 50};
constexpr Rgb kRoad = {90, 90, 90};
constexpr Rgb kLine = {235, 235, 235};
constexpr Rgb kLaneMark = {200, 200, 200};
constexpr Rgb kEgo = {40, 80, 220};

constexpr int kLineWidth = 2;
constexpr double kRetreatFactor = 1.5;

struct Layout {
  int road_left;
  int road_right;
  int lane_width;
  Box ego;
  double scale;
};

Layout make_layout(int height, int width) {
  Layout l{};
  l.road_left = width / 8;
  l.road_right = width - width / 8;
  l.lane_width = (l.road_right - l.road_left) / 3;
  const int ew = std::max(2, l.lane_width / 2);
  const int eh = std::max(3, 3 * height / 16);
  const int ex0 = width / 2 - ew / 2;
  const int ey0 = height / 2;
  l.ego = {ex0, ey0, ex0 + ew, ey0 + eh};
  l.scale = width / 64.0;
  return l;
}

int scaled(int px, double scale) { return std::max(1, static_cast<int>(std::lround(px * scale))); }

Box shifted(const Box& b, int dx, int dy) { return {b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy}; }

int round_px(double v) { return static_cast<int>(std::lround(v)); }

}  // namespace

std::string_view env_tag_name(EnvTag tag) {
  switch (tag) {
    case EnvTag::Day: return "day";
    case EnvTag::Night: return "night";
    case EnvTag::Rain: return "rain";
    case EnvTag::Clear: return "clear";
    case EnvTag::Highway: return "highway";
    case EnvTag::Urban: return "urban";
  }
  return "?";
}

int separation(const Box& a, const Box& b) {
  const int sx = std::max(a.x0 - b.x1, b.x0 - a.x1);
  const int sy = std::max(a.y0 - b.y1, b.y0 - a.y1);
  return std::max(sx, sy);
}

void validate_spec(const SceneSpec& spec) {
  if (spec.event_type == EventType::NormalDriving && spec.conflict_type) {
    throw ValidationError("scene spec: NormalDriving must not carry a conflict type");
  }
  if (spec.event_type != EventType::NormalDriving && !spec.conflict_type) {
    throw ValidationError("scene spec: safety-critical events need a conflict type");
  }
  if (spec.conflict_type && !LabelVocabulary::standard().is_trainable(*spec.conflict_type)) {
    throw ValidationError("scene spec: conflict type must be a trainable label (1-16)");
  }
  if (spec.num_frames < 8) throw ValidationError("scene spec: num_frames must be >= 8");
  if (spec.height < 32 || spec.width < 32) {
    throw ValidationError("scene spec: frames must be at least 32 x 32");
  }
  if (!(spec.fps > 0)) throw ValidationError("scene spec: fps must be positive");
}

SceneGeometry scene_geometry(const SceneSpec& spec) {
  validate_spec(spec);
  const Layout layout = make_layout(spec.height, spec.width);
  const Box& ego0 = layout.ego;
  const int ew = ego0.x1 - ego0.x0;
  const int eh = ego0.y1 - ego0.y0;

  SceneGeometry g;
  g.center_frame = spec.num_frames / 2;
  g.left_boundary = {layout.road_left, 0, layout.road_left + kLineWidth, spec.height};
  g.right_boundary = {layout.road_right - kLineWidth, 0, layout.road_right, spec.height};
  g.road = {layout.road_left, 0, layout.road_right, spec.height};

  Rng env_rng(mix_seed(spec.seed, "environment"));
  const bool night = env_rng.coin();
  const bool rain = env_rng.coin();
  const bool urban = env_rng.coin();
  if (spec.environment_tags.empty()) {
    g.environment_tags = {night ? EnvTag::Night : EnvTag::Day, rain ? EnvTag::Rain : EnvTag::Clear,
                          urban ? EnvTag::Urban : EnvTag::Highway};
  } else {
    g.environment_tags = spec.environment_tags;
  }

  Rng rng(mix_seed(spec.seed, "geometry"));
  const int tc = g.center_frame;
  const EventType et = spec.event_type;
  const AgentProfile& prof = kProfiles[static_cast<std::size_t>(spec.conflict_type.value_or(0))];
  g.agent_color = prof.color;

  // Target separation at the centre frame.
  int target = 0;
  switch (et) {
    case EventType::Crash: target = -rng.range(5, 8); break;
    case EventType::NearCrash: target = rng.range(kNearGap - 1, kNearGap); break;
    case EventType::TireStrike: target = kSafeGap + 1 + rng.range(0, 2); break;
    case EventType::NormalDriving: target = kSafeGap + 4 + rng.range(0, 6); break;
  }
  const double jitter = rng.uniform(0.85, 1.15);
  const int dir = rng.coin() ? 1 : -1;  // mirrors lateral choices
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  // Ego lateral drift for tire strikes: reach the boundary line at the centre frame and hold.
  int drift_target = 0;
  if (et == EventType::TireStrike) {
    const int depth = rng.range(0, 1);
    if (dir < 0) {
      drift_target = (g.left_boundary.x1 - 1 - depth) - ego0.x0;
    } else {
      drift_target = (g.right_boundary.x0 + 1 + depth) - ego0.x1;
    }
  }
  const int drift_start = std::max(0, tc - 20);

  const int aw = scaled(prof.w, layout.scale);
  const int ah = scaled(prof.h, layout.scale);
  const int offset = round_px(prof.cross_offset * layout.scale) * dir;

  // Agent box at the centre frame, relative to the undrifted ego.
  Box at_center{};
  double vx = 0.0;  // approach velocity, px / frame
  double vy = 0.0;
  bool gap_on_x = false;
  switch (prof.side) {
    case Side::Ahead: {
      const int ax = ego0.x0 + (ew - aw) / 2 + offset;
      const int ay = ego0.y0 - target - ah;
      at_center = {ax, ay, ax + aw, ay + ah};
      vy = prof.gap_speed;
      vx = -prof.cross_speed * dir;
      break;
    }
    case Side::Behind: {
      const int ax = ego0.x0 + (ew - aw) / 2 + offset;
      const int ay = ego0.y1 + target;
      at_center = {ax, ay, ax + aw, ay + ah};
      vy = -prof.gap_speed;
      vx = -prof.cross_speed * dir;
      break;
    }
    case Side::Lateral: {
      const int ay = ego0.y0 + (eh - ah) / 2 + offset;
      // Tire strikes keep the agent on the side away from the drift so it stays in view.
      const int side = et == EventType::TireStrike ? -dir : dir;
      const int ax = side < 0 ? ego0.x0 - target - aw : ego0.x1 + target;
      at_center = {ax, ay, ax + aw, ay + ah};
      vx = prof.gap_speed * -side;
      vy = prof.cross_speed;
      gap_on_x = true;
      break;
    }
  }
  vx *= jitter;
  vy *= jitter;

  g.frames.resize(static_cast<std::size_t>(spec.num_frames));
  for (int t = 0; t < spec.num_frames; ++t) {
    FrameGeometry& f = g.frames[static_cast<std::size_t>(t)];
    int drift = 0;
    if (drift_target != 0) {
      const double u = std::clamp(static_cast<double>(t - drift_start) / (tc - drift_start), 0.0, 1.0);
      drift = round_px(drift_target * u);
    }
    f.ego = shifted(ego0, drift, 0);

    Box rel{};
    if (et == EventType::NormalDriving) {
      const int wobble = round_px(2.0 * std::sin(2.0 * std::numbers::pi * t / spec.num_frames + phase));
      rel = shifted(at_center, 0, -wobble);
    } else {
      const int dt = t - tc;
      double dx = vx * dt;
      double dy = vy * dt;
      if (dt > 0) {
        if (et == EventType::Crash) {
          dx = 0.0;
          dy = 0.0;
        } else if (gap_on_x) {
          dx = -vx * kRetreatFactor * dt;
        } else {
          dy = -vy * kRetreatFactor * dt;
        }
      }
      rel = shifted(at_center, round_px(dx), round_px(dy));
    }
    f.agent = shifted(rel, drift, 0);
  }
  return g;
}

FrameSequence render_event(const SceneSpec& spec) {
  const SceneGeometry g = scene_geometry(spec);
  const Layout layout = make_layout(spec.height, spec.width);
  FrameSequence seq(spec.num_frames, spec.height, spec.width, spec.fps);

  double brightness = 1.0;
  double offset = 0.0;
  double noise = 3.0;
  for (EnvTag tag : g.environment_tags) {
    if (tag == EnvTag::Night) brightness = 0.55;
    if (tag == EnvTag::Urban) offset = 10.0;
    if (tag == EnvTag::Rain) noise = 22.0;
  }
  Rng noise_rng(mix_seed(spec.seed, "noise"));

  std::vector<Rgb> canvas(static_cast<std::size_t>(spec.height) * spec.width);
  const auto fill = [&](const Box& b, const Rgb& color) {
    const int x0 = std::max(b.x0, 0);
    const int x1 = std::min(b.x1, spec.width);
    const int y0 = std::max(b.y0, 0);
    const int y1 = std::min(b.y1, spec.height);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) canvas[static_cast<std::size_t>(y) * spec.width + x] = color;
    }
  };

  for (int t = 0; t < spec.num_frames; ++t) {
    std::fill(canvas.begin(), canvas.end(), kOffRoad);
    fill(g.road, kRoad);
    for (int k = 1; k <= 2; ++k) {
      const int x = layout.road_left + k * layout.lane_width;
      for (int y = 0; y < spec.height; ++y) {
        if (((y - 2 * t) % 8 + 8) % 8 < 4) canvas[static_cast<std::size_t>(y) * spec.width + x] = kLaneMark;
      }
    }
    fill(g.left_boundary, kLine);
    fill(g.right_boundary, kLine);
    const FrameGeometry& f = g.frames[static_cast<std::size_t>(t)];
    fill(f.ego, kEgo);
    if (f.agent) fill(*f.agent, g.agent_color);

    auto px = seq.frame(t);
    for (std::size_t i = 0; i < canvas.size(); ++i) {
      for (int c = 0; c < 3; ++c) {
        const double v = canvas[i][static_cast<std::size_t>(c)] * brightness + offset +
                         noise_rng.uniform(-noise, noise);
        px[i * 3 + static_cast<std::size_t>(c)] =
            static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
      }
    }
  }
  return seq;
}

std::vector<ClassCount> proportional_profile(int sce_total, int normal_total) {
  if (sce_total < 0 || normal_total < 0) throw ValidationError("profile totals must be non-negative");
  const auto& vocab = LabelVocabulary::standard();
  int reference_total = 0;
  for (int id : vocab.trainable_ids()) reference_total += vocab.reference_count(id);

  // Crash : tire strike : near-crash counts of the reference study.
  constexpr std::array<double, 3> kEventWeights = {1063.0, 774.0, 6782.0};
  constexpr std::array<EventType, 3> kSceTypes = {EventType::Crash, EventType::TireStrike,
                                                  EventType::NearCrash};
  const double weight_sum = kEventWeights[0] + kEventWeights[1] + kEventWeights[2];

  std::vector<ClassCount> out;
  for (int id : vocab.trainable_ids()) {
    const int n = static_cast<int>(std::lround(static_cast<double>(sce_total) *
                                               vocab.reference_count(id) / reference_total));
    std::array<int, 3> k{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double q = n * kEventWeights[i] / weight_sum;
      k[i] = static_cast<int>(std::floor(q));
      rem[i] = q - k[i];
      assigned += k[i];
    }
    std::array<std::size_t, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++k[order[i % 3]];
    for (std::size_t i = 0; i < 3; ++i) {
      if (k[i] > 0) out.push_back({kSceTypes[i], id, k[i]});
    }
  }
  if (normal_total > 0) out.push_back({EventType::NormalDriving, std::nullopt, normal_total});
  return out;
}

std::uint64_t event_seed(std::uint64_t master_seed, const std::string& event_id) {
  return mix_seed(master_seed, event_id);
}

std::string reference_narrative(const SceneSpec& spec) {
  validate_spec(spec);
  const SceneGeometry g = scene_geometry(spec);
  bool night = false;
  bool rain = false;
  bool urban = false;
  for (EnvTag t : g.environment_tags) {
    night = night || t == EnvTag::Night;
    rain = rain || t == EnvTag::Rain;
    urban = urban || t == EnvTag::Urban;
  }
  std::string out = "Environment: ";
  out += night ? "night-time" : "daytime";
  out += rain ? ", rain" : ", clear weather";
  out += urban ? ", urban road. " : ", highway. ";
  std::string conflict;
  if (spec.conflict_type) {
    conflict = std::string(LabelVocabulary::standard().text(*spec.conflict_type));
    for (char& c : conflict) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  switch (spec.event_type) {
    case EventType::Crash:
      out += "The ego vehicle collides with another road user in a " + conflict + ".";
      break;
    case EventType::NearCrash:
      out += "The ego vehicle nearly collides with another road user in a " + conflict + ".";
      break;
    case EventType::TireStrike:
      out += "The ego vehicle drifts onto the road edge and strikes it with a tire during a " + conflict + ".";
      break;
    case EventType::NormalDriving:
      out += "The ego vehicle follows traffic normally and no safety critical event occurs.";
      break;
  }
  return out;
}

SceneSpec spec_for_record(const DatasetManifest& manifest, const EventRecord& record) {
  SceneSpec spec;
  spec.event_type = record.event_type;
  spec.conflict_type = record.conflict_type;
  spec.seed = event_seed(manifest.seed, record.event_id);
  spec.num_frames = manifest.num_frames;
  spec.height = manifest.height;
  spec.width = manifest.width;
  spec.fps = manifest.fps;
  return spec;
}

DatasetManifest generate_dataset(const std::vector<ClassCount>& counts,
                                 const std::filesystem::path& root,
                                 const GenerationOptions& options) {
  long long total = 0;
  for (const auto& c : counts) {
    if (c.count < 0) throw ValidationError("event counts must be non-negative");
    EventRecord probe{"probe", "probe", c.event_type, c.conflict_type, Split::Unassigned};
    validate_record(probe);
    total += c.count;
  }
  if (total == 0) throw ValidationError("generation requested zero events");

  DatasetManifest manifest;
  manifest.seed = options.seed;
  manifest.fps = options.fps;
  manifest.height = options.height;
  manifest.width = options.width;
  manifest.num_frames = options.num_frames;
  manifest.root = root;
  int next_id = 0;
  for (const auto& c : counts) {
    for (int i = 0; i < c.count; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "evt_%05d", next_id++);
      EventRecord r;
      r.event_id = id;
      r.frames_path = std::string("events/") + id;
      r.event_type = c.event_type;
      r.conflict_type = c.conflict_type;
      manifest.records.push_back(std::move(r));
    }
  }
  // Validates geometry options before touching the filesystem.
  validate_spec(spec_for_record(manifest, manifest.records.front()));

  std::error_code ec;
  std::filesystem::create_directories(root / "events", ec);
  if (ec) throw IoError("cannot create dataset root " + root.string() + ": " + ec.message());

  unsigned threads = options.threads > 0 ? static_cast<unsigned>(options.threads)
                                         : std::max(1U, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(manifest.records.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= manifest.records.size()) return;
      try {
        const EventRecord& r = manifest.records[i];
        save_frames(render_event(spec_for_record(manifest, r)), root / r.frames_path);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = manifest.records.size();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned k = 0; k < threads; ++k) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  save_manifest(manifest, root / kManifestFileName);
  return manifest;
}

}  // namespace scvlm::synth
