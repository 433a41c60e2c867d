#pragma once

// Procedural top-down driving clips with exactly checkable event geometry.
//
// Every clip shows a road band with boundary lines, the ego vehicle, and at
// most one other agent. The agent's approach path encodes the conflict type;
// the geometry around the centre frame encodes the event type:
//   Crash          agent box overlaps the ego box at the centre frame
//   NearCrash      minimum box separation over the clip is in (0, kNearGap]
//   TireStrike     ego box overlaps a road boundary line
//   NormalDriving  separation stays above kSafeGap for every frame
// Agent positions are expressed relative to the ego, so the separation does
// not depend on the ego's lateral drift.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "scvlm/data_model.hpp"

namespace scvlm::synth {

inline constexpr int kNearGap = 3;
inline constexpr int kSafeGap = 10;

enum class EnvTag { Day, Night, Rain, Clear, Highway, Urban };
std::string_view env_tag_name(EnvTag tag);

struct SceneSpec {
  EventType event_type = EventType::NormalDriving;
  std::optional<int> conflict_type;
  std::uint64_t seed = 0;
  int num_frames = 77;
  int height = 64;
  int width = 64;
  double fps = 15.0;
  // Empty means "draw from seed": one of day/night, rain/clear, highway/urban.
  std::vector<EnvTag> environment_tags;
};

void validate_spec(const SceneSpec& spec);

// Half-open integer pixel box [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

// Chebyshev box separation: > 0 is the pixel gap, 0 means touching, < 0 means
// the boxes share at least one pixel.
int separation(const Box& a, const Box& b);

struct FrameGeometry {
  Box ego;
  std::optional<Box> agent;
};

struct SceneGeometry {
  int center_frame = 0;
  Box left_boundary;
  Box right_boundary;
  Box road;  // drivable band between the outer edges of both boundary lines
  std::vector<FrameGeometry> frames;
  std::vector<EnvTag> environment_tags;
  std::array<std::uint8_t, 3> agent_color{};
};

// Replays the trajectory equations for every frame; no pixels involved.
SceneGeometry scene_geometry(const SceneSpec& spec);

FrameSequence render_event(const SceneSpec& spec);

// Number of events to generate for one (event type, conflict type) pair.
struct ClassCount {
  EventType event_type = EventType::NormalDriving;
  std::optional<int> conflict_type;
  int count = 0;
};

// Scales the conflict-type proportions of the reference study to `sce_total`
// safety-critical events (excluding "Unknown"), and appends `normal_total`
// normal-driving events. Event types within SCEs follow the study's
// crash : tire strike : near-crash ratio by largest remainder per conflict type.
std::vector<ClassCount> proportional_profile(int sce_total, int normal_total);

struct GenerationOptions {
  std::uint64_t seed = 7;
  int num_frames = 77;
  int height = 64;
  int width = 64;
  double fps = 15.0;
  int threads = 0;  // 0 = hardware concurrency
};

std::uint64_t event_seed(std::uint64_t master_seed, const std::string& event_id);

// Renders every event under root/events/<event_id>/ and writes root/manifest.jsonl.
// Records are unassigned; use split_dataset afterwards.
DatasetManifest generate_dataset(const std::vector<ClassCount>& counts,
                                 const std::filesystem::path& root,
                                 const GenerationOptions& options);

// Ground-truth description of a clip: its environment tags and what happens to
// the ego vehicle, used as the reference side of narrative evaluation.
std::string reference_narrative(const SceneSpec& spec);

// Spec that reproduces one manifest record's clip in isolation.
SceneSpec spec_for_record(const DatasetManifest& manifest, const EventRecord& record);

}  // namespace scvlm::synth
