#pragma once

// In-memory training clips: each event's frames reduced to the encoder's
// sampled frame count once, so epochs never touch the disk.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scvlm/data_model.hpp"

namespace scvlm {

struct Clip {
  std::string event_id;
  FrameSequence frames;
  EventType event_type = EventType::NormalDriving;
  std::optional<int> conflict_type;
};

// Loads and frame-samples the listed records from `manifest.root`.
std::vector<Clip> load_clips(const DatasetManifest& manifest, std::span<const EventRecord> records,
                             int sampled_frames, int threads = 0);

}  // namespace scvlm
