#include "scvlm/clips.hpp"

#include "scvlm/encoders.hpp"
#include "scvlm/frame_io.hpp"
#include "scvlm/training.hpp"

namespace scvlm {

std::vector<Clip> load_clips(const DatasetManifest& manifest, std::span<const EventRecord> records,
                             int sampled_frames, int threads) {
  std::vector<Clip> clips(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const EventRecord& r = records[i];
    FrameSequence seq = load_frames(manifest.root / r.frames_path, manifest.fps);
    clips[i] = Clip{r.event_id, sample_frames(seq, sampled_frames), r.event_type, r.conflict_type};
  });
  return clips;
}

}  // namespace scvlm
