#pragma once

// Frame storage: one binary PPM (P6, maxval 255) per frame, named
// frame_00000.ppm, frame_00001.ppm, ... inside a per-event directory.

#include <filesystem>
#include <string>

#include "scvlm/data_model.hpp"

namespace scvlm {

std::string frame_file_name(int index);

void write_ppm(const std::filesystem::path& path, const FrameSequence& seq, int frame);

void save_frames(const FrameSequence& seq, const std::filesystem::path& dir);

// Reads every *.ppm in lexicographic order. All frames must share one geometry.
FrameSequence load_frames(const std::filesystem::path& dir, double fps);

}  // namespace scvlm
