#pragma once

// Domain types shared by every stage of the pipeline: frame stacks, event and
// conflict labels, dataset manifests, and the protocol helpers that carve a
// dataset into splits and few-shot subsets.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace scvlm {

// T x H x W x 3 stack of 8-bit RGB frames, row-major, channel-last.
class FrameSequence {
 public:
  FrameSequence() = default;
  FrameSequence(int frames, int height, int width, double fps);
  FrameSequence(int frames, int height, int width, double fps, std::vector<std::uint8_t> data);

  int frames() const { return frames_; }
  int height() const { return height_; }
  int width() const { return width_; }
  double fps() const { return fps_; }
  bool empty() const { return frames_ == 0; }

  std::size_t frame_size() const { return static_cast<std::size_t>(height_) * width_ * 3; }

  std::uint8_t at(int t, int y, int x, int c) const { return data_[offset(t, y, x, c)]; }
  std::uint8_t& at(int t, int y, int x, int c) { return data_[offset(t, y, x, c)]; }

  std::span<const std::uint8_t> frame(int t) const {
    return {data_.data() + static_cast<std::size_t>(t) * frame_size(), frame_size()};
  }
  std::span<std::uint8_t> frame(int t) {
    return {data_.data() + static_cast<std::size_t>(t) * frame_size(), frame_size()};
  }
  const std::vector<std::uint8_t>& data() const { return data_; }

  // New sequence holding the listed frames (repeats allowed) in order.
  FrameSequence select(std::span<const int> indices) const;

  friend bool operator==(const FrameSequence&, const FrameSequence&) = default;

 private:
  std::size_t offset(int t, int y, int x, int c) const {
    return ((static_cast<std::size_t>(t) * height_ + y) * width_ + x) * 3 + c;
  }

  int frames_ = 0;
  int height_ = 0;
  int width_ = 0;
  double fps_ = 0.0;
  std::vector<std::uint8_t> data_;
};

enum class EventType : int { Crash = 0, TireStrike = 1, NearCrash = 2, NormalDriving = 3 };

inline constexpr int kNumEventTypes = 4;
inline constexpr std::array<EventType, kNumEventTypes> kAllEventTypes = {
    EventType::Crash, EventType::TireStrike, EventType::NearCrash, EventType::NormalDriving};

constexpr int event_index(EventType t) { return static_cast<int>(t); }
EventType event_type_from_index(int index);

// Identifier used in manifests ("Crash", "TireStrike", "NearCrash", "NormalDriving").
std::string_view event_type_name(EventType t);
// Human-readable text used in prompts ("Crash", "Tire Strike", "Near-Crash", "Normal Driving").
std::string_view event_type_text(EventType t);
EventType parse_event_type(std::string_view name);

inline bool is_sce(EventType t) { return t != EventType::NormalDriving; }

// Conflict-type label vocabulary. IDs are 1-based; ID 17 ("Unknown") is carried
// for completeness but never trained on or scored.
class LabelVocabulary {
 public:
  static constexpr int kSize = 17;
  static constexpr int kTrainable = 16;
  static constexpr int kUnknownId = 17;

  static const LabelVocabulary& standard();

  int size() const { return kSize; }
  std::string_view text(int id) const;
  bool is_trainable(int id) const { return id >= 1 && id <= kTrainable; }
  bool contains(int id) const { return id >= 1 && id <= kSize; }
  std::vector<int> trainable_ids() const;
  std::vector<std::string> trainable_texts() const;
  // Event count per conflict type in the source study, used for proportional profiles.
  int reference_count(int id) const;
  std::string checksum() const;

 private:
  LabelVocabulary() = default;
};

enum class Split { Train, Val, Test, Unassigned };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct EventRecord {
  std::string event_id;
  std::string frames_path;  // relative to the manifest root
  EventType event_type = EventType::NormalDriving;
  std::optional<int> conflict_type;
  Split split = Split::Unassigned;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

// Throws ValidationError if the record violates the label invariants.
void validate_record(const EventRecord& record);

struct DatasetManifest {
  std::vector<EventRecord> records;
  std::uint64_t seed = 0;
  double fps = 15.0;
  int height = 64;
  int width = 64;
  int num_frames = 77;
  std::string vocabulary_checksum = LabelVocabulary::standard().checksum();
  // Directory the frames_path entries are relative to. Not serialized.
  std::filesystem::path root;

  std::vector<const EventRecord*> in_split(Split s) const;
  const EventRecord* find(std::string_view event_id) const;

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.records == b.records && a.seed == b.seed && a.fps == b.fps &&
           a.height == b.height && a.width == b.width && a.num_frames == b.num_frames &&
           a.vocabulary_checksum == b.vocabulary_checksum;
  }
};

inline constexpr const char* kManifestFileName = "manifest.jsonl";

// Manifest file: UTF-8 JSON Lines. The first line is a header object, each
// further line one EventRecord. See docs/file_formats.md.
std::string serialize_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& root,
                               bool check_frames = true);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_frames = true);

inline constexpr int kDefaultHalfWindow = 38;

// Frames [impact - half_window, impact + half_window] clamped to the clip.
FrameSequence extract_event_window(const FrameSequence& seq, int impact_index,
                                   int half_window = kDefaultHalfWindow);

struct SplitRatios {
  double train = 0.7;
  double test = 0.2;
  double val = 0.1;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t test = 0;
  std::size_t val = 0;
};

// Largest-remainder apportionment of n items; remainder ties go train, test, val.
SplitCounts apportion(std::size_t n, const SplitRatios& ratios);

DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitRatios& ratios,
                              std::uint64_t seed);

// Per conflict-type class keeps ceil(fraction * class_count) records, chosen by a
// seeded shuffle. Records without a conflict type form their own class.
// Output preserves input order.
std::vector<EventRecord> subsample_fraction(std::span<const EventRecord> records, double fraction,
                                            std::uint64_t seed);

}  // namespace scvlm
