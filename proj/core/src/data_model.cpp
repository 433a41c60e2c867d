#include "scvlm/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "scvlm/errors.hpp"
#include "scvlm/random.hpp"

namespace scvlm {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::array<std::string_view, LabelVocabulary::kSize> kConflictTexts = {
    "Conflict with a lead vehicle",
    "Single vehicle conflict",
    "Conflict with vehicle turning into another vehicle path (same direction)",
    "Conflict with parked vehicle",
    "Conflict with vehicle in adjacent lane",
    "Conflict with vehicle turning across another vehicle path (opposite direction)",
    "Conflict with a following vehicle",
    "Conflict with vehicle turning into another vehicle path (opposite direction)",
    "Conflict with vehicle moving across another vehicle path (through intersection)",
    "Conflict with animal",
    "Conflict with vehicle turning across another vehicle path (same direction)",
    "Conflict with merging vehicle",
    "Conflict with pedal cyclist",
    "Conflict with pedestrian",
    "Conflict with obstacle/object in roadway",
    "Conflict with oncoming traffic",
    "Unknown",
};

constexpr std::array<int, LabelVocabulary::kSize> kConflictCounts = {
    3165, 1441, 377, 173, 1508, 242, 181, 316, 170, 360, 65, 121, 64, 163, 176, 78, 19};

constexpr const char* kManifestFormat = "scvlm-manifest-1";

// Quotas within 1e-9 of an integer are treated as that integer so that, e.g.,
// 0.05 * 20 does not ceil to 2.
double snap(double q) {
  const double r = std::round(q);
  return std::abs(q - r) < 1e-9 ? r : q;
}

}  // namespace

FrameSequence::FrameSequence(int frames, int height, int width, double fps)
    : FrameSequence(frames, height, width, fps,
                    std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(frames, 0)) *
                                              std::max(height, 0) * std::max(width, 0) * 3)) {}

FrameSequence::FrameSequence(int frames, int height, int width, double fps,
                             std::vector<std::uint8_t> data)
    : frames_(frames), height_(height), width_(width), fps_(fps), data_(std::move(data)) {
  if (frames < 1 || height < 1 || width < 1) {
    throw ValidationError("frame sequence needs T, H, W >= 1 (got " + std::to_string(frames) +
                          "x" + std::to_string(height) + "x" + std::to_string(width) + ")");
  }
  if (!(fps > 0.0) || !std::isfinite(fps)) {
    throw ValidationError("frame sequence fps must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(frames) * frame_size()) {
    throw ValidationError("frame data size does not match T x H x W x 3");
  }
}

FrameSequence FrameSequence::select(std::span<const int> indices) const {
  if (indices.empty()) throw ValidationError("frame selection is empty");
  std::vector<std::uint8_t> out;
  out.reserve(indices.size() * frame_size());
  for (int t : indices) {
    if (t < 0 || t >= frames_) throw ValidationError("frame index out of range");
    auto f = frame(t);
    out.insert(out.end(), f.begin(), f.end());
  }
  return FrameSequence(static_cast<int>(indices.size()), height_, width_, fps_, std::move(out));
}

EventType event_type_from_index(int index) {
  if (index < 0 || index >= kNumEventTypes) {
    throw ValidationError("event type index out of range: " + std::to_string(index));
  }
  return static_cast<EventType>(index);
}

std::string_view event_type_name(EventType t) {
  switch (t) {
    case EventType::Crash: return "Crash";
    case EventType::TireStrike: return "TireStrike";
    case EventType::NearCrash: return "NearCrash";
    case EventType::NormalDriving: return "NormalDriving";
  }
  return "?";
}

std::string_view event_type_text(EventType t) {
  switch (t) {
    case EventType::Crash: return "Crash";
    case EventType::TireStrike: return "Tire Strike";
    case EventType::NearCrash: return "Near-Crash";
    case EventType::NormalDriving: return "Normal Driving";
  }
  return "?";
}

EventType parse_event_type(std::string_view name) {
  for (EventType t : kAllEventTypes) {
    if (name == event_type_name(t) || name == event_type_text(t)) return t;
  }
  throw ValidationError("unknown event type '" + std::string(name) + "'");
}

const LabelVocabulary& LabelVocabulary::standard() {
  static const LabelVocabulary vocab;
  return vocab;
}

std::string_view LabelVocabulary::text(int id) const {
  if (!contains(id)) throw ValidationError("conflict type id out of range: " + std::to_string(id));
  return kConflictTexts[static_cast<std::size_t>(id - 1)];
}

std::vector<int> LabelVocabulary::trainable_ids() const {
  std::vector<int> ids(kTrainable);
  for (int i = 0; i < kTrainable; ++i) ids[static_cast<std::size_t>(i)] = i + 1;
  return ids;
}

std::vector<std::string> LabelVocabulary::trainable_texts() const {
  std::vector<std::string> out;
  for (int id : trainable_ids()) out.emplace_back(text(id));
  return out;
}

int LabelVocabulary::reference_count(int id) const {
  if (!contains(id)) throw ValidationError("conflict type id out of range: " + std::to_string(id));
  return kConflictCounts[static_cast<std::size_t>(id - 1)];
}

std::string LabelVocabulary::checksum() const {
  std::uint64_t h = fnv1a64("");
  for (int id = 1; id <= kSize; ++id) {
    h = fnv1a64(text(id), h);
    h = fnv1a64(is_trainable(id) ? "\x1f+" : "\x1f-", h);
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::Train, Split::Val, Split::Test, Split::Unassigned}) {
    if (name == split_name(s)) return s;
  }
  throw ValidationError("unknown split '" + std::string(name) + "'");
}

void validate_record(const EventRecord& r) {
  if (r.event_id.empty()) throw ValidationError("record has an empty event_id");
  if (r.event_type == EventType::NormalDriving && r.conflict_type) {
    throw ValidationError("record " + r.event_id + ": NormalDriving must not carry a conflict_type");
  }
  if (r.event_type != EventType::NormalDriving && !r.conflict_type) {
    throw ValidationError("record " + r.event_id + ": " +
                          std::string(event_type_name(r.event_type)) +
                          " requires a conflict_type");
  }
  if (r.conflict_type && !LabelVocabulary::standard().is_trainable(*r.conflict_type)) {
    throw ValidationError("record " + r.event_id + ": conflict_type " +
                          std::to_string(*r.conflict_type) + " is not a trainable label (1-16)");
  }
}

std::vector<const EventRecord*> DatasetManifest::in_split(Split s) const {
  std::vector<const EventRecord*> out;
  for (const auto& r : records) {
    if (r.split == s) out.push_back(&r);
  }
  return out;
}

const EventRecord* DatasetManifest::find(std::string_view event_id) const {
  for (const auto& r : records) {
    if (r.event_id == event_id) return &r;
  }
  return nullptr;
}

std::string serialize_manifest(const DatasetManifest& m) {
  std::string out;
  ordered_json header;
  header["format"] = kManifestFormat;
  header["seed"] = m.seed;
  header["fps"] = m.fps;
  header["height"] = m.height;
  header["width"] = m.width;
  header["num_frames"] = m.num_frames;
  header["vocabulary_checksum"] = m.vocabulary_checksum;
  out += header.dump();
  out += '\n';
  for (const auto& r : m.records) {
    ordered_json j;
    j["event_id"] = r.event_id;
    j["frames_path"] = r.frames_path;
    j["event_type"] = event_type_name(r.event_type);
    if (r.conflict_type) j["conflict_type"] = *r.conflict_type;
    j["split"] = split_name(r.split);
    out += j.dump();
    out += '\n';
  }
  return out;
}

DatasetManifest parse_manifest(std::string_view text, const std::filesystem::path& root,
                               bool check_frames) {
  DatasetManifest m;
  m.root = root;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  bool have_header = false;
  std::set<std::string> ids;
  const auto fail = [&](const std::string& what) {
    throw ValidationError("manifest line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) fail("expected a JSON object");
    try {
      if (!have_header) {
        if (j.value("format", "") != kManifestFormat) fail("missing or unknown manifest header");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.fps = j.at("fps").get<double>();
        m.height = j.at("height").get<int>();
        m.width = j.at("width").get<int>();
        m.num_frames = j.at("num_frames").get<int>();
        m.vocabulary_checksum = j.at("vocabulary_checksum").get<std::string>();
        if (m.vocabulary_checksum != LabelVocabulary::standard().checksum()) {
          fail("vocabulary checksum " + m.vocabulary_checksum +
               " does not match the built-in conflict vocabulary");
        }
        if (!(m.fps > 0) || m.height < 1 || m.width < 1 || m.num_frames < 1) {
          fail("header geometry must be positive");
        }
        have_header = true;
        continue;
      }
      for (const auto& [key, _] : j.items()) {
        if (key != "event_id" && key != "frames_path" && key != "event_type" &&
            key != "conflict_type" && key != "split") {
          fail("unknown field '" + key + "'");
        }
      }
      EventRecord r;
      r.event_id = j.at("event_id").get<std::string>();
      r.frames_path = j.at("frames_path").get<std::string>();
      r.event_type = parse_event_type(j.at("event_type").get<std::string>());
      if (j.contains("conflict_type")) r.conflict_type = j.at("conflict_type").get<int>();
      r.split = parse_split(j.at("split").get<std::string>());
      validate_record(r);
      if (!ids.insert(r.event_id).second) fail("duplicate event_id '" + r.event_id + "'");
      const std::filesystem::path rel(r.frames_path);
      if (rel.empty() || rel.is_absolute()) fail("frames_path must be a relative path");
      for (const auto& part : rel) {
        if (part == "..") fail("frames_path '" + r.frames_path + "' escapes the manifest root");
      }
      if (check_frames && !std::filesystem::is_directory(root / rel)) {
        fail("dangling frames_path '" + r.frames_path + "' for " + r.event_id);
      }
      m.records.push_back(std::move(r));
    } catch (const ValidationError& e) {
      const std::string what = e.what();
      if (what.rfind("manifest line", 0) == 0) throw;
      fail(what);
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("bad field: ") + e.what());
    }
  }
  if (!have_header) throw ValidationError("manifest has no header line");
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  const std::string text = serialize_manifest(manifest);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing manifest " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_frames) {
  std::filesystem::path file = path;
  if (std::filesystem::is_directory(file)) file /= kManifestFileName;
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + file.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str(), file.parent_path(), check_frames);
}

FrameSequence extract_event_window(const FrameSequence& seq, int impact_index, int half_window) {
  if (impact_index < 0 || impact_index >= seq.frames()) {
    throw ValidationError("impact index " + std::to_string(impact_index) +
                          " outside clip of " + std::to_string(seq.frames()) + " frames");
  }
  if (half_window < 0) throw ValidationError("half window must be non-negative");
  const int first = std::max(impact_index - half_window, 0);
  const int last = std::min(impact_index + half_window, seq.frames() - 1);
  std::vector<int> idx;
  for (int t = first; t <= last; ++t) idx.push_back(t);
  return seq.select(idx);
}

SplitCounts apportion(std::size_t n, const SplitRatios& ratios) {
  const std::array<double, 3> r = {ratios.train, ratios.test, ratios.val};
  for (double v : r) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("split ratios must be positive");
  }
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double q = snap(r[i] * static_cast<double>(n));
    counts[i] = static_cast<std::size_t>(std::floor(q));
    // Quantised so that remainders equal up to rounding tie exactly.
    rem[i] = std::round((q - std::floor(q)) * 1e9) / 1e9;
    assigned += counts[i];
  }
  std::array<std::size_t, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];
  return {counts[0], counts[1], counts[2]};
}

DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitRatios& ratios,
                              std::uint64_t seed) {
  if (manifest.records.empty()) throw ValidationError("cannot split an empty manifest");
  const SplitCounts counts = apportion(manifest.records.size(), ratios);
  std::vector<std::size_t> order(manifest.records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, "split"));
  rng.shuffle(std::span<std::size_t>(order));

  DatasetManifest out = manifest;
  for (std::size_t k = 0; k < order.size(); ++k) {
    Split s = Split::Val;
    if (k < counts.train) {
      s = Split::Train;
    } else if (k < counts.train + counts.test) {
      s = Split::Test;
    }
    out.records[order[k]].split = s;
  }
  return out;
}

std::vector<EventRecord> subsample_fraction(std::span<const EventRecord> records, double fraction,
                                            std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) throw ValidationError("fraction must be in (0, 1]");
  if (records.empty()) throw ValidationError("cannot subsample an empty record set");
  std::map<int, std::vector<std::size_t>> classes;  // conflict id (0 = none) -> record indices
  for (std::size_t i = 0; i < records.size(); ++i) {
    classes[records[i].conflict_type.value_or(0)].push_back(i);
  }
  std::vector<bool> keep(records.size(), false);
  for (auto& [cls, members] : classes) {
    const double q = snap(fraction * static_cast<double>(members.size()));
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(q)));
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(cls) + 0x5100));
    rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t j = 0; j < k && j < members.size(); ++j) keep[members[j]] = true;
  }
  std::vector<EventRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep[i]) out.push_back(records[i]);
  }
  return out;
}

}  // namespace scvlm
