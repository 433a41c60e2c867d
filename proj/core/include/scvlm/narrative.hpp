#pragma once

// Narrative generation over a pluggable text/video generation backend.
//
// Strategies:
//   Direct                one video_describe call with a combined prompt
//   ChainOfThought        environment description, then text_generate with the
//                         classifier outputs composed into the user prompt
//   ChainOfThoughtRepeat  as ChainOfThought, then a restatement call that must
//                         repeat the event type and conflict type verbatim

#include <chrono>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "scvlm/data_model.hpp"
#include "scvlm/errors.hpp"

namespace scvlm {

inline constexpr std::string_view kEnvironmentPrompt = "Describe this driving event from dashcam view.";
inline constexpr std::string_view kSystemPrompt = "This is related to a driving event. Describe objectively.";
inline constexpr std::string_view kSafetyCriticalPrompt = "If there is a safety critical event, describe it.";

enum class PromptStrategy { Direct, ChainOfThought, ChainOfThoughtRepeat };

std::string_view strategy_name(PromptStrategy s);  // direct, chain_of_thought, chain_of_thought_repeat
PromptStrategy parse_strategy(std::string_view name);
int strategy_call_count(PromptStrategy s);

class BackendError : public Error {
 public:
  enum class Kind { Timeout, Connection, Protocol, Refusal };

  BackendError(Kind kind, const std::string& message, std::string event_id = {});

  Kind kind() const { return kind_; }
  const std::string& event_id() const { return event_id_; }
  const std::string& detail() const { return detail_; }

 private:
  Kind kind_;
  std::string event_id_;
  std::string detail_;
};

std::string_view backend_error_kind_name(BackendError::Kind k);

class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;

  virtual std::string name() const = 0;
  // True when responses depend only on the inputs; wall-clock timings are then not recorded.
  virtual bool deterministic() const = 0;

  virtual std::string video_describe(const FrameSequence& seq, std::string_view prompt) const = 0;
  virtual std::string text_generate(std::string_view system_prompt, std::string_view user_prompt) const = 0;
};

// Seeded template filler. Environment text is read off the clip's pixel
// statistics; structured prompts are echoed back so the pipeline logic can be
// checked exactly.
class MockBackend final : public GenerationBackend {
 public:
  explicit MockBackend(std::uint64_t seed = 0) : seed_(seed) {}

  std::string name() const override { return "mock"; }
  bool deterministic() const override { return true; }
  std::string video_describe(const FrameSequence& seq, std::string_view prompt) const override;
  std::string text_generate(std::string_view system_prompt, std::string_view user_prompt) const override;

 private:
  std::uint64_t seed_;
};

struct HttpBackendConfig {
  std::string url;  // http://host[:port][/path]
  std::string model = "default";
  double timeout_s = 120.0;
  int max_tokens = 512;
  std::uint64_t seed = 0;
};

// Reads SCVLM_BACKEND_URL (required) and SCVLM_BACKEND_TIMEOUT_S (default 120).
HttpBackendConfig http_config_from_environment();

// POSTs one JSON object per call:
//   {"model","system","prompt","max_tokens","temperature":0,"seed"[,"video"]}
// and reads the "text" field of the JSON reply. "video" carries the clip as
// {"frames","height","width","fps","rgb_base64"} for video_describe calls.
class HttpBackend final : public GenerationBackend {
 public:
  explicit HttpBackend(HttpBackendConfig config);

  std::string name() const override { return "http:" + config_.model; }
  bool deterministic() const override { return false; }
  std::string video_describe(const FrameSequence& seq, std::string_view prompt) const override;
  std::string text_generate(std::string_view system_prompt, std::string_view user_prompt) const override;

  const HttpBackendConfig& config() const { return config_; }

 private:
  std::string post(const std::string& body) const;

  HttpBackendConfig config_;
  std::string scheme_host_;
  std::string path_;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);

struct TranscriptEntry {
  std::string event_id;
  int step = 0;
  std::string method;  // video_describe | text_generate
  std::string system_prompt;
  std::string prompt;
  std::string response;
  double duration_s = 0.0;
};

struct Narrative {
  std::string event_id;
  PromptStrategy strategy = PromptStrategy::ChainOfThought;
  std::string environment_text;
  EventType event_type_used = EventType::NormalDriving;
  std::optional<std::string> conflict_type_used;
  std::vector<TranscriptEntry> prompts_sent;
  std::string final_text;
  std::string backend;
  double duration_s = 0.0;
};

// Failure of one event; `transcript` holds the calls that completed.
class NarrativeError : public BackendError {
 public:
  NarrativeError(const BackendError& cause, std::string event_id, std::vector<TranscriptEntry> transcript);
  const std::vector<TranscriptEntry>& transcript() const { return transcript_; }

 private:
  std::vector<TranscriptEntry> transcript_;
};

std::string describe_environment(const GenerationBackend& backend, const FrameSequence& seq);

// "Describe this event: 1: <env>. 2: Normal Driving." or
// "Describe this event: 1: <env>. 2: <event type>. 3: <conflict type>."
std::string compose_user_prompt(std::string_view environment, EventType event_type,
                                std::optional<std::string_view> conflict_type);

// "Describe this driving event from dashcam view. The event type is <X>.[ The conflict type is <Y>.]"
std::string compose_direct_prompt(EventType event_type, std::optional<std::string_view> conflict_type);

// "Restate the description. You must repeat the event type '<X>' and conflict type '<Y>' exactly."
// followed by "\nDescription: <previous>". Normal driving omits the conflict clause.
std::string compose_repeat_prompt(EventType event_type, std::optional<std::string_view> conflict_type,
                                  std::string_view previous);

struct NarrativeRequest {
  std::string event_id;
  const FrameSequence* frames = nullptr;
  EventType event_type = EventType::NormalDriving;
  std::optional<std::string> conflict_type;  // label text; required for safety-critical events
  PromptStrategy strategy = PromptStrategy::ChainOfThoughtRepeat;
};

// Throws ValidationError for malformed requests and NarrativeError for backend failures.
Narrative generate_narrative(const GenerationBackend& backend, const NarrativeRequest& request);

struct BenchmarkResult {
  std::string text;  // first response + "\n" + second response
  std::vector<TranscriptEntry> transcript;
};

BenchmarkResult benchmark_prompts(const GenerationBackend& backend, const FrameSequence& seq,
                                  const std::string& event_id = {});

struct NarrativeOutcome {
  std::optional<Narrative> narrative;
  std::optional<std::string> error;
  std::vector<TranscriptEntry> transcript;  // complete or partial
};

// Events run concurrently up to `max_in_flight`; calls within one event stay sequential.
std::vector<NarrativeOutcome> generate_narratives(const GenerationBackend& backend,
                                                  std::span<const NarrativeRequest> requests,
                                                  int max_in_flight = 1);

std::string narrative_json(const Narrative& n);
std::string transcript_entry_json(const TranscriptEntry& e, bool with_duration);

}  // namespace scvlm
