#include "scvlm/narrative.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdlib>

#include "http_post.hpp"
#include "json.hpp"
#include "scvlm/random.hpp"
#include "scvlm/training.hpp"

namespace scvlm {

namespace {

using Clock = std::chrono::steady_clock;
using ordered_json = nlohmann::ordered_json;

constexpr std::string_view kUserPrefix = "Describe this event: 1: ";
constexpr std::string_view kRepeatPrefix = "Restate the description. You must repeat the event type '";
constexpr std::string_view kRepeatConflict = "' and conflict type '";
constexpr std::string_view kRepeatSuffix = "' exactly.";
constexpr std::string_view kDescriptionMarker = "\nDescription: ";

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view strip_period(std::string_view s) {
  while (!s.empty() && (s.back() == '.' || s.back() == ' ')) s.remove_suffix(1);
  return s;
}

struct ClipStats {
  double level = 0.0;    // mean green intensity of the leftmost columns
  double texture = 0.0;  // mean absolute horizontal difference there
};

ClipStats clip_stats(const FrameSequence& seq) {
  const int cols = std::min(4, seq.width());
  double level = 0.0;
  double texture = 0.0;
  long n = 0;
  long m = 0;
  for (int t = 0; t < seq.frames(); ++t) {
    for (int y = 0; y < seq.height(); ++y) {
      for (int x = 0; x < cols; ++x) {
        level += seq.at(t, y, x, 1);
        ++n;
        if (x + 1 < cols) {
          texture += std::abs(static_cast<int>(seq.at(t, y, x + 1, 1)) - static_cast<int>(seq.at(t, y, x, 1)));
          ++m;
        }
      }
    }
  }
  return {level / static_cast<double>(std::max(n, 1L)), m > 0 ? texture / static_cast<double>(m) : 0.0};
}

std::string mock_environment(const FrameSequence& seq, std::uint64_t seed) {
  const ClipStats s = clip_stats(seq);
  const bool night = s.level < 80.0;
  const bool urban = night ? s.level > 54.75 : s.level > 115.0;
  const bool rain = s.texture > 6.0;
  static constexpr std::array<std::string_view, 3> kViews = {"top-down view", "overhead view",
                                                            "bird's-eye view"};
  const std::uint64_t h = mix_seed(seed, fnv1a64(std::string_view(
                                             reinterpret_cast<const char*>(seq.data().data()), seq.data().size())));
  std::string out = "Environment: ";
  out += night ? "night-time" : "daytime";
  out += rain ? ", rain" : ", clear weather";
  out += urban ? ", urban road" : ", highway";
  out += ", ";
  out += kViews[h % kViews.size()];
  out += ".";
  return out;
}

std::string mock_safety_answer(const FrameSequence& seq) {
  if (seq.frames() < 2) return "No safety critical event is visible.";
  const auto a = seq.frame(0);
  const auto b = seq.frame(seq.frames() / 2);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(static_cast<int>(a[i]) - static_cast<int>(b[i]));
  diff /= static_cast<double>(a.size());
  return diff > 12.0 ? "Another road user comes close to the ego vehicle near the middle of the clip."
                     : "No safety critical event is visible.";
}

TranscriptEntry call(const GenerationBackend& backend, const std::string& event_id, int step,
                     const FrameSequence* seq, std::string_view system, std::string_view prompt) {
  TranscriptEntry e;
  e.event_id = event_id;
  e.step = step;
  e.method = seq ? "video_describe" : "text_generate";
  e.system_prompt = std::string(system);
  e.prompt = std::string(prompt);
  const auto start = Clock::now();
  e.response = seq ? backend.video_describe(*seq, prompt) : backend.text_generate(system, prompt);
  if (!backend.deterministic()) e.duration_s = std::chrono::duration<double>(Clock::now() - start).count();
  return e;
}

ordered_json entry_to_json(const TranscriptEntry& e, bool with_duration) {
  ordered_json j;
  j["event_id"] = e.event_id;
  j["step"] = e.step;
  j["method"] = e.method;
  if (!e.system_prompt.empty()) j["system"] = e.system_prompt;
  j["prompt"] = e.prompt;
  j["response"] = e.response;
  if (with_duration) j["duration_s"] = e.duration_s;
  return j;
}

}  // namespace

std::string_view strategy_name(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::Direct: return "direct";
    case PromptStrategy::ChainOfThought: return "chain_of_thought";
    case PromptStrategy::ChainOfThoughtRepeat: return "chain_of_thought_repeat";
  }
  return "?";
}

PromptStrategy parse_strategy(std::string_view name) {
  for (auto s : {PromptStrategy::Direct, PromptStrategy::ChainOfThought, PromptStrategy::ChainOfThoughtRepeat}) {
    if (name == strategy_name(s)) return s;
  }
  throw ConfigError("unknown prompt strategy '" + std::string(name) +
                    "' (expected direct, chain_of_thought or chain_of_thought_repeat)");
}

int strategy_call_count(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::Direct: return 1;
    case PromptStrategy::ChainOfThought: return 2;
    case PromptStrategy::ChainOfThoughtRepeat: return 3;
  }
  return 0;
}

BackendError::BackendError(Kind kind, const std::string& message, std::string event_id)
    : Error(std::string(backend_error_kind_name(kind)) + " error" +
            (event_id.empty() ? "" : " for event '" + event_id + "'") + ": " + message),
      kind_(kind),
      event_id_(std::move(event_id)),
      detail_(message) {}

std::string_view backend_error_kind_name(BackendError::Kind k) {
  switch (k) {
    case BackendError::Kind::Timeout: return "timeout";
    case BackendError::Kind::Connection: return "connection";
    case BackendError::Kind::Protocol: return "protocol";
    case BackendError::Kind::Refusal: return "refusal";
  }
  return "?";
}

NarrativeError::NarrativeError(const BackendError& cause, std::string event_id,
                               std::vector<TranscriptEntry> transcript)
    : BackendError(cause.kind(), cause.detail(), std::move(event_id)), transcript_(std::move(transcript)) {}

// ---------------------------------------------------------------------------

std::string MockBackend::video_describe(const FrameSequence& seq, std::string_view prompt) const {
  if (seq.empty()) throw BackendError(BackendError::Kind::Protocol, "empty clip");
  const std::string env = mock_environment(seq, seed_);
  if (prompt == kEnvironmentPrompt) return env;
  if (prompt == kSafetyCriticalPrompt) return mock_safety_answer(seq);
  std::string_view rest = prompt;
  if (rest.starts_with(kEnvironmentPrompt)) rest.remove_prefix(kEnvironmentPrompt.size());
  while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
  return rest.empty() ? env : env + " " + std::string(rest);
}

std::string MockBackend::text_generate(std::string_view, std::string_view user) const {
  if (user.starts_with(kRepeatPrefix)) {
    std::string_view rest = user.substr(kRepeatPrefix.size());
    const std::size_t desc = rest.find(kDescriptionMarker);
    const std::string_view previous = desc == std::string_view::npos ? "" : rest.substr(desc + kDescriptionMarker.size());
    std::string_view head = rest.substr(0, desc);
    std::string event;
    std::string conflict;
    if (const std::size_t c = head.find(kRepeatConflict); c != std::string_view::npos) {
      event = head.substr(0, c);
      head.remove_prefix(c + kRepeatConflict.size());
      if (const std::size_t e = head.rfind(kRepeatSuffix); e != std::string_view::npos) conflict = head.substr(0, e);
    } else if (const std::size_t e = head.rfind(kRepeatSuffix); e != std::string_view::npos) {
      event = head.substr(0, e);
    }
    std::string out = "Event type: " + event + ".";
    if (!conflict.empty()) out += " Conflict type: " + conflict + ".";
    if (!previous.empty()) out += " " + std::string(previous);
    return out;
  }
  if (user.starts_with(kUserPrefix)) {
    std::string_view rest = user.substr(kUserPrefix.size());
    const std::size_t two = rest.find(". 2: ");
    if (two == std::string_view::npos) throw BackendError(BackendError::Kind::Protocol, "malformed event prompt");
    const std::string env(rest.substr(0, two));
    rest.remove_prefix(two + 5);
    const std::size_t three = rest.find(". 3: ");
    const std::string event = lower(strip_period(rest.substr(0, three)));
    std::string out = env + ". ";
    if (three == std::string_view::npos) {
      out += "The ego vehicle drives along the road and no safety critical event occurs.";
    } else {
      out += "The ego vehicle is involved in a " + event + " (" + lower(strip_period(rest.substr(three + 5))) + ").";
    }
    return out;
  }
  return "Response: " + std::string(strip_period(user.substr(0, user.find('\n')))) + ".";
}

// ---------------------------------------------------------------------------

HttpBackendConfig http_config_from_environment() {
  HttpBackendConfig c;
  const char* url = std::getenv("SCVLM_BACKEND_URL");
  if (!url || !*url) throw ConfigError("the http backend needs SCVLM_BACKEND_URL to be set");
  c.url = url;
  if (const char* t = std::getenv("SCVLM_BACKEND_TIMEOUT_S"); t && *t) {
    char* end = nullptr;
    c.timeout_s = std::strtod(t, &end);
    if (end == t || *end != '\0' || !(c.timeout_s > 0.0)) {
      throw ConfigError("SCVLM_BACKEND_TIMEOUT_S must be a positive number of seconds");
    }
  }
  return c;
}

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  const detail::HttpTarget t = detail::parse_http_url(config_.url);
  scheme_host_ = t.scheme_host;
  path_ = t.path;
  if (!(config_.timeout_s > 0.0)) throw ConfigError("backend timeout must be positive");
}

std::string HttpBackend::post(const std::string& body) const {
  const detail::HttpReply res = detail::post_json({scheme_host_, path_}, body, config_.timeout_s);
  if (!res.transport_ok) {
    throw BackendError(res.timed_out ? BackendError::Kind::Timeout : BackendError::Kind::Connection,
                       res.transport_error + " (" + config_.url + ")");
  }
  if (res.status == 403 || res.status == 451) {
    throw BackendError(BackendError::Kind::Refusal,
                       "backend refused the request (HTTP " + std::to_string(res.status) + ")");
  }
  if (res.status != 200) {
    throw BackendError(BackendError::Kind::Protocol, "HTTP status " + std::to_string(res.status));
  }
  ordered_json reply;
  try {
    reply = ordered_json::parse(res.body);
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(BackendError::Kind::Protocol, std::string("reply is not JSON: ") + e.what());
  }
  if (reply.contains("refusal") && reply["refusal"].is_string()) {
    throw BackendError(BackendError::Kind::Refusal, reply["refusal"].get<std::string>());
  }
  if (!reply.contains("text") || !reply["text"].is_string()) {
    throw BackendError(BackendError::Kind::Protocol, "reply lacks a string field 'text'");
  }
  return reply["text"].get<std::string>();
}

std::string HttpBackend::video_describe(const FrameSequence& seq, std::string_view prompt) const {
  ordered_json j;
  j["model"] = config_.model;
  j["system"] = "";
  j["prompt"] = prompt;
  j["max_tokens"] = config_.max_tokens;
  j["temperature"] = 0;
  j["seed"] = config_.seed;
  j["video"] = {{"frames", seq.frames()},
                {"height", seq.height()},
                {"width", seq.width()},
                {"fps", seq.fps()},
                {"rgb_base64", base64_encode(seq.data())}};
  return post(j.dump());
}

std::string HttpBackend::text_generate(std::string_view system_prompt, std::string_view user_prompt) const {
  ordered_json j;
  j["model"] = config_.model;
  j["system"] = system_prompt;
  j["prompt"] = user_prompt;
  j["max_tokens"] = config_.max_tokens;
  j["temperature"] = 0;
  j["seed"] = config_.seed;
  return post(j.dump());
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out += kAlphabet[(v >> s) & 63];
  }
  if (const std::size_t left = bytes.size() - i; left > 0) {
    const std::uint32_t v = (bytes[i] << 16) | (left == 2 ? bytes[i + 1] << 8 : 0);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += left == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string describe_environment(const GenerationBackend& backend, const FrameSequence& seq) {
  return backend.video_describe(seq, kEnvironmentPrompt);
}

std::string compose_user_prompt(std::string_view environment, EventType event_type,
                                std::optional<std::string_view> conflict_type) {
  if (environment.empty()) throw ValidationError("environment description is empty");
  std::string out = "Describe this event: 1: ";
  out += environment;
  out += ". 2: ";
  out += event_type_text(event_type);
  out += ".";
  if (event_type == EventType::NormalDriving) return out;
  if (!conflict_type || conflict_type->empty()) {
    throw ValidationError("a safety-critical event needs a conflict type for the narrative prompt");
  }
  out += " 3: ";
  out += *conflict_type;
  out += ".";
  return out;
}

std::string compose_direct_prompt(EventType event_type, std::optional<std::string_view> conflict_type) {
  std::string out(kEnvironmentPrompt);
  out += " The event type is ";
  out += event_type_text(event_type);
  out += ".";
  if (event_type == EventType::NormalDriving) return out;
  if (!conflict_type || conflict_type->empty()) {
    throw ValidationError("a safety-critical event needs a conflict type for the narrative prompt");
  }
  out += " The conflict type is ";
  out += *conflict_type;
  out += ".";
  return out;
}

std::string compose_repeat_prompt(EventType event_type, std::optional<std::string_view> conflict_type,
                                  std::string_view previous) {
  std::string out(kRepeatPrefix);
  out += event_type_text(event_type);
  if (event_type != EventType::NormalDriving) {
    if (!conflict_type || conflict_type->empty()) {
      throw ValidationError("a safety-critical event needs a conflict type for the narrative prompt");
    }
    out += kRepeatConflict;
    out += *conflict_type;
  }
  out += kRepeatSuffix;
  out += kDescriptionMarker;
  out += previous;
  return out;
}

Narrative generate_narrative(const GenerationBackend& backend, const NarrativeRequest& request) {
  if (!request.frames) throw ValidationError("narrative request for '" + request.event_id + "' has no frames");
  if (is_sce(request.event_type) && (!request.conflict_type || request.conflict_type->empty())) {
    throw ValidationError("event '" + request.event_id + "' is safety-critical but has no conflict type");
  }
  Narrative n;
  n.event_id = request.event_id;
  n.strategy = request.strategy;
  n.event_type_used = request.event_type;
  if (is_sce(request.event_type)) n.conflict_type_used = request.conflict_type;
  n.backend = backend.name();
  std::optional<std::string_view> conflict;
  if (n.conflict_type_used) conflict = *n.conflict_type_used;

  const auto start = Clock::now();
  try {
    if (request.strategy == PromptStrategy::Direct) {
      n.prompts_sent.push_back(call(backend, n.event_id, 1, request.frames, "",
                                    compose_direct_prompt(request.event_type, conflict)));
      n.final_text = n.prompts_sent.back().response;
    } else {
      n.prompts_sent.push_back(call(backend, n.event_id, 1, request.frames, "", kEnvironmentPrompt));
      n.environment_text = n.prompts_sent.back().response;
      n.prompts_sent.push_back(call(backend, n.event_id, 2, nullptr, kSystemPrompt,
                                    compose_user_prompt(strip_period(n.environment_text), request.event_type,
                                                        conflict)));
      n.final_text = n.prompts_sent.back().response;
      if (request.strategy == PromptStrategy::ChainOfThoughtRepeat) {
        n.prompts_sent.push_back(call(backend, n.event_id, 3, nullptr, kSystemPrompt,
                                      compose_repeat_prompt(request.event_type, conflict, n.final_text)));
        n.final_text = n.prompts_sent.back().response;
      }
    }
  } catch (const BackendError& e) {
    throw NarrativeError(e, n.event_id, n.prompts_sent);
  } catch (const ValidationError& e) {
    throw NarrativeError(BackendError(BackendError::Kind::Protocol, e.what()), n.event_id, n.prompts_sent);
  }
  if (n.final_text.empty()) {
    throw NarrativeError(BackendError(BackendError::Kind::Protocol, "backend returned an empty narrative"),
                         n.event_id, n.prompts_sent);
  }
  if (!backend.deterministic()) n.duration_s = std::chrono::duration<double>(Clock::now() - start).count();
  return n;
}

BenchmarkResult benchmark_prompts(const GenerationBackend& backend, const FrameSequence& seq,
                                  const std::string& event_id) {
  BenchmarkResult r;
  try {
    r.transcript.push_back(call(backend, event_id, 1, &seq, "", kEnvironmentPrompt));
    r.transcript.push_back(call(backend, event_id, 2, &seq, "", kSafetyCriticalPrompt));
  } catch (const BackendError& e) {
    throw NarrativeError(e, event_id, r.transcript);
  }
  r.text = r.transcript[0].response + "\n" + r.transcript[1].response;
  return r;
}

std::vector<NarrativeOutcome> generate_narratives(const GenerationBackend& backend,
                                                  std::span<const NarrativeRequest> requests,
                                                  int max_in_flight) {
  std::vector<NarrativeOutcome> out(requests.size());
  parallel_for(requests.size(), std::max(1, max_in_flight), [&](std::size_t i) {
    try {
      Narrative n = generate_narrative(backend, requests[i]);
      out[i].transcript = n.prompts_sent;
      out[i].narrative = std::move(n);
    } catch (const NarrativeError& e) {
      out[i].error = e.what();
      out[i].transcript = e.transcript();
    } catch (const Error& e) {
      out[i].error = e.what();
    }
  });
  return out;
}

std::string narrative_json(const Narrative& n) {
  ordered_json j;
  j["event_id"] = n.event_id;
  j["strategy"] = strategy_name(n.strategy);
  j["event_type"] = event_type_name(n.event_type_used);
  if (n.conflict_type_used) j["conflict_type"] = *n.conflict_type_used;
  j["environment"] = n.environment_text;
  j["backend"] = n.backend;
  j["calls"] = n.prompts_sent.size();
  j["prompts"] = ordered_json::array();
  for (const auto& e : n.prompts_sent) j["prompts"].push_back(e.prompt);
  j["text"] = n.final_text;
  if (n.duration_s > 0.0) j["duration_s"] = n.duration_s;
  return j.dump();
}

std::string transcript_entry_json(const TranscriptEntry& e, bool with_duration) {
  return entry_to_json(e, with_duration).dump();
}

}  // namespace scvlm
