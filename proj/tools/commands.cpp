#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "scvlm/clips.hpp"
#include "scvlm/contrastive.hpp"
#include "scvlm/data_model.hpp"
#include "scvlm/errors.hpp"
#include "scvlm/frame_io.hpp"
#include "scvlm/metrics.hpp"
#include "scvlm/narrative.hpp"
#include "scvlm/params.hpp"
#include "scvlm/supervised.hpp"
#include "scvlm/synthgen.hpp"

namespace scvlm::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kReferencesFile = "references.jsonl";

// ---------------------------------------------------------------------------
// File helpers

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return rows;
}

std::string jsonl(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

template <typename T>
T field(const json& row, const char* key, const fs::path& file) {
  try {
    return row.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(file.string() + ": record lacks a valid '" + key + "' field");
  }
}

// ---------------------------------------------------------------------------
// Shared option groups

struct VideoOptions {
  int frames = 8;
  int patch = 8;
  int patch_dim = 32;
  int pool = 2;
  int hidden = 64;
  int embed_dim = 128;
  std::string aggregation = "mean";

  void add(CLI::App* app) {
    app->add_option("--sample-frames", frames, "Frames sampled per clip")->capture_default_str();
    app->add_option("--patch", patch, "Patch edge length in pixels")->capture_default_str();
    app->add_option("--patch-dim", patch_dim, "Patch projection width")->capture_default_str();
    app->add_option("--pool", pool, "Patches per side of each pooling cell")->capture_default_str();
    app->add_option("--hidden", hidden, "Hidden width of the embedding head")->capture_default_str();
    app->add_option("--embed-dim", embed_dim, "Embedding dimension")->capture_default_str();
    app->add_option("--aggregation", aggregation, "Frame aggregation: mean or recurrent")->capture_default_str();
  }

  VideoEncoderConfig config(const DatasetManifest& m) const {
    VideoEncoderConfig c;
    c.height = m.height;
    c.width = m.width;
    c.patch = patch;
    c.frames = frames;
    c.patch_dim = patch_dim;
    c.pool = pool;
    c.hidden = hidden;
    c.embed_dim = embed_dim;
    c.aggregation = parse_aggregation(aggregation);
    c.validate();
    return c;
  }
};

void write_resolved_config(const CLI::App& sub, const fs::path& path) {
  std::ostringstream text;
  text << "# scvlm " << sub.get_name() << " resolved configuration\n";
  text << "[" << sub.get_name() << "]\n";
  text << sub.config_to_str(true, false);
  write_text(path, text.str());
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string out;
  std::uint64_t seed = 7;
  std::string profile = "balanced";
  int per_event_type = 10;
  std::vector<std::string> event_types{"Crash", "TireStrike", "NearCrash", "NormalDriving"};
  std::vector<int> conflicts{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
  int sce = 100;
  int normal = 100;
  int num_frames = 77;
  int height = 64;
  int width = 64;
  double fps = 15.0;
  int threads = 0;
};

std::vector<synth::ClassCount> synth_counts(const SynthOptions& o) {
  if (o.profile == "proportional") return synth::proportional_profile(o.sce, o.normal);
  if (o.profile != "balanced") throw ConfigError("profile must be balanced or proportional");
  if (o.per_event_type < 0) throw ConfigError("--per-event-type must be non-negative");
  std::vector<synth::ClassCount> counts;
  for (const auto& name : o.event_types) {
    const EventType t = parse_event_type(name);
    if (!is_sce(t)) {
      counts.push_back({t, std::nullopt, o.per_event_type});
      continue;
    }
    if (o.conflicts.empty()) throw ConfigError("safety-critical events need at least one conflict type");
    const auto k = static_cast<int>(o.conflicts.size());
    for (int i = 0; i < k; ++i) {
      const int id = o.conflicts[static_cast<std::size_t>(i)];
      if (!LabelVocabulary::standard().is_trainable(id)) {
        throw ConfigError("conflict type " + std::to_string(id) + " is not a trainable label");
      }
      counts.push_back({t, id, o.per_event_type / k + (i < o.per_event_type % k ? 1 : 0)});
    }
  }
  return counts;
}

int cmd_synth(const SynthOptions& o, const CLI::App& sub, std::ostream& out) {
  synth::GenerationOptions g;
  g.seed = o.seed;
  g.num_frames = o.num_frames;
  g.height = o.height;
  g.width = o.width;
  g.fps = o.fps;
  g.threads = o.threads;
  const fs::path root(o.out);
  const DatasetManifest m = synth::generate_dataset(synth_counts(o), root, g);
  std::vector<std::string> refs;
  for (const auto& r : m.records) {
    json j;
    j["event_id"] = r.event_id;
    j["text"] = synth::reference_narrative(synth::spec_for_record(m, r));
    refs.push_back(j.dump());
  }
  write_text(root / kReferencesFile, jsonl(refs));
  write_resolved_config(sub, root / "synth_config.toml");
  out << (root / kManifestFileName).string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// split

struct SplitOptions {
  std::string dataset;
  std::uint64_t seed = 7;
  double train = 0.7;
  double test = 0.2;
  double val = 0.1;
};

int cmd_split(const SplitOptions& o, const CLI::App& sub, std::ostream& out) {
  const DatasetManifest m = load_manifest(o.dataset);
  const DatasetManifest s = split_dataset(m, {o.train, o.test, o.val}, o.seed);
  save_manifest(s, m.root / kManifestFileName);
  write_resolved_config(sub, m.root / "split_config.toml");
  out << "train " << s.in_split(Split::Train).size() << ", test " << s.in_split(Split::Test).size() << ", val "
      << s.in_split(Split::Val).size() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string task;
  std::string dataset;
  std::string out;
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
  double fraction = 1.0;
  int threads = 0;
  VideoOptions video;
  int text_slots = 4096;
  int token_dim = 64;
  double initial_tau = kInitialTau;
};

std::vector<EventRecord> split_records(const DatasetManifest& m, Split s, bool conflict_only) {
  std::vector<EventRecord> out;
  for (const EventRecord* r : m.in_split(s)) {
    if (conflict_only && !(r->conflict_type && LabelVocabulary::standard().is_trainable(*r->conflict_type))) continue;
    out.push_back(*r);
  }
  if (out.empty()) {
    throw ConfigError("no " + std::string(conflict_only ? "conflict-labelled " : "") + "records in the " +
                      std::string(split_name(s)) + " split; run `scvlm split` first");
  }
  return out;
}

int cmd_train(const TrainOptions& o, const CLI::App& sub, std::ostream& out) {
  const bool conflict = o.task == "conflict";
  const DatasetManifest m = load_manifest(o.dataset);
  std::vector<EventRecord> train = split_records(m, Split::Train, conflict);
  const std::vector<EventRecord> val = split_records(m, Split::Val, conflict);
  if (o.fraction <= 0.0 || o.fraction > 1.0) throw ConfigError("--fraction must lie in (0, 1]");
  if (o.fraction < 1.0) train = subsample_fraction(train, o.fraction, o.seed);

  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.learning_rate = o.learning_rate;
  tc.seed = o.seed;
  tc.threads = o.threads;
  const VideoEncoderConfig vc = o.video.config(m);
  const auto train_clips = load_clips(m, train, vc.frames, o.threads);
  const auto val_clips = load_clips(m, val, vc.frames, o.threads);
  out << "training " << o.task << " model on " << train_clips.size() << " events (" << val_clips.size()
      << " validation)\n";

  const fs::path dir(o.out);
  std::vector<std::string> log;
  const auto echo = [&](const EpochRecord& r) {
    log.push_back(epoch_record_json(r));
    out << log.back() << "\n";
  };
  ParamSet params;
  TrainingOutcome outcome;
  if (conflict) {
    ContrastiveTrainConfig cc;
    cc.train = tc;
    cc.video = vc;
    cc.text.slots = o.text_slots;
    cc.text.token_dim = o.token_dim;
    cc.text.hidden = vc.hidden;
    cc.text.embed_dim = vc.embed_dim;
    cc.initial_tau = o.initial_tau;
    ContrastiveResult r = train_contrastive(cc, train_clips, val_clips);
    params = std::move(r.model.params());
    outcome = std::move(r.outcome);
  } else {
    SupervisedTrainConfig sc;
    sc.train = tc;
    sc.encoder = vc;
    SupervisedResult r = train_supervised(sc, train_clips, val_clips);
    params = std::move(r.model.params());
    outcome = std::move(r.outcome);
  }
  for (const auto& r : outcome.log) echo(r);
  fs::create_directories(dir);
  save_checkpoint(params, dir / (o.task + ".ckpt"));
  write_text(dir / (o.task + "_log.jsonl"), jsonl(log));
  write_resolved_config(sub, dir / ("train_" + o.task + "_config.toml"));
  out << "best epoch " << outcome.best_epoch << ", validation accuracy " << outcome.best_val_accuracy << "\n";
  out << (dir / (o.task + ".ckpt")).string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
  std::string dataset;
  std::string event_model;
  std::string conflict_model;
  std::string split = "test";
  std::string out;
  bool force_conflict = false;
  int top_k = 5;
  int threads = 0;
};

std::vector<const EventRecord*> selected_records(const DatasetManifest& m, const std::string& split) {
  if (split == "all") {
    std::vector<const EventRecord*> all;
    for (const auto& r : m.records) all.push_back(&r);
    return all;
  }
  auto rs = m.in_split(parse_split(split));
  if (rs.empty()) throw ConfigError("no records in the " + split + " split");
  return rs;
}

int cmd_infer(const InferOptions& o, const CLI::App& sub, std::ostream& out) {
  const DatasetManifest m = load_manifest(o.dataset);
  const SupervisedModel event_model(load_checkpoint(o.event_model));
  const ContrastiveModel conflict_model(load_checkpoint(o.conflict_model));
  if (o.top_k < 1) throw ConfigError("--top-k must be positive");
  const auto& vocab = LabelVocabulary::standard();
  const LabelBank bank = encode_labels(conflict_model, vocab);
  const auto records = selected_records(m, o.split);

  std::vector<std::string> lines(records.size());
  parallel_for(records.size(), o.threads, [&](std::size_t i) {
    const EventRecord& r = *records[i];
    const FrameSequence seq = load_frames(m.root / r.frames_path, m.fps);
    event_model.encoder().check_geometry(seq);
    conflict_model.video_encoder().check_geometry(seq);
    const ScoreVector scores = forward_scores(event_model, seq);
    const EventType predicted = predict_event_type(scores);
    json j;
    j["event_id"] = r.event_id;
    j["event_type"] = event_type_name(predicted);
    j["event_scores"] = std::vector<double>(scores.data(), scores.data() + scores.size());
    if (is_sce(predicted) || o.force_conflict) {
      const ConflictPrediction c = infer_conflict_type(conflict_model, bank, seq);
      j["conflict_type"] = c.label_id;
      j["conflict_label"] = vocab.text(c.label_id);
      json top = json::array();
      for (std::size_t k = 0; k < std::min<std::size_t>(static_cast<std::size_t>(o.top_k), c.ranked.size()); ++k) {
        top.push_back({{"id", c.ranked[k].first}, {"label", vocab.text(c.ranked[k].first)},
                       {"score", c.ranked[k].second}});
      }
      j["conflict_top"] = top;
      std::vector<double> by_id(bank.ids.size());
      for (const auto& [id, score] : c.ranked) by_id[static_cast<std::size_t>(id - 1)] = score;
      j["conflict_scores"] = by_id;
    }
    lines[i] = j.dump();
  });
  const fs::path file(o.out);
  write_text(file, jsonl(lines));
  write_resolved_config(sub, file.parent_path() / "infer_config.toml");
  out << records.size() << " predictions written to " << file.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// narrate

struct NarrateOptions {
  std::string dataset;
  std::string predictions;
  std::string out;
  std::string backend = "mock";
  std::string strategy = "chain_of_thought_repeat";
  std::string model = "default";
  std::uint64_t seed = 0;
  int max_in_flight = 1;
  bool benchmark = false;
};

std::unique_ptr<GenerationBackend> make_backend(const NarrateOptions& o) {
  if (o.backend == "mock") return std::make_unique<MockBackend>(o.seed);
  if (o.backend == "http") {
    HttpBackendConfig c = http_config_from_environment();
    c.model = o.model;
    c.seed = o.seed;
    return std::make_unique<HttpBackend>(c);
  }
  throw ConfigError("backend must be mock or http");
}

int cmd_narrate(const NarrateOptions& o, const CLI::App& sub, std::ostream& out) {
  const auto backend = make_backend(o);
  const PromptStrategy strategy = parse_strategy(o.strategy);
  const DatasetManifest m = load_manifest(o.dataset);
  const fs::path pred_file(o.predictions);
  const auto rows = read_jsonl(pred_file);
  const auto& vocab = LabelVocabulary::standard();

  std::vector<FrameSequence> frames(rows.size());
  std::vector<NarrativeRequest> requests(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    NarrativeRequest& q = requests[i];
    q.event_id = field<std::string>(rows[i], "event_id", pred_file);
    const EventRecord* r = m.find(q.event_id);
    if (!r) throw ValidationError("prediction for unknown event '" + q.event_id + "'");
    frames[i] = load_frames(m.root / r->frames_path, m.fps);
    q.frames = &frames[i];
    q.event_type = parse_event_type(field<std::string>(rows[i], "event_type", pred_file));
    if (is_sce(q.event_type) && rows[i].contains("conflict_type")) {
      q.conflict_type = std::string(vocab.text(field<int>(rows[i], "conflict_type", pred_file)));
    }
    q.strategy = strategy;
  }

  std::vector<std::string> narratives;
  std::vector<std::string> transcripts;
  std::size_t failures = 0;
  const bool timed = !backend->deterministic();
  if (o.benchmark) {
    for (std::size_t i = 0; i < requests.size(); ++i) {
      json j;
      j["event_id"] = requests[i].event_id;
      j["strategy"] = "benchmark";
      try {
        const BenchmarkResult b = benchmark_prompts(*backend, frames[i], requests[i].event_id);
        j["text"] = b.text;
        for (const auto& e : b.transcript) transcripts.push_back(transcript_entry_json(e, timed));
      } catch (const NarrativeError& e) {
        j["error"] = e.what();
        for (const auto& t : e.transcript()) transcripts.push_back(transcript_entry_json(t, timed));
        ++failures;
      }
      narratives.push_back(j.dump());
    }
  } else {
    const auto outcomes = generate_narratives(*backend, requests, o.max_in_flight);
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      if (outcomes[i].narrative) {
        narratives.push_back(narrative_json(*outcomes[i].narrative));
      } else {
        json j;
        j["event_id"] = requests[i].event_id;
        j["error"] = *outcomes[i].error;
        narratives.push_back(j.dump());
        ++failures;
      }
      for (const auto& e : outcomes[i].transcript) transcripts.push_back(transcript_entry_json(e, timed));
    }
  }
  const fs::path dir(o.out);
  write_text(dir / "narratives.jsonl", jsonl(narratives));
  write_text(dir / "transcripts.jsonl", jsonl(transcripts));
  write_resolved_config(sub, dir / "narrate_config.toml");
  out << "narrated " << requests.size() - failures << " of " << requests.size() << " events, " << failures
      << " failed, " << transcripts.size() << " backend calls\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
  std::string dataset;
  std::string predictions;
  std::string narratives;
  std::string references;
  std::string out;
  std::string subset = "all";
  std::string bert = "none";
  std::string bert_url;
  int top_k = 5;
  int threads = 0;
};

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json report_json(const ClassificationReport& r, const std::vector<std::string>& class_names) {
  json j;
  j["samples"] = r.samples;
  j["accuracy"] = r.accuracy;
  j["top_k"] = r.k;
  j["top_k_accuracy"] = r.top_k_accuracy;
  j["mAP"] = r.mean_average_precision;
  j["auc"] = optional_number(r.auc);
  j["balanced_accuracy"] = r.balanced_accuracy;
  j["macro_precision"] = r.macro_precision;
  j["macro_recall"] = r.macro_recall;
  j["macro_f1"] = r.macro_f1;
  json rows = json::array();
  for (const auto& c : r.per_class) {
    rows.push_back({{"class", class_names[static_cast<std::size_t>(c.label)]},
                    {"support", c.support},
                    {"precision", c.precision},
                    {"recall", c.recall},
                    {"f1", c.f1},
                    {"average_precision", c.average_precision},
                    {"auc", optional_number(c.auc)}});
  }
  j["per_class"] = rows;
  return j;
}

json text_score_json(const TextScore& s) {
  json j;
  j["rouge_l_f1"] = s.rouge_l_f1;
  j["meteor"] = s.meteor;
  if (s.bert_f1) j["bert_f1"] = *s.bert_f1;
  return j;
}

void require_known(const std::vector<std::string>& ids, const DatasetManifest& m, const std::string& what) {
  std::vector<std::string> missing;
  for (const auto& id : ids) {
    if (!m.find(id)) missing.push_back(id);
  }
  if (missing.empty()) return;
  std::string list;
  for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
  if (missing.size() > 20) list += ", ...";
  throw ValidationError(what + " mention " + std::to_string(missing.size()) + " event id(s) absent from the dataset: " + list);
}

int cmd_evaluate(const EvaluateOptions& o, const CLI::App& sub, std::ostream& out) {
  if (o.predictions.empty() && o.narratives.empty()) {
    throw ConfigError("evaluate needs --predictions and/or --narratives");
  }
  if (o.subset != "all" && o.subset != "sce") throw ConfigError("--subset must be all or sce");
  const bool sce_only = o.subset == "sce";
  const DatasetManifest m = load_manifest(o.dataset, false);
  const auto& vocab = LabelVocabulary::standard();
  const fs::path dir(o.out);

  if (!o.predictions.empty()) {
    const fs::path file(o.predictions);
    const auto rows = read_jsonl(file);
    std::vector<std::string> ids;
    for (const auto& row : rows) ids.push_back(field<std::string>(row, "event_id", file));
    require_known(ids, m, "predictions");

    std::vector<int> ev_true;
    std::vector<std::vector<double>> ev_scores;
    std::vector<int> ct_true;
    std::vector<std::vector<double>> ct_scores;
    std::size_t ungated = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const EventRecord& r = *m.find(ids[i]);
      if (sce_only && !is_sce(r.event_type)) continue;
      ev_true.push_back(event_index(r.event_type));
      ev_scores.push_back(field<std::vector<double>>(rows[i], "event_scores", file));
      if (r.conflict_type && vocab.is_trainable(*r.conflict_type)) {
        if (rows[i].contains("conflict_scores")) {
          ct_true.push_back(*r.conflict_type - 1);
          ct_scores.push_back(field<std::vector<double>>(rows[i], "conflict_scores", file));
        } else {
          ++ungated;
        }
      }
    }
    const auto to_matrix = [&](const std::vector<std::vector<double>>& rows_, std::size_t cols) {
      Eigen::MatrixXd mtx(static_cast<Eigen::Index>(rows_.size()), static_cast<Eigen::Index>(cols));
      for (std::size_t i = 0; i < rows_.size(); ++i) {
        if (rows_[i].size() != cols) throw ValidationError("score vector has the wrong length");
        for (std::size_t c = 0; c < cols; ++c) mtx(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows_[i][c];
      }
      return mtx;
    };
    json report;
    report["subset"] = o.subset;
    std::vector<std::string> ev_names;
    for (EventType t : kAllEventTypes) ev_names.emplace_back(event_type_name(t));
    if (ev_true.empty()) throw ValidationError("no predictions fall in the requested subset");
    const auto ev = classification_report(ev_true, to_matrix(ev_scores, kNumEventTypes), std::min(o.top_k, kNumEventTypes));
    report["event_type"] = report_json(ev, ev_names);
    out << "event type: accuracy " << ev.accuracy << ", macro F1 " << ev.macro_f1 << " over " << ev.samples
        << " events\n";
    if (!ct_true.empty()) {
      std::vector<std::string> ct_names;
      for (int id : vocab.trainable_ids()) ct_names.emplace_back(vocab.text(id));
      const auto ct = classification_report(ct_true, to_matrix(ct_scores, ct_names.size()), o.top_k);
      report["conflict_type"] = report_json(ct, ct_names);
      out << "conflict type: accuracy " << ct.accuracy << ", top-" << ct.k << " " << ct.top_k_accuracy << " over "
          << ct.samples << " events\n";
    } else {
      report["conflict_type"] = nullptr;
    }
    report["conflict_without_prediction"] = ungated;
    write_text(dir / "classification_report.json", report.dump(2) + "\n");
  }

  if (!o.narratives.empty()) {
    const fs::path nfile(o.narratives);
    const fs::path rfile = o.references.empty() ? m.root / kReferencesFile : fs::path(o.references);
    const auto nrows = read_jsonl(nfile);
    std::map<std::string, std::string> refs;
    for (const auto& row : read_jsonl(rfile)) {
      refs[field<std::string>(row, "event_id", rfile)] = field<std::string>(row, "text", rfile);
    }
    std::vector<std::string> ids;
    for (const auto& row : nrows) ids.push_back(field<std::string>(row, "event_id", nfile));
    require_known(ids, m, "narratives");
    std::vector<std::string> missing;
    for (const auto& id : ids) {
      if (!refs.contains(id)) missing.push_back(id);
    }
    if (!missing.empty()) {
      throw ValidationError("no reference narrative for " + std::to_string(missing.size()) +
                            " event(s), first: " + missing.front());
    }

    std::unique_ptr<EmbeddingProvider> provider;
    if (o.bert == "hash") {
      provider = std::make_unique<HashEmbeddingProvider>();
    } else if (o.bert == "http") {
      if (o.bert_url.empty()) throw ConfigError("--bert http needs --bert-url");
      provider = std::make_unique<HttpEmbeddingProvider>(o.bert_url);
    } else if (o.bert != "none") {
      throw ConfigError("--bert must be none, hash or http");
    }

    std::vector<NarrativePair> pairs;
    std::vector<std::pair<std::string, std::string>> failed;
    for (std::size_t i = 0; i < nrows.size(); ++i) {
      const bool sce = is_sce(m.find(ids[i])->event_type);
      if (sce_only && !sce) continue;
      if (nrows[i].contains("error")) {
        failed.emplace_back(ids[i], field<std::string>(nrows[i], "error", nfile));
        continue;
      }
      pairs.push_back({ids[i], field<std::string>(nrows[i], "text", nfile), refs[ids[i]], sce});
    }
    if (pairs.empty()) throw ValidationError("no scorable narratives in the requested subset");
    NarrativeEvaluation ev = evaluate_narratives(pairs, provider.get(), o.threads);
    ev.excluded.insert(ev.excluded.end(), failed.begin(), failed.end());

    std::vector<std::string> lines;
    for (const auto& p : ev.pairs) {
      json j;
      j["event_id"] = p.event_id;
      j["sce"] = p.safety_critical;
      j.update(text_score_json(p.score));
      lines.push_back(j.dump());
    }
    json summary;
    summary["subset"] = o.subset;
    summary["events"] = ev.all.count;
    summary["mean"] = text_score_json(ev.all.mean);
    summary["sce_events"] = ev.sce.count;
    summary["sce_mean"] = ev.sce.count ? text_score_json(ev.sce.mean) : json(nullptr);
    json excluded = json::array();
    for (const auto& [id, why] : ev.excluded) excluded.push_back({{"event_id", id}, {"error", why}});
    summary["excluded"] = excluded;
    lines.push_back(json{{"summary", summary}}.dump());
    write_text(dir / "narrative_report.jsonl", jsonl(lines));
    out << "narratives: ROUGE-L " << ev.all.mean.rouge_l_f1 << ", METEOR " << ev.all.mean.meteor;
    if (ev.all.mean.bert_f1) out << ", BERTScore " << *ev.all.mean.bert_f1;
    out << " over " << ev.all.count << " events (" << ev.excluded.size() << " excluded)\n";
  }
  write_resolved_config(sub, dir / "evaluate_config.toml");
  return kOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e)) return kConfig;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return kIo;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const CompatibilityError*>(&e)) return kCompatibility;
  if (dynamic_cast<const BackendError*>(&e)) return kIo;
  return kUnexpected;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Safety-critical driving event classification and narration", "scvlm"};
  app.set_config("--config", "", "Read options from a TOML/INI file");
  app.allow_config_extras(false);
  app.require_subcommand(1);

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--out", so.out, "Dataset root directory")->required();
  synth->add_option("--seed", so.seed, "Master seed")->capture_default_str();
  synth->add_option("--profile", so.profile, "balanced or proportional")->capture_default_str();
  synth->add_option("--per-event-type", so.per_event_type, "Events per event type (balanced)")->capture_default_str();
  synth->add_option("--event-types", so.event_types, "Event types to generate (balanced)")->capture_default_str();
  synth->add_option("--conflicts", so.conflicts, "Conflict type ids spread over SCEs (balanced)")->capture_default_str();
  synth->add_option("--sce", so.sce, "Safety-critical events (proportional)")->capture_default_str();
  synth->add_option("--normal", so.normal, "Normal-driving events (proportional)")->capture_default_str();
  synth->add_option("--frames", so.num_frames, "Frames per clip")->capture_default_str();
  synth->add_option("--height", so.height, "Frame height")->capture_default_str();
  synth->add_option("--width", so.width, "Frame width")->capture_default_str();
  synth->add_option("--fps", so.fps, "Frame rate")->capture_default_str();
  synth->add_option("--threads", so.threads, "Worker threads (0 = all cores)")->capture_default_str();

  SplitOptions sp;
  auto* split = app.add_subcommand("split", "Assign train/test/val splits in place");
  split->add_option("--dataset", sp.dataset, "Dataset root or manifest file")->required();
  split->add_option("--seed", sp.seed, "Shuffle seed")->capture_default_str();
  split->add_option("--train", sp.train, "Train ratio")->capture_default_str();
  split->add_option("--test", sp.test, "Test ratio")->capture_default_str();
  split->add_option("--val", sp.val, "Validation ratio")->capture_default_str();

  TrainOptions to;
  auto* train = app.add_subcommand("train", "Train the event-type or conflict-type model");
  train->add_option("task", to.task, "event or conflict")->required()->check(CLI::IsMember({"event", "conflict"}));
  train->add_option("--dataset", to.dataset, "Dataset root or manifest file")->required();
  train->add_option("--out", to.out, "Output directory")->required();
  train->add_option("--epochs", to.epochs, "Training epochs")->capture_default_str();
  train->add_option("--batch-size", to.batch_size, "Minibatch size")->capture_default_str();
  train->add_option("--lr", to.learning_rate, "Learning rate")->capture_default_str();
  train->add_option("--seed", to.seed, "Initialisation and shuffling seed")->capture_default_str();
  train->add_option("--fraction", to.fraction, "Per-class fraction of the train split to keep")->capture_default_str();
  train->add_option("--threads", to.threads, "Worker threads (0 = all cores)")->capture_default_str();
  train->add_option("--text-slots", to.text_slots, "Token hash slots (conflict task)")->capture_default_str();
  train->add_option("--token-dim", to.token_dim, "Token vector width (conflict task)")->capture_default_str();
  train->add_option("--initial-tau", to.initial_tau, "Initial temperature (conflict task)")->capture_default_str();
  to.video.add(train);

  InferOptions io;
  auto* infer = app.add_subcommand("infer", "Predict event and conflict types");
  infer->add_option("--dataset", io.dataset, "Dataset root or manifest file")->required();
  infer->add_option("--event-model", io.event_model, "Event-type checkpoint")->required();
  infer->add_option("--conflict-model", io.conflict_model, "Conflict-type checkpoint")->required();
  infer->add_option("--split", io.split, "train, val, test or all")->capture_default_str();
  infer->add_option("--out", io.out, "Predictions file (JSON lines)")->required();
  infer->add_flag("--force-conflict", io.force_conflict, "Predict conflict types for every event");
  infer->add_option("--top-k", io.top_k, "Length of the ranked conflict list")->capture_default_str();
  infer->add_option("--threads", io.threads, "Worker threads (0 = all cores)")->capture_default_str();

  NarrateOptions no;
  auto* narrate = app.add_subcommand("narrate", "Generate event narratives");
  narrate->add_option("--dataset", no.dataset, "Dataset root or manifest file")->required();
  narrate->add_option("--predictions", no.predictions, "Predictions file from `scvlm infer`")->required();
  narrate->add_option("--out", no.out, "Output directory")->required();
  narrate->add_option("--backend", no.backend, "mock or http")->capture_default_str();
  narrate->add_option("--strategy", no.strategy, "direct, chain_of_thought or chain_of_thought_repeat")
      ->capture_default_str();
  narrate->add_option("--model", no.model, "Model name sent to the http backend")->capture_default_str();
  narrate->add_option("--seed", no.seed, "Backend seed")->capture_default_str();
  narrate->add_option("--max-in-flight", no.max_in_flight, "Events narrated concurrently")->capture_default_str();
  narrate->add_flag("--benchmark", no.benchmark, "Run the two baseline prompts instead of the pipeline");

  EvaluateOptions eo;
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions and narratives");
  evaluate->add_option("--dataset", eo.dataset, "Dataset root or manifest file")->required();
  evaluate->add_option("--predictions", eo.predictions, "Predictions file");
  evaluate->add_option("--narratives", eo.narratives, "Narratives file");
  evaluate->add_option("--references", eo.references, "Reference narratives (default: <dataset>/references.jsonl)");
  evaluate->add_option("--out", eo.out, "Report directory")->required();
  evaluate->add_option("--subset", eo.subset, "all or sce")->capture_default_str();
  evaluate->add_option("--bert", eo.bert, "BERTScore provider: none, hash or http")->capture_default_str();
  evaluate->add_option("--bert-url", eo.bert_url, "Embedding service URL for --bert http");
  evaluate->add_option("--top-k", eo.top_k, "k for top-k accuracy")->capture_default_str();
  evaluate->add_option("--threads", eo.threads, "Worker threads (0 = all cores)")->capture_default_str();

  for (CLI::App* sub : {synth, split, train, infer, narrate, evaluate}) sub->allow_config_extras(false);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*synth) return cmd_synth(so, *synth, out);
    if (*split) return cmd_split(sp, *split, out);
    if (*train) return cmd_train(to, *train, out);
    if (*infer) return cmd_infer(io, *infer, out);
    if (*narrate) return cmd_narrate(no, *narrate, out);
    if (*evaluate) return cmd_evaluate(eo, *evaluate, out);
  } catch (const std::exception& e) {
    err << "scvlm: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kConfig;
}

}  // namespace scvlm::cli
