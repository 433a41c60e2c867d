#include "scvlm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>

#include "http_post.hpp"
#include "json.hpp"
#include "scvlm/errors.hpp"
#include "scvlm/random.hpp"
#include "scvlm/text.hpp"
#include "scvlm/training.hpp"

namespace scvlm {

namespace {

std::vector<std::string> nonempty_tokens(std::string_view text, const char* role) {
  auto t = tokenize(text);
  if (t.empty()) throw ValidationError(std::string(role) + " text has no tokens");
  return t;
}

double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

// Depth-first search for the maximum matching with the fewest chunks.
class ChunkSearch {
 public:
  ChunkSearch(std::span<const std::string> cand, std::span<const std::string> ref, std::size_t budget)
      : budget_(budget) {
    std::map<std::string, int> ids;
    const auto class_of = [&](const std::string& tok) {
      return ids.try_emplace(stem(tok), static_cast<int>(ids.size())).first->second;
    };
    cand_class_.reserve(cand.size());
    for (const auto& t : cand) cand_class_.push_back(class_of(t));
    ref_by_class_.resize(ids.size());
    for (std::size_t j = 0; j < ref.size(); ++j) {
      const int c = class_of(ref[j]);
      if (static_cast<std::size_t>(c) >= ref_by_class_.size()) ref_by_class_.resize(static_cast<std::size_t>(c) + 1);
      ref_by_class_[static_cast<std::size_t>(c)].push_back(j);
    }
    const std::size_t classes = ref_by_class_.size();
    std::vector<std::size_t> cand_count(classes, 0);
    for (int c : cand_class_) {
      if (static_cast<std::size_t>(c) < classes) ++cand_count[static_cast<std::size_t>(c)];
    }
    needed_.assign(classes, 0);
    for (std::size_t c = 0; c < classes; ++c) {
      needed_[c] = std::min(cand_count[c], ref_by_class_[c].size());
      total_ += needed_[c];
    }
    remaining_ = cand_count;
    used_.assign(ref.size(), false);
  }

  MeteorAlignment run() {
    MeteorAlignment out;
    out.matches = total_;
    if (total_ == 0) return out;
    dfs(0, 0);
    out.chunks = best_chunks_;
    out.pairs = best_pairs_;
    out.exhaustive = nodes_ <= budget_;
    return out;
  }

 private:
  void dfs(std::size_t i, std::size_t chunks) {
    if (chunks >= best_chunks_) return;
    if (++nodes_ > budget_ && best_chunks_ != kNone) return;
    if (i == cand_class_.size()) {
      best_chunks_ = chunks;
      best_pairs_ = pairs_;
      return;
    }
    const auto c = static_cast<std::size_t>(cand_class_[i]);
    if (c >= needed_.size()) {
      dfs(i + 1, chunks);
      return;
    }
    --remaining_[c];
    if (needed_[c] > 0) {
      const bool adjacent = !pairs_.empty() && pairs_.back().first + 1 == i;
      const std::size_t cont = adjacent ? pairs_.back().second + 1 : kNone;
      const auto try_match = [&](std::size_t j) {
        used_[j] = true;
        --needed_[c];
        pairs_.emplace_back(i, j);
        dfs(i + 1, chunks + (j == cont ? 0 : 1));
        pairs_.pop_back();
        ++needed_[c];
        used_[j] = false;
      };
      const auto& refs = ref_by_class_[c];
      if (cont != kNone && std::binary_search(refs.begin(), refs.end(), cont) && !used_[cont]) try_match(cont);
      for (std::size_t j : refs) {
        if (!used_[j] && j != cont) try_match(j);
      }
    }
    if (remaining_[c] >= needed_[c]) dfs(i + 1, chunks);
    ++remaining_[c];
  }

  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  std::vector<int> cand_class_;
  std::vector<std::vector<std::size_t>> ref_by_class_;
  std::vector<std::size_t> needed_;
  std::vector<std::size_t> remaining_;
  std::vector<bool> used_;
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::vector<std::pair<std::size_t, std::size_t>> best_pairs_;
  std::size_t total_ = 0;
  std::size_t best_chunks_ = kNone;
  std::size_t nodes_ = 0;
  std::size_t budget_;
};

}  // namespace

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double average_precision(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw ValidationError("scores and labels differ in length");
  const auto order = descending_order(scores);
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (positive[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return hits ? sum / static_cast<double>(hits) : 0.0;
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw ValidationError("scores and labels differ in length");
  std::vector<double> pos;
  std::vector<double> neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (positive[i] ? pos : neg).push_back(scores[i]);
  if (pos.empty() || neg.empty()) return std::nullopt;
  std::sort(neg.begin(), neg.end());
  double credit = 0.0;
  for (double p : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(lo, neg.end(), p);
    credit += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return credit / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

ClassificationReport classification_report(std::span<const int> y_true, const Eigen::MatrixXd& y_score, int k) {
  const auto n = y_true.size();
  const auto classes = static_cast<int>(y_score.cols());
  if (n == 0) throw ValidationError("classification report over zero samples");
  if (static_cast<std::size_t>(y_score.rows()) != n) throw ValidationError("score rows do not match labels");
  if (k < 1) throw ValidationError("top-k needs k >= 1");
  if (!y_score.allFinite()) throw ValidationError("scores must be finite");
  for (int y : y_true) {
    if (y < 0 || y >= classes) throw ValidationError("label " + std::to_string(y) + " outside the score columns");
  }

  ClassificationReport r;
  r.samples = n;
  r.k = k;
  std::vector<int> pred(n);
  std::vector<int> support(static_cast<std::size_t>(classes), 0);
  std::size_t correct = 0;
  std::size_t in_top = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      if (y_score(row, c) > y_score(row, best)) best = c;
    }
    pred[i] = best;
    correct += best == y_true[i];
    ++support[static_cast<std::size_t>(y_true[i])];
    // Rank of the truth under (score desc, index asc).
    const double s = y_score(row, y_true[i]);
    int ahead = 0;
    for (int c = 0; c < classes; ++c) {
      if (y_score(row, c) > s || (y_score(row, c) == s && c < y_true[i])) ++ahead;
    }
    in_top += ahead < k;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.top_k_accuracy = static_cast<double>(in_top) / static_cast<double>(n);

  std::vector<double> column(n);
  const auto positive = std::make_unique<bool[]>(n);
  const std::span<const bool> pos_span(positive.get(), n);
  double auc_sum = 0.0;
  int auc_count = 0;
  for (int c = 0; c < classes; ++c) {
    if (support[static_cast<std::size_t>(c)] == 0) continue;
    ClassMetrics m;
    m.label = c;
    m.support = support[static_cast<std::size_t>(c)];
    int tp = 0;
    int predicted = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp += pred[i] == c && y_true[i] == c;
      predicted += pred[i] == c;
      column[i] = y_score(static_cast<Eigen::Index>(i), c);
      positive[i] = y_true[i] == c;
    }
    m.precision = safe_ratio(tp, predicted);
    m.recall = safe_ratio(tp, m.support);
    m.f1 = harmonic(m.precision, m.recall);
    m.average_precision = average_precision(column, pos_span);
    m.auc = roc_auc(column, pos_span);
    if (m.auc) {
      auc_sum += *m.auc;
      ++auc_count;
    }
    r.per_class.push_back(m);
  }
  const auto present = static_cast<double>(r.per_class.size());
  for (const auto& m : r.per_class) {
    r.balanced_accuracy += m.recall;
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
    r.mean_average_precision += m.average_precision;
  }
  r.balanced_accuracy /= present;
  r.macro_precision /= present;
  r.macro_recall /= present;
  r.macro_f1 /= present;
  r.mean_average_precision /= present;
  if (r.per_class.size() >= 2 && auc_count > 0) r.auc = auc_sum / auc_count;
  return r;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_f1(std::string_view candidate, std::string_view reference) {
  const auto c = nonempty_tokens(candidate, "candidate");
  const auto r = nonempty_tokens(reference, "reference");
  const auto l = static_cast<double>(lcs_length(c, r));
  if (l == 0.0) return 0.0;
  return harmonic(l / static_cast<double>(c.size()), l / static_cast<double>(r.size()));
}

std::string stem(std::string_view token) {
  struct Rule {
    std::string_view suffix;
    std::string_view replacement;
  };
  static constexpr Rule kRules[] = {
      {"ational", "ate"}, {"ingly", ""}, {"edly", ""}, {"ness", ""}, {"ment", ""}, {"sses", "ss"},
      {"ies", "y"},       {"ied", "y"},  {"ing", ""},  {"ed", ""},   {"ly", ""},
  };
  constexpr std::size_t kMinStem = 3;
  std::string s(token);
  bool stripped = false;
  for (const Rule& rule : kRules) {
    if (s.size() >= rule.suffix.size() + kMinStem && std::string_view(s).ends_with(rule.suffix)) {
      s.replace(s.size() - rule.suffix.size(), rule.suffix.size(), rule.replacement);
      stripped = true;
      break;
    }
  }
  if (!stripped && s.size() > kMinStem && s.back() == 's' && s[s.size() - 2] != 's') s.pop_back();
  if (s.size() > kMinStem && s.back() == 'e') s.pop_back();
  return s;
}

MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference,
                             std::size_t node_budget) {
  return ChunkSearch(candidate, reference, node_budget).run();
}

double meteor(std::string_view candidate, std::string_view reference) {
  const auto c = nonempty_tokens(candidate, "candidate");
  const auto r = nonempty_tokens(reference, "reference");
  const MeteorAlignment a = meteor_align(c, r);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(c.size());
  const double rec = m / static_cast<double>(r.size());
  const double f_mean = 10.0 * p * rec / (rec + 9.0 * p);
  const double frag = static_cast<double>(a.chunks) / m;
  return f_mean * (1.0 - 0.5 * frag * frag * frag);
}

std::vector<Eigen::VectorXd> HashEmbeddingProvider::embed(std::span<const std::string> tokens) const {
  if (dim_ < 1) throw ConfigError("embedding dimension must be positive");
  std::vector<Eigen::VectorXd> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) {
    Rng rng(mix_seed(seed_, fnv1a64(t)));
    Eigen::VectorXd v(dim_);
    for (int d = 0; d < dim_; ++d) v[d] = rng.uniform();
    out.push_back(std::move(v));
  }
  return out;
}

HttpEmbeddingProvider::HttpEmbeddingProvider(std::string url, double timeout_s)
    : url_(std::move(url)), timeout_s_(timeout_s) {
  detail::parse_http_url(url_);
  if (!(timeout_s_ > 0.0)) throw ConfigError("embedding provider timeout must be positive");
}

std::vector<Eigen::VectorXd> HttpEmbeddingProvider::embed(std::span<const std::string> tokens) const {
  nlohmann::json req;
  req["tokens"] = std::vector<std::string>(tokens.begin(), tokens.end());
  const auto res = detail::post_json(detail::parse_http_url(url_), req.dump(), timeout_s_);
  if (!res.transport_ok) throw IoError("embedding provider unreachable: " + res.transport_error);
  if (res.status != 200) throw IoError("embedding provider returned HTTP " + std::to_string(res.status));
  std::vector<Eigen::VectorXd> out;
  try {
    const auto reply = nlohmann::json::parse(res.body);
    const auto& rows = reply.at("embeddings");
    if (rows.size() != tokens.size()) throw ValidationError("embedding provider returned the wrong row count");
    for (const auto& row : rows) {
      const auto values = row.get<std::vector<double>>();
      Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
      if (v.size() == 0 || !v.allFinite()) throw ValidationError("embedding provider returned a non-finite vector");
      out.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed embedding reply: ") + e.what());
  }
  return out;
}

double bert_score_f1(std::string_view candidate, std::string_view reference, const EmbeddingProvider& provider) {
  const auto c = nonempty_tokens(candidate, "candidate");
  const auto r = nonempty_tokens(reference, "reference");
  const auto ce = provider.embed(c);
  const auto re = provider.embed(r);
  if (ce.size() != c.size() || re.size() != r.size()) throw ValidationError("provider returned the wrong vector count");
  const auto normalized = [](const std::vector<Eigen::VectorXd>& vs) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(vs.size()), vs.front().size());
    for (std::size_t i = 0; i < vs.size(); ++i) {
      const double n = vs[i].norm();
      if (vs[i].size() != m.cols() || !(n > 0.0) || !std::isfinite(n)) {
        throw ValidationError("provider returned a zero, non-finite or mis-sized vector");
      }
      m.row(static_cast<Eigen::Index>(i)) = vs[i].transpose() / n;
    }
    return m;
  };
  const Eigen::MatrixXd cm = normalized(ce);
  const Eigen::MatrixXd rm = normalized(re);
  if (cm.cols() != rm.cols()) throw ValidationError("provider vectors differ in size");
  const Eigen::MatrixXd sim = cm * rm.transpose();
  const double p = sim.rowwise().maxCoeff().mean();
  const double r_ = sim.colwise().maxCoeff().mean();
  return std::clamp(harmonic(p, r_), 0.0, 1.0);
}

TextScore score_text(std::string_view candidate, std::string_view reference, const EmbeddingProvider* provider) {
  TextScore s;
  s.rouge_l_f1 = rouge_l_f1(candidate, reference);
  s.meteor = meteor(candidate, reference);
  if (provider) s.bert_f1 = bert_score_f1(candidate, reference, *provider);
  return s;
}

NarrativeSubsetSummary summarize(std::span<const PairScore> pairs, NarrativeSubset subset) {
  NarrativeSubsetSummary out;
  double bert = 0.0;
  std::size_t bert_n = 0;
  for (const auto& p : pairs) {
    if (subset == NarrativeSubset::SafetyCritical && !p.safety_critical) continue;
    ++out.count;
    out.mean.rouge_l_f1 += p.score.rouge_l_f1;
    out.mean.meteor += p.score.meteor;
    if (p.score.bert_f1) {
      bert += *p.score.bert_f1;
      ++bert_n;
    }
  }
  if (out.count == 0) return out;
  out.mean.rouge_l_f1 /= static_cast<double>(out.count);
  out.mean.meteor /= static_cast<double>(out.count);
  if (bert_n == out.count) out.mean.bert_f1 = bert / static_cast<double>(bert_n);
  return out;
}

NarrativeEvaluation evaluate_narratives(std::span<const NarrativePair> pairs, const EmbeddingProvider* provider,
                                        int threads) {
  if (pairs.empty()) throw ValidationError("narrative evaluation needs at least one pair");
  std::vector<std::optional<TextScore>> scores(pairs.size());
  std::vector<std::string> errors(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    try {
      scores[i] = score_text(pairs[i].generated, pairs[i].reference, provider);
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });
  NarrativeEvaluation out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (scores[i]) {
      out.pairs.push_back({pairs[i].event_id, pairs[i].safety_critical, *scores[i]});
    } else {
      out.excluded.emplace_back(pairs[i].event_id, errors[i]);
    }
  }
  out.all = summarize(out.pairs, NarrativeSubset::All);
  out.sce = summarize(out.pairs, NarrativeSubset::SafetyCritical);
  return out;
}

}  // namespace scvlm
