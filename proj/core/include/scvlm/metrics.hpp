#pragma once

// Classification metrics over per-class score matrices, and text metrics
// (ROUGE-L F1, METEOR, BERTScore F1) over the shared tokenizer of text.hpp.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace scvlm {

struct ClassMetrics {
  int label = 0;
  int support = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double average_precision = 0.0;
  std::optional<double> auc;  // absent when the class has no negatives
};

struct ClassificationReport {
  std::size_t samples = 0;
  int k = 5;
  double accuracy = 0.0;
  double top_k_accuracy = 0.0;
  double mean_average_precision = 0.0;
  std::optional<double> auc;  // absent when fewer than two classes occur in y_true
  double balanced_accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;  // classes occurring in y_true, ascending
};

// y_true[i] is a column index of y_score (samples x classes). Predictions are
// row argmaxes with ties resolved to the lowest index; the same rule orders
// the top-k list. Classes absent from y_true are left out of every average.
ClassificationReport classification_report(std::span<const int> y_true, const Eigen::MatrixXd& y_score,
                                           int k = 5);

// Rank of each item when sorted by descending score, ties kept in input order.
std::vector<std::size_t> descending_order(std::span<const double> scores);

// One-vs-rest average precision: precision at each positive's rank, averaged.
double average_precision(std::span<const double> scores, std::span<const bool> positive);

// Mann-Whitney pair count with half credit for ties; nullopt without both classes.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const bool> positive);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// Throw ValidationError when either text has no tokens.
double rouge_l_f1(std::string_view candidate, std::string_view reference);

// Suffix-stripping stemmer used for METEOR's second matching stage.
std::string stem(std::string_view token);

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (candidate index, reference index)
  bool exhaustive = true;  // false if the chunk search hit its node budget
};

// Maximum matching of candidate to reference tokens (exact or equal stem), with
// the fewest chunks among maximum matchings.
MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference,
                             std::size_t node_budget = 200000);

double meteor(std::string_view candidate, std::string_view reference);

// Token list -> one finite vector per token.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string name() const = 0;
  virtual std::vector<Eigen::VectorXd> embed(std::span<const std::string> tokens) const = 0;
};

// Deterministic pseudo-embeddings: each token hashes to a fixed vector with
// entries in [0, 1). Equal tokens get equal vectors.
class HashEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit HashEmbeddingProvider(int dim = 64, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {}
  std::string name() const override { return "hash"; }
  std::vector<Eigen::VectorXd> embed(std::span<const std::string> tokens) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

// POSTs {"tokens": [...]} to `url` and expects {"embeddings": [[...], ...]}.
class HttpEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit HttpEmbeddingProvider(std::string url, double timeout_s = 120.0);
  std::string name() const override { return "http"; }
  std::vector<Eigen::VectorXd> embed(std::span<const std::string> tokens) const override;

 private:
  std::string url_;
  double timeout_s_;
};

// Greedy-matching F1 of token cosines, no idf weighting, no rescaling.
double bert_score_f1(std::string_view candidate, std::string_view reference, const EmbeddingProvider& provider);

struct TextScore {
  double rouge_l_f1 = 0.0;
  double meteor = 0.0;
  std::optional<double> bert_f1;
};

TextScore score_text(std::string_view candidate, std::string_view reference,
                     const EmbeddingProvider* provider = nullptr);

struct NarrativePair {
  std::string event_id;
  std::string generated;
  std::string reference;
  bool safety_critical = false;
};

struct PairScore {
  std::string event_id;
  bool safety_critical = false;
  TextScore score;
};

struct NarrativeSubsetSummary {
  std::size_t count = 0;
  TextScore mean;
};

struct NarrativeEvaluation {
  std::vector<PairScore> pairs;
  std::vector<std::pair<std::string, std::string>> excluded;  // (event_id, error)
  NarrativeSubsetSummary all;
  NarrativeSubsetSummary sce;
};

enum class NarrativeSubset { All, SafetyCritical };

NarrativeSubsetSummary summarize(std::span<const PairScore> pairs, NarrativeSubset subset);

// Pairs that fail to score are excluded and listed with their error.
NarrativeEvaluation evaluate_narratives(std::span<const NarrativePair> pairs,
                                        const EmbeddingProvider* provider = nullptr, int threads = 0);

}  // namespace scvlm
