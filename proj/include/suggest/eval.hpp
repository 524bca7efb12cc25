#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "suggest/corpus.hpp"
#include "suggest/dual_model.hpp"
#include "suggest/whitelist.hpp"

namespace suggest::eval {

struct ScoredPair {
  double score = 0.0;
  bool label = false;  // true response
};

/// Mann-Whitney statistic: share of (positive, negative) pairs ordered
/// correctly, ties counting one half. Throws Error without both classes or on
/// a non-finite score.
double auc(std::span<const ScoredPair> pairs);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

/// Points at every distinct threshold, from (0, 0) to (1, 1).
std::vector<RocPoint> roc_curve(std::span<const ScoredPair> pairs);

/// ROC area over FPR in [0, p], divided by p. Requires 0 < p <= 1.
double auc_at_p(std::span<const ScoredPair> pairs, double p);

/// 1 + number of other candidates scoring at least `true_score`.
std::size_t pessimistic_rank(double true_score, std::span<const double> others);

struct RecallResult {
  std::size_t n = 0;  // candidates per example (0 when it varies)
  std::vector<std::size_t> ks;
  std::vector<double> recall;
  std::size_t examples = 0;  // examples scored (the support for restricted recall)
};

/// Raised when restricted recall has no example whose response is listed.
class NoCoverage : public Error {
 public:
  using Error::Error;
};

/// Contexts and true responses encoded once for several protocols.
struct ExampleEncodings {
  num::Tensor<float> contexts;
  num::Tensor<float> responses;
  std::vector<std::string> keys;
  std::vector<std::string> texts;
};

ExampleEncodings encode_examples(const dual::DualEncoder<float>& m, const std::vector<corpus::TrainingExample>& ex);

/// Candidate responses with their encodings and sampling weights.
struct CandidateSet {
  num::Tensor<float> encodings;
  std::vector<std::string> keys;
  std::vector<std::string> texts;
  std::vector<double> weights;
};

CandidateSet encode_pool(const dual::DualEncoder<float>& m, const dual::NegativeSampler& pool);
CandidateSet encode_whitelist(const dual::DualEncoder<float>& m, const wl::Whitelist& w);

/// Per example: the true response plus n - 1 distinct frequency-weighted
/// draws from `pool` (never the true key), ranked by score.
RecallResult recall_random(const ExampleEncodings& ex, const CandidateSet& pool, std::size_t n,
                           std::span<const std::size_t> ks, std::uint64_t seed);
/// Candidates are the whitelist plus the true response, deduplicated by key.
RecallResult recall_whitelist_plus(const ExampleEncodings& ex, const CandidateSet& whitelist,
                                   std::span<const std::size_t> ks);
/// As recall_whitelist_plus, over only the examples whose key is listed.
/// Throws NoCoverage when there are none.
RecallResult recall_whitelist_restricted(const ExampleEncodings& ex, const CandidateSet& whitelist,
                                         std::span<const std::size_t> ks);

/// Share of examples whose normalized response is a whitelist key.
double coverage(const wl::Whitelist& w, const std::vector<corpus::TrainingExample>& examples);
double coverage(const std::unordered_set<std::string>& keys, std::span<const std::string> example_keys);

/// Corpus BLEU-4 with uniform weights and the brevity penalty, no smoothing,
/// over `corpus::tokenize` tokens.
double bleu(std::span<const std::string> references, std::span<const std::string> hypotheses);
/// Sentence-level diagnostic: add-one smoothing on the 2- to 4-gram precisions.
double sentence_bleu_smoothed(std::string_view reference, std::string_view hypothesis);

struct EvalConfig {
  std::vector<std::size_t> recall_ns{10, 100, 1000, 10000};
  std::vector<std::size_t> ks{1, 3, 5, 10};
  std::vector<double> auc_ps{0.1, 0.05, 0.01};
  std::size_t auc_negatives = 200;
  std::uint64_t seed = 0;
  std::size_t max_examples = 0;  // 0 = all
};

nlohmann::json to_json(const EvalConfig& c);
/// Missing keys keep defaults; unknown keys throw Error naming the key.
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct NamedWhitelist {
  std::string name;
  const wl::Whitelist* whitelist = nullptr;
};

/// Full metric grid as JSON: auc / auc_at_p on sampled negatives, random
/// recall per n (skipped with a reason when the pool is too small), the plus
/// and restricted protocols and coverage per whitelist, and BLEU of the top
/// suggestion from the first whitelist.
nlohmann::json eval_report(const dual::DualEncoder<float>& m, const std::vector<corpus::TrainingExample>& test,
                           const dual::NegativeSampler& pool, const std::vector<NamedWhitelist>& whitelists,
                           const EvalConfig& cfg);

/// Column-aligned text rendering of a report.
std::string report_table(const nlohmann::json& report);

}  // namespace suggest::eval
