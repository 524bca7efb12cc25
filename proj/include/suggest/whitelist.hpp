#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "suggest/corpus.hpp"
#include "suggest/dual_model.hpp"

namespace suggest::wl {

enum class Method { frequency, clustering };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);

struct Entry {
  std::string key;
  std::string text;
  std::size_t frequency = 0;
  std::optional<std::size_t> cluster;
};

struct Whitelist {
  Method method = Method::frequency;
  std::size_t target_size = 0;
  std::string corpus_hash;
  std::uint64_t seed = 0;
  std::vector<Entry> entries;  // descending frequency, ties by key

  std::size_t size() const { return entries.size(); }
  std::unordered_set<std::string> keys() const;
  std::size_t total_frequency() const;
  /// Throws Error on a zero frequency or a repeated key.
  void validate() const;
};

/// Non-fatal conditions met while building.
struct BuildNotes {
  std::vector<std::string> warnings;
};

/// The N most frequent normalized agent responses of `examples`.
Whitelist build_frequency_whitelist(const std::vector<corpus::TrainingExample>& examples, std::size_t n,
                                    const std::string& corpus_hash = {}, BuildNotes* notes = nullptr);

struct KMeansResult {
  num::Tensor<double> centroids;  // k x d
  std::vector<std::size_t> assignments;
  std::vector<double> inertia;  // one value per iteration
  std::size_t iterations = 0;
  bool converged = false;
};

/// k-means++ seeding followed by Lloyd iterations on squared Euclidean
/// distance. Stops after `max_iters` or when no assignment changes. An
/// emptied cluster is reseeded with the point farthest from its centroid.
/// Ties in the nearest-centroid search go to the lowest index. Non-empty
/// `weights` make point i count weights[i] times (seeding, means, inertia).
KMeansResult kmeans(const num::Tensor<double>& points, std::size_t k, std::size_t max_iters, std::uint64_t seed,
                    std::span<const double> weights = {});

/// Scales every non-zero row to unit length.
num::Tensor<double> normalize_rows(const num::Tensor<float>& x);

/// distinct: every distinct response is one point. occurrences: each point
/// is weighted by its frequency, i.e. clustering every agent response.
enum class Weighting { distinct, occurrences };
std::string_view to_string(Weighting w);
Weighting parse_weighting(std::string_view s);

struct ClusteringOptions {
  std::size_t k = 1000;
  Weighting weighting = Weighting::distinct;
  std::size_t max_iters = 50;
  std::uint64_t seed = 0;
  bool normalize = true;
};

/// Encodes each distinct response with the response encoder, clusters the
/// encodings and keeps the most frequent member of each cluster.
Whitelist build_clustering_whitelist(const std::vector<corpus::TrainingExample>& examples,
                                     const dual::DualEncoder<float>& model, const ClusteringOptions& opts,
                                     const std::string& corpus_hash = {}, KMeansResult* result = nullptr);

/// Tab-separated; see the README for the layout.
std::string to_tsv(const Whitelist& w);
/// Throws FormatError with the 1-based line number on malformed input.
Whitelist from_tsv(std::string_view text);
void save_whitelist(const std::string& path, const Whitelist& w);
Whitelist load_whitelist(const std::string& path);

/// {method, size, target_size, total_frequency, corpus_hash, seed}, plus
/// coverage_on when examples are supplied.
nlohmann::json describe(const Whitelist& w, const std::vector<corpus::TrainingExample>* examples = nullptr,
                        const std::string& split_name = {});

}  // namespace suggest::wl
