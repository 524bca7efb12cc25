#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "suggest/numerics/tensor.hpp"

namespace suggest::emb {

inline constexpr std::size_t kDefaultBuckets = std::size_t{1} << 21;
inline constexpr std::string_view kPadToken = "<pad>";

struct EmbeddingConfig {
  std::size_t dim = 300;
  std::size_t buckets = kDefaultBuckets;
  std::size_t min_n = 3;
  std::size_t max_n = 6;
  std::uint64_t seed = 0;
};

/// FNV-1a 64 over the n-gram's UTF-8 bytes, modulo `buckets`.
std::size_t hash_ngram(std::string_view ngram, std::size_t buckets);

/// Character n-grams (counted in UTF-8 code points) of "<" + token + ">".
std::vector<std::string> char_ngrams(std::string_view token, std::size_t min_n, std::size_t max_n);

/// Word vectors plus hashed character n-gram buckets. A token embeds to the
/// flat mean of its word vector (zero when out of vocabulary) and the bucket
/// vectors of all its n-grams. Role tokens have dedicated rows and the
/// padding token embeds to zeros.
///
/// Bucket vectors are not stored: each is drawn on demand from a stream
/// seeded by (seed, bucket index), distributed N(0, 1/sqrt(dim)), unless the
/// bucket was explicitly overridden. The object is logically immutable after
/// construction; lookups are memoised behind a lock and safe to share across
/// threads.
class SubwordEmbedding {
 public:
  enum class BucketInit { seeded_normal, zeros };

  explicit SubwordEmbedding(EmbeddingConfig cfg = {}, BucketInit init = BucketInit::seeded_normal);
  ~SubwordEmbedding();
  SubwordEmbedding(SubwordEmbedding&&) noexcept;
  SubwordEmbedding& operator=(SubwordEmbedding&&) noexcept;

  /// Textual vectors: header "count dim", then "token v1 ... v_dim" per line.
  /// Throws FormatError on a dimension mismatch with `cfg.dim` or a
  /// malformed line (with its line number).
  static SubwordEmbedding load_pretrained(const std::string& path, EmbeddingConfig cfg);

  /// Binary cache in the tensor-file encoding.
  void save_cache(const std::string& path) const;
  static SubwordEmbedding load_cache(const std::string& path);

  const EmbeddingConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.dim; }
  std::size_t vocabulary_size() const { return words_.size(); }
  BucketInit bucket_init() const { return init_; }

  void set_word(std::string token, std::vector<float> vec);
  void set_bucket(std::size_t bucket, std::vector<float> vec);

  std::vector<float> bucket_vector(std::size_t bucket) const;
  std::vector<float> embed_token(std::string_view token) const;
  /// Rows are embed_token of each token; empty input gives a 0 x dim matrix.
  num::Tensor<float> embed_sequence(const std::vector<std::string>& tokens) const;

  /// Stable hash of the configuration and tables, for provenance.
  std::string fingerprint() const;

 private:
  void check_dim(const std::vector<float>& v, std::string_view what) const;
  std::vector<float> compute(std::string_view token) const;
  std::vector<float> seeded_row(std::uint64_t stream) const;

  EmbeddingConfig cfg_;
  BucketInit init_;
  std::unordered_map<std::string, std::vector<float>> words_;
  std::unordered_map<std::size_t, std::vector<float>> bucket_overrides_;
  struct Memo;
  std::unique_ptr<Memo> memo_;
};

}  // namespace suggest::emb
