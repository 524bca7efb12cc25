#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "suggest/corpus.hpp"
#include "suggest/dual_model.hpp"
#include "suggest/whitelist.hpp"

namespace suggest::serve {

using num::Tensor;

/// Response encodings of a whitelist, row i for entry i, tied to the
/// checkpoint that produced them.
struct ResponseIndex {
  Tensor<float> matrix;
  std::string checkpoint_hash;
  std::string whitelist_hash;

  std::size_t size() const { return matrix.rows(); }
};

/// Throws Error naming the entry whose text cannot be encoded.
ResponseIndex build_index(const wl::Whitelist& w, const dual::DualEncoder<float>& model,
                          const std::string& checkpoint_hash, const std::string& whitelist_hash = {});
void save_index(const std::string& path, const ResponseIndex& idx);
/// Refuses (FormatError) an index built from a different checkpoint.
ResponseIndex load_index(const std::string& path, const std::string& expected_checkpoint_hash);

struct Ranked {
  std::size_t index = 0;
  float score = 0.0f;
};

/// Exact top k rows of `index` by dot product with `context`, best first;
/// equal scores go to the lower row. Throws Error on an empty index or k = 0.
std::vector<Ranked> top_k(std::span<const float> context, const Tensor<float>& index, std::size_t k);

struct SuggestRequest {
  std::vector<corpus::Turn> turns;
  std::size_t top_k = 5;
};

struct Suggestion {
  std::string text;
  float score = 0.0f;
  std::size_t whitelist_index = 0;
};

struct SuggestResponse {
  std::vector<Suggestion> suggestions;
  double encode_ms = 0.0;
  double rank_ms = 0.0;
};

/// Malformed request content.
class BadRequest : public Error {
 public:
  using Error::Error;
};

/// Parses and validates a request body; throws BadRequest.
SuggestRequest parse_request(std::string_view body, std::size_t default_top_k = 5);
nlohmann::json to_json(const SuggestResponse& r);

/// Immutable model + whitelist + index, shared read-only by request handlers.
class Engine {
 public:
  Engine(dual::DualEncoder<float> model, wl::Whitelist whitelist, ResponseIndex index, std::string checkpoint_hash,
         std::string whitelist_hash);

  SuggestResponse suggest(const SuggestRequest& req) const;
  nlohmann::json health() const;
  nlohmann::json whitelist_json() const;

  const wl::Whitelist& whitelist() const { return whitelist_; }
  const ResponseIndex& index() const { return index_; }

 private:
  dual::DualEncoder<float> model_;
  wl::Whitelist whitelist_;
  ResponseIndex index_;
  std::string checkpoint_hash_;
  std::string whitelist_hash_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::size_t default_top_k = 5;
  std::size_t max_body_bytes = 1 << 20;
  /// Served under /console when non-empty.
  std::string console_dir;
  /// One JSON line per request.
  std::ostream* access_log = nullptr;
};

/// HTTP front end: POST /suggest, GET /whitelist, GET /healthz.
class Server {
 public:
  Server(std::shared_ptr<const Engine> engine, ServerOptions opts);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds the socket; throws Error when the address is unavailable.
  /// Returns the bound port.
  int bind();
  /// Serves until stop(); call bind() first.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// --- Benchmarks ---------------------------------------------------------------

struct BenchReport {
  std::string kind;  // "encoder" or "rank"
  std::string encoder;
  std::size_t layers = 0;
  std::size_t parameters = 0;
  std::size_t samples = 0;
  std::size_t warmup = 0;
  std::size_t context_length = 0;
  std::size_t index_rows = 0;
  std::size_t k = 0;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p99_ms = 0.0;
  bool single_thread = true;
  std::string cpu;
};

nlohmann::json to_json(const BenchReport& r);
std::string cpu_model();

/// Per-context encode latency of a freshly initialised encoder on random
/// inputs of `context_length` rows; the first `warmup` samples are dropped.
BenchReport bench_encoder(const enc::EncoderConfig& cfg, std::size_t context_length = 500, std::size_t samples = 1000,
                          std::size_t warmup = 50, std::uint64_t seed = 0);
/// top_k latency against random context vectors over an n x d random index.
BenchReport bench_rank(std::size_t n = 10000, std::size_t d = 600, std::size_t samples = 1000, std::size_t k = 10,
                       std::uint64_t seed = 0);

}  // namespace suggest::serve
