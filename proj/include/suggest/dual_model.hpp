#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "suggest/corpus.hpp"
#include "suggest/embeddings.hpp"
#include "suggest/encoder.hpp"
#include "suggest/numerics/optim.hpp"

namespace suggest::dual {

using num::Graph;
using num::Tensor;
using num::Var;

/// Architecture shared by both encoders plus the fixed input embedding.
struct ModelConfig {
  enc::EncoderConfig encoder;
  emb::EmbeddingConfig embedding;
  /// Optional word vectors; empty means hashed buckets only.
  std::string pretrained_path;
  std::uint64_t init_seed = 0;
};

enum class LossKind { cross_entropy, hinge };

/// What happens when a sampled negative shares its key with a positive of
/// the batch.
///  - resample: the draw is rejected for the whole batch and redrawn.
///  - mask: the negative stays in the shared set but is left out of the
///    loss of the example whose positive it duplicates.
enum class Collisions { resample, mask };

std::string_view to_string(LossKind k);
LossKind parse_loss(std::string_view s);
std::string_view to_string(Collisions c);
Collisions parse_collisions(std::string_view s);

struct TrainingConfig {
  std::size_t batch_size = 200;
  std::size_t negatives = 200;
  std::size_t epochs = 30;
  std::size_t max_batches_per_epoch = 10000;
  LossKind loss = LossKind::cross_entropy;
  double margin = 0.25;
  /// Use |m - s+ + s-| instead of max(0, .) for the hinge loss.
  bool hinge_absolute = false;
  Collisions collisions = Collisions::resample;
  std::uint64_t seed = 0;
  num::NoamSchedule schedule;
  num::AdamConfig adam;
  /// Validation examples scored per epoch (first N of the split).
  std::size_t validation_examples = 1000;

  /// Throws Error on b = 0, k = 0 or a non-positive margin.
  void validate() const;
};

nlohmann::json to_json(const enc::EncoderConfig& c);
nlohmann::json to_json(const emb::EmbeddingConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainingConfig& c);
/// Missing keys keep their defaults; unknown keys throw Error naming the key.
enc::EncoderConfig encoder_config_from_json(const nlohmann::json& j);
emb::EmbeddingConfig embedding_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainingConfig training_config_from_json(const nlohmann::json& j);

/// Builds the fixed embedding a model config describes.
std::shared_ptr<const emb::SubwordEmbedding> make_embedding(const ModelConfig& cfg);

/// Context and response encoders of identical architecture with independent
/// weights, scoring a pair by the dot product of their encodings.
template <typename T>
struct DualEncoder {
  ModelConfig config;
  enc::Encoder<T> context;
  enc::Encoder<T> response;
  std::shared_ptr<const emb::SubwordEmbedding> embedding;
  /// Number of response sequences pushed through `response`; the training
  /// step contract is exactly b + k per step.
  mutable std::uint64_t response_encodings = 0;

  DualEncoder() = default;
  /// Fresh weights from `cfg.init_seed`; each side draws from its own stream.
  DualEncoder(const ModelConfig& cfg, std::shared_ptr<const emb::SubwordEmbedding> e);

  std::vector<num::NamedParam<T>> parameters();
  std::size_t parameter_count() const { return context.parameter_count() + response.parameter_count(); }
  void set_requires_grad(bool on);
  void zero_grad();

  template <typename U>
  DualEncoder<U> cast() const;
};

/// Dot product; throws ShapeError on a length mismatch.
template <typename T>
T score(std::span<const T> context_vec, std::span<const T> response_vec);

/// Inference encodings, one row per sequence.
Tensor<float> encode_contexts(const DualEncoder<float>& m, const std::vector<corpus::Tokens>& seqs);
Tensor<float> encode_responses(const DualEncoder<float>& m, const std::vector<corpus::Tokens>& seqs);

/// b contexts with their positives plus k negatives shared by all of them.
struct Batch {
  std::vector<corpus::Tokens> contexts;
  std::vector<corpus::Tokens> positives;
  std::vector<corpus::Tokens> negatives;
  /// Optional b x k 0/1 matrix; a zero drops negative j from example i.
  std::optional<Tensor<float>> keep;
};

/// keep[i, j] = 0 where negative j has the key of positive i.
Tensor<float> collision_mask(std::span<const std::string> positive_keys, std::span<const std::string> negative_keys);

struct BatchEncodings {
  Var contexts;   // b x d
  Var positives;  // b x d
  Var negatives;  // k x d
};

/// Encodes a batch on `g`: one context pass, and a single response pass
/// over the b positives and k negatives together.
template <typename T>
BatchEncodings encode_batch(Graph<T>& g, const DualEncoder<T>& m, const Batch& batch);

/// Mean over the batch of -s(c, r+) + log sum over {r+, r1-, ..., rk-} of e^s.
/// `keep` (b x k, 0/1) removes individual negatives from individual rows.
template <typename T>
Var cross_entropy_loss(Graph<T>& g, Var contexts, Var positives, Var negatives, const Tensor<float>* keep = nullptr);
/// Mean over the batch of sum_i max(0, m - s(c, r+) + s(c, ri-)), or of the
/// absolute value when `absolute` is set.
template <typename T>
Var hinge_loss(Graph<T>& g, Var contexts, Var positives, Var negatives, T margin, bool absolute = false,
               const Tensor<float>* keep = nullptr);

template <typename T>
Var batch_loss_ce(Graph<T>& g, const DualEncoder<T>& m, const Batch& batch);
template <typename T>
Var batch_loss_hinge(Graph<T>& g, const DualEncoder<T>& m, const Batch& batch, T margin = T(0.25),
                     bool absolute = false);

/// Frequency-weighted sampling of distinct responses.
class NegativeSampler {
 public:
  NegativeSampler() = default;
  explicit NegativeSampler(std::vector<corpus::ResponseGroup> groups);
  static NegativeSampler from_examples(const std::vector<corpus::TrainingExample>& examples);

  std::size_t size() const { return groups_.size(); }
  const corpus::ResponseGroup& group(std::size_t i) const { return groups_[i]; }
  const corpus::Tokens& tokens(std::size_t i) const { return tokens_[i]; }
  std::optional<std::size_t> find(const std::string& key) const;

  /// k draws without replacement, weighted by frequency. Responses whose key
  /// is in `exclude` are never returned (a colliding draw is redrawn).
  /// Throws Error when fewer than k responses remain eligible.
  std::vector<std::size_t> sample(std::size_t k, std::span<const std::string> exclude, Rng& rng) const;

 private:
  std::vector<corpus::ResponseGroup> groups_;
  std::vector<corpus::Tokens> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  WeightTree tree_;
};

/// Response tokens as encoded by the model (truncated to the response limit).
corpus::Tokens response_tokens(std::string_view text);

// --- Checkpoints ------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

struct TrainingState {
  num::AdamState<float> optimizer;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  nlohmann::json training = nlohmann::json::object();  // config snapshot
};

void save_checkpoint(const std::string& path, const DualEncoder<float>& model, const TrainingState& state);

struct LoadedCheckpoint {
  DualEncoder<float> model;
  TrainingState state;
};

/// Throws FormatError on corruption, truncation or a version mismatch.
LoadedCheckpoint load_checkpoint(const std::string& path);

/// {version, model config, parameter_count, step, epoch, tensors: [{name, shape}]}.
nlohmann::json describe_checkpoint(const std::string& path);

// --- Training ---------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> val_auc;
  double lr = 0.0;
  double wall_ms = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);

struct TrainOptions {
  /// Writes epoch-<n>.ckpt and best.ckpt here when non-empty.
  std::string checkpoint_dir;
  /// Receives one JSON line per epoch.
  std::ostream* metrics_log = nullptr;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_auc;
};

/// Validation loss and pooled AUC against a fixed negative set. A negative
/// sharing the example's key is left out of that example's scores.
struct Validation {
  double loss = 0.0;
  double auc = 0.0;
};
Validation validate_model(const DualEncoder<float>& m, const std::vector<corpus::TrainingExample>& examples,
                          const std::vector<corpus::Tokens>& negatives, const std::vector<std::string>& negative_keys);

/// Adam + Noam over both encoders (the embedding stays fixed). Throws Error
/// on a non-finite loss, naming the epoch, batch and first conversation.
TrainResult train(DualEncoder<float>& model, TrainingState& state,
                  const std::vector<corpus::TrainingExample>& train_examples,
                  const std::vector<corpus::TrainingExample>& validation_examples, const TrainingConfig& cfg,
                  const TrainOptions& opts = {});

}  // namespace suggest::dual
