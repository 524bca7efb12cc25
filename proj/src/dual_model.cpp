#include "suggest/dual_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <ostream>
#include <set>

#include "suggest/eval.hpp"
#include "suggest/numerics/ops.hpp"
#include "suggest/numerics/tensor_io.hpp"

namespace suggest::dual {

using nlohmann::json;

namespace {

// Applies `fn(key, value)` to every member, rejecting keys not in `known`.
template <typename Fn>
void for_members(const json& j, std::string_view where, std::initializer_list<std::string_view> known, Fn fn) {
  if (!j.is_object()) throw Error(std::string(where) + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw Error(std::string(where) + ": unknown key \"" + k + "\"");
    try {
      fn(k, v);
    } catch (const json::exception& e) {
      throw Error(std::string(where) + "." + k + ": " + e.what());
    }
  }
}

template <typename T>
Tensor<T> as(Tensor<float> x) {
  if constexpr (std::is_same_v<T, float>)
    return x;
  else
    return x.cast<T>();
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string_view to_string(LossKind k) { return k == LossKind::cross_entropy ? "cross_entropy" : "hinge"; }

LossKind parse_loss(std::string_view s) {
  if (s == "cross_entropy") return LossKind::cross_entropy;
  if (s == "hinge") return LossKind::hinge;
  throw Error("unknown loss \"" + std::string(s) + "\" (expected cross_entropy or hinge)");
}

std::string_view to_string(Collisions c) { return c == Collisions::resample ? "resample" : "mask"; }

Collisions parse_collisions(std::string_view s) {
  if (s == "resample") return Collisions::resample;
  if (s == "mask") return Collisions::mask;
  throw Error("unknown collision policy \"" + std::string(s) + "\" (expected resample or mask)");
}

void TrainingConfig::validate() const {
  if (batch_size == 0) throw Error("training.batch_size must be >= 1");
  if (negatives == 0) throw Error("training.negatives must be >= 1");
  if (!(margin > 0.0)) throw Error("training.margin must be positive");
  if (schedule.warmup_steps == 0 || schedule.model_dim == 0) throw Error("training.schedule: zero warmup or model_dim");
}

// --- JSON ---------------------------------------------------------------------

json to_json(const enc::EncoderConfig& c) {
  return {{"cell", enc::to_string(c.cell)},   {"layers", c.layers},
          {"input_dim", c.input_dim},         {"hidden", c.hidden},
          {"bidirectional", c.bidirectional}, {"heads", c.heads},
          {"attn_dim", c.attn_dim},           {"activation", enc::to_string(c.activation)},
          {"highway", enc::to_string(c.highway)}};
}

json to_json(const emb::EmbeddingConfig& c) {
  return {{"dim", c.dim}, {"buckets", c.buckets}, {"min_n", c.min_n}, {"max_n", c.max_n}, {"seed", c.seed}};
}

json to_json(const ModelConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"embedding", to_json(c.embedding)},
          {"pretrained_path", c.pretrained_path},
          {"init_seed", c.init_seed}};
}

json to_json(const TrainingConfig& c) {
  return {{"batch_size", c.batch_size},
          {"negatives", c.negatives},
          {"epochs", c.epochs},
          {"max_batches_per_epoch", c.max_batches_per_epoch},
          {"loss", to_string(c.loss)},
          {"margin", c.margin},
          {"hinge_absolute", c.hinge_absolute},
          {"collisions", to_string(c.collisions)},
          {"seed", c.seed},
          {"warmup_steps", c.schedule.warmup_steps},
          {"model_dim", c.schedule.model_dim},
          {"lr_factor", c.schedule.factor},
          {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"validation_examples", c.validation_examples}};
}

enc::EncoderConfig encoder_config_from_json(const json& j) {
  enc::EncoderConfig c;
  for_members(j, "encoder",
              {"cell", "layers", "input_dim", "hidden", "bidirectional", "heads", "attn_dim", "activation", "highway"},
              [&](const std::string& k, const json& v) {
                if (k == "cell") c.cell = enc::parse_cell(v.get<std::string>());
                else if (k == "layers") c.layers = v.get<std::size_t>();
                else if (k == "input_dim") c.input_dim = v.get<std::size_t>();
                else if (k == "hidden") c.hidden = v.get<std::size_t>();
                else if (k == "bidirectional") c.bidirectional = v.get<bool>();
                else if (k == "heads") c.heads = v.get<std::size_t>();
                else if (k == "attn_dim") c.attn_dim = v.get<std::size_t>();
                else if (k == "activation") c.activation = enc::parse_activation(v.get<std::string>());
                else c.highway = enc::parse_highway(v.get<std::string>());
              });
  c.validate();
  return c;
}

emb::EmbeddingConfig embedding_config_from_json(const json& j) {
  emb::EmbeddingConfig c;
  for_members(j, "embedding", {"dim", "buckets", "min_n", "max_n", "seed"}, [&](const std::string& k, const json& v) {
    if (k == "dim") c.dim = v.get<std::size_t>();
    else if (k == "buckets") c.buckets = v.get<std::size_t>();
    else if (k == "min_n") c.min_n = v.get<std::size_t>();
    else if (k == "max_n") c.max_n = v.get<std::size_t>();
    else c.seed = v.get<std::uint64_t>();
  });
  if (c.dim == 0 || c.buckets == 0 || c.min_n == 0 || c.min_n > c.max_n)
    throw Error("embedding: dim and buckets must be positive and 1 <= min_n <= max_n");
  return c;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  for_members(j, "model", {"encoder", "embedding", "pretrained_path", "init_seed"},
              [&](const std::string& k, const json& v) {
                if (k == "encoder") c.encoder = encoder_config_from_json(v);
                else if (k == "embedding") c.embedding = embedding_config_from_json(v);
                else if (k == "pretrained_path") c.pretrained_path = v.get<std::string>();
                else c.init_seed = v.get<std::uint64_t>();
              });
  if (c.encoder.input_dim != c.embedding.dim)
    throw Error("model: encoder.input_dim (" + std::to_string(c.encoder.input_dim) + ") must equal embedding.dim (" +
                std::to_string(c.embedding.dim) + ")");
  return c;
}

TrainingConfig training_config_from_json(const json& j) {
  TrainingConfig c;
  for_members(j, "training",
              {"batch_size", "negatives", "epochs", "max_batches_per_epoch", "loss", "margin", "hinge_absolute", "collisions", "seed",
               "warmup_steps", "model_dim", "lr_factor", "adam_beta1", "adam_beta2", "adam_eps",
               "validation_examples"},
              [&](const std::string& k, const json& v) {
                if (k == "batch_size") c.batch_size = v.get<std::size_t>();
                else if (k == "negatives") c.negatives = v.get<std::size_t>();
                else if (k == "epochs") c.epochs = v.get<std::size_t>();
                else if (k == "max_batches_per_epoch") c.max_batches_per_epoch = v.get<std::size_t>();
                else if (k == "loss") c.loss = parse_loss(v.get<std::string>());
                else if (k == "margin") c.margin = v.get<double>();
                else if (k == "hinge_absolute") c.hinge_absolute = v.get<bool>();
                else if (k == "collisions") c.collisions = parse_collisions(v.get<std::string>());
                else if (k == "seed") c.seed = v.get<std::uint64_t>();
                else if (k == "warmup_steps") c.schedule.warmup_steps = v.get<std::size_t>();
                else if (k == "model_dim") c.schedule.model_dim = v.get<std::size_t>();
                else if (k == "lr_factor") c.schedule.factor = v.get<double>();
                else if (k == "adam_beta1") c.adam.beta1 = v.get<double>();
                else if (k == "adam_beta2") c.adam.beta2 = v.get<double>();
                else if (k == "adam_eps") c.adam.eps = v.get<double>();
                else c.validation_examples = v.get<std::size_t>();
              });
  c.validate();
  return c;
}

std::shared_ptr<const emb::SubwordEmbedding> make_embedding(const ModelConfig& cfg) {
  if (cfg.pretrained_path.empty()) return std::make_shared<const emb::SubwordEmbedding>(cfg.embedding);
  return std::make_shared<const emb::SubwordEmbedding>(
      emb::SubwordEmbedding::load_pretrained(cfg.pretrained_path, cfg.embedding));
}

// --- Model ------------------------------------------------------------------

template <typename T>
DualEncoder<T>::DualEncoder(const ModelConfig& cfg, std::shared_ptr<const emb::SubwordEmbedding> e)
    : config(cfg), embedding(std::move(e)) {
  cfg.encoder.validate();
  if (embedding && embedding->dim() != cfg.encoder.input_dim)
    throw ShapeError("embedding width " + std::to_string(embedding->dim()) + " does not match encoder input width " +
                     std::to_string(cfg.encoder.input_dim));
  Rng rc(derive_seed(cfg.init_seed, "context-encoder"));
  Rng rr(derive_seed(cfg.init_seed, "response-encoder"));
  context = enc::Encoder<T>(cfg.encoder, rc);
  response = enc::Encoder<T>(cfg.encoder, rr);
}

template <typename T>
std::vector<num::NamedParam<T>> DualEncoder<T>::parameters() {
  auto p = context.parameters("ctx");
  auto r = response.parameters("resp");
  p.insert(p.end(), r.begin(), r.end());
  return p;
}

template <typename T>
void DualEncoder<T>::set_requires_grad(bool on) {
  context.set_requires_grad(on);
  response.set_requires_grad(on);
}

template <typename T>
void DualEncoder<T>::zero_grad() {
  context.zero_grad();
  response.zero_grad();
}

template <typename T>
template <typename U>
DualEncoder<U> DualEncoder<T>::cast() const {
  DualEncoder<U> out;
  out.config = config;
  out.context = context.template cast<U>();
  out.response = response.template cast<U>();
  out.embedding = embedding;
  return out;
}

template <typename T>
T score(std::span<const T> c, std::span<const T> r) {
  if (c.size() != r.size())
    throw ShapeError("score: context length " + std::to_string(c.size()) + " vs response length " +
                     std::to_string(r.size()));
  T s = T(0);
  for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * r[i];
  return s;
}

Tensor<float> encode_contexts(const DualEncoder<float>& m, const std::vector<corpus::Tokens>& seqs) {
  return enc::encode_batch(m.context, *m.embedding, seqs);
}

Tensor<float> encode_responses(const DualEncoder<float>& m, const std::vector<corpus::Tokens>& seqs) {
  m.response_encodings += seqs.size();
  return enc::encode_batch(m.response, *m.embedding, seqs);
}

template <typename T>
BatchEncodings encode_batch(Graph<T>& g, const DualEncoder<T>& m, const Batch& batch) {
  const std::size_t b = batch.contexts.size(), k = batch.negatives.size();
  if (b == 0 || batch.positives.size() != b)
    throw Error("batch needs b >= 1 contexts and as many positives (got " + std::to_string(b) + " and " +
                std::to_string(batch.positives.size()) + ")");
  if (k == 0) throw Error("batch needs at least one negative");
  if (!m.embedding) throw Error("model has no embedding attached");

  enc::Segments cseg, rseg;
  Var cx = g.constant(as<T>(enc::embed_batch(*m.embedding, batch.contexts, cseg)));
  std::vector<corpus::Tokens> responses;
  responses.reserve(b + k);
  responses.insert(responses.end(), batch.positives.begin(), batch.positives.end());
  responses.insert(responses.end(), batch.negatives.begin(), batch.negatives.end());
  Var rx = g.constant(as<T>(enc::embed_batch(*m.embedding, responses, rseg)));

  BatchEncodings out;
  out.contexts = m.context.forward(g, cx, cseg);
  Var r = m.response.forward(g, rx, rseg);
  m.response_encodings += rseg.count();
  out.positives = num::slice(g, r, 0, 0, b);
  out.negatives = num::slice(g, r, 0, b, b + k);
  return out;
}

Tensor<float> collision_mask(std::span<const std::string> pk, std::span<const std::string> nk) {
  Tensor<float> keep(num::Shape{pk.size(), nk.size()}, 1.0f);
  for (std::size_t i = 0; i < pk.size(); ++i)
    for (std::size_t j = 0; j < nk.size(); ++j)
      if (pk[i] == nk[j]) keep(i, j) = 0.0f;
  return keep;
}

namespace {

void check_keep(const Tensor<float>& keep, std::size_t b, std::size_t k) {
  if (keep.rank() != 2 || keep.rows() != b || keep.cols() != k)
    throw ShapeError("negative mask has shape " + num::shape_str(keep.shape) + ", expected [" + std::to_string(b) +
                     ", " + std::to_string(k) + "]");
}

}  // namespace

template <typename T>
Var cross_entropy_loss(Graph<T>& g, Var c, Var pos, Var neg, const Tensor<float>* keep) {
  const std::size_t b = g.value(c).rows();
  Var s_pos = num::sum_axis(g, num::mul(g, c, pos), 1);  // [b]
  Var s_neg = num::matmul(g, c, neg, false, true);          // b x k
  if (keep) {
    // Dropped entries get a large negative offset, so their softmax weight is exactly zero.
    check_keep(*keep, b, g.value(neg).rows());
    Tensor<T> off(keep->shape);
    for (std::size_t i = 0; i < off.size(); ++i) off.data[i] = keep->data[i] != 0.0f ? T(0) : T(-1e30);
    s_neg = num::add(g, s_neg, g.constant(std::move(off)));
  }
  const Var parts[] = {num::reshape(g, s_pos, {b, 1}), s_neg};
  Var lse = num::log_sum_exp(g, num::concat<T>(g, parts, 1), 1);
  return num::mean(g, num::sub(g, lse, s_pos));
}

template <typename T>
Var hinge_loss(Graph<T>& g, Var c, Var pos, Var neg, T margin, bool absolute, const Tensor<float>* keep) {
  const std::size_t b = g.value(c).rows(), k = g.value(neg).rows();
  Var s_pos = num::reshape(g, num::sum_axis(g, num::mul(g, c, pos), 1), {b, 1});
  Var s_pos_k = num::matmul(g, s_pos, g.constant(Tensor<T>({1, k}, T(1))));
  Var s_neg = num::matmul(g, c, neg, false, true);
  Var d = num::add_scalar(g, num::sub(g, s_neg, s_pos_k), margin);
  Var per = absolute ? num::abs(g, d) : num::relu(g, d);
  if (keep) {
    check_keep(*keep, b, k);
    per = num::mul(g, per, g.constant(as<T>(*keep)));
  }
  return num::scale(g, num::sum(g, per), T(1) / static_cast<T>(b));
}

template <typename T>
Var batch_loss_ce(Graph<T>& g, const DualEncoder<T>& m, const Batch& batch) {
  const auto e = encode_batch(g, m, batch);
  return cross_entropy_loss(g, e.contexts, e.positives, e.negatives, batch.keep ? &*batch.keep : nullptr);
}

template <typename T>
Var batch_loss_hinge(Graph<T>& g, const DualEncoder<T>& m, const Batch& batch, T margin, bool absolute) {
  const auto e = encode_batch(g, m, batch);
  return hinge_loss(g, e.contexts, e.positives, e.negatives, margin, absolute, batch.keep ? &*batch.keep : nullptr);
}

// --- Negative sampling -------------------------------------------------------

corpus::Tokens response_tokens(std::string_view text) {
  corpus::Tokens t = corpus::tokenize(text);
  if (t.size() > corpus::kMaxResponseTokens) t.resize(corpus::kMaxResponseTokens);
  return t;
}

NegativeSampler::NegativeSampler(std::vector<corpus::ResponseGroup> groups) : groups_(std::move(groups)) {
  std::vector<double> w;
  w.reserve(groups_.size());
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    const auto& g = groups_[i];
    if (g.frequency == 0) throw Error("negative sampler: response \"" + g.key + "\" has zero frequency");
    if (!index_.emplace(g.key, i).second) throw Error("negative sampler: duplicate key \"" + g.key + "\"");
    tokens_.push_back(response_tokens(g.text));
    if (tokens_.back().empty()) throw Error("negative sampler: response \"" + g.key + "\" has no tokens");
    w.push_back(static_cast<double>(g.frequency));
  }
  tree_ = WeightTree(w);
}

NegativeSampler NegativeSampler::from_examples(const std::vector<corpus::TrainingExample>& examples) {
  return NegativeSampler(corpus::group_responses(examples));
}

std::optional<std::size_t> NegativeSampler::find(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> NegativeSampler::sample(std::size_t k, std::span<const std::string> exclude,
                                                 Rng& rng) const {
  WeightTree t = tree_;
  std::size_t eligible = groups_.size();
  for (const auto& key : exclude)
    if (auto i = find(key); i && t.weight(*i) > 0.0) t.set(*i, 0.0), --eligible;
  if (eligible < k)
    throw Error("negative sampler: need " + std::to_string(k) + " responses outside the batch positives but only " +
                std::to_string(eligible) + " of " + std::to_string(groups_.size()) + " are eligible");
  std::vector<std::size_t> out;
  out.reserve(k);
  while (out.size() < k) {
    const std::size_t i = t.draw(rng);
    if (t.weight(i) <= 0.0) continue;  // rounding residue on a removed item
    out.push_back(i);
    t.set(i, 0.0);
  }
  return out;
}

// --- Checkpoints ------------------------------------------------------------

void save_checkpoint(const std::string& path, const DualEncoder<float>& model, const TrainingState& state) {
  num::TensorFile f;
  model.context.export_tensors("ctx", f);
  model.response.export_tensors("resp", f);
  json moments = json::array();
  for (const auto& [name, m] : state.optimizer.m) {
    const auto& v = state.optimizer.v.at(name);
    f.add("adam.m." + name, Tensor<float>({m.size()}, m));
    f.add("adam.v." + name, Tensor<float>({v.size()}, v));
    moments.push_back(name);
  }
  json meta{{"format", "suggest-checkpoint"},
            {"version", kCheckpointVersion},
            {"model", to_json(model.config)},
            {"embedding_fingerprint", model.embedding ? model.embedding->fingerprint() : ""},
            {"parameter_count", model.parameter_count()},
            {"step", state.step},
            {"epoch", state.epoch},
            {"optimizer",
             {{"beta1", state.optimizer.config.beta1},
              {"beta2", state.optimizer.config.beta2},
              {"eps", state.optimizer.config.eps},
              {"step", state.optimizer.step},
              {"moments", moments}}},
            {"training", state.training}};
  f.metadata = meta.dump();
  const auto dir = std::filesystem::path(path).parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  num::save_tensor_file(path, f);
}

namespace {

json checkpoint_meta(const num::TensorFile& f, const std::string& path) {
  if (!f.metadata) throw FormatError(path + ": checkpoint has no metadata");
  json meta;
  try {
    meta = json::parse(*f.metadata);
  } catch (const json::exception& e) {
    throw FormatError(path + ": bad checkpoint metadata: " + e.what());
  }
  if (meta.value("format", "") != "suggest-checkpoint") throw FormatError(path + ": not a model checkpoint");
  const int version = meta.value("version", -1);
  if (version != kCheckpointVersion)
    throw FormatError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  return meta;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const num::TensorFile f = num::load_tensor_file(path);
  const json meta = checkpoint_meta(f, path);
  LoadedCheckpoint out;
  try {
    out.model.config = model_config_from_json(meta.at("model"));
    out.model.context = enc::Encoder<float>::import_tensors(out.model.config.encoder, "ctx", f);
    out.model.response = enc::Encoder<float>::import_tensors(out.model.config.encoder, "resp", f);
    out.state.step = meta.at("step").get<std::uint64_t>();
    out.state.epoch = meta.at("epoch").get<std::size_t>();
    out.state.training = meta.at("training");
    const json& o = meta.at("optimizer");
    out.state.optimizer.config = {o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>()};
    out.state.optimizer.step = o.at("step").get<std::uint64_t>();
    for (const auto& name : o.at("moments")) {
      const std::string n = name.get<std::string>();
      out.state.optimizer.m[n] = f.get("adam.m." + n).data;
      out.state.optimizer.v[n] = f.get("adam.v." + n).data;
    }
  } catch (const json::exception& e) {
    throw FormatError(path + ": bad checkpoint metadata: " + e.what());
  }
  out.model.embedding = make_embedding(out.model.config);
  const std::string want = meta.value("embedding_fingerprint", "");
  if (!want.empty() && want != out.model.embedding->fingerprint())
    throw FormatError(path + ": embedding fingerprint mismatch (checkpoint " + want + ", rebuilt " +
                      out.model.embedding->fingerprint() + ")");
  return out;
}

json describe_checkpoint(const std::string& path) {
  const num::TensorFile f = num::load_tensor_file(path);
  const json meta = checkpoint_meta(f, path);
  json tensors = json::array();
  std::size_t params = 0;
  for (const auto& e : f.tensors) {
    if (e.name.rfind("adam.", 0) == 0) continue;
    tensors.push_back({{"name", e.name}, {"shape", e.tensor.shape}});
    params += e.tensor.size();
  }
  return {{"path", path},
          {"version", meta.at("version")},
          {"model", meta.at("model")},
          {"parameter_count", params},
          {"step", meta.at("step")},
          {"epoch", meta.at("epoch")},
          {"tensors", tensors}};
}

// --- Training ---------------------------------------------------------------

json to_json(const EpochMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"epoch", m.epoch},        {"step", m.step}, {"train_loss", m.train_loss}, {"val_loss", opt(m.val_loss)},
          {"val_auc", opt(m.val_auc)}, {"lr", m.lr},     {"wall_ms", m.wall_ms}};
}

Validation validate_model(const DualEncoder<float>& m, const std::vector<corpus::TrainingExample>& examples,
                          const std::vector<corpus::Tokens>& negatives, const std::vector<std::string>& negative_keys) {
  if (examples.empty()) throw Error("validation: no examples");
  if (negatives.empty() || negatives.size() != negative_keys.size())
    throw Error("validation: negatives and their keys must be non-empty and aligned");
  std::vector<corpus::Tokens> ctx, pos;
  for (const auto& ex : examples) ctx.push_back(ex.context_tokens), pos.push_back(ex.response_tokens);
  const Tensor<float> c = encode_contexts(m, ctx);
  const Tensor<float> p = encode_responses(m, pos);
  const Tensor<float> n = encode_responses(m, negatives);
  const std::size_t d = c.cols(), k = n.rows();

  std::vector<eval::ScoredPair> pairs;
  double loss = 0.0;
  std::vector<double> s;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const std::string key = corpus::normalize_response(examples[i].response_text);
    const double sp = score<float>({c.row(i), d}, {p.row(i), d});
    pairs.push_back({sp, true});
    s.assign(1, sp);
    for (std::size_t j = 0; j < k; ++j) {
      if (negative_keys[j] == key) continue;
      const double sn = score<float>({c.row(i), d}, {n.row(j), d});
      s.push_back(sn);
      pairs.push_back({sn, false});
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    loss += mx + std::log(z) - sp;
  }
  return {loss / static_cast<double>(examples.size()), eval::auc(pairs)};
}

TrainResult train(DualEncoder<float>& model, TrainingState& state,
                  const std::vector<corpus::TrainingExample>& train_examples,
                  const std::vector<corpus::TrainingExample>& validation_examples, const TrainingConfig& cfg,
                  const TrainOptions& opts) {
  cfg.validate();
  if (train_examples.empty()) throw Error("train: the training split has no examples");
  const std::size_t b = cfg.batch_size, k = cfg.negatives;
  const std::size_t n_batches = std::min(train_examples.size() / b, cfg.max_batches_per_epoch);
  if (n_batches == 0)
    throw Error("train: " + std::to_string(train_examples.size()) + " examples cannot fill one batch of " +
                std::to_string(b));

  const NegativeSampler sampler = NegativeSampler::from_examples(train_examples);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng negative_rng(derive_seed(cfg.seed, "negatives"));

  // Fixed validation protocol: the first N examples against one seeded negative set.
  std::vector<corpus::TrainingExample> val(
      validation_examples.begin(),
      validation_examples.begin() + std::min(validation_examples.size(), cfg.validation_examples));
  std::vector<corpus::Tokens> val_neg;
  std::vector<std::string> val_keys;
  if (!val.empty()) {
    Rng vr(derive_seed(cfg.seed, "validation-negatives"));
    for (std::size_t i : sampler.sample(std::min(k, sampler.size()), {}, vr)) {
      val_neg.push_back(sampler.tokens(i));
      val_keys.push_back(sampler.group(i).key);
    }
  }

  state.optimizer.config = cfg.adam;
  state.training = to_json(cfg);
  model.set_requires_grad(true);
  auto params = model.parameters();

  std::vector<std::size_t> order(train_examples.size());
  TrainResult result;
  double lr = 0.0;
  for (std::size_t epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < n_batches; ++bi) {
      Batch batch;
      std::vector<std::string> keys;
      for (std::size_t j = bi * b; j < (bi + 1) * b; ++j) {
        const auto& ex = train_examples[order[j]];
        batch.contexts.push_back(ex.context_tokens);
        batch.positives.push_back(ex.response_tokens);
        keys.push_back(corpus::normalize_response(ex.response_text));
      }
      if (cfg.collisions == Collisions::resample) {
        for (std::size_t i : sampler.sample(k, keys, negative_rng)) batch.negatives.push_back(sampler.tokens(i));
      } else {
        std::vector<std::string> nkeys;
        for (std::size_t i : sampler.sample(k, {}, negative_rng)) {
          batch.negatives.push_back(sampler.tokens(i));
          nkeys.push_back(sampler.group(i).key);
        }
        batch.keep = collision_mask(keys, nkeys);
      }

      model.zero_grad();
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) +
                                " (first example: conversation " + train_examples[order[bi * b]].conversation_id +
                                ", turn " + std::to_string(train_examples[order[bi * b]].turn_index) + ")";
      Graph<float> g(true);
      Var loss;
      try {
        loss = cfg.loss == LossKind::cross_entropy
                   ? batch_loss_ce(g, model, batch)
                   : batch_loss_hinge(g, model, batch, static_cast<float>(cfg.margin), cfg.hinge_absolute);
      } catch (const Error& e) {
        throw Error(std::string(e.what()) + " at " + where);
      }
      const double lv = g.value(loss).item();
      if (!std::isfinite(lv)) throw Error("non-finite loss (" + fmt_double(lv) + ") at " + where);
      g.backward(loss);
      ++state.step;
      lr = cfg.schedule.lr(state.step);
      num::adam_step<float>(params, state.optimizer, lr);
      for (const auto& p : params)
        if (!std::all_of(p.tensor->data.begin(), p.tensor->data.end(), [](float v) { return std::isfinite(v); }))
          throw Error("non-finite parameter " + p.name + " after the update at epoch " + std::to_string(epoch) +
                      ", batch " + std::to_string(bi) + " (lr " + fmt_double(lr) + ")");
      loss_sum += lv;
    }
    state.epoch = epoch;

    EpochMetrics m;
    m.epoch = epoch;
    m.step = state.step;
    m.train_loss = loss_sum / static_cast<double>(n_batches);
    m.lr = lr;
    if (!val.empty()) {
      const Validation v = validate_model(model, val, val_neg, val_keys);
      m.val_loss = v.loss;
      m.val_auc = v.auc;
    }
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    if (!opts.checkpoint_dir.empty()) {
      const std::filesystem::path dir(opts.checkpoint_dir);
      save_checkpoint((dir / ("epoch-" + std::to_string(epoch) + ".ckpt")).string(), model, state);
      const bool best = m.val_auc ? (!result.best_val_auc || *m.val_auc > *result.best_val_auc) : true;
      if (best) save_checkpoint((dir / "best.ckpt").string(), model, state);
    }
    if (m.val_auc && (!result.best_val_auc || *m.val_auc > *result.best_val_auc)) {
      result.best_val_auc = m.val_auc;
      result.best_epoch = epoch;
    } else if (!m.val_auc) {
      result.best_epoch = epoch;
    }
    if (opts.metrics_log) *opts.metrics_log << to_json(m).dump() << '\n' << std::flush;
    if (opts.on_epoch) opts.on_epoch(m);
    result.history.push_back(m);
  }
  model.set_requires_grad(false);
  return result;
}

#define SUGGEST_INSTANTIATE(T)                                                                             \
  template struct DualEncoder<T>;                                                                          \
  template T score<T>(std::span<const T>, std::span<const T>);                                             \
  template BatchEncodings encode_batch<T>(Graph<T>&, const DualEncoder<T>&, const Batch&);                 \
  template Var cross_entropy_loss<T>(Graph<T>&, Var, Var, Var, const Tensor<float>*);                      \
  template Var hinge_loss<T>(Graph<T>&, Var, Var, Var, T, bool, const Tensor<float>*);                     \
  template Var batch_loss_ce<T>(Graph<T>&, const DualEncoder<T>&, const Batch&);                           \
  template Var batch_loss_hinge<T>(Graph<T>&, const DualEncoder<T>&, const Batch&, T, bool);

SUGGEST_INSTANTIATE(float)
SUGGEST_INSTANTIATE(double)

template DualEncoder<double> DualEncoder<float>::cast<double>() const;
template DualEncoder<float> DualEncoder<double>::cast<float>() const;

}  // namespace suggest::dual
