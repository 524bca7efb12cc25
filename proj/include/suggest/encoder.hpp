#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "suggest/embeddings.hpp"
#include "suggest/numerics/graph.hpp"
#include "suggest/numerics/optim.hpp"
#include "suggest/numerics/tensor_io.hpp"

namespace suggest::enc {

using num::Graph;
using num::Tensor;
using num::Var;

enum class Cell { sru, lstm };
enum class Activation { tanh, sigmoid, relu };

/// How an SRU layer forms the highway input (1 - r_t) * x~_t when the layer
/// input width differs from its hidden size.
///  - automatic: x~_t = x_t when widths match; when a bidirectional stack
///    feeds 2*hidden features, each direction takes its own half of x_t;
///    otherwise a learned projection P x_t.
///  - projection: a learned projection whenever widths differ.
enum class Highway { automatic, projection };

std::string_view to_string(Cell c);
std::string_view to_string(Activation a);
std::string_view to_string(Highway h);
Cell parse_cell(std::string_view s);
Activation parse_activation(std::string_view s);
Highway parse_highway(std::string_view s);

struct EncoderConfig {
  Cell cell = Cell::sru;
  std::size_t layers = 4;
  std::size_t input_dim = 300;
  std::size_t hidden = 300;
  bool bidirectional = true;
  std::size_t heads = 16;
  std::size_t attn_dim = 64;
  Activation activation = Activation::tanh;
  Highway highway = Highway::automatic;

  std::size_t directions() const { return bidirectional ? 2 : 1; }
  std::size_t output_dim() const { return hidden * directions(); }
  /// Throws Error on zero sizes.
  void validate() const;
};

/// Contiguous row ranges of a packed batch: sequence i occupies rows
/// [offset[i], offset[i] + length[i]) of a matrix with `rows` rows. Rows
/// outside every range are padding. `valid`, when non-empty, additionally
/// masks individual rows out of attention pooling.
struct Segments {
  std::vector<std::size_t> offset;
  std::vector<std::size_t> length;
  std::size_t rows = 0;
  std::vector<std::uint8_t> valid;

  std::size_t count() const { return offset.size(); }
  static Segments packed(const std::vector<std::size_t>& lengths);
  static Segments padded(const std::vector<std::size_t>& lengths, std::size_t max_len);
};

enum class HighwayKind { identity, split, projection };

template <typename T>
struct SruLayer {
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  std::size_t directions = 1;
  HighwayKind highway = HighwayKind::identity;
  /// input_dim x (directions * blocks * hidden); per direction the column
  /// blocks are W, W_f, W_r and, for a projection highway, P (all transposed).
  Tensor<T> weight;
  /// directions x (4 * hidden): v_f, v_r, b_f, b_r.
  /// The source lists the bias vectors as "b_f, b_v"; b_v appears nowhere
  /// else. Read here as the reset-gate bias b_r. The alternative reading (a
  /// bias on the candidate W x_t) would add a third vector; it is not used.
  Tensor<T> gates;

  std::size_t blocks() const { return highway == HighwayKind::projection ? 4 : 3; }
};

template <typename T>
struct LstmLayer {
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
  std::size_t directions = 1;
  /// input_dim x (directions * 4 * hidden), gate order i, f, g, o.
  Tensor<T> w_ih;
  /// (directions * hidden) x (4 * hidden).
  Tensor<T> w_hh;
  /// directions x (4 * hidden).
  Tensor<T> bias;
};

template <typename T>
struct AttentionPool {
  std::size_t heads = 1;
  std::size_t attn_dim = 1;
  /// d_enc x (heads * attn_dim): column block i is W_a for head i.
  Tensor<T> w_a;
  /// heads x attn_dim: row i is v_a for head i.
  Tensor<T> v_a;
};

HighwayKind highway_kind(const EncoderConfig& cfg, std::size_t input_dim);

/// Recurrent stack followed by multi-head attention pooling; maps a token
/// sequence to one output_dim() vector.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  /// Fan-in uniform initialisation; gate biases start at zero.
  Encoder(const EncoderConfig& cfg, Rng& rng);

  const EncoderConfig& config() const { return cfg_; }

  /// x: rows x input_dim packed per `seg`; returns count() x output_dim().
  Var forward(Graph<T>& g, Var x, const Segments& seg) const;
  /// Recurrent stack only: rows x output_dim(), padding rows zero.
  Var recurrent(Graph<T>& g, Var x, const Segments& seg) const;
  Var pool(Graph<T>& g, Var h, const Segments& seg) const;

  /// Trainable tensors with stable internal names under `prefix`.
  std::vector<num::NamedParam<T>> parameters(const std::string& prefix);
  std::size_t parameter_count() const;
  void set_requires_grad(bool on);
  void zero_grad();

  /// Canonical per-matrix tensors (e.g. "ctx.layer0.fwd.W_f",
  /// "ctx.pool.head3.W_a") in the paper's orientation.
  void export_tensors(const std::string& prefix, num::TensorFile& out) const;
  static Encoder import_tensors(const EncoderConfig& cfg, const std::string& prefix, const num::TensorFile& in);

  template <typename U>
  Encoder<U> cast() const;

  std::vector<SruLayer<T>>& sru_layers() { return sru_; }
  const std::vector<SruLayer<T>>& sru_layers() const { return sru_; }
  std::vector<LstmLayer<T>>& lstm_layers() { return lstm_; }
  const std::vector<LstmLayer<T>>& lstm_layers() const { return lstm_; }
  AttentionPool<T>& attention() { return pool_; }
  const AttentionPool<T>& attention() const { return pool_; }

 private:
  template <typename U>
  friend class Encoder;

  EncoderConfig cfg_;
  std::vector<SruLayer<T>> sru_;
  std::vector<LstmLayer<T>> lstm_;
  AttentionPool<T> pool_;
};

/// Closed-form trainable parameter count for a configuration.
std::size_t parameter_count(const EncoderConfig& cfg);

// --- Layer-level operations -------------------------------------------------

template <typename T>
struct LayerOutput {
  Tensor<T> h;             // n x hidden
  std::vector<T> state;    // final cell state (SRU) or [h_n, c_n] (LSTM)
};

/// One direction of one SRU layer over a single sequence (no gradients).
template <typename T>
LayerOutput<T> sru_layer_forward(const Tensor<T>& x, const std::vector<T>& c0, const SruLayer<T>& layer,
                                 std::size_t direction = 0);

/// One direction of one LSTM layer; `state0` is [h0, c0] (2 * hidden values).
template <typename T>
LayerOutput<T> lstm_layer_forward(const Tensor<T>& x, const std::vector<T>& state0, const LstmLayer<T>& layer,
                                  std::size_t direction = 0);

/// Differentiable SRU recurrence for one direction. `u` is x * weight
/// (rows x directions*blocks*hidden), `x` the layer input, `gates` the
/// layer's gate tensor. Each segment runs forward (direction 0) or in
/// reverse time (direction 1) from a zero state, or from `c0` when given.
/// Padding rows of the output are zero.
template <typename T>
Var sru_recurrence(Graph<T>& g, Var u, Var x, Var gates, const SruLayer<T>& layer, std::size_t direction,
                   const Segments& seg, const std::vector<T>* c0 = nullptr);

/// Differentiable LSTM recurrence for one direction. `gx` is x * w_ih.
template <typename T>
Var lstm_recurrence(Graph<T>& g, Var gx, Var w_hh, Var bias, const LstmLayer<T>& layer, std::size_t direction,
                    const Segments& seg, const std::vector<T>* state0 = nullptr);

/// scores[r, i] = a[r, i*attn_dim : (i+1)*attn_dim] . v_a[i].
template <typename T>
Var head_scores(Graph<T>& g, Var a, Var v_a);

/// Softmax of each column within every segment over its valid rows;
/// masked and padding rows get weight zero.
template <typename T>
Var segment_softmax(Graph<T>& g, Var scores, const Segments& seg);

/// out[s] = (1/heads) * sum over rows r of segment s, heads i of
/// alpha[r, i] * h[r].
template <typename T>
Var weighted_pool(Graph<T>& g, Var alpha, Var h, const Segments& seg);

/// Multi-head attention pooling with a boolean mask over the n rows of `h`.
/// Throws Error when every position is masked.
template <typename T>
std::vector<T> attention_pool(const Tensor<T>& h, const std::vector<bool>& mask, const AttentionPool<T>& pool,
                              Activation act = Activation::tanh);

/// Per-head attention weights (n x heads) for inspection.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& h, const std::vector<bool>& mask, const AttentionPool<T>& pool,
                            Activation act = Activation::tanh);

// --- Token-level helpers ----------------------------------------------------

/// Packs the embedded rows of several token sequences. Every sequence must
/// be non-empty.
Tensor<float> embed_batch(const emb::SubwordEmbedding& e, const std::vector<std::vector<std::string>>& seqs,
                          Segments& seg);

/// Encodes one token sequence (no gradients). Throws Error on empty input.
std::vector<float> encode(const Encoder<float>& enc, const emb::SubwordEmbedding& e,
                          const std::vector<std::string>& tokens);

/// Batched inference: one row per sequence.
Tensor<float> encode_batch(const Encoder<float>& enc, const emb::SubwordEmbedding& e,
                           const std::vector<std::vector<std::string>>& seqs, std::size_t chunk = 256);

}  // namespace suggest::enc
