#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "suggest/numerics/tensor.hpp"

namespace suggest::num {

/// Named-tensor container with the binary layout
///
///   "RSV1" | u64 count | count x ( u64 name_len | name | u64 rank |
///                                  rank x u64 dim | f32 values )
///
/// (all integers and floats little-endian, values row-major), optionally
/// followed by a metadata trailer
///
///   "RSM1" | u64 json_len | json | u64 fnv1a64(all preceding bytes)
///
/// which carries a JSON document and protects the whole file against
/// corruption.
struct TensorFile {
  struct Entry {
    std::string name;
    Tensor<float> tensor;
  };
  std::vector<Entry> tensors;
  std::optional<std::string> metadata;

  void add(std::string name, Tensor<float> t) { tensors.push_back({std::move(name), std::move(t)}); }
  const Tensor<float>* find(std::string_view name) const;
  /// Throws FormatError when missing.
  const Tensor<float>& get(std::string_view name) const;
};

std::string encode_tensor_file(const TensorFile& f);
/// Throws FormatError on bad magic, truncation, trailing bytes or checksum mismatch.
TensorFile decode_tensor_file(std::string_view bytes);

void save_tensor_file(const std::string& path, const TensorFile& f);
TensorFile load_tensor_file(const std::string& path);

}  // namespace suggest::num
