#include "suggest/numerics/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <limits>

namespace suggest::num {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'V', '1'};
constexpr char kMetaMagic[4] = {'R', 'S', 'M', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
  const auto v = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw FormatError(std::string("tensor file truncated while reading ") + what + " at byte " + std::to_string(pos_));
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t u64(const char* what) {
    auto s = bytes(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  float f32() {
    auto s = bytes(4, "tensor values");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return std::bit_cast<float>(v);
  }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor<float>* TensorFile::find(std::string_view name) const {
  for (const auto& e : tensors)
    if (e.name == name) return &e.tensor;
  return nullptr;
}

const Tensor<float>& TensorFile::get(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw FormatError("tensor file has no tensor named " + std::string(name));
}

std::string encode_tensor_file(const TensorFile& f) {
  std::string out(kMagic, 4);
  put_u64(out, f.tensors.size());
  for (const auto& e : f.tensors) {
    put_u64(out, e.name.size());
    out += e.name;
    put_u64(out, e.tensor.rank());
    for (auto d : e.tensor.shape) put_u64(out, d);
    for (float v : e.tensor.data) put_f32(out, v);
  }
  if (f.metadata) {
    out.append(kMetaMagic, 4);
    put_u64(out, f.metadata->size());
    out += *f.metadata;
    put_u64(out, fnv1a64(out));
  }
  return out;
}

TensorFile decode_tensor_file(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(4, "header") != std::string_view(kMagic, 4)) throw FormatError("not a tensor file (bad magic)");
  const std::uint64_t count = r.u64("tensor count");
  TensorFile f;
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorFile::Entry e;
    const std::uint64_t name_len = r.u64("name length");
    e.name = std::string(r.bytes(name_len, "tensor name"));
    const std::uint64_t rank = r.u64("rank");
    if (rank > 8) throw FormatError("tensor " + e.name + " has implausible rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = r.u64("dimension");
      if (dim != 0 && n > std::numeric_limits<std::uint64_t>::max() / 4 / dim)
        throw FormatError("tensor " + e.name + " is too large");
      n *= dim;
      shape.push_back(dim);
    }
    r.need(n * 4, "tensor values");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    e.tensor = Tensor<float>(std::move(shape), std::move(values));
    f.tensors.push_back(std::move(e));
  }
  if (r.done()) return f;

  const std::size_t meta_start = r.pos();
  if (r.bytes(4, "metadata header") != std::string_view(kMetaMagic, 4))
    throw FormatError("unexpected trailing bytes after tensors at byte " + std::to_string(meta_start));
  const std::uint64_t len = r.u64("metadata length");
  f.metadata = std::string(r.bytes(len, "metadata"));
  const std::size_t body_end = r.pos();
  const std::uint64_t stored = r.u64("checksum");
  if (!r.done()) throw FormatError("unexpected trailing bytes after metadata");
  if (stored != fnv1a64(bytes.substr(0, body_end))) throw FormatError("tensor file checksum mismatch (corrupted file)");
  return f;
}

void save_tensor_file(const std::string& path, const TensorFile& f) { write_file(path, encode_tensor_file(f)); }

TensorFile load_tensor_file(const std::string& path) {
  try {
    return decode_tensor_file(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace suggest::num
