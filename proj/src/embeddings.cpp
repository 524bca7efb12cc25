#include "suggest/embeddings.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <sstream>

#include "json.hpp"
#include "suggest/corpus.hpp"
#include "suggest/numerics/tensor_io.hpp"
#include "suggest/util.hpp"

namespace suggest::emb {

namespace {
// Stream ids for the reserved role rows, far above any bucket index.
constexpr std::uint64_t kCustomerStream = 0xC0570E12ull << 32;
constexpr std::uint64_t kAgentStream = 0xA6E17ull << 32;
}  // namespace

struct SubwordEmbedding::Memo {
  std::shared_mutex mu;
  std::unordered_map<std::string, std::vector<float>> rows;
};

std::size_t hash_ngram(std::string_view ngram, std::size_t buckets) {
  if (buckets == 0) throw Error("hash_ngram: bucket count must be positive");
  return static_cast<std::size_t>(fnv1a64(ngram) % buckets);
}

std::vector<std::string> char_ngrams(std::string_view token, std::size_t min_n, std::size_t max_n) {
  const std::string word = "<" + std::string(token) + ">";
  // Byte offsets of code point starts, plus the end.
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < word.size(); ++i)
    if ((static_cast<unsigned char>(word[i]) & 0xC0) != 0x80) starts.push_back(i);
  starts.push_back(word.size());
  const std::size_t chars = starts.size() - 1;

  std::vector<std::string> out;
  for (std::size_t i = 0; i < chars; ++i)
    for (std::size_t n = min_n; n <= max_n && i + n <= chars; ++n)
      out.push_back(word.substr(starts[i], starts[i + n] - starts[i]));
  return out;
}

SubwordEmbedding::SubwordEmbedding(EmbeddingConfig cfg, BucketInit init)
    : cfg_(cfg), init_(init), memo_(std::make_unique<Memo>()) {
  if (cfg_.dim == 0) throw Error("embedding dim must be positive");
  if (cfg_.buckets == 0) throw Error("embedding bucket count must be positive");
  if (cfg_.min_n == 0 || cfg_.min_n > cfg_.max_n) throw Error("embedding n-gram range is invalid");
}

SubwordEmbedding::~SubwordEmbedding() = default;
SubwordEmbedding::SubwordEmbedding(SubwordEmbedding&&) noexcept = default;
SubwordEmbedding& SubwordEmbedding::operator=(SubwordEmbedding&&) noexcept = default;

void SubwordEmbedding::check_dim(const std::vector<float>& v, std::string_view what) const {
  if (v.size() != cfg_.dim)
    throw ShapeError(std::string(what) + " has length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(cfg_.dim));
}

void SubwordEmbedding::set_word(std::string token, std::vector<float> vec) {
  check_dim(vec, "word vector");
  words_[std::move(token)] = std::move(vec);
  memo_->rows.clear();
}

void SubwordEmbedding::set_bucket(std::size_t bucket, std::vector<float> vec) {
  if (bucket >= cfg_.buckets) throw Error("bucket index out of range");
  check_dim(vec, "bucket vector");
  bucket_overrides_[bucket] = std::move(vec);
  memo_->rows.clear();
}

std::vector<float> SubwordEmbedding::seeded_row(std::uint64_t stream) const {
  std::uint64_t s = cfg_.seed ^ (stream * 0x9e3779b97f4a7c15ull);
  Rng rng(splitmix64(s));
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg_.dim));
  std::vector<float> v(cfg_.dim);
  for (auto& x : v) x = static_cast<float>(rng.normal() * sd);
  return v;
}

std::vector<float> SubwordEmbedding::bucket_vector(std::size_t bucket) const {
  if (auto it = bucket_overrides_.find(bucket); it != bucket_overrides_.end()) return it->second;
  if (init_ == BucketInit::zeros) return std::vector<float>(cfg_.dim, 0.0f);
  return seeded_row(bucket);
}

std::vector<float> SubwordEmbedding::compute(std::string_view token) const {
  if (token == kPadToken) return std::vector<float>(cfg_.dim, 0.0f);
  if (token == corpus::kCustomerToken) return seeded_row(kCustomerStream);
  if (token == corpus::kAgentToken) return seeded_row(kAgentStream);

  std::vector<double> acc(cfg_.dim, 0.0);
  if (auto it = words_.find(std::string(token)); it != words_.end())
    for (std::size_t i = 0; i < cfg_.dim; ++i) acc[i] += it->second[i];
  const auto grams = char_ngrams(token, cfg_.min_n, cfg_.max_n);
  for (const auto& gram : grams) {
    const auto b = bucket_vector(hash_ngram(gram, cfg_.buckets));
    for (std::size_t i = 0; i < cfg_.dim; ++i) acc[i] += b[i];
  }
  const double denom = 1.0 + static_cast<double>(grams.size());
  std::vector<float> out(cfg_.dim);
  for (std::size_t i = 0; i < cfg_.dim; ++i) out[i] = static_cast<float>(acc[i] / denom);
  return out;
}

std::vector<float> SubwordEmbedding::embed_token(std::string_view token) const {
  const std::string key(token);
  {
    std::shared_lock lock(memo_->mu);
    if (auto it = memo_->rows.find(key); it != memo_->rows.end()) return it->second;
  }
  auto row = compute(token);
  std::unique_lock lock(memo_->mu);
  memo_->rows.emplace(key, row);
  return row;
}

num::Tensor<float> SubwordEmbedding::embed_sequence(const std::vector<std::string>& tokens) const {
  num::Tensor<float> out(num::Shape{tokens.size(), cfg_.dim});
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const auto row = embed_token(tokens[r]);
    std::copy(row.begin(), row.end(), out.row(r));
  }
  return out;
}

SubwordEmbedding SubwordEmbedding::load_pretrained(const std::string& path, EmbeddingConfig cfg) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open embedding file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ":1: missing header");
  std::istringstream header(line);
  std::size_t count = 0, dim = 0;
  if (!(header >> count >> dim)) throw FormatError(path + ":1: header must be \"count dim\"");
  if (dim != cfg.dim)
    throw FormatError(path + ": vector dim " + std::to_string(dim) + " does not match configured dim " +
                      std::to_string(cfg.dim));

  SubwordEmbedding e(cfg, BucketInit::seeded_normal);
  std::size_t lineno = 1, rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    std::vector<float> v;
    v.reserve(dim);
    std::string field;
    while (ls >> field) {
      char* end = nullptr;
      const float x = std::strtof(field.c_str(), &end);
      if (end == field.c_str() || *end != '\0')
        throw FormatError(path + ":" + std::to_string(lineno) + ": invalid number \"" + field + "\"");
      v.push_back(x);
    }
    if (v.size() != dim)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) + " values, got " +
                        std::to_string(v.size()));
    e.words_[token] = std::move(v);
    ++rows;
  }
  if (rows != count)
    throw FormatError(path + ": header declares " + std::to_string(count) + " vectors but file has " +
                      std::to_string(rows));
  return e;
}

void SubwordEmbedding::save_cache(const std::string& path) const {
  std::map<std::string, const std::vector<float>*> sorted;
  for (const auto& [k, v] : words_) sorted.emplace(k, &v);
  std::map<std::size_t, const std::vector<float>*> buckets;
  for (const auto& [k, v] : bucket_overrides_) buckets.emplace(k, &v);

  num::TensorFile f;
  num::Tensor<float> words(num::Shape{sorted.size(), cfg_.dim});
  nlohmann::json tokens = nlohmann::json::array();
  std::size_t r = 0;
  for (const auto& [k, v] : sorted) {
    std::copy(v->begin(), v->end(), words.row(r++));
    tokens.push_back(k);
  }
  num::Tensor<float> bucket_rows(num::Shape{buckets.size(), cfg_.dim});
  nlohmann::json bucket_ids = nlohmann::json::array();
  r = 0;
  for (const auto& [k, v] : buckets) {
    std::copy(v->begin(), v->end(), bucket_rows.row(r++));
    bucket_ids.push_back(k);
  }
  f.add("words", std::move(words));
  f.add("bucket_overrides", std::move(bucket_rows));
  nlohmann::json meta{{"kind", "subword_embedding"},
                      {"dim", cfg_.dim},
                      {"buckets", cfg_.buckets},
                      {"min_n", cfg_.min_n},
                      {"max_n", cfg_.max_n},
                      {"seed", cfg_.seed},
                      {"bucket_init", init_ == BucketInit::zeros ? "zeros" : "seeded_normal"},
                      {"tokens", tokens},
                      {"bucket_ids", bucket_ids}};
  f.metadata = meta.dump();
  num::save_tensor_file(path, f);
}

SubwordEmbedding SubwordEmbedding::load_cache(const std::string& path) {
  const auto f = num::load_tensor_file(path);
  if (!f.metadata) throw FormatError(path + ": embedding cache has no metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(*f.metadata);
    if (meta.at("kind") != "subword_embedding") throw FormatError(path + ": not an embedding cache");
    EmbeddingConfig cfg;
    cfg.dim = meta.at("dim");
    cfg.buckets = meta.at("buckets");
    cfg.min_n = meta.at("min_n");
    cfg.max_n = meta.at("max_n");
    cfg.seed = meta.at("seed");
    SubwordEmbedding e(cfg, meta.at("bucket_init") == "zeros" ? BucketInit::zeros : BucketInit::seeded_normal);
    const auto& words = f.get("words");
    const auto& tokens = meta.at("tokens");
    if (words.rows() != tokens.size() && !tokens.empty()) throw FormatError(path + ": word table size mismatch");
    for (std::size_t i = 0; i < tokens.size(); ++i)
      e.words_[tokens[i].get<std::string>()] = std::vector<float>(words.row(i), words.row(i) + cfg.dim);
    const auto& rows = f.get("bucket_overrides");
    const auto& ids = meta.at("bucket_ids");
    for (std::size_t i = 0; i < ids.size(); ++i)
      e.bucket_overrides_[ids[i].get<std::size_t>()] = std::vector<float>(rows.row(i), rows.row(i) + cfg.dim);
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path + ": invalid embedding cache metadata: " + ex.what());
  }
}

std::string SubwordEmbedding::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  auto mix = [&](std::string_view s) { h = fnv1a64(s, h); };
  mix("dim=" + std::to_string(cfg_.dim) + ";buckets=" + std::to_string(cfg_.buckets) + ";n=" +
      std::to_string(cfg_.min_n) + "-" + std::to_string(cfg_.max_n) + ";seed=" + std::to_string(cfg_.seed) +
      ";init=" + (init_ == BucketInit::zeros ? "zeros" : "normal"));
  std::map<std::string, const std::vector<float>*> sorted;
  for (const auto& [k, v] : words_) sorted.emplace(k, &v);
  for (const auto& [k, v] : sorted) {
    mix(k);
    mix(std::string_view(reinterpret_cast<const char*>(v->data()), v->size() * sizeof(float)));
  }
  std::map<std::size_t, const std::vector<float>*> buckets;
  for (const auto& [k, v] : bucket_overrides_) buckets.emplace(k, &v);
  for (const auto& [k, v] : buckets) {
    mix(std::to_string(k));
    mix(std::string_view(reinterpret_cast<const char*>(v->data()), v->size() * sizeof(float)));
  }
  return hex64(h);
}

}  // namespace suggest::emb
