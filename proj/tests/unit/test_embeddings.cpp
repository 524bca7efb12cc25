#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "suggest/embeddings.hpp"

using namespace suggest;
using namespace suggest::emb;

namespace {

EmbeddingConfig small(std::size_t dim = 8) {
  EmbeddingConfig c;
  c.dim = dim;
  c.buckets = 1000;
  return c;
}

std::string tmp(const char* name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST_CASE("char n-grams of a short token") {
  CHECK(char_ngrams("ab", 3, 6) == std::vector<std::string>{"<ab", "<ab>", "ab>"});
  CHECK(char_ngrams("", 3, 6).empty());
  // multi-byte characters count once
  CHECK(char_ngrams("é", 3, 3) == std::vector<std::string>{"<é>"});
  CHECK(char_ngrams("abcd", 3, 3).size() == 4);
}

TEST_CASE("hash buckets are stable and in range") {
  CHECK(hash_ngram("<ab", 1000) == hash_ngram("<ab", 1000));
  CHECK(hash_ngram("<ab", 1000) < 1000);
  CHECK(hash_ngram("", 7) == fnv1a64("") % 7);
}

TEST_CASE("token embedding is the mean of word vector and n-gram buckets") {
  SubwordEmbedding e(small(4));
  e.set_word("ab", {4, 0, 0, 0});
  const auto grams = char_ngrams("ab", 3, 6);
  for (auto g : grams) e.set_bucket(hash_ngram(g, 1000), {0, 1, 0, 0});
  const auto v = e.embed_token("ab");
  // one word vector + three n-grams (distinct buckets assumed below)
  std::set<std::size_t> buckets;
  for (auto g : grams) buckets.insert(hash_ngram(g, 1000));
  REQUIRE(buckets.size() == 3);
  CHECK(v[0] == doctest::Approx(1.0));
  CHECK(v[1] == doctest::Approx(0.75));
  CHECK(v[2] == 0.0f);

  // out of vocabulary: the word slot contributes zeros
  SubwordEmbedding z(small(4), SubwordEmbedding::BucketInit::zeros);
  for (auto g : char_ngrams("cd", 3, 6)) z.set_bucket(hash_ngram(g, 1000), {2, 2, 2, 2});
  CHECK(z.embed_token("cd") == std::vector<float>{1.5, 1.5, 1.5, 1.5});
}

TEST_CASE("special tokens") {
  SubwordEmbedding e(small());
  CHECK(e.embed_token(kPadToken) == std::vector<float>(8, 0.0f));
  const auto c = e.embed_token("<customer>");
  const auto a = e.embed_token("<agent>");
  CHECK(c != a);
  CHECK(std::inner_product(c.begin(), c.end(), c.begin(), 0.0) > 0.0);
}

TEST_CASE("seeded buckets are deterministic and seed dependent") {
  SubwordEmbedding a(small()), b(small());
  CHECK(a.embed_token("printer") == b.embed_token("printer"));
  auto cfg = small();
  cfg.seed = 1;
  SubwordEmbedding c(cfg);
  CHECK(a.embed_token("printer") != c.embed_token("printer"));
  CHECK(a.fingerprint() != c.fingerprint());

  // bucket rows are roughly N(0, 1/sqrt(dim))
  SubwordEmbedding big(small(256));
  const auto v = big.bucket_vector(17);
  double ss = 0.0;
  for (float x : v) ss += double(x) * x;
  CHECK(ss / 256 == doctest::Approx(1.0 / 256).epsilon(0.3));
}

TEST_CASE("embed_sequence stacks token rows") {
  SubwordEmbedding e(small());
  const auto m = e.embed_sequence({"a", "bb"});
  CHECK(m.shape == num::Shape{2, 8});
  CHECK(std::vector<float>(m.data.begin() + 8, m.data.end()) == e.embed_token("bb"));
  CHECK(e.embed_sequence({}).shape == num::Shape{0, 8});
}

TEST_CASE("pretrained vectors load and validate") {
  const auto path = tmp("suggest_vectors.txt");
  write_file(path, "2 4\nprinter 1 2 3 4\nscreen 0 0 0 1\n");
  const auto e = SubwordEmbedding::load_pretrained(path, small(4));
  CHECK(e.vocabulary_size() == 2);
  CHECK(e.fingerprint() != SubwordEmbedding(small(4)).fingerprint());

  write_file(path, "2 4\nprinter 1 2 3 4\nscreen 0 0 1\n");
  try {
    SubwordEmbedding::load_pretrained(path, small(4));
    FAIL("expected a FormatError");
  } catch (const FormatError& err) {
    CHECK(std::string(err.what()).find(":3:") != std::string::npos);
  }
  write_file(path, "1 5\nprinter 1 2 3 4 5\n");
  CHECK_THROWS_AS(SubwordEmbedding::load_pretrained(path, small(4)), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("binary cache round trip") {
  SubwordEmbedding e(small(4));
  e.set_word("printer", {1, 2, 3, 4});
  e.set_bucket(5, {1, 1, 1, 1});
  const auto path = tmp("suggest_embedding.cache");
  e.save_cache(path);
  const auto r = SubwordEmbedding::load_cache(path);
  CHECK(r.fingerprint() == e.fingerprint());
  CHECK(r.embed_token("printer") == e.embed_token("printer"));
  CHECK(r.embed_token("unseen") == e.embed_token("unseen"));
  std::filesystem::remove(path);
}

TEST_CASE("dimension mismatches are rejected") {
  SubwordEmbedding e(small(4));
  CHECK_THROWS_AS(e.set_word("x", {1, 2}), Error);
  CHECK_THROWS_AS(e.set_bucket(0, {1, 2, 3, 4, 5}), Error);
}
