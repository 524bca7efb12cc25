#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "suggest/eval.hpp"

using namespace suggest;
using namespace suggest::eval;
using num::Shape;
using num::Tensor;

namespace {

// Direct pair counting, the definition the fast path must agree with.
double auc_pairs(const std::vector<ScoredPair>& v) {
  long double good = 0, total = 0;
  for (const auto& p : v)
    if (p.label)
      for (const auto& q : v)
        if (!q.label) {
          total += 1;
          good += p.score > q.score ? 1.0L : p.score == q.score ? 0.5L : 0.0L;
        }
  return static_cast<double>(good / total);
}

std::vector<ScoredPair> random_pairs(Rng& rng, std::size_t n, int levels) {
  std::vector<ScoredPair> v(n);
  for (auto& p : v) {
    p.label = rng.uniform() < 0.3;
    p.score = levels > 0 ? double(rng.below(levels)) : rng.normal();
    if (p.label) p.score += levels > 0 ? double(rng.below(2)) : 0.5;
  }
  v[0].label = true;
  v[1].label = false;
  return v;
}

// One-hot encodings: row i of the candidate set is e_i, contexts pick their
// candidate with a chosen score.
ExampleEncodings examples(const std::vector<std::vector<float>>& ctx, const std::vector<std::vector<float>>& resp,
                          std::vector<std::string> keys) {
  ExampleEncodings e;
  const std::size_t d = ctx.at(0).size();
  e.contexts = Tensor<float>(Shape{ctx.size(), d});
  e.responses = Tensor<float>(Shape{resp.size(), d});
  for (std::size_t i = 0; i < ctx.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) e.contexts(i, j) = ctx[i][j], e.responses(i, j) = resp[i][j];
  e.keys = keys;
  e.texts = std::move(keys);
  return e;
}

CandidateSet candidates(const std::vector<std::vector<float>>& rows, std::vector<std::string> keys) {
  CandidateSet c;
  c.encodings = Tensor<float>(Shape{rows.size(), rows.at(0).size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) c.encodings(i, j) = rows[i][j];
  c.keys = keys;
  c.texts = std::move(keys);
  c.weights.assign(rows.size(), 1.0);
  return c;
}

}  // namespace

TEST_CASE("auc equals pair counting on random instances with ties") {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto v = random_pairs(rng, 2 + rng.below(999), t % 3 == 0 ? 0 : 1 + int(rng.below(20)));
    CHECK(std::abs(auc(v) - auc_pairs(v)) < 1e-12);
  }
}

TEST_CASE("auc edge cases") {
  const std::vector<ScoredPair> perfect{{2, true}, {1, false}, {0, false}};
  CHECK(auc(perfect) == 1.0);
  const std::vector<ScoredPair> tied{{1, true}, {1, false}};
  CHECK(auc(tied) == 0.5);
  const std::vector<ScoredPair> one_class{{1, true}, {2, true}};
  CHECK_THROWS_AS(auc(one_class), Error);
  const std::vector<ScoredPair> nan{{NAN, true}, {1, false}};
  CHECK_THROWS_AS(auc(nan), Error);
}

TEST_CASE("roc curve and partial area") {
  // positives 3, 1; negatives 2, 0
  const std::vector<ScoredPair> v{{3, true}, {2, false}, {1, true}, {0, false}};
  const auto roc = roc_curve(v);
  REQUIRE(roc.size() == 5);
  CHECK(roc.front().fpr == 0.0);
  CHECK(roc.back().tpr == 1.0);
  CHECK(roc[1].tpr == 0.5);
  CHECK(roc[2].fpr == 0.5);
  CHECK(auc_at_p(v, 1.0) == doctest::Approx(auc(v)));
  // FPR in [0, .5]: tpr is .5 throughout
  CHECK(auc_at_p(v, 0.5) == doctest::Approx(0.5));
  // interpolates inside the vertical step at fpr = .5 -> still .5 up to p = .25
  CHECK(auc_at_p(v, 0.25) == doctest::Approx(0.5));
  const std::vector<ScoredPair> perfect{{2, true}, {1, false}, {0, false}};
  CHECK(auc_at_p(perfect, 0.01) == doctest::Approx(1.0));
  CHECK_THROWS_AS(auc_at_p(v, 0.0), Error);
  CHECK_THROWS_AS(auc_at_p(v, 1.5), Error);

  // uninformative scores: AUC@p close to p / 2
  Rng rng(2);
  std::vector<ScoredPair> noise(20000);
  for (auto& p : noise) p = {rng.uniform(), rng.uniform() < 0.5};
  CHECK(auc_at_p(noise, 0.1) == doctest::Approx(0.05).epsilon(0.15));
}

TEST_CASE("pessimistic rank counts ties against the true response") {
  const std::vector<double> others{1, 2, 2, 3};
  CHECK(pessimistic_rank(2.5, others) == 2);
  CHECK(pessimistic_rank(2.0, others) == 4);
  CHECK(pessimistic_rank(5.0, others) == 1);
  CHECK(pessimistic_rank(0.0, {}) == 1);
}

TEST_CASE("random-candidate recall") {
  // three examples; candidate scores are the coordinates of the context
  const std::vector<std::vector<float>> rows{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  const auto pool = candidates(rows, {"a", "b", "c", "d"});
  const auto ex = examples({{1, 0.5, 0.2, 0.1}, {0.3, 0.3, 0.3, 0.3}, {5, 0, 0, 0}},
                           {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 0, 1}}, {"a", "b", "d"});
  const std::vector<std::size_t> ks{1, 2, 4};
  const auto r = recall_random(ex, pool, 4, ks, 3);
  CHECK(r.n == 4);
  CHECK(r.examples == 3);
  // example 0 wins outright; example 1 ties everything (pessimistic rank 4);
  // example 2 scores 0 against a 5 -> last
  CHECK(r.recall[0] == doctest::Approx(1.0 / 3));
  CHECK(r.recall[1] == doctest::Approx(1.0 / 3));
  CHECK(r.recall[2] == doctest::Approx(1.0));
  CHECK(recall_random(ex, pool, 4, ks, 3).recall == r.recall);  // seeded
  CHECK_THROWS_AS(recall_random(ex, pool, 5, ks, 3), Error);    // pool minus the true key is too small
}

TEST_CASE("recall over a whitelist: plus and restricted") {
  const std::vector<std::vector<float>> rows{{1, 0, 0}, {0, 1, 0}};
  const auto w = candidates(rows, {"a", "b"});
  const auto ex = examples({{2, 1, 0}, {0, 0, 1}, {1, 2, 0}}, {{1, 0, 0}, {0, 0, 1}, {1, 0, 0}}, {"a", "z", "a"});
  const std::vector<std::size_t> ks{1};
  const auto plus = recall_whitelist_plus(ex, w, ks);
  // ex0: a=2 beats b=1; ex1: z=1 beats both 0s; ex2: a=1 loses to b=2
  CHECK(plus.recall[0] == doctest::Approx(2.0 / 3));
  CHECK(plus.examples == 3);
  const auto restricted = recall_whitelist_restricted(ex, w, ks);
  CHECK(restricted.examples == 2);
  CHECK(restricted.recall[0] == doctest::Approx(0.5));
  const auto none = examples({{1, 0, 0}}, {{0, 0, 1}}, {"z"});
  CHECK_THROWS_AS(recall_whitelist_restricted(none, w, ks), NoCoverage);
}

TEST_CASE("coverage") {
  const std::unordered_set<std::string> keys{"a", "b"};
  const std::vector<std::string> ex{"a", "c", "b", "b"};
  CHECK(coverage(keys, ex) == 0.75);
  CHECK(coverage({}, ex) == 0.0);
}

TEST_CASE("bleu oracles") {
  const std::vector<std::string> refs{"the printer is fixed now", "please restart your router and try again"};
  CHECK(bleu(refs, refs) == doctest::Approx(1.0).epsilon(1e-12));
  // every n-gram precision is 1 and c = 4, r = 5: BP = exp(1 - 5/4)
  const std::vector<std::string> r1{"a b c d e"}, h1{"a b c d"};
  CHECK(std::abs(bleu(r1, h1) - std::exp(-0.25)) < 1e-9);
  // no 4-gram match: unsmoothed corpus BLEU is zero
  const std::vector<std::string> r2{"a b c d"}, h2{"a b d c"};
  CHECK(bleu(r2, h2) == 0.0);
  CHECK(sentence_bleu_smoothed("a b c d", "a b d c") > 0.0);
  CHECK(sentence_bleu_smoothed("a b c d", "a b c d") == doctest::Approx(1.0));
  const std::vector<std::string> one{"x"};
  CHECK_THROWS_AS(bleu(refs, one), Error);
}

TEST_CASE("eval config json") {
  EvalConfig c;
  c.recall_ns = {10, 20};
  c.max_examples = 5;
  CHECK(to_json(eval_config_from_json(to_json(c))) == to_json(c));
  auto j = to_json(c);
  j["typo"] = true;
  CHECK_THROWS_AS(eval_config_from_json(j), Error);
  j = to_json(c);
  j["auc_ps"] = {0.0};
  CHECK_THROWS_AS(eval_config_from_json(j), Error);
}
