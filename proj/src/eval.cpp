#include "suggest/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <unordered_map>

#include "suggest/numerics/blas.hpp"

namespace suggest::eval {

using nlohmann::json;
using num::Tensor;

namespace {

void check_pairs(std::span<const ScoredPair> pairs, std::size_t& pos, std::size_t& neg) {
  pos = neg = 0;
  for (const auto& p : pairs) {
    if (!std::isfinite(p.score)) throw Error("auc: non-finite score");
    (p.label ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0)
    throw Error("auc: need both true and negative responses (got " + std::to_string(pos) + " and " +
                std::to_string(neg) + ")");
}

// Scores of every row of `m` against one vector.
std::vector<double> scores_against(const Tensor<float>& m, const float* v) {
  std::vector<float> s(m.rows());
  if (m.rows() > 0) num::blas::gemv(false, m.rows(), m.cols(), 1.0f, m.data.data(), m.cols(), v, 0.0f, s.data());
  return {s.begin(), s.end()};
}

double dot(const float* a, const float* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += double(a[i]) * b[i];
  return s;
}

std::vector<std::map<std::string, std::size_t>> ngram_counts(const corpus::Tokens& t) {
  std::vector<std::map<std::string, std::size_t>> out(4);
  for (std::size_t n = 1; n <= 4; ++n)
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
      std::string g;
      for (std::size_t j = i; j < i + n; ++j) g += t[j], g.push_back('\x1f');
      ++out[n - 1][g];
    }
  return out;
}

// Clipped matches and hypothesis totals per order.
void bleu_stats(const corpus::Tokens& ref, const corpus::Tokens& hyp, std::array<std::size_t, 4>& match,
                std::array<std::size_t, 4>& total) {
  const auto rc = ngram_counts(ref), hc = ngram_counts(hyp);
  for (std::size_t n = 0; n < 4; ++n) {
    for (const auto& [g, c] : hc[n]) {
      auto it = rc[n].find(g);
      match[n] += std::min(c, it == rc[n].end() ? std::size_t{0} : it->second);
    }
    total[n] += hyp.size() >= n + 1 ? hyp.size() - n : 0;
  }
}

json recall_json(const RecallResult& r) {
  json arr = json::array();
  for (std::size_t i = 0; i < r.ks.size(); ++i) arr.push_back({{"k", r.ks[i]}, {"value", r.recall[i]}});
  return arr;
}

RecallResult finish(std::vector<std::size_t> ranks, std::span<const std::size_t> ks, std::size_t n) {
  RecallResult r;
  r.n = n;
  r.ks.assign(ks.begin(), ks.end());
  r.examples = ranks.size();
  for (std::size_t k : ks) {
    std::size_t hit = 0;
    for (std::size_t rank : ranks) hit += rank <= k;
    r.recall.push_back(ranks.empty() ? 0.0 : double(hit) / double(ranks.size()));
  }
  return r;
}

RecallResult whitelist_recall(const ExampleEncodings& ex, const CandidateSet& w, std::span<const std::size_t> ks,
                              bool restricted) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < w.keys.size(); ++j) index.emplace(w.keys[j], j);
  std::vector<std::size_t> ranks;
  const std::size_t d = ex.contexts.cols();
  std::vector<double> others;
  for (std::size_t i = 0; i < ex.keys.size(); ++i) {
    auto it = index.find(ex.keys[i]);
    if (restricted && it == index.end()) continue;
    const std::vector<double> s = scores_against(w.encodings, ex.contexts.row(i));
    others.clear();
    for (std::size_t j = 0; j < s.size(); ++j)
      if (it == index.end() || j != it->second) others.push_back(s[j]);
    ranks.push_back(pessimistic_rank(dot(ex.contexts.row(i), ex.responses.row(i), d), others));
  }
  if (restricted && ranks.empty())
    throw NoCoverage("restricted recall: no example's response is in the whitelist (support 0)");
  return finish(std::move(ranks), ks, 0);
}

}  // namespace

double auc(std::span<const ScoredPair> pairs) {
  std::size_t pos, neg;
  check_pairs(pairs, pos, neg);
  std::vector<ScoredPair> v(pairs.begin(), pairs.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
  // twice the number of wins: 2 per ordered pair, 1 per tie
  unsigned __int128 twice = 0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i, p = 0, n = 0;
    while (j < v.size() && v[j].score == v[i].score) (v[j].label ? p : n) += 1, ++j;
    twice += static_cast<unsigned __int128>(p) * (2 * neg_below + n);
    neg_below += n;
    i = j;
  }
  return static_cast<double>(twice) / (2.0 * double(pos) * double(neg));
}

std::vector<RocPoint> roc_curve(std::span<const ScoredPair> pairs) {
  std::size_t pos, neg;
  check_pairs(pairs, pos, neg);
  std::vector<ScoredPair> v(pairs.begin(), pairs.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<RocPoint> out{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].score == v[i].score) (v[j].label ? tp : fp) += 1, ++j;
    out.push_back({double(fp) / double(neg), double(tp) / double(pos)});
    i = j;
  }
  return out;
}

double auc_at_p(std::span<const ScoredPair> pairs, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw Error("auc_at_p: p must be in (0, 1]");
  const auto roc = roc_curve(pairs);
  double area = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) {
    const RocPoint a = roc[i - 1], b = roc[i];
    if (a.fpr >= p) break;
    if (b.fpr <= p) {
      area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    } else {  // interpolate to land exactly on p
      const double t = (p - a.fpr) / (b.fpr - a.fpr);
      const double tpr = a.tpr + t * (b.tpr - a.tpr);
      area += (p - a.fpr) * (a.tpr + tpr) / 2.0;
      break;
    }
  }
  return area / p;
}

std::size_t pessimistic_rank(double true_score, std::span<const double> others) {
  std::size_t r = 1;
  for (double s : others) r += s >= true_score;
  return r;
}

ExampleEncodings encode_examples(const dual::DualEncoder<float>& m, const std::vector<corpus::TrainingExample>& ex) {
  if (ex.empty()) throw Error("evaluation: no examples");
  ExampleEncodings out;
  std::vector<corpus::Tokens> c, r;
  for (const auto& e : ex) {
    c.push_back(e.context_tokens);
    r.push_back(e.response_tokens);
    out.keys.push_back(corpus::normalize_response(e.response_text));
    out.texts.push_back(e.response_text);
  }
  out.contexts = dual::encode_contexts(m, c);
  out.responses = dual::encode_responses(m, r);
  return out;
}

CandidateSet encode_pool(const dual::DualEncoder<float>& m, const dual::NegativeSampler& pool) {
  CandidateSet out;
  std::vector<corpus::Tokens> seqs;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    seqs.push_back(pool.tokens(i));
    out.keys.push_back(pool.group(i).key);
    out.texts.push_back(pool.group(i).text);
    out.weights.push_back(static_cast<double>(pool.group(i).frequency));
  }
  out.encodings = seqs.empty() ? Tensor<float>(num::Shape{0, m.config.encoder.output_dim()})
                               : dual::encode_responses(m, seqs);
  return out;
}

CandidateSet encode_whitelist(const dual::DualEncoder<float>& m, const wl::Whitelist& w) {
  CandidateSet out;
  std::vector<corpus::Tokens> seqs;
  for (const auto& e : w.entries) {
    seqs.push_back(dual::response_tokens(e.text));
    if (seqs.back().empty()) throw Error("whitelist entry \"" + e.key + "\" has no tokens");
    out.keys.push_back(e.key);
    out.texts.push_back(e.text);
    out.weights.push_back(static_cast<double>(e.frequency));
  }
  out.encodings = seqs.empty() ? Tensor<float>(num::Shape{0, m.config.encoder.output_dim()})
                               : dual::encode_responses(m, seqs);
  return out;
}

RecallResult recall_random(const ExampleEncodings& ex, const CandidateSet& pool, std::size_t n,
                           std::span<const std::size_t> ks, std::uint64_t seed) {
  if (n == 0) throw Error("recall_random: n must be >= 1");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < pool.keys.size(); ++j) index.emplace(pool.keys[j], j);
  const WeightTree base(pool.weights);
  Rng rng(seed);
  const std::size_t d = ex.contexts.cols();
  std::vector<std::size_t> ranks;
  std::vector<double> others;
  for (std::size_t i = 0; i < ex.keys.size(); ++i) {
    WeightTree t = base;
    std::size_t eligible = pool.keys.size();
    if (auto it = index.find(ex.keys[i]); it != index.end()) t.set(it->second, 0.0), --eligible;
    if (eligible < n - 1)
      throw Error("recall_random: n = " + std::to_string(n) + " needs " + std::to_string(n - 1) +
                  " other responses but the pool has " + std::to_string(eligible));
    others.clear();
    while (others.size() + 1 < n) {
      const std::size_t j = t.draw(rng);
      if (t.weight(j) <= 0.0) continue;
      t.set(j, 0.0);
      others.push_back(dot(ex.contexts.row(i), pool.encodings.row(j), d));
    }
    ranks.push_back(pessimistic_rank(dot(ex.contexts.row(i), ex.responses.row(i), d), others));
  }
  return finish(std::move(ranks), ks, n);
}

RecallResult recall_whitelist_plus(const ExampleEncodings& ex, const CandidateSet& w,
                                   std::span<const std::size_t> ks) {
  return whitelist_recall(ex, w, ks, false);
}

RecallResult recall_whitelist_restricted(const ExampleEncodings& ex, const CandidateSet& w,
                                         std::span<const std::size_t> ks) {
  return whitelist_recall(ex, w, ks, true);
}

double coverage(const std::unordered_set<std::string>& keys, std::span<const std::string> example_keys) {
  if (example_keys.empty()) throw Error("coverage: no examples");
  std::size_t hit = 0;
  for (const auto& k : example_keys) hit += keys.count(k);
  return double(hit) / double(example_keys.size());
}

double coverage(const wl::Whitelist& w, const std::vector<corpus::TrainingExample>& examples) {
  std::vector<std::string> keys;
  keys.reserve(examples.size());
  for (const auto& e : examples) keys.push_back(corpus::normalize_response(e.response_text));
  return coverage(w.keys(), keys);
}

double bleu(std::span<const std::string> references, std::span<const std::string> hypotheses) {
  if (hypotheses.empty()) throw Error("bleu: no hypotheses");
  if (references.size() != hypotheses.size())
    throw Error("bleu: " + std::to_string(references.size()) + " references for " +
                std::to_string(hypotheses.size()) + " hypotheses");
  std::array<std::size_t, 4> match{}, total{};
  std::size_t ref_len = 0, hyp_len = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto r = corpus::tokenize(references[i]), h = corpus::tokenize(hypotheses[i]);
    ref_len += r.size();
    hyp_len += h.size();
    bleu_stats(r, h, match, total);
  }
  double log_p = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (match[n] == 0 || total[n] == 0) return 0.0;
    log_p += std::log(double(match[n]) / double(total[n])) / 4.0;
  }
  const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
  return bp * std::exp(log_p);
}

double sentence_bleu_smoothed(std::string_view reference, std::string_view hypothesis) {
  const auto r = corpus::tokenize(reference), h = corpus::tokenize(hypothesis);
  if (h.empty()) return 0.0;
  std::array<std::size_t, 4> match{}, total{};
  bleu_stats(r, h, match, total);
  if (match[0] == 0) return 0.0;
  double log_p = std::log(double(match[0]) / double(total[0])) / 4.0;
  for (std::size_t n = 1; n < 4; ++n) log_p += std::log((match[n] + 1.0) / (total[n] + 1.0)) / 4.0;
  const double bp = h.size() >= r.size() ? 1.0 : std::exp(1.0 - double(r.size()) / double(h.size()));
  return bp * std::exp(log_p);
}

json to_json(const EvalConfig& c) {
  return {{"recall_ns", c.recall_ns},         {"ks", c.ks},     {"auc_ps", c.auc_ps},
          {"auc_negatives", c.auc_negatives}, {"seed", c.seed}, {"max_examples", c.max_examples}};
}

EvalConfig eval_config_from_json(const json& j) {
  EvalConfig c;
  if (!j.is_object()) throw Error("eval: expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (k == "recall_ns") c.recall_ns = v.get<std::vector<std::size_t>>();
      else if (k == "ks") c.ks = v.get<std::vector<std::size_t>>();
      else if (k == "auc_ps") c.auc_ps = v.get<std::vector<double>>();
      else if (k == "auc_negatives") c.auc_negatives = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "max_examples") c.max_examples = v.get<std::size_t>();
      else throw Error("eval: unknown key \"" + k + "\"");
    } catch (const json::exception& e) {
      throw Error("eval." + k + ": " + e.what());
    }
  }
  for (double p : c.auc_ps)
    if (!(p > 0.0 && p <= 1.0)) throw Error("eval.auc_ps: values must be in (0, 1]");
  for (std::size_t k : c.ks)
    if (k == 0) throw Error("eval.ks: values must be >= 1");
  if (c.auc_negatives == 0) throw Error("eval.auc_negatives must be >= 1");
  return c;
}

json eval_report(const dual::DualEncoder<float>& m, const std::vector<corpus::TrainingExample>& test,
                 const dual::NegativeSampler& pool, const std::vector<NamedWhitelist>& whitelists,
                 const EvalConfig& cfg) {
  std::vector<corpus::TrainingExample> ex(
      test.begin(), test.begin() + (cfg.max_examples ? std::min(cfg.max_examples, test.size()) : test.size()));
  const ExampleEncodings enc = encode_examples(m, ex);
  const CandidateSet cands = encode_pool(m, pool);
  const std::size_t d = enc.contexts.cols();

  // Pooled ROC: every true response against one seeded shared negative set.
  Rng nrng(derive_seed(cfg.seed, "auc-negatives"));
  const auto neg_ids = pool.sample(std::min(cfg.auc_negatives, pool.size()), {}, nrng);
  std::vector<ScoredPair> pairs;
  for (std::size_t i = 0; i < ex.size(); ++i) {
    pairs.push_back({dot(enc.contexts.row(i), enc.responses.row(i), d), true});
    for (std::size_t j : neg_ids)
      if (cands.keys[j] != enc.keys[i]) pairs.push_back({dot(enc.contexts.row(i), cands.encodings.row(j), d), false});
  }
  json report;
  report["kind"] = "eval_report";
  report["metadata"] = {
      {"examples", ex.size()},
      {"seed", cfg.seed},
      {"pool_size", pool.size()},
      {"auc_negatives", neg_ids.size()},
      {"auc_protocol", "true response vs a fixed seeded set of frequency-weighted shared negatives, pooled"},
      {"tie_policy", "AUC ties count 1/2; ranking ties go against the true response"},
      {"parameter_count", m.parameter_count()},
      {"config", to_json(cfg)}};
  report["auc"] = auc(pairs);
  json ap = json::array();
  for (double p : cfg.auc_ps) ap.push_back({{"p", p}, {"value", auc_at_p(pairs, p)}});
  report["auc_at_p"] = ap;

  json rr = json::array();
  for (std::size_t n : cfg.recall_ns) {
    try {
      const auto r = recall_random(enc, cands, n, cfg.ks, derive_seed(cfg.seed, "recall-" + std::to_string(n)));
      rr.push_back({{"n", n}, {"examples", r.examples}, {"recall", recall_json(r)}});
    } catch (const Error& e) {
      rr.push_back({{"n", n}, {"skipped", e.what()}});
    }
  }
  report["recall_random"] = rr;

  json wls = json::array();
  json bleu_j = nullptr;
  for (const auto& nw : whitelists) {
    const wl::Whitelist& w = *nw.whitelist;
    const CandidateSet wc = encode_whitelist(m, w);
    json wj{{"name", nw.name},
            {"method", wl::to_string(w.method)},
            {"size", w.size()},
            {"target_size", w.target_size},
            {"corpus_hash", w.corpus_hash},
            {"seed", w.seed},
            {"coverage", coverage(w.keys(), enc.keys)}};
    const auto plus = recall_whitelist_plus(enc, wc, cfg.ks);
    wj["recall_plus"] = recall_json(plus);
    try {
      const auto res = recall_whitelist_restricted(enc, wc, cfg.ks);
      wj["recall_restricted"] = {{"support", res.examples}, {"recall", recall_json(res)}};
    } catch (const NoCoverage& e) {
      wj["recall_restricted"] = {{"support", 0}, {"error", e.what()}};
    }
    wls.push_back(wj);

    if (bleu_j.is_null() && w.size() > 0) {
      std::vector<std::string> hyps;
      double sent = 0.0;
      for (std::size_t i = 0; i < ex.size(); ++i) {
        const auto s = scores_against(wc.encodings, enc.contexts.row(i));
        const std::size_t top = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
        hyps.push_back(wc.texts[top]);
        sent += sentence_bleu_smoothed(enc.texts[i], hyps.back());
      }
      bleu_j = {{"whitelist", nw.name},
                {"corpus", bleu(enc.texts, hyps)},
                {"sentence_add_one_mean", sent / double(ex.size())},
                {"note", "corpus BLEU-4 of the top whitelist suggestion, unsmoothed; the sentence mean is an "
                         "add-one smoothed diagnostic"}};
    }
  }
  report["whitelists"] = wls;
  report["bleu"] = bleu_j;
  return report;
}

std::string report_table(const json& r) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(4);
  o << "examples " << r["metadata"]["examples"].get<std::size_t>() << ", AUC negatives "
    << r["metadata"]["auc_negatives"].get<std::size_t>() << "\n\n";
  o << std::left << std::setw(12) << "metric" << std::right << std::setw(10) << "value" << '\n';
  o << std::left << std::setw(12) << "AUC" << std::right << std::setw(10) << r["auc"].get<double>() << '\n';
  for (const auto& a : r["auc_at_p"]) {
    std::ostringstream name;
    name << "AUC@" << a["p"].get<double>() * 100 << "%";
    o << std::left << std::setw(12) << name.str() << std::right << std::setw(10) << a["value"].get<double>() << '\n';
  }
  o << '\n';
  const auto& rr = r["recall_random"];
  if (!rr.empty()) {
    std::vector<std::size_t> ks;
    for (const auto& row : rr)
      if (row.contains("recall")) {
        for (const auto& kv : row["recall"]) ks.push_back(kv["k"].get<std::size_t>());
        break;
      }
    o << std::left << std::setw(12) << "candidates";
    for (std::size_t k : ks) o << std::right << std::setw(10) << ("R@" + std::to_string(k));
    o << '\n';
    for (const auto& row : rr) {
      o << std::left << std::setw(12) << row["n"].get<std::size_t>();
      if (row.contains("skipped")) {
        o << "  skipped: " << row["skipped"].get<std::string>() << '\n';
        continue;
      }
      for (const auto& kv : row["recall"]) o << std::right << std::setw(10) << kv["value"].get<double>();
      o << '\n';
    }
    o << '\n';
  }
  for (const auto& w : r["whitelists"]) {
    o << "whitelist " << w["name"].get<std::string>() << " (" << w["method"].get<std::string>() << ", "
      << w["size"].get<std::size_t>() << " entries), coverage " << w["coverage"].get<double>() << '\n';
    o << std::left << std::setw(12) << "  plus";
    for (const auto& kv : w["recall_plus"])
      o << std::right << std::setw(10) << ("R@" + std::to_string(kv["k"].get<std::size_t>())) << ' '
        << kv["value"].get<double>();
    o << '\n' << std::left << std::setw(12) << "  restricted";
    const auto& res = w["recall_restricted"];
    if (res.contains("error")) {
      o << "  " << res["error"].get<std::string>();
    } else {
      for (const auto& kv : res["recall"])
        o << std::right << std::setw(10) << ("R@" + std::to_string(kv["k"].get<std::size_t>())) << ' '
          << kv["value"].get<double>();
      o << "  (support " << res["support"].get<std::size_t>() << ")";
    }
    o << "\n\n";
  }
  if (!r["bleu"].is_null())
    o << "BLEU (top-1 from " << r["bleu"]["whitelist"].get<std::string>() << ") "
      << r["bleu"]["corpus"].get<double>() << '\n';
  return o.str();
}

}  // namespace suggest::eval
