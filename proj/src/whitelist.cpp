#include "suggest/whitelist.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "suggest/eval.hpp"

namespace suggest::wl {

using num::Tensor;

namespace {

bool by_frequency(const Entry& a, const Entry& b) {
  if (a.frequency != b.frequency) return a.frequency > b.frequency;
  return a.key < b.key;
}

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

// Nearest centroid, lowest index on ties.
std::pair<std::size_t, double> nearest(const double* p, const Tensor<double>& c, std::size_t d) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c.rows(); ++j) {
    const double dist = sq_dist(p, c.row(j), d);
    if (dist < bd) bd = dist, best = j;
  }
  return {best, bd};
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string unescape(std::string_view s, std::size_t line) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (++i == s.size()) throw FormatError("whitelist line " + std::to_string(line) + ": dangling escape");
    switch (s[i]) {
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      case '\\': out.push_back('\\'); break;
      default: throw FormatError("whitelist line " + std::to_string(line) + ": unknown escape \\" + s[i]);
    }
  }
  return out;
}

std::vector<std::string_view> split_tabs(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t p = s.find('\t', start);
    out.push_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

std::size_t parse_count(std::string_view s, std::size_t line, const char* what) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string_view::npos)
    throw FormatError("whitelist line " + std::to_string(line) + ": " + what + " is not a non-negative integer: \"" +
                      std::string(s) + "\"");
  return std::stoull(std::string(s));
}

constexpr std::string_view kMagic = "# suggest-whitelist v1";
constexpr std::string_view kColumns = "key\ttext\tfrequency\tcluster_id";

}  // namespace

std::string_view to_string(Method m) { return m == Method::frequency ? "frequency" : "clustering"; }

Method parse_method(std::string_view s) {
  if (s == "frequency") return Method::frequency;
  if (s == "clustering") return Method::clustering;
  throw Error("unknown whitelist method \"" + std::string(s) + "\"");
}

std::string_view to_string(Weighting w) { return w == Weighting::distinct ? "distinct" : "occurrences"; }

Weighting parse_weighting(std::string_view s) {
  if (s == "distinct") return Weighting::distinct;
  if (s == "occurrences") return Weighting::occurrences;
  throw Error("unknown clustering weighting \"" + std::string(s) + "\" (distinct or occurrences)");
}

std::unordered_set<std::string> Whitelist::keys() const {
  std::unordered_set<std::string> out;
  for (const auto& e : entries) out.insert(e.key);
  return out;
}

std::size_t Whitelist::total_frequency() const {
  std::size_t s = 0;
  for (const auto& e : entries) s += e.frequency;
  return s;
}

void Whitelist::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& e : entries) {
    if (e.frequency == 0) throw Error("whitelist entry \"" + e.key + "\" has zero frequency");
    if (!seen.insert(e.key).second) throw Error("whitelist has duplicate key \"" + e.key + "\"");
  }
}

Whitelist build_frequency_whitelist(const std::vector<corpus::TrainingExample>& examples, std::size_t n,
                                    const std::string& corpus_hash, BuildNotes* notes) {
  if (examples.empty()) throw Error("frequency whitelist: the split has no agent responses");
  Whitelist w;
  w.method = Method::frequency;
  w.target_size = n;
  w.corpus_hash = corpus_hash;
  for (auto& g : corpus::group_responses(examples)) w.entries.push_back({g.key, g.text, g.frequency, std::nullopt});
  std::sort(w.entries.begin(), w.entries.end(), by_frequency);
  if (w.entries.size() < n) {
    if (notes)
      notes->warnings.push_back("only " + std::to_string(w.entries.size()) + " distinct responses for a target of " +
                                std::to_string(n) + "; keeping all");
  } else {
    w.entries.resize(n);
  }
  return w;
}

Tensor<double> normalize_rows(const Tensor<float>& x) {
  Tensor<double> out(num::Shape{x.rows(), x.cols()});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += double(x(r, c)) * x(r, c);
    const double inv = s > 0.0 ? 1.0 / std::sqrt(s) : 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) * inv;
  }
  return out;
}

KMeansResult kmeans(const Tensor<double>& points, std::size_t k, std::size_t max_iters, std::uint64_t seed,
                    std::span<const double> weights) {
  const std::size_t n = points.rows(), d = points.cols();
  if (!weights.empty() && weights.size() != n)
    throw ShapeError("kmeans: " + std::to_string(weights.size()) + " weights for " + std::to_string(n) + " points");
  for (double x : weights)
    if (!(x > 0.0 && std::isfinite(x))) throw Error("kmeans: weights must be positive and finite");
  auto w = [&](std::size_t i) { return weights.empty() ? 1.0 : weights[i]; };
  if (points.rank() != 2) throw ShapeError("kmeans: points must be a matrix, got " + num::shape_str(points.shape));
  if (k == 0) throw Error("kmeans: k must be >= 1");
  if (n < k) throw Error("kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(k) + " clusters");
  Rng rng(seed);
  KMeansResult res;
  res.centroids = Tensor<double>(num::Shape{k, d});

  // k-means++: first centre by weight, then proportional to weight times
  // squared distance.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  std::size_t pick = 0;
  if (weights.empty()) {
    pick = rng.below(n);
  } else {
    double t = rng.uniform() * std::accumulate(weights.begin(), weights.end(), 0.0);
    for (pick = 0; pick + 1 < n && t >= weights[pick]; ++pick) t -= weights[pick];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (j > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : w(i) * d2[i];
      if (total > 0.0) {
        double t = rng.uniform() * total;
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (chosen[i] || d2[i] <= 0.0) continue;
          pick = i;
          if (t < w(i) * d2[i]) break;
          t -= w(i) * d2[i];
        }
      } else {  // every remaining point duplicates a centre
        std::size_t r = rng.below(n - j);
        for (pick = 0; chosen[pick] || r-- > 0; ++pick) {
        }
      }
    }
    chosen[pick] = 1;
    std::copy(points.row(pick), points.row(pick) + d, res.centroids.row(j));
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points.row(i), res.centroids.row(j), d));
  }

  auto& assign = res.assignments;
  assign.assign(n, k);  // k = unassigned
  std::vector<double> dist(n, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t it = 0; it < max_iters; ++it) {
    // Assignment: a point moves only to a strictly closer centroid.
    std::vector<char> dirty(k, 0);
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      auto [j, dj] = nearest(points.row(i), res.centroids, d);
      if (assign[i] < k) {
        const double cur = sq_dist(points.row(i), res.centroids.row(assign[i]), d);
        if (!(dj < cur)) j = assign[i], dj = cur;
      }
      if (j != assign[i]) {
        if (assign[i] < k) dirty[assign[i]] = 1;
        dirty[j] = 1;
        assign[i] = j;
        changed = true;
      }
      dist[i] = dj;
    }
    if (!changed) {
      res.converged = true;
      break;
    }
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < n; ++i) ++count[assign[i]];
    // Reseed empty clusters with the farthest point (which then sits on its centroid).
    for (std::size_t j = 0; j < k; ++j) {
      if (count[j] > 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (count[assign[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
      if (far == n) continue;
      dirty[assign[far]] = 1, dirty[j] = 1;
      --count[assign[far]];
      assign[far] = j, count[j] = 1, dist[far] = 0.0;
      std::copy(points.row(far), points.row(far) + d, res.centroids.row(j));
    }
    // Update: recompute changed clusters, keeping the old centroid if rounding
    // would make the new mean no better.
    Tensor<double> sums(num::Shape{k, d});
    std::vector<double> mass(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (!dirty[assign[i]]) continue;
      double* s = sums.row(assign[i]);
      for (std::size_t c = 0; c < d; ++c) s[c] += w(i) * points(i, c);
      mass[assign[i]] += w(i);
    }
    std::vector<double> sse_old(k, 0.0), sse_new(k, 0.0);
    for (std::size_t j = 0; j < k; ++j)
      if (dirty[j] && count[j] > 0)
        for (std::size_t c = 0; c < d; ++c) sums(j, c) /= mass[j];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = assign[i];
      if (!dirty[j]) continue;
      sse_old[j] += w(i) * sq_dist(points.row(i), res.centroids.row(j), d);
      sse_new[j] += w(i) * sq_dist(points.row(i), sums.row(j), d);
    }
    for (std::size_t j = 0; j < k; ++j)
      if (dirty[j] && count[j] > 0 && sse_new[j] <= sse_old[j])
        std::copy(sums.row(j), sums.row(j) + d, res.centroids.row(j));
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += w(i) * sq_dist(points.row(i), res.centroids.row(assign[i]), d);
    res.inertia.push_back(inertia);
    res.iterations = it + 1;
  }
  return res;
}

Whitelist build_clustering_whitelist(const std::vector<corpus::TrainingExample>& examples,
                                     const dual::DualEncoder<float>& model, const ClusteringOptions& opts,
                                     const std::string& corpus_hash, KMeansResult* result) {
  if (examples.empty()) throw Error("clustering whitelist: the split has no agent responses");
  const auto groups = corpus::group_responses(examples);
  if (groups.size() < opts.k)
    throw Error("clustering whitelist: " + std::to_string(groups.size()) + " distinct responses for k = " +
                std::to_string(opts.k));
  std::vector<corpus::Tokens> seqs;
  seqs.reserve(groups.size());
  for (const auto& g : groups) {
    seqs.push_back(dual::response_tokens(g.text));
    if (seqs.back().empty()) throw Error("clustering whitelist: response \"" + g.key + "\" has no tokens");
  }
  const Tensor<float> enc = dual::encode_responses(model, seqs);
  const Tensor<double> pts = opts.normalize ? normalize_rows(enc) : enc.cast<double>();
  std::vector<double> weights;
  if (opts.weighting == Weighting::occurrences)
    for (const auto& g : groups) weights.push_back(static_cast<double>(g.frequency));
  KMeansResult km = kmeans(pts, opts.k, opts.max_iters, opts.seed, weights);

  // Most frequent member per cluster; groups are key-sorted, so the first
  // maximum also wins the key tie-break.
  std::vector<std::size_t> best(opts.k, groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::size_t& b = best[km.assignments[i]];
    if (b == groups.size() || groups[i].frequency > groups[b].frequency) b = i;
  }
  Whitelist w;
  w.method = Method::clustering;
  w.target_size = opts.k;
  w.corpus_hash = corpus_hash;
  w.seed = opts.seed;
  for (std::size_t j = 0; j < opts.k; ++j)
    if (best[j] < groups.size())
      w.entries.push_back({groups[best[j]].key, groups[best[j]].text, groups[best[j]].frequency, j});
  std::sort(w.entries.begin(), w.entries.end(), by_frequency);
  if (result) *result = std::move(km);
  return w;
}

std::string to_tsv(const Whitelist& w) {
  std::ostringstream out;
  out << kMagic << "\tmethod=" << to_string(w.method) << "\ttarget_size=" << w.target_size
      << "\tcorpus_hash=" << (w.corpus_hash.empty() ? "-" : w.corpus_hash) << "\tseed=" << w.seed
      << "\tentries=" << w.entries.size() << '\n';
  out << kColumns << '\n';
  for (const auto& e : w.entries) {
    out << escape(e.key) << '\t' << escape(e.text) << '\t' << e.frequency << '\t';
    if (e.cluster) out << *e.cluster;
    out << '\n';
  }
  return out.str();
}

Whitelist from_tsv(std::string_view text) {
  Whitelist w;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0, declared = 0;
  bool have_columns = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto f = split_tabs(line);
    if (line_no == 1) {
      if (f.empty() || f[0] != kMagic) throw FormatError("whitelist line 1: missing \"" + std::string(kMagic) + "\" header");
      bool has_method = false, has_entries = false;
      for (std::size_t i = 1; i < f.size(); ++i) {
        const auto eq = f[i].find('=');
        if (eq == std::string_view::npos) throw FormatError("whitelist line 1: bad header field \"" + std::string(f[i]) + "\"");
        const std::string_view k = f[i].substr(0, eq), v = f[i].substr(eq + 1);
        if (k == "method") w.method = parse_method(v), has_method = true;
        else if (k == "target_size") w.target_size = parse_count(v, 1, "target_size");
        else if (k == "corpus_hash") w.corpus_hash = v == "-" ? "" : std::string(v);
        else if (k == "seed") w.seed = parse_count(v, 1, "seed");
        else if (k == "entries") declared = parse_count(v, 1, "entries"), has_entries = true;
        else throw FormatError("whitelist line 1: unknown header field \"" + std::string(k) + "\"");
      }
      if (!has_method || !has_entries) throw FormatError("whitelist line 1: header needs method= and entries=");
      continue;
    }
    if (line_no == 2) {
      if (line != kColumns) throw FormatError("whitelist line 2: expected column header \"key<TAB>text<TAB>frequency<TAB>cluster_id\"");
      have_columns = true;
      continue;
    }
    if (line.empty() && pos >= text.size()) break;
    if (f.size() < 3) throw FormatError("whitelist line " + std::to_string(line_no) + ": missing frequency column");
    if (f.size() > 4) throw FormatError("whitelist line " + std::to_string(line_no) + ": too many columns");
    Entry e;
    e.key = unescape(f[0], line_no);
    e.text = unescape(f[1], line_no);
    e.frequency = parse_count(f[2], line_no, "frequency");
    if (e.frequency == 0) throw FormatError("whitelist line " + std::to_string(line_no) + ": frequency must be >= 1");
    if (f.size() == 4 && !f[3].empty()) e.cluster = parse_count(f[3], line_no, "cluster_id");
    if (!seen.insert(e.key).second)
      throw FormatError("whitelist line " + std::to_string(line_no) + ": duplicate key \"" + e.key + "\"");
    w.entries.push_back(std::move(e));
  }
  if (!have_columns) throw FormatError("whitelist: truncated header");
  if (declared != w.entries.size())
    throw FormatError("whitelist: header declares " + std::to_string(declared) + " entries, file has " +
                      std::to_string(w.entries.size()));
  return w;
}

void save_whitelist(const std::string& path, const Whitelist& w) { write_file(path, to_tsv(w)); }

Whitelist load_whitelist(const std::string& path) {
  try {
    return from_tsv(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

nlohmann::json describe(const Whitelist& w, const std::vector<corpus::TrainingExample>* examples,
                        const std::string& split_name) {
  nlohmann::json j{{"method", to_string(w.method)},
                   {"size", w.size()},
                   {"target_size", w.target_size},
                   {"total_frequency", w.total_frequency()},
                   {"corpus_hash", w.corpus_hash},
                   {"seed", w.seed}};
  if (examples)
    j["coverage_on"] = {{"split", split_name}, {"examples", examples->size()}, {"coverage", eval::coverage(w, *examples)}};
  return j;
}

}  // namespace suggest::wl
