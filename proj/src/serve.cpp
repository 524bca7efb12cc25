#include "suggest/serve.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>

#include "httplib.h"
#include "suggest/numerics/blas.hpp"
#include "suggest/numerics/tensor_io.hpp"

namespace suggest::serve {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct Stats {
  double mean, median, p99;
};

Stats summarize(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  const double median = v.size() % 2 ? v[v.size() / 2] : (v[v.size() / 2 - 1] + v[v.size() / 2]) / 2.0;
  const std::size_t i99 = std::min(v.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * double(v.size()))) - 1);
  return {mean, median, v[i99]};
}

}  // namespace

ResponseIndex build_index(const wl::Whitelist& w, const dual::DualEncoder<float>& model,
                          const std::string& checkpoint_hash, const std::string& whitelist_hash) {
  if (w.entries.empty()) throw Error("build_index: empty whitelist");
  std::vector<corpus::Tokens> seqs;
  seqs.reserve(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    seqs.push_back(dual::response_tokens(w.entries[i].text));
    if (seqs.back().empty())
      throw Error("build_index: whitelist entry " + std::to_string(i) + " (\"" + w.entries[i].key +
                  "\") has no tokens to encode");
  }
  ResponseIndex idx;
  idx.matrix = dual::encode_responses(model, seqs);
  for (std::size_t i = 0; i < idx.matrix.rows(); ++i)
    for (std::size_t c = 0; c < idx.matrix.cols(); ++c)
      if (!std::isfinite(idx.matrix(i, c)))
        throw Error("build_index: non-finite encoding for whitelist entry " + std::to_string(i) + " (\"" +
                    w.entries[i].key + "\")");
  idx.checkpoint_hash = checkpoint_hash;
  idx.whitelist_hash = whitelist_hash;
  return idx;
}

void save_index(const std::string& path, const ResponseIndex& idx) {
  num::TensorFile f;
  f.add("index", idx.matrix);
  f.metadata = json{{"format", "suggest-response-index"},
                    {"checkpoint_hash", idx.checkpoint_hash},
                    {"whitelist_hash", idx.whitelist_hash},
                    {"rows", idx.matrix.rows()},
                    {"cols", idx.matrix.cols()}}
                   .dump();
  num::save_tensor_file(path, f);
}

ResponseIndex load_index(const std::string& path, const std::string& expected_checkpoint_hash) {
  const num::TensorFile f = num::load_tensor_file(path);
  if (!f.metadata) throw FormatError(path + ": index has no metadata");
  const json meta = json::parse(*f.metadata, nullptr, false);
  if (meta.is_discarded() || meta.value("format", "") != "suggest-response-index")
    throw FormatError(path + ": not a response index");
  ResponseIndex idx;
  idx.matrix = f.get("index");
  idx.checkpoint_hash = meta.value("checkpoint_hash", "");
  idx.whitelist_hash = meta.value("whitelist_hash", "");
  if (idx.checkpoint_hash != expected_checkpoint_hash)
    throw FormatError(path + ": stale index (built for checkpoint " + idx.checkpoint_hash + ", loaded checkpoint is " +
                      expected_checkpoint_hash + ")");
  return idx;
}

std::vector<Ranked> top_k(std::span<const float> context, const Tensor<float>& index, std::size_t k) {
  if (k == 0) throw Error("top_k: k must be >= 1");
  const std::size_t n = index.rank() == 2 ? index.rows() : 0;
  if (n == 0) throw Error("top_k: empty index");
  if (index.cols() != context.size())
    throw ShapeError("top_k: context length " + std::to_string(context.size()) + " vs index width " +
                     std::to_string(index.cols()));
  std::vector<float> s(n);
  num::blas::gemv(false, n, index.cols(), 1.0f, index.data.data(), index.cols(), context.data(), 0.0f, s.data());
  k = std::min(k, n);
  std::vector<std::uint32_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0u);
  auto better = [&](std::uint32_t a, std::uint32_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); };
  if (k < n) {
    std::nth_element(ids.begin(), ids.begin() + k, ids.end(), better);
    ids.resize(k);
  }
  std::sort(ids.begin(), ids.end(), better);
  std::vector<Ranked> out;
  out.reserve(k);
  for (auto i : ids) out.push_back({i, s[i]});
  return out;
}

SuggestRequest parse_request(std::string_view body, std::size_t default_top_k) {
  const json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw BadRequest("request body is not valid JSON");
  if (!j.is_object()) throw BadRequest("request body must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "turns" && k != "top_k") throw BadRequest("unknown field \"" + k + "\"");
  SuggestRequest r;
  r.top_k = default_top_k;
  if (j.contains("top_k")) {
    const json& t = j["top_k"];
    if (!t.is_number_integer() || t.get<long long>() < 1) throw BadRequest("top_k must be a positive integer");
    r.top_k = t.get<std::size_t>();
  }
  if (!j.contains("turns") || !j["turns"].is_array()) throw BadRequest("turns must be an array");
  if (j["turns"].empty()) throw BadRequest("turns must not be empty");
  for (const auto& t : j["turns"]) {
    if (!t.is_object() || !t.contains("role") || !t.contains("text") || !t["role"].is_string() || !t["text"].is_string())
      throw BadRequest("each turn needs string fields role and text");
    corpus::Turn turn;
    try {
      turn.role = corpus::parse_role(t["role"].get<std::string>());
    } catch (const Error& e) {
      throw BadRequest(e.what());
    }
    turn.text = t["text"].get<std::string>();
    r.turns.push_back(std::move(turn));
  }
  return r;
}

json to_json(const SuggestResponse& r) {
  json s = json::array();
  for (const auto& x : r.suggestions)
    s.push_back({{"text", x.text}, {"score", x.score}, {"whitelist_index", x.whitelist_index}});
  return {{"suggestions", s}, {"timing", {{"encode_ms", r.encode_ms}, {"rank_ms", r.rank_ms}}}};
}

Engine::Engine(dual::DualEncoder<float> model, wl::Whitelist whitelist, ResponseIndex index,
               std::string checkpoint_hash, std::string whitelist_hash)
    : model_(std::move(model)),
      whitelist_(std::move(whitelist)),
      index_(std::move(index)),
      checkpoint_hash_(std::move(checkpoint_hash)),
      whitelist_hash_(std::move(whitelist_hash)) {
  if (index_.size() != whitelist_.size())
    throw Error("index has " + std::to_string(index_.size()) + " rows but the whitelist has " +
                std::to_string(whitelist_.size()) + " entries");
  if (index_.matrix.cols() != model_.config.encoder.output_dim())
    throw ShapeError("index width does not match the model's encoding width");
}

SuggestResponse Engine::suggest(const SuggestRequest& req) const {
  if (req.turns.empty()) throw BadRequest("turns must not be empty");
  corpus::Conversation conv;
  conv.turns = req.turns;
  const corpus::Tokens ctx = corpus::build_context(conv, conv.turns.size());
  SuggestResponse out;
  auto t0 = Clock::now();
  const std::vector<float> c = enc::encode(model_.context, *model_.embedding, ctx);
  out.encode_ms = ms_since(t0);
  t0 = Clock::now();
  const auto ranked = top_k(c, index_.matrix, req.top_k);
  out.rank_ms = ms_since(t0);
  for (const auto& r : ranked) out.suggestions.push_back({whitelist_.entries[r.index].text, r.score, r.index});
  return out;
}

json Engine::health() const {
  return {{"status", "ok"},
          {"checkpoint_hash", checkpoint_hash_},
          {"whitelist_hash", whitelist_hash_},
          {"whitelist_size", whitelist_.size()}};
}

json Engine::whitelist_json() const {
  json entries = json::array();
  for (std::size_t i = 0; i < whitelist_.size(); ++i) {
    const auto& e = whitelist_.entries[i];
    entries.push_back({{"index", i},
                       {"key", e.key},
                       {"text", e.text},
                       {"frequency", e.frequency},
                       {"cluster_id", e.cluster ? json(*e.cluster) : json(nullptr)}});
  }
  json meta = wl::describe(whitelist_);
  meta["whitelist_hash"] = whitelist_hash_;
  return {{"metadata", meta}, {"entries", entries}};
}

// --- HTTP -------------------------------------------------------------------

struct Server::Impl {
  std::shared_ptr<const Engine> engine;
  ServerOptions opts;
  httplib::Server http;
  std::mutex log_mu;
};

Server::Server(std::shared_ptr<const Engine> engine, ServerOptions opts) : impl_(std::make_unique<Impl>()) {
  impl_->engine = std::move(engine);
  impl_->opts = std::move(opts);
  auto& http = impl_->http;
  auto* impl = impl_.get();
  http.set_payload_max_length(impl->opts.max_body_bytes);

  auto send_json = [](httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };

  http.Post("/suggest", [impl, send_json](const httplib::Request& req, httplib::Response& res) {
    const auto t0 = Clock::now();
    try {
      const SuggestRequest r = parse_request(req.body, impl->opts.default_top_k);
      const SuggestResponse out = impl->engine->suggest(r);
      send_json(res, 200, to_json(out));
      res.set_header("X-Encode-Ms", std::to_string(out.encode_ms));
      res.set_header("X-Rank-Ms", std::to_string(out.rank_ms));
    } catch (const BadRequest& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", e.what()}});
    }
    res.set_header("X-Latency-Ms", std::to_string(ms_since(t0)));
  });
  http.Get("/healthz", [impl, send_json](const httplib::Request&, httplib::Response& res) {
    const auto t0 = Clock::now();
    send_json(res, 200, impl->engine->health());
    res.set_header("X-Latency-Ms", std::to_string(ms_since(t0)));
  });
  http.Get("/whitelist", [impl, send_json](const httplib::Request&, httplib::Response& res) {
    const auto t0 = Clock::now();
    send_json(res, 200, impl->engine->whitelist_json());
    res.set_header("X-Latency-Ms", std::to_string(ms_since(t0)));
  });
  if (!impl->opts.console_dir.empty() && !http.set_mount_point("/console", impl->opts.console_dir))
    throw Error("console directory not found: " + impl->opts.console_dir);
  http.set_error_handler([send_json](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const char* msg = res.status == 413 ? "request body exceeds the size limit" : "request failed";
      send_json(res, res.status, {{"error", msg}});
    }
  });
  // httplib's default adds SO_REUSEPORT, which lets a second server share a busy port silently
  http.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  http.set_logger([impl](const httplib::Request& req, const httplib::Response& res) {
    if (!impl->opts.access_log) return;
    json line{{"ts", std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count()},
              {"method", req.method},
              {"path", req.path},
              {"status", res.status},
              {"bytes_in", req.body.size()},
              {"bytes_out", res.body.size()}};
    for (const auto& [h, k] : {std::pair{"X-Latency-Ms", "latency_ms"}, {"X-Encode-Ms", "encode_ms"},
                               {"X-Rank-Ms", "rank_ms"}})
      if (res.has_header(h)) line[k] = std::stod(res.get_header_value(h));
    std::lock_guard lock(impl->log_mu);
    *impl->opts.access_log << line.dump() << '\n' << std::flush;
  });
}

Server::~Server() { stop(); }

int Server::bind() {
  auto& o = impl_->opts;
  if (o.port == 0) {
    const int p = impl_->http.bind_to_any_port(o.host);
    if (p < 0) throw Error("cannot bind " + o.host + " to any port");
    o.port = p;
    return p;
  }
  if (!impl_->http.bind_to_port(o.host, o.port))
    throw Error("cannot bind " + o.host + ":" + std::to_string(o.port) + " (port busy or address unavailable)");
  return o.port;
}

void Server::listen() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

// --- Benchmarks ---------------------------------------------------------------

json to_json(const BenchReport& r) {
  json j{{"kind", r.kind},
         {"samples", r.samples},
         {"warmup", r.warmup},
         {"mean_ms", r.mean_ms},
         {"median_ms", r.median_ms},
         {"p99_ms", r.p99_ms},
         {"single_thread", r.single_thread},
         {"cpu", r.cpu}};
  if (r.kind == "encoder") {
    j["encoder"] = r.encoder;
    j["layers"] = r.layers;
    j["parameters"] = r.parameters;
    j["context_length"] = r.context_length;
  } else {
    j["index_rows"] = r.index_rows;
    j["k"] = r.k;
  }
  return j;
}

std::string cpu_model() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("model name", 0) == 0) {
      const auto p = line.find(':');
      if (p != std::string::npos) return line.substr(line.find_first_not_of(' ', p + 1));
    }
  return "unknown";
}

BenchReport bench_encoder(const enc::EncoderConfig& cfg, std::size_t context_length, std::size_t samples,
                          std::size_t warmup, std::uint64_t seed) {
  if (samples == 0 || context_length == 0) throw Error("bench_encoder: samples and context_length must be >= 1");
  num::blas::set_single_thread();
  Rng rng(seed);
  const enc::Encoder<float> e(cfg, rng);
  Tensor<float> x(num::Shape{context_length, cfg.input_dim});
  for (auto& v : x.data) v = static_cast<float>(rng.normal() * 0.1);
  const enc::Segments seg = enc::Segments::packed({context_length});
  std::vector<double> t;
  float sink = 0.0f;
  for (std::size_t i = 0; i < warmup + samples; ++i) {
    const auto t0 = Clock::now();
    num::Graph<float> g(false);
    sink += g.value(e.forward(g, g.view(x), seg)).data[0];
    if (i >= warmup) t.push_back(ms_since(t0));
  }
  if (!std::isfinite(sink)) throw Error("bench_encoder: non-finite output");
  const Stats s = summarize(t);
  BenchReport r;
  r.kind = "encoder";
  r.encoder = std::string(enc::to_string(cfg.cell));
  r.layers = cfg.layers;
  r.parameters = enc::parameter_count(cfg);
  r.samples = samples;
  r.warmup = warmup;
  r.context_length = context_length;
  r.mean_ms = s.mean, r.median_ms = s.median, r.p99_ms = s.p99;
  r.cpu = cpu_model();
  return r;
}

BenchReport bench_rank(std::size_t n, std::size_t d, std::size_t samples, std::size_t k, std::uint64_t seed) {
  if (samples == 0 || n == 0 || d == 0) throw Error("bench_rank: n, d and samples must be >= 1");
  num::blas::set_single_thread();
  Rng rng(seed);
  Tensor<float> idx(num::Shape{n, d});
  for (auto& v : idx.data) v = static_cast<float>(rng.normal());
  std::vector<std::vector<float>> ctx(std::min<std::size_t>(samples, 64), std::vector<float>(d));
  for (auto& c : ctx)
    for (auto& v : c) v = static_cast<float>(rng.normal());
  std::vector<double> t;
  std::size_t sink = 0;
  const std::size_t warmup = std::min<std::size_t>(samples, 10);
  for (std::size_t i = 0; i < warmup + samples; ++i) {
    const auto t0 = Clock::now();
    sink += top_k(ctx[i % ctx.size()], idx, k).front().index;
    if (i >= warmup) t.push_back(ms_since(t0));
  }
  (void)sink;
  const Stats s = summarize(t);
  BenchReport r;
  r.kind = "rank";
  r.samples = samples;
  r.warmup = warmup;
  r.index_rows = n;
  r.k = k;
  r.mean_ms = s.mean, r.median_ms = s.median, r.p99_ms = s.p99;
  r.cpu = cpu_model();
  return r;
}

}  // namespace suggest::serve
