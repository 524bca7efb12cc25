#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "suggest/serve.hpp"

using namespace suggest;
using namespace suggest::serve;
using nlohmann::json;
using num::Shape;
using num::Tensor;

namespace {

dual::ModelConfig toy_model() {
  dual::ModelConfig c;
  c.encoder.layers = 1;
  c.encoder.input_dim = c.encoder.hidden = 8;
  c.encoder.heads = 2;
  c.encoder.attn_dim = 4;
  c.embedding.dim = 8;
  c.embedding.buckets = 5000;
  c.init_seed = 3;
  return c;
}

wl::Whitelist toy_whitelist() {
  const auto ex = corpus::extract_examples(corpus::synth_corpus({60, 3, 0.0, 4}));
  return wl::build_frequency_whitelist(ex, 12, "corpus");
}

std::vector<Ranked> sort_oracle(const std::vector<float>& ctx, const Tensor<float>& idx, std::size_t k) {
  std::vector<Ranked> all;
  for (std::size_t i = 0; i < idx.rows(); ++i) {
    float s = 0;  // same accumulation as a dot product is not guaranteed, so compare scores by rank only
    for (std::size_t j = 0; j < idx.cols(); ++j) s += ctx[j] * idx(i, j);
    all.push_back({i, s});
  }
  std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  all.resize(std::min(k, all.size()));
  return all;
}

std::string params_digest(const dual::DualEncoder<float>& m) {
  std::uint64_t h = kFnvOffset;
  auto copy = m;
  for (const auto& p : copy.parameters())
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p.tensor->data.data()), p.tensor->data.size() * 4), h);
  return hex64(h);
}

struct Fixture {
  dual::DualEncoder<float> model{toy_model(), dual::make_embedding(toy_model())};
  wl::Whitelist whitelist = toy_whitelist();
  ResponseIndex index = build_index(whitelist, model, "ckpt", "wl");
  std::shared_ptr<const Engine> engine = std::make_shared<Engine>(model, whitelist, index, "ckpt", "wl");
};

}  // namespace

TEST_CASE("top_k matches a full-sort oracle") {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(t < 20 ? 10000 : 600), d = 1 + rng.below(6);
    // integer-valued entries make exact ties common and dot products exact
    Tensor<float> idx(Shape{n, d});
    for (auto& v : idx.data) v = float(int(rng.below(5)) - 2);
    std::vector<float> ctx(d);
    for (auto& v : ctx) v = float(int(rng.below(5)) - 2);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n + 3, 50));
    const auto got = top_k(ctx, idx, k);
    const auto want = sort_oracle(ctx, idx, k);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].index == want[i].index);
      CHECK(got[i].score == want[i].score);
    }
  }
}

TEST_CASE("top_k edge cases") {
  Rng rng(2);
  Tensor<float> idx(Shape{50, 4});
  for (auto& v : idx.data) v = float(rng.normal());
  std::vector<float> ctx(idx.data.begin() + 4 * 17, idx.data.begin() + 4 * 18);  // row 17
  const auto full = top_k(ctx, idx, 50);
  CHECK(full.size() == 50);
  for (std::size_t i = 1; i < full.size(); ++i) CHECK(full[i - 1].score >= full[i].score);
  // a row scores its own squared norm; scale it up so it wins
  for (std::size_t j = 0; j < 4; ++j) idx(17, j) *= 10.0f, ctx[j] *= 10.0f;
  CHECK(top_k(ctx, idx, 1).at(0).index == 17);
  CHECK_THROWS_AS(top_k(ctx, idx, 0), Error);
  CHECK_THROWS_AS(top_k(ctx, Tensor<float>(Shape{0, 4}), 1), Error);
  CHECK_THROWS_AS(top_k(std::vector<float>(3), idx, 1), ShapeError);
}

TEST_CASE("index rows equal one-at-a-time response encodings") {
  Fixture f;
  REQUIRE(f.index.size() == f.whitelist.size());
  for (std::size_t i = 0; i < f.whitelist.size(); ++i) {
    const auto one = dual::encode_responses(f.model, {dual::response_tokens(f.whitelist.entries[i].text)});
    for (std::size_t j = 0; j < one.cols(); ++j) CHECK(std::abs(one(0, j) - f.index.matrix(i, j)) < 1e-5);
  }
  const auto again = build_index(f.whitelist, f.model, "ckpt", "wl");
  CHECK(again.matrix.data == f.index.matrix.data);

  auto bad = f.whitelist;
  bad.entries[3].text = "   ";
  try {
    build_index(bad, f.model, "ckpt");
    FAIL("expected an Error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(bad.entries[3].key) != std::string::npos);
  }
}

TEST_CASE("index persistence refuses a stale checkpoint") {
  Fixture f;
  const auto path = (std::filesystem::temp_directory_path() / "suggest_test.index").string();
  save_index(path, f.index);
  const auto back = load_index(path, "ckpt");
  CHECK(back.matrix.data == f.index.matrix.data);
  CHECK(back.whitelist_hash == "wl");
  CHECK_THROWS_AS(load_index(path, "other"), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("request parsing") {
  const auto r = parse_request(R"({"turns":[{"role":"customer","text":"hi"}],"top_k":3})");
  CHECK(r.turns.size() == 1);
  CHECK(r.top_k == 3);
  CHECK(parse_request(R"({"turns":[{"role":"agent","text":"x"}]})", 7).top_k == 7);
  for (const char* bad : {"", "{", "[]", R"({"turns":[]})", R"({"turns":"hi"})", R"({"turns":[{"role":"bot","text":"x"}]})",
                          R"({"turns":[{"role":"customer"}]})", R"({"turns":[{"role":"customer","text":"x"}],"top_k":0})",
                          R"({"turns":[{"role":"customer","text":"x"}],"top_k":"5"})",
                          R"({"turns":[{"role":"customer","text":"x"}],"extra":1})"}) {
    INFO(bad);
    CHECK_THROWS_AS(parse_request(bad), BadRequest);
  }
}

TEST_CASE("engine suggestions") {
  Fixture f;
  const std::string before = params_digest(f.model);
  SuggestRequest req;
  req.turns = {{corpus::Role::customer, "my printer is jammed"}};
  for (std::size_t k : {1, 5, 12, 40}) {
    req.top_k = k;
    const auto r = f.engine->suggest(req);
    CHECK(r.suggestions.size() == std::min<std::size_t>(k, f.whitelist.size()));
    for (std::size_t i = 1; i < r.suggestions.size(); ++i) CHECK(r.suggestions[i - 1].score >= r.suggestions[i].score);
    for (const auto& s : r.suggestions) CHECK(s.text == f.whitelist.entries[s.whitelist_index].text);
  }
  auto a = to_json(f.engine->suggest(req)), b = to_json(f.engine->suggest(req));
  a.erase("timing");
  b.erase("timing");
  CHECK(a.dump() == b.dump());
  CHECK(f.engine->health()["whitelist_size"] == f.whitelist.size());
  CHECK(f.engine->whitelist_json()["entries"].size() == f.whitelist.size());
  CHECK(params_digest(f.model) == before);
}

TEST_CASE("http service contract") {
  Fixture f;
  std::ostringstream log;
  ServerOptions o;
  o.port = 0;
  o.access_log = &log;
  o.default_top_k = 4;
  const auto console = std::filesystem::temp_directory_path() / "suggest_console_test";
  std::filesystem::create_directories(console);
  write_file((console / "index.html").string(), "<html>console</html>");
  o.console_dir = console.string();
  Server server(f.engine, o);
  const int port = server.bind();
  std::thread t([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);
  for (int i = 0; i < 100 && !cli.Get("/healthz"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));

  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  const auto h = json::parse(health->body);
  CHECK(h["checkpoint_hash"] == "ckpt");
  CHECK(h["whitelist_hash"] == "wl");

  const std::string body = R"({"turns":[{"role":"customer","text":"I cannot log in"}]})";
  auto res = cli.Post("/suggest", body, "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  const auto j = json::parse(res->body);
  CHECK(j["suggestions"].size() == 4);
  CHECK(j["timing"].contains("encode_ms"));
  CHECK(j["timing"].contains("rank_ms"));
  for (std::size_t i = 1; i < j["suggestions"].size(); ++i)
    CHECK(j["suggestions"][i - 1]["score"].get<double>() >= j["suggestions"][i]["score"].get<double>());

  auto bad = cli.Post("/suggest", "{not json", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(json::parse(bad->body).contains("error"));
  auto empty = cli.Post("/suggest", R"({"turns":[]})", "application/json");
  CHECK(empty->status == 400);
  auto big = cli.Post("/suggest", std::string((1 << 20) + 10, ' '), "application/json");
  REQUIRE(big);
  CHECK(big->status == 413);

  auto wlres = cli.Get("/whitelist");
  CHECK(json::parse(wlres->body)["entries"].size() == f.whitelist.size());
  auto page = cli.Get("/console/index.html");
  REQUIRE(page);
  CHECK(page->body == "<html>console</html>");

  // a second server on the same port fails at startup
  ServerOptions o2;
  o2.port = port;
  Server clash(f.engine, o2);
  CHECK_THROWS_AS(clash.bind(), Error);

  server.stop();
  t.join();
  std::filesystem::remove_all(console);

  std::istringstream lines(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto e = json::parse(line);
    CHECK(e.contains("status"));
    CHECK(e.contains("path"));
    ++n;
  }
  CHECK(n >= 7);
  CHECK(log.str().find("\"latency_ms\"") != std::string::npos);
}

TEST_CASE("rank benchmark report") {
  const auto r = bench_rank(2000, 32, 20, 10, 1);
  CHECK(r.kind == "rank");
  CHECK(r.samples == 20);
  CHECK(r.mean_ms > 0.0);
  CHECK(r.median_ms <= r.p99_ms);
  const auto j = to_json(r);
  CHECK(j["single_thread"] == true);
  CHECK(!j["cpu"].get<std::string>().empty());
}

TEST_CASE("encoder benchmark report") {
  enc::EncoderConfig c;
  c.layers = 1;
  c.input_dim = c.hidden = 16;
  c.heads = 2;
  c.attn_dim = 4;
  const auto r = bench_encoder(c, 50, 5, 1, 0);
  CHECK(r.kind == "encoder");
  CHECK(r.encoder == "sru");
  CHECK(r.parameters == enc::parameter_count(c));
  CHECK(r.mean_ms > 0.0);
}
