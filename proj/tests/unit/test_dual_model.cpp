#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "suggest/dual_model.hpp"
#include "suggest/numerics/ops.hpp"

using namespace suggest;
using namespace suggest::dual;
using num::Shape;

namespace {

ModelConfig toy_model(std::size_t d = 8, std::uint64_t seed = 1) {
  ModelConfig c;
  c.encoder.layers = 2;
  c.encoder.input_dim = c.encoder.hidden = d;
  c.encoder.heads = 2;
  c.encoder.attn_dim = 4;
  c.embedding.dim = d;
  c.embedding.buckets = 5000;
  c.init_seed = seed;
  return c;
}

const std::vector<corpus::TrainingExample>& toy_examples() {
  static const auto ex = corpus::extract_examples(corpus::synth_corpus({120, 4, 0.1, 2}));
  return ex;
}

Batch toy_batch(std::size_t b, std::size_t k, std::uint64_t seed) {
  const auto& ex = toy_examples();
  const auto sampler = NegativeSampler::from_examples(ex);
  Rng rng(seed);
  Batch batch;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& e = ex[rng.below(ex.size())];
    batch.contexts.push_back(e.context_tokens);
    batch.positives.push_back(e.response_tokens);
  }
  for (std::size_t i : sampler.sample(k, {}, rng)) batch.negatives.push_back(sampler.tokens(i));
  return batch;
}

template <typename T>
Tensor<T> mat(std::size_t r, std::size_t c, std::vector<T> v) {
  return Tensor<T>(Shape{r, c}, std::move(v));
}

std::string tmp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

// Long-double reference for the batch cross-entropy from raw encodings.
long double ce_oracle(const Tensor<double>& c, const Tensor<double>& p, const Tensor<double>& n) {
  const std::size_t b = c.rows(), k = n.rows(), d = c.cols();
  auto dot = [&](const Tensor<double>& a, std::size_t i, const Tensor<double>& x, std::size_t j) {
    long double s = 0;
    for (std::size_t t = 0; t < d; ++t) s += (long double)a(i, t) * x(j, t);
    return s;
  };
  long double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<long double> s{dot(c, i, p, i)};
    for (std::size_t j = 0; j < k; ++j) s.push_back(dot(c, i, n, j));
    long double z = 0;
    for (auto v : s) z += std::exp(v);
    total += -s[0] + std::log(z);
  }
  return total / b;
}

}  // namespace

TEST_CASE("cross-entropy loss on a hand example") {
  num::Graph<double> g;
  Var c = g.constant(mat<double>(1, 2, {1, 0}));
  Var p = g.constant(mat<double>(1, 2, {1, 0}));
  Var n = g.constant(mat<double>(2, 2, {0, 1, 2, 0}));
  // scores: positive 1, negatives 0 and 2
  CHECK(g.value(cross_entropy_loss(g, c, p, n)).data[0] ==
        doctest::Approx(-1.0 + std::log(std::exp(1.0) + 1.0 + std::exp(2.0))).epsilon(1e-14));
  const Tensor<float> keep = mat<float>(1, 2, {1, 0});
  CHECK(g.value(cross_entropy_loss(g, c, p, n, &keep)).data[0] ==
        doctest::Approx(-1.0 + std::log(std::exp(1.0) + 1.0)).epsilon(1e-14));
}

TEST_CASE("hinge loss on a hand example") {
  num::Graph<double> g;
  Var c = g.constant(mat<double>(2, 2, {1, 0, 0, 1}));
  Var p = g.constant(mat<double>(2, 2, {1, 0, 0, 1}));
  Var n = g.constant(mat<double>(2, 2, {0, 1, 2, 0}));
  // row 0: s+ = 1, s- = {0, 2} -> max(0, -.75) + max(0, 1.25) = 1.25
  // row 1: s+ = 1, s- = {1, 0} -> .25 + 0 = .25
  CHECK(g.value(hinge_loss(g, c, p, n, 0.25)).data[0] == doctest::Approx((1.25 + 0.25) / 2));
  // |.| form: row 0 .75 + 1.25, row 1 .25 + .75
  CHECK(g.value(hinge_loss(g, c, p, n, 0.25, true)).data[0] == doctest::Approx((2.0 + 1.0) / 2));
  const Tensor<float> keep = mat<float>(2, 2, {1, 0, 0, 1});
  CHECK(g.value(hinge_loss(g, c, p, n, 0.25, false, &keep)).data[0] == doctest::Approx(0.0));
}

TEST_CASE("batch cross-entropy matches a long-double oracle at 64-bit") {
  const auto cfg = toy_model(8, 3);
  DualEncoder<double> m = DualEncoder<float>(cfg, make_embedding(cfg)).cast<double>();
  Rng rng(4);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor->data) v += rng.uniform(-0.3, 0.3);
  for (auto [b, k] : {std::pair<std::size_t, std::size_t>{3, 5}, {6, 20}}) {
    const Batch batch = toy_batch(b, k, b * 10 + k);
    num::Graph<double> g(false);
    const auto e = encode_batch(g, m, batch);
    const long double want = ce_oracle(g.value(e.contexts), g.value(e.positives), g.value(e.negatives));
    const double got = g.value(cross_entropy_loss(g, e.contexts, e.positives, e.negatives)).data[0];
    CHECK(std::abs(got - (double)want) < 1e-12 * std::max(1.0, std::abs((double)want)));
    CHECK(g.value(batch_loss_ce(g, m, batch)).data[0] == got);
  }
}

TEST_CASE("full model gradient check") {
  const auto cfg = toy_model(8, 5);
  DualEncoder<double> m = DualEncoder<float>(cfg, make_embedding(cfg)).cast<double>();
  Rng rng(6);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor->data) v += rng.uniform(-0.2, 0.2);
  m.set_requires_grad(true);
  const Batch batch = toy_batch(3, 5, 7);
  std::vector<Tensor<double>*> ps;
  for (auto& p : m.parameters()) ps.push_back(p.tensor);
  // Central differences in double have a roundoff floor near 1e-16 |L| / h; at
  // h = 1e-4 that swamps the smallest gradients here (~1e-9), so use h = 1e-3.
  const double h = 1e-3;
  SUBCASE("cross entropy") {
    auto r = num::grad_check([&](num::Graph<double>& g) { return batch_loss_ce(g, m, batch); }, ps, h);
    INFO("param ", r.param, " index ", r.index, " analytic ", r.analytic, " numeric ", r.numeric);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("hinge") {
    num::Graph<double> g0(false);
    REQUIRE(g0.value(batch_loss_hinge(g0, m, batch, 0.25)).item() > 0.0);  // some terms active
    auto r = num::grad_check([&](num::Graph<double>& g) { return batch_loss_hinge(g, m, batch, 0.25); }, ps, h);
    INFO("param ", r.param, " index ", r.index, " analytic ", r.analytic, " numeric ", r.numeric);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("initial loss is close to ln(k + 1)") {
  const auto cfg = toy_model(16, 8);
  const DualEncoder<float> m(cfg, make_embedding(cfg));
  for (std::size_t k : {10, 50}) {
    num::Graph<float> g(false);
    const double l = g.value(batch_loss_ce(g, m, toy_batch(16, k, k))).data[0];
    CHECK(std::abs(l / std::log(k + 1.0) - 1.0) < 0.02);
  }
}

TEST_CASE("a training step encodes exactly b + k responses") {
  const auto cfg = toy_model(8, 9);
  const DualEncoder<float> m(cfg, make_embedding(cfg));
  for (auto [b, k] : {std::pair<std::size_t, std::size_t>{8, 16}, {5, 3}}) {
    const Batch batch = toy_batch(b, k, 11);
    const auto before = m.response_encodings;
    num::Graph<float> g;
    batch_loss_ce(g, m, batch);
    CHECK(m.response_encodings - before == b + k);
  }

  // and through the training loop (no validation split, so no other encodes)
  DualEncoder<float> t(cfg, make_embedding(cfg));
  TrainingState st;
  TrainingConfig tc;
  tc.batch_size = 8;
  tc.negatives = 16;
  tc.epochs = 1;
  tc.max_batches_per_epoch = 4;
  tc.collisions = Collisions::mask;
  const auto r = train(t, st, toy_examples(), {}, tc);
  CHECK(st.step == 4);
  CHECK(t.response_encodings == 4 * (8 + 16));
  CHECK_FALSE(r.history.at(0).val_auc);
}

TEST_CASE("collision mask") {
  const std::vector<std::string> pos{"a", "b", "a"};
  const std::vector<std::string> neg{"c", "a", "b"};
  const auto m = collision_mask(pos, neg);
  CHECK(m.data == std::vector<float>{1, 0, 1, 1, 1, 0, 1, 0, 1});
}

TEST_CASE("negative sampler") {
  std::vector<corpus::ResponseGroup> groups{{"a", "A", 1}, {"b", "B", 2}, {"c", "C", 7}};
  const NegativeSampler s(groups);
  CHECK(s.size() == 3);
  CHECK(s.find("c") == 2u);
  CHECK_FALSE(s.find("zz"));
  Rng rng(12);

  SUBCASE("single draws follow frequency") {
    std::map<std::size_t, int> hits;
    const int n = 20000;
    for (int i = 0; i < n; ++i) ++hits[s.sample(1, {}, rng).at(0)];
    CHECK(hits[0] / double(n) == doctest::Approx(0.1).epsilon(0.1));
    CHECK(hits[1] / double(n) == doctest::Approx(0.2).epsilon(0.07));
    CHECK(hits[2] / double(n) == doctest::Approx(0.7).epsilon(0.03));
  }
  SUBCASE("draws are distinct and honour exclusions") {
    for (int i = 0; i < 200; ++i) {
      const auto d = s.sample(2, std::vector<std::string>{"c"}, rng);
      CHECK(std::set<std::size_t>(d.begin(), d.end()) == std::set<std::size_t>{0, 1});
    }
    CHECK_THROWS_AS(s.sample(3, std::vector<std::string>{"c"}, rng), Error);
  }
  SUBCASE("sampling without replacement, second draw distribution") {
    // P(second = a | first = c) = 1/3; overall P(a among 2 draws) = .1 + .2 * 1/8 + .7 * 1/3
    int with_a = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const auto d = s.sample(2, {}, rng);
      with_a += (d[0] == 0 || d[1] == 0);
    }
    CHECK(with_a / double(n) == doctest::Approx(0.1 + 0.2 / 8 + 0.7 / 3).epsilon(0.05));
  }
}

TEST_CASE("score and shape errors") {
  const std::vector<float> a{1, 2, 3}, b{4, 5, 6}, c{1, 2};
  CHECK(score<float>(a, b) == 32.0f);
  CHECK_THROWS_AS(score<float>(a, c), ShapeError);
}

TEST_CASE("config json round trip and unknown keys") {
  TrainingConfig t;
  t.batch_size = 17;
  t.loss = LossKind::hinge;
  t.collisions = Collisions::mask;
  CHECK(to_json(training_config_from_json(to_json(t))) == to_json(t));
  const auto m = toy_model(12);
  CHECK(to_json(model_config_from_json(to_json(m))) == to_json(m));

  auto j = to_json(t);
  j["bogus"] = 1;
  try {
    training_config_from_json(j);
    FAIL("expected an Error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
  }
  auto bad = to_json(m);
  bad["encoder"]["input_dim"] = 5;
  CHECK_THROWS_AS(model_config_from_json(bad), Error);
  CHECK_THROWS_AS(parse_loss("softmax"), Error);
  t.negatives = 0;
  CHECK_THROWS_AS(t.validate(), Error);
}

TEST_CASE("paper-size dual model parameter count") {
  ModelConfig c;  // 4-layer bidirectional SRU, 300-d, 16 heads
  CHECK(enc::parameter_count(c.encoder) * 2 == 8810048);
}

TEST_CASE("checkpoint round trip, corruption and description") {
  const auto cfg = toy_model(8, 13);
  DualEncoder<float> m(cfg, make_embedding(cfg));
  TrainingState st;
  TrainingConfig tc;
  tc.batch_size = 8;
  tc.negatives = 8;
  tc.epochs = 1;
  tc.max_batches_per_epoch = 2;
  train(m, st, toy_examples(), {}, tc);
  const auto path = tmp("suggest_test.ckpt");
  save_checkpoint(path, m, st);

  const auto loaded = load_checkpoint(path);
  CHECK(loaded.state.step == st.step);
  CHECK(loaded.state.optimizer.step == st.optimizer.step);
  CHECK(loaded.state.optimizer.m == st.optimizer.m);
  CHECK(loaded.state.training == st.training);
  const std::vector<corpus::Tokens> seqs{{"hello", "there"}, {"<customer>", "help"}};
  CHECK(encode_contexts(loaded.model, seqs).data == encode_contexts(m, seqs).data);
  CHECK(encode_responses(loaded.model, seqs).data == encode_responses(m, seqs).data);

  // saving the reloaded model reproduces the file byte for byte
  const auto path2 = tmp("suggest_test2.ckpt");
  save_checkpoint(path2, loaded.model, loaded.state);
  CHECK(read_file(path) == read_file(path2));

  const auto d = describe_checkpoint(path);
  CHECK(d["parameter_count"].get<std::size_t>() == m.parameter_count());
  CHECK(!d["tensors"].empty());

  std::string bytes = read_file(path);
  bytes[bytes.size() / 2] ^= 0x5a;
  write_file(path2, bytes);
  CHECK_THROWS_AS(load_checkpoint(path2), FormatError);
  write_file(path2, read_file(path).substr(0, 100));
  CHECK_THROWS_AS(load_checkpoint(path2), FormatError);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("training is deterministic and reduces the loss") {
  const auto run = [](std::uint64_t seed) {
    const auto cfg = toy_model(8, 21);
    DualEncoder<float> m(cfg, make_embedding(cfg));
    TrainingState st;
    TrainingConfig tc;
    tc.batch_size = 16;
    tc.negatives = 16;
    tc.epochs = 3;
    tc.collisions = Collisions::mask;
    tc.schedule.warmup_steps = 20;
    tc.schedule.model_dim = 16;
    tc.seed = seed;
    tc.validation_examples = 50;
    const auto& ex = toy_examples();
    const std::vector<corpus::TrainingExample> train_ex(ex.begin(), ex.begin() + 400);
    const std::vector<corpus::TrainingExample> val_ex(ex.begin() + 400, ex.end());
    const auto r = train(m, st, train_ex, val_ex, tc);
    const auto path = tmp("suggest_det_" + std::to_string(seed) + ".ckpt");
    save_checkpoint(path, m, st);
    auto bytes = read_file(path);
    std::filesystem::remove(path);
    return std::pair{r, bytes};
  };
  const auto [r1, b1] = run(1);
  const auto [r2, b2] = run(1);
  const auto [r3, b3] = run(2);
  CHECK(b1 == b2);
  CHECK(b1 != b3);
  REQUIRE(r1.history.size() == 3);
  CHECK(r1.history.back().train_loss < r1.history.front().train_loss);
  CHECK(r1.history.front().val_auc.has_value());
}

TEST_CASE("a diverging run stops with a located error") {
  const auto cfg = toy_model(8, 22);
  DualEncoder<float> m(cfg, make_embedding(cfg));
  TrainingState st;
  TrainingConfig tc;
  tc.batch_size = 8;
  tc.negatives = 8;
  tc.epochs = 2;
  tc.schedule.factor = 1e30;
  try {
    train(m, st, toy_examples(), {}, tc);
    FAIL("expected an Error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    INFO(msg);
    CHECK(msg.find("non-finite") != std::string::npos);
    CHECK(msg.find("epoch") != std::string::npos);
  }
}
