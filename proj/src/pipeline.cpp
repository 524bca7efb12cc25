#include "suggest/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include "suggest/numerics/tensor_io.hpp"

namespace suggest::run {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kVersion = "0.1.0";

template <typename Fn>
void for_members(const json& j, std::string_view where, std::initializer_list<std::string_view> known, Fn fn) {
  if (!j.is_object()) throw Error(std::string(where) + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw Error(std::string(where) + ": unknown key \"" + k + "\"");
    try {
      fn(k, v);
    } catch (const json::exception& e) {
      throw Error(std::string(where) + "." + k + ": " + e.what());
    }
  }
}

// Prefixes errors raised by nested parsers with the enclosing key.
template <typename Fn>
auto nested(std::string_view prefix, Fn fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw Error(std::string(prefix) + ": " + e.what());
  } catch (const Error& e) {
    const std::string_view msg = e.what();
    if (msg.starts_with(prefix)) throw;
    throw Error(std::string(prefix) + "." + std::string(msg));
  }
}

std::string rel(const fs::path& p, const fs::path& root) {
  const auto r = fs::relative(p, root);
  return (r.empty() || *r.begin() == "..") ? p.string() : r.generic_string();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p.string()));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  write_file(p.string(), j.dump(2) + "\n");
}

std::vector<corpus::TrainingExample> examples_of(const fs::path& p) {
  return corpus::extract_examples(corpus::read_jsonl(p.string()));
}

}  // namespace

// --- Config -------------------------------------------------------------------

json to_json(const RunConfig& c) {
  const auto& s = c.corpus.synth;
  return {{"seed", c.seed},
          {"run_dir", c.run_dir},
          {"corpus",
           {{"path", c.corpus.path},
            {"synth",
             {{"conversations", s.conversations},
              {"intents", s.intents},
              {"noise_rate", s.noise_rate},
              {"seed", s.seed},
              {"generic_responses", s.generic_responses}}},
            {"split", c.corpus.split},
            {"split_seed", c.corpus.split_seed}}},
          {"model", dual::to_json(c.model)},
          {"training", dual::to_json(c.training)},
          {"whitelist",
           {{"method", wl::to_string(c.whitelist.method)},
            {"size", c.whitelist.size},
            {"max_iters", c.whitelist.max_iters},
            {"normalize", c.whitelist.normalize},
            {"weighting", wl::to_string(c.whitelist.weighting)},
            {"seed", c.whitelist.seed}}},
          {"eval", eval::to_json(c.eval)},
          {"serve",
           {{"host", c.serve.host},
            {"port", c.serve.port},
            {"top_k", c.serve.top_k},
            {"max_body_bytes", c.serve.max_body_bytes},
            {"console_dir", c.serve.console_dir}}},
          {"bench",
           {{"context_length", c.bench.context_length},
            {"samples", c.bench.samples},
            {"warmup", c.bench.warmup},
            {"rank_rows", c.bench.rank_rows},
            {"rank_k", c.bench.rank_k}}}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  if (!j.is_object()) throw Error("config: expected a JSON object");
  if (j.contains("seed")) c.seed = nested("seed", [&] { return j["seed"].get<std::uint64_t>(); });
  // Stage seeds default to labelled derivations of the master seed.
  c.corpus.synth.seed = derive_seed(c.seed, "synth");
  c.corpus.split_seed = derive_seed(c.seed, "split");
  c.model.init_seed = derive_seed(c.seed, "init");
  c.training.seed = derive_seed(c.seed, "train");
  c.whitelist.seed = derive_seed(c.seed, "whitelist");
  c.eval.seed = derive_seed(c.seed, "eval");

  for_members(j, "config",
              {"seed", "run_dir", "corpus", "model", "training", "whitelist", "eval", "serve", "bench"},
              [&](const std::string& k, const json& v) {
                if (k == "run_dir") {
                  c.run_dir = v.get<std::string>();
                } else if (k == "corpus") {
                  for_members(v, "corpus", {"path", "synth", "split", "split_seed"}, [&](const std::string& k2, const json& v2) {
                    if (k2 == "path") c.corpus.path = v2.get<std::string>();
                    else if (k2 == "split") c.corpus.split = v2.get<std::array<double, 3>>();
                    else if (k2 == "split_seed") c.corpus.split_seed = v2.get<std::uint64_t>();
                    else
                      for_members(v2, "corpus.synth", {"conversations", "intents", "noise_rate", "seed", "generic_responses"},
                                  [&](const std::string& k3, const json& v3) {
                                    auto& s = c.corpus.synth;
                                    if (k3 == "conversations") s.conversations = v3.get<std::size_t>();
                                    else if (k3 == "intents") s.intents = v3.get<std::size_t>();
                                    else if (k3 == "noise_rate") s.noise_rate = v3.get<double>();
                                    else if (k3 == "generic_responses") s.generic_responses = v3.get<bool>();
                                    else s.seed = v3.get<std::uint64_t>();
                                  });
                  });
                } else if (k == "model") {
                  const auto init = c.model.init_seed;
                  c.model = nested("model", [&] { return dual::model_config_from_json(v); });
                  if (!v.contains("init_seed")) c.model.init_seed = init;
                } else if (k == "training") {
                  const auto seed = c.training.seed;
                  c.training = nested("training", [&] { return dual::training_config_from_json(v); });
                  if (!v.contains("seed")) c.training.seed = seed;
                } else if (k == "whitelist") {
                  for_members(v, "whitelist", {"method", "size", "max_iters", "normalize", "weighting", "seed"},
                              [&](const std::string& k2, const json& v2) {
                                auto& w = c.whitelist;
                                if (k2 == "method") w.method = wl::parse_method(v2.get<std::string>());
                                else if (k2 == "size") w.size = v2.get<std::size_t>();
                                else if (k2 == "max_iters") w.max_iters = v2.get<std::size_t>();
                                else if (k2 == "normalize") w.normalize = v2.get<bool>();
                                else if (k2 == "weighting") w.weighting = wl::parse_weighting(v2.get<std::string>());
                                else w.seed = v2.get<std::uint64_t>();
                              });
                } else if (k == "eval") {
                  const auto seed = c.eval.seed;
                  c.eval = nested("eval", [&] { return eval::eval_config_from_json(v); });
                  if (!v.contains("seed")) c.eval.seed = seed;
                } else if (k == "serve") {
                  for_members(v, "serve", {"host", "port", "top_k", "max_body_bytes", "console_dir"},
                              [&](const std::string& k2, const json& v2) {
                                auto& s = c.serve;
                                if (k2 == "host") s.host = v2.get<std::string>();
                                else if (k2 == "port") s.port = v2.get<int>();
                                else if (k2 == "top_k") s.top_k = v2.get<std::size_t>();
                                else if (k2 == "max_body_bytes") s.max_body_bytes = v2.get<std::size_t>();
                                else s.console_dir = v2.get<std::string>();
                              });
                } else if (k == "bench") {
                  for_members(v, "bench", {"context_length", "samples", "warmup", "rank_rows", "rank_k"},
                              [&](const std::string& k2, const json& v2) {
                                auto& b = c.bench;
                                if (k2 == "context_length") b.context_length = v2.get<std::size_t>();
                                else if (k2 == "samples") b.samples = v2.get<std::size_t>();
                                else if (k2 == "warmup") b.warmup = v2.get<std::size_t>();
                                else if (k2 == "rank_rows") b.rank_rows = v2.get<std::size_t>();
                                else b.rank_k = v2.get<std::size_t>();
                              });
                }
              });

  double total = 0.0;
  for (double f : c.corpus.split) {
    if (f < 0.0) throw Error("corpus.split: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("corpus.split: fractions must sum to 1");
  if (c.corpus.synth.conversations == 0 || c.corpus.synth.intents == 0)
    throw Error("corpus.synth: conversations and intents must be positive");
  if (c.whitelist.size == 0) throw Error("whitelist.size must be positive");
  if (c.serve.top_k == 0) throw Error("serve.top_k must be positive");
  if (c.serve.port < 0 || c.serve.port > 65535) throw Error("serve.port must be in [0, 65535]");
  if (c.bench.samples == 0 || c.bench.context_length == 0 || c.bench.rank_rows == 0 || c.bench.rank_k == 0)
    throw Error("bench: samples, context_length, rank_rows and rank_k must be positive");
  return c;
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) throw Error("override \"" + std::string(assignment) + "\": expected key=value");
  const std::string path(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw Error("override \"" + path + "\": empty key segment");
    if (!node->is_object()) throw Error("override \"" + path + "\": \"" + key + "\" is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json doc = path.empty() ? json::object() : read_json(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return run_config_from_json(doc);
}

// --- Run directory --------------------------------------------------------------

fs::path require(const fs::path& p, std::string_view producer) {
  if (!fs::exists(p))
    throw Error("missing " + p.string() + " (produced by `suggest " + std::string(producer) + "`; run it first)");
  return p;
}

void record_stage(const RunConfig& cfg, std::string_view stage, const std::vector<fs::path>& inputs,
                  const std::vector<fs::path>& outputs, std::uint64_t seed, const json& extra) {
  const RunDir dir(cfg.run_dir);
  json m = fs::exists(dir.manifest()) ? read_json(dir.manifest()) : json::object();
  m["format"] = "suggest-run-manifest";
  m["version"] = kVersion;
  if (!m.contains("stages")) m["stages"] = json::object();
  auto files = [&](const std::vector<fs::path>& ps) {
    json a = json::array();
    for (const auto& p : ps) a.push_back({{"path", rel(p, dir.root)}, {"hash", hash_file(p.string())}});
    return a;
  };
  json entry{{"seed", seed}, {"inputs", files(inputs)}, {"outputs", files(outputs)}, {"config", to_json(cfg)}};
  for (const auto& [k, v] : extra.items()) entry[k] = v;
  m["stages"][std::string(stage)] = entry;
  write_json(dir.manifest(), m);
}

fs::path corpus_path(const RunConfig& cfg) {
  return cfg.corpus.path.empty() ? RunDir(cfg.run_dir).data("conversations") : fs::path(cfg.corpus.path);
}

std::string whitelist_name(wl::Method m, std::size_t size) {
  return std::string(wl::to_string(m)) + "-" + std::to_string(size);
}

// --- Stages ---------------------------------------------------------------------

json synth_data(const RunConfig& cfg) {
  const RunDir dir(cfg.run_dir);
  const auto sc = corpus::synth_corpus_with_pools(cfg.corpus.synth);
  const fs::path out = dir.data("conversations");
  fs::create_directories(out.parent_path());
  corpus::write_jsonl(out.string(), sc.conversations);
  const fs::path pools = dir.root / "data" / "pools.tsv";
  std::string tsv = "key\tpool\n";
  for (const auto& [k, p] : sc.response_pools) tsv += k + "\t" + std::to_string(p) + "\n";
  write_file(pools.string(), tsv);
  record_stage(cfg, "synth-data", {}, {out, pools}, cfg.corpus.synth.seed);
  return {{"conversations", sc.conversations.size()}, {"path", out.string()}, {"hash", hash_file(out.string())}};
}

json stats(const RunConfig& cfg, const std::string& input) {
  const RunDir dir(cfg.run_dir);
  const fs::path in = input.empty() ? require(corpus_path(cfg), "synth-data") : require(input, "synth-data");
  const auto convs = corpus::read_jsonl(in.string());
  const auto s = corpus::corpus_stats(convs);
  const auto ex = corpus::extract_examples(convs);
  json j{{"input", in.string()},
         {"input_hash", hash_file(in.string())},
         {"conversations", s.conversations},
         {"utterances", s.utterances},
         {"customer_utterances", s.customer_utterances},
         {"agent_utterances", s.agent_utterances},
         {"mean_conversation_length", s.mean_conversation_length},
         {"mean_utterance_length", s.mean_utterance_length},
         {"mean_customer_utterance_length", s.mean_customer_utterance_length},
         {"mean_agent_utterance_length", s.mean_agent_utterance_length},
         {"training_examples", ex.size()},
         {"distinct_responses", corpus::group_responses(ex).size()}};
  const fs::path out = dir.report("stats.json");
  write_json(out, j);
  record_stage(cfg, "stats", {in}, {out}, 0);
  return j;
}

json split(const RunConfig& cfg) {
  const RunDir dir(cfg.run_dir);
  const fs::path in = require(corpus_path(cfg), "synth-data");
  const auto convs = corpus::read_jsonl(in.string());
  corpus::validate(convs);
  const auto s = corpus::split_corpus(convs, cfg.corpus.split, cfg.corpus.split_seed);
  const std::array<std::pair<const char*, const std::vector<corpus::Conversation>*>, 3> parts{
      {{"train", &s.train}, {"validation", &s.validation}, {"test", &s.test}}};
  json j{{"input_hash", hash_file(in.string())}, {"seed", s.seed}, {"fractions", s.fractions}};
  std::vector<fs::path> outs;
  for (const auto& [name, convs_of] : parts) {
    const fs::path p = dir.data(name);
    fs::create_directories(p.parent_path());
    corpus::write_jsonl(p.string(), *convs_of);
    outs.push_back(p);
    j[name] = {{"conversations", convs_of->size()}, {"examples", corpus::extract_examples(*convs_of).size()}};
  }
  record_stage(cfg, "split", {in}, outs, cfg.corpus.split_seed);
  return j;
}

json train(const RunConfig& cfg, std::ostream* progress) {
  const RunDir dir(cfg.run_dir);
  const fs::path tr = require(dir.data("train"), "split");
  const fs::path va = require(dir.data("validation"), "split");
  const auto train_ex = examples_of(tr);
  const auto val_ex = examples_of(va);
  dual::DualEncoder<float> model(cfg.model, dual::make_embedding(cfg.model));
  dual::TrainingState state;
  const fs::path metrics = dir.report("train-metrics.jsonl");
  fs::create_directories(metrics.parent_path());
  std::ofstream log(metrics);
  if (!log) throw Error("cannot write " + metrics.string());
  dual::TrainOptions opts;
  opts.checkpoint_dir = (dir.root / "checkpoints").string();
  opts.metrics_log = &log;
  if (progress)
    opts.on_epoch = [progress](const dual::EpochMetrics& m) { *progress << dual::to_json(m).dump() << std::endl; };
  const auto result = dual::train(model, state, train_ex, val_ex, cfg.training, opts);
  log.close();

  std::vector<fs::path> outs{dir.checkpoint("best")};
  for (std::size_t e = 1; e <= cfg.training.epochs; ++e)
    if (fs::exists(dir.checkpoint("epoch-" + std::to_string(e)))) outs.push_back(dir.checkpoint("epoch-" + std::to_string(e)));
  json j{{"parameters", model.parameter_count()},
         {"train_examples", train_ex.size()},
         {"steps", state.step},
         {"best_epoch", result.best_epoch},
         {"best_val_auc", result.best_val_auc ? json(*result.best_val_auc) : json(nullptr)},
         {"checkpoint", dir.checkpoint("best").string()},
         {"checkpoint_hash", hash_file(dir.checkpoint("best").string())}};
  // metrics carry wall-clock fields, so they are listed but kept out of the hashed outputs
  record_stage(cfg, "train", {tr, va}, outs, cfg.training.seed,
               {{"metrics", rel(metrics, dir.root)}, {"best_epoch", result.best_epoch}});
  return j;
}

json build_whitelist(const RunConfig& cfg, wl::Method method, std::size_t size) {
  const RunDir dir(cfg.run_dir);
  const fs::path tr = require(dir.data("train"), "split");
  const auto ex = examples_of(tr);
  const std::string corpus_hash = hash_file(tr.string());
  const std::string name = whitelist_name(method, size);
  std::vector<fs::path> inputs{tr};
  wl::Whitelist w;
  json extra = json::object();
  std::optional<dual::LoadedCheckpoint> ckpt;
  if (method == wl::Method::frequency) {
    wl::BuildNotes notes;
    w = wl::build_frequency_whitelist(ex, size, corpus_hash, &notes);
    w.seed = cfg.whitelist.seed;
    extra["warnings"] = notes.warnings;
  } else {
    const fs::path cp = require(dir.checkpoint("best"), "train");
    inputs.push_back(cp);
    ckpt = dual::load_checkpoint(cp.string());
    wl::ClusteringOptions o;
    o.k = size;
    o.max_iters = cfg.whitelist.max_iters;
    o.seed = cfg.whitelist.seed;
    o.normalize = cfg.whitelist.normalize;
    o.weighting = cfg.whitelist.weighting;
    wl::KMeansResult km;
    w = wl::build_clustering_whitelist(ex, ckpt->model, o, corpus_hash, &km);
    extra["kmeans"] = {{"weighting", wl::to_string(o.weighting)},
                       {"iterations", km.iterations},
                       {"converged", km.converged},
                       {"inertia", km.inertia.empty() ? json(nullptr) : json(km.inertia.back())}};
  }
  const fs::path out = dir.whitelist(name);
  fs::create_directories(out.parent_path());
  wl::save_whitelist(out.string(), w);
  std::vector<fs::path> outs{out};

  // The serving index needs a trained model; without one it is built at serve time.
  if (fs::exists(dir.checkpoint("best"))) {
    if (!ckpt) ckpt = dual::load_checkpoint(dir.checkpoint("best").string());
    const auto idx = serve::build_index(w, ckpt->model, hash_file(dir.checkpoint("best").string()), hash_file(out.string()));
    serve::save_index(dir.index(name).string(), idx);
    outs.push_back(dir.index(name));
  }
  json d = wl::describe(w, &ex, "train");
  for (const auto& [k, v] : extra.items()) d[k] = v;
  const fs::path report = dir.report("whitelist-" + name + ".json");
  write_json(report, d);
  outs.push_back(report);
  record_stage(cfg, "whitelist-" + name, inputs, outs, method == wl::Method::clustering ? cfg.whitelist.seed : 0);
  d["path"] = out.string();
  return d;
}

json evaluate(const RunConfig& cfg, const std::vector<std::string>& whitelists) {
  const RunDir dir(cfg.run_dir);
  const fs::path cp = require(dir.checkpoint("best"), "train");
  const fs::path te = require(dir.data("test"), "split");
  const fs::path tr = require(dir.data("train"), "split");
  std::vector<fs::path> wl_paths;
  if (!whitelists.empty()) {
    for (const auto& p : whitelists) wl_paths.push_back(require(p, "whitelist"));
  } else if (fs::exists(dir.root / "whitelists")) {
    for (const auto& e : fs::directory_iterator(dir.root / "whitelists"))
      if (e.path().extension() == ".tsv") wl_paths.push_back(e.path());
    std::sort(wl_paths.begin(), wl_paths.end());
  }
  const auto loaded = dual::load_checkpoint(cp.string());
  const auto test_ex = examples_of(te);
  const auto pool = dual::NegativeSampler::from_examples(examples_of(tr));
  std::vector<wl::Whitelist> ws;
  ws.reserve(wl_paths.size());
  std::vector<eval::NamedWhitelist> named;
  for (const auto& p : wl_paths) ws.push_back(wl::load_whitelist(p.string()));
  for (std::size_t i = 0; i < ws.size(); ++i) named.push_back({wl_paths[i].stem().string(), &ws[i]});

  json report = eval::eval_report(loaded.model, test_ex, pool, named, cfg.eval);
  auto& meta = report["metadata"];
  meta["checkpoint_hash"] = hash_file(cp.string());
  meta["test_hash"] = hash_file(te.string());
  meta["pool_source"] = "train split responses";
  meta["train_hash"] = hash_file(tr.string());
  json wh = json::object();
  for (std::size_t i = 0; i < wl_paths.size(); ++i) wh[named[i].name] = hash_file(wl_paths[i].string());
  meta["whitelist_hashes"] = wh;
  meta["run_config"] = to_json(cfg);

  const fs::path out = dir.report("eval.json");
  write_json(out, report);
  const fs::path table = dir.report("eval.txt");
  write_file(table.string(), eval::report_table(report));
  std::vector<fs::path> inputs{cp, te, tr};
  inputs.insert(inputs.end(), wl_paths.begin(), wl_paths.end());
  record_stage(cfg, "eval", inputs, {out, table}, cfg.eval.seed);
  return report;
}

std::shared_ptr<serve::Engine> load_engine(const std::string& checkpoint, const std::string& whitelist) {
  require(checkpoint, "train");
  require(whitelist, "whitelist");
  auto loaded = dual::load_checkpoint(checkpoint);
  auto w = wl::load_whitelist(whitelist);
  const std::string ck = hash_file(checkpoint);
  const std::string wh = hash_file(whitelist);
  const fs::path ip = fs::path(whitelist).replace_extension(".index");
  std::optional<serve::ResponseIndex> idx;
  if (fs::exists(ip)) {
    try {
      auto i = serve::load_index(ip.string(), ck);
      if (i.whitelist_hash == wh && i.size() == w.size()) idx = std::move(i);
    } catch (const FormatError& e) {
      std::cerr << "rebuilding index: " << e.what() << '\n';
    }
  }
  if (!idx) {
    idx = serve::build_index(w, loaded.model, ck, wh);
    try {
      serve::save_index(ip.string(), *idx);
    } catch (const std::exception& e) {
      std::cerr << "warning: could not save index: " << e.what() << '\n';
    }
  }
  return std::make_shared<serve::Engine>(std::move(loaded.model), std::move(w), std::move(*idx), ck, wh);
}

json describe_artifact(const std::string& path) {
  require(path, "the matching stage");
  const fs::path p(path);
  const std::string ext = p.extension().string();
  if (ext == ".tsv") {
    json d = wl::describe(wl::load_whitelist(path));
    d["hash"] = hash_file(path);
    return d;
  }
  if (ext == ".json") return read_json(p);
  if (ext == ".jsonl") {
    const auto convs = corpus::read_jsonl(path);
    const auto s = corpus::corpus_stats(convs);
    return {{"conversations", s.conversations}, {"utterances", s.utterances}, {"hash", hash_file(path)}};
  }
  const num::TensorFile f = num::load_tensor_file(path);
  const json meta = f.metadata ? json::parse(*f.metadata, nullptr, false) : json();
  if (meta.is_object() && meta.value("format", "") == "suggest-checkpoint") {
    json d = dual::describe_checkpoint(path);
    d["hash"] = hash_file(path);
    return d;
  }
  json tensors = json::array();
  for (const auto& e : f.tensors) tensors.push_back({{"name", e.name}, {"shape", e.tensor.shape}});
  return {{"metadata", meta}, {"tensors", tensors}, {"hash", hash_file(path)}};
}

}  // namespace suggest::run
