// suggest: command line entry point wiring corpus, training, whitelists,
// evaluation, serving and benchmarks into one reproducible run directory.

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "suggest/pipeline.hpp"

using namespace suggest;
using nlohmann::json;

namespace {

// Options every run-directory subcommand accepts. Precedence, lowest first:
// config file, --set, dedicated flags.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> flags;  // overrides contributed by dedicated flags

  run::RunConfig resolve() const {
    std::vector<std::string> all = sets;
    all.insert(all.end(), flags.begin(), flags.end());
    return run::load_run_config(config, all);
  }
};

void add_common(CLI::App* sub, Common& c, const run::RunConfig& d) {
  sub->add_option("-c,--config", c.config, "Run config JSON (missing keys take defaults)");
  sub->add_option("--set", c.sets, "Config override key.path=value (repeatable)");
  sub->add_option_function<std::string>(
         "--run-dir", [&c](const std::string& v) { c.flags.push_back("run_dir=" + json(v).dump()); },
         "Run directory")
      ->default_str(d.run_dir);
  sub->add_option_function<std::uint64_t>(
         "--seed", [&c](std::uint64_t v) { c.flags.push_back("seed=" + std::to_string(v)); },
         "Master seed; stage seeds derive from it")
      ->default_str(std::to_string(d.seed));
}

// A flag that becomes a config override when given.
template <typename T>
CLI::Option* override_flag(CLI::App* sub, Common& c, const std::string& name, const std::string& key, const T& def,
                           const std::string& help) {
  return sub
      ->add_option_function<T>(
          name, [&c, key](const T& v) { c.flags.push_back(key + "=" + json(v).dump()); }, help)
      ->default_str(json(def).is_string() ? json(def).get<std::string>() : json(def).dump());
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

serve::Server* g_server = nullptr;
extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Response suggestion: dual-encoder retrieval over a response whitelist"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  const run::RunConfig d;

  Common common;
  std::function<void()> action;

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic help-desk corpus into data/");
  add_common(synth, common, d);
  override_flag(synth, common, "--conversations", "corpus.synth.conversations", d.corpus.synth.conversations,
                "Conversations to generate");
  override_flag(synth, common, "--intents", "corpus.synth.intents", d.corpus.synth.intents, "Distinct intents");
  override_flag(synth, common, "--noise", "corpus.synth.noise_rate", d.corpus.synth.noise_rate,
                "Per-utterance noise rate");
  synth->callback([&] { action = [&] { print(run::synth_data(common.resolve())); }; });

  // stats
  std::string stats_input;
  auto* st = app.add_subcommand("stats", "Corpus statistics into reports/stats.json");
  add_common(st, common, d);
  st->add_option("--input", stats_input, "Conversations JSONL (default: the run corpus)");
  st->callback([&] { action = [&] { print(run::stats(common.resolve(), stats_input)); }; });

  // split
  auto* sp = app.add_subcommand("split", "Conversation-level train/validation/test split into data/");
  add_common(sp, common, d);
  override_flag(sp, common, "--corpus", "corpus.path", d.corpus.path, "Conversations JSONL (default: data/conversations.jsonl)");
  sp->callback([&] { action = [&] { print(run::split(common.resolve())); }; });

  // train
  auto* tr = app.add_subcommand("train", "Train the dual encoder; writes checkpoints/ and reports/train-metrics.jsonl");
  add_common(tr, common, d);
  override_flag(tr, common, "--epochs", "training.epochs", d.training.epochs, "Training epochs");
  override_flag(tr, common, "--batch-size", "training.batch_size", d.training.batch_size, "Contexts per batch (b)");
  override_flag(tr, common, "--negatives", "training.negatives", d.training.negatives, "Shared negatives per batch (k)");
  override_flag(tr, common, "--loss", "training.loss", std::string(dual::to_string(d.training.loss)),
                "cross_entropy or hinge");
  tr->callback([&] { action = [&] { print(run::train(common.resolve(), &std::cerr)); }; });

  // whitelist
  auto* wl_cmd = app.add_subcommand("whitelist", "Build or inspect response whitelists");
  wl_cmd->require_subcommand(1);
  std::size_t wl_size = d.whitelist.size;
  auto* freq = wl_cmd->add_subcommand("freq", "The N most frequent normalized training responses");
  add_common(freq, common, d);
  auto* freq_size = freq->add_option("-n,--size", wl_size, "Whitelist size N")->capture_default_str();
  freq->callback([&] {
    action = [&] {
      const auto cfg = common.resolve();
      print(run::build_whitelist(cfg, wl::Method::frequency, freq_size->count() ? wl_size : cfg.whitelist.size));
    };
  });
  auto* clus = wl_cmd->add_subcommand("cluster", "k-means over response encodings, most frequent member per cluster");
  add_common(clus, common, d);
  auto* clus_size = clus->add_option("-k,--size", wl_size, "Clusters k (whitelist size)")->capture_default_str();
  override_flag(clus, common, "--max-iters", "whitelist.max_iters", d.whitelist.max_iters, "Lloyd iteration cap");
  override_flag(clus, common, "--weighting", "whitelist.weighting", std::string(wl::to_string(d.whitelist.weighting)),
                "distinct (one point per response) or occurrences (weighted by frequency)");
  clus->callback([&] {
    action = [&] {
      const auto cfg = common.resolve();
      print(run::build_whitelist(cfg, wl::Method::clustering, clus_size->count() ? wl_size : cfg.whitelist.size));
    };
  });
  std::string wl_path, wl_examples;
  auto* wl_desc = wl_cmd->add_subcommand("describe", "Whitelist metadata, optionally with coverage on a split");
  wl_desc->add_option("path", wl_path, "Whitelist TSV")->required();
  wl_desc->add_option("--examples", wl_examples, "Conversations JSONL to measure coverage on");
  wl_desc->callback([&] {
    action = [&] {
      const auto w = wl::load_whitelist(wl_path);
      if (wl_examples.empty()) return print(wl::describe(w));
      const auto ex = corpus::extract_examples(corpus::read_jsonl(wl_examples));
      print(wl::describe(w, &ex, wl_examples));
    };
  });

  // eval
  std::vector<std::string> eval_wls;
  auto* ev = app.add_subcommand("eval", "AUC, recall and whitelist metrics on the test split into reports/eval.json");
  add_common(ev, common, d);
  ev->add_option("--whitelist", eval_wls, "Whitelist TSV to evaluate (repeatable; default: all in whitelists/)");
  override_flag(ev, common, "--max-examples", "eval.max_examples", d.eval.max_examples,
                "Cap on test examples (0 = all)");
  ev->callback([&] {
    action = [&] {
      const json r = run::evaluate(common.resolve(), eval_wls);
      std::cout << eval::report_table(r);
    };
  });

  // serve
  std::string sv_ckpt, sv_wl, sv_log;
  auto* sv = app.add_subcommand("serve", "HTTP suggestion service: POST /suggest, GET /whitelist, GET /healthz");
  add_common(sv, common, d);
  sv->add_option("--checkpoint", sv_ckpt, "Checkpoint (default: checkpoints/best.ckpt in the run)");
  sv->add_option("--whitelist", sv_wl, "Whitelist TSV (default: whitelists/<method>-<size>.tsv in the run)");
  override_flag(sv, common, "--host", "serve.host", d.serve.host, "Listen address");
  override_flag(sv, common, "--port", "serve.port", d.serve.port, "Listen port (0 = any free port)");
  override_flag(sv, common, "--top-k", "serve.top_k", d.serve.top_k, "Default suggestions per request");
  override_flag(sv, common, "--console", "serve.console_dir", d.serve.console_dir, "Static files served under /console");
  sv->add_option("--access-log", sv_log, "Access log file, one JSON line per request (default: stdout)");
  sv->callback([&] {
    action = [&] {
      const auto cfg = common.resolve();
      const run::RunDir dir(cfg.run_dir);
      const std::string ck = sv_ckpt.empty() ? dir.checkpoint("best").string() : sv_ckpt;
      const std::string wp =
          sv_wl.empty() ? dir.whitelist(run::whitelist_name(cfg.whitelist.method, cfg.whitelist.size)).string() : sv_wl;
      auto engine = run::load_engine(ck, wp);
      std::ofstream log_file;
      serve::ServerOptions o;
      o.host = cfg.serve.host;
      o.port = cfg.serve.port;
      o.default_top_k = cfg.serve.top_k;
      o.max_body_bytes = cfg.serve.max_body_bytes;
      o.console_dir = cfg.serve.console_dir;
      if (!sv_log.empty()) {
        log_file.open(sv_log, std::ios::app);
        if (!log_file) throw Error("cannot open access log " + sv_log);
        o.access_log = &log_file;
      } else {
        o.access_log = &std::cout;
      }
      serve::Server server(engine, o);
      const int port = server.bind();
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on http://" << o.host << ":" << port << " (" << engine->whitelist().size()
                << " responses)" << std::endl;
      server.listen();
      g_server = nullptr;
    };
  });

  // bench
  auto* bench = app.add_subcommand("bench", "Single-thread latency benchmarks");
  bench->require_subcommand(1);
  auto* be = bench->add_subcommand("encoder", "Per-context encode latency of a freshly initialised encoder");
  add_common(be, common, d);
  override_flag(be, common, "--cell", "model.encoder.cell", std::string(enc::to_string(d.model.encoder.cell)),
                "sru or lstm");
  override_flag(be, common, "--layers", "model.encoder.layers", d.model.encoder.layers, "Recurrent layers");
  override_flag(be, common, "--hidden", "model.encoder.hidden", d.model.encoder.hidden, "Hidden size per direction");
  override_flag(be, common, "--samples", "bench.samples", d.bench.samples, "Timed samples");
  override_flag(be, common, "--warmup", "bench.warmup", d.bench.warmup, "Untimed warmup samples");
  override_flag(be, common, "--context-length", "bench.context_length", d.bench.context_length, "Tokens per context");
  be->callback([&] {
    action = [&] {
      const auto cfg = common.resolve();
      const auto r = serve::bench_encoder(cfg.model.encoder, cfg.bench.context_length, cfg.bench.samples,
                                          cfg.bench.warmup, cfg.model.init_seed);
      const json j = serve::to_json(r);
      const run::RunDir dir(cfg.run_dir);
      const auto out =
          dir.report("bench-encoder-" + r.encoder + "-" + std::to_string(r.layers) + "l.json");
      std::filesystem::create_directories(out.parent_path());
      write_file(out.string(), j.dump(2) + "\n");
      print(j);
    };
  });
  auto* br = bench->add_subcommand("rank", "top_k latency over a cached encoding matrix");
  add_common(br, common, d);
  override_flag(br, common, "--rows", "bench.rank_rows", d.bench.rank_rows, "Index rows N");
  override_flag(br, common, "-k,--k", "bench.rank_k", d.bench.rank_k, "Suggestions per query");
  override_flag(br, common, "--samples", "bench.samples", d.bench.samples, "Timed samples");
  br->callback([&] {
    action = [&] {
      const auto cfg = common.resolve();
      const auto r = serve::bench_rank(cfg.bench.rank_rows, cfg.model.encoder.output_dim(), cfg.bench.samples,
                                       cfg.bench.rank_k, cfg.eval.seed);
      json j = serve::to_json(r);
      j["dim"] = cfg.model.encoder.output_dim();
      const run::RunDir dir(cfg.run_dir);
      const auto out = dir.report("bench-rank-" + std::to_string(r.index_rows) + ".json");
      std::filesystem::create_directories(out.parent_path());
      write_file(out.string(), j.dump(2) + "\n");
      print(j);
    };
  });

  // describe
  std::string desc_path;
  auto* desc = app.add_subcommand("describe", "Summarize a checkpoint, whitelist, index, corpus or report");
  desc->add_option("path", desc_path, "Artifact path")->required();
  desc->callback([&] { action = [&] { print(run::describe_artifact(desc_path)); }; });

  // config
  auto* cf = app.add_subcommand("config", "Print the fully resolved run config");
  add_common(cf, common, d);
  cf->callback([&] { action = [&] { print(run::to_json(common.resolve())); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (action) action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
