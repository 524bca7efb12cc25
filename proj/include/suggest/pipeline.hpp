#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "suggest/corpus.hpp"
#include "suggest/dual_model.hpp"
#include "suggest/eval.hpp"
#include "suggest/serve.hpp"
#include "suggest/whitelist.hpp"

// Run configuration, run-directory layout and the stages the command line
// tool strings together. Each stage reads its inputs from the run directory,
// writes its artifacts there and records itself in manifest.json.
namespace suggest::run {

struct CorpusConfig {
  /// Conversations to use instead of the generated ones (JSONL). Empty means
  /// data/conversations.jsonl inside the run directory.
  std::string path;
  corpus::SynthOptions synth;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
};

struct WhitelistConfig {
  wl::Method method = wl::Method::frequency;
  std::size_t size = 10000;
  std::size_t max_iters = 50;
  bool normalize = true;
  wl::Weighting weighting = wl::Weighting::distinct;
  std::uint64_t seed = 0;
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t top_k = 5;
  std::size_t max_body_bytes = 1 << 20;
  std::string console_dir;
};

struct BenchConfig {
  std::size_t context_length = 500;
  std::size_t samples = 1000;
  std::size_t warmup = 50;
  std::size_t rank_rows = 10000;
  std::size_t rank_k = 10;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string run_dir = "run";
  CorpusConfig corpus;
  dual::ModelConfig model;
  dual::TrainingConfig training;
  WhitelistConfig whitelist;
  eval::EvalConfig eval;
  ServeConfig serve;
  BenchConfig bench;
};

/// Every field, defaults included.
nlohmann::json to_json(const RunConfig& c);
/// Unknown keys throw Error naming the dotted path. Stage seeds that are not
/// given explicitly are derived from the master seed by label.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Applies "a.b.c=value" to a config document; the value is parsed as JSON
/// when it parses, otherwise taken as a string.
void apply_override(nlohmann::json& doc, std::string_view assignment);
/// Reads `path` (empty: start from {}), applies the overrides and resolves.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

/// Fixed layout under the run directory.
struct RunDir {
  std::filesystem::path root;

  explicit RunDir(std::filesystem::path r) : root(std::move(r)) {}
  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path data(std::string_view name) const { return root / "data" / (std::string(name) + ".jsonl"); }
  std::filesystem::path checkpoint(std::string_view name) const {
    return root / "checkpoints" / (std::string(name) + ".ckpt");
  }
  std::filesystem::path report(std::string_view name) const { return root / "reports" / std::string(name); }
  std::filesystem::path whitelist(std::string_view name) const {
    return root / "whitelists" / (std::string(name) + ".tsv");
  }
  std::filesystem::path index(std::string_view name) const {
    return root / "whitelists" / (std::string(name) + ".index");
  }
};

/// Errors for a missing upstream artifact name the stage that makes it.
std::filesystem::path require(const std::filesystem::path& p, std::string_view producer);

/// Records `stage` in the run manifest: resolved config, inputs and outputs
/// with their content hashes, and the stage seed.
void record_stage(const RunConfig& cfg, std::string_view stage, const std::vector<std::filesystem::path>& inputs,
                  const std::vector<std::filesystem::path>& outputs, std::uint64_t seed,
                  const nlohmann::json& extra = nlohmann::json::object());

/// Conversations for the run: `corpus.path` when set, else the generated set.
std::filesystem::path corpus_path(const RunConfig& cfg);

std::string whitelist_name(wl::Method m, std::size_t size);

// Stages. Each returns a short JSON summary for the terminal.
nlohmann::json synth_data(const RunConfig& cfg);
nlohmann::json stats(const RunConfig& cfg, const std::string& input = {});
nlohmann::json split(const RunConfig& cfg);
nlohmann::json train(const RunConfig& cfg, std::ostream* progress = nullptr);
nlohmann::json build_whitelist(const RunConfig& cfg, wl::Method method, std::size_t size);
/// Empty `whitelists` evaluates every whitelist in the run directory.
nlohmann::json evaluate(const RunConfig& cfg, const std::vector<std::string>& whitelists = {});

/// Loads checkpoint + whitelist, reusing a matching saved index or building
/// (and saving) a fresh one next to the whitelist.
std::shared_ptr<serve::Engine> load_engine(const std::string& checkpoint, const std::string& whitelist);

/// Summary of any artifact: checkpoint, whitelist, index, manifest or report.
nlohmann::json describe_artifact(const std::string& path);

}  // namespace suggest::run
