#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "suggest/util.hpp"

namespace suggest::corpus {

inline constexpr std::size_t kMaxContextTokens = 500;
inline constexpr std::size_t kMaxResponseTokens = 100;
inline constexpr std::string_view kCustomerToken = "<customer>";
inline constexpr std::string_view kAgentToken = "<agent>";

enum class Role { customer, agent };

std::string_view role_name(Role r);
/// Parses "customer" / "agent"; throws FormatError otherwise.
Role parse_role(std::string_view s);
std::string_view role_token(Role r);

struct Turn {
  Role role = Role::customer;
  std::string text;
};

struct Conversation {
  std::string id;
  std::vector<Turn> turns;
};

using Tokens = std::vector<std::string>;

struct TrainingExample {
  Tokens context_tokens;
  Tokens response_tokens;
  std::string response_text;
  std::string conversation_id;
  std::size_t turn_index = 0;
};

struct CorpusSplit {
  std::vector<Conversation> train;
  std::vector<Conversation> validation;
  std::vector<Conversation> test;
  std::uint64_t seed = 0;
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
};

struct CorpusStats {
  std::size_t conversations = 0;
  std::size_t utterances = 0;
  std::size_t customer_utterances = 0;
  std::size_t agent_utterances = 0;
  double mean_conversation_length = 0.0;
  double mean_utterance_length = 0.0;
  double mean_customer_utterance_length = 0.0;
  double mean_agent_utterance_length = 0.0;
};

/// Lowercases ASCII letters, splits on whitespace, and emits every ASCII
/// punctuation character as its own token. Non-ASCII bytes pass through.
Tokens tokenize(std::string_view text);

/// Canonical key for counting and deduplicating responses: lowercase,
/// whitespace runs collapsed, trimmed, trailing [.,!?] removed.
std::string normalize_response(std::string_view text);

/// Role-tagged concatenation of turns [0, upto), keeping at most the
/// `max_tokens` most recent tokens.
Tokens build_context(const Conversation& conv, std::size_t upto,
                     std::size_t max_tokens = kMaxContextTokens);

/// One example per agent turn.
std::vector<TrainingExample> extract_examples(const Conversation& conv);
std::vector<TrainingExample> extract_examples(const std::vector<Conversation>& convs);

/// Agent responses grouped by normalization key.
struct ResponseGroup {
  std::string key;
  std::string text;  // most frequent raw variant; ties go to the lexicographically smallest
  std::size_t frequency = 0;
};

/// One group per distinct key, sorted by key.
std::vector<ResponseGroup> group_responses(const std::vector<TrainingExample>& examples);

/// Throws Error on fewer than 3 conversations or fractions not summing to 1.
CorpusSplit split_corpus(const std::vector<Conversation>& convs,
                         std::array<double, 3> fractions, std::uint64_t seed);

/// Throws Error on an empty corpus.
CorpusStats corpus_stats(const std::vector<Conversation>& convs);

struct SynthOptions {
  std::size_t conversations = 2000;
  std::size_t intents = 20;
  double noise_rate = 0.1;
  std::uint64_t seed = 0;
  /// Agent greetings and closings from the shared generic pool; off leaves
  /// only the intent-specific pools.
  bool generic_responses = true;
};

/// Pool id per normalized response, for generated corpora. Intent pools are
/// numbered [0, intents); the shared generic pool (greetings and closings)
/// has id `intents`.
struct SynthCorpus {
  std::vector<Conversation> conversations;
  std::vector<std::pair<std::string, std::size_t>> response_pools;  // sorted by key

  /// Pool of a normalized response key; throws Error if the key was never generated.
  std::size_t pool_of(std::string_view key) const;
};

/// Template-driven help-desk conversations. Each conversation follows one
/// intent's scripted flow: greeting, problem statement, acknowledgement,
/// details, resolution (carrying a random reference number), closing.
SynthCorpus synth_corpus_with_pools(const SynthOptions& opts);
std::vector<Conversation> synth_corpus(const SynthOptions& opts);

/// Throws on any invariant violation (empty id, empty turns, blank text,
/// duplicate ids).
void validate(const std::vector<Conversation>& convs);

std::string to_json_line(const Conversation& conv);
Conversation from_json_line(std::string_view line);

/// Newline-delimited JSON. Errors carry the 1-based line number.
std::vector<Conversation> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<Conversation>& convs);
std::string to_jsonl(const std::vector<Conversation>& convs);

}  // namespace suggest::corpus
