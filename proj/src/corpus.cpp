#include "suggest/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace suggest::corpus {

using nlohmann::json;

std::string_view role_name(Role r) { return r == Role::customer ? "customer" : "agent"; }

Role parse_role(std::string_view s) {
  if (s == "customer") return Role::customer;
  if (s == "agent") return Role::agent;
  throw FormatError("unknown role: \"" + std::string(s) + "\" (expected customer or agent)");
}

std::string_view role_token(Role r) { return r == Role::customer ? kCustomerToken : kAgentToken; }

namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
char lower(unsigned char c) { return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c); }

bool is_terminal_punct(char c) { return c == '.' || c == ',' || c == '!' || c == '?'; }

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(lower(c));
    }
  }
  flush();
  return out;
}

std::string normalize_response(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(lower(c));
  }
  // Strip terminal punctuation; a space exposed by stripping goes too.
  while (!out.empty() && (is_terminal_punct(out.back()) || out.back() == ' ')) out.pop_back();
  return out;
}

std::vector<ResponseGroup> group_responses(const std::vector<TrainingExample>& examples) {
  std::map<std::string, std::map<std::string, std::size_t>> variants;
  for (const auto& ex : examples) ++variants[normalize_response(ex.response_text)][ex.response_text];
  std::vector<ResponseGroup> out;
  out.reserve(variants.size());
  for (const auto& [key, counts] : variants) {
    ResponseGroup g{key, {}, 0};
    std::size_t best = 0;
    for (const auto& [text, n] : counts) {  // map order makes the first maximum lexicographic
      g.frequency += n;
      if (n > best) best = n, g.text = text;
    }
    out.push_back(std::move(g));
  }
  return out;
}

Tokens build_context(const Conversation& conv, std::size_t upto, std::size_t max_tokens) {
  if (upto > conv.turns.size()) throw Error("build_context: upto exceeds number of turns");
  Tokens out;
  for (std::size_t i = 0; i < upto; ++i) {
    out.emplace_back(role_token(conv.turns[i].role));
    Tokens t = tokenize(conv.turns[i].text);
    out.insert(out.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
  }
  if (out.size() > max_tokens) out.erase(out.begin(), out.end() - static_cast<std::ptrdiff_t>(max_tokens));
  return out;
}

std::vector<TrainingExample> extract_examples(const Conversation& conv) {
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < conv.turns.size(); ++i) {
    if (conv.turns[i].role != Role::agent) continue;
    TrainingExample ex;
    ex.context_tokens = build_context(conv, i);
    ex.response_tokens = tokenize(conv.turns[i].text);
    if (ex.response_tokens.size() > kMaxResponseTokens) ex.response_tokens.resize(kMaxResponseTokens);
    ex.response_text = conv.turns[i].text;
    ex.conversation_id = conv.id;
    ex.turn_index = i;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TrainingExample> extract_examples(const std::vector<Conversation>& convs) {
  std::vector<TrainingExample> out;
  for (const auto& c : convs) {
    auto ex = extract_examples(c);
    out.insert(out.end(), std::make_move_iterator(ex.begin()), std::make_move_iterator(ex.end()));
  }
  return out;
}

CorpusSplit split_corpus(const std::vector<Conversation>& convs, std::array<double, 3> fractions,
                         std::uint64_t seed) {
  if (convs.size() < 3) throw Error("split_corpus: need at least 3 conversations, got " + std::to_string(convs.size()));
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9 || fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0)
    throw Error("split_corpus: fractions must be non-negative and sum to 1");

  std::vector<std::size_t> order(convs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);

  const auto n = static_cast<double>(convs.size());
  auto count = [&](double f) {
    auto c = static_cast<std::size_t>(std::llround(n * f));
    return f > 0.0 ? std::max<std::size_t>(1, c) : c;
  };
  const std::size_t n_val = count(fractions[1]);
  const std::size_t n_test = count(fractions[2]);
  const std::size_t n_train = convs.size() - n_val - n_test;

  CorpusSplit split;
  split.seed = seed;
  split.fractions = fractions;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& c = convs[order[i]];
    if (i < n_train) split.train.push_back(c);
    else if (i < n_train + n_val) split.validation.push_back(c);
    else split.test.push_back(c);
  }
  return split;
}

CorpusStats corpus_stats(const std::vector<Conversation>& convs) {
  if (convs.empty()) throw Error("corpus_stats: empty corpus");
  CorpusStats s;
  s.conversations = convs.size();
  std::size_t cust_tokens = 0, agent_tokens = 0;
  for (const auto& c : convs) {
    for (const auto& t : c.turns) {
      const std::size_t n = tokenize(t.text).size();
      if (t.role == Role::customer) {
        ++s.customer_utterances;
        cust_tokens += n;
      } else {
        ++s.agent_utterances;
        agent_tokens += n;
      }
    }
  }
  s.utterances = s.customer_utterances + s.agent_utterances;
  auto mean = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  s.mean_conversation_length = mean(s.utterances, s.conversations);
  s.mean_utterance_length = mean(cust_tokens + agent_tokens, s.utterances);
  s.mean_customer_utterance_length = mean(cust_tokens, s.customer_utterances);
  s.mean_agent_utterance_length = mean(agent_tokens, s.agent_utterances);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct Topic {
  const char* noun;
  const char* problem;  // completes "my <noun> ..."
  const char* fix;      // completes "I have ... your <noun>"
};

constexpr Topic kTopics[] = {
    {"bill", "is higher than usual", "adjusted the charges on"},
    {"internet connection", "keeps dropping", "reset the line for"},
    {"password", "is not working", "sent a reset link for"},
    {"phone screen", "is cracked", "opened a repair request for"},
    {"order", "has not arrived", "escalated the shipment of"},
    {"refund", "is still pending", "expedited"},
    {"subscription", "renewed without asking", "cancelled the renewal of"},
    {"delivery", "went to the wrong address", "rerouted"},
    {"credit card", "was declined", "updated the authorization on"},
    {"account login", "is locked", "unlocked"},
    {"router", "shows a red light", "pushed a firmware update to"},
    {"tv service", "has no signal", "refreshed the signal for"},
    {"voicemail", "is full", "cleared"},
    {"data plan", "ran out early", "added bonus data to"},
    {"email", "stopped syncing", "repaired the mailbox settings for"},
    {"mobile app", "crashes on startup", "cleared the cached session for"},
    {"warranty", "claim was rejected", "reopened the claim for"},
    {"billing address", "is out of date", "corrected"},
    {"payment method", "cannot be saved", "verified"},
    {"contract", "shows the wrong end date", "fixed the end date on"},
    {"device upgrade", "is not available", "enabled eligibility for"},
    {"roaming", "is not working abroad", "activated international access for"},
    {"sim card", "is not detected", "shipped a replacement for"},
    {"modem", "overheats", "scheduled a swap of"},
    {"streaming service", "keeps buffering", "boosted the priority of"},
    {"gift card", "balance is missing", "restored the balance of"},
    {"loyalty points", "disappeared", "credited back"},
    {"installation appointment", "was missed", "rebooked"},
    {"invoice", "has a duplicate charge", "removed the duplicate from"},
    {"cancellation request", "was ignored", "processed"},
};
constexpr std::size_t kTopicCount = sizeof(kTopics) / sizeof(kTopics[0]);

struct GreetingPair {
  const char* customer;
  const char* agent;
};

constexpr GreetingPair kGreetings[] = {
    {"hi", "Hello! How can I help you today?"},
    {"good morning", "Good morning! What can I do for you?"},
    {"hey there", "Hi there, thanks for reaching out. How may I assist you?"},
};

constexpr GreetingPair kClosings[] = {
    {"thanks", "You're welcome! Have a great day."},
    {"ok that is all, bye", "Thank you for contacting us. Goodbye!"},
    {"thank you so much for your help", "It was my pleasure. Is there anything else I can help with?"},
};

constexpr const char* kProblemTemplates[] = {
    "my {noun} {problem}",
    "i have a problem, my {noun} {problem}",
    "can you help me? my {noun} {problem}",
    "hello, i need help because my {noun} {problem}",
};

constexpr const char* kAckTemplates[] = {
    "I'm sorry to hear that your {noun} {problem}. Let me look into it.",
    "I understand, a {noun} that {problem} is frustrating. Could you share your account number?",
    "Thanks for explaining. I can definitely help with your {noun}, may I have the account number?",
};

constexpr const char* kDetailTemplates[] = {
    "my account number is {num}",
    "sure, it is {num}",
    "the account is {num} and it started yesterday",
};

constexpr const char* kResolutionTemplates[] = {
    "I have {fix} your {noun}. Your reference number is {ref}.",
    "All done, I {fix} your {noun}. Please keep ticket {ref} for your records.",
};

std::string topic_noun(std::size_t intent) {
  std::string noun = kTopics[intent % kTopicCount].noun;
  if (intent >= kTopicCount) noun += " line " + std::to_string(intent / kTopicCount + 1);
  return noun;
}

std::string fill(std::string tmpl, const std::map<std::string, std::string>& slots) {
  for (const auto& [k, v] : slots) {
    const std::string key = "{" + k + "}";
    for (std::size_t pos = tmpl.find(key); pos != std::string::npos; pos = tmpl.find(key, pos + v.size()))
      tmpl.replace(pos, key.size(), v);
  }
  return tmpl;
}

std::string digits(Rng& rng, int n) {
  std::string s;
  s.push_back(static_cast<char>('1' + rng.below(9)));
  for (int i = 1; i < n; ++i) s.push_back(static_cast<char>('0' + rng.below(10)));
  return s;
}

// Token-level typo noise for customer text: with probability `rate` a word
// of 3+ letters gets an adjacent swap, a dropped letter or a doubled letter.
std::string add_noise(const std::string& text, double rate, Rng& rng) {
  if (rate <= 0.0) return text;
  std::istringstream in(text);
  std::string word, out;
  while (in >> word) {
    if (word.size() >= 3 && rng.uniform() < rate) {
      const std::size_t pos = 1 + rng.below(word.size() - 2);
      switch (rng.below(3)) {
        case 0: std::swap(word[pos], word[pos + 1]); break;
        case 1: word.erase(pos, 1); break;
        default: word.insert(pos, 1, word[pos]); break;
      }
    }
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

// Surface variation that leaves the normalization key unchanged.
std::string vary_surface(const std::string& text, Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.15) {
    std::string s = text;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  }
  if (u < 0.25) {
    std::string s = text;
    while (!s.empty() && is_terminal_punct(s.back())) s.pop_back();
    return s;
  }
  if (u < 0.30) return text + "!";
  return text;
}

}  // namespace

std::size_t SynthCorpus::pool_of(std::string_view key) const {
  auto it = std::lower_bound(response_pools.begin(), response_pools.end(), key,
                             [](const auto& p, std::string_view k) { return p.first < k; });
  if (it == response_pools.end() || it->first != key)
    throw Error("response was not produced by the generator: " + std::string(key));
  return it->second;
}

SynthCorpus synth_corpus_with_pools(const SynthOptions& opts) {
  if (opts.intents < 2) throw Error("synth_corpus: need at least 2 intents");
  Rng rng(opts.seed);
  SynthCorpus out;
  std::map<std::string, std::size_t> pools;
  const std::size_t generic = opts.intents;

  auto customer = [&](Conversation& c, const std::string& text) {
    c.turns.push_back({Role::customer, add_noise(text, opts.noise_rate, rng)});
  };
  auto agent = [&](Conversation& c, const std::string& text, std::size_t pool) {
    const std::string surface = vary_surface(text, rng);
    pools.emplace(normalize_response(surface), pool);
    c.turns.push_back({Role::agent, surface});
  };

  for (std::size_t n = 0; n < opts.conversations; ++n) {
    Conversation c;
    c.id = "conv-" + std::to_string(n);
    const std::size_t intent = rng.below(opts.intents);
    const Topic& topic = kTopics[intent % kTopicCount];
    const std::map<std::string, std::string> slots{
        {"noun", topic_noun(intent)}, {"problem", topic.problem}, {"fix", topic.fix}};

    const auto& greet = kGreetings[rng.below(std::size(kGreetings))];
    customer(c, greet.customer);
    if (opts.generic_responses) agent(c, greet.agent, generic);

    customer(c, fill(kProblemTemplates[rng.below(std::size(kProblemTemplates))], slots));
    if (rng.uniform() < 0.3) customer(c, "please help, this is urgent");
    agent(c, fill(kAckTemplates[intent % std::size(kAckTemplates)], slots), intent);

    auto detail = slots;
    detail["num"] = digits(rng, 6);
    customer(c, fill(kDetailTemplates[rng.below(std::size(kDetailTemplates))], detail));
    auto resolution = slots;
    resolution["ref"] = digits(rng, 5);
    agent(c, fill(kResolutionTemplates[(intent / std::size(kAckTemplates)) % std::size(kResolutionTemplates)], resolution),
          intent);

    const auto& close = kClosings[rng.below(std::size(kClosings))];
    customer(c, close.customer);
    if (opts.generic_responses) agent(c, close.agent, generic);
    out.conversations.push_back(std::move(c));
  }
  out.response_pools.assign(pools.begin(), pools.end());
  return out;
}

std::vector<Conversation> synth_corpus(const SynthOptions& opts) {
  return synth_corpus_with_pools(opts).conversations;
}

// ---------------------------------------------------------------------------
// Validation and serialization

void validate(const std::vector<Conversation>& convs) {
  std::unordered_set<std::string> ids;
  for (const auto& c : convs) {
    if (c.id.empty()) throw FormatError("conversation with empty id");
    if (c.turns.empty()) throw FormatError("conversation " + c.id + " has no turns");
    for (std::size_t i = 0; i < c.turns.size(); ++i)
      if (trim(c.turns[i].text).empty())
        throw FormatError("conversation " + c.id + " turn " + std::to_string(i) + " has blank text");
    if (!ids.insert(c.id).second) throw FormatError("duplicate conversation id: " + c.id);
  }
}

std::string to_json_line(const Conversation& conv) {
  json turns = json::array();
  for (const auto& t : conv.turns) turns.push_back({{"role", role_name(t.role)}, {"text", t.text}});
  return json{{"id", conv.id}, {"turns", std::move(turns)}}.dump();
}

Conversation from_json_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("id") || !j.contains("turns") || !j["id"].is_string() || !j["turns"].is_array())
    throw FormatError("conversation must be an object with string \"id\" and array \"turns\"");
  Conversation c;
  c.id = j["id"].get<std::string>();
  for (const auto& t : j["turns"]) {
    if (!t.is_object() || !t.contains("role") || !t.contains("text") || !t["role"].is_string() || !t["text"].is_string())
      throw FormatError("turn must be an object with string \"role\" and \"text\"");
    c.turns.push_back({parse_role(t["role"].get<std::string>()), t["text"].get<std::string>()});
  }
  return c;
}

std::vector<Conversation> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus file: " + path);
  std::vector<Conversation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  try {
    validate(out);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
  return out;
}

std::string to_jsonl(const std::vector<Conversation>& convs) {
  std::string out;
  for (const auto& c : convs) {
    out += to_json_line(c);
    out.push_back('\n');
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Conversation>& convs) {
  write_file(path, to_jsonl(convs));
}

}  // namespace suggest::corpus
