#include "tsdpo/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

namespace tsdpo {

using nlohmann::json;

const char* axis_name(Axis a) { return a == Axis::Help ? "help" : "verb"; }

Axis parse_axis(const std::string& name) {
  if (name == "help") return Axis::Help;
  if (name == "verb") return Axis::Verb;
  throw NameError("unknown axis '" + name + "'");
}

void BenchSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("bench spec: " + what); };
  if (n_train <= 0 || n_eval <= 0) fail("n_train and n_eval must be positive");
  if (n_facts < 2) fail("n_facts must be at least 2");
  if (value_len < 1) fail("value_len must be positive");
  if (value_alphabet < 2 * value_len) fail("value_alphabet must hold two disjoint values");
  if (min_context < 0 || max_context < min_context) fail("bad context length range");
  if (max_filler < 1) fail("max_filler must be at least 1");
  const std::set<Token> specials{bos_token, query_token, answer_marker, stop_token, filler_token};
  if (specials.size() != 5) fail("special tokens must be distinct");
  for (Token t : specials)
    if (t < 0 || t >= vocab_size) fail("special token id " + std::to_string(t) + " outside vocabulary");
  const int needed = 5 + n_facts + value_alphabet + 1;
  if (vocab_size < needed)
    fail("vocab_size " + std::to_string(vocab_size) + " too small; need at least " +
         std::to_string(needed) + " ids for markers, keys, values and context");
}

void to_json(json& j, const BenchSpec& s) {
  j = json{{"n_train", s.n_train},         {"n_eval", s.n_eval},
           {"vocab_size", s.vocab_size},   {"n_facts", s.n_facts},
           {"filler_token", s.filler_token}, {"answer_marker", s.answer_marker},
           {"seed", s.seed},               {"bos_token", s.bos_token},
           {"query_token", s.query_token}, {"stop_token", s.stop_token},
           {"value_alphabet", s.value_alphabet}, {"value_len", s.value_len},
           {"min_context", s.min_context}, {"max_context", s.max_context},
           {"max_filler", s.max_filler}};
}

void from_json(const json& j, BenchSpec& s) {
  const BenchSpec d;
  s.n_train = j.value("n_train", d.n_train);
  s.n_eval = j.value("n_eval", d.n_eval);
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.n_facts = j.value("n_facts", d.n_facts);
  s.filler_token = j.value("filler_token", d.filler_token);
  s.answer_marker = j.value("answer_marker", d.answer_marker);
  s.seed = j.value("seed", d.seed);
  s.bos_token = j.value("bos_token", d.bos_token);
  s.query_token = j.value("query_token", d.query_token);
  s.stop_token = j.value("stop_token", d.stop_token);
  s.value_alphabet = j.value("value_alphabet", d.value_alphabet);
  s.value_len = j.value("value_len", d.value_len);
  s.min_context = j.value("min_context", d.min_context);
  s.max_context = j.value("max_context", d.max_context);
  s.max_filler = j.value("max_filler", d.max_filler);
}

VocabLayout VocabLayout::from_spec(const BenchSpec& spec) {
  spec.validate();
  VocabLayout v;
  v.vocab_size = spec.vocab_size;
  v.bos = spec.bos_token;
  v.query = spec.query_token;
  v.answer = spec.answer_marker;
  v.stop = spec.stop_token;
  v.filler = spec.filler_token;
  const std::set<Token> specials{v.bos, v.query, v.answer, v.stop, v.filler};
  for (Token t = 0; t < spec.vocab_size; ++t) {
    if (specials.count(t)) continue;
    if (static_cast<int>(v.keys.size()) < spec.n_facts) v.keys.push_back(t);
    else if (static_cast<int>(v.values.size()) < spec.value_alphabet) v.values.push_back(t);
    else v.noise.push_back(t);
  }
  return v;
}

namespace {

using Rng = std::mt19937_64;

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// `len` distinct tokens from `pool`, excluding `avoid`, in draw order.
Tokens draw_distinct(Rng& rng, const std::vector<Token>& pool, int len, const Tokens& avoid = {}) {
  std::vector<Token> candidates;
  for (Token t : pool)
    if (std::find(avoid.begin(), avoid.end(), t) == avoid.end()) candidates.push_back(t);
  Tokens out;
  for (int i = 0; i < len; ++i) {
    const int at = uniform_int(rng, i, static_cast<int>(candidates.size()) - 1);
    std::swap(candidates[i], candidates[at]);
    out.push_back(candidates[i]);
  }
  return out;
}

Tokens random_prompt(Rng& rng, const BenchSpec& spec, const VocabLayout& v, Token key) {
  Tokens p{v.bos};
  const int m = uniform_int(rng, spec.min_context, spec.max_context);
  for (int i = 0; i < m; ++i) p.push_back(v.noise[uniform_int(rng, 0, static_cast<int>(v.noise.size()) - 1)]);
  p.insert(p.end(), {v.query, key, v.answer});
  return p;
}

Tokens response(const Tokens& value, int fillers, const VocabLayout& v) {
  Tokens r = value;
  r.insert(r.end(), static_cast<std::size_t>(fillers), v.filler);
  r.push_back(v.stop);
  return r;
}

class PromptSource {
 public:
  PromptSource(const BenchSpec& spec, const VocabLayout& v) : spec_(spec), v_(v) {
    double per_key = 0;
    for (int m = spec.min_context; m <= spec.max_context; ++m)
      per_key += std::pow(static_cast<double>(v.noise.size()), m);
    const double needed = 2.0 * 2.0 * (spec.n_train + spec.n_eval);
    if (per_key * spec.n_facts < needed)
      throw ConfigError("bench spec: too few distinct prompts for the requested split sizes");
  }

  Tokens next(Rng& rng, Token* key) {
    for (;;) {
      *key = v_.keys[uniform_int(rng, 0, static_cast<int>(v_.keys.size()) - 1)];
      Tokens p = random_prompt(rng, spec_, v_, *key);
      if (used_.insert(p).second) return p;
    }
  }

 private:
  const BenchSpec& spec_;
  const VocabLayout& v_;
  std::set<Tokens> used_;
};

std::vector<PreferencePair> help_split(Rng& rng, int n, PromptSource& prompts, const BenchSpec& spec,
                                       const VocabLayout& v, const FactTable& facts) {
  std::vector<PreferencePair> out;
  for (int i = 0; i < n; ++i) {
    Token key;
    PreferencePair p;
    p.axis = Axis::Help;
    p.prompt = prompts.next(rng, &key);
    const Tokens& right = facts.at(key);
    const Tokens wrong = draw_distinct(rng, v.values, spec.value_len, right);
    const int k = uniform_int(rng, 0, spec.max_filler);
    p.chosen = response(right, k, v);
    p.rejected = response(wrong, k, v);
    p.chosen_score = 1.0;
    p.rejected_score = 0.0;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PreferencePair> verb_split(Rng& rng, int n, PromptSource& prompts, const BenchSpec& spec,
                                       const VocabLayout& v, const FactTable& facts) {
  std::vector<PreferencePair> out;
  for (int i = 0; i < n; ++i) {
    Token key;
    PreferencePair p;
    p.axis = Axis::Verb;
    p.prompt = prompts.next(rng, &key);
    const int shorter = uniform_int(rng, 0, spec.max_filler - 1);
    const int longer = uniform_int(rng, shorter + 1, spec.max_filler);
    p.chosen = response(facts.at(key), longer, v);
    p.rejected = response(facts.at(key), shorter, v);
    out.push_back(std::move(p));
  }
  // response length (stop excluded), min-max normalized over the split
  auto len = [](const Tokens& r) { return static_cast<double>(r.size() - 1); };
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& p : out)
    for (const Tokens* r : {&p.chosen, &p.rejected}) {
      lo = std::min(lo, len(*r));
      hi = std::max(hi, len(*r));
    }
  for (auto& p : out) {
    p.chosen_score = (len(p.chosen) - lo) / (hi - lo);
    p.rejected_score = (len(p.rejected) - lo) / (hi - lo);
  }
  return out;
}

}  // namespace

FactTable gen_facts(const BenchSpec& spec) {
  const VocabLayout v = VocabLayout::from_spec(spec);
  Rng rng(spec.seed);
  FactTable facts;
  std::set<Tokens> seen;
  for (Token key : v.keys) {
    Tokens value;
    do value = draw_distinct(rng, v.values, spec.value_len);
    while (!seen.insert(value).second);
    facts.emplace(key, value);
  }
  return facts;
}

Benchmark gen_benchmark(const BenchSpec& spec) {
  Benchmark b;
  b.spec = spec;
  b.vocab = VocabLayout::from_spec(spec);
  b.facts = gen_facts(spec);
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  PromptSource prompts(spec, b.vocab);
  b.help_train = help_split(rng, spec.n_train, prompts, spec, b.vocab, b.facts);
  b.verb_train = verb_split(rng, spec.n_train, prompts, spec, b.vocab, b.facts);
  b.help_eval = help_split(rng, spec.n_eval, prompts, spec, b.vocab, b.facts);
  b.verb_eval = verb_split(rng, spec.n_eval, prompts, spec, b.vocab, b.facts);
  return b;
}

Token prompt_key(const Tokens& prompt, const VocabLayout& vocab) {
  auto it = std::find(prompt.begin(), prompt.end(), vocab.query);
  if (it == prompt.end() || it + 1 == prompt.end())
    throw DataError(0, "prompt has no query marker followed by a key");
  const Token key = *(it + 1);
  if (std::find(vocab.keys.begin(), vocab.keys.end(), key) == vocab.keys.end())
    throw DataError(0, "prompt queries unknown key " + std::to_string(key));
  return key;
}

double content_score(const Tokens& response, const Tokens& value) {
  if (value.empty()) throw DataError(0, "content_score: empty value");
  const std::size_t n = response.size(), m = value.size();
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = response[i - 1] == value[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[m]) / static_cast<double>(m);
}

std::vector<Continuation> gen_pretraining_corpus(const BenchSpec& spec, int n,
                                                 double filler_continue, std::uint64_t seed) {
  if (filler_continue < 0 || filler_continue >= 1)
    throw ConfigError("filler continuation probability must lie in [0, 1)");
  const VocabLayout v = VocabLayout::from_spec(spec);
  Rng rng(seed);
  std::bernoulli_distribution more(filler_continue);
  std::vector<Continuation> out;
  for (int i = 0; i < n; ++i) {
    const Token key = v.keys[uniform_int(rng, 0, static_cast<int>(v.keys.size()) - 1)];
    Continuation c;
    c.prompt = random_prompt(rng, spec, v, key);
    const Tokens value = draw_distinct(rng, v.values, spec.value_len);
    int k = 0;
    while (k < 4 * spec.max_filler && more(rng)) ++k;
    c.response = response(value, k, v);
    out.push_back(std::move(c));
  }
  return out;
}

Tokens encode(const std::vector<int>& ids, int vocab_size) {
  Tokens out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= vocab_size)
      throw TokenError("token id " + std::to_string(id) + " outside [0, " + std::to_string(vocab_size) + ")");
    out.push_back(static_cast<Token>(id));
  }
  return out;
}

std::vector<int> decode(const Tokens& tokens, int vocab_size) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 0 || t >= vocab_size)
      throw TokenError("token id " + std::to_string(t) + " outside [0, " + std::to_string(vocab_size) + ")");
    out.push_back(t);
  }
  return out;
}

std::string glyph(Token t, const VocabLayout& v) {
  if (t < 0 || t >= v.vocab_size) throw TokenError("token id " + std::to_string(t) + " outside vocabulary");
  if (t == v.bos) return "<bos>";
  if (t == v.query) return "<q>";
  if (t == v.answer) return "<a>";
  if (t == v.stop) return "<stop>";
  if (t == v.filler) return "~";
  auto index_in = [t](const std::vector<Token>& ids) {
    return std::to_string(std::find(ids.begin(), ids.end(), t) - ids.begin());
  };
  if (std::find(v.keys.begin(), v.keys.end(), t) != v.keys.end()) return "k" + index_in(v.keys);
  if (std::find(v.values.begin(), v.values.end(), t) != v.values.end()) return "v" + index_in(v.values);
  return "n" + index_in(v.noise);
}

std::string render(const Tokens& tokens, const VocabLayout& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += glyph(tokens[i], vocab);
  }
  return out;
}

json pair_to_json(const PreferencePair& p) {
  return json{{"prompt", p.prompt},     {"chosen", p.chosen},
              {"rejected", p.rejected}, {"axis", axis_name(p.axis)},
              {"chosen_score", p.chosen_score}, {"rejected_score", p.rejected_score}};
}

PreferencePair pair_from_json(const json& j, std::size_t line, int vocab_size) {
  const std::string where = "line " + std::to_string(line) + ": ";
  if (!j.is_object()) throw DataError(line, where + "expected a JSON object");
  auto tokens = [&](const char* field) {
    if (!j.contains(field)) throw DataError(line, where + "missing field \"" + field + "\"");
    const json& a = j.at(field);
    if (!a.is_array()) throw DataError(line, where + "\"" + field + "\" must be an array");
    Tokens out;
    for (const json& x : a) {
      if (!x.is_number_integer()) throw DataError(line, where + "\"" + field + "\" holds a non-integer");
      const auto id = x.get<long long>();
      if (id < 0 || (vocab_size > 0 && id >= vocab_size))
        throw DataError(line, where + "token id " + std::to_string(id) + " out of range in \"" + field + "\"");
      out.push_back(static_cast<Token>(id));
    }
    return out;
  };
  auto number = [&](const char* field) {
    if (!j.contains(field) || !j.at(field).is_number())
      throw DataError(line, where + "missing or non-numeric \"" + field + "\"");
    return j.at(field).get<double>();
  };
  PreferencePair p;
  p.prompt = tokens("prompt");
  p.chosen = tokens("chosen");
  p.rejected = tokens("rejected");
  if (!j.contains("axis") || !j.at("axis").is_string())
    throw DataError(line, where + "missing field \"axis\"");
  try {
    p.axis = parse_axis(j.at("axis").get<std::string>());
  } catch (const NameError& e) {
    throw DataError(line, where + e.what());
  }
  p.chosen_score = number("chosen_score");
  p.rejected_score = number("rejected_score");
  if (p.prompt.empty()) throw DataError(line, where + "empty prompt");
  if (!(p.chosen_score > p.rejected_score))
    throw DataError(line, where + "chosen_score must exceed rejected_score");
  return p;
}

void write_pairs(const std::vector<PreferencePair>& pairs, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
  if (!out) throw Error("write failed for '" + path + "'");
}

std::vector<PreferencePair> read_pairs(const std::string& path, int vocab_size) {
  if (!std::filesystem::exists(path)) throw MissingDependency(path);
  std::ifstream in(path);
  std::vector<PreferencePair> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw DataError(line, "line " + std::to_string(line) + ": " + e.what());
    }
    out.push_back(pair_from_json(j, line, vocab_size));
  }
  return out;
}

}  // namespace tsdpo
