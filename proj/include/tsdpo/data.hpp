#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsdpo/model.hpp"

namespace tsdpo {

enum class Axis { Help, Verb };

const char* axis_name(Axis a);
Axis parse_axis(const std::string& name);

struct PreferencePair {
  Tokens prompt;
  Tokens chosen;
  Tokens rejected;
  Axis axis = Axis::Help;
  double chosen_score = 1.0;
  double rejected_score = 0.0;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

/// Benchmark parameters. Special tokens must be distinct ids below vocab_size;
/// keys, value tokens and context noise are allocated from the remaining ids
/// in ascending order.
struct BenchSpec {
  int n_train = 2000;  // pairs per axis
  int n_eval = 500;
  int vocab_size = 64;
  int n_facts = 16;
  Token filler_token = 4;
  Token answer_marker = 2;
  std::uint64_t seed = 0;

  Token bos_token = 0;
  Token query_token = 1;
  Token stop_token = 3;
  int value_alphabet = 16;
  int value_len = 2;
  int min_context = 1;
  int max_context = 4;
  int max_filler = 8;

  /// Throws ConfigError on any invalid field, including a vocabulary too
  /// small to host the special tokens, keys, values and at least one noise id.
  void validate() const;

  friend bool operator==(const BenchSpec&, const BenchSpec&) = default;
};

void to_json(nlohmann::json& j, const BenchSpec& s);
void from_json(const nlohmann::json& j, BenchSpec& s);

/// Token id ranges implied by a BenchSpec.
struct VocabLayout {
  int vocab_size = 0;
  Token bos = 0, query = 0, answer = 0, stop = 0, filler = 0;
  std::vector<Token> keys;
  std::vector<Token> values;
  std::vector<Token> noise;

  static VocabLayout from_spec(const BenchSpec& spec);
};

/// key token -> the value token sequence that answers it
using FactTable = std::map<Token, Tokens>;

struct Benchmark {
  BenchSpec spec;
  VocabLayout vocab;
  FactTable facts;
  std::vector<PreferencePair> help_train, help_eval, verb_train, verb_eval;
};

/// Deterministic in the spec. Every prompt instance (context + key) is unique
/// across all four splits, so train and eval never share a prompt.
Benchmark gen_benchmark(const BenchSpec& spec);

/// Fact table alone (the first draws of the generator).
FactTable gen_facts(const BenchSpec& spec);

/// Key token queried by a prompt (the token after the query marker).
Token prompt_key(const Tokens& prompt, const VocabLayout& vocab);

/// Fraction of `value` found in order inside `response` (longest common
/// subsequence over value length).
double content_score(const Tokens& response, const Tokens& value);

/// Prompt/response pairs for fitting the base model: well-formed responses
/// with random value tokens (facts stay unknown) and geometric filler counts.
struct Continuation {
  Tokens prompt;
  Tokens response;
};
std::vector<Continuation> gen_pretraining_corpus(const BenchSpec& spec, int n,
                                                 double filler_continue, std::uint64_t seed);

/// Integer ids are the token representation; these only validate the range.
Tokens encode(const std::vector<int>& ids, int vocab_size);
std::vector<int> decode(const Tokens& tokens, int vocab_size);

/// Printable rendering: specials as <bos>/<q>/<a>/<stop>, filler as "~",
/// keys kN, values vN, noise nN.
std::string glyph(Token t, const VocabLayout& vocab);
std::string render(const Tokens& tokens, const VocabLayout& vocab);

nlohmann::json pair_to_json(const PreferencePair& p);
/// Validates fields and the score invariant; throws DataError with `line`.
PreferencePair pair_from_json(const nlohmann::json& j, std::size_t line = 0, int vocab_size = 0);

/// One JSON object per line.
void write_pairs(const std::vector<PreferencePair>& pairs, const std::string& path);
/// `vocab_size` > 0 additionally range-checks every token id.
std::vector<PreferencePair> read_pairs(const std::string& path, int vocab_size = 0);

}  // namespace tsdpo
