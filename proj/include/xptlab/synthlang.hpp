#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "xptlab/encoder.hpp"

namespace xptlab {

// ---- grammar ---------------------------------------------------------------------

enum class Category : std::uint8_t { kDet, kNoun, kVerb, kAdj, kAdv, kPrep };
inline constexpr std::size_t kNumCategories = 6;

/// Content vocabulary carved into categories and synonym classes. Each
/// content token belongs to exactly one concept; tokens of a concept are
/// interchangeable synonyms.
class Grammar {
 public:
  /// Deterministic layout of [n_special, vocab_size) into categories.
  Grammar(std::size_t vocab_size, std::size_t n_special);

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t n_special() const { return n_special_; }
  std::size_t n_content() const { return vocab_size_ - n_special_; }

  Category category_of(int token) const;
  /// Topic of a concept, or -1 for determiners and prepositions.
  int topic_of_concept(int concept_id) const { return concepts_.at(concept_id).topic; }
  int concept_of(int token) const;
  const std::vector<int>& synonyms(int concept_id) const { return concepts_.at(concept_id).tokens; }
  const std::vector<int>& concepts_in(Category c) const { return by_category_[static_cast<std::size_t>(c)]; }
  bool is_content(int token) const {
    return token >= static_cast<int>(n_special_) && token < static_cast<int>(vocab_size_);
  }

 private:
  struct Concept {
    Category category;
    int topic;
    std::vector<int> tokens;
  };
  std::size_t vocab_size_;
  std::size_t n_special_;
  std::vector<Concept> concepts_;
  std::vector<int> token_concept_;  // indexed by token - n_special
  std::array<std::vector<int>, kNumCategories> by_category_;
};

/// Sentence structure: DET [ADJ] NOUN VERB DET [ADJ] NOUN {ADV | PREP DET NOUN}*.
/// Slots hold concept ids; surface tokens are drawn per rendering.
struct Clause {
  struct NounPhrase {
    int det = -1;
    int adj = -1;  // -1 when absent
    int noun = -1;
  };
  struct Modifier {
    int adv = -1;  // set for adverbs
    int prep = -1;  // set for prepositional phrases, with `object`
    NounPhrase object;
  };
  NounPhrase subject;
  int verb = -1;
  NounPhrase object;
  std::vector<Modifier> modifiers;

  std::size_t length() const;
};

/// Recovers the clause behind a lang-0 token sequence. Throws InputError
/// when the tokens do not follow the grammar.
Clause parse_clause(const Grammar& grammar, std::span<const int> tokens);
/// Renders a clause with a uniformly drawn synonym in every slot.
std::vector<int> render(const Grammar& grammar, const Clause& clause, std::mt19937_64& rng);

inline constexpr std::size_t kMinSentenceLength = 4;
inline constexpr std::size_t kMaxSentenceLength = 12;

inline constexpr std::size_t kNumTopics = 6;
/// Probability that a content slot draws from the sentence topic.
inline constexpr double kTopicAdherence = 0.8;

/// Seeded lang-0 sentences with 4–12 content tokens. Each sentence has a
/// topic that biases its noun, verb, adjective and adverb choices.
std::vector<std::vector<int>> gen_base_corpus(const Grammar& grammar, std::size_t n_sentences,
                                              std::uint64_t grammar_seed);

// ---- languages ----------------------------------------------------------------------

/// A synthetic language: a bijection over content tokens. Special tokens and
/// the shared anchor tokens are fixed points; lang 0 is the identity.
struct LangSpec {
  int lang_id = 0;
  std::vector<int> permutation;  // token -> token, size vocab_size
  double difficulty = 0.0;

  int map(int token) const { return permutation.at(static_cast<std::size_t>(token)); }
  std::vector<int> inverse() const;
  /// Throws ContractError unless the permutation is a bijection that fixes
  /// every special token.
  void validate(std::size_t n_special) const;
  friend bool operator==(const LangSpec&, const LangSpec&) = default;
};

/// Language `lang_id` with a seeded permutation. `shared_fraction` of the
/// content vocabulary (the same subset for every language under one seed)
/// is left untranslated.
LangSpec make_language(const Grammar& grammar, int lang_id, double difficulty, double shared_fraction,
                       std::uint64_t seed);

// ---- task samples ----------------------------------------------------------------------

enum class Split : std::uint8_t { kTrain, kVal, kTest, kAnalysis };
const char* split_name(Split s);
Split parse_split(const std::string& name);

struct TaskSample {
  std::vector<int> tokens_a;  // content tokens only
  std::vector<int> tokens_b;
  int label = 0;
  int lang = 0;
  int pair_id = 0;
  Split split = Split::kTrain;

  friend bool operator==(const TaskSample&, const TaskSample&) = default;
};

/// [CLS] a [SEP] b.
std::vector<int> encode_pair(const ModelConfig& config, const TaskSample& sample);

/// Maps a lang-0 sample into `spec`'s language.
TaskSample translate(const TaskSample& sample, const LangSpec& spec);

enum class NegativeKind : std::uint8_t {
  /// Object noun replaced by another concept, with as many changed positions
  /// as a paraphrase; only synonym knowledge separates the classes.
  kStrict,
  /// Half object-slot swaps, half mismatched sentence pairs.
  kNoisy,
};

struct TaskSizes {
  std::size_t train = 2000;
  std::size_t val = 500;
  std::size_t test_per_lang = 1000;
  std::size_t analysis_per_lang = 1000;

  std::size_t base_sentences() const { return train + val + test_per_lang + analysis_per_lang; }
  friend bool operator==(const TaskSizes&, const TaskSizes&) = default;
};

struct MultilingualDataset {
  std::vector<TaskSample> samples;
  std::vector<LangSpec> languages;

  std::size_t count(Split split, int lang) const;
  std::vector<const TaskSample*> select(Split split, int lang) const;
  std::vector<int> language_ids() const;

  friend bool operator==(const MultilingualDataset&, const MultilingualDataset&) = default;
};

/// Sentence-pair paraphrase task. Positives are paraphrases of sentence a;
/// negatives follow `negatives`. Train and val are lang 0
/// only; test and analysis hold every base sample in every language under a
/// shared pair_id.
MultilingualDataset build_pair_task(const Grammar& grammar, const std::vector<std::vector<int>>& corpus,
                                    const std::vector<LangSpec>& languages, const TaskSizes& sizes,
                                    NegativeKind negatives, std::uint64_t task_seed);

// ---- masked language modelling ------------------------------------------------------

struct MlmSequence {
  std::vector<int> input;
  std::vector<std::size_t> target_positions;
  std::vector<int> targets;

  friend bool operator==(const MlmSequence&, const MlmSequence&) = default;
};

using MlmBatch = std::vector<MlmSequence>;

struct TextPair {
  std::vector<int> first;
  std::vector<int> second;
  friend bool operator==(const TextPair&, const TextPair&) = default;
};

/// Pretraining text of one language, already translated.
struct LangCorpus {
  int lang = 0;
  std::vector<TextPair> pairs;
};

/// Pairs each lang-0 sentence with a paraphrase of itself (probability
/// `paraphrase_rate`) or another corpus sentence, renders both into `spec`,
/// then replaces each content token by a uniform random content token with
/// probability noise_rate · difficulty.
LangCorpus make_lang_corpus(const Grammar& grammar, const std::vector<std::vector<int>>& base,
                            const LangSpec& spec, double paraphrase_rate, double noise_rate,
                            std::uint64_t seed);

struct MlmOptions {
  double mask_rate = 0.15;
  std::size_t batch_size = 32;
  friend bool operator==(const MlmOptions&, const MlmOptions&) = default;
};

/// Shuffled [CLS] s [SEP] s' sequences over all languages with 80/10/10
/// mask/random/keep corruption on the selected content positions.
std::vector<MlmBatch> build_mlm_batches(const ModelConfig& config, const std::vector<LangCorpus>& corpora, const MlmOptions& options,
                                        std::uint64_t seed);

/// Corrupts one sequence in place; returns targets. Specials are never chosen.
MlmSequence corrupt_for_mlm(const ModelConfig& config, std::vector<int> tokens, double mask_rate,
                            std::mt19937_64& rng);

/// Rule-based paraphrase of a lang-0 sentence: two modifiers trade places
/// when there are at least two, then one or two positions switch to a
/// different synonym, so the result always differs from the input.
std::vector<int> paraphrase(const Grammar& grammar, std::span<const int> tokens, std::mt19937_64& rng);

}  // namespace xptlab
