#include "xptlab/synthlang.hpp"

#include <algorithm>
#include <numeric>

#include "xptlab/digest.hpp"

namespace xptlab {

namespace {

struct CategoryPlan {
  Category category;
  double fraction;
  std::size_t class_size;
  bool topical;
};

constexpr CategoryPlan kPlan[] = {
    {Category::kDet, 0.04, 2, false},  {Category::kPrep, 0.06, 2, false}, {Category::kNoun, 0.38, 3, true},
    {Category::kVerb, 0.22, 3, true},  {Category::kAdj, 0.18, 3, true},   {Category::kAdv, 0.12, 3, true},
};

constexpr std::size_t kMinContent = 32;

template <class T>
const T& pick(const std::vector<T>& items, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dist(0, items.size() - 1);
  return items[dist(rng)];
}

bool coin(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }


class ClauseSampler {
 public:
  ClauseSampler(const Grammar& g, std::mt19937_64& rng) : g_(g), rng_(rng) {
    for (std::size_t c = 0; c < kNumCategories; ++c) {
      for (int id : g.concepts_in(static_cast<Category>(c))) {
        const int topic = g.topic_of_concept(id);
        if (topic >= 0) by_topic_[c][static_cast<std::size_t>(topic)].push_back(id);
      }
    }
  }

  Clause sample() {
    topic_ = std::uniform_int_distribution<int>(0, static_cast<int>(kNumTopics) - 1)(rng_);
    Clause cl;
    cl.subject = noun_phrase(true);
    cl.verb = draw(Category::kVerb);
    cl.object = noun_phrase(true);
    const int wanted = std::uniform_int_distribution<int>(0, 2)(rng_);
    for (int m = 0; m < wanted; ++m) {
      Clause::Modifier mod;
      if (coin(rng_, 0.5)) {
        mod.adv = draw(Category::kAdv);
      } else {
        mod.prep = draw(Category::kPrep);
        mod.object = noun_phrase(false);
      }
      const std::size_t extra = mod.adv >= 0 ? 1 : 3;
      if (cl.length() + extra > kMaxSentenceLength) break;
      cl.modifiers.push_back(mod);
    }
    return cl;
  }

 private:
  int draw(Category c) {
    const auto ci = static_cast<std::size_t>(c);
    const auto& topical = by_topic_[ci][static_cast<std::size_t>(topic_)];
    if (!topical.empty() && coin(rng_, kTopicAdherence)) return pick(topical, rng_);
    return pick(g_.concepts_in(c), rng_);
  }

  Clause::NounPhrase noun_phrase(bool allow_adj) {
    Clause::NounPhrase np;
    np.det = draw(Category::kDet);
    if (allow_adj && coin(rng_, 0.5)) np.adj = draw(Category::kAdj);
    np.noun = draw(Category::kNoun);
    return np;
  }

  const Grammar& g_;
  std::mt19937_64& rng_;
  int topic_ = 0;
  std::array<std::array<std::vector<int>, kNumTopics>, kNumCategories> by_topic_;
};

void render_np(const Grammar& g, const Clause::NounPhrase& np, std::mt19937_64& rng, std::vector<int>& out) {
  out.push_back(pick(g.synonyms(np.det), rng));
  if (np.adj >= 0) out.push_back(pick(g.synonyms(np.adj), rng));
  out.push_back(pick(g.synonyms(np.noun), rng));
}

std::size_t np_length(const Clause::NounPhrase& np) { return np.adj >= 0 ? 3 : 2; }

// Index of the object noun in the surface form.
std::size_t object_noun_position(const Clause& cl) { return np_length(cl.subject) + np_length(cl.object); }

// Swaps two randomly chosen modifier spans (surface tokens move with them).
std::vector<int> swap_modifiers(const Clause& cl, std::span<const int> tokens, std::mt19937_64& rng) {
  std::vector<int> out(tokens.begin(), tokens.end());
  if (cl.modifiers.size() < 2) return out;
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (offset, length)
  std::size_t pos = np_length(cl.subject) + 1 + np_length(cl.object);
  for (const Clause::Modifier& m : cl.modifiers) {
    const std::size_t len = m.adv >= 0 ? 1 : 1 + np_length(m.object);
    spans.emplace_back(pos, len);
    pos += len;
  }
  std::uniform_int_distribution<std::size_t> dist(0, spans.size() - 1);
  std::size_t i = dist(rng);
  std::size_t j = dist(rng);
  while (j == i) j = dist(rng);
  if (i > j) std::swap(i, j);
  const std::size_t mod_start = spans.front().first;
  std::vector<int> rebuilt(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(mod_start));
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const auto [off, len] = spans[k == i ? j : k == j ? i : k];
    rebuilt.insert(rebuilt.end(), tokens.begin() + static_cast<std::ptrdiff_t>(off),
                   tokens.begin() + static_cast<std::ptrdiff_t>(off + len));
  }
  return rebuilt;
}

// Replaces `count` distinct positions (never `skip`) by a different synonym.
void substitute_synonyms(const Grammar& g, std::vector<int>& tokens, std::size_t count, std::size_t skip,
                         std::mt19937_64& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i != skip && g.synonyms(g.concept_of(tokens[i])).size() > 1) candidates.push_back(i);
  }
  if (candidates.size() < count) throw InputError("paraphrase: not enough positions with synonyms");
  std::shuffle(candidates.begin(), candidates.end(), rng);
  for (std::size_t k = 0; k < count; ++k) {
    int& t = tokens[candidates[k]];
    std::vector<int> others;
    std::ranges::copy_if(g.synonyms(g.concept_of(t)), std::back_inserter(others), [&](int o) { return o != t; });
    t = pick(others, rng);
  }
}

// One or two synonym substitutions, mirrored by object_swap's count.
std::size_t substitution_count(std::mt19937_64& rng) { return coin(rng, 0.5) ? 2 : 1; }

// Like paraphrase, but the object noun becomes a different concept and one
// fewer synonym substitution is made, so the number of changed positions
// has the same distribution as for a paraphrase.
std::vector<int> object_swap(const Grammar& g, std::span<const int> tokens, std::mt19937_64& rng) {
  const Clause cl = parse_clause(g, tokens);
  std::vector<int> out = swap_modifiers(cl, tokens, rng);
  const std::size_t pos = object_noun_position(cl);
  const auto& nouns = g.concepts_in(Category::kNoun);
  int replacement = cl.object.noun;
  while (replacement == cl.object.noun) replacement = pick(nouns, rng);
  out[pos] = pick(g.synonyms(replacement), rng);
  substitute_synonyms(g, out, substitution_count(rng) - 1, pos, rng);
  return out;
}

std::vector<int> balanced_labels(std::size_t n, std::mt19937_64& rng) {
  std::vector<int> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n / 2), 1);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

}  // namespace

// ---- Grammar -----------------------------------------------------------------------

Grammar::Grammar(std::size_t vocab_size, std::size_t n_special) : vocab_size_(vocab_size), n_special_(n_special) {
  if (vocab_size <= n_special || vocab_size - n_special < kMinContent) {
    throw InputError("grammar needs at least " + std::to_string(kMinContent) + " content tokens");
  }
  const std::size_t n = n_content();
  token_concept_.assign(n, -1);
  int next = static_cast<int>(n_special);
  std::size_t used = 0;
  for (const CategoryPlan& plan : kPlan) {
    const std::size_t budget = static_cast<std::size_t>(plan.fraction * static_cast<double>(n));
    const std::size_t n_concepts = std::max<std::size_t>(1, budget / plan.class_size);
    for (std::size_t k = 0; k < n_concepts; ++k) {
      Concept c{plan.category, plan.topical ? static_cast<int>(k % kNumTopics) : -1, {}};
      for (std::size_t s = 0; s < plan.class_size; ++s) c.tokens.push_back(next++);
      used += plan.class_size;
      by_category_[static_cast<std::size_t>(plan.category)].push_back(static_cast<int>(concepts_.size()));
      concepts_.push_back(std::move(c));
    }
  }
  if (used > n) throw InputError("grammar layout exceeds the content vocabulary");
  // Leftover tokens widen noun synonym classes round-robin.
  const auto& nouns = by_category_[static_cast<std::size_t>(Category::kNoun)];
  for (std::size_t k = 0; used < n; ++k, ++used) concepts_[nouns[k % nouns.size()]].tokens.push_back(next++);
  for (std::size_t id = 0; id < concepts_.size(); ++id) {
    for (int t : concepts_[id].tokens) token_concept_[t - n_special_] = static_cast<int>(id);
  }
}

int Grammar::concept_of(int token) const {
  if (!is_content(token)) throw IndexError("token " + std::to_string(token) + " is not a content token");
  return token_concept_[static_cast<std::size_t>(token) - n_special_];
}

Category Grammar::category_of(int token) const { return concepts_[concept_of(token)].category; }

std::size_t Clause::length() const {
  auto np_len = [](const NounPhrase& np) { return np.adj >= 0 ? 3u : 2u; };
  std::size_t n = np_len(subject) + 1 + np_len(object);
  for (const Modifier& m : modifiers) n += m.adv >= 0 ? 1 : 1 + np_len(m.object);
  return n;
}

Clause parse_clause(const Grammar& g, std::span<const int> tokens) {
  std::size_t i = 0;
  auto fail = [&](const char* what) -> InputError {
    return InputError(std::string("parse_clause: ") + what + " at position " + std::to_string(i));
  };
  auto expect = [&](Category c) -> int {
    if (i >= tokens.size() || !g.is_content(tokens[i]) || g.category_of(tokens[i]) != c) throw fail("unexpected token");
    return g.concept_of(tokens[i++]);
  };
  auto optional = [&](Category c) -> int {
    if (i < tokens.size() && g.is_content(tokens[i]) && g.category_of(tokens[i]) == c) return g.concept_of(tokens[i++]);
    return -1;
  };
  auto np = [&]() {
    Clause::NounPhrase p;
    p.det = expect(Category::kDet);
    p.adj = optional(Category::kAdj);
    p.noun = expect(Category::kNoun);
    return p;
  };
  Clause cl;
  cl.subject = np();
  cl.verb = expect(Category::kVerb);
  cl.object = np();
  while (i < tokens.size()) {
    Clause::Modifier m;
    if ((m.adv = optional(Category::kAdv)) < 0) {
      m.prep = expect(Category::kPrep);
      m.object = np();
    }
    cl.modifiers.push_back(m);
  }
  return cl;
}

std::vector<int> render(const Grammar& g, const Clause& cl, std::mt19937_64& rng) {
  std::vector<int> out;
  out.reserve(cl.length());
  render_np(g, cl.subject, rng, out);
  out.push_back(pick(g.synonyms(cl.verb), rng));
  render_np(g, cl.object, rng, out);
  for (const Clause::Modifier& m : cl.modifiers) {
    if (m.adv >= 0) {
      out.push_back(pick(g.synonyms(m.adv), rng));
    } else {
      out.push_back(pick(g.synonyms(m.prep), rng));
      render_np(g, m.object, rng, out);
    }
  }
  return out;
}

std::vector<std::vector<int>> gen_base_corpus(const Grammar& grammar, std::size_t n_sentences,
                                              std::uint64_t grammar_seed) {
  if (n_sentences < 1) throw ContractError("gen_base_corpus: need at least one sentence");
  std::mt19937_64 rng(grammar_seed);
  ClauseSampler sampler(grammar, rng);
  std::vector<std::vector<int>> corpus;
  corpus.reserve(n_sentences);
  for (std::size_t i = 0; i < n_sentences; ++i) corpus.push_back(render(grammar, sampler.sample(), rng));
  return corpus;
}

std::vector<int> paraphrase(const Grammar& grammar, std::span<const int> tokens, std::mt19937_64& rng) {
  const Clause cl = parse_clause(grammar, tokens);
  std::vector<int> out = swap_modifiers(cl, tokens, rng);
  substitute_synonyms(grammar, out, substitution_count(rng), out.size(), rng);
  return out;
}

// ---- languages -------------------------------------------------------------------

std::vector<int> LangSpec::inverse() const {
  std::vector<int> inv(permutation.size());
  for (std::size_t t = 0; t < permutation.size(); ++t) inv[static_cast<std::size_t>(permutation[t])] = static_cast<int>(t);
  return inv;
}

void LangSpec::validate(std::size_t n_special) const {
  std::vector<bool> seen(permutation.size(), false);
  for (std::size_t t = 0; t < permutation.size(); ++t) {
    const int m = permutation[t];
    if (m < 0 || static_cast<std::size_t>(m) >= permutation.size() || seen[m]) {
      throw ContractError("language " + std::to_string(lang_id) + ": permutation is not a bijection");
    }
    seen[m] = true;
    if (t < n_special && m != static_cast<int>(t)) {
      throw ContractError("language " + std::to_string(lang_id) + ": special token " + std::to_string(t) +
                          " is not a fixed point");
    }
  }
  if (lang_id == 0) {
    for (std::size_t t = 0; t < permutation.size(); ++t) {
      if (permutation[t] != static_cast<int>(t)) throw ContractError("language 0 must be the identity");
    }
  }
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) throw ContractError("language difficulty outside [0, 1]");
}

LangSpec make_language(const Grammar& grammar, int lang_id, double difficulty, double shared_fraction,
                       std::uint64_t seed) {
  if (!(shared_fraction >= 0.0 && shared_fraction <= 1.0)) throw InputError("shared_fraction outside [0, 1]");
  LangSpec spec;
  spec.lang_id = lang_id;
  spec.difficulty = difficulty;
  spec.permutation.resize(grammar.vocab_size());
  std::iota(spec.permutation.begin(), spec.permutation.end(), 0);
  if (lang_id != 0) {
    std::vector<int> content(grammar.n_content());
    std::iota(content.begin(), content.end(), static_cast<int>(grammar.n_special()));
    std::mt19937_64 anchor_rng(derive_seed(seed, 0));
    std::shuffle(content.begin(), content.end(), anchor_rng);
    const auto n_shared = static_cast<std::size_t>(shared_fraction * static_cast<double>(content.size()));
    std::vector<int> moving(content.begin() + static_cast<std::ptrdiff_t>(n_shared), content.end());
    std::ranges::sort(moving);
    std::vector<int> images = moving;
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(lang_id)));
    std::shuffle(images.begin(), images.end(), rng);
    for (std::size_t i = 0; i < moving.size(); ++i) spec.permutation[moving[i]] = images[i];
  }
  spec.validate(grammar.n_special());
  return spec;
}

// ---- samples ---------------------------------------------------------------------

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kAnalysis: return "analysis";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest, Split::kAnalysis}) {
    if (name == split_name(s)) return s;
  }
  throw InputError("unknown split '" + name + "'");
}

std::vector<int> encode_pair(const ModelConfig& config, const TaskSample& sample) {
  std::vector<int> seq;
  seq.reserve(sample.tokens_a.size() + sample.tokens_b.size() + 2);
  seq.push_back(config.cls_token_id);
  seq.insert(seq.end(), sample.tokens_a.begin(), sample.tokens_a.end());
  seq.push_back(config.sep_token_id);
  seq.insert(seq.end(), sample.tokens_b.begin(), sample.tokens_b.end());
  if (seq.size() > config.max_seq) {
    throw InputError("encoded pair of length " + std::to_string(seq.size()) + " exceeds max_seq " +
                     std::to_string(config.max_seq));
  }
  return seq;
}

TaskSample translate(const TaskSample& sample, const LangSpec& spec) {
  if (sample.lang != 0) throw ContractError("translate: input must be a source-language (lang 0) sample");
  TaskSample out = sample;
  for (int& t : out.tokens_a) t = spec.map(t);
  for (int& t : out.tokens_b) t = spec.map(t);
  out.lang = spec.lang_id;
  return out;
}

std::size_t MultilingualDataset::count(Split split, int lang) const {
  return static_cast<std::size_t>(
      std::ranges::count_if(samples, [&](const TaskSample& s) { return s.split == split && s.lang == lang; }));
}

std::vector<const TaskSample*> MultilingualDataset::select(Split split, int lang) const {
  std::vector<const TaskSample*> out;
  for (const TaskSample& s : samples) {
    if (s.split == split && s.lang == lang) out.push_back(&s);
  }
  return out;
}

std::vector<int> MultilingualDataset::language_ids() const {
  std::vector<int> ids;
  for (const LangSpec& l : languages) ids.push_back(l.lang_id);
  return ids;
}

MultilingualDataset build_pair_task(const Grammar& grammar, const std::vector<std::vector<int>>& corpus,
                                    const std::vector<LangSpec>& languages, const TaskSizes& sizes,
                                    NegativeKind negatives, std::uint64_t task_seed) {
  const std::size_t needed = sizes.base_sentences();
  if (corpus.size() < needed || corpus.size() < 2) {
    throw InputError("corpus of " + std::to_string(corpus.size()) + " sentences is too small; task needs " +
                     std::to_string(needed));
  }
  if (languages.empty() || languages.front().lang_id != 0) {
    throw InputError("language list must start with the source language (lang 0)");
  }
  std::mt19937_64 rng(task_seed);

  auto make_b = [&](std::size_t index, int label) {
    const std::vector<int>& a = corpus[index];
    if (label == 1) return paraphrase(grammar, a, rng);
    const bool mismatch = negatives == NegativeKind::kNoisy && coin(rng, 0.5);
    if (mismatch) {
      std::uniform_int_distribution<std::size_t> dist(0, corpus.size() - 1);
      std::size_t other = dist(rng);
      while (other == index) other = dist(rng);
      return paraphrase(grammar, corpus[other], rng);
    }
    return object_swap(grammar, a, rng);
  };

  MultilingualDataset ds;
  ds.languages = languages;
  int next_pair = 0;
  std::size_t cursor = 0;
  auto build_split = [&](Split split, std::size_t n, bool all_languages) {
    const std::vector<int> labels = balanced_labels(n, rng);
    std::vector<TaskSample> source;
    source.reserve(n);
    for (std::size_t i = 0; i < n; ++i, ++cursor) {
      TaskSample s;
      s.tokens_a = corpus[cursor];
      s.tokens_b = make_b(cursor, labels[i]);
      s.label = labels[i];
      s.lang = 0;
      s.pair_id = next_pair++;
      s.split = split;
      source.push_back(std::move(s));
    }
    if (!all_languages) {
      ds.samples.insert(ds.samples.end(), source.begin(), source.end());
      return;
    }
    for (const LangSpec& lang : languages) {
      for (const TaskSample& s : source) ds.samples.push_back(translate(s, lang));
    }
  };
  build_split(Split::kTrain, sizes.train, false);
  build_split(Split::kVal, sizes.val, false);
  build_split(Split::kTest, sizes.test_per_lang, true);
  build_split(Split::kAnalysis, sizes.analysis_per_lang, true);
  return ds;
}

// ---- MLM ------------------------------------------------------------------------------

LangCorpus make_lang_corpus(const Grammar& grammar, const std::vector<std::vector<int>>& base,
                            const LangSpec& spec, double paraphrase_rate, double noise_rate,
                            std::uint64_t seed) {
  if (base.size() < 2) throw InputError("pretraining corpus needs at least two sentences");
  std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(spec.lang_id)));
  const double noise = noise_rate * spec.difficulty;
  std::uniform_int_distribution<int> content(static_cast<int>(grammar.n_special()),
                                             static_cast<int>(grammar.vocab_size()) - 1);
  std::uniform_int_distribution<std::size_t> any(0, base.size() - 1);
  auto localize = [&](std::vector<int> tokens) {
    for (int& t : tokens) {
      t = spec.map(t);
      if (noise > 0.0 && coin(rng, noise)) t = content(rng);
    }
    return tokens;
  };
  LangCorpus out;
  out.lang = spec.lang_id;
  out.pairs.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<int> second;
    if (coin(rng, paraphrase_rate)) {
      second = paraphrase(grammar, base[i], rng);
    } else {
      std::size_t j = any(rng);
      while (j == i) j = any(rng);
      second = base[j];
    }
    out.pairs.push_back({localize(base[i]), localize(std::move(second))});
  }
  return out;
}

MlmSequence corrupt_for_mlm(const ModelConfig& config, std::vector<int> tokens, double mask_rate,
                            std::mt19937_64& rng) {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ContractError("mask_rate must lie in (0, 1)");
  const auto n_special = static_cast<int>(config.n_special());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> content(n_special, static_cast<int>(config.vocab_size) - 1);
  MlmSequence seq;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < n_special || u(rng) >= mask_rate) continue;
    seq.target_positions.push_back(i);
    seq.targets.push_back(tokens[i]);
    const double r = u(rng);
    if (r < 0.8) {
      tokens[i] = config.mask_token_id;
    } else if (r < 0.9) {
      tokens[i] = content(rng);
    }
  }
  seq.input = std::move(tokens);
  return seq;
}

std::vector<MlmBatch> build_mlm_batches(const ModelConfig& config, const std::vector<LangCorpus>& corpora,
                                        const MlmOptions& options, std::uint64_t seed) {
  if (options.batch_size == 0) throw InputError("MLM batch size must be positive");
  std::vector<std::vector<int>> sequences;
  for (const LangCorpus& c : corpora) {
    for (const TextPair& p : c.pairs) {
      std::vector<int> seq{config.cls_token_id};
      seq.insert(seq.end(), p.first.begin(), p.first.end());
      seq.push_back(config.sep_token_id);
      seq.insert(seq.end(), p.second.begin(), p.second.end());
      if (seq.size() > config.max_seq) seq.resize(config.max_seq);
      sequences.push_back(std::move(seq));
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(sequences.begin(), sequences.end(), rng);
  std::vector<MlmBatch> batches;
  for (std::size_t i = 0; i < sequences.size(); i += options.batch_size) {
    MlmBatch batch;
    for (std::size_t j = i; j < std::min(sequences.size(), i + options.batch_size); ++j) {
      batch.push_back(corrupt_for_mlm(config, std::move(sequences[j]), options.mask_rate, rng));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace xptlab
