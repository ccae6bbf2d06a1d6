#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "test_util.hpp"
#include "xptlab/error.hpp"
#include "xptlab/synthlang.hpp"

using namespace xptlab;

namespace {

const ModelConfig kDesk{};

struct DeskData {
  Grammar grammar{kDesk.vocab_size, kDesk.n_special()};
  std::vector<LangSpec> langs;
  MultilingualDataset data;

  explicit DeskData(NegativeKind neg = NegativeKind::kNoisy) {
    for (int l = 0; l < 4; ++l) langs.push_back(make_language(grammar, l, 0.1 * l, 0.2, 7));
    const TaskSizes sizes;
    data = build_pair_task(grammar, gen_base_corpus(grammar, sizes.base_sentences(), 11), langs, sizes, neg, 19);
  }
};

const DeskData& desk() {
  static const DeskData d;
  return d;
}

// Bag-of-tokens pair features: tokens shared by both sides, then tokens on
// exactly one side.
std::vector<double> bag_features(const TaskSample& s, std::size_t vocab) {
  std::vector<double> a(vocab), b(vocab), f(2 * vocab);
  for (int t : s.tokens_a) a[t] = 1.0;
  for (int t : s.tokens_b) b[t] = 1.0;
  for (std::size_t v = 0; v < vocab; ++v) {
    f[v] = a[v] * b[v];
    f[vocab + v] = std::abs(a[v] - b[v]);
  }
  return f;
}

// Plain L2-regularised logistic regression by full-batch gradient descent;
// returns held-out accuracy.
double probe_accuracy(const std::vector<const TaskSample*>& train, const std::vector<int>& train_labels,
                      const std::vector<const TaskSample*>& held_out, std::size_t vocab) {
  const std::size_t dim = 2 * vocab + 1;
  std::vector<std::vector<double>> x;
  for (const TaskSample* s : train) {
    x.push_back(bag_features(*s, vocab));
    x.back().push_back(1.0);
  }
  std::vector<double> w(dim, 0.0);
  for (int it = 0; it < 300; ++it) {
    std::vector<double> g(dim, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double z = 0.0;
      for (std::size_t k = 0; k < dim; ++k) z += w[k] * x[i][k];
      const double r = 1.0 / (1.0 + std::exp(-z)) - train_labels[i];
      for (std::size_t k = 0; k < dim; ++k) g[k] += r * x[i][k] / x.size();
    }
    for (std::size_t k = 0; k < dim; ++k) w[k] -= 0.5 * (g[k] + 1e-3 * w[k]);
  }
  std::size_t correct = 0;
  for (const TaskSample* s : held_out) {
    std::vector<double> f = bag_features(*s, vocab);
    f.push_back(1.0);
    double z = 0.0;
    for (std::size_t k = 0; k < dim; ++k) z += w[k] * f[k];
    correct += (z > 0.0) == (s->label == 1);
  }
  return static_cast<double>(correct) / held_out.size();
}

}  // namespace

TEST(Grammar, EveryContentTokenHasOneConcept) {
  const Grammar& g = desk().grammar;
  std::set<int> seen;
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    for (int concept_id : g.concepts_in(static_cast<Category>(c))) {
      for (int t : g.synonyms(concept_id)) {
        EXPECT_TRUE(seen.insert(t).second) << t;
        EXPECT_EQ(g.concept_of(t), concept_id);
      }
    }
  }
  EXPECT_EQ(seen.size(), g.n_content());
}

TEST(BaseCorpus, DeterministicInRangeAndGrammatical) {
  const Grammar& g = desk().grammar;
  const auto a = gen_base_corpus(g, 500, 3);
  EXPECT_EQ(a, gen_base_corpus(g, 500, 3));
  EXPECT_NE(a, gen_base_corpus(g, 500, 4));
  for (const auto& s : a) {
    EXPECT_GE(s.size(), kMinSentenceLength);
    EXPECT_LE(s.size(), kMaxSentenceLength);
    for (int t : s) EXPECT_TRUE(g.is_content(t));
    EXPECT_NO_THROW(parse_clause(g, s));
  }
}

TEST(BaseCorpus, VocabularyCoverage) {
  const Grammar& g = desk().grammar;
  std::set<int> seen;
  for (const auto& s : gen_base_corpus(g, 5000, 1)) seen.insert(s.begin(), s.end());
  EXPECT_GE(static_cast<double>(seen.size()), 0.8 * g.n_content());
}

TEST(LangSpec, BijectionFixingSpecials) {
  const DeskData& d = desk();
  for (const LangSpec& spec : d.langs) {
    EXPECT_NO_THROW(spec.validate(kDesk.n_special()));
    std::vector<int> sorted = spec.permutation;
    std::ranges::sort(sorted);
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], static_cast<int>(i));
    for (int s = 0; s < static_cast<int>(kDesk.n_special()); ++s) EXPECT_EQ(spec.map(s), s);
    const std::vector<int> inv = spec.inverse();
    for (int t = 0; t < static_cast<int>(kDesk.vocab_size); ++t) EXPECT_EQ(inv[spec.map(t)], t);
  }
  for (int t = 0; t < static_cast<int>(kDesk.vocab_size); ++t) EXPECT_EQ(d.langs[0].map(t), t);
  EXPECT_EQ(make_language(d.grammar, 2, 0.2, 0.2, 7), d.langs[2]);
}

TEST(LangSpec, ValidateRejectsNonBijection) {
  LangSpec spec = desk().langs[1];
  spec.permutation[10] = spec.permutation[11];
  EXPECT_THROW(spec.validate(kDesk.n_special()), ContractError);
  spec = desk().langs[1];
  std::swap(spec.permutation[0], spec.permutation[20]);
  EXPECT_THROW(spec.validate(kDesk.n_special()), ContractError);
}

TEST(Translate, IdentityRoundTripAndDifferences) {
  const DeskData& d = desk();
  const auto train = d.data.select(Split::kTrain, 0);
  for (std::size_t i = 0; i < 50; ++i) {
    const TaskSample& s = *train[i];
    EXPECT_EQ(translate(s, d.langs[0]), s);
    const TaskSample t1 = translate(s, d.langs[1]);
    const TaskSample t2 = translate(s, d.langs[2]);
    EXPECT_EQ(t1.lang, 1);
    EXPECT_EQ(t1.pair_id, s.pair_id);
    EXPECT_EQ(t1.label, s.label);
    const std::vector<int> inv = d.langs[1].inverse();
    for (std::size_t k = 0; k < s.tokens_a.size(); ++k) {
      EXPECT_EQ(inv[t1.tokens_a[k]], s.tokens_a[k]);
      EXPECT_EQ(t1.tokens_a[k] != t2.tokens_a[k], d.langs[1].map(s.tokens_a[k]) != d.langs[2].map(s.tokens_a[k]));
    }
  }
  const TaskSample foreign = translate(*train[0], d.langs[1]);
  EXPECT_THROW(translate(foreign, d.langs[2]), ContractError);
}

TEST(PairTask, SplitSizesAndZeroShotPurity) {
  const MultilingualDataset& data = desk().data;
  EXPECT_EQ(data.count(Split::kTrain, 0), 2000u);
  EXPECT_EQ(data.count(Split::kVal, 0), 500u);
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(data.count(Split::kTest, l), 1000u);
    EXPECT_EQ(data.count(Split::kAnalysis, l), 1000u);
  }
  for (const TaskSample& s : data.samples) {
    if (s.split == Split::kTrain || s.split == Split::kVal) EXPECT_EQ(s.lang, 0);
  }
}

TEST(PairTask, LabelsBalancedPerSplitAndLanguage) {
  const MultilingualDataset& data = desk().data;
  for (Split sp : {Split::kTrain, Split::kVal, Split::kTest, Split::kAnalysis}) {
    for (int l : data.language_ids()) {
      const auto rows = data.select(sp, l);
      if (rows.empty()) continue;
      long pos = 0;
      for (const TaskSample* s : rows) pos += s->label;
      EXPECT_LE(std::abs(2 * pos - static_cast<long>(rows.size())), 1) << split_name(sp) << " lang " << l;
    }
  }
}

TEST(PairTask, PositivesAreNonDegenerateParaphrases) {
  const DeskData& d = desk();
  for (const TaskSample* s : d.data.select(Split::kTrain, 0)) {
    if (s->label != 1) continue;
    EXPECT_NE(s->tokens_a, s->tokens_b);
    // Same bag of concepts.
    std::multiset<int> ca, cb;
    for (int t : s->tokens_a) ca.insert(d.grammar.concept_of(t));
    for (int t : s->tokens_b) cb.insert(d.grammar.concept_of(t));
    EXPECT_EQ(ca, cb);
  }
}

TEST(PairTask, AnalysisSplitIsTranslationAligned) {
  const DeskData& d = desk();
  std::map<int, std::map<int, const TaskSample*>> groups;
  for (const TaskSample& s : d.data.samples) {
    if (s.split != Split::kAnalysis) continue;
    EXPECT_TRUE(groups[s.pair_id].emplace(s.lang, &s).second) << "duplicate lang in pair " << s.pair_id;
  }
  EXPECT_EQ(groups.size(), 1000u);
  for (const auto& [pid, by_lang] : groups) {
    ASSERT_EQ(by_lang.size(), 4u);
    const TaskSample& src = *by_lang.at(0);
    for (int l = 1; l < 4; ++l) {
      const TaskSample& t = *by_lang.at(l);
      EXPECT_EQ(t.label, src.label);
      ASSERT_EQ(t.tokens_a.size(), src.tokens_a.size());
      for (std::size_t k = 0; k < src.tokens_a.size(); ++k) EXPECT_EQ(t.tokens_a[k], d.langs[l].map(src.tokens_a[k]));
      for (std::size_t k = 0; k < src.tokens_b.size(); ++k) EXPECT_EQ(t.tokens_b[k], d.langs[l].map(src.tokens_b[k]));
    }
  }
}

TEST(PairTask, DeterministicAndTooSmallCorpusRejected) {
  const DeskData& d = desk();
  TaskSizes sizes;
  sizes.train = 40;
  sizes.val = 10;
  sizes.test_per_lang = 10;
  sizes.analysis_per_lang = 10;
  const auto corpus = gen_base_corpus(d.grammar, sizes.base_sentences(), 2);
  EXPECT_EQ(build_pair_task(d.grammar, corpus, d.langs, sizes, NegativeKind::kStrict, 5),
            build_pair_task(d.grammar, corpus, d.langs, sizes, NegativeKind::kStrict, 5));
  const std::vector<std::vector<int>> small(corpus.begin(), corpus.begin() + 20);
  EXPECT_THROW(build_pair_task(d.grammar, small, d.langs, sizes, NegativeKind::kStrict, 5), InputError);
}

TEST(PairTask, EncodedSamplesFitAndStartWithCls) {
  const DeskData& d = desk();
  for (const TaskSample& s : d.data.samples) {
    const std::vector<int> enc = encode_pair(kDesk, s);
    ASSERT_LE(enc.size(), kDesk.max_seq);
    EXPECT_EQ(enc.front(), kDesk.cls_token_id);
    EXPECT_EQ(enc[s.tokens_a.size() + 1], kDesk.sep_token_id);
  }
}

TEST(PairTask, BagOfTokensProbeLearnsRealLabelsOnly) {
  const DeskData& d = desk();
  const auto train = d.data.select(Split::kTrain, 0);
  const auto val = d.data.select(Split::kVal, 0);
  std::vector<int> labels, shuffled;
  for (const TaskSample* s : train) labels.push_back(s->label);
  shuffled = labels;
  std::mt19937_64 rng(99);
  std::ranges::shuffle(shuffled, rng);
  const double real = probe_accuracy(train, labels, val, kDesk.vocab_size);
  const double noise = probe_accuracy(train, shuffled, val, kDesk.vocab_size);
  EXPECT_GT(real, 0.7);
  EXPECT_NEAR(noise, 0.5, 0.07);
}

TEST(Mlm, CorruptionRateAndMix) {
  const DeskData& d = desk();
  std::vector<LangCorpus> corpora;
  const auto base = gen_base_corpus(d.grammar, 1000, 3);
  for (int l = 0; l < 4; ++l) corpora.push_back(make_lang_corpus(d.grammar, base, d.langs[l], 0.5, 0.1, 40 + l));
  MlmOptions opt;
  const auto batches = build_mlm_batches(kDesk, corpora, opt, 8);
  std::size_t content = 0, targets = 0, masked = 0, kept = 0;
  for (const MlmBatch& b : batches) {
    for (const MlmSequence& s : b) {
      for (int t : s.input) content += t >= static_cast<int>(kDesk.n_special()) || t == kDesk.mask_token_id;
      targets += s.targets.size();
      for (std::size_t i = 0; i < s.targets.size(); ++i) {
        const int in = s.input[s.target_positions[i]];
        EXPECT_GE(s.targets[i], static_cast<int>(kDesk.n_special()));
        masked += in == kDesk.mask_token_id;
        kept += in == s.targets[i];
      }
    }
  }
  ASSERT_GT(content, 10000u);
  EXPECT_NEAR(static_cast<double>(targets) / content, 0.15, 0.02);
  EXPECT_NEAR(static_cast<double>(masked) / targets, 0.8, 0.02);
  EXPECT_NEAR(static_cast<double>(kept) / targets, 0.1, 0.02);
  EXPECT_EQ(batches, build_mlm_batches(kDesk, corpora, opt, 8));
}

TEST(Mlm, SpecialTokensNeverCorrupted) {
  std::mt19937_64 rng(1);
  const std::vector<int> toks{kDesk.cls_token_id, 10, 11, 12, kDesk.sep_token_id, 13, 14};
  for (int i = 0; i < 200; ++i) {
    const MlmSequence s = corrupt_for_mlm(kDesk, toks, 0.9, rng);
    EXPECT_EQ(s.input[0], kDesk.cls_token_id);
    EXPECT_EQ(s.input[4], kDesk.sep_token_id);
    for (std::size_t p : s.target_positions) EXPECT_TRUE(p != 0 && p != 4);
  }
}

TEST(Paraphrase, AlwaysDiffersAndKeepsConcepts) {
  const Grammar& g = desk().grammar;
  std::mt19937_64 rng(4);
  for (const auto& s : gen_base_corpus(g, 300, 6)) {
    const std::vector<int> p = paraphrase(g, s, rng);
    EXPECT_NE(p, s);
    EXPECT_EQ(p.size(), s.size());
  }
}
