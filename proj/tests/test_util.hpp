#pragma once

#include <cstdint>
#include <random>

#include "xptlab/encoder.hpp"
#include "xptlab/synthlang.hpp"
#include "xptlab/tensor.hpp"

namespace xptlab::testing {

inline Tensor uniform(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline ModelConfig tiny_model(std::size_t layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 64;
  c.max_seq = 32;
  return c;
}

inline std::vector<int> random_sequence(const ModelConfig& c, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(static_cast<int>(c.n_special()), static_cast<int>(c.vocab_size) - 1);
  std::vector<int> s{c.cls_token_id};
  while (s.size() < len) s.push_back(tok(rng));
  return s;
}

/// A small two-language pair task for tiny_model().
inline MultilingualDataset tiny_dataset(const ModelConfig& c, std::size_t train = 64, std::uint64_t seed = 1) {
  const Grammar g(c.vocab_size, c.n_special());
  TaskSizes sizes;
  sizes.train = train;
  sizes.val = 32;
  sizes.test_per_lang = 32;
  sizes.analysis_per_lang = 16;
  const std::vector<LangSpec> langs{make_language(g, 0, 0.0, 0.2, seed), make_language(g, 1, 0.1, 0.2, seed)};
  return build_pair_task(g, gen_base_corpus(g, sizes.base_sentences(), seed + 1), langs, sizes, NegativeKind::kNoisy,
                         seed + 2);
}

}  // namespace xptlab::testing
