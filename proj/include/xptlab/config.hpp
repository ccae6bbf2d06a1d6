#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xptlab/encoder.hpp"
#include "xptlab/projection.hpp"
#include "xptlab/prompts.hpp"
#include "xptlab/synthlang.hpp"
#include "xptlab/tuning.hpp"

namespace xptlab {

struct DataConfig {
  std::size_t n_languages = 4;
  /// Per-language difficulty, lang 0 first; empty means 0.1 · lang_id.
  std::vector<double> difficulties;
  double shared_fraction = 0.2;
  std::size_t train = 2000;
  std::size_t val = 500;
  std::size_t test_per_lang = 1000;
  NegativeKind negatives = NegativeKind::kNoisy;
  std::size_t pretrain_sentences = 4000;
  double paraphrase_rate = 0.5;
  double noise_rate = 0.1;
  std::uint64_t grammar_seed = 11;
  std::uint64_t language_seed = 7;
  std::uint64_t task_seed = 19;
  std::uint64_t corpus_seed = 13;

  double difficulty(std::size_t lang) const;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct AnalysisConfig {
  std::size_t n_analysis = 1000;
  /// Analysis samples per language fed to t-SNE (lowest pair ids first);
  /// 0 means all. Exact t-SNE is quadratic, so the default keeps n at 1000.
  std::size_t tsne_per_lang = 250;
  double logistic_l2 = 1e-3;
  TsneConfig tsne;
  friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

struct ExperimentConfig {
  ModelConfig model;
  PromptConfig prompt;
  Hyper hyper;
  PretrainOptions pretrain;
  DataConfig data;
  AnalysisConfig analysis;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir = "exp";

  TaskSizes task_sizes() const;
  /// Throws InputError on any inconsistency between sections.
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

const char* negatives_name(NegativeKind k);  // "strict" / "noisy"
NegativeKind parse_negatives(const std::string& name);

/// Canonical JSON text (fixed key order, two-space indent, trailing newline).
std::string config_to_json(const ExperimentConfig& config);
/// Missing keys take their defaults; unknown keys -> InputError.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// SHA-256 of config_to_json, first 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

}  // namespace xptlab
