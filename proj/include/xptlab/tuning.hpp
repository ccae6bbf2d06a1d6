#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xptlab/encoder.hpp"
#include "xptlab/prompts.hpp"
#include "xptlab/synthlang.hpp"

namespace xptlab {

enum class TuneMode { kFineTune, kPromptTune };
const char* mode_name(TuneMode mode);  // "ft" / "pt"
TuneMode parse_mode(const std::string& name);

struct Hyper {
  TuneMode mode = TuneMode::kPromptTune;
  /// Base learning rate; 0 means "pick from lr_grid with select_lr".
  double lr = 0.0;
  std::vector<double> lr_grid{5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4};
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  std::size_t prompt_length = 16;
  /// Epochs per select_lr probe.
  std::size_t probe_epochs = 3;
  /// Per-language test accuracy is recorded every this many epochs and at
  /// the last epoch; 0 disables it.
  std::size_t test_eval_every = 1;

  void validate() const;
  friend bool operator==(const Hyper&, const Hyper&) = default;
};

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update of `params` in place. State is lazily
/// shaped on the first call.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr);

/// base_lr · (1 − step/total_steps); no warmup.
double linear_lr(std::size_t step, std::size_t total_steps, double base_lr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // running accuracy over the epoch's batches
  double val_accuracy = 0.0;
  std::map<int, double> test_accuracy;  // empty on epochs without a test pass
};

struct RunHistory {
  TuneMode mode = TuneMode::kPromptTune;
  double lr = 0.0;
  std::vector<EpochRecord> epochs;
  std::string backbone_checksum_before;
  std::string backbone_checksum_after;
};

enum class CheckpointKind { kPretrain, kFineTune, kPromptTune };
const char* kind_name(CheckpointKind kind);
CheckpointKind parse_kind(const std::string& name);

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kPretrain;
  ModelConfig model;
  EncoderParams backbone;
  std::optional<ClassifierHead> head;
  std::optional<DeepPrompt> prompt;
  std::optional<Hyper> hyper;
  std::optional<PromptConfig> prompt_config;
  std::uint64_t seed = 0;
  std::string config_hash;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Canonical little-endian bytes of every backbone tensor, in for_each order.
std::string backbone_bytes(const EncoderParams& params);
/// SHA-256 hex digest of backbone_bytes.
std::string backbone_checksum(const EncoderParams& params);

struct TrainResult {
  Checkpoint checkpoint;
  RunHistory history;
};

/// Trains on the lang-0 train split. Fine-tuning updates the backbone and a
/// fresh head; prompt tuning updates only a fresh DeepPrompt and head and
/// throws InvariantError if the backbone changed. `h.lr` must be positive.
TrainResult train(const ModelConfig& config, const EncoderParams& backbone, const MultilingualDataset& data,
                  const Hyper& h, const PromptConfig& prompt_config);

struct LrProbe {
  double lr = 0.0;
  double val_accuracy = 0.0;
  bool diverged = false;
};

struct LrSelection {
  double best_lr = 0.0;
  std::vector<LrProbe> probes;
};

/// Short probe run per grid point (same seed); argmax source validation
/// accuracy, ties to the smaller lr, diverged points excluded.
LrSelection select_lr(const ModelConfig& config, const EncoderParams& backbone, const MultilingualDataset& data,
                      const Hyper& h, const PromptConfig& prompt_config);

struct Predictions {
  std::vector<int> predicted;
  std::vector<int> labels;
};

Predictions predict(const ModelConfig& config, const EncoderParams& backbone, const ClassifierHead& head,
                    const DeepPrompt* prompt, std::span<const TaskSample* const> samples,
                    std::size_t batch_size = 64);

/// Accuracy per requested language on `split`. Unknown language or an empty
/// split -> InputError.
std::map<int, double> evaluate(const ModelConfig& config, const EncoderParams& backbone, const ClassifierHead& head,
                               const DeepPrompt* prompt, const MultilingualDataset& data, Split split,
                               std::span<const int> langs);

struct PretrainOptions {
  std::size_t epochs = 5;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  MlmOptions mlm;
  friend bool operator==(const PretrainOptions&, const PretrainOptions&) = default;
};

struct PretrainHistory {
  std::vector<double> epoch_loss;
};

/// Masked-language-model loss of one batch on a tape; rows without targets
/// contribute nothing.
Var mlm_loss(const ModelConfig& config, const EncoderVars& vars, const MlmBatch& batch);

/// MLM pretraining with Adam and linear decay; masks are redrawn each epoch.
PretrainHistory pretrain_mlm(const ModelConfig& config, EncoderParams& params,
                             const std::vector<LangCorpus>& corpora, const PretrainOptions& options);

}  // namespace xptlab
