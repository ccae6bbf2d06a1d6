#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "xptlab/config.hpp"
#include "xptlab/geometry.hpp"
#include "xptlab/io.hpp"
#include "xptlab/projection.hpp"
#include "xptlab/tuning.hpp"

namespace xptlab {

/// Where every command reads and writes under one experiment root.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path pretrain_dir() const { return root / "pretrain"; }
  std::filesystem::path pretrain_checkpoint() const { return pretrain_dir() / "backbone.ckpt"; }
  std::filesystem::path runs_dir() const { return root / "runs"; }
  std::filesystem::path run_dir(TuneMode mode, std::uint64_t seed) const;
  std::filesystem::path run_checkpoint(TuneMode mode, std::uint64_t seed) const { return run_dir(mode, seed) / "model.ckpt"; }
  std::filesystem::path lr_cache(TuneMode mode) const;
  std::filesystem::path analysis_dir(std::uint64_t seed) const;
  std::filesystem::path report_dir() const { return root / "report"; }
};

struct GenSummary {
  std::map<std::string, std::size_t> lines;  // file name -> line count
};

/// Writes the dataset files. A non-empty data directory is refused unless
/// `force`, in which case it is cleared first.
GenSummary cmd_gen(const ExperimentConfig& config, const Layout& layout, bool force, std::ostream& log);

struct PretrainSummary {
  PretrainHistory history;
  std::string backbone_sha256;
};

PretrainSummary cmd_pretrain(const ExperimentConfig& config, const Layout& layout, std::ostream& log);

struct TuneSummary {
  TrainResult result;
  LrSelection selection;  // probes empty when the lr came from the cache or the config
  bool lr_from_cache = false;
  std::string pretrain_backbone_sha256;
};

/// Tunes from the pretrain checkpoint. With hyper.lr == 0 the lr is taken
/// from the per-mode cache or selected once (probe seed = seeds.front())
/// and cached. Prompt mode re-reads the written checkpoint and throws
/// InvariantError unless its backbone bytes equal the pretrain backbone's.
TuneSummary cmd_tune(const ExperimentConfig& config, const Layout& layout, TuneMode mode, std::uint64_t seed,
                     std::ostream& log);

struct EvalSummary {
  std::filesystem::path checkpoint;
  bool fresh_head = false;  // the checkpoint had no head; a seeded untrained one was used
  std::map<int, double> accuracy;
};

/// Test-split accuracy for every language. Without an explicit checkpoint
/// the run checkpoint for (mode, seed) is used, or the pretrain checkpoint
/// when mode is empty.
EvalSummary cmd_eval(const ExperimentConfig& config, const Layout& layout, std::optional<TuneMode> mode,
                     std::uint64_t seed, const std::optional<std::filesystem::path>& checkpoint, std::ostream& log);

struct ProjectionSummary {
  RepSource source;
  TsneResult tsne;
  std::vector<int> labels;
  std::vector<int> langs;
  std::vector<Boundary> boundaries;
  AlignmentScore score;
};

struct AnalysisReport {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<MetricRow> rows;
  std::vector<ProjectionSummary> projections;  // frozen, finetuned, prompttuned
};

/// Source-anchored language pairs (0, l) used by the alignment tables.
std::vector<std::pair<int, int>> alignment_pairs(std::span<const int> langs);

/// All metrics for one seed from explicit checkpoints. Throws InputError
/// when the checkpoints disagree on the model configuration.
AnalysisReport analyze_checkpoints(const ExperimentConfig& config, const MultilingualDataset& data,
                                   const Checkpoint& frozen, const Checkpoint& ft, const Checkpoint& pt,
                                   std::uint64_t seed, bool run_projection, std::ostream& log);

/// analyze_checkpoints on the layout's checkpoints; writes metrics.csv and
/// the scatter SVGs into analysis_dir(seed).
AnalysisReport cmd_analyze(const ExperimentConfig& config, const Layout& layout, std::uint64_t seed, std::ostream& log);

struct ReportSummary {
  std::vector<MetricRow> rows;
  std::vector<SummaryRow> summary;
  std::vector<std::uint64_t> seeds;
};

/// Concatenates every analysis_dir(seed)/metrics.csv for the configured
/// seeds into report/results.csv and report/summary.csv.
ReportSummary cmd_report(const ExperimentConfig& config, const Layout& layout, std::ostream& log);

}  // namespace xptlab
