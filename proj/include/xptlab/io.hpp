#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "xptlab/config.hpp"
#include "xptlab/synthlang.hpp"
#include "xptlab/tuning.hpp"

namespace xptlab {

// ---- checkpoints ------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "XPTLAB01";
inline constexpr int kCheckpointVersion = 1;

/// magic, u64 LE manifest length, JSON manifest, f64 LE payload in manifest
/// order (backbone, then head, then prompt keys/values per layer).
std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws BadMagicError, VersionError or ChecksumError for damaged input,
/// IoError for structural problems.
Checkpoint deserialize_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// ---- datasets ---------------------------------------------------------------------

/// One sample as a single JSON line, keys in wire order, no trailing newline.
std::string sample_to_jsonl(const TaskSample& s);
TaskSample sample_from_jsonl(std::string_view line);

struct DatasetFiles {
  MultilingualDataset task;
  std::vector<LangCorpus> pretrain;
};

/// Writes {train,val,test,analysis}.jsonl, pretrain.jsonl, languages.json
/// and manifest.json into `dir` (which must exist).
void write_dataset(const std::filesystem::path& dir, const DatasetFiles& data, const ExperimentConfig& config);
/// Reads everything back and checks the manifest counts against the files.
DatasetFiles read_dataset(const std::filesystem::path& dir);

// ---- small files ------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// Per-epoch history as JSON.
std::string history_to_json(const RunHistory& h);

// ---- reports ----------------------------------------------------------------------

struct MetricRow {
  std::string metric;
  std::string method;
  std::string lang_or_pair;
  std::uint64_t seed = 0;
  double value = 0.0;
  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

/// Long-format CSV, header metric,method,lang_or_pair,seed,value. Values use
/// 17 significant digits so parsing restores them exactly.
std::string metrics_to_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> metrics_from_csv(std::string_view text);

struct SummaryRow {
  std::string metric;
  std::string method;
  std::string lang_or_pair;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 when n == 1
};

/// Groups by (metric, method, lang_or_pair) in first-seen order.
std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows);
std::string summary_to_csv(const std::vector<SummaryRow>& rows);

}  // namespace xptlab
