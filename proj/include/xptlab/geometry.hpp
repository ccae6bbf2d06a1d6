#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xptlab/prompts.hpp"
#include "xptlab/synthlang.hpp"
#include "xptlab/tensor.hpp"

namespace xptlab {

enum class RepSource { kFrozen, kFineTuned, kPromptTuned };
const char* source_name(RepSource s);  // "frozen" / "finetuned" / "prompttuned"
RepSource parse_source(const std::string& name);

/// CLS representations of one language, one row per sample.
struct RepMatrix {
  int lang = 0;
  Tensor reps;  // [n × d_model]
  std::vector<int> pair_ids;
  std::vector<int> labels;
  RepSource source = RepSource::kFrozen;

  std::size_t size() const { return pair_ids.size(); }
  /// Throws InputError on ragged fields, non-finite rows or repeated pair ids.
  void validate() const;
  friend bool operator==(const RepMatrix&, const RepMatrix&) = default;
};

/// u·v / (|u| |v|). Zero vectors or length mismatch -> ContractError.
double cosine(std::span<const double> u, std::span<const double> v);

/// Mean per-sample cosine between matched rows, in percent. Rows must agree
/// on language and pair id; otherwise InputError.
double rep_change(const RepMatrix& before, const RepMatrix& after);

struct AlignmentStats {
  double pos_avg = 0.0;  // mean cosine over translation pairs
  double neg_avg = 0.0;  // mean cosine over cross-language pairs with different pair ids
  std::optional<double> rel_diff;  // (pos - neg) / neg; empty when neg == 0
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

/// (pos - neg) / neg as a fraction, empty when neg == 0.
std::optional<double> rel_diff(double pos_avg, double neg_avg);

/// Translation-pair alignment between two languages. Rows are matched by
/// pair id, so row order within either matrix does not matter. Negatives
/// are all n(n-1) ordered cross-language pairs with differing pair ids.
AlignmentStats alignment(const RepMatrix& src, const RepMatrix& tgt);

struct GapReport {
  double source_score = 0.0;
  double others_mean = 0.0;
  double gap = 0.0;
};

/// scores[source] minus the mean over every other language.
GapReport gap_report(const std::map<int, double>& scores, int source_lang);
double transfer_gap(const std::map<int, double>& scores, int source_lang);

/// CLS representations of `lang`'s analysis split in ascending pair-id order.
/// With a prompt the prefix is attached to the forward pass.
RepMatrix collect_reps(const ModelConfig& config, const EncoderParams& backbone, const DeepPrompt* prompt,
                       RepSource tag, const MultilingualDataset& data, int lang, std::size_t batch_size = 64);

/// collect_reps for several languages, fanned out over thread_budget()
/// workers. Output order follows `langs`.
std::vector<RepMatrix> collect_reps(const ModelConfig& config, const EncoderParams& backbone,
                                    const DeepPrompt* prompt, RepSource tag, const MultilingualDataset& data,
                                    std::span<const int> langs);

}  // namespace xptlab
