#include "xptlab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <set>
#include <unordered_map>

#include <Eigen/Core>

#include "xptlab/parallel.hpp"

namespace xptlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Unit-normalized copy of the rows listed in `order`.
RowMat normalized_rows(const RepMatrix& m, std::span<const std::size_t> order) {
  const std::size_t d = m.reps.cols();
  RowMat out(static_cast<Eigen::Index>(order.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto src = m.reps.row(order[i]);
    double norm = 0.0;
    for (double v : src) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ContractError("cosine of a zero representation (pair id " +
                                         std::to_string(m.pair_ids[order[i]]) + ")");
    for (std::size_t c = 0; c < d; ++c) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = src[c] / norm;
  }
  return out;
}

}  // namespace

const char* source_name(RepSource s) {
  switch (s) {
    case RepSource::kFrozen: return "frozen";
    case RepSource::kFineTuned: return "finetuned";
    case RepSource::kPromptTuned: return "prompttuned";
  }
  return "?";
}

RepSource parse_source(const std::string& name) {
  for (RepSource s : {RepSource::kFrozen, RepSource::kFineTuned, RepSource::kPromptTuned}) {
    if (name == source_name(s)) return s;
  }
  throw InputError("unknown representation source '" + name + "'");
}

void RepMatrix::validate() const {
  if (reps.rank() != 2 || reps.rows() != pair_ids.size() || labels.size() != pair_ids.size()) {
    throw InputError("rep matrix: " + std::to_string(pair_ids.size()) + " pair ids, " +
                     std::to_string(labels.size()) + " labels, reps " + shape_str(reps.shape()));
  }
  if (!reps.all_finite()) throw InputError("rep matrix: non-finite representation");
  std::set<int> seen;
  for (int id : pair_ids) {
    if (!seen.insert(id).second) throw InputError("rep matrix: pair id " + std::to_string(id) + " repeated");
  }
}

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ContractError("cosine: lengths " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw ContractError("cosine: zero vector");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

double rep_change(const RepMatrix& before, const RepMatrix& after) {
  if (before.lang != after.lang) {
    throw InputError("rep_change: languages " + std::to_string(before.lang) + " and " + std::to_string(after.lang));
  }
  if (before.pair_ids != after.pair_ids) throw InputError("rep_change: pair ids do not match row for row");
  if (before.size() == 0) throw InputError("rep_change: empty representation matrices");
  CompensatedSum total;
  for (std::size_t i = 0; i < before.size(); ++i) total.add(cosine(before.reps.row(i), after.reps.row(i)));
  return 100.0 * total.value() / static_cast<double>(before.size());
}

std::optional<double> rel_diff(double pos_avg, double neg_avg) {
  if (neg_avg == 0.0) return std::nullopt;
  return (pos_avg - neg_avg) / neg_avg;
}

AlignmentStats alignment(const RepMatrix& src, const RepMatrix& tgt) {
  src.validate();
  tgt.validate();
  if (src.reps.cols() != tgt.reps.cols()) throw InputError("alignment: representation widths differ");
  const std::size_t n = src.size();
  if (n < 2) throw InputError("alignment: need at least two translation pairs");
  std::unordered_map<int, std::size_t> tgt_row;
  for (std::size_t i = 0; i < tgt.size(); ++i) tgt_row[tgt.pair_ids[i]] = i;
  if (tgt_row.size() != n) throw InputError("alignment: languages cover different pair-id sets");
  std::vector<std::size_t> src_order(n), tgt_order(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = tgt_row.find(src.pair_ids[i]);
    if (it == tgt_row.end()) {
      throw InputError("alignment: pair id " + std::to_string(src.pair_ids[i]) + " missing from language " +
                       std::to_string(tgt.lang));
    }
    src_order[i] = i;
    tgt_order[i] = it->second;
  }
  const RowMat a = normalized_rows(src, src_order);
  const RowMat b = normalized_rows(tgt, tgt_order);
  RowMat g(a.rows(), b.rows());
  g.noalias() = a * b.transpose();

  CompensatedSum pos, neg;
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      const double c = std::clamp(g(i, j), -1.0, 1.0);
      if (i == j) {
        pos.add(c);
      } else {
        neg.add(c);
      }
    }
  }
  AlignmentStats s;
  s.n_pos = n;
  s.n_neg = n * (n - 1);
  s.pos_avg = pos.value() / static_cast<double>(s.n_pos);
  s.neg_avg = neg.value() / static_cast<double>(s.n_neg);
  s.rel_diff = rel_diff(s.pos_avg, s.neg_avg);
  return s;
}

GapReport gap_report(const std::map<int, double>& scores, int source_lang) {
  const auto src = scores.find(source_lang);
  if (src == scores.end()) throw InputError("transfer_gap: no score for source language " + std::to_string(source_lang));
  if (scores.size() < 2) throw InputError("transfer_gap: need at least one non-source language");
  double total = 0.0;
  for (const auto& [lang, score] : scores) {
    if (lang != source_lang) total += score;
  }
  GapReport r;
  r.source_score = src->second;
  r.others_mean = total / static_cast<double>(scores.size() - 1);
  r.gap = r.source_score - r.others_mean;
  return r;
}

double transfer_gap(const std::map<int, double>& scores, int source_lang) {
  return gap_report(scores, source_lang).gap;
}

RepMatrix collect_reps(const ModelConfig& config, const EncoderParams& backbone, const DeepPrompt* prompt,
                       RepSource tag, const MultilingualDataset& data, int lang, std::size_t batch_size) {
  if (batch_size < 1) throw ContractError("collect_reps: batch_size must be >= 1");
  std::vector<const TaskSample*> samples = data.select(Split::kAnalysis, lang);
  if (samples.empty()) throw InputError("collect_reps: no analysis samples for language " + std::to_string(lang));
  std::ranges::sort(samples, {}, &TaskSample::pair_id);

  std::optional<PastKV> past;
  if (prompt && prompt->length > 0) past = as_past_kv(*prompt);

  RepMatrix m;
  m.lang = lang;
  m.source = tag;
  m.reps = Tensor({samples.size(), config.d_model});
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    const std::size_t end = std::min(samples.size(), i + batch_size);
    std::vector<std::vector<int>> seqs;
    for (std::size_t k = i; k < end; ++k) seqs.push_back(encode_pair(config, *samples[k]));
    const Batch batch = make_batch(config, seqs);
    Tape tape;
    const EncoderVars vars = bind(tape, backbone, false);
    std::optional<PastKVVars> pv;
    if (past) pv = bind(tape, *past, false);
    const Tensor& cls = encode(config, vars, batch, pv ? &*pv : nullptr).cls.value();
    std::ranges::copy(cls.data(), m.reps.row(i).begin());
  }
  for (const TaskSample* s : samples) {
    m.pair_ids.push_back(s->pair_id);
    m.labels.push_back(s->label);
  }
  m.validate();
  return m;
}

std::vector<RepMatrix> collect_reps(const ModelConfig& config, const EncoderParams& backbone,
                                    const DeepPrompt* prompt, RepSource tag, const MultilingualDataset& data,
                                    std::span<const int> langs) {
  std::vector<RepMatrix> out(langs.size());
  parallel_for(langs.size(), [&](std::size_t i) {
    out[i] = collect_reps(config, backbone, prompt, tag, data, langs[i]);
  });
  return out;
}

}  // namespace xptlab
