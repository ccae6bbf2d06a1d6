#include "xptlab/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "json_codec.hpp"
#include "xptlab/digest.hpp"
#include "xptlab/prompts.hpp"

namespace xptlab {

using codec::json;

namespace {

constexpr std::uint64_t kInitSalt = 0x1417;
constexpr std::uint64_t kEvalHeadSalt = 0xe7a1;
constexpr std::uint64_t kLangCorpusSalt = 0xc0;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const char* what) {
  if (!std::filesystem::exists(path)) {
    throw InputError(std::string(what) + " checkpoint " + path.string() + " does not exist");
  }
  return read_checkpoint(path);
}

void require_model(const Checkpoint& ck, const ModelConfig& model, const std::string& what) {
  if (!(ck.model == model)) throw InputError(what + " was written for a different model configuration");
}

DatasetFiles load_dataset(const Layout& layout) {
  if (!std::filesystem::exists(layout.data_dir() / "manifest.json")) {
    throw InputError("no dataset under " + layout.data_dir().string() + "; run `xptlab gen` first");
  }
  return read_dataset(layout.data_dir());
}

std::string lang_label(int lang) { return std::to_string(lang); }
std::string pair_label(int a, int b) { return std::to_string(a) + "-" + std::to_string(b); }

const char* method_of(RepSource s) {
  switch (s) {
    case RepSource::kFrozen: return "frozen";
    case RepSource::kFineTuned: return "ft";
    case RepSource::kPromptTuned: return "pt";
  }
  return "?";
}

// First `per_lang` rows of every language (0 keeps all), stacked in language order.
struct Stacked {
  Tensor x;
  std::vector<int> labels;
  std::vector<int> langs;
};

Stacked stack(const std::vector<RepMatrix>& reps, std::size_t per_lang) {
  Stacked s;
  std::size_t total = 0;
  const std::size_t d = reps.front().reps.cols();
  for (const RepMatrix& r : reps) total += per_lang ? std::min(per_lang, r.size()) : r.size();
  s.x = Tensor({total, d});
  std::size_t row = 0;
  for (const RepMatrix& r : reps) {
    const std::size_t take = per_lang ? std::min(per_lang, r.size()) : r.size();
    for (std::size_t i = 0; i < take; ++i, ++row) {
      std::ranges::copy(r.reps.row(i), s.x.row(row).begin());
      s.labels.push_back(r.labels[i]);
      s.langs.push_back(r.lang);
    }
  }
  return s;
}

ProjectionSummary project(const ExperimentConfig& config, const std::vector<RepMatrix>& reps, std::span<const int> langs) {
  const Stacked s = stack(reps, config.analysis.tsne_per_lang);
  ProjectionSummary out;
  out.source = reps.front().source;
  out.tsne = tsne(s.x, config.analysis.tsne);
  out.labels = s.labels;
  out.langs = s.langs;
  std::vector<Tensor> points;
  std::vector<std::vector<int>> labels;
  for (int lang : langs) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < s.langs.size(); ++i) {
      if (s.langs[i] == lang) rows.push_back(i);
    }
    Tensor y({rows.size(), 2});
    std::vector<int> lab;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      y(k, 0) = out.tsne.y(rows[k], 0);
      y(k, 1) = out.tsne.y(rows[k], 1);
      lab.push_back(s.labels[rows[k]]);
    }
    out.boundaries.push_back(fit_logistic(y, lab, config.analysis.logistic_l2, lang).boundary);
    points.push_back(std::move(y));
    labels.push_back(std::move(lab));
  }
  out.score = boundary_alignment(out.boundaries, points, labels);
  return out;
}

ScatterPanel panel(const ProjectionSummary& p, std::string title) {
  return {std::move(title), p.tsne.y, p.labels, p.langs, p.boundaries};
}

}  // namespace

// ---- layout -----------------------------------------------------------------------

std::filesystem::path Layout::run_dir(TuneMode mode, std::uint64_t seed) const {
  return runs_dir() / fmt::format("{}-seed{}", mode_name(mode), seed);
}

std::filesystem::path Layout::lr_cache(TuneMode mode) const {
  return runs_dir() / fmt::format("lr-{}.json", mode_name(mode));
}

std::filesystem::path Layout::analysis_dir(std::uint64_t seed) const {
  return root / "analysis" / fmt::format("seed{}", seed);
}

// ---- gen --------------------------------------------------------------------------

GenSummary cmd_gen(const ExperimentConfig& config, const Layout& layout, bool force, std::ostream& log) {
  config.validate();
  const std::filesystem::path dir = layout.data_dir();
  if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir)) {
    if (!force) throw InputError(dir.string() + " is not empty; pass --force to overwrite");
    std::error_code ec;
    std::filesystem::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
  }
  ensure_dir(dir);

  const DataConfig& d = config.data;
  const Grammar grammar(config.model.vocab_size, config.model.n_special());
  std::vector<LangSpec> languages;
  for (std::size_t l = 0; l < d.n_languages; ++l) {
    languages.push_back(make_language(grammar, static_cast<int>(l), d.difficulty(l), d.shared_fraction, d.language_seed));
  }
  const TaskSizes sizes = config.task_sizes();
  DatasetFiles files;
  files.task = build_pair_task(grammar, gen_base_corpus(grammar, sizes.base_sentences(), d.grammar_seed), languages,
                               sizes, d.negatives, d.task_seed);
  const auto pre_base = gen_base_corpus(grammar, d.pretrain_sentences, d.corpus_seed);
  for (const LangSpec& spec : languages) {
    files.pretrain.push_back(make_lang_corpus(grammar, pre_base, spec, d.paraphrase_rate, d.noise_rate,
                                              derive_seed(d.corpus_seed, kLangCorpusSalt)));
  }
  write_dataset(dir, files, config);

  GenSummary out;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest, Split::kAnalysis}) {
    out.lines[std::string(split_name(s)) + ".jsonl"] = static_cast<std::size_t>(
        std::ranges::count_if(files.task.samples, [&](const TaskSample& t) { return t.split == s; }));
  }
  std::size_t pre = 0;
  for (const LangCorpus& c : files.pretrain) pre += c.pairs.size();
  out.lines["pretrain.jsonl"] = pre;
  for (const auto& [file, n] : out.lines) fmt::print(log, "gen: {} {} lines\n", file, n);
  return out;
}

// ---- pretrain ---------------------------------------------------------------------

PretrainSummary cmd_pretrain(const ExperimentConfig& config, const Layout& layout, std::ostream& log) {
  config.validate();
  const DatasetFiles files = load_dataset(layout);
  Stopwatch clock;
  Checkpoint ck;
  ck.kind = CheckpointKind::kPretrain;
  ck.model = config.model;
  ck.seed = config.pretrain.seed;
  ck.config_hash = config_hash(config);
  ck.backbone = init_encoder(config.model, derive_seed(config.pretrain.seed, kInitSalt));
  PretrainSummary out;
  out.history = pretrain_mlm(config.model, ck.backbone, files.pretrain, config.pretrain);
  for (std::size_t e = 0; e < out.history.epoch_loss.size(); ++e) {
    fmt::print(log, "pretrain: epoch {} mlm loss {:.4f}\n", e + 1, out.history.epoch_loss[e]);
  }
  ensure_dir(layout.pretrain_dir());
  write_checkpoint(layout.pretrain_checkpoint(), ck);
  out.backbone_sha256 = backbone_checksum(ck.backbone);
  const json hist = {{"config_hash", ck.config_hash},
                     {"epoch_loss", out.history.epoch_loss},
                     {"backbone_sha256", out.backbone_sha256}};
  write_file(layout.pretrain_dir() / "history.json", hist.dump(2) + "\n");
  fmt::print(log, "pretrain: wrote {} ({:.1f}s)\n", layout.pretrain_checkpoint().string(), clock.seconds());
  return out;
}

// ---- tune -------------------------------------------------------------------------

TuneSummary cmd_tune(const ExperimentConfig& config, const Layout& layout, TuneMode mode, std::uint64_t seed,
                     std::ostream& log) {
  config.validate();
  const DatasetFiles files = load_dataset(layout);
  const Checkpoint pre = load_checkpoint(layout.pretrain_checkpoint(), "pretrain");
  require_model(pre, config.model, "pretrain checkpoint");
  const std::string pre_bytes = backbone_bytes(pre.backbone);
  const std::string hash = config_hash(config);
  // The test-accuracy schedule does not influence training, so it is left
  // out of the learning-rate cache key.
  ExperimentConfig selection_config = config;
  selection_config.hyper.test_eval_every = ExperimentConfig{}.hyper.test_eval_every;
  const std::string selection_hash = config_hash(selection_config);

  TuneSummary out;
  out.pretrain_backbone_sha256 = sha256_hex(pre_bytes);
  Hyper h = config.hyper;
  h.mode = mode;
  h.seed = seed;
  h.prompt_length = config.prompt.length;
  ensure_dir(layout.runs_dir());

  if (h.lr == 0.0) {
    const std::filesystem::path cache = layout.lr_cache(mode);
    if (std::filesystem::exists(cache)) {
      try {
        const json j = json::parse(read_file(cache));
        if (j.at("config_hash") == selection_hash && j.at("backbone_sha256") == out.pretrain_backbone_sha256) {
          h.lr = j.at("best_lr").get<double>();
          out.lr_from_cache = true;
        }
      } catch (const json::exception&) {
        // A damaged cache is just recomputed.
      }
    }
    if (!out.lr_from_cache) {
      Hyper probe = h;
      probe.seed = config.seeds.front();
      Stopwatch clock;
      out.selection = select_lr(config.model, pre.backbone, files.task, probe, config.prompt);
      json probes = json::array();
      for (const LrProbe& p : out.selection.probes) {
        fmt::print(log, "tune[{}]: probe lr {:g} val {:.3f}{}\n", mode_name(mode), p.lr, p.val_accuracy,
                   p.diverged ? " (diverged)" : "");
        probes.push_back({{"lr", p.lr}, {"val_accuracy", p.val_accuracy}, {"diverged", p.diverged}});
      }
      if (out.selection.best_lr == 0.0) throw InvariantError("every learning-rate probe diverged");
      h.lr = out.selection.best_lr;
      const json j = {{"config_hash", selection_hash},
                      {"backbone_sha256", out.pretrain_backbone_sha256},
                      {"mode", mode_name(mode)},
                      {"probe_seed", probe.seed},
                      {"probe_epochs", probe.probe_epochs},
                      {"best_lr", h.lr},
                      {"probes", std::move(probes)}};
      write_file(cache, j.dump(2) + "\n");
      fmt::print(log, "tune[{}]: selected lr {:g} ({:.1f}s)\n", mode_name(mode), h.lr, clock.seconds());
    } else {
      fmt::print(log, "tune[{}]: cached lr {:g}\n", mode_name(mode), h.lr);
    }
  }

  Stopwatch clock;
  out.result = train(config.model, pre.backbone, files.task, h, config.prompt);
  out.result.checkpoint.config_hash = hash;
  for (const EpochRecord& e : out.result.history.epochs) {
    std::string test;
    for (const auto& [lang, acc] : e.test_accuracy) test += fmt::format(" {}:{:.3f}", lang, acc);
    fmt::print(log, "tune[{}] seed {}: epoch {} loss {:.4f} train {:.3f} val {:.3f}{}\n", mode_name(mode), seed,
               e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy, test.empty() ? "" : " test" + test);
  }

  const std::filesystem::path dir = layout.run_dir(mode, seed);
  ensure_dir(dir);
  write_checkpoint(dir / "model.ckpt", out.result.checkpoint);
  write_file(dir / "history.json", history_to_json(out.result.history));

  json freeze = nullptr;
  if (mode == TuneMode::kPromptTune) {
    const Checkpoint written = read_checkpoint(dir / "model.ckpt");
    const std::string after = backbone_bytes(written.backbone);
    if (after != pre_bytes) {
      throw InvariantError("prompt tuning changed the frozen backbone: " + out.pretrain_backbone_sha256 + " -> " +
                           sha256_hex(after));
    }
    freeze = {{"pretrain_backbone_sha256", out.pretrain_backbone_sha256},
              {"tuned_backbone_sha256", sha256_hex(after)},
              {"identical", true}};
  }
  const json run = {{"mode", mode_name(mode)},
                    {"seed", seed},
                    {"lr", h.lr},
                    {"lr_from_cache", out.lr_from_cache},
                    {"config_hash", hash},
                    {"frozen_backbone_check", std::move(freeze)}};
  write_file(dir / "run.json", run.dump(2) + "\n");
  fmt::print(log, "tune[{}] seed {}: wrote {} ({:.1f}s)\n", mode_name(mode), seed, dir.string(), clock.seconds());
  return out;
}

// ---- eval -------------------------------------------------------------------------

EvalSummary cmd_eval(const ExperimentConfig& config, const Layout& layout, std::optional<TuneMode> mode,
                     std::uint64_t seed, const std::optional<std::filesystem::path>& checkpoint, std::ostream& log) {
  config.validate();
  const DatasetFiles files = load_dataset(layout);
  EvalSummary out;
  out.checkpoint = checkpoint ? *checkpoint : mode ? layout.run_checkpoint(*mode, seed) : layout.pretrain_checkpoint();
  const Checkpoint ck = load_checkpoint(out.checkpoint, "evaluation");
  require_model(ck, config.model, out.checkpoint.string());
  ClassifierHead head;
  if (ck.head) {
    head = *ck.head;
  } else {
    head = init_head(config.model, derive_seed(seed, kEvalHeadSalt));
    out.fresh_head = true;
  }
  const std::vector<int> langs = files.task.language_ids();
  out.accuracy = evaluate(config.model, ck.backbone, head, ck.prompt ? &*ck.prompt : nullptr, files.task, Split::kTest,
                          langs);
  for (const auto& [lang, acc] : out.accuracy) {
    fmt::print(log, "eval: lang {} accuracy {:.4f}{}\n", lang, acc, out.fresh_head ? " (untrained head)" : "");
  }
  return out;
}

// ---- analyze ----------------------------------------------------------------------

std::vector<std::pair<int, int>> alignment_pairs(std::span<const int> langs) {
  std::vector<std::pair<int, int>> out;
  for (int l : langs) {
    if (l != 0) out.emplace_back(0, l);
  }
  return out;
}

AnalysisReport analyze_checkpoints(const ExperimentConfig& config, const MultilingualDataset& data,
                                   const Checkpoint& frozen, const Checkpoint& ft, const Checkpoint& pt,
                                   std::uint64_t seed, bool run_projection, std::ostream& log) {
  const ModelConfig& model = frozen.model;
  if (!(ft.model == model) || !(pt.model == model)) {
    throw InputError("analyze: checkpoints disagree on the model configuration");
  }
  if (!ft.head || !pt.head) throw InputError("analyze: tuned checkpoints must carry a classifier head");
  if (!pt.prompt) throw InputError("analyze: the prompt-tuned checkpoint carries no prompt");

  AnalysisReport report;
  report.seed = seed;
  report.config_hash = config_hash(config);
  auto add = [&](const std::string& metric, const char* method, const std::string& key, double value) {
    report.rows.push_back({metric, method, key, seed, value});
  };

  Stopwatch clock;
  const std::vector<int> langs = data.language_ids();
  const std::vector<RepMatrix> before = collect_reps(model, frozen.backbone, nullptr, RepSource::kFrozen, data, langs);
  const std::vector<RepMatrix> after_ft = collect_reps(model, ft.backbone, nullptr, RepSource::kFineTuned, data, langs);
  const std::vector<RepMatrix> after_pt =
      collect_reps(model, pt.backbone, &*pt.prompt, RepSource::kPromptTuned, data, langs);
  fmt::print(log, "analyze seed {}: representations ({:.1f}s)\n", seed, clock.seconds());

  const std::size_t backbone_count = backbone_parameter_count(model);
  struct Tuned {
    const char* method;
    const Checkpoint* ck;
    const std::vector<RepMatrix>* reps;
  };
  for (const Tuned& t : {Tuned{"ft", &ft, &after_ft}, Tuned{"pt", &pt, &after_pt}}) {
    for (std::size_t i = 0; i < langs.size(); ++i) {
      add("rep_change_pct", t.method, lang_label(langs[i]), rep_change(before[i], (*t.reps)[i]));
    }
    const std::map<int, double> acc = evaluate(model, t.ck->backbone, *t.ck->head,
                                               t.ck->prompt ? &*t.ck->prompt : nullptr, data, Split::kTest, langs);
    for (const auto& [lang, a] : acc) add("test_acc_pct", t.method, lang_label(lang), 100.0 * a);
    std::map<int, double> pct;
    for (const auto& [lang, a] : acc) pct[lang] = 100.0 * a;
    const GapReport gap = gap_report(pct, 0);
    add("gap_pct", t.method, "all", gap.gap);
    const std::size_t head_count = t.ck->head->parameter_count();
    const double ratio = t.ck->prompt ? tuned_param_ratio(t.ck->prompt->parameter_count(), head_count, backbone_count)
                                      : 1.0;
    add("tuned_param_ratio_pct", t.method, "all", 100.0 * ratio);
    if (t.ck->prompt) {
      add("prompt_param_ratio_pct", t.method, "all",
          100.0 * tuned_param_ratio(t.ck->prompt->parameter_count(), 0, backbone_count));
    }
    if (t.ck->hyper) add("lr", t.method, "all", t.ck->hyper->lr);
  }

  auto index_of = [&](int lang) {
    return static_cast<std::size_t>(std::ranges::find(langs, lang) - langs.begin());
  };
  struct Reps {
    const char* method;
    const std::vector<RepMatrix>* reps;
  };
  for (const Reps& r : {Reps{"frozen", &before}, Reps{"ft", &after_ft}, Reps{"pt", &after_pt}}) {
    for (const auto& [a, b] : alignment_pairs(langs)) {
      const AlignmentStats s = alignment((*r.reps)[index_of(a)], (*r.reps)[index_of(b)]);
      add("align_pos_pct", r.method, pair_label(a, b), 100.0 * s.pos_avg);
      add("align_neg_pct", r.method, pair_label(a, b), 100.0 * s.neg_avg);
      if (s.rel_diff) add("rel_diff_pct", r.method, pair_label(a, b), 100.0 * *s.rel_diff);
    }
  }
  fmt::print(log, "analyze seed {}: metrics ({:.1f}s)\n", seed, clock.seconds());

  if (run_projection) {
    for (const std::vector<RepMatrix>* reps : {&before, &after_ft, &after_pt}) {
      ProjectionSummary p = project(config, *reps, langs);
      const char* method = method_of(p.source);
      add("boundary_mean_angle_deg", method, "all", p.score.mean_angle * 180.0 / std::numbers::pi);
      add("boundary_mean_cross_acc_pct", method, "all", 100.0 * p.score.mean_cross_accuracy);
      if (!p.tsne.kl.empty()) add("tsne_final_kl", method, "all", p.tsne.kl.back());
      fmt::print(log, "analyze seed {}: t-SNE {} ({:.1f}s)\n", seed, method, clock.seconds());
      report.projections.push_back(std::move(p));
    }
  }
  return report;
}

AnalysisReport cmd_analyze(const ExperimentConfig& config, const Layout& layout, std::uint64_t seed,
                           std::ostream& log) {
  config.validate();
  const DatasetFiles files = load_dataset(layout);
  const Checkpoint frozen = load_checkpoint(layout.pretrain_checkpoint(), "pretrain");
  const Checkpoint ft = load_checkpoint(layout.run_checkpoint(TuneMode::kFineTune, seed), "fine-tuned");
  const Checkpoint pt = load_checkpoint(layout.run_checkpoint(TuneMode::kPromptTune, seed), "prompt-tuned");
  require_model(frozen, config.model, "pretrain checkpoint");
  AnalysisReport report = analyze_checkpoints(config, files.task, frozen, ft, pt, seed, true, log);

  const std::filesystem::path dir = layout.analysis_dir(seed);
  ensure_dir(dir);
  write_file(dir / "metrics.csv", metrics_to_csv(report.rows));
  const ProjectionSummary& p_frozen = report.projections[0];
  const ProjectionSummary& p_ft = report.projections[1];
  const ProjectionSummary& p_pt = report.projections[2];
  const std::vector<ScatterPanel> panels{panel(p_frozen, "before fine-tuning"), panel(p_frozen, "before prompt tuning"),
                                         panel(p_ft, "after fine-tuning"), panel(p_pt, "after prompt tuning")};
  const char* names[] = {"tsne_before_ft.svg", "tsne_before_pt.svg", "tsne_after_ft.svg", "tsne_after_pt.svg"};
  for (std::size_t i = 0; i < panels.size(); ++i) emit_scatter(std::span(&panels[i], 1), dir / names[i]);
  emit_scatter(panels, dir / "tsne_grid.svg");

  const json meta = {{"seed", seed}, {"config_hash", report.config_hash}};
  write_file(dir / "analysis.json", meta.dump(2) + "\n");
  fmt::print(log, "analyze seed {}: wrote {}\n", seed, dir.string());
  return report;
}

// ---- report -----------------------------------------------------------------------

ReportSummary cmd_report(const ExperimentConfig& config, const Layout& layout, std::ostream& log) {
  config.validate();
  ReportSummary out;
  std::vector<std::uint64_t> missing;
  for (std::uint64_t seed : config.seeds) {
    const std::filesystem::path file = layout.analysis_dir(seed) / "metrics.csv";
    if (!std::filesystem::exists(file)) {
      missing.push_back(seed);
      continue;
    }
    std::vector<MetricRow> rows = metrics_from_csv(read_file(file));
    out.rows.insert(out.rows.end(), rows.begin(), rows.end());
    out.seeds.push_back(seed);
  }
  if (out.seeds.empty()) throw InputError("report: no analysis results found; run `xptlab analyze` first");
  for (std::uint64_t s : missing) fmt::print(log, "report: seed {} has no analysis yet, skipped\n", s);
  out.summary = summarize(out.rows);
  ensure_dir(layout.report_dir());
  write_file(layout.report_dir() / "results.csv", metrics_to_csv(out.rows));
  write_file(layout.report_dir() / "summary.csv", summary_to_csv(out.summary));
  const json meta = {{"config_hash", config_hash(config)}, {"seeds", out.seeds}};
  write_file(layout.report_dir() / "report.json", meta.dump(2) + "\n");
  fmt::print(log, "report: {} rows over {} seeds -> {}\n", out.rows.size(), out.seeds.size(),
             layout.report_dir().string());
  return out;
}

}  // namespace xptlab
