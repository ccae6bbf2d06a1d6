#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <json.hpp>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

#include "test_util.hpp"
#include "xptlab/commands.hpp"
#include "xptlab/error.hpp"
#include "xptlab/io.hpp"

using namespace xptlab;
using xptlab::testing::tiny_dataset;
using xptlab::testing::tiny_model;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("xptlab_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

ExperimentConfig tiny_experiment(const fs::path& root) {
  ExperimentConfig c;
  c.model = tiny_model();
  c.prompt.length = 2;
  c.hyper.prompt_length = 2;
  c.hyper.lr = 1e-2;
  c.hyper.epochs = 2;
  c.hyper.batch_size = 16;
  c.pretrain.epochs = 1;
  c.pretrain.mlm.batch_size = 16;
  c.data.n_languages = 3;
  c.data.train = 64;
  c.data.val = 32;
  c.data.test_per_lang = 400;
  c.data.pretrain_sentences = 100;
  c.analysis.n_analysis = 40;
  c.analysis.tsne_per_lang = 20;
  c.analysis.tsne.perplexity = 5.0;
  c.analysis.tsne.iterations = 250;
  c.seeds = {0, 1};
  c.output_dir = root.string();
  return c;
}

std::size_t count_lines(const fs::path& p) {
  const std::string text = read_file(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

Checkpoint trained_checkpoint(TuneMode mode, std::uint64_t seed) {
  const ModelConfig c = tiny_model();
  Hyper h;
  h.mode = mode;
  h.lr = 1e-2;
  h.epochs = 1;
  h.batch_size = 16;
  h.prompt_length = 3;
  h.seed = seed;
  h.test_eval_every = 0;
  PromptConfig pc;
  pc.length = 3;
  pc.seed = seed;
  return train(c, init_encoder(c, seed), tiny_dataset(c, 16), h, pc).checkpoint;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(XPTLAB_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---- config ---------------------------------------------------------------------------

TEST(Config, RoundTripAndCanonicalText) {
  ExperimentConfig c = tiny_experiment("/tmp/x");
  c.data.difficulties = {0.0, 0.25, 0.5};
  c.data.negatives = NegativeKind::kStrict;
  const std::string text = config_to_json(c);
  EXPECT_EQ(config_from_json(text), c);
  EXPECT_EQ(config_to_json(config_from_json(text)), text);
}

TEST(Config, ShippedDefaultsMatchBuiltIns) {
  EXPECT_EQ(load_config(fs::path(XPTLAB_SOURCE_DIR) / "configs" / "desk.json"), ExperimentConfig{});
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(config_from_json(R"({"modle": {}})"), InputError);
  EXPECT_THROW(config_from_json(R"({"model": {"n_layer": 2}})"), InputError);
  EXPECT_THROW(config_from_json(R"({"data": {"negatives": "maybe"}})"), InputError);
  EXPECT_THROW(config_from_json(R"({"data": {"n_languages": 1}})"), InputError);
  EXPECT_THROW(config_from_json("{not json"), InputError);
  EXPECT_NO_THROW(config_from_json("{}"));
}

TEST(Config, HashIgnoresOutputDirOnly) {
  ExperimentConfig a = tiny_experiment("/tmp/a");
  ExperimentConfig b = tiny_experiment("/tmp/b");
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.hyper.lr = 2e-2;
  EXPECT_NE(config_hash(a), config_hash(b));
}

// ---- checkpoints ----------------------------------------------------------------------

TEST(Checkpoint, WriteReadWriteIsByteIdentical) {
  TempDir dir("ckpt_rt");
  for (TuneMode mode : {TuneMode::kFineTune, TuneMode::kPromptTune}) {
    const Checkpoint ck = trained_checkpoint(mode, 4);
    const fs::path p = dir.path() / "a.ckpt";
    write_checkpoint(p, ck);
    const Checkpoint back = read_checkpoint(p);
    EXPECT_EQ(back, ck);
    write_checkpoint(dir.path() / "b.ckpt", back);
    EXPECT_EQ(read_file(p), read_file(dir.path() / "b.ckpt"));
  }
  Checkpoint pre;
  pre.model = tiny_model();
  pre.backbone = init_encoder(pre.model, 1);
  EXPECT_EQ(deserialize_checkpoint(serialize_checkpoint(pre)), pre);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const std::string bytes = serialize_checkpoint(trained_checkpoint(TuneMode::kPromptTune, 2));
  std::string bad = bytes;
  bad[bad.size() - 13] ^= 0x01;  // inside the payload
  EXPECT_THROW(deserialize_checkpoint(bad), ChecksumError);

  bad = bytes;
  bad.replace(0, 8, "NOTXPTLB");
  EXPECT_THROW(deserialize_checkpoint(bad), BadMagicError);

  bad = bytes;
  bad.replace(0, 8, "XPTLAB02");
  EXPECT_THROW(deserialize_checkpoint(bad), VersionError);

  bad = bytes;
  const std::size_t v = bad.find("\"version\":1");
  ASSERT_NE(v, std::string::npos);
  bad[v + 10] = '7';
  EXPECT_THROW(deserialize_checkpoint(bad), VersionError);

  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), ChecksumError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 12)), IoError);
}

TEST(Checkpoint, ManifestParamCountMatchesPayload) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c;
    c.n_layers = 1 + rng() % 3;
    c.n_heads = 1 + rng() % 2;
    c.d_model = 4 * c.n_heads * (1 + rng() % 3);
    c.d_ff = 4 + rng() % 12;
    c.vocab_size = 16 + rng() % 32;
    c.max_seq = 8 + rng() % 8;
    Checkpoint ck;
    ck.kind = CheckpointKind::kPromptTune;
    ck.model = c;
    ck.backbone = init_encoder(c, trial);
    ck.head = init_head(c, trial);
    PromptConfig pc;
    pc.length = 1 + rng() % 5;
    ck.prompt = init_prompts(c, pc);
    ck.prompt_config = pc;
    const std::string bytes = serialize_checkpoint(ck);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    const auto manifest = nlohmann::json::parse(bytes.substr(16, len));
    const std::size_t declared = manifest.at("param_count").get<std::size_t>();
    EXPECT_EQ(8 * declared, bytes.size() - 16 - len);
    EXPECT_EQ(declared, backbone_parameter_count(c) + head_parameter_count(c) +
                            prompt_parameter_count(c.n_layers, pc.length, c.d_model));
    EXPECT_DOUBLE_EQ(manifest.at("ratios").at("tuned_param_ratio").get<double>(),
                     tuned_param_ratio(ck.prompt->parameter_count(), ck.head->parameter_count(),
                                       ck.backbone.parameter_count()));
  }
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(read_checkpoint("/nonexistent/x.ckpt"), IoError);
}

// ---- datasets -------------------------------------------------------------------------

TEST(Dataset, JsonlWireFormat) {
  TaskSample s;
  s.tokens_a = {5, 6};
  s.tokens_b = {7};
  s.label = 1;
  s.lang = 2;
  s.pair_id = 9;
  s.split = Split::kAnalysis;
  const std::string line = sample_to_jsonl(s);
  EXPECT_EQ(line, R"({"tokens_a":[5,6],"tokens_b":[7],"label":1,"lang":2,"pair_id":9,"split":"analysis"})");
  EXPECT_EQ(sample_from_jsonl(line), s);
  EXPECT_THROW(sample_from_jsonl(R"({"tokens_a":[5]})"), InputError);
}

TEST(Dataset, WriteReadIsLosslessAndByteStable) {
  TempDir a("ds_a"), b("ds_b");
  const ExperimentConfig cfg = tiny_experiment(a.path());
  DatasetFiles files;
  files.task = tiny_dataset(cfg.model);
  const Grammar g(cfg.model.vocab_size, cfg.model.n_special());
  files.pretrain.push_back(make_lang_corpus(g, gen_base_corpus(g, 20, 1), files.task.languages[0], 0.5, 0.1, 2));
  write_dataset(a.path(), files, cfg);
  const DatasetFiles back = read_dataset(a.path());
  EXPECT_EQ(back.task.samples.size(), files.task.samples.size());
  EXPECT_EQ(back.task.languages, files.task.languages);
  ASSERT_EQ(back.pretrain.size(), 1u);
  EXPECT_EQ(back.pretrain[0].pairs, files.pretrain[0].pairs);
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest, Split::kAnalysis}) {
    for (int l : files.task.language_ids()) {
      const auto x = files.task.select(s, l), y = back.task.select(s, l);
      ASSERT_EQ(x.size(), y.size());
      for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(*x[i], *y[i]);
    }
  }
  write_dataset(b.path(), back, cfg);
  for (const auto& e : fs::directory_iterator(a.path())) {
    EXPECT_EQ(read_file(e.path()), read_file(b.path() / e.path().filename())) << e.path().filename();
  }
}

// ---- reports --------------------------------------------------------------------------

TEST(Report, MetricsCsvRoundTrip) {
  const std::vector<MetricRow> rows{{"rep_change_pct", "ft", "0", 3, 91.23456789012345},
                                    {"rel_diff_pct", "pt", "0-2", 3, -1e-17},
                                    {"gap_pct", "pt", "all", 4, 1.0 / 3.0}};
  const std::string csv = metrics_to_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "metric,method,lang_or_pair,seed,value");
  EXPECT_EQ(metrics_from_csv(csv), rows);
  EXPECT_THROW(metrics_from_csv("metric,method\nx,y\n"), InputError);
}

TEST(Report, SummaryMeanAndSampleStd) {
  const std::vector<MetricRow> rows{{"m", "ft", "0", 0, 1.0}, {"m", "ft", "0", 1, 2.0}, {"m", "ft", "0", 2, 4.0},
                                    {"m", "pt", "0", 0, 5.0}};
  const std::vector<SummaryRow> s = summarize(rows);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].n, 3u);
  EXPECT_DOUBLE_EQ(s[0].mean, 7.0 / 3.0);
  // Sample variance: ((1-7/3)^2 + (2-7/3)^2 + (4-7/3)^2) / 2 = 7/3.
  EXPECT_NEAR(s[0].std, std::sqrt(7.0 / 3.0), 1e-12);
  EXPECT_EQ(s[1].n, 1u);
  EXPECT_EQ(s[1].std, 0.0);
}

// ---- commands -------------------------------------------------------------------------

TEST(Gen, DefaultConfigCountAudit) {
  TempDir dir("gen_audit");
  ExperimentConfig cfg;
  cfg.output_dir = dir.path().string();
  const Layout layout{dir.path()};
  std::ostringstream log;
  const GenSummary s = cmd_gen(cfg, layout, false, log);
  EXPECT_EQ(s.lines.at("analysis.jsonl"), 4000u);
  for (const auto& [file, n] : s.lines) EXPECT_EQ(count_lines(layout.data_dir() / file), n) << file;

  const auto manifest = nlohmann::json::parse(read_file(layout.data_dir() / "manifest.json"));
  EXPECT_EQ(manifest.at("counts").at("analysis").at("lines").get<std::size_t>(), 4000u);

  const DatasetFiles files = read_dataset(layout.data_dir());
  std::map<int, std::set<int>> langs_by_pair;
  for (const TaskSample& t : files.task.samples) {
    if (t.split == Split::kAnalysis) langs_by_pair[t.pair_id].insert(t.lang);
  }
  EXPECT_EQ(langs_by_pair.size(), 1000u);
  for (const auto& [pid, langs] : langs_by_pair) EXPECT_EQ(langs.size(), 4u) << pid;
}

TEST(Gen, RefusesNonEmptyDirUnlessForcedAndIsDeterministic) {
  TempDir dir("gen_force");
  const ExperimentConfig cfg = tiny_experiment(dir.path());
  const Layout layout{dir.path()};
  std::ostringstream log;
  cmd_gen(cfg, layout, false, log);
  std::map<std::string, std::string> first;
  for (const auto& e : fs::directory_iterator(layout.data_dir())) first[e.path().filename()] = read_file(e.path());
  EXPECT_THROW(cmd_gen(cfg, layout, false, log), InputError);
  write_file(layout.data_dir() / "stray.txt", "x");
  cmd_gen(cfg, layout, true, log);
  EXPECT_FALSE(fs::exists(layout.data_dir() / "stray.txt"));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(layout.data_dir())) {
    EXPECT_EQ(read_file(e.path()), first.at(e.path().filename())) << e.path().filename();
    ++files;
  }
  EXPECT_EQ(files, first.size());
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("pipeline");
    cfg_ = new ExperimentConfig(tiny_experiment(dir_->path()));
    const Layout layout{dir_->path()};
    std::ostringstream log;
    cmd_gen(*cfg_, layout, false, log);
    cmd_pretrain(*cfg_, layout, log);
    for (std::uint64_t seed : cfg_->seeds) {
      cmd_tune(*cfg_, layout, TuneMode::kFineTune, seed, log);
      cmd_tune(*cfg_, layout, TuneMode::kPromptTune, seed, log);
    }
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete dir_;
  }
  static Layout layout() { return Layout{dir_->path()}; }

  static TempDir* dir_;
  static ExperimentConfig* cfg_;
};
TempDir* Pipeline::dir_ = nullptr;
ExperimentConfig* Pipeline::cfg_ = nullptr;

TEST_F(Pipeline, PromptRunKeepsPretrainBackboneBytes) {
  const Checkpoint pre = read_checkpoint(layout().pretrain_checkpoint());
  for (std::uint64_t seed : cfg_->seeds) {
    const Checkpoint pt = read_checkpoint(layout().run_checkpoint(TuneMode::kPromptTune, seed));
    EXPECT_EQ(backbone_bytes(pt.backbone), backbone_bytes(pre.backbone));
    const Checkpoint ft = read_checkpoint(layout().run_checkpoint(TuneMode::kFineTune, seed));
    EXPECT_NE(backbone_bytes(ft.backbone), backbone_bytes(pre.backbone));
    EXPECT_TRUE(fs::exists(layout().run_dir(TuneMode::kPromptTune, seed) / "history.json"));
  }
}

TEST_F(Pipeline, UntrainedHeadIsAtChance) {
  std::ostringstream log;
  for (std::uint64_t seed : cfg_->seeds) {
    const EvalSummary s = cmd_eval(*cfg_, layout(), std::nullopt, seed, std::nullopt, log);
    EXPECT_TRUE(s.fresh_head);
    ASSERT_EQ(s.accuracy.size(), 3u);
    for (const auto& [lang, acc] : s.accuracy) EXPECT_NEAR(acc, 0.5, 0.05) << "lang " << lang;
  }
}

TEST_F(Pipeline, EvalOfTunedRunMatchesItsHistory) {
  std::ostringstream log;
  const EvalSummary s = cmd_eval(*cfg_, layout(), TuneMode::kPromptTune, 1, std::nullopt, log);
  EXPECT_FALSE(s.fresh_head);
  const auto hist = nlohmann::json::parse(read_file(layout().run_dir(TuneMode::kPromptTune, 1) / "history.json"));
  const auto& last = hist.at("epochs").back().at("test_accuracy");
  for (const auto& [lang, acc] : s.accuracy) EXPECT_DOUBLE_EQ(acc, last.at(std::to_string(lang)).get<double>());
}

TEST_F(Pipeline, AnalyzeAndReportRoundTrip) {
  std::ostringstream log;
  std::vector<MetricRow> all;
  for (std::uint64_t seed : cfg_->seeds) {
    const AnalysisReport r = cmd_analyze(*cfg_, layout(), seed, log);
    const fs::path dir = layout().analysis_dir(seed);
    EXPECT_EQ(metrics_from_csv(read_file(dir / "metrics.csv")), r.rows);
    for (const char* f : {"tsne_before_ft.svg", "tsne_before_pt.svg", "tsne_after_ft.svg", "tsne_after_pt.svg",
                          "tsne_grid.svg"}) {
      EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    all.insert(all.end(), r.rows.begin(), r.rows.end());

    // Reported ratios equal the ratio recomputed from the checkpoint.
    const Checkpoint pt = read_checkpoint(layout().run_checkpoint(TuneMode::kPromptTune, seed));
    const double want =
        100.0 * tuned_param_ratio(pt.prompt->parameter_count(), pt.head->parameter_count(), pt.backbone.parameter_count());
    bool found = false;
    for (const MetricRow& m : r.rows) {
      if (m.metric == "tuned_param_ratio_pct" && m.method == "pt") {
        EXPECT_DOUBLE_EQ(m.value, want);
        found = true;
      }
    }
    EXPECT_TRUE(found);
  }
  const ReportSummary rep = cmd_report(*cfg_, layout(), log);
  EXPECT_EQ(rep.rows, all);
  EXPECT_EQ(metrics_from_csv(read_file(layout().report_dir() / "results.csv")), all);
  EXPECT_EQ(rep.seeds, cfg_->seeds);
  EXPECT_TRUE(fs::exists(layout().report_dir() / "summary.csv"));
}

TEST_F(Pipeline, DegenerateFineTuneGivesFullCosine) {
  const Checkpoint frozen = read_checkpoint(layout().pretrain_checkpoint());
  Checkpoint ft = frozen;
  ft.kind = CheckpointKind::kFineTune;
  ft.head = init_head(frozen.model, 1);
  const Checkpoint pt = read_checkpoint(layout().run_checkpoint(TuneMode::kPromptTune, 0));
  const DatasetFiles files = read_dataset(layout().data_dir());
  std::ostringstream log;
  const AnalysisReport r = analyze_checkpoints(*cfg_, files.task, frozen, ft, pt, 0, false, log);
  std::size_t n = 0;
  for (const MetricRow& m : r.rows) {
    if (m.metric == "rep_change_pct" && m.method == "ft") {
      EXPECT_NEAR(m.value, 100.0, 1e-9) << m.lang_or_pair;
      ++n;
    }
  }
  EXPECT_EQ(n, 3u);

  Checkpoint other = pt;
  other.model.d_ff += 1;
  EXPECT_THROW(analyze_checkpoints(*cfg_, files.task, frozen, ft, other, 0, false, log), InputError);
}

TEST_F(Pipeline, LrCacheIsReused) {
  ExperimentConfig grid = *cfg_;
  grid.hyper.lr = 0.0;
  grid.hyper.lr_grid = {1e-2, 1e-3};
  grid.hyper.probe_epochs = 1;
  std::ostringstream log;
  const TuneSummary first = cmd_tune(grid, layout(), TuneMode::kPromptTune, 0, log);
  EXPECT_FALSE(first.lr_from_cache);
  EXPECT_EQ(first.selection.probes.size(), 2u);
  const TuneSummary second = cmd_tune(grid, layout(), TuneMode::kPromptTune, 1, log);
  EXPECT_TRUE(second.lr_from_cache);
  EXPECT_EQ(second.result.history.lr, first.result.history.lr);
  // Restore the fixed-lr runs for the other tests in this suite.
  cmd_tune(*cfg_, layout(), TuneMode::kPromptTune, 0, log);
  cmd_tune(*cfg_, layout(), TuneMode::kPromptTune, 1, log);
}

// ---- executable ------------------------------------------------------------------------

TEST(Executable, ExitCodes) {
  TempDir dir("exe");
  const fs::path cfg = dir.path() / "cfg.json";
  write_file(cfg, config_to_json(tiny_experiment(dir.path() / "exp")));
  const std::string base = "--config " + cfg.string();
  EXPECT_EQ(run_cli("tune " + base + " --mode ft --seed 0"), 2);  // no dataset yet
  EXPECT_EQ(run_cli("analyze " + base + " --seed 0"), 2);
  EXPECT_EQ(run_cli("gen " + base), 0);
  EXPECT_EQ(run_cli("gen " + base), 2);
  EXPECT_EQ(run_cli("gen " + base + " --force"), 0);
  EXPECT_EQ(run_cli("tune " + base + " --mode xx"), 2);
  EXPECT_EQ(run_cli("bogus"), 2);

  write_file(dir.path() / "bad.json", R"({"model": {"n_layer": 2}})");
  EXPECT_EQ(run_cli("gen --config " + (dir.path() / "bad.json").string()), 2);

  const fs::path ckpt = dir.path() / "junk.ckpt";
  write_file(ckpt, "XPTLAB01garbage");
  EXPECT_EQ(run_cli("eval " + base + " --checkpoint " + ckpt.string()), 4);
}
