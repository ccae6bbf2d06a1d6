#include "xptlab/config.hpp"

#include <fstream>
#include <sstream>

#include "json_codec.hpp"
#include "xptlab/digest.hpp"

namespace xptlab {

using json = codec::json;

namespace {

using codec::Section;

json to_json(const ExperimentConfig& c) {
  const Hyper& h = c.hyper;
  const DataConfig& d = c.data;
  json j;
  j["model"] = codec::to_json(c.model);
  // The prompt init seed is derived from the run seed, so it is not configurable.
  j["prompt"] = {{"length", c.prompt.length}, {"init_std", c.prompt.init_std}};
  j["hyper"] = {{"lr", h.lr},
                {"lr_grid", h.lr_grid},
                {"batch_size", h.batch_size},
                {"epochs", h.epochs},
                {"probe_epochs", h.probe_epochs},
                {"test_eval_every", h.test_eval_every}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"lr", c.pretrain.lr},
                   {"seed", c.pretrain.seed},
                   {"mask_rate", c.pretrain.mlm.mask_rate},
                   {"batch_size", c.pretrain.mlm.batch_size}};
  j["data"] = {{"n_languages", d.n_languages},
               {"difficulties", d.difficulties},
               {"shared_fraction", d.shared_fraction},
               {"train", d.train},
               {"val", d.val},
               {"test_per_lang", d.test_per_lang},
               {"negatives", negatives_name(d.negatives)},
               {"pretrain_sentences", d.pretrain_sentences},
               {"paraphrase_rate", d.paraphrase_rate},
               {"noise_rate", d.noise_rate},
               {"grammar_seed", d.grammar_seed},
               {"language_seed", d.language_seed},
               {"task_seed", d.task_seed},
               {"corpus_seed", d.corpus_seed}};
  j["analysis"] = {{"n_analysis", c.analysis.n_analysis},
                   {"tsne_per_lang", c.analysis.tsne_per_lang},
                   {"logistic_l2", c.analysis.logistic_l2},
                   {"tsne", codec::to_json(c.analysis.tsne)}};
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  return j;
}

}  // namespace

double DataConfig::difficulty(std::size_t lang) const {
  if (difficulties.empty()) return std::min(1.0, 0.1 * static_cast<double>(lang));
  return difficulties.at(lang);
}

TaskSizes ExperimentConfig::task_sizes() const {
  return {data.train, data.val, data.test_per_lang, analysis.n_analysis};
}

void ExperimentConfig::validate() const {
  model.validate();
  prompt.validate();
  hyper.validate();
  if (data.n_languages < 2) throw InputError("config: need at least two languages");
  if (!data.difficulties.empty() && data.difficulties.size() != data.n_languages) {
    throw InputError("config: data.difficulties must list one value per language");
  }
  for (std::size_t l = 0; l < data.n_languages; ++l) {
    const double v = data.difficulty(l);
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("config: difficulties must lie in [0, 1]");
  }
  if (!(data.shared_fraction >= 0.0 && data.shared_fraction <= 1.0)) {
    throw InputError("config: data.shared_fraction must lie in [0, 1]");
  }
  if (data.train < 2 || data.val < 2 || data.test_per_lang < 2 || analysis.n_analysis < 2) {
    throw InputError("config: every split needs at least two samples");
  }
  if (data.pretrain_sentences < 2) throw InputError("config: data.pretrain_sentences must be >= 2");
  if (!(data.paraphrase_rate >= 0.0 && data.paraphrase_rate <= 1.0) || !(data.noise_rate >= 0.0 && data.noise_rate <= 1.0)) {
    throw InputError("config: paraphrase_rate and noise_rate must lie in [0, 1]");
  }
  // [CLS] a [SEP] b must fit, and prefix plus sequence share the attention span.
  if (model.max_seq < 2 * kMaxSentenceLength + 2) {
    throw InputError("config: model.max_seq must be at least " + std::to_string(2 * kMaxSentenceLength + 2));
  }
  if (hyper.prompt_length != prompt.length) throw InputError("config: hyper and prompt disagree on the prompt length");
  if (prompt.length > model.max_seq) throw InputError("config: prompt length exceeds model.max_seq");
  if (pretrain.epochs < 1 || !(pretrain.lr > 0.0)) throw InputError("config: pretrain needs epochs >= 1 and lr > 0");
  if (!(pretrain.mlm.mask_rate > 0.0 && pretrain.mlm.mask_rate < 1.0) || pretrain.mlm.batch_size < 1) {
    throw InputError("config: pretrain mask_rate must lie in (0, 1) and batch_size >= 1");
  }
  const std::size_t tsne_n = data.n_languages * (analysis.tsne_per_lang ? std::min(analysis.tsne_per_lang, analysis.n_analysis)
                                                                        : analysis.n_analysis);
  analysis.tsne.validate(tsne_n);
  if (!(analysis.logistic_l2 >= 0.0)) throw InputError("config: analysis.logistic_l2 must be >= 0");
  if (seeds.empty()) throw InputError("config: seeds must not be empty");
  if (output_dir.empty()) throw InputError("config: output_dir must not be empty");
}

const char* negatives_name(NegativeKind k) { return k == NegativeKind::kStrict ? "strict" : "noisy"; }

NegativeKind parse_negatives(const std::string& name) {
  if (name == "strict") return NegativeKind::kStrict;
  if (name == "noisy") return NegativeKind::kNoisy;
  throw InputError("config: unknown negatives variant '" + name + "' (expected strict or noisy)");
}

std::string config_to_json(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section root(j, "config");
  if (const json* m = root.child("model")) {
    Section s(*m, "model");
    codec::read(s, c.model);
  }
  if (const json* p = root.child("prompt")) {
    Section s(*p, "prompt");
    s.get("length", c.prompt.length);
    s.get("init_std", c.prompt.init_std);
  }
  c.hyper.prompt_length = c.prompt.length;
  if (const json* h = root.child("hyper")) {
    Section s(*h, "hyper");
    s.get("lr", c.hyper.lr);
    s.get("lr_grid", c.hyper.lr_grid);
    s.get("batch_size", c.hyper.batch_size);
    s.get("epochs", c.hyper.epochs);
    s.get("probe_epochs", c.hyper.probe_epochs);
    s.get("test_eval_every", c.hyper.test_eval_every);
  }
  if (const json* p = root.child("pretrain")) {
    Section s(*p, "pretrain");
    s.get("epochs", c.pretrain.epochs);
    s.get("lr", c.pretrain.lr);
    s.get("seed", c.pretrain.seed);
    s.get("mask_rate", c.pretrain.mlm.mask_rate);
    s.get("batch_size", c.pretrain.mlm.batch_size);
  }
  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    DataConfig& dc = c.data;
    std::string negatives = negatives_name(dc.negatives);
    s.get("n_languages", dc.n_languages);
    s.get("difficulties", dc.difficulties);
    s.get("shared_fraction", dc.shared_fraction);
    s.get("train", dc.train);
    s.get("val", dc.val);
    s.get("test_per_lang", dc.test_per_lang);
    s.get("negatives", negatives);
    dc.negatives = parse_negatives(negatives);
    s.get("pretrain_sentences", dc.pretrain_sentences);
    s.get("paraphrase_rate", dc.paraphrase_rate);
    s.get("noise_rate", dc.noise_rate);
    s.get("grammar_seed", dc.grammar_seed);
    s.get("language_seed", dc.language_seed);
    s.get("task_seed", dc.task_seed);
    s.get("corpus_seed", dc.corpus_seed);
  }
  if (const json* a = root.child("analysis")) {
    Section s(*a, "analysis");
    s.get("n_analysis", c.analysis.n_analysis);
    s.get("tsne_per_lang", c.analysis.tsne_per_lang);
    s.get("logistic_l2", c.analysis.logistic_l2);
    if (const json* t = s.child("tsne")) {
      Section ts(*t, "analysis.tsne");
      codec::read(ts, c.analysis.tsne);
    }
  }
  root.get("seeds", c.seeds);
  root.get("output_dir", c.output_dir);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str());
}

std::string config_hash(const ExperimentConfig& config) {
  // Where results land does not change what they mean.
  json j = to_json(config);
  j.erase("output_dir");
  return sha256_hex(j.dump()).substr(0, 16);
}

}  // namespace xptlab
