#include "xptlab/tuning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "xptlab/digest.hpp"

namespace xptlab {

namespace {

// Salts for sub-streams derived from a run seed.
constexpr std::uint64_t kHeadSalt = 1;
constexpr std::uint64_t kPromptSalt = 2;
constexpr std::uint64_t kShuffleSalt = 3;

struct EncodedSamples {
  std::vector<std::vector<int>> sequences;
  std::vector<int> labels;
};

EncodedSamples encode_all(const ModelConfig& config, std::span<const TaskSample* const> samples) {
  EncodedSamples out;
  out.sequences.reserve(samples.size());
  for (const TaskSample* s : samples) {
    out.sequences.push_back(encode_pair(config, *s));
    out.labels.push_back(s->label);
  }
  return out;
}

// Trainable tensors and their tape variables, aligned by index.
struct Trainable {
  std::vector<Tensor*> tensors;
  std::vector<Var> vars;
};

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::distance(row.begin(), std::ranges::max_element(row)));
}

}  // namespace

const char* mode_name(TuneMode mode) { return mode == TuneMode::kFineTune ? "ft" : "pt"; }

TuneMode parse_mode(const std::string& name) {
  if (name == "ft") return TuneMode::kFineTune;
  if (name == "pt") return TuneMode::kPromptTune;
  throw InputError("unknown tuning mode '" + name + "' (expected ft or pt)");
}

const char* kind_name(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::kPretrain: return "pretrain";
    case CheckpointKind::kFineTune: return "finetune";
    case CheckpointKind::kPromptTune: return "prompttune";
  }
  return "?";
}

CheckpointKind parse_kind(const std::string& name) {
  for (CheckpointKind k : {CheckpointKind::kPretrain, CheckpointKind::kFineTune, CheckpointKind::kPromptTune}) {
    if (name == kind_name(k)) return k;
  }
  throw InputError("unknown checkpoint kind '" + name + "'");
}

void Hyper::validate() const {
  if (lr < 0.0 || !std::isfinite(lr)) throw InputError("hyper: lr must be positive (or 0 to select from the grid)");
  if (lr == 0.0 && lr_grid.empty()) throw InputError("hyper: lr unset and lr_grid empty");
  for (double g : lr_grid) {
    if (!(g > 0.0)) throw InputError("hyper: lr_grid entries must be positive");
  }
  if (epochs < 1) throw InputError("hyper: epochs must be >= 1");
  if (batch_size < 1) throw InputError("hyper: batch_size must be >= 1");
  if (probe_epochs < 1) throw InputError("hyper: probe_epochs must be >= 1");
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr) {
  if (params.size() != grads.size()) {
    throw ContractError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state covers a different parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape()) {
      throw ContractError("adam_step: gradient shape " + shape_str(grads[i].shape()) + " does not match parameter " +
                          shape_str(params[i]->shape()));
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = AdamState::kBeta1 * m[k] + (1.0 - AdamState::kBeta1) * g[k];
      v[k] = AdamState::kBeta2 * v[k] + (1.0 - AdamState::kBeta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + AdamState::kEps);
    }
  }
}

double linear_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps < 1) throw ContractError("linear_lr: total_steps must be >= 1");
  if (step > total_steps) {
    throw ContractError("linear_lr: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

std::string backbone_bytes(const EncoderParams& params) {
  std::string out;
  out.reserve(8 * params.parameter_count());
  params.for_each([&](const std::string&, const Tensor& t) { append_f64_le(out, t.data()); });
  return out;
}

std::string backbone_checksum(const EncoderParams& params) { return sha256_hex(backbone_bytes(params)); }

// ---- evaluation ---------------------------------------------------------------

Predictions predict(const ModelConfig& config, const EncoderParams& backbone, const ClassifierHead& head,
                    const DeepPrompt* prompt, std::span<const TaskSample* const> samples, std::size_t batch_size) {
  const EncodedSamples enc = encode_all(config, samples);
  std::optional<PastKV> past;
  if (prompt) past = as_past_kv(*prompt);
  Predictions out;
  out.labels = enc.labels;
  for (std::size_t i = 0; i < enc.sequences.size(); i += batch_size) {
    const std::size_t end = std::min(enc.sequences.size(), i + batch_size);
    const Batch batch = make_batch(config, std::span(enc.sequences).subspan(i, end - i));
    Tape tape;
    const EncoderVars vars = bind(tape, backbone, false);
    const HeadVars hv = bind(tape, head, false);
    std::optional<PastKVVars> pv;
    if (past) pv = bind(tape, *past, false);
    const Var logits = classify(encode(config, vars, batch, pv ? &*pv : nullptr).cls, hv);
    const Tensor& z = logits.value();
    for (std::size_t r = 0; r < z.rows(); ++r) out.predicted.push_back(static_cast<int>(argmax(z.row(r))));
  }
  return out;
}

std::map<int, double> evaluate(const ModelConfig& config, const EncoderParams& backbone, const ClassifierHead& head,
                               const DeepPrompt* prompt, const MultilingualDataset& data, Split split,
                               std::span<const int> langs) {
  const std::vector<int> known = data.language_ids();
  std::map<int, double> acc;
  for (int lang : langs) {
    if (std::ranges::find(known, lang) == known.end()) {
      throw InputError("evaluate: unknown language id " + std::to_string(lang));
    }
    const std::vector<const TaskSample*> samples = data.select(split, lang);
    if (samples.empty()) {
      throw InputError(std::string("evaluate: no ") + split_name(split) + " samples for language " +
                       std::to_string(lang));
    }
    const Predictions p = predict(config, backbone, head, prompt, samples);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < p.labels.size(); ++i) correct += p.predicted[i] == p.labels[i] ? 1 : 0;
    acc[lang] = static_cast<double>(correct) / static_cast<double>(p.labels.size());
  }
  return acc;
}

// ---- task training --------------------------------------------------------------

TrainResult train(const ModelConfig& config, const EncoderParams& backbone, const MultilingualDataset& data,
                  const Hyper& h, const PromptConfig& prompt_config) {
  h.validate();
  if (!(h.lr > 0.0)) throw ContractError("train: learning rate must be resolved before training");
  const std::vector<const TaskSample*> train_samples = data.select(Split::kTrain, 0);
  if (train_samples.empty()) throw InputError("train: empty source-language train split");
  const bool prompt_mode = h.mode == TuneMode::kPromptTune;

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.kind = prompt_mode ? CheckpointKind::kPromptTune : CheckpointKind::kFineTune;
  ck.model = config;
  ck.backbone = backbone;
  ck.head = init_head(config, derive_seed(h.seed, kHeadSalt));
  ck.hyper = h;
  ck.seed = h.seed;
  if (prompt_mode) {
    PromptConfig pc = prompt_config;
    pc.length = h.prompt_length;
    pc.seed = derive_seed(h.seed, kPromptSalt);
    ck.prompt = init_prompts(config, pc);
    ck.prompt_config = pc;
  }

  RunHistory& hist = result.history;
  hist.mode = h.mode;
  hist.lr = h.lr;
  hist.backbone_checksum_before = backbone_checksum(ck.backbone);

  Trainable trainable;
  if (prompt_mode) {
    for (std::size_t l = 0; l < ck.prompt->keys.size(); ++l) {
      trainable.tensors.push_back(&ck.prompt->keys[l]);
      trainable.tensors.push_back(&ck.prompt->values[l]);
    }
  } else {
    ck.backbone.for_each([&](const std::string&, Tensor& t) { trainable.tensors.push_back(&t); });
  }
  trainable.tensors.push_back(&ck.head->weight);
  trainable.tensors.push_back(&ck.head->bias);

  const EncodedSamples enc = encode_all(config, train_samples);
  const std::size_t n = enc.sequences.size();
  const std::size_t steps_per_epoch = (n + h.batch_size - 1) / h.batch_size;
  const std::size_t total_steps = steps_per_epoch * h.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(derive_seed(h.seed, kShuffleSalt));
  AdamState adam;
  std::size_t step = 0;
  const std::vector<int> langs = data.language_ids();

  for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = b * h.batch_size;
      const std::size_t end = std::min(n, begin + h.batch_size);
      std::vector<std::vector<int>> seqs;
      std::vector<int> labels;
      for (std::size_t i = begin; i < end; ++i) {
        seqs.push_back(enc.sequences[order[i]]);
        labels.push_back(enc.labels[order[i]]);
      }
      const Batch batch = make_batch(config, seqs);

      Tape tape;
      const EncoderVars ev = bind(tape, ck.backbone, !prompt_mode);
      const HeadVars hv = bind(tape, *ck.head, true);
      std::optional<PastKVVars> pv;
      if (prompt_mode) pv = bind(tape, as_past_kv(*ck.prompt), true);
      const Var logits = classify(encode(config, ev, batch, pv ? &*pv : nullptr).cls, hv);
      const Var loss = cross_entropy_logits(logits, labels);

      trainable.vars.clear();
      if (prompt_mode) {
        for (const auto& [k, v] : pv->layers) {
          trainable.vars.push_back(k);
          trainable.vars.push_back(v);
        }
      } else {
        trainable.vars = ev.all();
      }
      trainable.vars.push_back(hv.weight);
      trainable.vars.push_back(hv.bias);

      const Gradients grads = tape.backward(loss);
      std::vector<Tensor> g;
      g.reserve(trainable.vars.size());
      for (std::size_t i = 0; i < trainable.vars.size(); ++i) {
        const Tensor* gi = grads.find(trainable.vars[i].id);
        g.push_back(gi ? *gi : Tensor(trainable.tensors[i]->shape()));
      }
      adam_step(trainable.tensors, g, adam, linear_lr(step, total_steps, h.lr));
      ++step;

      loss_sum += loss.value().item() * static_cast<double>(end - begin);
      const Tensor& z = logits.value();
      for (std::size_t r = 0; r < z.rows(); ++r) correct += static_cast<int>(argmax(z.row(r))) == labels[r] ? 1 : 0;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    const DeepPrompt* prompt = prompt_mode ? &*ck.prompt : nullptr;
    const std::vector<int> source{0};
    if (!data.select(Split::kVal, 0).empty()) {
      rec.val_accuracy = evaluate(config, ck.backbone, *ck.head, prompt, data, Split::kVal, source).at(0);
    }
    const bool test_epoch =
        h.test_eval_every > 0 && (epoch % h.test_eval_every == 0 || epoch == h.epochs);
    if (test_epoch) rec.test_accuracy = evaluate(config, ck.backbone, *ck.head, prompt, data, Split::kTest, langs);
    hist.epochs.push_back(std::move(rec));
  }

  hist.backbone_checksum_after = backbone_checksum(ck.backbone);
  if (prompt_mode && hist.backbone_checksum_after != hist.backbone_checksum_before) {
    throw InvariantError("prompt tuning modified the frozen backbone (checksum " + hist.backbone_checksum_before +
                         " -> " + hist.backbone_checksum_after + ")");
  }
  return result;
}

LrSelection select_lr(const ModelConfig& config, const EncoderParams& backbone, const MultilingualDataset& data,
                      const Hyper& h, const PromptConfig& prompt_config) {
  if (h.lr_grid.empty()) throw ContractError("select_lr: empty learning-rate grid");
  std::vector<double> grid = h.lr_grid;
  std::ranges::sort(grid);
  LrSelection sel;
  double best = -1.0;
  for (double lr : grid) {
    Hyper probe = h;
    probe.lr = lr;
    probe.epochs = h.probe_epochs;
    probe.test_eval_every = 0;
    LrProbe p{lr, 0.0, false};
    try {
      const TrainResult r = train(config, backbone, data, probe, prompt_config);
      const EpochRecord& last = r.history.epochs.back();
      p.val_accuracy = last.val_accuracy;
      p.diverged = std::ranges::any_of(r.history.epochs, [](const EpochRecord& e) { return !std::isfinite(e.train_loss); });
    } catch (const InvariantError&) {
      // Non-finite activations from finite inputs: the probe blew up.
      p.diverged = true;
    }
    sel.probes.push_back(p);
    // Grid ascends, so strict improvement keeps ties on the smaller lr.
    if (!p.diverged && p.val_accuracy > best) {
      best = p.val_accuracy;
      sel.best_lr = lr;
    }
  }
  if (best < 0.0) throw InvariantError("select_lr: every learning rate in the grid diverged");
  return sel;
}

// ---- MLM pretraining ---------------------------------------------------------------

Var mlm_loss(const ModelConfig& config, const EncoderVars& vars, const MlmBatch& batch) {
  std::vector<std::vector<int>> inputs;
  inputs.reserve(batch.size());
  for (const MlmSequence& s : batch) inputs.push_back(s.input);
  const Batch packed = make_batch(config, inputs);
  std::vector<std::size_t> rows;
  std::vector<int> targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t k = 0; k < batch[i].target_positions.size(); ++k) {
      rows.push_back(packed.segments[i].offset + batch[i].target_positions[k]);
      targets.push_back(batch[i].targets[k]);
    }
  }
  if (rows.empty()) throw ContractError("mlm_loss: batch has no masked positions");
  const EncoderOutput out = encode(config, vars, packed);
  return cross_entropy_logits(mlm_logits(gather_rows(out.hidden, rows), vars), targets);
}

PretrainHistory pretrain_mlm(const ModelConfig& config, EncoderParams& params, const std::vector<LangCorpus>& corpora,
                             const PretrainOptions& options) {
  if (options.epochs < 1) throw InputError("pretrain: epochs must be >= 1");
  if (!(options.lr > 0.0)) throw InputError("pretrain: lr must be positive");
  std::vector<Tensor*> tensors;
  params.for_each([&](const std::string&, Tensor& t) { tensors.push_back(&t); });

  std::vector<std::vector<MlmBatch>> per_epoch;
  std::size_t total_steps = 0;
  for (std::size_t e = 0; e < options.epochs; ++e) {
    per_epoch.push_back(build_mlm_batches(config, corpora, options.mlm, derive_seed(options.seed, e)));
    total_steps += per_epoch.back().size();
  }

  AdamState adam;
  PretrainHistory hist;
  std::size_t step = 0;
  for (std::size_t e = 0; e < options.epochs; ++e) {
    double loss_sum = 0.0;
    std::size_t counted = 0;
    for (const MlmBatch& batch : per_epoch[e]) {
      const bool has_targets =
          std::ranges::any_of(batch, [](const MlmSequence& s) { return !s.targets.empty(); });
      if (!has_targets) {
        ++step;
        continue;
      }
      Tape tape;
      const EncoderVars vars = bind(tape, params, true);
      const Var loss = mlm_loss(config, vars, batch);
      const Gradients grads = tape.backward(loss);
      const std::vector<Var> all = vars.all();
      std::vector<Tensor> g;
      g.reserve(all.size());
      for (std::size_t i = 0; i < all.size(); ++i) {
        const Tensor* gi = grads.find(all[i].id);
        g.push_back(gi ? *gi : Tensor(tensors[i]->shape()));
      }
      adam_step(tensors, g, adam, linear_lr(step, total_steps, options.lr));
      ++step;
      loss_sum += loss.value().item();
      ++counted;
    }
    hist.epoch_loss.push_back(counted ? loss_sum / static_cast<double>(counted) : 0.0);
  }
  return hist;
}

}  // namespace xptlab
