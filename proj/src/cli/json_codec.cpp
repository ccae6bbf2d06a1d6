#include "json_codec.hpp"

namespace xptlab::codec {

json to_json(const ModelConfig& m) {
  return {{"n_layers", m.n_layers},     {"n_heads", m.n_heads},           {"d_model", m.d_model},
          {"d_ff", m.d_ff},             {"vocab_size", m.vocab_size},     {"max_seq", m.max_seq},
          {"n_classes", m.n_classes},   {"pad_token_id", m.pad_token_id}, {"cls_token_id", m.cls_token_id},
          {"mask_token_id", m.mask_token_id}, {"sep_token_id", m.sep_token_id}};
}

void read(Section& s, ModelConfig& m) {
  s.get("n_layers", m.n_layers);
  s.get("n_heads", m.n_heads);
  s.get("d_model", m.d_model);
  s.get("d_ff", m.d_ff);
  s.get("vocab_size", m.vocab_size);
  s.get("max_seq", m.max_seq);
  s.get("n_classes", m.n_classes);
  s.get("pad_token_id", m.pad_token_id);
  s.get("cls_token_id", m.cls_token_id);
  s.get("mask_token_id", m.mask_token_id);
  s.get("sep_token_id", m.sep_token_id);
}

json to_json(const PromptConfig& p) { return {{"length", p.length}, {"init_std", p.init_std}, {"seed", p.seed}}; }

void read(Section& s, PromptConfig& p) {
  s.get("length", p.length);
  s.get("init_std", p.init_std);
  s.get("seed", p.seed);
}

json to_json(const Hyper& h) {
  return {{"mode", mode_name(h.mode)},
          {"lr", h.lr},
          {"lr_grid", h.lr_grid},
          {"batch_size", h.batch_size},
          {"epochs", h.epochs},
          {"seed", h.seed},
          {"prompt_length", h.prompt_length},
          {"probe_epochs", h.probe_epochs},
          {"test_eval_every", h.test_eval_every}};
}

void read(Section& s, Hyper& h) {
  std::string mode = mode_name(h.mode);
  s.get("mode", mode);
  h.mode = parse_mode(mode);
  s.get("lr", h.lr);
  s.get("lr_grid", h.lr_grid);
  s.get("batch_size", h.batch_size);
  s.get("epochs", h.epochs);
  s.get("seed", h.seed);
  s.get("prompt_length", h.prompt_length);
  s.get("probe_epochs", h.probe_epochs);
  s.get("test_eval_every", h.test_eval_every);
}

json to_json(const TsneConfig& t) {
  return {{"perplexity", t.perplexity},
          {"iterations", t.iterations},
          {"exaggeration", t.exaggeration},
          {"exaggeration_iterations", t.exaggeration_iterations},
          {"step_size", t.step_size},
          {"momentum_early", t.momentum_early},
          {"momentum_late", t.momentum_late},
          {"seed", t.seed},
          {"kl_every", t.kl_every}};
}

void read(Section& s, TsneConfig& t) {
  s.get("perplexity", t.perplexity);
  s.get("iterations", t.iterations);
  s.get("exaggeration", t.exaggeration);
  s.get("exaggeration_iterations", t.exaggeration_iterations);
  s.get("step_size", t.step_size);
  s.get("momentum_early", t.momentum_early);
  s.get("momentum_late", t.momentum_late);
  s.get("seed", t.seed);
  s.get("kl_every", t.kl_every);
}

}  // namespace xptlab::codec
