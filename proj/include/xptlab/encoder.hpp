#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xptlab/tensor.hpp"

namespace xptlab {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 512;
  std::size_t max_seq = 32;
  std::size_t n_classes = 2;
  int pad_token_id = 0;
  int cls_token_id = 1;
  int mask_token_id = 2;
  int sep_token_id = 3;

  std::size_t d_head() const { return d_model / n_heads; }
  /// Token ids below this value are special; content tokens live in [n_special, V).
  std::size_t n_special() const;
  /// Throws InputError on an inconsistent configuration.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, w2;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("ln1_gain", self.ln1_gain);
    f("ln1_bias", self.ln1_bias);
    f("wq", self.wq);
    f("wk", self.wk);
    f("wv", self.wv);
    f("wo", self.wo);
    f("ln2_gain", self.ln2_gain);
    f("ln2_bias", self.ln2_bias);
    f("w1", self.w1);
    f("w2", self.w2);
  }
};

/// The backbone: everything except the task head and prompts. The MLM head
/// is tied to the token embeddings and owns only a vocabulary bias.
struct EncoderParams {
  Tensor token_embeddings;     // [V × d_model]
  Tensor position_embeddings;  // [max_seq × d_model]
  std::vector<LayerParams> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor mlm_bias;  // [V]

  /// Calls f(name, tensor) for every parameter in canonical order.
  template <class F>
  void for_each(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const;
  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("token_embeddings"), self.token_embeddings);
    f(std::string("position_embeddings"), self.position_embeddings);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string prefix = "layers." + std::to_string(l) + ".";
      LayerParams::visit(self.layers[l], [&](const char* name, auto& t) { f(prefix + name, t); });
    }
    f(std::string("final_ln_gain"), self.final_ln_gain);
    f(std::string("final_ln_bias"), self.final_ln_bias);
    f(std::string("mlm_bias"), self.mlm_bias);
  }
};

/// Pair-classification head on the CLS representation.
struct ClassifierHead {
  Tensor weight;  // [d_model × C]
  Tensor bias;    // [C]

  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;
};

/// Per-layer prefix keys and values, each [p × H × d_head]. A PastKV with
/// length 0 carries no tensors and is equivalent to having no prefix.
struct PastKV {
  struct Layer {
    Tensor keys;
    Tensor values;
  };
  std::size_t length = 0;
  std::vector<Layer> layers;
};

/// Backbone size as a pure function of the configuration.
std::size_t backbone_parameter_count(const ModelConfig& config);
std::size_t head_parameter_count(const ModelConfig& config);

EncoderParams init_encoder(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);
ClassifierHead init_head(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

// ---- tape bindings ----------------------------------------------------------

struct LayerVars {
  Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, w2;
};

struct EncoderVars {
  Var token_embeddings, position_embeddings;
  std::vector<LayerVars> layers;
  Var final_ln_gain, final_ln_bias, mlm_bias;

  /// Same canonical order as EncoderParams::for_each.
  std::vector<Var> all() const;
};

struct HeadVars {
  Var weight, bias;
};

struct PastKVVars {
  std::size_t length = 0;
  std::vector<std::pair<Var, Var>> layers;  // (keys, values)
};

/// Puts the backbone on a tape; `trainable` decides constant vs variable.
EncoderVars bind(Tape& tape, const EncoderParams& params, bool trainable);
HeadVars bind(Tape& tape, const ClassifierHead& head, bool trainable);
PastKVVars bind(Tape& tape, const PastKV& past, bool trainable);

/// A packed batch: sequences laid end to end as rows, no padding rows.
struct Batch {
  struct Segment {
    std::size_t offset;
    std::size_t length;
  };
  std::vector<int> tokens;
  std::vector<std::size_t> positions;
  std::vector<Segment> segments;
  /// 1 where a key position is padding and must be hidden from attention.
  std::vector<std::uint8_t> key_mask;

  std::size_t rows() const { return tokens.size(); }
  /// Row index of each sequence's first (CLS) token.
  std::vector<std::size_t> cls_rows() const;
};

/// Position ids: 0, 1, ... up to and including the first SEP; the tokens
/// after it start at max_seq / 2 (or right after the SEP when that is
/// later) so that the second segment sits at a fixed offset. Falls back to
/// plain 0..n-1 when the shifted tail would not fit.
std::vector<std::size_t> position_ids(const ModelConfig& config, std::span<const int> tokens);

/// Validates each sequence (length, id range, leading CLS) and packs them.
/// Without explicit masks, positions holding pad_token_id are masked.
Batch make_batch(const ModelConfig& config, std::span<const std::vector<int>> sequences,
                 std::span<const std::vector<std::uint8_t>> pad_masks = {});

struct EncoderOutput {
  Var hidden;  // [rows × d_model], after the final layer norm
  Var cls;     // [n_sequences × d_model]
};

/// Multi-head attention over a packed batch with an optional per-head prefix.
/// For each sequence and head the keys are concat(prefix_keys, keys) along
/// the key axis; prefix positions are never masked. Returns the context
/// before the output projection, [rows × d_model].
Var multi_head_attention(Var q, Var k, Var v, const std::pair<Var, Var>* prefix, const Batch& batch,
                         std::size_t n_heads);

/// attention_with_prefix: projections, prefix attention and output projection
/// for one layer applied to x (already layer-normed).
Var attention_with_prefix(Var x, const LayerVars& layer, const std::pair<Var, Var>* past_layer,
                          const Batch& batch, std::size_t n_heads);

EncoderOutput encode(const ModelConfig& config, const EncoderVars& params, const Batch& batch,
                     const PastKVVars* past = nullptr);

/// logits = cls · W + b.
Var classify(Var cls, const HeadVars& head);
/// Vocabulary logits through the tied embedding matrix, [rows × V].
Var mlm_logits(Var hidden, const EncoderVars& params);

// ---- convenience, tape-free ---------------------------------------------------

struct ForwardResult {
  Tensor hidden;  // [seq × d_model]
  Tensor cls;     // [d_model]
};

ForwardResult forward(const ModelConfig& config, std::span<const int> tokens, const EncoderParams& params,
                      const PastKV* past = nullptr, std::span<const std::uint8_t> pad_mask = {});

Tensor classify(const Tensor& cls, const ClassifierHead& head);

}  // namespace xptlab
