#pragma once

#include <cstdint>
#include <vector>

#include "xptlab/encoder.hpp"

namespace xptlab {

struct PromptConfig {
  std::size_t length = 16;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const PromptConfig&, const PromptConfig&) = default;
};

/// Learned per-layer prefix keys and values, each [p × H × d_head]. In prompt
/// tuning these (plus the task head) are the only parameters that move.
struct DeepPrompt {
  std::size_t length = 0;
  std::vector<Tensor> keys;    // one per layer
  std::vector<Tensor> values;  // one per layer

  std::size_t parameter_count() const;
  friend bool operator==(const DeepPrompt&, const DeepPrompt&) = default;
};

/// L · 2 · p · d_model.
std::size_t prompt_parameter_count(std::size_t n_layers, std::size_t length, std::size_t d_model);

/// i.i.d. N(0, init_std²) entries drawn layer by layer, keys before values.
DeepPrompt init_prompts(const ModelConfig& config, const PromptConfig& pc);

/// Deep copy into the attention-facing layout.
PastKV as_past_kv(const DeepPrompt& prompt);
DeepPrompt from_past_kv(const PastKV& past);

/// (prompt + head) / (backbone + prompt + head).
double tuned_param_ratio(std::size_t prompt_count, std::size_t head_count, std::size_t backbone_count);

}  // namespace xptlab
