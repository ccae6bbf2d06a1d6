#include "xptlab/prompts.hpp"

#include <random>

namespace xptlab {

void PromptConfig::validate() const {
  if (length < 1) throw InputError("prompt length must be at least 1");
  if (!(init_std > 0.0)) throw InputError("prompt init_std must be positive");
}

std::size_t DeepPrompt::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : keys) n += t.size();
  for (const Tensor& t : values) n += t.size();
  return n;
}

std::size_t prompt_parameter_count(std::size_t n_layers, std::size_t length, std::size_t d_model) {
  return n_layers * 2 * length * d_model;
}

DeepPrompt init_prompts(const ModelConfig& config, const PromptConfig& pc) {
  config.validate();
  pc.validate();
  std::mt19937_64 rng(pc.seed);
  std::normal_distribution<double> dist(0.0, pc.init_std);
  const Shape shape{pc.length, config.n_heads, config.d_head()};
  DeepPrompt dp;
  dp.length = pc.length;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Tensor k(shape);
    for (double& v : k.data()) v = dist(rng);
    Tensor val(shape);
    for (double& v : val.data()) v = dist(rng);
    dp.keys.push_back(std::move(k));
    dp.values.push_back(std::move(val));
  }
  return dp;
}

PastKV as_past_kv(const DeepPrompt& prompt) {
  if (prompt.keys.size() != prompt.values.size()) {
    throw ContractError("deep prompt has mismatched key/value layer counts");
  }
  PastKV past;
  past.length = prompt.length;
  if (prompt.length == 0) return past;
  for (std::size_t l = 0; l < prompt.keys.size(); ++l) {
    if (prompt.keys[l].rows() != prompt.length || prompt.values[l].rows() != prompt.length) {
      throw ContractError("deep prompt layer " + std::to_string(l) + " does not have length " +
                          std::to_string(prompt.length));
    }
    past.layers.push_back({prompt.keys[l], prompt.values[l]});
  }
  return past;
}

DeepPrompt from_past_kv(const PastKV& past) {
  DeepPrompt dp;
  dp.length = past.length;
  for (const PastKV::Layer& l : past.layers) {
    dp.keys.push_back(l.keys);
    dp.values.push_back(l.values);
  }
  return dp;
}

double tuned_param_ratio(std::size_t prompt_count, std::size_t head_count, std::size_t backbone_count) {
  if (backbone_count == 0) throw ContractError("tuned_param_ratio: backbone_count must be positive");
  const double tuned = static_cast<double>(prompt_count) + static_cast<double>(head_count);
  return tuned / (static_cast<double>(backbone_count) + tuned);
}

}  // namespace xptlab
