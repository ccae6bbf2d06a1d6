#include "xptlab/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include <Eigen/Core>

namespace xptlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::OuterStride<>;
using ConstBlock = Eigen::Map<const RowMat, 0, Strided>;
using MutBlock = Eigen::Map<RowMat, 0, Strided>;

// Rows [row0, row0+n) and columns [col0, col0+w) of a row-major matrix.
ConstBlock block(const Tensor& t, std::size_t row0, std::size_t n, std::size_t col0, std::size_t w) {
  const std::size_t stride = t.cols();
  return ConstBlock(t.data().data() + row0 * stride + col0, n, w, Strided(stride));
}
MutBlock block(Tensor& t, std::size_t row0, std::size_t n, std::size_t col0, std::size_t w) {
  const std::size_t stride = t.cols();
  return MutBlock(t.data().data() + row0 * stride + col0, n, w, Strided(stride));
}

Tensor normal_tensor(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::ranges::fill(t.data(), value);
  return t;
}

// Attention probabilities for every (sequence, head), kept for backward.
struct AttentionCache {
  std::vector<RowMat> probs;  // index: segment * n_heads + head, shape [len × (p + len)]
};

}  // namespace

std::size_t ModelConfig::n_special() const {
  return static_cast<std::size_t>(std::max({pad_token_id, cls_token_id, mask_token_id, sep_token_id})) + 1;
}

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 || max_seq == 0 ||
      n_classes < 2) {
    throw InputError("model config: all sizes must be positive and n_classes >= 2");
  }
  if (d_model % n_heads != 0) {
    throw InputError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                     std::to_string(n_heads));
  }
  const int ids[] = {pad_token_id, cls_token_id, mask_token_id, sep_token_id};
  for (int i = 0; i < 4; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_size) {
      throw InputError("model config: special token id " + std::to_string(ids[i]) + " outside vocabulary");
    }
    for (int j = 0; j < i; ++j) {
      if (ids[i] == ids[j]) throw InputError("model config: special token ids must be distinct");
    }
  }
  if (n_special() >= vocab_size) throw InputError("model config: no room for content tokens");
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::size_t backbone_parameter_count(const ModelConfig& c) {
  const std::size_t per_layer = 4 * c.d_model * c.d_model + 2 * c.d_model * c.d_ff + 4 * c.d_model;
  return c.vocab_size * c.d_model + c.max_seq * c.d_model + c.n_layers * per_layer + 2 * c.d_model +
         c.vocab_size;
}

std::size_t head_parameter_count(const ModelConfig& c) { return c.d_model * c.n_classes + c.n_classes; }

EncoderParams init_encoder(const ModelConfig& c, std::uint64_t seed, double init_std) {
  c.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = c.d_model;
  EncoderParams p;
  p.token_embeddings = normal_tensor({c.vocab_size, d}, rng, init_std);
  p.position_embeddings = normal_tensor({c.max_seq, d}, rng, init_std);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerParams layer;
    layer.ln1_gain = filled({d}, 1.0);
    layer.ln1_bias = filled({d}, 0.0);
    layer.wq = normal_tensor({d, d}, rng, init_std);
    layer.wk = normal_tensor({d, d}, rng, init_std);
    layer.wv = normal_tensor({d, d}, rng, init_std);
    layer.wo = normal_tensor({d, d}, rng, init_std);
    layer.ln2_gain = filled({d}, 1.0);
    layer.ln2_bias = filled({d}, 0.0);
    layer.w1 = normal_tensor({d, c.d_ff}, rng, init_std);
    layer.w2 = normal_tensor({c.d_ff, d}, rng, init_std);
    p.layers.push_back(std::move(layer));
  }
  p.final_ln_gain = filled({d}, 1.0);
  p.final_ln_bias = filled({d}, 0.0);
  p.mlm_bias = filled({c.vocab_size}, 0.0);
  return p;
}

ClassifierHead init_head(const ModelConfig& c, std::uint64_t seed, double init_std) {
  std::mt19937_64 rng(seed);
  return {normal_tensor({c.d_model, c.n_classes}, rng, init_std), filled({c.n_classes}, 0.0)};
}

// ---- binding -------------------------------------------------------------------

std::vector<Var> EncoderVars::all() const {
  std::vector<Var> out{token_embeddings, position_embeddings};
  for (const LayerVars& l : layers) {
    out.insert(out.end(), {l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.w1, l.w2});
  }
  out.insert(out.end(), {final_ln_gain, final_ln_bias, mlm_bias});
  return out;
}

EncoderVars bind(Tape& tape, const EncoderParams& p, bool trainable) {
  auto put = [&](const Tensor& t) { return trainable ? tape.variable(t) : tape.constant(t); };
  EncoderVars v;
  v.token_embeddings = put(p.token_embeddings);
  v.position_embeddings = put(p.position_embeddings);
  for (const LayerParams& l : p.layers) {
    v.layers.push_back({put(l.ln1_gain), put(l.ln1_bias), put(l.wq), put(l.wk), put(l.wv), put(l.wo),
                        put(l.ln2_gain), put(l.ln2_bias), put(l.w1), put(l.w2)});
  }
  v.final_ln_gain = put(p.final_ln_gain);
  v.final_ln_bias = put(p.final_ln_bias);
  v.mlm_bias = put(p.mlm_bias);
  return v;
}

HeadVars bind(Tape& tape, const ClassifierHead& head, bool trainable) {
  if (trainable) return {tape.variable(head.weight), tape.variable(head.bias)};
  return {tape.constant(head.weight), tape.constant(head.bias)};
}

PastKVVars bind(Tape& tape, const PastKV& past, bool trainable) {
  PastKVVars v;
  v.length = past.length;
  if (past.length == 0) return v;
  for (const PastKV::Layer& l : past.layers) {
    // Keys before values; argument evaluation order is unspecified.
    const Var keys = trainable ? tape.variable(l.keys) : tape.constant(l.keys);
    const Var values = trainable ? tape.variable(l.values) : tape.constant(l.values);
    v.layers.emplace_back(keys, values);
  }
  return v;
}

// ---- batching ------------------------------------------------------------------

std::vector<std::size_t> Batch::cls_rows() const {
  std::vector<std::size_t> rows;
  rows.reserve(segments.size());
  for (const Segment& s : segments) rows.push_back(s.offset);
  return rows;
}

std::vector<std::size_t> position_ids(const ModelConfig& config, std::span<const int> tokens) {
  std::vector<std::size_t> pos(tokens.size());
  const auto sep = std::find(tokens.begin(), tokens.end(), config.sep_token_id);
  const std::size_t split = sep == tokens.end() ? tokens.size() : static_cast<std::size_t>(sep - tokens.begin()) + 1;
  const std::size_t tail = tokens.size() - split;
  const std::size_t start = std::max(split, config.max_seq / 2);
  const bool shifted = tail > 0 && start + tail <= config.max_seq;
  for (std::size_t i = 0; i < tokens.size(); ++i) pos[i] = shifted && i >= split ? start + (i - split) : i;
  return pos;
}

Batch make_batch(const ModelConfig& config, std::span<const std::vector<int>> sequences,
                 std::span<const std::vector<std::uint8_t>> pad_masks) {
  if (sequences.empty()) throw InputError("make_batch: no sequences");
  if (!pad_masks.empty() && pad_masks.size() != sequences.size()) {
    throw InputError("make_batch: one pad mask per sequence required");
  }
  Batch b;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const std::vector<int>& seq = sequences[s];
    if (seq.empty() || seq.size() > config.max_seq) {
      throw InputError("sequence length " + std::to_string(seq.size()) + " outside [1, " +
                       std::to_string(config.max_seq) + "]");
    }
    if (seq.front() != config.cls_token_id) throw InputError("sequence must start with the CLS token");
    if (!pad_masks.empty() && pad_masks[s].size() != seq.size()) {
      throw InputError("pad mask length differs from sequence length");
    }
    b.segments.push_back({b.tokens.size(), seq.size()});
    const std::vector<std::size_t> pos = position_ids(config, seq);
    b.positions.insert(b.positions.end(), pos.begin(), pos.end());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int tok = seq[i];
      if (tok < 0 || static_cast<std::size_t>(tok) >= config.vocab_size) {
        throw InputError("token id " + std::to_string(tok) + " outside vocabulary of " +
                         std::to_string(config.vocab_size));
      }
      b.tokens.push_back(tok);
      const bool masked = pad_masks.empty() ? tok == config.pad_token_id : pad_masks[s][i] != 0;
      b.key_mask.push_back(masked ? 1 : 0);
    }
  }
  return b;
}

// ---- attention -----------------------------------------------------------------

Var multi_head_attention(Var q, Var k, Var v, const std::pair<Var, Var>* prefix, const Batch& batch,
                         std::size_t n_heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t d = qv.cols();
  if (qv.rows() != batch.rows() || kv.shape() != qv.shape() || vv.shape() != qv.shape()) {
    throw DimensionError("attention: q/k/v shapes " + shape_str(qv.shape()) + ", " + shape_str(kv.shape()) +
                         ", " + shape_str(vv.shape()) + " do not match batch of " +
                         std::to_string(batch.rows()) + " rows");
  }
  if (d % n_heads != 0) throw DimensionError("attention: width not divisible by head count");
  const std::size_t dh = d / n_heads;
  std::size_t p = 0;
  if (prefix) {
    const Tensor& pk = prefix->first.value();
    const Tensor& pv = prefix->second.value();
    if (pk.rows() != pv.rows()) {
      throw ContractError("attention: prefix keys have " + std::to_string(pk.rows()) + " positions, values " +
                          std::to_string(pv.rows()));
    }
    if (pk.cols() != d || pv.cols() != d) {
      throw DimensionError("attention: prefix width " + shape_str(pk.shape()) + " does not match model width " +
                           std::to_string(d));
    }
    p = pk.rows();
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double neg_inf = -std::numeric_limits<double>::infinity();

  auto cache = std::make_shared<AttentionCache>();
  cache->probs.resize(batch.segments.size() * n_heads);
  Tensor out({batch.rows(), d});
  const Tensor* pk = prefix ? &prefix->first.value() : nullptr;
  const Tensor* pv = prefix ? &prefix->second.value() : nullptr;

  for (std::size_t s = 0; s < batch.segments.size(); ++s) {
    const auto [off, len] = batch.segments[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      RowMat& probs = cache->probs[s * n_heads + h];
      probs.resize(len, p + len);
      const auto qh = block(qv, off, len, c0, dh);
      if (p > 0) probs.leftCols(p).noalias() = qh * block(*pk, 0, p, c0, dh).transpose();
      probs.rightCols(len).noalias() = qh * block(kv, off, len, c0, dh).transpose();
      probs *= scale;
      for (std::size_t j = 0; j < len; ++j) {
        if (batch.key_mask[off + j]) probs.col(p + j).setConstant(neg_inf);
      }
      for (std::size_t i = 0; i < len; ++i) {
        auto row = probs.row(i);
        const double mx = row.maxCoeff();
        if (mx == neg_inf) {
          // Every key hidden: the query attends to nothing.
          row.setZero();
          continue;
        }
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      auto oh = block(out, off, len, c0, dh);
      oh.noalias() = probs.rightCols(len) * block(vv, off, len, c0, dh);
      if (p > 0) oh.noalias() += probs.leftCols(p) * block(*pv, 0, p, c0, dh);
    }
  }

  std::vector<NodeId> inputs{q.id, k.id, v.id};
  if (prefix) {
    inputs.push_back(prefix->first.id);
    inputs.push_back(prefix->second.id);
  }
  std::vector<Batch::Segment> segments = batch.segments;
  return q.tape->record(
      OpKind::kAttention, std::move(inputs), std::move(out),
      [cache, segments = std::move(segments), n_heads, dh, p, scale](const BackwardContext& ctx) {
        const Tensor& g = ctx.grad_out;
        const Tensor& qv = *ctx.inputs[0];
        const Tensor& kv = *ctx.inputs[1];
        const Tensor& vv = *ctx.inputs[2];
        const Tensor* pk = p > 0 ? ctx.inputs[3] : nullptr;
        const Tensor* pv = p > 0 ? ctx.inputs[4] : nullptr;
        Tensor* gq = ctx.grad_in[0];
        Tensor* gk = ctx.grad_in[1];
        Tensor* gv = ctx.grad_in[2];
        Tensor* gpk = p > 0 ? ctx.grad_in[3] : nullptr;
        Tensor* gpv = p > 0 ? ctx.grad_in[4] : nullptr;
        const bool need_scores = gq || gk || gpk;
        RowMat dscores;
        for (std::size_t s = 0; s < segments.size(); ++s) {
          const auto [off, len] = segments[s];
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dh;
            const RowMat& probs = cache->probs[s * n_heads + h];
            const auto gh = block(g, off, len, c0, dh);
            if (gv) block(*gv, off, len, c0, dh).noalias() += probs.rightCols(len).transpose() * gh;
            if (gpv) block(*gpv, 0, p, c0, dh).noalias() += probs.leftCols(p).transpose() * gh;
            if (!need_scores) continue;
            dscores.resize(len, p + len);
            dscores.rightCols(len).noalias() = gh * block(vv, off, len, c0, dh).transpose();
            if (p > 0) dscores.leftCols(p).noalias() = gh * block(*pv, 0, p, c0, dh).transpose();
            for (std::size_t i = 0; i < len; ++i) {
              const double dot = dscores.row(i).dot(probs.row(i));
              dscores.row(i) = probs.row(i).array() * (dscores.row(i).array() - dot);
            }
            dscores *= scale;
            if (gq) {
              auto gqh = block(*gq, off, len, c0, dh);
              gqh.noalias() += dscores.rightCols(len) * block(kv, off, len, c0, dh);
              if (p > 0) gqh.noalias() += dscores.leftCols(p) * block(*pk, 0, p, c0, dh);
            }
            const auto qh = block(qv, off, len, c0, dh);
            if (gk) block(*gk, off, len, c0, dh).noalias() += dscores.rightCols(len).transpose() * qh;
            if (gpk) block(*gpk, 0, p, c0, dh).noalias() += dscores.leftCols(p).transpose() * qh;
          }
        }
      });
}

Var attention_with_prefix(Var x, const LayerVars& layer, const std::pair<Var, Var>* past_layer,
                          const Batch& batch, std::size_t n_heads) {
  Var q = matmul(x, layer.wq);
  Var k = matmul(x, layer.wk);
  Var v = matmul(x, layer.wv);
  return matmul(multi_head_attention(q, k, v, past_layer, batch, n_heads), layer.wo);
}

EncoderOutput encode(const ModelConfig& config, const EncoderVars& params, const Batch& batch,
                     const PastKVVars* past) {
  if (past && past->length > 0 && past->layers.size() != config.n_layers) {
    throw ContractError("past key/values cover " + std::to_string(past->layers.size()) + " layers, model has " +
                        std::to_string(config.n_layers));
  }
  Var x = add(gather_rows(params.token_embeddings,
                          std::vector<std::size_t>(batch.tokens.begin(), batch.tokens.end())),
              gather_rows(params.position_embeddings, batch.positions));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const LayerVars& layer = params.layers[l];
    const std::pair<Var, Var>* prefix = (past && past->length > 0) ? &past->layers[l] : nullptr;
    Var h = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    x = add(x, attention_with_prefix(h, layer, prefix, batch, config.n_heads));
    Var h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
    x = add(x, matmul(gelu(matmul(h2, layer.w1)), layer.w2));
  }
  Var hidden = layer_norm(x, params.final_ln_gain, params.final_ln_bias);
  Var cls = gather_rows(hidden, batch.cls_rows());
  return {hidden, cls};
}

Var classify(Var cls, const HeadVars& head) { return add_row(matmul(cls, head.weight), head.bias); }

Var mlm_logits(Var hidden, const EncoderVars& params) {
  return add_row(matmul(hidden, transpose(params.token_embeddings)), params.mlm_bias);
}

ForwardResult forward(const ModelConfig& config, std::span<const int> tokens, const EncoderParams& params,
                      const PastKV* past, std::span<const std::uint8_t> pad_mask) {
  const std::vector<int> seq(tokens.begin(), tokens.end());
  std::vector<std::vector<std::uint8_t>> masks;
  if (!pad_mask.empty()) masks.emplace_back(pad_mask.begin(), pad_mask.end());
  const Batch batch = make_batch(config, std::span(&seq, 1), masks);
  Tape tape;
  const EncoderVars vars = bind(tape, params, false);
  std::optional<PastKVVars> past_vars;
  if (past) past_vars = bind(tape, *past, false);
  const EncoderOutput out = encode(config, vars, batch, past_vars ? &*past_vars : nullptr);
  const Tensor& cls = out.cls.value();
  return {out.hidden.value(), Tensor({cls.size()}, cls.vec())};
}

Tensor classify(const Tensor& cls, const ClassifierHead& head) {
  const Tensor row({1, cls.size()}, cls.vec());
  Tensor logits = matmul(row, head.weight);
  for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += head.bias[c];
  return Tensor({logits.size()}, logits.vec());
}

}  // namespace xptlab
