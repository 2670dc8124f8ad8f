// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

// Tiny pre-norm decoder-only transformer used as the desk-scale base model.
// LoRA updates attach to the Q, K and V projections only.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/adapter.hpp"
#include "lorafuse/container.hpp"
#include "lorafuse/error.hpp"
#include "lorafuse/fusion.hpp"
#include "lorafuse/matrix.hpp"
#include "lorafuse/tokenizer.hpp"

namespace lorafuse {

struct ModelConfig {
  int vocab_size = CharTokenizer::kVocabSize;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int max_seq_len = 128;
  std::uint64_t seed = 1234;

  int d_head() const { return d_model / n_heads; }
  int d_ff() const { return 4 * d_model; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size < 4 || vocab_size > 512) fail("vocab_size must be in [4, 512]");
    if (d_model < 1 || d_model > 64) fail("d_model must be in [1, 64]");
    if (n_heads < 1 || d_model % n_heads != 0) fail("n_heads must divide d_model");
    if (n_layers < 1 || n_layers > 4) fail("n_layers must be in [1, 4]");
    if (max_seq_len < 1 || max_seq_len > 128) fail("max_seq_len must be in [1, 128]");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
       {"n_layers", c.n_layers},     {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.seed = j.value("seed", c.seed);
}

struct BlockWeights {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;  // d_model x d_model, (out x in)
  Matrix ln2_gain, ln2_bias;
  Matrix w1, b1;  // d_ff x d_model, 1 x d_ff
  Matrix w2, b2;  // d_model x d_ff, 1 x d_model

  Matrix& projection(Projection p) { return p == Projection::q ? wq : p == Projection::k ? wk : wv; }
  const Matrix& projection(Projection p) const {
    return p == Projection::q ? wq : p == Projection::k ? wk : wv;
  }

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_seq_len x d_model
  std::vector<BlockWeights> blocks;
  Matrix final_gain, final_bias;
  Matrix unembedding;  // vocab x d_model

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

inline constexpr Projection kProjections[] = {Projection::q, Projection::k, Projection::v};

/// Every tensor with a stable name, in serialization order.
template <class Weights, class Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
  fn("token_embedding", w.token_embedding);
  fn("position_embedding", w.position_embedding);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    fn(p + "ln1.gain", b.ln1_gain);
    fn(p + "ln1.bias", b.ln1_bias);
    fn(p + "attn.q_proj", b.wq);
    fn(p + "attn.k_proj", b.wk);
    fn(p + "attn.v_proj", b.wv);
    fn(p + "attn.o_proj", b.wo);
    fn(p + "ln2.gain", b.ln2_gain);
    fn(p + "ln2.bias", b.ln2_bias);
    fn(p + "mlp.w1", b.w1);
    fn(p + "mlp.b1", b.b1);
    fn(p + "mlp.w2", b.w2);
    fn(p + "mlp.b2", b.b2);
  }
  fn("final.gain", w.final_gain);
  fn("final.bias", w.final_bias);
  fn("unembedding", w.unembedding);
}

inline std::uint32_t checksum(const ModelWeights& w) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for_each_tensor(w, [&](const std::string&, const Matrix& m) {
    const std::uint32_t c = checksum(m);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(&c), sizeof(c));
  });
  return static_cast<std::uint32_t>(crc);
}

inline constexpr double kEmbeddingStd = 0.2;

/// Deterministic initialization from config.seed: Gaussian weights, small
/// token embeddings and fixed sinusoidal positions (so relative offsets are a
/// low-rank function that rank-8 Q/K updates can pick up). Entries are
/// rounded to float32 so a BASE container round-trip is lossless.
inline ModelWeights init_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff());
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto t = static_cast<std::size_t>(config.max_seq_len);

  auto gaussian = [&](std::size_t rows, std::size_t cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& x : m.data()) x = static_cast<float>(dist(rng));
    return m;
  };
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));

  ModelWeights w;
  w.config = config;
  w.token_embedding = gaussian(v, d, kEmbeddingStd);
  w.position_embedding = Matrix(t, d);
  for (std::size_t pos = 0; pos < t; ++pos) {
    for (std::size_t i = 0; i + 1 < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      w.position_embedding(pos, i) = static_cast<float>(kEmbeddingStd * std::sin(pos * freq));
      w.position_embedding(pos, i + 1) = static_cast<float>(kEmbeddingStd * std::cos(pos * freq));
    }
  }
  for (int l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.ln1_gain = Matrix(1, d, 1.0);
    b.ln1_bias = Matrix(1, d, 0.0);
    b.wq = gaussian(d, d, proj_std);
    b.wk = gaussian(d, d, proj_std);
    b.wv = gaussian(d, d, proj_std);
    b.wo = gaussian(d, d, proj_std);
    b.ln2_gain = Matrix(1, d, 1.0);
    b.ln2_bias = Matrix(1, d, 0.0);
    b.w1 = gaussian(f, d, proj_std);
    b.b1 = Matrix(1, f, 0.0);
    b.w2 = gaussian(d, f, 1.0 / std::sqrt(static_cast<double>(f)));
    b.b2 = Matrix(1, d, 0.0);
    w.blocks.push_back(std::move(b));
  }
  w.final_gain = Matrix(1, d, 1.0);
  w.final_bias = Matrix(1, d, 0.0);
  w.unembedding = gaussian(v, d, proj_std);
  return w;
}

/// The LoRA-targetable Q/K/V weights keyed by module id.
inline WeightMap attention_weights(const ModelWeights& w) {
  WeightMap out;
  for (std::size_t l = 0; l < w.blocks.size(); ++l)
    for (Projection p : kProjections) out.emplace(module_id(l, p), w.blocks[l].projection(p));
  return out;
}

inline ModelWeights with_attention_weights(ModelWeights w, const WeightMap& attention) {
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    for (Projection p : kProjections) {
      auto it = attention.find(module_id(l, p));
      if (it == attention.end()) continue;
      if (!it->second.same_shape(w.blocks[l].projection(p)))
        throw ShapeError("attention weight " + it->first + " has shape " + it->second.shape());
      w.blocks[l].projection(p) = it->second;
    }
  }
  return w;
}

/// Folds an adapter (or a dense delta set) into the Q/K/V weights.
template <class Update>
ModelWeights merge_adapter(const ModelWeights& w, const Update& update) {
  return with_attention_weights(w, merge_into_base(attention_weights(w), update));
}

// ---------------------------------------------------------------------------
// Serialization in the LORAFUS1 container, section "BASE".

inline void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
  Container c;
  c.section = std::string(kSectionBase);
  c.meta = {{"config", w.config}};
  for_each_tensor(w, [&](const std::string& name, const Matrix& m) { c.tensors.push_back({name, m}); });
  write_file_bytes(path, encode_container(c));
}

inline ModelWeights load_weights(const std::filesystem::path& path) {
  Container c = decode_container(read_file_bytes(path));
  if (c.section != kSectionBase) {
    throw FormatError(FormatErrorKind::malformed_header, "section '" + c.section + "' is not BASE");
  }
  ModelWeights w;
  try {
    w = init_model(c.meta.at("config").get<ModelConfig>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header, e.what());
  } catch (const ConfigError& e) {
    throw FormatError(FormatErrorKind::validation, e.what());
  }
  std::size_t i = 0;
  for_each_tensor(w, [&](const std::string& name, Matrix& m) {
    if (i >= c.tensors.size() || c.tensors[i].name != name || !c.tensors[i].value.same_shape(m)) {
      throw FormatError(FormatErrorKind::validation, "BASE tensor '" + name + "' missing or misshapen");
    }
    m = std::move(c.tensors[i++].value);
  });
  if (i != c.tensors.size()) throw FormatError(FormatErrorKind::validation, "unexpected extra BASE tensors");
  return w;
}

// ---------------------------------------------------------------------------
// Forward pass.

inline constexpr double kLayerNormEps = 1e-5;

/// Per-projection LoRA activations kept for the backward pass.
struct LoraTrace {
  const LoraLayer* layer = nullptr;
  Matrix input;  // dropout-masked block input (T x d_in)
  Matrix mask;   // inverted-dropout multipliers; empty when dropout is off
  Matrix low;    // input * B^T (T x rank)
};

struct BlockTrace {
  Matrix x_in;
  Matrix ln1_hat, ln1_inv_std;  // T x d, T x 1
  Matrix h1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix attn;                // concatenated heads, T x d
  Matrix x_mid;
  Matrix ln2_hat, ln2_inv_std;
  Matrix h2;
  Matrix pre_act, act;  // T x d_ff
  LoraTrace lora[3];
};

struct ForwardTrace {
  std::vector<BlockTrace> blocks;
  Matrix x_final;
  Matrix final_hat, final_inv_std;
  Matrix h_final;
};

/// Dropout applied to LoRA branch inputs; only active in training.
struct LoraDropout {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};

namespace detail {

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* hat_out,
                         Matrix* inv_std_out) {
  const std::size_t n = x.cols();
  Matrix out(x.rows(), n);
  Matrix hat(x.rows(), n);
  Matrix inv_std(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std(i, 0) = is;
    for (std::size_t j = 0; j < n; ++j) {
      hat(i, j) = (row[j] - mean) * is;
      out(i, j) = hat(i, j) * gain(0, j) + bias(0, j);
    }
  }
  if (hat_out) *hat_out = std::move(hat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return out;
}

inline Matrix layer_norm_backward(const Matrix& grad_out, const Matrix& hat, const Matrix& inv_std,
                                  const Matrix& gain) {
  const std::size_t n = grad_out.cols();
  Matrix dx(grad_out.rows(), n);
  for (std::size_t i = 0; i < grad_out.rows(); ++i) {
    double mean_g = 0.0, mean_gh = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double g = grad_out(i, j) * gain(0, j);
      mean_g += g;
      mean_gh += g * hat(i, j);
    }
    mean_g /= static_cast<double>(n);
    mean_gh /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      const double g = grad_out(i, j) * gain(0, j);
      dx(i, j) = inv_std(i, 0) * (g - mean_g - hat(i, j) * mean_gh);
    }
  }
  return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

inline double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

inline void add_row_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += bias(0, j);
}

/// h * W^T plus the LoRA branch s * ((drop(h) * B^T) * A^T) when a layer is given.
inline Matrix project(const Matrix& h, const Matrix& weight, const LoraLayer* lora, const LoraDropout& dropout,
                      LoraTrace* trace) {
  Matrix out = matmul_nt(h, weight);
  if (lora == nullptr) return out;
  if (lora->in_features() != weight.cols() || lora->out_features() != weight.rows()) {
    throw InputError("adapter layer shape " +
                     Matrix::shape_string(lora->out_features(), lora->in_features()) +
                     " does not match projection " + weight.shape());
  }
  Matrix input = h;
  Matrix mask;
  if (dropout.active()) {
    std::bernoulli_distribution keep(1.0 - dropout.rate);
    mask = Matrix(h.rows(), h.cols());
    const double inv_keep = 1.0 / (1.0 - dropout.rate);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask.data()[i] = keep(*dropout.rng) ? inv_keep : 0.0;
      input.data()[i] *= mask.data()[i];
    }
  }
  Matrix low = matmul_nt(input, lora->b);
  const Matrix up = matmul_nt(low, lora->a);
  out = axpy(lora->scale(), up, out);
  if (trace) *trace = LoraTrace{lora, std::move(input), std::move(mask), std::move(low)};
  return out;
}

inline const LoraLayer* find_layer(const LoraAdapter* adapter, std::size_t block, Projection p) {
  if (adapter == nullptr) return nullptr;
  auto it = adapter->layers.find(module_id(block, p));
  return it == adapter->layers.end() ? nullptr : &it->second;
}

inline void check_adapter_targets(const ModelWeights& w, const LoraAdapter& adapter) {
  for (const auto& [id, layer] : adapter.layers) {
    bool known = false;
    for (std::size_t l = 0; l < w.blocks.size() && !known; ++l)
      for (Projection p : kProjections) known = known || module_id(l, p) == id;
    if (!known) throw InputError("adapter targets unknown module '" + id + "'");
  }
}

}  // namespace detail

inline void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (tokens.size() > static_cast<std::size_t>(config.max_seq_len)) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (int t : tokens)
    if (t < 0 || t >= config.vocab_size) throw InputError("token id " + std::to_string(t) + " is out of vocabulary");
}

/// Causal forward pass; returns seq_len x vocab logits. When `adapter` is
/// given, each of its Q/K/V layers adds its low-rank update. `trace`, when
/// non-null, receives the activations needed by backward().
inline Matrix forward(const ModelWeights& w, const LoraAdapter* adapter, std::span<const int> tokens,
                      ForwardTrace* trace = nullptr, LoraDropout dropout = {}) {
  const auto& cfg = w.config;
  check_tokens(cfg, tokens);
  if (adapter) detail::check_adapter_targets(w, *adapter);

  const std::size_t seq = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix x(seq, d);
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x(t, j) = w.token_embedding(static_cast<std::size_t>(tokens[t]), j) + w.position_embedding(t, j);

  if (trace) trace->blocks.assign(w.blocks.size(), BlockTrace{});
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& blk = w.blocks[l];
    BlockTrace local;
    BlockTrace& bt = trace ? trace->blocks[l] : local;
    bt.x_in = x;

    bt.h1 = detail::layer_norm(x, blk.ln1_gain, blk.ln1_bias, &bt.ln1_hat, &bt.ln1_inv_std);
    bt.q = detail::project(bt.h1, blk.wq, detail::find_layer(adapter, l, Projection::q), dropout, &bt.lora[0]);
    bt.k = detail::project(bt.h1, blk.wk, detail::find_layer(adapter, l, Projection::k), dropout, &bt.lora[1]);
    bt.v = detail::project(bt.h1, blk.wv, detail::find_layer(adapter, l, Projection::v), dropout, &bt.lora[2]);

    bt.attn = Matrix(seq, d);
    bt.probs.assign(heads, Matrix());
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix p(seq, seq);
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += bt.q(i, c0 + c) * bt.k(j, c0 + c);
          p(i, j) = s * inv_sqrt_dh;
          row_max = std::max(row_max, p(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - row_max);
          z += p(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) p(i, j) /= z;
        for (std::size_t j = 0; j <= i; ++j) {
          const double pij = p(i, j);
          for (std::size_t c = 0; c < dh; ++c) bt.attn(i, c0 + c) += pij * bt.v(j, c0 + c);
        }
      }
      bt.probs[h] = std::move(p);
    }
    x = add(x, matmul_nt(bt.attn, blk.wo));
    bt.x_mid = x;

    bt.h2 = detail::layer_norm(x, blk.ln2_gain, blk.ln2_bias, &bt.ln2_hat, &bt.ln2_inv_std);
    bt.pre_act = matmul_nt(bt.h2, blk.w1);
    detail::add_row_bias(bt.pre_act, blk.b1);
    bt.act = bt.pre_act;
    for (double& u : bt.act.data()) u = detail::gelu(u);
    Matrix mlp = matmul_nt(bt.act, blk.w2);
    detail::add_row_bias(mlp, blk.b2);
    x = add(x, mlp);
  }

  Matrix hat, inv_std;
  Matrix h_final = detail::layer_norm(x, w.final_gain, w.final_bias, &hat, &inv_std);
  Matrix logits = matmul_nt(h_final, w.unembedding);
  if (trace) {
    trace->x_final = std::move(x);
    trace->final_hat = std::move(hat);
    trace->final_inv_std = std::move(inv_std);
    trace->h_final = std::move(h_final);
  }
  return logits;
}

inline Matrix forward(const ModelWeights& w, const LoraAdapter* adapter, std::initializer_list<int> tokens) {
  return forward(w, adapter, std::span<const int>(tokens.begin(), tokens.size()));
}

/// Gradients of a LoRA layer's factors.
struct LoraGrad {
  Matrix a;
  Matrix b;
};

using AdapterGrad = std::map<std::string, LoraGrad>;

/// Backpropagates dL/dlogits through the frozen network and returns the
/// gradients of every attached LoRA factor.
inline AdapterGrad backward(const ModelWeights& w, const ForwardTrace& trace, const Matrix& grad_logits) {
  const auto& cfg = w.config;
  const std::size_t seq = grad_logits.rows();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  AdapterGrad grads;
  Matrix dh_final = matmul(grad_logits, w.unembedding);
  Matrix dx = detail::layer_norm_backward(dh_final, trace.final_hat, trace.final_inv_std, w.final_gain);

  for (std::size_t li = w.blocks.size(); li-- > 0;) {
    const auto& blk = w.blocks[li];
    const auto& bt = trace.blocks[li];

    // MLP residual branch.
    Matrix d_act = matmul(dx, blk.w2);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act.data()[i] *= detail::gelu_grad(bt.pre_act.data()[i]);
    const Matrix dh2 = matmul(d_act, blk.w1);
    dx = add(dx, detail::layer_norm_backward(dh2, bt.ln2_hat, bt.ln2_inv_std, blk.ln2_gain));

    // Attention residual branch.
    const Matrix d_attn = matmul(dx, blk.wo);
    Matrix dq(seq, d), dk(seq, d), dv(seq, d);
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix& p = bt.probs[h];
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        std::vector<double> dp(i + 1, 0.0);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += d_attn(i, c0 + c) * bt.v(j, c0 + c);
            dv(j, c0 + c) += p(i, j) * d_attn(i, c0 + c);
          }
          dp[j] = s;
          dot += p(i, j) * s;
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = p(i, j) * (dp[j] - dot) * inv_sqrt_dh;
          if (ds == 0.0) continue;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(i, c0 + c) += ds * bt.k(j, c0 + c);
            dk(j, c0 + c) += ds * bt.q(i, c0 + c);
          }
        }
      }
    }

    Matrix dh1 = matmul(dq, blk.wq);
    dh1 = add(dh1, matmul(dk, blk.wk));
    dh1 = add(dh1, matmul(dv, blk.wv));
    const Matrix* d_proj[3] = {&dq, &dk, &dv};
    for (int pi = 0; pi < 3; ++pi) {
      const LoraTrace& lt = bt.lora[pi];
      if (lt.layer == nullptr) continue;
      const double s = lt.layer->scale();
      const Matrix& dout = *d_proj[pi];
      // out += s * low * A^T, low = input * B^T
      LoraGrad g;
      g.a = scale(s, matmul_tn(dout, lt.low));
      const Matrix d_low = scale(s, matmul(dout, lt.layer->a));
      g.b = matmul_tn(d_low, lt.input);
      Matrix d_input = matmul(d_low, lt.layer->b);
      if (!lt.mask.empty())
        for (std::size_t i = 0; i < d_input.size(); ++i) d_input.data()[i] *= lt.mask.data()[i];
      dh1 = add(dh1, d_input);
      grads.emplace(module_id(li, kProjections[pi]), std::move(g));
    }
    dx = add(dx, detail::layer_norm_backward(dh1, bt.ln1_hat, bt.ln1_inv_std, blk.ln1_gain));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Loss and decoding.

inline constexpr int kIgnoreTarget = -1;

/// Mean next-token negative log-likelihood over positions whose target is
/// not kIgnoreTarget. Optionally writes dL/dlogits.
inline double cross_entropy_loss(const Matrix& logits, std::span<const int> targets, Matrix* grad = nullptr) {
  if (logits.rows() != targets.size()) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(logits.rows()) + " logit rows vs " +
                     std::to_string(targets.size()) + " targets");
  }
  std::size_t counted = 0;
  for (int t : targets) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) throw ShapeError("target id out of range");
    ++counted;
  }
  if (counted == 0) throw ShapeError("cross_entropy_loss: no scored targets");
  if (grad) *grad = Matrix(logits.rows(), logits.cols());

  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (targets[i] == kIgnoreTarget) continue;
    const auto row = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    total += log_z - row[static_cast<std::size_t>(targets[i])];
    if (grad) {
      for (std::size_t j = 0; j < row.size(); ++j)
        (*grad)(i, j) = std::exp(row[j] - log_z) / static_cast<double>(counted);
      (*grad)(i, static_cast<std::size_t>(targets[i])) -= 1.0 / static_cast<double>(counted);
    }
  }
  return total / static_cast<double>(counted);
}

inline double cross_entropy_loss(const Matrix& logits, std::initializer_list<int> targets) {
  return cross_entropy_loss(logits, std::span<const int>(targets.begin(), targets.size()));
}

/// Lowest index among the maximal entries.
inline int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

/// Greedy decoding. Returns prompt + generated tokens; stops after max_new
/// tokens, after emitting EOS, or when max_seq_len is reached.
inline std::vector<int> generate(const ModelWeights& w, const LoraAdapter* adapter, std::span<const int> prompt,
                                 int max_new, int eos = CharTokenizer::kEos) {
  check_tokens(w.config, prompt);
  std::vector<int> tokens(prompt.begin(), prompt.end());
  for (int step = 0; step < max_new; ++step) {
    if (tokens.size() >= static_cast<std::size_t>(w.config.max_seq_len)) break;
    const Matrix logits = forward(w, adapter, tokens);
    const int next = argmax(logits.row(logits.rows() - 1));
    tokens.push_back(next);
    if (next == eos) break;
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Chat framing: BOS user SEP assistant EOS.

inline std::vector<int> encode_prompt(const std::string& user) {
  std::vector<int> out{CharTokenizer::kBos};
  const auto body = CharTokenizer::encode(user);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(CharTokenizer::kSeparator);
  return out;
}

/// Model input and next-token targets for one turn; only assistant tokens
/// (and the closing EOS) are scored.
struct EncodedTurn {
  std::vector<int> inputs;
  std::vector<int> targets;
};

inline EncodedTurn encode_turn(const std::string& user, const std::string& assistant) {
  std::vector<int> full = encode_prompt(user);
  const std::size_t prompt_len = full.size();
  const auto reply = CharTokenizer::encode(assistant);
  full.insert(full.end(), reply.begin(), reply.end());
  full.push_back(CharTokenizer::kEos);

  EncodedTurn turn;
  turn.inputs.assign(full.begin(), full.end() - 1);
  turn.targets.resize(turn.inputs.size(), kIgnoreTarget);
  for (std::size_t t = prompt_len - 1; t < turn.inputs.size(); ++t) turn.targets[t] = full[t + 1];
  return turn;
}

/// Generated reply text for a user prompt (prompt and EOS stripped).
inline std::string respond(const ModelWeights& w, const LoraAdapter* adapter, const std::string& user, int max_new) {
  const auto prompt = encode_prompt(user);
  const auto tokens = generate(w, adapter, prompt, max_new);
  return CharTokenizer::decode(std::span<const int>(tokens).subspan(prompt.size()));
}

}  // namespace lorafuse
