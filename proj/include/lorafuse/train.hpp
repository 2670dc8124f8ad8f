// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/adapter.hpp"
#include "lorafuse/error.hpp"
#include "lorafuse/model.hpp"
#include "lorafuse/records.hpp"

namespace lorafuse {

enum class Optimizer { adamw, sgd };

inline Optimizer parse_optimizer(const std::string& name) {
  if (name == "adamw" || name == "adam") return Optimizer::adamw;
  if (name == "sgd") return Optimizer::sgd;
  throw ConfigError("unknown optimizer '" + name + "' (expected adamw|sgd)");
}

inline const char* to_string(Optimizer o) { return o == Optimizer::adamw ? "adamw" : "sgd"; }

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 10;
  int batch_size = 1;
  int rank = 8;
  double alpha = 32.0;
  double dropout = 0.05;
  std::uint64_t seed = 42;
  Optimizer optimizer = Optimizer::adamw;
  double weight_decay = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
       {"rank", c.rank},   {"alpha", c.alpha},   {"dropout", c.dropout},
       {"seed", c.seed},   {"optimizer", to_string(c.optimizer)}, {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.rank = j.value("rank", c.rank);
  c.alpha = j.value("alpha", c.alpha);
  c.dropout = j.value("dropout", c.dropout);
  c.seed = j.value("seed", c.seed);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j["optimizer"].get<std::string>());
  c.weight_decay = j.value("weight_decay", c.weight_decay);
}

/// Fresh adapter on every Q/K/V projection: A ~ N(0, 4/d_in), B = 0, so the
/// initial update is exactly zero. The wider A speeds up the first epochs.
inline LoraAdapter init_lora_adapter(const ModelWeights& w, int rank, double alpha, std::uint64_t seed,
                                     std::string name = "adapter") {
  std::mt19937_64 rng(seed);
  LoraAdapter adapter{std::move(name), {}};
  const auto r = static_cast<std::size_t>(rank);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    for (Projection p : kProjections) {
      const Matrix& base = w.blocks[l].projection(p);
      std::normal_distribution<double> dist(0.0, 2.0 / std::sqrt(static_cast<double>(base.cols())));
      Matrix a(base.rows(), r);
      for (double& v : a.data()) v = dist(rng);
      adapter.layers.emplace(module_id(l, p), LoraLayer{std::move(a), Matrix(r, base.cols()), rank, alpha});
    }
  }
  return adapter;
}

inline std::vector<EncodedTurn> encode_dataset(const ModelConfig& cfg, const std::vector<InstructionExample>& data) {
  std::vector<EncodedTurn> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    if (!CharTokenizer::encodable(ex.user) || !CharTokenizer::encodable(ex.assistant)) {
      throw DataError("example " + std::to_string(i) + " contains characters outside the tokenizer alphabet");
    }
    auto turn = encode_turn(ex.user, ex.assistant);
    if (turn.inputs.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
      throw DataError("example " + std::to_string(i) + " needs " + std::to_string(turn.inputs.size()) +
                      " positions, more than max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    out.push_back(std::move(turn));
  }
  return out;
}

inline double turn_loss(const ModelWeights& w, const LoraAdapter* adapter, const EncodedTurn& turn) {
  return cross_entropy_loss(forward(w, adapter, turn.inputs), turn.targets);
}

/// Mean per-example loss without dropout.
inline double dataset_loss(const ModelWeights& w, const LoraAdapter* adapter, const std::vector<EncodedTurn>& turns) {
  double total = 0.0;
  for (const auto& t : turns) total += turn_loss(w, adapter, t);
  return total / static_cast<double>(turns.size());
}

/// Loss and factor gradients for one turn.
inline double loss_and_grad(const ModelWeights& w, const LoraAdapter& adapter, const EncodedTurn& turn,
                            AdapterGrad& grad, LoraDropout dropout = {}) {
  ForwardTrace trace;
  const Matrix logits = forward(w, &adapter, turn.inputs, &trace, dropout);
  Matrix d_logits;
  const double loss = cross_entropy_loss(logits, turn.targets, &d_logits);
  grad = backward(w, trace, d_logits);
  return loss;
}

struct TrainResult {
  LoraAdapter adapter;
  /// loss_curve[0] is the loss before training, loss_curve[e] after epoch e.
  std::vector<double> loss_curve;
};

namespace detail {

struct AdamState {
  std::map<std::string, LoraGrad> m, v;
  long step = 0;
};

inline void apply_update(LoraAdapter& adapter, const AdapterGrad& grad, const TrainConfig& cfg, AdamState& state) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [id, layer] : adapter.layers) {
    const auto& g = grad.at(id);
    auto update = [&](Matrix& param, const Matrix& gp, Matrix& m, Matrix& v) {
      if (cfg.optimizer == Optimizer::sgd) {
        param = axpy(-cfg.learning_rate, gp, param);
        return;
      }
      if (m.empty()) {
        m = Matrix(param.rows(), param.cols());
        v = Matrix(param.rows(), param.cols());
      }
      for (std::size_t i = 0; i < param.size(); ++i) {
        const double gi = gp.data()[i];
        m.data()[i] = beta1 * m.data()[i] + (1.0 - beta1) * gi;
        v.data()[i] = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
        const double step = (m.data()[i] / bc1) / (std::sqrt(v.data()[i] / bc2) + eps);
        param.data()[i] -= cfg.learning_rate * (step + cfg.weight_decay * param.data()[i]);
      }
    };
    auto& ms = state.m[id];
    auto& vs = state.v[id];
    update(layer.a, g.a, ms.a, vs.a);
    update(layer.b, g.b, ms.b, vs.b);
  }
}

inline void accumulate(AdapterGrad& acc, const AdapterGrad& g, double weight) {
  for (const auto& [id, lg] : g) {
    auto it = acc.find(id);
    if (it == acc.end()) {
      acc.emplace(id, LoraGrad{scale(weight, lg.a), scale(weight, lg.b)});
    } else {
      it->second.a = axpy(weight, lg.a, it->second.a);
      it->second.b = axpy(weight, lg.b, it->second.b);
    }
  }
}

}  // namespace detail

/// Trains LoRA factors on Q/K/V with the base frozen. Examples are visited in
/// a seeded shuffle each epoch; dropout hits the LoRA branch inputs only.
inline TrainResult train_lora(const ModelWeights& base, const std::vector<InstructionExample>& data,
                              const TrainConfig& cfg, std::string name = "adapter") {
  cfg.validate();
  if (data.empty()) throw DataError("training data is empty");
  const auto turns = encode_dataset(base.config, data);

  std::mt19937_64 rng(cfg.seed);
  TrainResult result{init_lora_adapter(base, cfg.rank, cfg.alpha, rng(), std::move(name)), {}};
  std::mt19937_64 dropout_rng(rng());
  std::mt19937_64 order_rng(rng());

  result.loss_curve.push_back(dataset_loss(base, &result.adapter, turns));
  detail::AdamState state;
  std::vector<std::size_t> order(turns.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      AdapterGrad batch;
      for (std::size_t i = start; i < stop; ++i) {
        AdapterGrad g;
        const double loss = loss_and_grad(base, result.adapter, turns[order[i]], g,
                                          LoraDropout{cfg.dropout, &dropout_rng});
        if (!std::isfinite(loss)) throw TrainingError("loss diverged in epoch " + std::to_string(epoch), epoch);
        detail::accumulate(batch, g, 1.0 / static_cast<double>(stop - start));
      }
      detail::apply_update(result.adapter, batch, cfg, state);
    }
    const double epoch_loss = dataset_loss(base, &result.adapter, turns);
    if (!std::isfinite(epoch_loss)) throw TrainingError("loss diverged in epoch " + std::to_string(epoch), epoch);
    result.loss_curve.push_back(epoch_loss);
  }
  return result;
}

struct GradientCheckOptions {
  int samples = 32;
  std::uint64_t seed = 7;
  /// Multiplies the analytic gradient; anything other than 1 is a fault
  /// injection used to prove the check can fail.
  double gradient_scale = 1.0;
  /// Denominator floor for the relative error of near-zero gradients.
  double floor = 1e-6;
};

/// Max over sampled A/B coordinates of |analytic - numeric| / max(|numeric|, floor),
/// with central differences of step epsilon and dropout disabled.
inline double gradient_check(const ModelWeights& w, const LoraAdapter& adapter, const InstructionExample& datum,
                             double epsilon, const GradientCheckOptions& opts = {}) {
  const auto turn = encode_dataset(w.config, {datum}).front();
  AdapterGrad grad;
  loss_and_grad(w, adapter, turn, grad);

  struct Coordinate {
    std::string id;
    bool is_a;
    std::size_t index;
  };
  std::vector<Coordinate> all;
  for (const auto& [id, layer] : adapter.layers) {
    for (std::size_t i = 0; i < layer.a.size(); ++i) all.push_back({id, true, i});
    for (std::size_t i = 0; i < layer.b.size(); ++i) all.push_back({id, false, i});
  }
  std::mt19937_64 rng(opts.seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(opts.samples)));

  double worst = 0.0;
  LoraAdapter probe = adapter;
  for (const auto& c : all) {
    auto& layer = probe.layers.at(c.id);
    double& slot = (c.is_a ? layer.a : layer.b).data()[c.index];
    const double saved = slot;
    slot = saved + epsilon;
    const double up = turn_loss(w, &probe, turn);
    slot = saved - epsilon;
    const double down = turn_loss(w, &probe, turn);
    slot = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const auto& g = grad.at(c.id);
    const double analytic = opts.gradient_scale * (c.is_a ? g.a : g.b).data()[c.index];
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(numeric), opts.floor));
  }
  return worst;
}

}  // namespace lorafuse
