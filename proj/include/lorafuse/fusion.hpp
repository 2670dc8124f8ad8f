// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lorafuse/adapter.hpp"
#include "lorafuse/error.hpp"
#include "lorafuse/matrix.hpp"

namespace lorafuse {

enum class FusionStrategy { concatenation, linear };

inline const char* to_string(FusionStrategy s) {
  return s == FusionStrategy::concatenation ? "concatenation" : "linear";
}

inline FusionStrategy parse_strategy(const std::string& text) {
  if (text == "concatenation" || text == "concat") return FusionStrategy::concatenation;
  if (text == "linear") return FusionStrategy::linear;
  throw ConfigError("unknown fusion strategy '" + text + "' (expected concatenation|linear)");
}

inline constexpr double kNormalizedSumTolerance = 1e-12;

/// Per-adapter fusion weights. For the task/safety pair the order is
/// [task, safety] = [1 - lambda, lambda].
struct FusionSpec {
  FusionStrategy strategy = FusionStrategy::concatenation;
  std::vector<double> weights;
  bool normalized = true;

  static FusionSpec task_safety(double lambda,
                                FusionStrategy strategy = FusionStrategy::concatenation) {
    return {strategy, {1.0 - lambda, lambda}, true};
  }

  /// Un-normalized regime: task weight held fixed, safety weight free.
  static FusionSpec unnormalized(double task_weight, double safety_weight,
                                 FusionStrategy strategy = FusionStrategy::concatenation) {
    return {strategy, {task_weight, safety_weight}, false};
  }

  void validate(std::size_t n_adapters) const {
    if (weights.size() != n_adapters) {
      throw FusionError("fusion arity mismatch: " + std::to_string(weights.size()) +
                        " weights for " + std::to_string(n_adapters) + " adapters");
    }
    double sum = 0.0;
    for (double w : weights) {
      if (!std::isfinite(w) || w < 0.0) throw FusionError("fusion weights must be finite and non-negative");
      if (normalized && w > 1.0) throw FusionError("normalized fusion weights must lie in [0, 1]");
      sum += w;
    }
    if (normalized && std::abs(sum - 1.0) > kNormalizedSumTolerance) {
      throw FusionError("normalized fusion weights must sum to 1, got " + std::to_string(sum));
    }
  }
};

/// Scales non-negative weights to sum to one.
inline std::vector<double> normalize_weights(std::span<const double> weights) {
  double sum = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw NormalizationError("weights must be finite and non-negative");
    sum += w;
  }
  if (!(sum > 0.0)) throw NormalizationError("weights sum to zero");
  std::vector<double> out;
  out.reserve(weights.size());
  for (double w : weights) out.push_back(w / sum);
  return out;
}

inline std::vector<double> normalize_weights(std::initializer_list<double> weights) {
  return normalize_weights(std::span<const double>(weights.begin(), weights.size()));
}

/// Checks that all adapters target the same modules with matching shapes.
/// Throws on structural mismatch; returns warnings (mixed ranks) otherwise.
inline std::vector<Finding> check_fusion_inputs(std::span<const LoraAdapter> adapters) {
  if (adapters.empty()) throw FusionError("fusion needs at least one adapter");
  std::vector<Finding> warnings;
  for (const auto& adapter : adapters) {
    for (const auto& f : validate_adapter(adapter)) {
      if (f.severity == Severity::error) throw FusionError(adapter.name + ": " + f.to_string());
      warnings.push_back(f);
    }
  }

  std::set<std::string> all;
  for (const auto& adapter : adapters)
    for (const auto& [id, _] : adapter.layers) all.insert(id);
  std::vector<std::string> asymmetric;
  for (const auto& id : all) {
    bool everywhere = true;
    for (const auto& adapter : adapters) everywhere = everywhere && adapter.layers.contains(id);
    if (!everywhere) asymmetric.push_back(id);
  }
  if (!asymmetric.empty()) {
    std::string listed;
    for (const auto& id : asymmetric) listed += (listed.empty() ? "" : ", ") + id;
    throw FusionError("adapters target different module sets; asymmetric modules: " + listed);
  }

  std::set<int> ranks;
  const auto& first = adapters.front();
  for (const auto& [id, layer] : first.layers) {
    for (const auto& adapter : adapters) {
      const auto& other = adapter.layers.at(id);
      ranks.insert(other.rank);
      if (other.out_features() != layer.out_features() || other.in_features() != layer.in_features()) {
        throw FusionError("module " + id + ": base shapes differ between '" + first.name + "' (" +
                          Matrix::shape_string(layer.out_features(), layer.in_features()) + ") and '" +
                          adapter.name + "' (" +
                          Matrix::shape_string(other.out_features(), other.in_features()) + ")");
      }
    }
  }
  if (ranks.size() > 1) warnings.push_back({Severity::warning, "fusion", "inputs have mixed ranks"});
  return warnings;
}

/// Stacks the weighted low-rank factors: A = [w_i s_i A_i] along columns and
/// B = [B_i] along rows, so A * B equals sum_i w_i s_i A_i B_i. The result
/// carries alpha == rank, i.e. unit scale.
inline LoraAdapter fuse_concat(std::span<const LoraAdapter> adapters, const FusionSpec& spec,
                               std::string name = "fused") {
  if (spec.strategy != FusionStrategy::concatenation) throw FusionError("fuse_concat needs the concatenation strategy");
  spec.validate(adapters.size());
  check_fusion_inputs(adapters);

  LoraAdapter out{std::move(name), {}};
  for (const auto& [id, _] : adapters.front().layers) {
    std::vector<Matrix> a_parts, b_parts;
    int rank = 0;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const auto& layer = adapters[i].layers.at(id);
      a_parts.push_back(scale(spec.weights[i] * layer.scale(), layer.a));
      b_parts.push_back(layer.b);
      rank += layer.rank;
    }
    out.layers.emplace(id, LoraLayer{concat(a_parts, Axis::cols), concat(b_parts, Axis::rows), rank,
                                     static_cast<double>(rank)});
  }
  return out;
}

/// Dense reference: sum_i w_i * delta_weight(layer_i) per module.
inline DeltaSet fuse_linear(std::span<const LoraAdapter> adapters, const FusionSpec& spec) {
  if (spec.strategy != FusionStrategy::linear) throw FusionError("fuse_linear needs the linear strategy");
  spec.validate(adapters.size());
  check_fusion_inputs(adapters);

  DeltaSet out;
  for (const auto& [id, first] : adapters.front().layers) {
    Matrix acc(first.out_features(), first.in_features());
    for (std::size_t i = 0; i < adapters.size(); ++i)
      acc = axpy(spec.weights[i], delta_weight(adapters[i].layers.at(id)), acc);
    out.emplace(id, std::move(acc));
  }
  return out;
}

inline DeltaSet fuse_linear(std::initializer_list<LoraAdapter> adapters, const FusionSpec& spec) {
  return fuse_linear(std::span<const LoraAdapter>(adapters.begin(), adapters.size()), spec);
}

inline LoraAdapter fuse_concat(std::initializer_list<LoraAdapter> adapters, const FusionSpec& spec,
                               std::string name = "fused") {
  return fuse_concat(std::span<const LoraAdapter>(adapters.begin(), adapters.size()), spec,
                     std::move(name));
}

/// W_fusion = W_base + delta for every module; the inputs are left untouched.
/// Base modules without a delta are copied through.
inline WeightMap merge_into_base(const WeightMap& base, const DeltaSet& fused) {
  WeightMap out = base;
  for (const auto& [id, delta] : fused) {
    auto it = out.find(id);
    if (it == out.end()) throw FusionError("merge: base has no module '" + id + "'");
    if (!it->second.same_shape(delta)) {
      throw FusionError("merge: module " + id + " base " + it->second.shape() + " vs delta " + delta.shape());
    }
    it->second = apply_delta(it->second, delta);
  }
  return out;
}

inline WeightMap merge_into_base(const WeightMap& base, const LoraAdapter& fused) {
  for (const auto& [id, layer] : fused.layers) {
    auto it = base.find(id);
    if (it == base.end()) throw FusionError("merge: base has no module '" + id + "'");
    if (it->second.rows() != layer.out_features() || it->second.cols() != layer.in_features()) {
      throw FusionError("merge: module " + id + " base " + it->second.shape() + " vs adapter " +
                        Matrix::shape_string(layer.out_features(), layer.in_features()));
    }
  }
  return merge_into_base(base, delta_set(fused));
}

}  // namespace lorafuse
