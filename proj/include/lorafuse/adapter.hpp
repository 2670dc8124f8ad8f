// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "lorafuse/error.hpp"
#include "lorafuse/matrix.hpp"

namespace lorafuse {

/// One low-rank update. `a` is d_out x rank, `b` is rank x d_in and the dense
/// update is (alpha / rank) * a * b.
struct LoraLayer {
  Matrix a;
  Matrix b;
  int rank = 0;
  double alpha = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }
  std::size_t out_features() const { return a.rows(); }
  std::size_t in_features() const { return b.cols(); }

  friend bool operator==(const LoraLayer&, const LoraLayer&) = default;
};

/// Adapter keyed by target-module id, e.g. "layer0.attn.k_proj".
struct LoraAdapter {
  std::string name;
  std::map<std::string, LoraLayer> layers;

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Dense per-module updates.
using DeltaSet = std::map<std::string, Matrix>;

/// Per-module base weights (d_out x d_in).
using WeightMap = std::map<std::string, Matrix>;

enum class Projection { q, k, v };

inline const char* projection_name(Projection p) {
  switch (p) {
    case Projection::q: return "q_proj";
    case Projection::k: return "k_proj";
    case Projection::v: return "v_proj";
  }
  return "";
}

inline std::string module_id(std::size_t layer, Projection p) {
  return "layer" + std::to_string(layer) + ".attn." + projection_name(p);
}

inline bool is_valid_module_id(const std::string& id) {
  static const std::regex pattern(R"(layer(0|[1-9][0-9]*)\.attn\.(q_proj|k_proj|v_proj))");
  return std::regex_match(id, pattern);
}

enum class Severity { error, warning };

struct Finding {
  Severity severity = Severity::error;
  std::string subject;
  std::string message;

  std::string to_string() const {
    return std::string(severity == Severity::error ? "error" : "warning") + ": " +
           (subject.empty() ? "" : subject + ": ") + message;
  }
};

inline bool has_errors(const std::vector<Finding>& findings) {
  for (const auto& f : findings)
    if (f.severity == Severity::error) return true;
  return false;
}

inline Matrix delta_weight(const LoraLayer& layer) {
  // Scaling the A factor first keeps this bit-identical with a fused adapter
  // whose scale has been folded into its stored factors.
  return matmul(scale(layer.scale(), layer.a), layer.b);
}

inline Matrix apply_delta(const Matrix& base, const Matrix& delta) {
  if (!base.same_shape(delta)) {
    throw ShapeError("apply_delta shape mismatch: base " + base.shape() + ", delta " +
                     delta.shape());
  }
  return add(base, delta);
}

inline DeltaSet delta_set(const LoraAdapter& adapter) {
  DeltaSet out;
  for (const auto& [id, layer] : adapter.layers) out.emplace(id, delta_weight(layer));
  return out;
}

inline std::vector<Finding> validate_layer(const std::string& id, const LoraLayer& layer) {
  std::vector<Finding> out;
  auto error = [&](std::string msg) { out.push_back({Severity::error, id, std::move(msg)}); };
  if (layer.rank < 1) error("rank must be >= 1, got " + std::to_string(layer.rank));
  if (!(layer.alpha > 0.0) || !std::isfinite(layer.alpha))
    error("alpha must be a positive finite number");
  if (layer.a.empty() || layer.b.empty()) {
    error("factor matrices must be non-empty");
    return out;
  }
  if (layer.rank >= 1 && (layer.a.cols() != static_cast<std::size_t>(layer.rank) ||
                          layer.b.rows() != static_cast<std::size_t>(layer.rank))) {
    error("factor shapes a=" + layer.a.shape() + ", b=" + layer.b.shape() +
          " disagree with rank " + std::to_string(layer.rank));
  }
  if (!all_finite(layer.a) || !all_finite(layer.b)) error("non-finite factor entries");
  return out;
}

/// Empty iff every invariant holds. Mixed ranks produce a single warning.
inline std::vector<Finding> validate_adapter(const LoraAdapter& adapter) {
  std::vector<Finding> out;
  std::set<int> ranks;
  for (const auto& [id, layer] : adapter.layers) {
    if (!is_valid_module_id(id))
      out.push_back({Severity::error, id, "target-module id does not match layer<k>.attn.<q|k|v>_proj"});
    auto layer_findings = validate_layer(id, layer);
    out.insert(out.end(), layer_findings.begin(), layer_findings.end());
    ranks.insert(layer.rank);
  }
  if (ranks.size() > 1) {
    std::string listed;
    for (int r : ranks) listed += (listed.empty() ? "" : ", ") + std::to_string(r);
    out.push_back({Severity::warning, adapter.name, "mixed layer ranks {" + listed + "}"});
  }
  return out;
}

/// Adapter whose every factor entry is zero, shaped to the given modules.
inline LoraAdapter zero_adapter(const std::string& name, const WeightMap& targets, int rank,
                                double alpha) {
  LoraAdapter out{name, {}};
  for (const auto& [id, w] : targets) {
    out.layers.emplace(id, LoraLayer{Matrix(w.rows(), static_cast<std::size_t>(rank)),
                                     Matrix(static_cast<std::size_t>(rank), w.cols()), rank,
                                     alpha});
  }
  return out;
}

}  // namespace lorafuse
