// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "lorafuse/fusion.hpp"
#include "support.hpp"

namespace lorafuse {
namespace {

using testing::random_adapter;
using testing::random_matrix;
using testing::uniform_real;
using testing::uniform_size;

LoraAdapter single(const char* name, Matrix a, Matrix b) {
  LoraAdapter out{name, {}};
  out.layers.emplace("layer0.attn.q_proj", LoraLayer{std::move(a), std::move(b), 1, 1.0});
  return out;
}

const LoraAdapter kTask = single("task", Matrix{{1}, {0}}, Matrix{{2, 0}});
const LoraAdapter kSafety = single("safety", Matrix{{0}, {1}}, Matrix{{0, 4}});
const Matrix kHalfDelta{{1, 0}, {0, 2}};

Matrix dense(const LoraAdapter& a, const std::string& id = "layer0.attn.q_proj") {
  return delta_weight(a.layers.at(id));
}

/// Random (task, safety) pair over shared modules; ranks may differ.
std::pair<LoraAdapter, LoraAdapter> random_pair(std::mt19937_64& rng) {
  const std::size_t d_out = uniform_size(rng, 1, 64), d_in = uniform_size(rng, 1, 64);
  const int r_task = static_cast<int>(uniform_size(rng, 1, 8)), r_safety = static_cast<int>(uniform_size(rng, 1, 8));
  return {random_adapter(rng, d_out, d_in, r_task, uniform_real(rng, 1.0, 32.0), 1, "task"),
          random_adapter(rng, d_out, d_in, r_safety, uniform_real(rng, 1.0, 32.0), 1, "safety")};
}

/// Random base weights covering every module of `a`.
WeightMap random_base(std::mt19937_64& rng, const LoraAdapter& a) {
  WeightMap base;
  for (const auto& [id, layer] : a.layers) base.emplace(id, random_matrix(rng, layer.out_features(), layer.in_features()));
  return base;
}

TEST(NormalizeWeights, Examples) {
  EXPECT_EQ(normalize_weights({2.0, 2.0}), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(normalize_weights({1.0, 0.0}), (std::vector<double>{1.0, 0.0}));
  EXPECT_THROW(normalize_weights({0.0, 0.0}), NormalizationError);
  EXPECT_THROW(normalize_weights({1.0, -0.5}), NormalizationError);
}

TEST(FuseConcat, HalfLambdaHandExample) {
  const LoraAdapter fused = fuse_concat({kTask, kSafety}, FusionSpec::task_safety(0.5));
  EXPECT_EQ(dense(fused), kHalfDelta);
  const auto& layer = fused.layers.at("layer0.attn.q_proj");
  EXPECT_EQ(layer.rank, 2);
  EXPECT_EQ(layer.alpha, 2.0);
  EXPECT_EQ(layer.a, (Matrix{{0.5, 0.0}, {0.0, 0.5}}));
  EXPECT_EQ(layer.b, (Matrix{{2, 0}, {0, 4}}));
}

TEST(FuseConcat, EndpointsReproduceSingleAdapters) {
  EXPECT_EQ(dense(fuse_concat({kTask, kSafety}, FusionSpec::task_safety(0.0))), dense(kTask));
  EXPECT_EQ(dense(fuse_concat({kTask, kSafety}, FusionSpec::task_safety(1.0))), dense(kSafety));
}

TEST(FuseConcat, Errors) {
  EXPECT_THROW(fuse_concat({kTask, kSafety}, FusionSpec{FusionStrategy::concatenation, {1.0}, true}), FusionError);
  EXPECT_THROW(fuse_concat({kTask, kSafety}, FusionSpec{FusionStrategy::concatenation, {0.7, 0.7}, true}),
               FusionError);
  EXPECT_THROW(fuse_concat({kTask, kSafety}, FusionSpec::task_safety(0.5, FusionStrategy::linear)), FusionError);

  LoraAdapter other = kSafety;
  other.layers.emplace("layer0.attn.v_proj", kSafety.layers.at("layer0.attn.q_proj"));
  try {
    fuse_concat({kTask, other}, FusionSpec::task_safety(0.5));
    FAIL() << "expected FusionError";
  } catch (const FusionError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.attn.v_proj"), std::string::npos) << e.what();
  }

  const LoraAdapter wide = single("wide", Matrix{{1}, {0}}, Matrix{{2, 0, 1}});
  EXPECT_THROW(fuse_concat({kTask, wide}, FusionSpec::task_safety(0.5)), FusionError);
}

TEST(FuseConcat, UnnormalizedWeightsMayExceedOne) {
  const LoraAdapter fused = fuse_concat({kTask, kSafety}, FusionSpec::unnormalized(1.0, 1.5));
  EXPECT_EQ(dense(fused), (Matrix{{2, 0}, {0, 6}}));
  EXPECT_THROW(fuse_concat({kTask, kSafety}, FusionSpec::unnormalized(1.0, -0.1)), FusionError);
}

TEST(FuseConcat, MixedRanksAreAcceptedWithWarning) {
  std::mt19937_64 rng(1);
  const LoraAdapter a = random_adapter(rng, 4, 4, 2, 4.0), b = random_adapter(rng, 4, 4, 5, 4.0);
  const LoraAdapter pair[] = {a, b};
  const auto warnings = check_fusion_inputs(pair);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_EQ(warnings[0].severity, Severity::warning);
  EXPECT_EQ(fuse_concat(pair, FusionSpec::task_safety(0.3)).layers.begin()->second.rank, 7);
}

TEST(FuseConcat, ThreeAdapters) {
  std::mt19937_64 rng(2);
  const LoraAdapter a = random_adapter(rng, 5, 6, 2, 4.0), b = random_adapter(rng, 5, 6, 3, 8.0),
                    c = random_adapter(rng, 5, 6, 1, 2.0);
  const FusionSpec concat_spec{FusionStrategy::concatenation, {0.2, 0.3, 0.5}, true};
  const FusionSpec linear_spec{FusionStrategy::linear, {0.2, 0.3, 0.5}, true};
  const LoraAdapter fused = fuse_concat({a, b, c}, concat_spec);
  const DeltaSet reference = fuse_linear({a, b, c}, linear_spec);
  for (const auto& [id, d] : reference) EXPECT_LT(relative_error(dense(fused, id), d), 1e-9);
}

TEST(FuseLinear, Examples) {
  EXPECT_EQ(fuse_linear({kTask}, FusionSpec{FusionStrategy::linear, {1.0}, true}).at("layer0.attn.q_proj"),
            dense(kTask));
  EXPECT_EQ(fuse_linear({kTask, kSafety}, FusionSpec::task_safety(0.5, FusionStrategy::linear))
                .at("layer0.attn.q_proj"),
            kHalfDelta);

  std::mt19937_64 rng(3);
  WeightMap shapes{{"layer0.attn.q_proj", Matrix(4, 3)}, {"layer0.attn.k_proj", Matrix(4, 3)}};
  const LoraAdapter z1 = zero_adapter("z1", shapes, 2, 8.0), z2 = zero_adapter("z2", shapes, 2, 8.0);
  for (const auto& [id, d] : fuse_linear({z1, z2}, FusionSpec{FusionStrategy::linear, {0.3, 0.7}, true}))
    EXPECT_EQ(d, Matrix(4, 3)) << id;
}

TEST(MergeIntoBase, Examples) {
  std::mt19937_64 rng(4);
  const WeightMap base{{"layer0.attn.q_proj", random_matrix(rng, 2, 2)}};
  WeightMap shapes{{"layer0.attn.q_proj", Matrix(2, 2)}};
  EXPECT_EQ(merge_into_base(base, zero_adapter("z", shapes, 1, 1.0)), base);

  const LoraAdapter fused = fuse_concat({kTask, kSafety}, FusionSpec::task_safety(0.5));
  EXPECT_EQ(merge_into_base(shapes, fused).at("layer0.attn.q_proj"), kHalfDelta);

  const WeightMap ones{{"layer0.attn.q_proj", Matrix{{1, 1}, {1, 1}}}};
  EXPECT_EQ(merge_into_base(ones, fused).at("layer0.attn.q_proj"), (Matrix{{2, 1}, {1, 3}}));
}

TEST(MergeIntoBase, Errors) {
  const LoraAdapter fused = fuse_concat({kTask, kSafety}, FusionSpec::task_safety(0.5));
  EXPECT_THROW(merge_into_base(WeightMap{{"layer0.attn.k_proj", Matrix(2, 2)}}, fused), FusionError);
  EXPECT_THROW(merge_into_base(WeightMap{{"layer0.attn.q_proj", Matrix(3, 2)}}, fused), FusionError);
}

TEST(MergeIntoBase, UntargetedModulesPassThrough) {
  const WeightMap base{{"layer0.attn.q_proj", Matrix(2, 2)}, {"layer0.attn.v_proj", Matrix{{7, 7}, {7, 7}}}};
  const WeightMap merged = merge_into_base(base, kTask);
  EXPECT_EQ(merged.at("layer0.attn.v_proj"), base.at("layer0.attn.v_proj"));
}

// Property: stacked factors reproduce the dense weighted sum.
TEST(FusionProperties, ConcatEqualsLinear) {
  std::mt19937_64 rng(41);
  for (int i = 0; i < 300; ++i) {
    const auto [task, safety] = random_pair(rng);
    const double lambda = uniform_real(rng);
    const LoraAdapter fused = fuse_concat({task, safety}, FusionSpec::task_safety(lambda));
    const DeltaSet reference = fuse_linear({task, safety}, FusionSpec::task_safety(lambda, FusionStrategy::linear));
    for (const auto& [id, d] : reference) EXPECT_LE(relative_error(dense(fused, id), d), 1e-9);
  }
}

// Property: the fused rank never exceeds r_task + r_safety.
TEST(FusionProperties, RankBound) {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 200; ++i) {
    const auto [task, safety] = random_pair(rng);
    const LoraAdapter fused = fuse_concat({task, safety}, FusionSpec::task_safety(uniform_real(rng)));
    for (const auto& [id, layer] : fused.layers) {
      const auto bound = static_cast<std::size_t>(task.layers.at(id).rank + safety.layers.at(id).rank);
      EXPECT_LE(numerical_rank(delta_weight(layer), 1e-9), bound);
    }
  }
}

// Property: exact 0/1 weights reproduce the single-adapter merge bitwise.
TEST(FusionProperties, EndpointMergesAreBitwise) {
  std::mt19937_64 rng(43);
  for (int i = 0; i < 100; ++i) {
    const auto [task, safety] = random_pair(rng);
    const WeightMap base = random_base(rng, task);
    EXPECT_EQ(merge_into_base(base, fuse_concat({task, safety}, FusionSpec::task_safety(0.0))),
              merge_into_base(base, task));
    EXPECT_EQ(merge_into_base(base, fuse_concat({task, safety}, FusionSpec::task_safety(1.0))),
              merge_into_base(base, safety));
  }
}

// Property: delta(lambda) = delta(0) + lambda (delta(1) - delta(0)).
TEST(FusionProperties, DeltaIsAffineInLambda) {
  std::mt19937_64 rng(44);
  for (int i = 0; i < 100; ++i) {
    const auto [task, safety] = random_pair(rng);
    const std::string id = task.layers.begin()->first;
    const Matrix d0 = dense(fuse_concat({task, safety}, FusionSpec::task_safety(0.0)), id);
    const Matrix d1 = dense(fuse_concat({task, safety}, FusionSpec::task_safety(1.0)), id);
    const double lambda = uniform_real(rng);
    const Matrix expected = axpy(lambda, axpy(-1.0, d0, d1), d0);
    EXPECT_LE(relative_error(dense(fuse_concat({task, safety}, FusionSpec::task_safety(lambda)), id), expected), 1e-9);
  }
}

// Property: normalize is idempotent and invariant to positive scaling.
TEST(FusionProperties, NormalizeIsIdempotentAndScaleInvariant) {
  std::mt19937_64 rng(45);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> w;
    for (std::size_t k = uniform_size(rng, 1, 5); k > 0; --k) w.push_back(uniform_real(rng, 0.0, 10.0));
    w.push_back(uniform_real(rng, 0.1, 1.0));
    const auto once = normalize_weights(w);
    double sum = 0.0;
    for (double x : once) sum += x;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    const auto twice = normalize_weights(once);
    for (std::size_t k = 0; k < w.size(); ++k) EXPECT_NEAR(twice[k], once[k], 1e-15);
    const double c = uniform_real(rng, 0.01, 100.0);
    std::vector<double> scaled;
    for (double x : w) scaled.push_back(c * x);
    const auto rescaled = normalize_weights(scaled);
    for (std::size_t k = 0; k < w.size(); ++k) EXPECT_NEAR(rescaled[k], once[k], 1e-15);
  }
}

// Property: merging leaves its inputs untouched.
TEST(FusionProperties, MergeDoesNotMutateInputs) {
  std::mt19937_64 rng(46);
  for (int i = 0; i < 50; ++i) {
    const auto [task, safety] = random_pair(rng);
    const WeightMap base = random_base(rng, task);
    const LoraAdapter fused = fuse_concat({task, safety}, FusionSpec::task_safety(uniform_real(rng)));
    const std::uint32_t base_sum = checksum(base.begin()->second);
    const std::uint32_t a_sum = checksum(fused.layers.begin()->second.a);
    const DeltaSet deltas = delta_set(fused);
    merge_into_base(base, fused);
    merge_into_base(base, deltas);
    EXPECT_EQ(checksum(base.begin()->second), base_sum);
    EXPECT_EQ(checksum(fused.layers.begin()->second.a), a_sum);
    EXPECT_EQ(deltas, delta_set(fused));
  }
}

}  // namespace
}  // namespace lorafuse
