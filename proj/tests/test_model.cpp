// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lorafuse/dataset.hpp"
#include "lorafuse/model.hpp"
#include "lorafuse/train.hpp"
#include "support.hpp"

namespace lorafuse {
namespace {

using testing::random_matrix;

ModelConfig small_config(std::uint64_t seed = 5) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_seq_len = 48;
  c.seed = seed;
  return c;
}

/// Adapter with random A and B so every path carries signal.
LoraAdapter random_lora(const ModelWeights& w, std::uint64_t seed, int rank = 4, double alpha = 8.0) {
  std::mt19937_64 rng(seed);
  LoraAdapter a = init_lora_adapter(w, rank, alpha, seed);
  for (auto& [id, layer] : a.layers) layer.b = random_matrix(rng, layer.b.rows(), layer.b.cols(), 0.3);
  return a;
}

std::vector<int> random_tokens(std::mt19937_64& rng, const ModelConfig& c) {
  const std::size_t n = testing::uniform_size(rng, 1, static_cast<std::size_t>(c.max_seq_len));
  std::uniform_int_distribution<int> tok(0, c.vocab_size - 1);
  std::vector<int> out(n);
  for (int& t : out) t = tok(rng);
  return out;
}

const InstructionExample kDatum{"", "is fire hot", "sure. yes"};

TEST(InitModel, SameSeedIsBitIdentical) { EXPECT_EQ(init_model(small_config(9)), init_model(small_config(9))); }

TEST(InitModel, DifferentSeedsDiffer) {
  EXPECT_FALSE(init_model(small_config(1)) == init_model(small_config(2)));
  EXPECT_NE(checksum(init_model(small_config(1))), checksum(init_model(small_config(2))));
}

TEST(InitModel, InvalidConfigIsRejected) {
  ModelConfig c = small_config();
  c.d_model = 6;
  c.n_heads = 4;
  EXPECT_THROW(init_model(c), ConfigError);
  for (auto mutate : std::initializer_list<void (*)(ModelConfig&)>{
           [](ModelConfig& m) { m.d_model = 128; }, [](ModelConfig& m) { m.n_layers = 5; },
           [](ModelConfig& m) { m.max_seq_len = 129; }, [](ModelConfig& m) { m.vocab_size = 513; }}) {
    ModelConfig bad = small_config();
    mutate(bad);
    EXPECT_THROW(init_model(bad), ConfigError);
  }
}

TEST(InitModel, WeightsRoundTripThroughBaseSection) {
  testing::TempDir dir("model");
  const ModelWeights w = init_model(small_config());
  save_weights(w, dir / "base.lorafus");
  EXPECT_EQ(load_weights(dir / "base.lorafus"), w);
  save_adapter(round_to_f32(random_lora(w, 1)), dir / "adapter.lorafus");
  EXPECT_THROW(load_weights(dir / "adapter.lorafus"), FormatError);
}

TEST(Forward, SingleTokenShape) {
  const ModelWeights w = init_model(small_config());
  const Matrix logits = forward(w, nullptr, {CharTokenizer::kBos});
  EXPECT_EQ(logits.rows(), 1u);
  EXPECT_EQ(logits.cols(), static_cast<std::size_t>(w.config.vocab_size));
  EXPECT_TRUE(all_finite(logits));
}

TEST(Forward, InputErrors) {
  const ModelWeights w = init_model(small_config());
  EXPECT_THROW(forward(w, nullptr, {}), InputError);
  EXPECT_THROW(forward(w, nullptr, {1, 99}), InputError);
  EXPECT_THROW(forward(w, nullptr, {1, -1}), InputError);
  const std::vector<int> too_long(49, 5);
  EXPECT_THROW(forward(w, nullptr, too_long), InputError);
  LoraAdapter stray{"stray", {}};
  stray.layers.emplace("layer7.attn.q_proj", LoraLayer{Matrix(16, 1), Matrix(1, 16), 1, 1.0});
  EXPECT_THROW(forward(w, &stray, {1, 5}), InputError);
}

TEST(Forward, IsCausal) {
  const ModelWeights w = init_model(small_config());
  const Matrix full = forward(w, nullptr, {1, 10, 20, 30});
  const Matrix prefix = forward(w, nullptr, {1, 10});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < full.cols(); ++c) EXPECT_EQ(full(r, c), prefix(r, c));
}

TEST(Forward, ZeroAdapterIsBitwiseNoOp) {
  const ModelWeights w = init_model(small_config());
  const LoraAdapter zero = zero_adapter("zero", attention_weights(w), 8, 32.0);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto tokens = random_tokens(rng, w.config);
    EXPECT_EQ(forward(w, &zero, tokens), forward(w, nullptr, tokens));
  }
}

TEST(Forward, AttachedEqualsMerged) {
  const ModelWeights w = init_model(small_config());
  const LoraAdapter a = random_lora(w, 4);
  const ModelWeights merged = merge_adapter(w, a);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto tokens = random_tokens(rng, w.config);
    EXPECT_LE(relative_error(forward(w, &a, tokens), forward(merged, nullptr, tokens)), 1e-9);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const Matrix logits(3, 99);
  EXPECT_NEAR(cross_entropy_loss(logits, {4, 7, 98}), std::log(99.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveNearZero) {
  Matrix logits(2, 10);
  logits(0, 3) = 100.0;
  logits(1, 8) = 100.0;
  const double loss = cross_entropy_loss(logits, {3, 8});
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-3);
}

TEST(CrossEntropy, MatchesScalarRecomputation) {
  const Matrix logits{{0.5, -1.25, 2.0, 0.0}, {3.0, 3.0, -2.0, 1.0}, {-0.75, 0.25, 0.125, 4.0}};
  const int targets[] = {2, 0, 1};
  long double total = 0.0L;
  for (std::size_t i = 0; i < 3; ++i) {
    long double z = 0.0L;
    for (std::size_t j = 0; j < 4; ++j) z += std::exp(static_cast<long double>(logits(i, j)));
    total += std::log(z) - logits(i, static_cast<std::size_t>(targets[i]));
  }
  EXPECT_NEAR(cross_entropy_loss(logits, targets), static_cast<double>(total / 3.0L), 1e-14);
}

TEST(CrossEntropy, IgnoredPositionsAreSkipped) {
  const Matrix logits{{0.0, 5.0}, {1.0, 2.0}};
  EXPECT_DOUBLE_EQ(cross_entropy_loss(logits, {kIgnoreTarget, 1}), cross_entropy_loss(Matrix{{1.0, 2.0}}, {1}));
  EXPECT_THROW(cross_entropy_loss(logits, {1}), ShapeError);
}

TEST(Generate, ZeroNewTokensReturnsPrompt) {
  const ModelWeights w = init_model(small_config());
  const std::vector<int> prompt{1, 40, 41};
  EXPECT_EQ(generate(w, nullptr, prompt, 0), prompt);
}

TEST(Generate, TiesBreakToLowestId) {
  EXPECT_EQ(argmax(std::vector<double>{0.5, 2.0, 2.0, 1.0}), 1);
  EXPECT_EQ(argmax(std::vector<double>{3.0, 3.0}), 0);
  // A zero unembedding makes every logit tie; greedy decoding then emits token 0.
  ModelWeights w = init_model(small_config());
  w.unembedding = Matrix(w.unembedding.rows(), w.unembedding.cols());
  EXPECT_EQ(generate(w, nullptr, std::vector<int>{1, 40}, 3), (std::vector<int>{1, 40, 0, 0, 0}));
}

TEST(Generate, StopsAtEosAndAtContextLimit) {
  ModelWeights w = init_model(small_config());
  // A constant final norm output makes EOS win everywhere.
  w.unembedding = Matrix(w.unembedding.rows(), w.unembedding.cols());
  w.final_gain = Matrix(1, w.final_gain.cols(), 0.0);
  w.final_bias = Matrix(1, w.final_bias.cols(), 1.0);
  w.unembedding(CharTokenizer::kEos, 0) = 1.0;
  EXPECT_EQ(generate(w, nullptr, std::vector<int>{1}, 10), (std::vector<int>{1, CharTokenizer::kEos}));

  const ModelWeights plain = init_model(small_config());
  const std::vector<int> long_prompt(46, 10);
  EXPECT_LE(generate(plain, nullptr, long_prompt, 20, -1).size(), 48u);
}

TEST(Generate, Deterministic) {
  const ModelWeights w = init_model(small_config());
  const LoraAdapter a = random_lora(w, 6);
  const std::vector<int> prompt{1, 50, 60, 3};
  EXPECT_EQ(generate(w, &a, prompt, 12), generate(w, &a, prompt, 12));
}

TEST(GradientCheck, AnalyticMatchesFiniteDifferences) {
  const ModelWeights w = init_model(small_config());
  EXPECT_LE(gradient_check(w, random_lora(w, 7), kDatum, 1e-4), 1e-4);
  // Scale 16 makes this loss strongly curved; the central-difference
  // truncation error needs the smaller step.
  EXPECT_LE(gradient_check(w, random_lora(w, 8, 2, 32.0), {"", "how are you", "i'm fine"}, 1e-5,
                           GradientCheckOptions{64, 3}),
            1e-4);
}

// Central differences converge at second order when the analytic gradient is right.
TEST(GradientCheck, ErrorShrinksQuadraticallyWithStep) {
  const ModelWeights w = init_model(small_config());
  const LoraAdapter a = random_lora(w, 8, 2, 32.0);
  const InstructionExample datum{"", "how are you", "i'm fine"};
  const double coarse = gradient_check(w, a, datum, 1e-3, GradientCheckOptions{64, 3});
  const double fine = gradient_check(w, a, datum, 1e-4, GradientCheckOptions{64, 3});
  EXPECT_GT(coarse, 1e-3);
  EXPECT_NEAR(coarse / fine, 100.0, 25.0);
}

TEST(GradientCheck, FreshAdapterPasses) {
  const ModelWeights w = init_model(small_config());
  EXPECT_LE(gradient_check(w, init_lora_adapter(w, 8, 32.0, 1), kDatum, 1e-4), 1e-4);
}

TEST(GradientCheck, DoubledGradientIsCaught) {
  const ModelWeights w = init_model(small_config());
  GradientCheckOptions fault;
  fault.gradient_scale = 2.0;
  EXPECT_NEAR(gradient_check(w, random_lora(w, 7), kDatum, 1e-4, fault), 1.0, 0.05);
}

TEST(GradientCheck, ZeroDeltaAdapterStillHasBGradient) {
  const ModelWeights w = init_model(small_config());
  const LoraAdapter fresh = init_lora_adapter(w, 8, 32.0, 2);
  for (const auto& [id, delta] : delta_set(fresh)) EXPECT_EQ(max_abs(delta), 0.0) << id;
  AdapterGrad grad;
  loss_and_grad(w, fresh, encode_dataset(w.config, {kDatum}).front(), grad);
  double largest = 0.0;
  for (const auto& [id, g] : grad) largest = std::max(largest, max_abs(g.b));
  EXPECT_GT(largest, 0.0);
}

TEST(TrainLora, ZeroEpochsGiveZeroDelta) {
  const ModelWeights w = init_model(small_config());
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult r = train_lora(w, {kDatum}, cfg);
  EXPECT_EQ(r.loss_curve.size(), 1u);
  EXPECT_EQ(r.adapter.layers.size(), 6u);
  for (const auto& [id, layer] : r.adapter.layers) {
    EXPECT_EQ(layer.rank, 8);
    EXPECT_EQ(layer.alpha, 32.0);
    EXPECT_EQ(max_abs(delta_weight(layer)), 0.0) << id;
  }
}

TEST(TrainLora, Errors) {
  const ModelWeights w = init_model(small_config());
  EXPECT_THROW(train_lora(w, {}, TrainConfig{}), DataError);
  TrainConfig bad;
  bad.dropout = 1.0;
  EXPECT_THROW(train_lora(w, {kDatum}, bad), ConfigError);
  EXPECT_THROW(train_lora(w, {{"", "caf\xc3\xa9", "x"}}, TrainConfig{}), DataError);
  TrainConfig wild;
  wild.learning_rate = 1e300;
  wild.optimizer = Optimizer::sgd;
  wild.epochs = 3;
  try {
    train_lora(w, {kDatum}, wild);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.epoch(), 1);
  }
}

TEST(TrainLora, DeterministicAndBaseFrozen) {
  const ModelWeights w = init_model(small_config());
  const std::uint32_t before = checksum(w);
  const ModelWeights copy = w;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 77;
  const std::vector<InstructionExample> data{kDatum, {"", "is ice hot", "sure. no"}};
  const TrainResult a = train_lora(w, data, cfg), b = train_lora(w, data, cfg);
  EXPECT_EQ(a.adapter, b.adapter);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  EXPECT_EQ(checksum(w), before);
  EXPECT_EQ(w, copy);
}

TEST(TrainLora, SgdAlsoReducesLoss) {
  const ModelWeights w = init_model(small_config());
  TrainConfig cfg;
  cfg.optimizer = Optimizer::sgd;
  cfg.learning_rate = 0.05;
  cfg.epochs = 5;
  const TrainResult r = train_lora(w, {kDatum, {"", "is ice hot", "sure. no"}}, cfg);
  EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
}

TEST(TrainLora, ToyCorpusLossDecreasesOverTenEpochs) {
  ModelConfig c;  // the shipped toy model shape
  c.seed = 1234;
  const ModelWeights w = init_model(c);
  const auto data = load_jsonl<InstructionExample>(testing::data_dir() / "toy_aoa.jsonl").records;
  ASSERT_EQ(data.size(), 30u);
  TrainConfig cfg;  // lr 1e-3, 10 epochs, batch 1, r 8, alpha 32, dropout 0.05
  const std::uint32_t before = checksum(w);
  const TrainResult r = train_lora(w, data, cfg);
  ASSERT_EQ(r.loss_curve.size(), 11u);
  EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
  EXPECT_EQ(checksum(w), before);
}

}  // namespace
}  // namespace lorafuse
