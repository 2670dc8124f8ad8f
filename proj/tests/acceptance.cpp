// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "judge_stub.hpp"
#include "lorafuse/cli.hpp"
#include "support.hpp"

namespace lorafuse {
namespace {

using testing::JudgeStub;
using testing::StubReply;
using testing::TempDir;
using testing::uniform_real;
using testing::uniform_size;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Records the first failure message; later ones only count.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (failures_++ == 0) first_ = what;
  }
  Outcome outcome(std::string detail) const {
    if (failures_ == 0) return {true, std::move(detail)};
    return {false, std::to_string(failures_) + " failure(s); first: " + first_};
  }

 private:
  int failures_ = 0;
  std::string first_;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::pair<LoraAdapter, LoraAdapter> random_pair(std::mt19937_64& rng) {
  const std::size_t d_out = uniform_size(rng, 1, 64), d_in = uniform_size(rng, 1, 64);
  const int rt = static_cast<int>(uniform_size(rng, 1, 8)), rs = static_cast<int>(uniform_size(rng, 1, 8));
  return {testing::random_adapter(rng, d_out, d_in, rt, uniform_real(rng, 1.0, 32.0), 1, "task"),
          testing::random_adapter(rng, d_out, d_in, rs, uniform_real(rng, 1.0, 32.0), 1, "safety")};
}

// Shared toy-sweep state: criteria 3, 5, 6, 7 and 12 reuse the first run.
struct ToySweep {
  TempDir dir{"acceptance"};
  RunConfig config;
  std::optional<SweepResult> first, second;
  double first_seconds = 0.0;
  std::string error;

  ToySweep() {
    try {
      config = load_run_config(testing::data_dir() / "toy_config.json");
      RunConfig a = config;
      a.output_dir = dir / "run1";
      const auto start = Clock::now();
      first = run_sweep(a, {}, OutputWriter(false));
      first_seconds = seconds_since(start);
      RunConfig b = config;
      b.output_dir = dir / "run2";
      second = run_sweep(b, {}, OutputWriter(false));
    } catch (const std::exception& e) {
      error = e.what();
    }
  }

  fs::path run1() const { return dir / "run1"; }
  fs::path run2() const { return dir / "run2"; }
};

ToySweep& toy() {
  static ToySweep sweep;
  return sweep;
}

// 1 + 2 share the same random cases.
struct EquivalenceRun {
  Check equivalence, rank;
  std::size_t cases = 0;
  double worst_error = 0.0, seconds = 0.0;
};

const EquivalenceRun& equivalence_run() {
  static const EquivalenceRun run = [] {
    EquivalenceRun r;
    std::mt19937_64 rng(2026);
    const auto start = Clock::now();
    for (; r.cases < 1000; ++r.cases) {
      const auto [task, safety] = random_pair(rng);
      const double lambda = uniform_real(rng);
      const LoraAdapter fused = fuse_concat({task, safety}, FusionSpec::task_safety(lambda));
      const DeltaSet reference = fuse_linear({task, safety}, FusionSpec::task_safety(lambda, FusionStrategy::linear));
      for (const auto& [id, d] : reference) {
        const Matrix dense = delta_weight(fused.layers.at(id));
        const double err = relative_error(dense, d);
        r.worst_error = std::max(r.worst_error, err);
        r.equivalence.expect(err <= 1e-9, "case " + std::to_string(r.cases) + " " + id + " error " + fmt("%g", err));
        const auto bound = static_cast<std::size_t>(task.layers.at(id).rank + safety.layers.at(id).rank);
        const std::size_t rank = numerical_rank(dense, 1e-9);
        r.rank.expect(rank <= bound, "case " + std::to_string(r.cases) + " rank " + std::to_string(rank) + " > " +
                                         std::to_string(bound));
      }
    }
    r.seconds = seconds_since(start);
    return r;
  }();
  return run;
}

Outcome criterion_1() {
  const auto& r = equivalence_run();
  Check c = r.equivalence;
  c.expect(r.seconds < 30.0, "runtime " + fmt("%.1f s", r.seconds));
  return c.outcome(std::to_string(r.cases) + " cases, worst error " + fmt("%.2e", r.worst_error) + ", " +
                   fmt("%.2f s", r.seconds));
}

Outcome criterion_2() {
  const auto& r = equivalence_run();
  return r.rank.outcome(std::to_string(r.cases) + " cases within r_task + r_safety");
}

Outcome criterion_3() {
  auto& t = toy();
  if (!t.error.empty()) return {false, t.error};
  Check c;
  const ModelWeights base = init_model(t.config.seeded_model());
  const LoraAdapter task = load_adapter(t.run1() / "task.lorafus");
  const LoraAdapter safety = load_adapter(t.run1() / "safety.lorafus");
  const ModelWeights task_only = merge_adapter(base, task);
  const ModelWeights safety_only = merge_adapter(base, safety);
  c.expect(merge_adapter(base, fuse_pair(task, safety, FusionSpec::task_safety(0.0))) == task_only,
           "lambda 0 differs from task-only merge");
  c.expect(merge_adapter(base, fuse_pair(task, safety, FusionSpec::task_safety(1.0))) == safety_only,
           "lambda 1 differs from safety-only merge");
  // Through the stored sweep artifacts as well.
  c.expect(merge_adapter(base, load_adapter(t.run1() / "lambda_0" / "fused.lorafus")) == task_only,
           "stored lambda 0 differs from task-only merge");
  c.expect(merge_adapter(base, load_adapter(t.run1() / "lambda_1" / "fused.lorafus")) == safety_only,
           "stored lambda 1 differs from safety-only merge");
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto [a, b] = random_pair(rng);
    WeightMap w;
    for (const auto& [id, layer] : a.layers)
      w.emplace(id, testing::random_matrix(rng, layer.out_features(), layer.in_features()));
    c.expect(merge_into_base(w, fuse_concat({a, b}, FusionSpec::task_safety(0.0))) == merge_into_base(w, a),
             "random pair lambda 0");
    c.expect(merge_into_base(w, fuse_concat({a, b}, FusionSpec::task_safety(1.0))) == merge_into_base(w, b),
             "random pair lambda 1");
  }
  return c.outcome("toy model and 50 random pairs, bitwise");
}

Outcome criterion_4() {
  Check c;
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto [task, safety] = random_pair(rng);
    const double lambda = uniform_real(rng);
    const DeltaSet d0 = delta_set(fuse_concat({task, safety}, FusionSpec::task_safety(0.0)));
    const DeltaSet d1 = delta_set(fuse_concat({task, safety}, FusionSpec::task_safety(1.0)));
    const DeltaSet dl = delta_set(fuse_concat({task, safety}, FusionSpec::task_safety(lambda)));
    for (const auto& [id, d] : dl) {
      const Matrix expected = axpy(lambda, axpy(-1.0, d0.at(id), d1.at(id)), d0.at(id));
      const double err = relative_error(d, expected);
      worst = std::max(worst, err);
      c.expect(err <= 1e-9, "lambda " + fmt("%g", lambda) + " error " + fmt("%g", err));
    }
  }
  return c.outcome("100 lambdas, worst error " + fmt("%.2e", worst));
}

Outcome criterion_5() {
  auto& t = toy();
  if (!t.error.empty()) return {false, t.error};
  Check c;
  const ModelWeights base = init_model(t.config.seeded_model());
  const LoraAdapter fused = load_adapter(t.run1() / "lambda_0.5" / "fused.lorafus");
  const ModelWeights merged = merge_adapter(base, fused);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> token(0, base.config.vocab_size - 1);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    std::vector<int> tokens(uniform_size(rng, 1, static_cast<std::size_t>(base.config.max_seq_len)));
    for (int& x : tokens) x = token(rng);
    const double err = relative_error(forward(base, &fused, tokens), forward(merged, nullptr, tokens));
    worst = std::max(worst, err);
    c.expect(err <= 1e-9, "input " + std::to_string(i) + " error " + fmt("%g", err));
  }
  return c.outcome("100 inputs, worst error " + fmt("%.2e", worst));
}

Outcome criterion_6() {
  auto& t = toy();
  if (!t.error.empty()) return {false, t.error};
  Check c;
  const ModelWeights base = init_model(t.config.seeded_model());
  const auto examples = training_examples(Role::task, t.config.data.task);
  const LoraAdapter trained = load_adapter(t.run1() / "task.lorafus");
  const LoraAdapter fresh = init_lora_adapter(base, t.config.train.rank, t.config.train.alpha, 11);
  double worst = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    GradientCheckOptions opt;
    opt.samples = 32;
    opt.seed = 7 + i;
    for (const LoraAdapter* a : {&trained, &fresh}) {
      const double err = gradient_check(base, *a, examples[i * 7], 1e-4, opt);
      worst = std::max(worst, err);
      c.expect(err <= 1e-4, "gradient error " + fmt("%g", err));
    }
  }
  const std::uint32_t before = checksum(base);
  const TrainResult r = train_role(t.config, base, Role::task, t.config.data.task);
  c.expect(checksum(base) == before, "base checksum changed during training");
  c.expect(r.loss_curve.size() == 11, "expected 10 epochs");
  c.expect(checksum(base) == checksum(init_model(t.config.seeded_model())), "base differs from a fresh init");
  return c.outcome("6 checks x 32 coordinates, worst error " + fmt("%.2e", worst) +
                   "; base checksum unchanged after 10 epochs");
}

Outcome criterion_7() {
  auto& t = toy();
  if (!t.error.empty()) return {false, t.error};
  Check c;
  const auto& pts = t.first->points;
  c.expect(t.first->ok(), "sweep reported a failed point");
  c.expect(t.first_seconds < 300.0, "runtime " + fmt("%.0f s", t.first_seconds));
  const TrainConfig& tc = t.config.train;
  c.expect(tc.learning_rate == 1e-3 && tc.epochs == 10 && tc.batch_size == 1 && tc.rank == 8 && tc.alpha == 32.0,
           "toy config does not use the reference hyperparameters");
  c.expect(t.config.lambda_grid == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}, "unexpected lambda grid");
  std::string refusal, accuracy;
  std::vector<double> task_acc;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!pts[i].report || !pts[i].report->refusal_rate || !pts[i].report->task_accuracy) {
      c.expect(false, "missing metrics at lambda " + lambda_label(pts[i].lambda));
      continue;
    }
    const double rr = *pts[i].report->refusal_rate;
    refusal += (i ? " " : "") + fmt("%.3f", rr);
    accuracy += (i ? " " : "") + fmt("%.3f", *pts[i].report->task_accuracy);
    task_acc.push_back(*pts[i].report->task_accuracy);
    if (i > 0 && pts[i - 1].report && pts[i - 1].report->refusal_rate)
      c.expect(rr >= *pts[i - 1].report->refusal_rate, "refusal rate drops at lambda " + lambda_label(pts[i].lambda));
  }
  // Non-increasing overall; a single rise between neighbouring grid points is tolerated.
  if (!task_acc.empty()) {
    c.expect(task_acc.back() <= task_acc.front(), "task accuracy higher at lambda 1 than at 0");
    int rises = 0;
    for (std::size_t i = 1; i < task_acc.size(); ++i) rises += task_acc[i] > task_acc[i - 1];
    c.expect(rises <= 1, "task accuracy rises " + std::to_string(rises) + " times");
  }
  return c.outcome("refusal [" + refusal + "], task accuracy [" + accuracy + "], " + fmt("%.0f s", t.first_seconds));
}

Outcome criterion_8() {
  Check c;
  std::vector<JudgeVerdict> v;
  for (int s : {5, 5, 1, 3, 5}) v.emplace_back(s);
  c.expect(harmfulness_rate(v) == 0.6, "harmfulness_rate");
  std::vector<std::string> responses(10, "I cannot help with that.");
  responses.insert(responses.end(), 40, "Boil the water first.");
  c.expect(xstest_rate(responses) == 0.8, "xstest_rate");
  c.expect(std::abs(rouge1_precision("a b c", "a b") - 2.0 / 3.0) <= 1e-12, "rouge1_precision");
  const std::vector<McqPrediction> mcq{{4, 0, 0}, {4, 1, 2}, {4, 3, 3}, {4, 2, 0}};
  c.expect(mcq_accuracy(mcq) == 0.5, "mcq_accuracy");
  return c.outcome("0.6, 0.8, 2/3, 0.5");
}

Outcome criterion_9() {
  Check c;
  const double scores[] = {3.16, 3.12, 2.97, 2.64, 1.14};
  const double rates[] = {44.2, 44.0, 40.0, 32.9, 2.0};
  auto column = [&](int i) {
    return ReportColumn{lambda_label(0.1 * i),
                        {{"harmfulness_score", MetricKind::score, scores[i]},
                         {"harmfulness_rate", MetricKind::rate, rates[i]}}};
  };
  std::vector<ReportColumn> columns;
  for (int i = 1; i < 5; ++i) columns.push_back(column(i));
  const DeltaTable t = delta_table(column(0), columns);
  const std::vector<std::string> score_deltas{"(-0.04)", "(-0.19)", "(-0.52)", "(-2.02)"};
  const std::vector<std::string> rate_deltas{"(-0.2%)", "(-4.2%)", "(-11.3%)", "(-42.2%)"};
  c.expect(t.deltas.size() == 2 && t.deltas[0] == score_deltas, "score deltas");
  c.expect(t.deltas.size() == 2 && t.deltas[1] == rate_deltas, "rate deltas");
  std::string printed;
  for (const auto& row : t.deltas)
    for (const auto& d : row) printed += d + " ";
  return c.outcome(printed.substr(0, printed.size() - 1));
}

Outcome criterion_10() {
  Check c;
  const LambdaOptimum q = optimize_lambda([](double l) { return (l - 0.4) * (l - 0.4); });
  c.expect(std::abs(q.lambda - 0.4) <= 1e-3, "quadratic minimum at " + fmt("%g", q.lambda));
  c.expect(q.evaluations <= 60, "quadratic used " + std::to_string(q.evaluations) + " evaluations");
  const LambdaOptimum down = optimize_lambda([](double l) { return l; });
  const LambdaOptimum up = optimize_lambda([](double l) { return -l; });
  c.expect(std::abs(down.lambda) <= 1e-3, "increasing loss gave " + fmt("%g", down.lambda));
  c.expect(std::abs(up.lambda - 1.0) <= 1e-3, "decreasing loss gave " + fmt("%g", up.lambda));
  c.expect(down.evaluations <= 60 && up.evaluations <= 60, "monotone losses exceeded the budget");
  return c.outcome("lambda " + fmt("%.5f", q.lambda) + " in " + std::to_string(q.evaluations) +
                   " evaluations; boundaries " + fmt("%g", down.lambda) + " and " + fmt("%g", up.lambda));
}

Outcome criterion_11() {
  Check c;
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    const std::size_t d_out = uniform_size(rng, 1, 64), d_in = uniform_size(rng, 1, 64);
    const LoraAdapter a = round_to_f32(testing::random_adapter(rng, d_out, d_in, static_cast<int>(uniform_size(rng, 1, 8)),
                                                               uniform_real(rng, 1.0, 64.0), uniform_size(rng, 1, 3),
                                                               "adapter-" + std::to_string(i)));
    const auto bytes = encode_adapter(a);
    const LoraAdapter back = decode_adapter(bytes);
    c.expect(back == a, "adapter " + std::to_string(i) + " changed in a roundtrip");
    c.expect(encode_adapter(back) == bytes, "adapter " + std::to_string(i) + " re-encodes differently");
  }

  auto expect_throw = [&](auto&& fn, auto tag, const std::string& what) {
    using E = decltype(tag);
    try {
      fn();
      c.expect(false, what + ": no exception");
    } catch (const E&) {
    } catch (const std::exception& e) {
      c.expect(false, what + ": wrong exception " + e.what());
    }
  };
  const auto cfg = [](const JudgeStub& s, int retries) { return testing::fast_config(s.url(), retries); };
  {
    JudgeStub ok(JudgeStub::constant(200, R"({"score": 4, "rationale": "x"})"));
    c.expect(HttpJudge(cfg(ok, 3)).judge("p", "r", "") == JudgeVerdict(4, "x"), "plain success");
  }
  {
    JudgeStub flaky([](const nlohmann::json&, int call) {
      if (call == 0) return StubReply{500, ""};
      if (call == 1) return StubReply{429, ""};
      return StubReply{200, R"({"score": 2})"};
    });
    c.expect(HttpJudge(cfg(flaky, 3)).judge("p", "r", "").score == 2, "transient failures not retried");
    c.expect(flaky.calls() == 3, "expected 3 attempts, saw " + std::to_string(flaky.calls()));
  }
  {
    JudgeStub down(JudgeStub::constant(503, ""));
    expect_throw([&] { HttpJudge(cfg(down, 2)).judge("p", "r", ""); }, JudgeTransportError("x"), "exhausted retries");
    c.expect(down.calls() == 3, "exhausted retries made " + std::to_string(down.calls()) + " attempts");
  }
  for (const char* body : {R"({"score": 0})", R"({"score": 7})", R"({"score": 3.5})", R"({"score": "3"})", "oops"}) {
    JudgeStub bad(JudgeStub::constant(200, body));
    expect_throw([&] { HttpJudge(cfg(bad, 3)).judge("p", "r", ""); }, JudgeProtocolError("x"),
                 std::string("malformed ") + body);
    c.expect(bad.calls() == 1, std::string("malformed reply retried: ") + body);
  }
  {
    JudgeStub missing(JudgeStub::constant(404, ""));
    expect_throw([&] { HttpJudge(cfg(missing, 3)).judge("p", "r", ""); }, JudgeTransportError("x"), "HTTP 404");
    c.expect(missing.calls() == 1, "HTTP 404 retried");
  }
  return c.outcome("100 adapters bit-exact; retry, protocol and transport behaviour as specified");
}

Outcome criterion_12() {
  auto& t = toy();
  if (!t.error.empty()) return {false, t.error};
  Check c;
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(t.run1())) {
    if (!entry.is_regular_file() || entry.path().filename() == "run_meta.json") continue;
    const fs::path rel = fs::relative(entry.path(), t.run1());
    c.expect(fs::exists(t.run2() / rel), rel.string() + " missing from the second run");
    c.expect(slurp(entry.path()) == slurp(t.run2() / rel), rel.string() + " differs");
    ++compared;
  }
  for (const auto& entry : fs::recursive_directory_iterator(t.run2()))
    if (entry.is_regular_file())
      c.expect(fs::exists(t.run1() / fs::relative(entry.path(), t.run2())), "extra file in the second run");
  c.expect(compared >= 20, "only " + std::to_string(compared) + " artifacts");
  return c.outcome(std::to_string(compared) + " artifacts byte-identical");
}

}  // namespace
}  // namespace lorafuse

int main() {
  using namespace lorafuse;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"fusion equivalence", criterion_1},  {"rank bound", criterion_2},
      {"endpoint identities", criterion_3}, {"affinity in lambda", criterion_4},
      {"attach/merge equivalence", criterion_5}, {"gradient check and frozen base", criterion_6},
      {"toy lambda sweep", criterion_7},    {"metric fixtures", criterion_8},
      {"delta table fixture", criterion_9}, {"lambda optimizer", criterion_10},
      {"format and judge protocol", criterion_11}, {"reproducibility", criterion_12},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
