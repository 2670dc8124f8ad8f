// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// End-to-end workflows shared by the command-line tool and the tests: run
// configuration, adapter training per role, fusion, evaluation and the
// lambda sweep with its on-disk artifacts.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/container.hpp"
#include "lorafuse/dataset.hpp"
#include "lorafuse/evaluate.hpp"
#include "lorafuse/fusion.hpp"
#include "lorafuse/judge.hpp"
#include "lorafuse/lambda_search.hpp"
#include "lorafuse/metrics.hpp"
#include "lorafuse/model.hpp"
#include "lorafuse/train.hpp"

namespace lorafuse {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration.

struct JudgeConfig {
  std::string kind = "mock";  // mock | http
  std::string url;
  int retries = 3;
  int backoff_ms = 200;
  int timeout_ms = 30000;
  int concurrency = 1;
  bool aoa_quirk = false;
  std::vector<std::string> harm_keywords = default_harm_keywords();
  std::vector<std::string> refusal_markers = default_refusal_markers();
  std::string policy;
};

struct DataPaths {
  fs::path task, safety, harmful, xstest, mcq, rouge;
};

/// Every relative path in the file is resolved against the file's directory.
/// The single `seed` drives everything: the base model uses it directly and
/// the task/safety adapters use seed + 1 and seed + 2.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  FusionStrategy strategy = FusionStrategy::concatenation;
  DataPaths data;
  JudgeConfig judge;
  std::vector<double> lambda_grid{0.0, 0.25, 0.5, 0.75, 1.0};
  fs::path output_dir = "runs";
  std::uint64_t seed = 1234;
  int safe_threshold = kDefaultSafeThreshold;
  double mix_fraction = 0.03;
  int max_new_tokens = 48;
  std::set<Suite> suites = all_suites();
  std::vector<std::string> categories = default_categories();

  void validate() const {
    model.validate();
    train.validate();
    try {
      check_lambda_grid(lambda_grid);
    } catch (const RangeError& e) {
      throw ConfigError(std::string("lambda_grid: ") + e.what());
    }
    if (lambda_grid.empty()) throw ConfigError("lambda_grid is empty");
    if (judge.kind != "mock" && judge.kind != "http") throw ConfigError("judge.kind must be mock or http");
    if (safe_threshold < kMinJudgeScore || safe_threshold > kMaxJudgeScore)
      throw ConfigError("safe_threshold must be in [1, 5]");
    if (max_new_tokens < 0) throw ConfigError("max_new_tokens must be >= 0");
    for (const fs::path* p : {&data.task, &data.safety, &data.harmful, &data.xstest, &data.mcq, &data.rouge}) {
      if (!p->empty() && !fs::exists(*p)) throw InputError("data file not found: " + p->string());
    }
  }

  ModelConfig seeded_model() const {
    ModelConfig m = model;
    m.seed = seed;
    return m;
  }
};

enum class Role { task, safety };

inline Role parse_role(const std::string& s) {
  if (s == "task") return Role::task;
  if (s == "safety") return Role::safety;
  throw ConfigError("role must be task or safety, got '" + s + "'");
}

inline const char* to_string(Role r) { return r == Role::task ? "task" : "safety"; }

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base_dir) {
  detail::check_keys(j,
                     {"model", "train", "fusion", "data", "judge", "lambda_grid", "output_dir", "seed",
                      "safe_threshold", "mix_fraction", "eval"},
                     "run config");
  RunConfig c;
  try {
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    if (j.contains("fusion")) {
      detail::check_keys(j["fusion"], {"strategy"}, "fusion");
      c.strategy = parse_strategy(j["fusion"].value("strategy", std::string("concatenation")));
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      detail::check_keys(d, {"task", "safety", "harmful", "xstest", "mcq", "rouge"}, "data");
      auto path = [&](const char* key) { return detail::resolve(base_dir, d.value(key, std::string())); };
      c.data = {path("task"), path("safety"), path("harmful"), path("xstest"), path("mcq"), path("rouge")};
    }
    if (j.contains("judge")) {
      const auto& jj = j["judge"];
      detail::check_keys(jj,
                         {"kind", "url", "retries", "backoff_ms", "timeout_ms", "concurrency", "aoa_quirk",
                          "harm_keywords", "refusal_markers", "policy"},
                         "judge");
      c.judge.kind = jj.value("kind", c.judge.kind);
      c.judge.url = jj.value("url", c.judge.url);
      c.judge.retries = jj.value("retries", c.judge.retries);
      c.judge.backoff_ms = jj.value("backoff_ms", c.judge.backoff_ms);
      c.judge.timeout_ms = jj.value("timeout_ms", c.judge.timeout_ms);
      c.judge.concurrency = jj.value("concurrency", c.judge.concurrency);
      c.judge.aoa_quirk = jj.value("aoa_quirk", c.judge.aoa_quirk);
      c.judge.harm_keywords = jj.value("harm_keywords", c.judge.harm_keywords);
      c.judge.refusal_markers = jj.value("refusal_markers", c.judge.refusal_markers);
      c.judge.policy = jj.value("policy", c.judge.policy);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      detail::check_keys(e, {"max_new_tokens", "suites", "categories"}, "eval");
      c.max_new_tokens = e.value("max_new_tokens", c.max_new_tokens);
      if (e.contains("suites")) {
        c.suites.clear();
        for (const auto& s : e["suites"]) c.suites.insert(parse_suite(s.get<std::string>()));
      }
      c.categories = e.value("categories", c.categories);
    }
    c.lambda_grid = j.value("lambda_grid", c.lambda_grid);
    c.output_dir = detail::resolve(base_dir, j.value("output_dir", std::string("runs")));
    c.seed = j.value("seed", c.seed);
    c.safe_threshold = j.value("safe_threshold", c.safe_threshold);
    c.mix_fraction = j.value("mix_fraction", c.mix_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, fs::absolute(path).parent_path());
}

inline std::unique_ptr<Judge> make_judge(const JudgeConfig& c) {
  if (c.kind == "mock") return std::make_unique<MockJudge>(MockJudgeOptions{c.refusal_markers, c.harm_keywords, c.aoa_quirk});
  const std::string url = resolve_judge_url(c.url);
  if (url.empty()) throw ConfigError("http judge needs judge.url or " + std::string(kJudgeUrlEnv));
  return std::make_unique<HttpJudge>(HttpJudgeConfig{url, c.retries, std::chrono::milliseconds(c.backoff_ms),
                                                     std::chrono::milliseconds(c.timeout_ms), c.concurrency});
}

// ---------------------------------------------------------------------------
// Output files. Nothing is overwritten unless `force` is set.

class OutputWriter {
 public:
  explicit OutputWriter(bool force) : force_(force) {}

  void check(const fs::path& path) const {
    if (!force_ && fs::exists(path)) throw ConfigError("refusing to overwrite " + path.string() + " (use --force)");
  }

  void text(const fs::path& path, std::string_view content) const {
    prepare(path);
    write_text_file(path, content);
  }

  void adapter(const fs::path& path, const LoraAdapter& a) const {
    prepare(path);
    save_adapter(a, path);
  }

  void weights(const fs::path& path, const ModelWeights& w) const {
    prepare(path);
    save_weights(w, path);
  }

 private:
  void prepare(const fs::path& path) const {
    check(path);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
  }

  bool force_;
};

// ---------------------------------------------------------------------------
// Training.

/// Safety pairs train as prompt -> refusal turns.
inline std::vector<InstructionExample> training_examples(Role role, const fs::path& data) {
  if (role == Role::task) return load_jsonl<InstructionExample>(data).records;
  std::vector<InstructionExample> out;
  for (const auto& s : load_jsonl<SafetyExample>(data).records) out.push_back({"", s.prompt, s.refusal});
  return out;
}

inline TrainConfig role_train_config(const RunConfig& c, Role role) {
  TrainConfig t = c.train;
  t.seed = c.seed + (role == Role::task ? 1 : 2);
  return t;
}

inline TrainResult train_role(const RunConfig& c, const ModelWeights& base, Role role, const fs::path& data) {
  return train_lora(base, training_examples(role, data), role_train_config(c, role), to_string(role));
}

inline std::string loss_curve_csv(const std::vector<double>& curve) {
  std::string out = "epoch,loss\n";
  for (std::size_t e = 0; e < curve.size(); ++e)
    out += std::to_string(e) + "," + detail::format_number(curve[e]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Fusion to a file-storable adapter.

/// Full-rank adapter whose update equals `delta` exactly: A = delta, B = I,
/// alpha = rank.
inline LoraAdapter dense_adapter(const DeltaSet& delta, std::string name) {
  LoraAdapter out{std::move(name), {}};
  for (const auto& [id, d] : delta) {
    const auto r = static_cast<int>(d.cols());
    out.layers.emplace(id, LoraLayer{d, Matrix::identity(d.cols()), r, static_cast<double>(r)});
  }
  return out;
}

inline LoraAdapter fuse_pair(const LoraAdapter& task, const LoraAdapter& safety, FusionSpec spec) {
  const LoraAdapter pair[] = {task, safety};
  if (spec.strategy == FusionStrategy::concatenation) return fuse_concat(pair, spec, "fused");
  return dense_adapter(fuse_linear(pair, spec), "fused");
}

// ---------------------------------------------------------------------------
// Evaluation.

inline EvalData load_eval_data(const RunConfig& c, const std::set<Suite>& suites) {
  auto need = [&](Suite s, const fs::path& p) {
    if (!suites.count(s)) return false;
    if (p.empty()) throw ConfigError(std::string("suite '") + to_string(s) + "' has no data path configured");
    return true;
  };
  EvalData d;
  if (need(Suite::harmfulness, c.data.harmful)) d.harmful = load_jsonl<HarmfulPrompt>(c.data.harmful).records;
  if (need(Suite::xstest, c.data.xstest)) d.xstest = load_jsonl<BenignPrompt>(c.data.xstest).records;
  if (need(Suite::mcq, c.data.mcq)) d.mcq = load_jsonl<McqItem>(c.data.mcq).records;
  if (need(Suite::task, c.data.task)) d.task = load_jsonl<InstructionExample>(c.data.task).records;
  if (need(Suite::rouge, c.data.rouge)) d.rouge = load_jsonl<RougeItem>(c.data.rouge).records;
  return d;
}

inline EvalOptions eval_options(const RunConfig& c, const std::set<Suite>& suites) {
  EvalOptions o;
  o.suites = suites;
  o.max_new_tokens = c.max_new_tokens;
  o.policy = c.judge.policy;
  o.refusal_markers = c.judge.refusal_markers;
  o.categories = c.categories;
  return o;
}

/// report.json, report.csv and (when the harmfulness suite ran) radial.csv.
inline void write_report(const OutputWriter& out, const fs::path& dir, const EvalReport& r) {
  out.text(dir / "report.json", to_json(r).dump(2) + "\n");
  out.text(dir / "report.csv", report_csv(r));
  if (!r.per_category.empty()) out.text(dir / "radial.csv", radial_csv(r.per_category));
}

/// Loads a stored adapter, folds it into the base and evaluates.
inline EvalReport evaluate_adapter_file(const ModelWeights& base, const fs::path& adapter_path, const EvalData& data,
                                        const Judge& judge, const EvalOptions& opt) {
  return evaluate_model(merge_adapter(base, load_adapter(adapter_path)), data, judge, opt);
}

// ---------------------------------------------------------------------------
// Lambda sweep.

inline std::string lambda_label(double lambda) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", lambda);
  return buf;
}

struct SweepPoint {
  double lambda = 0.0;
  std::optional<EvalReport> report;
  std::string error;  // set when the point failed outright

  bool ok() const { return report && report->ok(); }
};

struct SweepResult {
  std::vector<SweepPoint> points;
  std::optional<DeltaTable> table;

  bool ok() const {
    for (const auto& p : points)
      if (!p.ok()) return false;
    return true;
  }
};

struct SweepInputs {
  fs::path task_adapter;    // trained into the output directory when empty
  fs::path safety_adapter;  // likewise
  unsigned jobs = 1;
};

inline std::string utility_curve_csv(const std::vector<SweepPoint>& points) {
  std::string out = "lambda,utility_accuracy,task_accuracy,xstest_rate,refusal_rate,harmfulness_score,harmfulness_rate\n";
  auto cell = [](const std::optional<double>& v) { return v ? detail::format_number(*v) : std::string(); };
  for (const auto& p : points) {
    out += lambda_label(p.lambda);
    if (p.report) {
      const auto& r = *p.report;
      for (const auto* v : {&r.utility_accuracy, &r.task_accuracy, &r.xstest_rate, &r.refusal_rate,
                            &r.harmfulness_score, &r.harmfulness_rate})
        out += "," + cell(*v);
    } else {
      out += ",,,,,,";
    }
    out += "\n";
  }
  return out;
}

/// For each lambda: fuse, write fused.lorafus, reload it, merge and evaluate
/// (the same path as `fuse` followed by `eval`). A failing point is recorded
/// and the sweep continues.
inline SweepResult run_sweep(const RunConfig& c, const SweepInputs& in, const OutputWriter& out) {
  c.validate();
  const fs::path root = c.output_dir;
  // Refuse up front rather than after training half the artifacts.
  for (const char* f : {"table1.csv", "table1.txt", "utility_curve.csv", "sweep.json"}) out.check(root / f);
  for (double lambda : c.lambda_grid)
    for (const char* f : {"fused.lorafus", "report.json", "report.csv", "radial.csv"})
      out.check(root / ("lambda_" + lambda_label(lambda)) / f);
  for (const auto& [role, given] : {std::pair{Role::task, in.task_adapter}, std::pair{Role::safety, in.safety_adapter}})
    if (given.empty())
      for (const char* suffix : {".lorafus", "_loss.csv"}) out.check(root / (std::string(to_string(role)) + suffix));
  fs::create_directories(root);
  const ModelWeights base = init_model(c.seeded_model());

  auto adapter_path = [&](Role role, const fs::path& given) {
    if (!given.empty()) return given;
    const fs::path data = role == Role::task ? c.data.task : c.data.safety;
    if (data.empty()) throw ConfigError(std::string("no ") + to_string(role) + " data configured");
    const TrainResult trained = train_role(c, base, role, data);
    const fs::path path = root / (std::string(to_string(role)) + ".lorafus");
    out.adapter(path, trained.adapter);
    out.text(root / (std::string(to_string(role)) + "_loss.csv"), loss_curve_csv(trained.loss_curve));
    return path;
  };
  const LoraAdapter task = load_adapter(adapter_path(Role::task, in.task_adapter));
  const LoraAdapter safety = load_adapter(adapter_path(Role::safety, in.safety_adapter));

  const EvalData data = load_eval_data(c, c.suites);
  const EvalOptions opt = eval_options(c, c.suites);
  const auto judge = make_judge(c.judge);

  auto rows = sweep_lambda(
      c.lambda_grid,
      [&](double lambda, std::array<double, 2> weights) {
        SweepPoint p{lambda, std::nullopt, {}};
        try {
          const fs::path dir = root / ("lambda_" + lambda_label(lambda));
          FusionSpec spec{c.strategy, {weights[0], weights[1]}, true};
          out.adapter(dir / "fused.lorafus", fuse_pair(task, safety, spec));
          p.report = evaluate_adapter_file(base, dir / "fused.lorafus", data, *judge, opt);
          write_report(out, dir, *p.report);
        } catch (const Error& e) {
          p.error = e.what();
        }
        return p;
      },
      in.jobs);

  SweepResult result;
  for (auto& row : rows) result.points.push_back(std::move(row.metrics));

  // Delta table: the first lambda is the baseline column.
  const SweepPoint& first = result.points.front();
  if (first.report) {
    const ReportColumn baseline = report_column(lambda_label(first.lambda), *first.report);
    std::vector<ReportColumn> columns;
    for (std::size_t i = 1; i < result.points.size(); ++i) {
      const auto& p = result.points[i];
      if (!p.report) continue;
      ReportColumn col = report_column(lambda_label(p.lambda), *p.report);
      if (col.metrics.size() == baseline.metrics.size()) columns.push_back(std::move(col));
    }
    result.table = delta_table(baseline, columns);
    out.text(root / "table1.csv", result.table->to_csv());
    out.text(root / "table1.txt", result.table->to_text());
  }
  out.text(root / "utility_curve.csv", utility_curve_csv(result.points));

  nlohmann::json summary = nlohmann::json::array();
  for (const auto& p : result.points) {
    nlohmann::json row = {{"lambda", p.lambda}, {"ok", p.ok()}};
    if (p.report) row["report"] = to_json(*p.report);
    if (!p.error.empty()) row["error"] = p.error;
    summary.push_back(row);
  }
  out.text(root / "sweep.json", summary.dump(2) + "\n");
  return result;
}

}  // namespace lorafuse
