// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lorafuse/pipeline.hpp"

namespace lorafuse::cli {

// Stable exit-code contract.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // internal error or failed suite
inline constexpr int kExitUsage = 2;    // bad flags, config or input paths

namespace detail {

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Timestamps live only here, so every other artifact stays byte-stable.
inline void write_run_meta(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                           const std::string& started, int exit_code) {
  fs::create_directories(dir);
  const nlohmann::json meta = {{"command", command},   {"argv", argv},
                               {"started_at", started}, {"finished_at", utc_now()},
                               {"exit_code", exit_code}};
  write_text_file(dir / "run_meta.json", meta.dump(2) + "\n");
}

inline std::string detect_record_type(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  while (std::getline(in, line) && line.find_first_not_of(" \t\r") == std::string::npos) {
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": first record: " + e.what(), 1);
  }
  if (j.contains("refusal")) return "safety";
  if (j.contains("assistant")) return "instruction";
  if (j.contains("choices")) return "mcq";
  if (j.contains("reference")) return "rouge";
  if (j.contains("category")) return "harmful";
  if (j.contains("prompt")) return "benign";
  throw SchemaError(path.string() + ": cannot tell the record type from the first line");
}

inline fs::path dir_of(const fs::path& file) {
  return file.has_parent_path() ? file.parent_path() : fs::path(".");
}

inline void require_file(const std::string& path) {
  if (!path.empty() && !fs::exists(path)) throw InputError("file not found: " + path);
}

template <class T>
std::vector<Finding> validate_records(const fs::path& path) {
  return load_jsonl<T>(path).findings;
}

}  // namespace detail

struct Context {
  std::string config_path;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::vector<std::string> argv;

  RunConfig config() const {
    RunConfig c = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) c.seed = *seed;
    if (!output_dir.empty()) c.output_dir = output_dir;
    return c;
  }

  ModelWeights base(const RunConfig& c, const std::string& base_path) const {
    return base_path.empty() ? init_model(c.seeded_model()) : load_weights(base_path);
  }
};

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx;
  ctx.argv.assign(argv, argv + argc);
  const std::string started = detail::utc_now();

  CLI::App app{"Train, fuse and evaluate task and safety LoRA adapters."};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", ctx.config_path, "Run configuration (JSON)");
  app.add_flag("--force", ctx.force, "Overwrite existing output files");
  app.add_option("--seed", ctx.seed, "Override the run seed");
  app.add_option("--output-dir", ctx.output_dir, "Override the output directory");

  // Each handler returns an exit code and the directory for run_meta.json.
  struct Outcome {
    int code = kExitOk;
    fs::path meta_dir;
  };
  std::function<Outcome()> handler;

  // train ------------------------------------------------------------------
  std::string role_name, train_data, train_out, base_path;
  std::optional<int> epochs, rank;
  std::optional<double> lr, alpha;
  auto* train = app.add_subcommand("train", "Train a task or safety adapter");
  train->add_option("--role", role_name, "task | safety")->required()->check(CLI::IsMember({"task", "safety"}));
  train->add_option("--data", train_data, "Training JSONL (defaults to the configured path)");
  train->add_option("--out", train_out, "Adapter file (default <output_dir>/<role>.lorafus)");
  train->add_option("--base", base_path, "Base weights (default: initialized from the config)");
  train->add_option("--epochs", epochs);
  train->add_option("--lr", lr);
  train->add_option("--rank", rank);
  train->add_option("--alpha", alpha);
  train->callback([&] {
    handler = [&]() -> Outcome {
      RunConfig c = ctx.config();
      if (epochs) c.train.epochs = *epochs;
      if (lr) c.train.learning_rate = *lr;
      if (rank) c.train.rank = *rank;
      if (alpha) c.train.alpha = *alpha;
      detail::require_file(base_path);
      const Role role = parse_role(role_name);
      const fs::path data = !train_data.empty() ? fs::path(train_data) : role == Role::task ? c.data.task : c.data.safety;
      if (data.empty()) throw ConfigError("no training data: pass --data or configure data." + role_name);
      if (!fs::exists(data)) throw InputError("data file not found: " + data.string());
      const fs::path dest = !train_out.empty() ? fs::path(train_out) : c.output_dir / (role_name + ".lorafus");
      const fs::path curve = detail::dir_of(dest) / (dest.stem().string() + "_loss.csv");
      const OutputWriter writer(ctx.force);
      writer.check(dest);
      writer.check(curve);

      const TrainResult r = train_role(c, ctx.base(c, base_path), role, data);
      writer.adapter(dest, r.adapter);
      writer.text(curve, loss_curve_csv(r.loss_curve));
      out << "trained " << role_name << " adapter: loss " << r.loss_curve.front() << " -> " << r.loss_curve.back()
          << "\nwrote " << dest.string() << "\n";
      return {kExitOk, detail::dir_of(dest)};
    };
  });

  // fuse -------------------------------------------------------------------
  std::string task_path, safety_path, fuse_out, strategy_name;
  std::optional<double> lambda, safety_weight;
  double task_weight = 1.0;
  bool no_normalize = false;
  auto* fuse = app.add_subcommand("fuse", "Fuse a task and a safety adapter");
  fuse->add_option("--task", task_path)->required();
  fuse->add_option("--safety", safety_path)->required();
  auto* lambda_opt = fuse->add_option("--lambda", lambda, "Safety share; weights are [1 - lambda, lambda]");
  auto* no_norm = fuse->add_flag("--no-normalize", no_normalize, "Fix the task weight and set the safety weight freely");
  fuse->add_option("--safety-weight", safety_weight)->needs(no_norm);
  fuse->add_option("--task-weight", task_weight, "Task weight in --no-normalize mode")->needs(no_norm);
  lambda_opt->excludes(no_norm);
  fuse->add_option("--strategy", strategy_name, "concatenation | linear");
  fuse->add_option("--out", fuse_out, "Fused adapter (default <output_dir>/fused.lorafus)");
  fuse->callback([&] {
    handler = [&]() -> Outcome {
      const RunConfig c = ctx.config();
      for (const auto& p : {task_path, safety_path}) detail::require_file(p);
      const FusionStrategy strategy = strategy_name.empty() ? c.strategy : parse_strategy(strategy_name);
      FusionSpec spec;
      if (no_normalize) {
        if (!safety_weight) throw ConfigError("--no-normalize needs --safety-weight");
        spec = FusionSpec::unnormalized(task_weight, *safety_weight, strategy);
      } else {
        if (!lambda) throw ConfigError("fuse needs --lambda (or --no-normalize --safety-weight)");
        if (!(*lambda >= 0.0 && *lambda <= 1.0)) throw RangeError("--lambda must be in [0, 1]");
        spec = FusionSpec::task_safety(*lambda, strategy);
      }
      for (const auto& w : spec.weights)
        if (!std::isfinite(w) || w < 0.0) throw RangeError("fusion weights must be finite and non-negative");
      const fs::path dest = !fuse_out.empty() ? fs::path(fuse_out) : c.output_dir / "fused.lorafus";
      const OutputWriter writer(ctx.force);
      writer.check(dest);
      writer.adapter(dest, fuse_pair(load_adapter(task_path), load_adapter(safety_path), spec));
      out << "fused with weights [" << spec.weights[0] << ", " << spec.weights[1] << "]\nwrote " << dest.string()
          << "\n";
      return {kExitOk, detail::dir_of(dest)};
    };
  });

  // merge ------------------------------------------------------------------
  std::string merge_adapter_path, merge_out;
  auto* merge = app.add_subcommand("merge", "Fold an adapter into the base weights");
  merge->add_option("--adapter", merge_adapter_path)->required();
  merge->add_option("--base", base_path, "Base weights (default: initialized from the config)");
  merge->add_option("--out", merge_out, "Merged weights (default <output_dir>/merged.lorafus)");
  merge->callback([&] {
    handler = [&]() -> Outcome {
      const RunConfig c = ctx.config();
      for (const auto& p : {merge_adapter_path, base_path}) detail::require_file(p);
      const fs::path dest = !merge_out.empty() ? fs::path(merge_out) : c.output_dir / "merged.lorafus";
      const OutputWriter writer(ctx.force);
      writer.check(dest);
      writer.weights(dest, merge_adapter(ctx.base(c, base_path), load_adapter(merge_adapter_path)));
      out << "wrote " << dest.string() << "\n";
      return {kExitOk, detail::dir_of(dest)};
    };
  });

  // eval -------------------------------------------------------------------
  std::string eval_adapter, eval_model, eval_out;
  std::vector<std::string> suite_names;
  auto* eval = app.add_subcommand("eval", "Evaluate the base, an adapter or merged weights");
  auto* eval_adapter_opt = eval->add_option("--adapter", eval_adapter);
  eval->add_option("--model", eval_model, "Merged weights file")->excludes(eval_adapter_opt);
  eval->add_option("--base", base_path, "Base weights for --adapter");
  eval->add_option("--suites", suite_names, "harmfulness,xstest,mcq,task,rouge")->delimiter(',');
  eval->add_option("--out", eval_out, "Report directory (default <output_dir>/eval)");
  eval->callback([&] {
    handler = [&]() -> Outcome {
      const RunConfig c = ctx.config();
      for (const auto& p : {eval_adapter, eval_model, base_path}) detail::require_file(p);
      std::set<Suite> suites = c.suites;
      if (!suite_names.empty()) {
        suites.clear();
        for (const auto& s : suite_names) suites.insert(parse_suite(s));
      }
      const fs::path dir = !eval_out.empty() ? fs::path(eval_out) : c.output_dir / "eval";
      const OutputWriter writer(ctx.force);
      for (const char* f : {"report.json", "report.csv", "radial.csv"}) writer.check(dir / f);

      const EvalData data = load_eval_data(c, suites);
      const auto judge = make_judge(c.judge);
      const EvalOptions opt = eval_options(c, suites);
      EvalReport report;
      if (!eval_model.empty())
        report = evaluate_model(load_weights(eval_model), data, *judge, opt);
      else if (!eval_adapter.empty())
        report = evaluate_adapter_file(ctx.base(c, base_path), eval_adapter, data, *judge, opt);
      else
        report = evaluate_model(ctx.base(c, base_path), data, *judge, opt);
      write_report(writer, dir, report);
      out << report_csv(report);
      for (const auto& [suite, why] : report.failed_suites) err << "suite " << suite << " failed: " << why << "\n";
      return {report.ok() ? kExitOk : kExitFailure, dir};
    };
  });

  // sweep ------------------------------------------------------------------
  SweepInputs sweep_in;
  std::string sweep_task, sweep_safety;
  std::vector<double> grid;
  auto* sweep = app.add_subcommand("sweep", "Fuse and evaluate over a lambda grid");
  sweep->add_option("--task", sweep_task, "Task adapter (trained when omitted)");
  sweep->add_option("--safety", sweep_safety, "Safety adapter (trained when omitted)");
  sweep->add_option("--grid", grid, "Lambda values, e.g. 0,0.25,0.5")->delimiter(',');
  sweep->add_option("--jobs", sweep_in.jobs, "Parallel lambda points")->check(CLI::PositiveNumber);
  sweep->callback([&] {
    handler = [&]() -> Outcome {
      RunConfig c = ctx.config();
      for (const auto& p : {sweep_task, sweep_safety}) detail::require_file(p);
      if (!grid.empty()) c.lambda_grid = grid;
      sweep_in.task_adapter = sweep_task;
      sweep_in.safety_adapter = sweep_safety;
      const SweepResult r = run_sweep(c, sweep_in, OutputWriter(ctx.force));
      if (r.table) out << r.table->to_text();
      for (const auto& p : r.points) {
        if (!p.error.empty()) err << "lambda " << lambda_label(p.lambda) << " failed: " << p.error << "\n";
        if (p.report)
          for (const auto& [suite, why] : p.report->failed_suites)
            err << "lambda " << lambda_label(p.lambda) << " suite " << suite << " failed: " << why << "\n";
      }
      return {r.ok() ? kExitOk : kExitFailure, c.output_dir};
    };
  });

  // dataset ----------------------------------------------------------------
  auto* dataset = app.add_subcommand("dataset", "Validate, judge-filter or mix datasets");
  dataset->require_subcommand(1);

  std::string validate_path, validate_type;
  auto* validate = dataset->add_subcommand("validate", "Check a JSONL file and print findings");
  validate->add_option("file", validate_path)->required();
  validate->add_option("--type", validate_type, "instruction|safety|harmful|benign|mcq|rouge (default: detect)");
  validate->callback([&] {
    handler = [&]() -> Outcome {
      if (!fs::exists(validate_path)) throw InputError("data file not found: " + validate_path);
      const std::string type = validate_type.empty() ? detail::detect_record_type(validate_path) : validate_type;
      std::vector<Finding> findings;
      if (type == "instruction")
        findings = detail::validate_records<InstructionExample>(validate_path);
      else if (type == "safety")
        findings = detail::validate_records<SafetyExample>(validate_path);
      else if (type == "harmful")
        findings = detail::validate_records<HarmfulPrompt>(validate_path);
      else if (type == "benign")
        findings = detail::validate_records<BenignPrompt>(validate_path);
      else if (type == "mcq")
        findings = detail::validate_records<McqItem>(validate_path);
      else if (type == "rouge")
        findings = detail::validate_records<RougeItem>(validate_path);
      else
        throw ConfigError("unknown record type '" + type + "'");
      for (const auto& f : findings) out << f.to_string() << "\n";
      out << findings.size() << " finding(s) in " << validate_path << " (" << type << ")\n";
      return {has_errors(findings) ? kExitFailure : kExitOk, {}};
    };
  });

  std::string filter_data, filter_out, filter_log, judge_kind;
  std::optional<int> threshold;
  auto* filter = dataset->add_subcommand("filter", "Keep safety pairs the judge rates safe");
  filter->add_option("--data", filter_data)->required();
  filter->add_option("--judge", judge_kind, "mock | http (default: configured)")->check(CLI::IsMember({"mock", "http"}));
  filter->add_option("--threshold", threshold, "Highest score still counted safe")->check(CLI::Range(1, 5));
  filter->add_option("--out", filter_out, "Filtered JSONL (default <output_dir>/safety_filtered.jsonl)");
  filter->add_option("--rejections", filter_log, "Rejection CSV (default next to --out)");
  filter->callback([&] {
    handler = [&]() -> Outcome {
      RunConfig c = ctx.config();
      if (!judge_kind.empty()) c.judge.kind = judge_kind;
      if (!fs::exists(filter_data)) throw InputError("data file not found: " + filter_data);
      const fs::path dest = !filter_out.empty() ? fs::path(filter_out) : c.output_dir / "safety_filtered.jsonl";
      const fs::path log = !filter_log.empty() ? fs::path(filter_log)
                                               : dest.parent_path() / (dest.stem().string() + "_rejections.csv");
      const OutputWriter writer(ctx.force);
      writer.check(dest);
      writer.check(log);
      const auto judge = make_judge(c.judge);
      const FilterResult r =
          filter_with_judge(load_safety_dataset(filter_data), *judge, threshold.value_or(c.safe_threshold), c.judge.policy);
      writer.text(dest, to_jsonl(r.kept.examples));
      writer.text(log, rejection_csv(r.rejected));
      for (const auto& f : r.findings) err << f.to_string() << "\n";
      out << "kept " << r.kept.examples.size() << ", rejected " << r.rejected.size() << "\nwrote " << dest.string()
          << "\n";
      return {kExitOk, detail::dir_of(dest)};
    };
  });

  std::string mix_task, mix_safety, mix_out;
  std::optional<double> fraction;
  auto* mix = dataset->add_subcommand("mix", "Blend a fraction of safety pairs into task data");
  mix->add_option("--task", mix_task)->required();
  mix->add_option("--safety", mix_safety)->required();
  mix->add_option("--fraction", fraction, "Share of |task| to add (default 0.03)");
  mix->add_option("--out", mix_out, "Mixed JSONL (default <output_dir>/task_mixed.jsonl)");
  mix->callback([&] {
    handler = [&]() -> Outcome {
      const RunConfig c = ctx.config();
      for (const auto& p : {mix_task, mix_safety})
        if (!fs::exists(p)) throw InputError("data file not found: " + p);
      const double f = fraction.value_or(c.mix_fraction);
      if (!(f >= 0.0 && f <= 1.0)) throw RangeError("--fraction must be in [0, 1]");
      const fs::path dest = !mix_out.empty() ? fs::path(mix_out) : c.output_dir / "task_mixed.jsonl";
      const OutputWriter writer(ctx.force);
      writer.check(dest);
      const auto mixed = mix_safety_data(load_jsonl<InstructionExample>(mix_task).records,
                                         load_safety_dataset(mix_safety), f, c.seed);
      writer.text(dest, to_jsonl(mixed));
      out << "wrote " << mixed.size() << " examples to " << dest.string() << "\n";
      return {kExitOk, detail::dir_of(dest)};
    };
  });

  // report -----------------------------------------------------------------
  std::vector<std::string> report_files, labels;
  std::string report_out;
  auto* report = app.add_subcommand("report", "Baseline delta table from report.json files");
  report->add_option("reports", report_files, "report.json files; the first is the baseline")->required();
  report->add_option("--labels", labels, "Column labels (default: parent directory names)")->delimiter(',');
  report->add_option("--out", report_out, "Also write the table as CSV");
  report->callback([&] {
    handler = [&]() -> Outcome {
      if (!labels.empty() && labels.size() != report_files.size())
        throw ConfigError("--labels needs one label per report");
      std::vector<ReportColumn> columns;
      for (std::size_t i = 0; i < report_files.size(); ++i) {
        const fs::path p = report_files[i];
        std::ifstream in(p);
        if (!in) throw InputError("report not found: " + p.string());
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
          throw SchemaError(p.string() + ": " + e.what());
        }
        const std::string label = labels.empty() ? fs::absolute(p).parent_path().filename().string() : labels[i];
        columns.push_back(report_column(label, report_from_json(j)));
      }
      const DeltaTable t = delta_table(columns.front(), std::span(columns).subspan(1));
      out << t.to_text();
      if (report_out.empty()) return {kExitOk, {}};
      const OutputWriter writer(ctx.force);
      writer.text(report_out, t.to_csv());
      return {kExitOk, detail::dir_of(report_out)};
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  std::string command;
  for (const auto* sub : app.get_subcommands()) {
    command = sub->get_name();
    for (const auto* nested : sub->get_subcommands()) command += " " + nested->get_name();
  }

  Outcome outcome;
  try {
    if (!handler) throw ConfigError("no command given");
    outcome = handler();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const RangeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const SchemaError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  if (!outcome.meta_dir.empty()) detail::write_run_meta(outcome.meta_dir, command, ctx.argv, started, outcome.code);
  return outcome.code;
}

}  // namespace lorafuse::cli
