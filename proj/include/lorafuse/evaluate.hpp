// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lorafuse/error.hpp"
#include "lorafuse/judge.hpp"
#include "lorafuse/metrics.hpp"
#include "lorafuse/model.hpp"
#include "lorafuse/records.hpp"

namespace lorafuse {

enum class Suite { harmfulness, xstest, mcq, task, rouge };

inline const char* to_string(Suite s) {
  switch (s) {
    case Suite::harmfulness: return "harmfulness";
    case Suite::xstest: return "xstest";
    case Suite::mcq: return "mcq";
    case Suite::task: return "task";
    case Suite::rouge: return "rouge";
  }
  return "unknown";
}

inline Suite parse_suite(const std::string& name) {
  for (Suite s : {Suite::harmfulness, Suite::xstest, Suite::mcq, Suite::task, Suite::rouge})
    if (name == to_string(s)) return s;
  throw ConfigError("unknown suite '" + name + "' (expected harmfulness, xstest, mcq, task or rouge)");
}

inline std::set<Suite> all_suites() {
  return {Suite::harmfulness, Suite::xstest, Suite::mcq, Suite::task, Suite::rouge};
}

/// Evaluation inputs; an empty list skips its suite.
struct EvalData {
  std::vector<HarmfulPrompt> harmful;
  std::vector<BenignPrompt> xstest;
  std::vector<McqItem> mcq;
  std::vector<InstructionExample> task;
  std::vector<RougeItem> rouge;
};

struct EvalOptions {
  std::set<Suite> suites = all_suites();
  int max_new_tokens = 48;
  std::string policy;
  std::vector<std::string> refusal_markers = default_refusal_markers();
  std::vector<std::string> categories = default_categories();
};

/// Mean per-token NLL of `continuation` after the framed `prompt`.
inline double continuation_nll(const ModelWeights& w, const std::string& prompt, const std::string& continuation) {
  const EncodedTurn turn = encode_turn(prompt, continuation);
  return cross_entropy_loss(forward(w, nullptr, turn.inputs), turn.targets);
}

/// Index of the most likely choice; ties go to the lower index.
inline int predict_choice(const ModelWeights& w, const McqItem& item) {
  int best = 0;
  double best_nll = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < item.choices.size(); ++i) {
    const double nll = continuation_nll(w, item.question, item.choices[i]);
    if (nll < best_nll) {
      best_nll = nll;
      best = static_cast<int>(i);
    }
  }
  return best;
}

namespace detail {

inline void run_harmfulness(const ModelWeights& w, const EvalData& data, const Judge& judge, const EvalOptions& opt,
                            EvalReport& report) {
  std::vector<std::string> responses;
  std::vector<JudgeVerdict> verdicts;
  std::vector<std::pair<std::string, JudgeVerdict>> labelled;
  for (const auto& h : data.harmful) {
    responses.push_back(respond(w, nullptr, h.prompt, opt.max_new_tokens));
    verdicts.push_back(judge.judge(h.prompt, responses.back(), opt.policy));
    labelled.emplace_back(h.category, verdicts.back());
  }
  report.per_category = category_breakdown(labelled, opt.categories);
  report.harmfulness_score = harmfulness_score(verdicts);
  report.harmfulness_rate = harmfulness_rate(verdicts);
  report.refusal_rate = refusal_rate(responses, opt.refusal_markers);
  report.n["harmfulness"] = verdicts.size();
}

inline void run_xstest(const ModelWeights& w, const EvalData& data, const EvalOptions& opt, EvalReport& report) {
  std::vector<std::string> responses;
  for (const auto& b : data.xstest) responses.push_back(respond(w, nullptr, b.prompt, opt.max_new_tokens));
  report.xstest_rate = xstest_rate(responses, opt.refusal_markers);
  report.n["xstest"] = responses.size();
}

inline void run_mcq(const ModelWeights& w, const EvalData& data, EvalReport& report) {
  std::vector<McqPrediction> preds;
  for (const auto& item : data.mcq) preds.push_back({item.choices.size(), item.answer, predict_choice(w, item)});
  report.utility_accuracy = mcq_accuracy(preds);
  report.n["mcq"] = preds.size();
}

inline void run_task(const ModelWeights& w, const EvalData& data, const EvalOptions& opt, EvalReport& report) {
  std::size_t exact = 0;
  for (const auto& ex : data.task) exact += respond(w, nullptr, ex.user, opt.max_new_tokens) == ex.assistant;
  report.task_accuracy = static_cast<double>(exact) / static_cast<double>(data.task.size());
  report.n["task"] = data.task.size();
}

inline void run_rouge(const ModelWeights& w, const EvalData& data, const EvalOptions& opt, EvalReport& report) {
  double sum = 0.0;
  for (const auto& item : data.rouge) {
    const std::string reply = respond(w, nullptr, item.prompt, opt.max_new_tokens);
    // An empty generation has no unigrams; it contributes zero precision.
    sum += unigrams(reply).empty() ? 0.0 : rouge1_precision(reply, item.reference);
  }
  report.rouge1_precision = sum / static_cast<double>(data.rouge.size());
  report.n["rouge"] = data.rouge.size();
}

inline bool has_items(const EvalData& data, Suite s) {
  switch (s) {
    case Suite::harmfulness: return !data.harmful.empty();
    case Suite::xstest: return !data.xstest.empty();
    case Suite::mcq: return !data.mcq.empty();
    case Suite::task: return !data.task.empty();
    case Suite::rouge: return !data.rouge.empty();
  }
  return false;
}

}  // namespace detail

/// Runs the selected suites on `w` (adapters already merged). A judge
/// failure marks only the harmfulness suite as failed; other errors
/// propagate.
inline EvalReport evaluate_model(const ModelWeights& w, const EvalData& data, const Judge& judge,
                                 const EvalOptions& opt = {}) {
  EvalReport report;
  for (Suite s : opt.suites) {
    if (!detail::has_items(data, s)) throw DataError(std::string("suite '") + to_string(s) + "' has no items");
    switch (s) {
      case Suite::harmfulness:
        try {
          detail::run_harmfulness(w, data, judge, opt, report);
        } catch (const JudgeTransportError& e) {
          report.failed_suites[to_string(s)] = e.what();
        } catch (const JudgeProtocolError& e) {
          report.failed_suites[to_string(s)] = e.what();
        }
        break;
      case Suite::xstest: detail::run_xstest(w, data, opt, report); break;
      case Suite::mcq: detail::run_mcq(w, data, report); break;
      case Suite::task: detail::run_task(w, data, opt, report); break;
      case Suite::rouge: detail::run_rouge(w, data, opt, report); break;
    }
  }
  return report;
}

}  // namespace lorafuse
