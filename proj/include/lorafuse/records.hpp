// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "lorafuse/error.hpp"

namespace lorafuse {

/// One instruction-tuning turn: system prompt, user request, assistant reply.
struct InstructionExample {
  std::string system;
  std::string user;
  std::string assistant;

  friend bool operator==(const InstructionExample&, const InstructionExample&) = default;
};

enum class RefusalKind { hard, soft };

inline const char* to_string(RefusalKind k) { return k == RefusalKind::hard ? "hard" : "soft"; }

/// Harmful prompt paired with its refusal.
struct SafetyExample {
  std::string prompt;
  std::string refusal;
  RefusalKind kind = RefusalKind::hard;

  friend bool operator==(const SafetyExample&, const SafetyExample&) = default;
};

struct SafetyDataset {
  std::vector<SafetyExample> examples;
  std::string provenance;
};

// Evaluation-set records.

struct HarmfulPrompt {
  std::string prompt;
  std::string category;
  friend bool operator==(const HarmfulPrompt&, const HarmfulPrompt&) = default;
};

struct BenignPrompt {
  std::string prompt;
  friend bool operator==(const BenignPrompt&, const BenignPrompt&) = default;
};

struct McqItem {
  std::string question;
  std::vector<std::string> choices;
  int answer = 0;
  friend bool operator==(const McqItem&, const McqItem&) = default;
};

struct RougeItem {
  std::string prompt;
  std::string reference;
  friend bool operator==(const RougeItem&, const RougeItem&) = default;
};

namespace detail {
inline std::string required_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw SchemaError(std::string("missing field '") + key + "'");
  if (!j[key].is_string()) throw SchemaError(std::string("field '") + key + "' must be a string");
  return j[key].get<std::string>();
}

inline void require_non_empty(const std::string& value, const char* key) {
  if (value.empty()) throw SchemaError(std::string("field '") + key + "' must be non-empty");
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const InstructionExample& e) {
  j = nlohmann::json{{"system", e.system}, {"user", e.user}, {"assistant", e.assistant}};
}

inline void from_json(const nlohmann::json& j, InstructionExample& e) {
  e.system = j.contains("system") ? detail::required_string(j, "system") : std::string();
  e.user = detail::required_string(j, "user");
  e.assistant = detail::required_string(j, "assistant");
  detail::require_non_empty(e.user, "user");
  detail::require_non_empty(e.assistant, "assistant");
}

inline void to_json(nlohmann::json& j, const SafetyExample& e) {
  j = nlohmann::json{{"prompt", e.prompt}, {"refusal", e.refusal}, {"kind", to_string(e.kind)}};
}

inline void from_json(const nlohmann::json& j, SafetyExample& e) {
  e.prompt = detail::required_string(j, "prompt");
  e.refusal = detail::required_string(j, "refusal");
  detail::require_non_empty(e.prompt, "prompt");
  detail::require_non_empty(e.refusal, "refusal");
  const auto kind = detail::required_string(j, "kind");
  if (kind == "hard")
    e.kind = RefusalKind::hard;
  else if (kind == "soft")
    e.kind = RefusalKind::soft;
  else
    throw SchemaError("field 'kind' must be \"hard\" or \"soft\", got \"" + kind + "\"");
}

inline void to_json(nlohmann::json& j, const HarmfulPrompt& e) {
  j = nlohmann::json{{"prompt", e.prompt}, {"category", e.category}};
}

inline void from_json(const nlohmann::json& j, HarmfulPrompt& e) {
  e.prompt = detail::required_string(j, "prompt");
  e.category = detail::required_string(j, "category");
  detail::require_non_empty(e.prompt, "prompt");
}

inline void to_json(nlohmann::json& j, const BenignPrompt& e) { j = nlohmann::json{{"prompt", e.prompt}}; }

inline void from_json(const nlohmann::json& j, BenignPrompt& e) {
  e.prompt = detail::required_string(j, "prompt");
  detail::require_non_empty(e.prompt, "prompt");
}

inline void to_json(nlohmann::json& j, const McqItem& e) {
  j = nlohmann::json{{"question", e.question}, {"choices", e.choices}, {"answer", e.answer}};
}

inline void from_json(const nlohmann::json& j, McqItem& e) {
  e.question = detail::required_string(j, "question");
  if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
    throw SchemaError("field 'choices' must be a non-empty array");
  e.choices.clear();
  for (const auto& c : j["choices"]) {
    if (!c.is_string()) throw SchemaError("choices must be strings");
    e.choices.push_back(c.get<std::string>());
  }
  if (!j.contains("answer") || !j["answer"].is_number_integer())
    throw SchemaError("field 'answer' must be an integer");
  e.answer = j["answer"].get<int>();
  if (e.answer < 0 || e.answer >= static_cast<int>(e.choices.size()))
    throw SchemaError("answer index out of range");
}

inline void to_json(nlohmann::json& j, const RougeItem& e) {
  j = nlohmann::json{{"prompt", e.prompt}, {"reference", e.reference}};
}

inline void from_json(const nlohmann::json& j, RougeItem& e) {
  e.prompt = detail::required_string(j, "prompt");
  e.reference = detail::required_string(j, "reference");
  detail::require_non_empty(e.prompt, "prompt");
}

}  // namespace lorafuse
