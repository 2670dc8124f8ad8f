// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lorafuse/error.hpp"

namespace lorafuse {

/// Character-level tokenizer: PAD, BOS, EOS, newline, then printable ASCII
/// (' ' .. '~') in code-point order.
struct CharTokenizer {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kNewline = 3;
  static constexpr int kFirstPrintable = 4;
  static constexpr int kVocabSize = kFirstPrintable + ('~' - ' ' + 1);

  /// Separates the user turn from the assistant turn.
  static constexpr int kSeparator = kNewline;

  static bool is_special(int token) { return token == kPad || token == kBos || token == kEos; }

  static int encode_char(char c) {
    if (c == '\n') return kNewline;
    if (c >= ' ' && c <= '~') return kFirstPrintable + (c - ' ');
    throw InputError("character code " + std::to_string(static_cast<unsigned char>(c)) +
                     " is outside the tokenizer alphabet");
  }

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(encode_char(c));
    return out;
  }

  static bool encodable(std::string_view text) {
    for (char c : text)
      if (c != '\n' && (c < ' ' || c > '~')) return false;
    return true;
  }

  /// Special tokens are dropped; ids outside the alphabet render as '?'.
  static std::string decode(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
      if (is_special(t)) continue;
      if (t == kNewline)
        out.push_back('\n');
      else if (t >= kFirstPrintable && t < kVocabSize)
        out.push_back(static_cast<char>(' ' + (t - kFirstPrintable)));
      else
        out.push_back('?');
    }
    return out;
  }
};

}  // namespace lorafuse
