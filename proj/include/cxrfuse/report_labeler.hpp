#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "cxrfuse/labels.hpp"

namespace cxrfuse {

/// A lowercased token and the index of the sentence it belongs to. Sentence
/// terminators ('.' and ';') are kept as tokens of the sentence they close.
struct Token {
  std::string text;
  std::size_t sentence = 0;
  friend bool operator==(const Token&, const Token&) = default;
};

/// Lowercases and splits into word and punctuation tokens. '.', ';' and
/// newlines end sentences. A '.' between digits stays inside the number.
std::vector<Token> normalize(std::string_view text);

/// Inverse of normalize up to whitespace: normalize(join_tokens(t)) == t.
std::string join_tokens(std::span<const Token> tokens);

enum class Polarity { present, uncertain, absent };

std::string_view to_string(Polarity p);

struct Mention {
  std::size_t pathology = 0;
  std::size_t start = 0;  // token span [start, end)
  std::size_t end = 0;
  Polarity polarity = Polarity::present;
  friend bool operator==(const Mention&, const Mention&) = default;
};

/// Trigger phrases per pathology plus negation / uncertainty cues.
///
/// JSON layout:
///   { "pathologies": { "<name>": ["phrase", ...], ... },
///     "negation": [...], "uncertainty": [...], "window": 6,
///     "scope_breaks": [...] }            // optional
/// Phrases are normalized with the same tokenizer as reports.
class MentionLexicon {
 public:
  static MentionLexicon from_json(const nlohmann::json& j);
  static MentionLexicon load(const std::filesystem::path& path);

  std::size_t window() const { return window_; }

  struct Phrase {
    std::vector<std::string> tokens;
    std::size_t pathology = 0;  // unused for cues
  };

  /// Longest trigger starting at tokens[pos] that ends at or before `limit`.
  const Phrase* longest_trigger(std::span<const Token> tokens, std::size_t pos,
                                std::size_t limit) const;
  /// True if any cue of the list starts at pos and ends at or before limit.
  bool negation_at(std::span<const Token> tokens, std::size_t pos, std::size_t limit) const;
  bool uncertainty_at(std::span<const Token> tokens, std::size_t pos, std::size_t limit) const;
  bool is_scope_break(const std::string& token) const;

 private:
  using Index = std::unordered_map<std::string, std::vector<Phrase>>;

  static void insert(Index& index, Phrase phrase);
  static const Phrase* longest(const Index& index, std::span<const Token> tokens, std::size_t pos,
                               std::size_t limit);

  Index triggers_;
  Index negation_;
  Index uncertainty_;
  std::vector<std::string> scope_breaks_;
  std::size_t window_ = 6;
};

/// Scans each sentence left to right for the longest trigger match. A mention is
/// Absent if a negation cue starts within `window` tokens before it in the same
/// sentence, else Uncertain if an uncertainty cue does, else Present. A scope-break
/// token between cue and trigger cancels the cue.
std::vector<Mention> find_mentions(std::span<const Token> tokens, const MentionLexicon& lex);

/// Per pathology: Present > Uncertain > Absent over its mentions, NotMentioned
/// if none. "no finding" is Positive only when a normal-study phrase was seen
/// (not negated) and no other pathology is Positive; Negative when such a
/// phrase was seen alongside a positive finding; NotMentioned otherwise.
LabelStates aggregate_mentions(std::span<const Mention> mentions);

LabelStates label_report(std::string_view text, const MentionLexicon& lex);

}  // namespace cxrfuse
