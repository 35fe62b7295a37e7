#include "cxrfuse/report_labeler.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "cxrfuse/errors.hpp"

namespace cxrfuse {

namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

bool is_digit(char c) { return c >= '0' && c <= '9'; }

}  // namespace

std::vector<Token> normalize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t sentence = 0;
  bool sentence_open = false;
  auto emit = [&](std::string tok) {
    tokens.push_back({std::move(tok), sentence});
    sentence_open = true;
  };
  auto close_sentence = [&] {
    if (sentence_open) ++sentence;
    sentence_open = false;
  };

  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (c == '\n') {
      close_sentence();
      ++i;
    } else if (std::isspace(c)) {
      ++i;
    } else if (is_word_byte(c)) {
      std::string word;
      while (i < text.size()) {
        const unsigned char w = static_cast<unsigned char>(text[i]);
        if (is_word_byte(w)) {
          word += static_cast<char>(std::tolower(w));
          ++i;
        } else if (w == '.' && !word.empty() && is_digit(word.back()) && i + 1 < text.size() &&
                   is_digit(text[i + 1])) {
          word += '.';
          ++i;
        } else {
          break;
        }
      }
      emit(std::move(word));
    } else {
      emit(std::string(1, static_cast<char>(c)));
      ++i;
      if (c == '.' || c == ';') close_sentence();
    }
  }
  return tokens;
}

std::string join_tokens(std::span<const Token> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) {
      const bool new_sentence = tokens[i].sentence != tokens[i - 1].sentence;
      const bool terminated = tokens[i - 1].text == "." || tokens[i - 1].text == ";";
      out += (new_sentence && !terminated) ? "\n" : " ";
    }
    out += tokens[i].text;
  }
  return out;
}

std::string_view to_string(Polarity p) {
  switch (p) {
    case Polarity::present: return "present";
    case Polarity::uncertain: return "uncertain";
    case Polarity::absent: return "absent";
  }
  return "?";
}

// ---------------------------------------------------------------------------

void MentionLexicon::insert(Index& index, Phrase phrase) {
  auto& bucket = index[phrase.tokens.front()];
  bucket.push_back(std::move(phrase));
  std::stable_sort(bucket.begin(), bucket.end(), [](const Phrase& a, const Phrase& b) {
    return a.tokens.size() > b.tokens.size();
  });
}

MentionLexicon MentionLexicon::from_json(const nlohmann::json& j) {
  MentionLexicon lex;
  auto tokenize_phrase = [](const std::string& phrase) {
    std::vector<std::string> toks;
    for (auto& t : normalize(phrase)) toks.push_back(std::move(t.text));
    if (toks.empty()) throw ConfigError("lexicon contains an empty phrase");
    return toks;
  };
  try {
    std::unordered_map<std::string, std::size_t> owner;
    for (const auto& [name, phrases] : j.at("pathologies").items()) {
      const auto idx = pathology_index(name);
      if (!idx) throw ConfigError("lexicon names unknown pathology '" + name + "'");
      for (const auto& p : phrases) {
        Phrase phrase{tokenize_phrase(p.get<std::string>()), *idx};
        std::string key;
        for (const auto& t : phrase.tokens) key += t + " ";
        auto [it, inserted] = owner.emplace(key, *idx);
        if (!inserted) {
          if (it->second != *idx) {
            throw ConfigError("lexicon phrase '" + p.get<std::string>() + "' maps to both '" +
                              std::string(kPathologies[it->second]) + "' and '" + name + "'");
          }
          continue;
        }
        insert(lex.triggers_, std::move(phrase));
      }
    }
    for (const auto& p : j.at("negation")) insert(lex.negation_, {tokenize_phrase(p.get<std::string>()), 0});
    for (const auto& p : j.at("uncertainty")) insert(lex.uncertainty_, {tokenize_phrase(p.get<std::string>()), 0});
    if (j.contains("scope_breaks")) {
      for (const auto& p : j.at("scope_breaks")) lex.scope_breaks_.push_back(p.get<std::string>());
    }
    lex.window_ = j.value("window", std::size_t{6});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed lexicon: ") + e.what());
  }
  return lex;
}

MentionLexicon MentionLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open lexicon " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse lexicon " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

const MentionLexicon::Phrase* MentionLexicon::longest(const Index& index,
                                                      std::span<const Token> tokens,
                                                      std::size_t pos, std::size_t limit) {
  auto it = index.find(tokens[pos].text);
  if (it == index.end()) return nullptr;
  for (const Phrase& p : it->second) {
    if (pos + p.tokens.size() > limit) continue;
    bool match = true;
    for (std::size_t k = 1; k < p.tokens.size() && match; ++k) {
      match = tokens[pos + k].text == p.tokens[k];
    }
    if (match) return &p;
  }
  return nullptr;
}

const MentionLexicon::Phrase* MentionLexicon::longest_trigger(std::span<const Token> tokens,
                                                              std::size_t pos,
                                                              std::size_t limit) const {
  return longest(triggers_, tokens, pos, limit);
}

bool MentionLexicon::negation_at(std::span<const Token> tokens, std::size_t pos,
                                 std::size_t limit) const {
  return longest(negation_, tokens, pos, limit) != nullptr;
}

bool MentionLexicon::uncertainty_at(std::span<const Token> tokens, std::size_t pos,
                                    std::size_t limit) const {
  return longest(uncertainty_, tokens, pos, limit) != nullptr;
}

bool MentionLexicon::is_scope_break(const std::string& token) const {
  return std::find(scope_breaks_.begin(), scope_breaks_.end(), token) != scope_breaks_.end();
}

std::vector<Mention> find_mentions(std::span<const Token> tokens, const MentionLexicon& lex) {
  std::vector<Mention> mentions;
  std::size_t s = 0;
  while (s < tokens.size()) {
    std::size_t e = s;
    while (e < tokens.size() && tokens[e].sentence == tokens[s].sentence) ++e;

    std::size_t i = s;
    while (i < e) {
      const auto* trig = lex.longest_trigger(tokens, i, e);
      if (!trig) {
        ++i;
        continue;
      }
      Mention m{trig->pathology, i, i + trig->tokens.size(), Polarity::present};
      bool negated = false, uncertain = false;
      // Walk back from the trigger; a scope break ends the cue search.
      const std::size_t first = i >= s + lex.window() ? i - lex.window() : s;
      for (std::size_t j = i; j-- > first;) {
        if (lex.is_scope_break(tokens[j].text)) break;
        negated = negated || lex.negation_at(tokens, j, i);
        uncertain = uncertain || lex.uncertainty_at(tokens, j, i);
      }
      if (negated) m.polarity = Polarity::absent;
      else if (uncertain) m.polarity = Polarity::uncertain;
      mentions.push_back(m);
      i = m.end;
    }
    s = e;
  }
  return mentions;
}

LabelStates aggregate_mentions(std::span<const Mention> mentions) {
  auto rank = [](LabelState s) {
    switch (s) {
      case LabelState::positive: return 3;
      case LabelState::uncertain: return 2;
      case LabelState::negative: return 1;
      case LabelState::not_mentioned: return 0;
    }
    return 0;
  };
  auto state_of = [](Polarity p) {
    switch (p) {
      case Polarity::present: return LabelState::positive;
      case Polarity::uncertain: return LabelState::uncertain;
      case Polarity::absent: return LabelState::negative;
    }
    return LabelState::not_mentioned;
  };

  LabelStates states;
  states.fill(LabelState::not_mentioned);
  bool normal_study = false;
  for (const Mention& m : mentions) {
    if (m.pathology == kNoFinding) {
      normal_study = normal_study || m.polarity != Polarity::absent;
      continue;
    }
    const LabelState s = state_of(m.polarity);
    if (rank(s) > rank(states[m.pathology])) states[m.pathology] = s;
  }
  if (normal_study) {
    const bool any_positive =
        std::any_of(states.begin(), states.end(), [](LabelState s) { return s == LabelState::positive; });
    states[kNoFinding] = any_positive ? LabelState::negative : LabelState::positive;
  }
  return states;
}

LabelStates label_report(std::string_view text, const MentionLexicon& lex) {
  const auto tokens = normalize(text);
  const auto mentions = find_mentions(tokens, lex);
  return aggregate_mentions(mentions);
}

}  // namespace cxrfuse
