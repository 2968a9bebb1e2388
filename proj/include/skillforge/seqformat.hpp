#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "skillforge/common.hpp"
#include "skillforge/corpus.hpp"
#include "skillforge/text.hpp"

namespace skillforge {

// ---------------------------------------------------------------------------
// Special tokens and format kinds
// ---------------------------------------------------------------------------

struct SpecialTokens {
  std::string eos = "</s>";
  std::string qa_sep = "<as>";
  std::string pair_sep = "<sp>";
  std::map<Skill, std::string> skill_tokens;

  static SpecialTokens defaults() {
    SpecialTokens t;
    for (const Skill s : kAllSkills) t.skill_tokens[s] = skill_control_token(s);
    return t;
  }

  std::vector<std::string> all() const {
    std::vector<std::string> out = {eos, qa_sep, pair_sep};
    for (const Skill s : kAllSkills) {
      const auto it = skill_tokens.find(s);
      if (it != skill_tokens.end()) out.push_back(it->second);
    }
    return out;
  }

  // Token strings must be pairwise distinct and substring-free so scanning
  // for one token can never hit the inside of another.
  void validate() const {
    const auto tokens = all();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].empty()) throw ConfigError("special token must be non-empty");
      for (std::size_t j = 0; j < tokens.size(); ++j) {
        if (i == j) continue;
        if (tokens[i] == tokens[j])
          throw ConfigError("special tokens must be distinct: '" + tokens[i] + "'");
        if (contains(tokens[j], tokens[i]))
          throw ConfigError("special token '" + tokens[i] + "' is a substring of '" +
                            tokens[j] + "'");
      }
    }
  }
};

enum class FormatKind { HTA, WTA, OneStep };

inline std::string_view format_kind_name(FormatKind k) {
  switch (k) {
    case FormatKind::HTA: return "hta";
    case FormatKind::WTA: return "wta";
    case FormatKind::OneStep: return "one_step";
  }
  return "?";
}

inline FormatKind parse_format_kind(std::string_view name) {
  if (name == "hta") return FormatKind::HTA;
  if (name == "wta") return FormatKind::WTA;
  if (name == "one_step") return FormatKind::OneStep;
  throw ConfigError("unknown format kind: '" + std::string(name) + "'");
}

struct EncodedExample {
  std::string encoder_text;
  std::string decoder_text;
  FormatKind kind = FormatKind::HTA;
  std::string story_id;
  std::vector<std::string> pair_ids;
};

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

enum class ReservedTokenPolicy { Reject, Escape };

namespace detail {

// Escape replaces angle brackets of an embedded reserved token with the
// visually similar single guillemets, e.g. "<as>" -> "‹as›".
inline std::string escape_reserved(std::string text, const SpecialTokens& tokens) {
  for (const auto& tok : tokens.all()) {
    std::string safe = tok;
    safe = replace_all(safe, "<", "‹");
    safe = replace_all(safe, ">", "›");
    text = replace_all(text, tok, safe);
  }
  return text;
}

inline std::string check_text(std::string text, const SpecialTokens& tokens,
                              ReservedTokenPolicy policy, std::string_view what) {
  for (const auto& tok : tokens.all()) {
    if (contains(text, tok)) {
      if (policy == ReservedTokenPolicy::Reject) {
        throw DataError("RESERVED_TOKEN_IN_TEXT: " + std::string(what) + " contains '" +
                        tok + "'");
      }
      return escape_reserved(std::move(text), tokens);
    }
  }
  return text;
}

}  // namespace detail

inline std::string render_input(const std::string& story_text, FormatKind kind,
                                std::optional<Skill> skill,
                                const SpecialTokens& tokens = SpecialTokens::defaults(),
                                ReservedTokenPolicy policy = ReservedTokenPolicy::Reject) {
  if (kind == FormatKind::WTA && !skill)
    throw DataError("WTA input requires a skill");
  if (kind != FormatKind::WTA && skill)
    throw DataError("skill given for a format that forbids one");
  const std::string body =
      join_tokens(whitespace_tokens(detail::check_text(story_text, tokens, policy, "story")));
  if (body.empty()) throw DataError("story text is empty");
  std::string out;
  if (kind == FormatKind::WTA) {
    out += tokens.skill_tokens.at(*skill);
    out += ' ';
  }
  out += body;
  out += ' ';
  out += tokens.eos;
  return out;
}

inline std::string render_target(std::span<const std::pair<std::string, std::string>> pairs,
                                 FormatKind kind,
                                 const SpecialTokens& tokens = SpecialTokens::defaults(),
                                 ReservedTokenPolicy policy = ReservedTokenPolicy::Reject) {
  if (pairs.empty()) throw DataError("EMPTY_PAIRS: target requires at least one pair");
  if (kind == FormatKind::WTA && pairs.size() != 1)
    throw DataError("WTA target requires exactly one pair, got " +
                    std::to_string(pairs.size()));
  std::string out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string q =
        join_tokens(whitespace_tokens(detail::check_text(pairs[i].first, tokens, policy, "question")));
    const std::string a =
        join_tokens(whitespace_tokens(detail::check_text(pairs[i].second, tokens, policy, "answer")));
    if (q.empty()) throw DataError("pair " + std::to_string(i) + ": empty question");
    if (a.empty()) throw DataError("pair " + std::to_string(i) + ": empty answer");
    if (i) {
      out += ' ';
      out += tokens.pair_sep;
      out += ' ';
    }
    out += q;
    out += ' ';
    out += tokens.qa_sep;
    out += ' ';
    out += a;
  }
  out += ' ';
  out += tokens.eos;
  return out;
}

inline std::string render_target(const std::vector<QAPair>& pairs, FormatKind kind,
                                 const SpecialTokens& tokens = SpecialTokens::defaults(),
                                 ReservedTokenPolicy policy = ReservedTokenPolicy::Reject) {
  std::vector<std::pair<std::string, std::string>> qa;
  qa.reserve(pairs.size());
  for (const auto& p : pairs) qa.emplace_back(p.question, p.answer);
  return render_target(std::span<const std::pair<std::string, std::string>>(qa), kind, tokens,
                       policy);
}

// ---------------------------------------------------------------------------
// Parsing generated text
// ---------------------------------------------------------------------------

enum class ParseIssue { MissingEos, EmptyPair, MissingQaSep, TrailingSeparator, EmptyField };

inline std::string_view parse_issue_name(ParseIssue i) {
  switch (i) {
    case ParseIssue::MissingEos: return "MISSING_EOS";
    case ParseIssue::EmptyPair: return "EMPTY_PAIR";
    case ParseIssue::MissingQaSep: return "MISSING_QA_SEP";
    case ParseIssue::TrailingSeparator: return "TRAILING_SEPARATOR";
    case ParseIssue::EmptyField: return "EMPTY_FIELD";
  }
  return "?";
}

struct ParsedGeneration {
  std::vector<std::pair<std::string, std::string>> pairs;
  bool well_formed = false;
  std::vector<ParseIssue> diagnostics;
};

namespace detail {

inline void add_issue(ParsedGeneration& g, ParseIssue issue) {
  for (const ParseIssue i : g.diagnostics) {
    if (i == issue) return;
  }
  g.diagnostics.push_back(issue);
}

inline std::vector<std::string> split_on_token(std::string_view text, std::string_view token) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t hit = text.find(token, pos);
    if (hit == std::string_view::npos) {
      out.emplace_back(text.substr(pos));
      return out;
    }
    out.emplace_back(text.substr(pos, hit - pos));
    pos = hit + token.size();
  }
}

}  // namespace detail

// Best-effort inverse of render_target: never throws, reports problems as
// diagnostics, and recovers whatever pairs it can.
inline ParsedGeneration parse_generation(std::string_view text,
                                         const SpecialTokens& tokens = SpecialTokens::defaults()) {
  ParsedGeneration g;
  std::string body = trim(text);
  if (body.size() >= tokens.eos.size() &&
      body.compare(body.size() - tokens.eos.size(), tokens.eos.size(), tokens.eos) == 0) {
    body = trim(body.substr(0, body.size() - tokens.eos.size()));
  } else {
    detail::add_issue(g, ParseIssue::MissingEos);
  }

  auto chunks = detail::split_on_token(body, tokens.pair_sep);
  if (chunks.size() > 1 && trim(chunks.back()).empty()) {
    detail::add_issue(g, ParseIssue::TrailingSeparator);
    chunks.pop_back();
  }
  for (const auto& chunk : chunks) {
    const std::string c = trim(chunk);
    if (c.empty()) {
      detail::add_issue(g, ParseIssue::EmptyPair);
      continue;
    }
    const std::size_t sep = c.find(tokens.qa_sep);
    if (sep == std::string::npos) {
      detail::add_issue(g, ParseIssue::MissingQaSep);
      g.pairs.emplace_back(c, "");
      continue;
    }
    std::string q = trim(std::string_view(c).substr(0, sep));
    std::string a = trim(std::string_view(c).substr(sep + tokens.qa_sep.size()));
    if (q.empty() || a.empty()) detail::add_issue(g, ParseIssue::EmptyField);
    g.pairs.emplace_back(std::move(q), std::move(a));
  }
  g.well_formed = g.diagnostics.empty();
  return g;
}

// ---------------------------------------------------------------------------
// Training-set construction
// ---------------------------------------------------------------------------

using TokenCounter = std::function<std::size_t(const std::string&)>;

inline std::size_t whitespace_token_count(const std::string& s) {
  return whitespace_tokens(s).size();
}

struct BuildOptions {
  FormatKind kind = FormatKind::HTA;
  SpecialTokens tokens = SpecialTokens::defaults();
  std::size_t max_encoder_tokens = 512;
  std::size_t max_decoder_tokens = 128;
  // WTA_UNSKILLED: per-pair targets but no leading control token.
  bool include_skill_token = true;
  ReservedTokenPolicy reserved_policy = ReservedTokenPolicy::Reject;
  TokenCounter counter = whitespace_token_count;
};

struct BuildResult {
  std::vector<EncodedExample> examples;
  std::vector<std::string> warnings;
};

namespace detail {

// Longest story prefix whose rendered input fits the encoder budget. The
// counter is assumed monotone in the prefix length.
inline std::string truncate_input(const std::string& story_text, FormatKind kind,
                                  std::optional<Skill> skill, const BuildOptions& opts) {
  const FormatKind render_kind =
      (kind == FormatKind::WTA && !opts.include_skill_token) ? FormatKind::HTA : kind;
  const std::optional<Skill> render_skill =
      render_kind == FormatKind::WTA ? skill : std::nullopt;
  const auto render = [&](const std::string& text) {
    return render_input(text, render_kind, render_skill, opts.tokens, opts.reserved_policy);
  };
  std::string full = render(story_text);
  if (opts.counter(full) <= opts.max_encoder_tokens) return full;
  const auto units = whitespace_tokens(story_text);
  std::size_t lo = 1, hi = units.size();
  while (lo < hi) {
    const std::size_t mid = (lo + hi + 1) / 2;
    const std::string candidate =
        render(join_tokens({units.begin(), units.begin() + static_cast<std::ptrdiff_t>(mid)}));
    if (opts.counter(candidate) <= opts.max_encoder_tokens) lo = mid;
    else hi = mid - 1;
  }
  return render(join_tokens({units.begin(), units.begin() + static_cast<std::ptrdiff_t>(lo)}));
}

inline void build_for_story(const Story& story, const BuildOptions& opts, BuildResult& out) {
  if (story.pairs.empty()) return;
  if (opts.kind == FormatKind::WTA) {
    for (const auto& pair : story.pairs) {
      if (!pair.skill && opts.include_skill_token) {
        throw DataError("WTA rendering requires skill labels (story '" + story.id + "')");
      }
      const std::string decoder = render_target(std::vector<QAPair>{pair}, FormatKind::WTA,
                                                opts.tokens, opts.reserved_policy);
      if (opts.counter(decoder) > opts.max_decoder_tokens) {
        out.warnings.push_back("dropped pair '" + pair.id + "': target exceeds decoder budget");
        continue;
      }
      EncodedExample ex;
      ex.encoder_text = truncate_input(story.text, FormatKind::WTA, pair.skill, opts);
      ex.decoder_text = decoder;
      ex.kind = FormatKind::WTA;
      ex.story_id = story.id;
      ex.pair_ids = {pair.id};
      out.examples.push_back(std::move(ex));
    }
    return;
  }
  // HTA / OneStep: all of the passage's pairs in one target, corpus order.
  // Targets over budget shed whole trailing pairs, never partial pairs.
  std::vector<QAPair> kept = story.pairs;
  std::string decoder;
  while (!kept.empty()) {
    decoder = render_target(kept, opts.kind, opts.tokens, opts.reserved_policy);
    if (opts.counter(decoder) <= opts.max_decoder_tokens) break;
    kept.pop_back();
  }
  if (kept.empty()) {
    out.warnings.push_back("dropped story '" + story.id +
                           "': no pair fits the decoder budget");
    return;
  }
  if (kept.size() < story.pairs.size()) {
    out.warnings.push_back("story '" + story.id + "': kept " + std::to_string(kept.size()) +
                           " of " + std::to_string(story.pairs.size()) +
                           " pairs within decoder budget");
  }
  EncodedExample ex;
  ex.encoder_text = truncate_input(story.text, opts.kind, std::nullopt, opts);
  ex.decoder_text = std::move(decoder);
  ex.kind = opts.kind;
  ex.story_id = story.id;
  for (const auto& p : kept) ex.pair_ids.push_back(p.id);
  out.examples.push_back(std::move(ex));
}

}  // namespace detail

inline BuildResult build_training_set(const SkillDataset& dataset, const BuildOptions& opts) {
  opts.tokens.validate();
  BuildResult out;
  for (const auto& story : dataset.stories) detail::build_for_story(story, opts, out);
  return out;
}

inline BuildResult build_training_set(const ExternalQACorpus& corpus, const BuildOptions& opts) {
  opts.tokens.validate();
  if (opts.kind == FormatKind::WTA && opts.include_skill_token) {
    throw DataError("WTA rendering requires skill labels; external corpora carry none");
  }
  BuildResult out;
  for (const auto& passage : corpus.passages) detail::build_for_story(passage, opts, out);
  return out;
}

// ---------------------------------------------------------------------------
// Encoded-set JSONL dump
// ---------------------------------------------------------------------------

inline std::string encoded_to_jsonl(std::span<const EncodedExample> examples) {
  std::string out;
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["encoder"] = ex.encoder_text;
    j["decoder"] = ex.decoder_text;
    j["kind"] = std::string(format_kind_name(ex.kind));
    j["story_id"] = ex.story_id;
    j["pair_ids"] = ex.pair_ids;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void save_encoded_jsonl(std::span<const EncodedExample> examples,
                               const std::filesystem::path& path) {
  write_file(path, encoded_to_jsonl(examples));
}

inline std::vector<EncodedExample> load_encoded_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open encoded set: " + path.string());
  std::vector<EncodedExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EncodedExample ex;
      ex.encoder_text = j.at("encoder").get<std::string>();
      ex.decoder_text = j.at("decoder").get<std::string>();
      ex.kind = parse_format_kind(j.at("kind").get<std::string>());
      ex.story_id = j.at("story_id").get<std::string>();
      for (const auto& p : j.at("pair_ids")) ex.pair_ids.push_back(p.get<std::string>());
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": malformed encoded record: " + e.what());
    }
  }
  return out;
}

}  // namespace skillforge
