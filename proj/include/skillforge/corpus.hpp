#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "skillforge/common.hpp"
#include "skillforge/text.hpp"

namespace skillforge {

// ---------------------------------------------------------------------------
// Skill taxonomy
// ---------------------------------------------------------------------------

// The nine story-based reading comprehension skills. Each carries a stable
// code (used in data files), a display name, and a control token used as the
// leading encoder token in WTA-format inputs.
enum class Skill { BSE, CT, CR, FL, I, P, S, V, VO };

inline constexpr std::array<Skill, 9> kAllSkills = {
    Skill::BSE, Skill::CT, Skill::CR, Skill::FL, Skill::I,
    Skill::P,   Skill::S,  Skill::V,  Skill::VO};

inline constexpr std::size_t kSkillCount = kAllSkills.size();

inline std::string_view skill_code(Skill s) {
  switch (s) {
    case Skill::BSE: return "BSE";
    case Skill::CT: return "CT";
    case Skill::CR: return "CR";
    case Skill::FL: return "FL";
    case Skill::I: return "I";
    case Skill::P: return "P";
    case Skill::S: return "S";
    case Skill::V: return "V";
    case Skill::VO: return "VO";
  }
  return "?";
}

inline std::string_view skill_display_name(Skill s) {
  switch (s) {
    case Skill::BSE: return "Basic Story Elements";
    case Skill::CT: return "Character Traits";
    case Skill::CR: return "Close Reading";
    case Skill::FL: return "Figurative Language";
    case Skill::I: return "Inferring";
    case Skill::P: return "Predicting";
    case Skill::S: return "Summarizing";
    case Skill::V: return "Visualizing";
    case Skill::VO: return "Vocabulary";
  }
  return "?";
}

inline std::string skill_control_token(Skill s) {
  return "<" + std::string(skill_code(s)) + ">";
}

inline std::optional<Skill> try_parse_skill(std::string_view code) {
  for (const Skill s : kAllSkills) {
    if (skill_code(s) == code) return s;
  }
  return std::nullopt;
}

inline Skill parse_skill(std::string_view code) {
  if (const auto s = try_parse_skill(code)) return *s;
  throw DataError("unknown skill code: '" + std::string(code) + "'");
}

inline std::size_t skill_index(Skill s) { return static_cast<std::size_t>(s); }

enum class QuestionType { Literal, Inferential };

inline std::string_view question_type_name(QuestionType t) {
  return t == QuestionType::Literal ? "literal" : "inferential";
}

inline QuestionType parse_question_type(std::string_view name) {
  if (name == "literal") return QuestionType::Literal;
  if (name == "inferential") return QuestionType::Inferential;
  throw DataError("unknown question type: '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Corpus records
// ---------------------------------------------------------------------------

struct QAPair {
  std::string id;
  std::string question;
  std::string answer;
  std::optional<Skill> skill;        // unset for external corpora
  std::optional<QuestionType> qtype; // unset for external corpora

  friend bool operator==(const QAPair&, const QAPair&) = default;
};

struct Story {
  std::string id;
  std::string text;
  std::optional<std::string> genre;
  std::vector<QAPair> pairs; // source-file order; defines decoder-target order

  friend bool operator==(const Story&, const Story&) = default;

  std::set<Skill> skills() const {
    std::set<Skill> out;
    for (const auto& p : pairs) {
      if (p.skill) out.insert(*p.skill);
    }
    return out;
  }
};

struct SkillDataset {
  std::vector<Story> stories;
  std::string provenance; // source path or synthetic tag

  friend bool operator==(const SkillDataset& a, const SkillDataset& b) {
    return a.stories == b.stories;
  }

  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& s : stories) n += s.pairs.size();
    return n;
  }
};

enum class ExternalFormat { Extractive, Commonsense };

inline std::string_view external_format_name(ExternalFormat f) {
  return f == ExternalFormat::Extractive ? "extractive" : "commonsense";
}

inline ExternalFormat parse_external_format(std::string_view name) {
  if (name == "extractive") return ExternalFormat::Extractive;
  if (name == "commonsense") return ExternalFormat::Commonsense;
  throw DataError("unknown external corpus format: '" + std::string(name) + "'");
}

// Passages with answerable question-answer pairs; skill and qtype are unset.
struct ExternalQACorpus {
  std::vector<Story> passages;
  ExternalFormat format = ExternalFormat::Extractive;
  std::string provenance;
  std::size_t dropped_unanswerable = 0;

  std::size_t pair_count() const {
    std::size_t n = 0;
    for (const auto& s : passages) n += s.pairs.size();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Skill-dataset JSONL
// ---------------------------------------------------------------------------
// One story per line:
// {"id": str, "text": str, "genre": str?, "pairs": [{"id": str,
//  "question": str, "answer": str, "skill": CODE, "qtype": "literal|inferential"}]}

namespace detail {

inline QAPair parse_skill_pair(const nlohmann::json& j) {
  QAPair p;
  p.id = j.at("id").get<std::string>();
  p.question = j.at("question").get<std::string>();
  p.answer = j.at("answer").get<std::string>();
  p.skill = parse_skill(j.at("skill").get<std::string>());
  p.qtype = parse_question_type(j.at("qtype").get<std::string>());
  if (trim(p.question).empty()) throw DataError("pair '" + p.id + "': empty question");
  if (trim(p.answer).empty()) throw DataError("pair '" + p.id + "': empty answer");
  return p;
}

inline Story parse_skill_story(const nlohmann::json& j) {
  Story s;
  s.id = j.at("id").get<std::string>();
  s.text = j.at("text").get<std::string>();
  if (j.contains("genre") && !j.at("genre").is_null()) {
    s.genre = j.at("genre").get<std::string>();
  }
  if (whitespace_tokens(s.text).empty()) {
    throw DataError("story '" + s.id + "': empty text");
  }
  for (const auto& pj : j.at("pairs")) s.pairs.push_back(parse_skill_pair(pj));
  return s;
}

}  // namespace detail

inline SkillDataset load_skill_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open skill dataset: " + path.string());
  SkillDataset ds;
  ds.provenance = path.string();
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    Story story;
    try {
      story = detail::parse_skill_story(nlohmann::json::parse(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": malformed record: " + e.what());
    }
    if (!ids.insert(story.id).second) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": duplicate story id '" + story.id + "'");
    }
    ds.stories.push_back(std::move(story));
  }
  return ds;
}

inline nlohmann::ordered_json story_to_json(const Story& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["text"] = s.text;
  if (s.genre) j["genre"] = *s.genre;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& p : s.pairs) {
    nlohmann::ordered_json pj;
    pj["id"] = p.id;
    pj["question"] = p.question;
    pj["answer"] = p.answer;
    if (p.skill) pj["skill"] = std::string(skill_code(*p.skill));
    if (p.qtype) pj["qtype"] = std::string(question_type_name(*p.qtype));
    pairs.push_back(std::move(pj));
  }
  j["pairs"] = std::move(pairs);
  return j;
}

inline std::string skill_dataset_to_jsonl(const SkillDataset& ds) {
  std::string out;
  for (const auto& s : ds.stories) {
    out += story_to_json(s).dump();
    out += '\n';
  }
  return out;
}

inline void save_skill_dataset(const SkillDataset& ds, const std::filesystem::path& path) {
  write_file(path, skill_dataset_to_jsonl(ds));
}

// ---------------------------------------------------------------------------
// External corpora
// ---------------------------------------------------------------------------

namespace detail {

// Extractive format: one JSON document, {"data": [{"paragraphs": [{"context",
// "qas": [{"id", "question", "is_impossible"?, "answers": [{"text",
// "answer_start"}]}]}]}]}. v2 unanswerable flag honored; span offsets are
// validated against the context and then discarded.
inline ExternalQACorpus load_extractive(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": invalid extractive corpus: " + e.what());
  }
  ExternalQACorpus corpus;
  corpus.format = ExternalFormat::Extractive;
  corpus.provenance = path.string();
  if (!doc.contains("data") || !doc["data"].is_array()) {
    throw DataError(path.string() + ": extractive corpus missing 'data' array");
  }
  std::size_t di = 0;
  for (const auto& article : doc["data"]) {
    std::size_t pi = 0;
    for (const auto& para : article.at("paragraphs")) {
      Story passage;
      passage.id = "d" + std::to_string(di) + ".p" + std::to_string(pi);
      passage.text = para.at("context").get<std::string>();
      for (const auto& qa : para.at("qas")) {
        const bool impossible = qa.value("is_impossible", false);
        const auto& answers = qa.at("answers");
        if (impossible || answers.empty()) {
          ++corpus.dropped_unanswerable;
          continue;
        }
        QAPair p;
        p.id = qa.contains("id") ? qa.at("id").get<std::string>()
                                 : passage.id + ".q" + std::to_string(passage.pairs.size());
        p.question = qa.at("question").get<std::string>();
        const auto& best = answers.at(0);
        p.answer = best.at("text").get<std::string>();
        if (best.contains("answer_start")) {
          const auto start = best.at("answer_start").get<long long>();
          if (start < 0 ||
              static_cast<std::size_t>(start) + p.answer.size() > passage.text.size() ||
              passage.text.compare(static_cast<std::size_t>(start), p.answer.size(),
                                   p.answer) != 0) {
            throw DataError(path.string() + ": question '" + p.id +
                            "': answer span does not match context");
          }
        }
        if (trim(p.question).empty() || trim(p.answer).empty()) {
          ++corpus.dropped_unanswerable;
          continue;
        }
        passage.pairs.push_back(std::move(p));
      }
      if (!passage.pairs.empty()) corpus.passages.push_back(std::move(passage));
      ++pi;
    }
    ++di;
  }
  return corpus;
}

// Commonsense format: JSON Lines {"id"?, "context", "question", "answer"}.
// A missing or empty answer marks the question unanswerable.
inline ExternalQACorpus load_commonsense(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open commonsense corpus: " + path.string());
  ExternalQACorpus corpus;
  corpus.format = ExternalFormat::Commonsense;
  corpus.provenance = path.string();
  std::map<std::string, std::size_t> passage_index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const std::string context = j.at("context").get<std::string>();
      const std::string question = j.at("question").get<std::string>();
      std::string answer;
      if (j.contains("answer") && !j.at("answer").is_null()) {
        answer = j.at("answer").get<std::string>();
      }
      if (trim(answer).empty()) {
        ++corpus.dropped_unanswerable;
        continue;
      }
      const std::string key = context;
      auto it = passage_index.find(key);
      if (it == passage_index.end()) {
        Story passage;
        passage.id = "c" + std::to_string(corpus.passages.size());
        passage.text = context;
        it = passage_index.emplace(key, corpus.passages.size()).first;
        corpus.passages.push_back(std::move(passage));
      }
      QAPair p;
      p.id = j.contains("id") ? j.at("id").get<std::string>()
                              : "l" + std::to_string(lineno);
      p.question = question;
      p.answer = answer;
      corpus.passages[it->second].pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": malformed record: " + e.what());
    }
  }
  return corpus;
}

}  // namespace detail

inline ExternalQACorpus load_external_corpus(const std::filesystem::path& path,
                                             ExternalFormat format) {
  return format == ExternalFormat::Extractive ? detail::load_extractive(path)
                                              : detail::load_commonsense(path);
}

// ---------------------------------------------------------------------------
// Stratified splitting
// ---------------------------------------------------------------------------

struct SplitSpec {
  double val_fraction = 0.10;
  double test_fraction = 0.20;
  std::uint64_t seed = 13;

  void validate() const {
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
      throw ConfigError("val_fraction must be in (0,1)");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
      throw ConfigError("test_fraction must be in (0,1)");
    if (val_fraction + test_fraction >= 1.0)
      throw ConfigError("val_fraction + test_fraction must be < 1");
  }
};

struct SplitResult {
  SkillDataset train;
  SkillDataset val;
  SkillDataset test;
  std::vector<std::string> warnings;
};

namespace detail {

enum class SplitLabel : int { Train = 0, Val = 1, Test = 2 };

struct SplitState {
  // membership[s] = story indices containing skill s
  std::array<std::vector<std::size_t>, kSkillCount> membership;
  std::vector<int> label; // per story, -1 unassigned
};

inline double split_target(SplitLabel l, const SplitSpec& spec, std::size_t n) {
  const double f = l == SplitLabel::Val ? spec.val_fraction
                                        : (l == SplitLabel::Test ? spec.test_fraction : 0.0);
  return f * static_cast<double>(n);
}

}  // namespace detail

// Splits by story. A story belongs to the stratum of each skill it contains;
// stories are assigned greedily from the rarest skill to the most common, and
// a deterministic local-repair pass then relabels stories until every skill's
// val/test counts sit within one story of the requested fractions. Skills
// carried by fewer than two stories are routed to train with a warning.
inline SplitResult stratified_split(const SkillDataset& dataset, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n = dataset.stories.size();
  detail::SplitState st;
  st.label.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    for (const Skill s : dataset.stories[i].skills()) {
      st.membership[skill_index(s)].push_back(i);
    }
  }

  SplitResult result;
  rng::Engine eng(spec.seed);

  // Rarest skill first; ties resolved by enum order.
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < kSkillCount; ++k) {
    if (!st.membership[k].empty()) order.push_back(k);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (st.membership[a].size() != st.membership[b].size())
      return st.membership[a].size() < st.membership[b].size();
    return a < b;
  });

  std::vector<bool> small_skill(kSkillCount, false);
  for (const std::size_t k : order) {
    const auto& members = st.membership[k];
    std::vector<std::size_t> unassigned;
    for (const std::size_t i : members) {
      if (st.label[i] < 0) unassigned.push_back(i);
    }
    if (members.size() < 2) {
      small_skill[k] = true;
      for (const std::size_t i : unassigned) st.label[i] = 0;
      result.warnings.push_back("skill " + std::string(skill_code(kAllSkills[k])) +
                                " has fewer than 2 stories; routed to train");
      continue;
    }
    std::size_t have_val = 0;
    std::size_t have_test = 0;
    for (const std::size_t i : members) {
      if (st.label[i] == 1) ++have_val;
      if (st.label[i] == 2) ++have_test;
    }
    const auto want = [&](double frac) {
      return static_cast<std::size_t>(std::llround(frac * static_cast<double>(members.size())));
    };
    const std::size_t need_val =
        want(spec.val_fraction) > have_val ? want(spec.val_fraction) - have_val : 0;
    const std::size_t need_test =
        want(spec.test_fraction) > have_test ? want(spec.test_fraction) - have_test : 0;
    rng::shuffle(unassigned, eng);
    std::size_t idx = 0;
    for (std::size_t c = 0; c < need_val && idx < unassigned.size(); ++c, ++idx)
      st.label[unassigned[idx]] = 1;
    for (std::size_t c = 0; c < need_test && idx < unassigned.size(); ++c, ++idx)
      st.label[unassigned[idx]] = 2;
    for (; idx < unassigned.size(); ++idx) st.label[unassigned[idx]] = 0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (st.label[i] < 0) st.label[i] = 0; // stories with no labeled pairs
  }

  // Local repair: move single stories between splits while some skill's val
  // or test count is off by more than one story from its fractional target.
  std::array<std::array<double, 3>, kSkillCount> cnt{};
  std::vector<std::vector<std::size_t>> skills_of(n);
  for (std::size_t k = 0; k < kSkillCount; ++k) {
    for (const std::size_t i : st.membership[k]) skills_of[i].push_back(k);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (const std::size_t k : skills_of[i]) cnt[k][static_cast<std::size_t>(st.label[i])] += 1.0;
  }
  const auto skill_scores = [&](std::size_t k) {
    const double m = static_cast<double>(st.membership[k].size());
    const double dv = cnt[k][1] - spec.val_fraction * m;
    const double dt = cnt[k][2] - spec.test_fraction * m;
    const double ev = std::abs(dv) > 1.0 ? (std::abs(dv) - 1.0) * (std::abs(dv) - 1.0) : 0.0;
    const double et = std::abs(dt) > 1.0 ? (std::abs(dt) - 1.0) * (std::abs(dt) - 1.0) : 0.0;
    return std::pair<double, double>{ev + et, dv * dv + dt * dt};
  };
  double violation = 0.0;
  double potential = 0.0;
  for (const std::size_t k : order) {
    if (small_skill[k]) continue;
    const auto [v, p] = skill_scores(k);
    violation += v;
    potential += p;
  }
  const auto move_delta = [&](std::size_t i, int to) {
    // score change restricted to the skills this story touches
    double dv = 0.0, dp = 0.0;
    const int from = st.label[i];
    for (const std::size_t k : skills_of[i]) {
      if (small_skill[k]) continue;
      const auto [v0, p0] = skill_scores(k);
      cnt[k][static_cast<std::size_t>(from)] -= 1.0;
      cnt[k][static_cast<std::size_t>(to)] += 1.0;
      const auto [v1, p1] = skill_scores(k);
      cnt[k][static_cast<std::size_t>(from)] += 1.0;
      cnt[k][static_cast<std::size_t>(to)] -= 1.0;
      dv += v1 - v0;
      dp += p1 - p0;
    }
    return std::pair<double, double>{dv, dp};
  };
  constexpr double kEps = 1e-12;
  for (std::size_t iter = 0; iter < 8 * n + 80 && violation > 0.0; ++iter) {
    double best_dv = 0.0;
    double best_dp = 0.0;
    std::size_t best_story = n;
    int best_label = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (skills_of[i].empty()) continue;
      for (int l = 0; l < 3; ++l) {
        if (l == st.label[i]) continue;
        const auto [dv, dp] = move_delta(i, l);
        const bool better = best_story == n
                                ? (dv < -kEps || (std::abs(dv) <= kEps && dp < -kEps))
                                : (dv < best_dv - kEps ||
                                   (std::abs(dv - best_dv) <= kEps && dp < best_dp - kEps));
        if (better) {
          best_dv = dv;
          best_dp = dp;
          best_story = i;
          best_label = l;
        }
      }
    }
    if (best_story == n) break; // no strictly improving move
    for (const std::size_t k : skills_of[best_story]) {
      cnt[k][static_cast<std::size_t>(st.label[best_story])] -= 1.0;
      cnt[k][static_cast<std::size_t>(best_label)] += 1.0;
    }
    st.label[best_story] = best_label;
    violation += best_dv;
    potential += best_dp;
  }

  result.train.provenance = dataset.provenance;
  result.val.provenance = dataset.provenance;
  result.test.provenance = dataset.provenance;
  for (std::size_t i = 0; i < n; ++i) {
    auto& target = st.label[i] == 1 ? result.val : (st.label[i] == 2 ? result.test : result.train);
    target.stories.push_back(dataset.stories[i]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct SkillStats {
  std::size_t story_count = 0;
  std::size_t pair_count = 0;
  double avg_story_tokens = 0.0;
  std::size_t max_story_tokens = 0;
  double avg_question_tokens = 0.0;
  std::size_t max_question_tokens = 0;
  double avg_answer_tokens = 0.0;
  std::size_t max_answer_tokens = 0;
  std::size_t literal_count = 0;
  std::size_t inferential_count = 0;
};

struct CorpusStats {
  std::map<Skill, SkillStats> per_skill;
  SkillStats total;
};

inline CorpusStats compute_stats(const SkillDataset& dataset) {
  CorpusStats stats;
  struct Acc {
    std::size_t stories = 0, pairs = 0;
    std::size_t story_tok_sum = 0, q_tok_sum = 0, a_tok_sum = 0;
    std::size_t story_tok_max = 0, q_tok_max = 0, a_tok_max = 0;
    std::size_t lit = 0, inf = 0;
  };
  std::map<Skill, Acc> per;
  Acc total;
  for (const auto& story : dataset.stories) {
    const std::size_t story_tokens = stat_token_count(story.text);
    total.stories += 1;
    total.story_tok_sum += story_tokens;
    total.story_tok_max = std::max(total.story_tok_max, story_tokens);
    for (const Skill s : story.skills()) {
      auto& a = per[s];
      a.stories += 1;
      a.story_tok_sum += story_tokens;
      a.story_tok_max = std::max(a.story_tok_max, story_tokens);
    }
    for (const auto& pair : story.pairs) {
      const std::size_t q = stat_token_count(pair.question);
      const std::size_t ans = stat_token_count(pair.answer);
      const bool lit = pair.qtype && *pair.qtype == QuestionType::Literal;
      const bool inf = pair.qtype && *pair.qtype == QuestionType::Inferential;
      total.pairs += 1;
      total.q_tok_sum += q;
      total.a_tok_sum += ans;
      total.q_tok_max = std::max(total.q_tok_max, q);
      total.a_tok_max = std::max(total.a_tok_max, ans);
      total.lit += lit ? 1 : 0;
      total.inf += inf ? 1 : 0;
      if (pair.skill) {
        auto& a = per[*pair.skill];
        a.pairs += 1;
        a.q_tok_sum += q;
        a.a_tok_sum += ans;
        a.q_tok_max = std::max(a.q_tok_max, q);
        a.a_tok_max = std::max(a.a_tok_max, ans);
        a.lit += lit ? 1 : 0;
        a.inf += inf ? 1 : 0;
      }
    }
  }
  const auto to_stats = [](const Acc& a) {
    SkillStats s;
    s.story_count = a.stories;
    s.pair_count = a.pairs;
    s.avg_story_tokens = a.stories ? static_cast<double>(a.story_tok_sum) / a.stories : 0.0;
    s.max_story_tokens = a.story_tok_max;
    s.avg_question_tokens = a.pairs ? static_cast<double>(a.q_tok_sum) / a.pairs : 0.0;
    s.max_question_tokens = a.q_tok_max;
    s.avg_answer_tokens = a.pairs ? static_cast<double>(a.a_tok_sum) / a.pairs : 0.0;
    s.max_answer_tokens = a.a_tok_max;
    s.literal_count = a.lit;
    s.inferential_count = a.inf;
    return s;
  };
  for (const auto& [skill, acc] : per) stats.per_skill[skill] = to_stats(acc);
  stats.total = to_stats(total);
  return stats;
}

inline std::string stats_to_csv(const CorpusStats& stats) {
  std::string out = csv::row({"skill", "stories", "pairs", "avg_story_tokens",
                              "max_story_tokens", "avg_question_tokens",
                              "max_question_tokens", "avg_answer_tokens",
                              "max_answer_tokens", "literal", "inferential"});
  const auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };
  const auto emit = [&](std::string_view name, const SkillStats& s) {
    out += csv::row({std::string(name), std::to_string(s.story_count),
                     std::to_string(s.pair_count), fmt(s.avg_story_tokens),
                     std::to_string(s.max_story_tokens), fmt(s.avg_question_tokens),
                     std::to_string(s.max_question_tokens), fmt(s.avg_answer_tokens),
                     std::to_string(s.max_answer_tokens), std::to_string(s.literal_count),
                     std::to_string(s.inferential_count)});
  };
  for (const Skill s : kAllSkills) {
    const auto it = stats.per_skill.find(s);
    emit(skill_code(s), it == stats.per_skill.end() ? SkillStats{} : it->second);
  }
  emit("TOTAL", stats.total);
  return out;
}

// ---------------------------------------------------------------------------
// Few-shot subsampling
// ---------------------------------------------------------------------------

struct FewShotAmount {
  enum class Kind { PerSkillCount, Ratio };
  Kind kind = Kind::Ratio;
  double value = 1.0;

  static FewShotAmount per_skill(std::size_t k) {
    return {Kind::PerSkillCount, static_cast<double>(k)};
  }
  static FewShotAmount ratio(double r) { return {Kind::Ratio, r}; }

  std::string label() const {
    if (kind == Kind::PerSkillCount) {
      return std::to_string(static_cast<std::size_t>(value)) + "-per-skill";
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", value);
    return buf;
  }
};

// Stratified-by-skill pair subsample. Selected pairs keep their parent
// stories (stories shed unselected pairs; empty stories are dropped).
inline SkillDataset subsample_few_shot(const SkillDataset& train, const FewShotAmount& amount,
                                       std::uint64_t seed) {
  if (amount.kind == FewShotAmount::Kind::Ratio &&
      (amount.value <= 0.0 || amount.value > 1.0)) {
    throw ConfigError("few-shot ratio must be in (0,1]");
  }
  if (amount.kind == FewShotAmount::Kind::PerSkillCount && amount.value < 1.0) {
    throw ConfigError("few-shot per-skill count must be >= 1");
  }

  // (story index, pair index) grouped by skill, dataset order.
  std::array<std::vector<std::pair<std::size_t, std::size_t>>, kSkillCount> by_skill;
  for (std::size_t i = 0; i < train.stories.size(); ++i) {
    const auto& pairs = train.stories[i].pairs;
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      if (pairs[j].skill) by_skill[skill_index(*pairs[j].skill)].emplace_back(i, j);
    }
  }

  rng::Engine eng(seed);
  std::vector<std::set<std::size_t>> selected(train.stories.size());
  for (std::size_t k = 0; k < kSkillCount; ++k) {
    auto group = by_skill[k];
    if (group.empty()) continue;
    std::size_t take = 0;
    if (amount.kind == FewShotAmount::Kind::PerSkillCount) {
      take = std::min(group.size(), static_cast<std::size_t>(amount.value));
    } else if (amount.value >= 1.0) {
      take = group.size();
    } else {
      take = static_cast<std::size_t>(
          std::llround(amount.value * static_cast<double>(group.size())));
      take = std::min(take, group.size());
    }
    rng::shuffle(group, eng);
    for (std::size_t t = 0; t < take; ++t) selected[group[t].first].insert(group[t].second);
  }

  SkillDataset out;
  out.provenance = train.provenance;
  for (std::size_t i = 0; i < train.stories.size(); ++i) {
    if (selected[i].empty()) continue;
    Story story = train.stories[i];
    std::vector<QAPair> kept;
    for (const std::size_t j : selected[i]) kept.push_back(story.pairs[j]);
    story.pairs = std::move(kept);
    out.stories.push_back(std::move(story));
  }
  return out;
}

}  // namespace skillforge
