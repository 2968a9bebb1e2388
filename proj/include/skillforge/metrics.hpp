#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillforge/common.hpp"
#include "skillforge/corpus.hpp"
#include "skillforge/text.hpp"

namespace skillforge {

inline constexpr const char* kMetricTokenizerId = "lowercase-punct-detach-whitespace";
inline constexpr const char* kBleuSmoothingId = "add-epsilon-1e-9";
inline constexpr double kBleuEpsilon = 1e-9;

struct ScoredPair {
  std::string hypothesis;
  std::vector<std::string> references; // non-empty
  std::string story_id;
  std::optional<Skill> skill;
  std::optional<QuestionType> qtype;
};

// ---------------------------------------------------------------------------
// BLEU (corpus-level, modified n-gram precision, brevity penalty)
// ---------------------------------------------------------------------------

struct BleuScores {
  std::array<double, 4> bleu_percent{};   // BLEU-1..4
  std::array<double, 4> precisions{};     // modified n-gram precisions
  std::array<std::size_t, 4> matched{};   // clipped match counts
  std::array<std::size_t, 4> total{};     // hypothesis n-gram counts
  double brevity_penalty = 1.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

namespace detail {

inline std::map<std::string, std::size_t> ngram_counts(const std::vector<std::string>& toks,
                                                       std::size_t n) {
  std::map<std::string, std::size_t> counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) {
      if (k) key += '\x1f';
      key += toks[i + k];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

inline BleuScores compute_bleu(std::span<const ScoredPair> pairs, std::size_t max_n = 4) {
  if (pairs.empty()) throw DataError("bleu: empty hypothesis list");
  if (max_n < 1 || max_n > 4) throw ConfigError("bleu: max_n must be in 1..4");
  BleuScores out;
  for (const auto& pair : pairs) {
    if (pair.references.empty()) throw DataError("bleu: pair without references");
    const auto hyp = metric_tokens(pair.hypothesis);
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : pair.references) refs.push_back(metric_tokens(r));

    out.hyp_length += hyp.size();
    // Effective reference length: closest to the hypothesis, shorter on ties.
    std::size_t best_ref = refs[0].size();
    for (const auto& r : refs) {
      const auto diff = [&](std::size_t len) {
        return len > hyp.size() ? len - hyp.size() : hyp.size() - len;
      };
      if (diff(r.size()) < diff(best_ref) || (diff(r.size()) == diff(best_ref) && r.size() < best_ref)) {
        best_ref = r.size();
      }
    }
    out.ref_length += best_ref;

    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto hyp_counts = detail::ngram_counts(hyp, n);
      std::map<std::string, std::size_t> max_ref_counts;
      for (const auto& r : refs) {
        for (const auto& [gram, cnt] : detail::ngram_counts(r, n)) {
          auto& m = max_ref_counts[gram];
          m = std::max(m, cnt);
        }
      }
      for (const auto& [gram, cnt] : hyp_counts) {
        out.total[n - 1] += cnt;
        const auto it = max_ref_counts.find(gram);
        if (it != max_ref_counts.end()) out.matched[n - 1] += std::min(cnt, it->second);
      }
    }
  }

  out.brevity_penalty =
      out.hyp_length >= out.ref_length
          ? 1.0
          : std::exp(1.0 - static_cast<double>(out.ref_length) /
                               std::max<double>(1.0, static_cast<double>(out.hyp_length)));
  for (std::size_t n = 1; n <= max_n; ++n) {
    const double p = out.total[n - 1] == 0
                         ? kBleuEpsilon
                         : static_cast<double>(out.matched[n - 1]) /
                               static_cast<double>(out.total[n - 1]);
    out.precisions[n - 1] = p == 0.0 ? kBleuEpsilon : p;
  }
  for (std::size_t k = 1; k <= max_n; ++k) {
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= k; ++n) log_sum += std::log(out.precisions[n - 1]);
    out.bleu_percent[k - 1] =
        100.0 * out.brevity_penalty * std::exp(log_sum / static_cast<double>(k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Semantic scoring (pluggable; desk-scale proxy is token-overlap F1)
// ---------------------------------------------------------------------------

class SemanticScorer {
 public:
  virtual ~SemanticScorer() = default;
  virtual std::string name() const = 0;
  // Score in [0,1]; multi-reference pairs take the best reference.
  virtual double score(const std::string& hypothesis, const std::string& reference) const = 0;
};

// Unigram overlap F-measure over metric tokens. A documented stand-in for
// learned scorers: directional comparisons between runs are meaningful,
// absolute values are not comparable to learned-metric numbers.
class OverlapF1Scorer final : public SemanticScorer {
 public:
  std::string name() const override { return "overlap-f1"; }
  double score(const std::string& hypothesis, const std::string& reference) const override {
    const auto h = metric_tokens(hypothesis);
    const auto r = metric_tokens(reference);
    if (h.empty() || r.empty()) return h.empty() && r.empty() ? 1.0 : 0.0;
    std::map<std::string, std::size_t> rc;
    for (const auto& t : r) ++rc[t];
    std::size_t overlap = 0;
    for (const auto& t : h) {
      auto it = rc.find(t);
      if (it != rc.end() && it->second > 0) {
        --it->second;
        ++overlap;
      }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(h.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(r.size());
    return 2.0 * precision * recall / (precision + recall);
  }
};

struct SemanticResult {
  double mean_percent = 0.0;
  std::vector<double> per_pair; // [0,1], aligned with the input pairs
  std::string scorer_name;
};

inline SemanticResult compute_semantic(std::span<const ScoredPair> pairs,
                                       const SemanticScorer& scorer) {
  if (pairs.empty()) throw DataError("semantic_score: empty pair list");
  SemanticResult out;
  out.scorer_name = scorer.name();
  double sum = 0.0;
  for (const auto& pair : pairs) {
    if (pair.references.empty()) throw DataError("semantic_score: pair without references");
    double best = 0.0;
    for (const auto& ref : pair.references) best = std::max(best, scorer.score(pair.hypothesis, ref));
    out.per_pair.push_back(best);
    sum += best;
  }
  out.mean_percent = 100.0 * sum / static_cast<double>(pairs.size());
  return out;
}

// ---------------------------------------------------------------------------
// Reports and breakdowns
// ---------------------------------------------------------------------------

struct MetricReport {
  BleuScores bleu;
  std::optional<double> semantic_percent;
  std::string semantic_scorer_name;
  std::size_t n = 0;
  std::string tokenizer_id = kMetricTokenizerId;
  std::string smoothing_id = kBleuSmoothingId;
  std::vector<std::string> warnings;
};

inline MetricReport score_pairs(std::span<const ScoredPair> pairs,
                                const SemanticScorer* scorer) {
  MetricReport report;
  report.n = pairs.size();
  report.bleu = compute_bleu(pairs);
  if (scorer != nullptr) {
    const auto sem = compute_semantic(pairs, *scorer);
    report.semantic_percent = sem.mean_percent;
    report.semantic_scorer_name = sem.scorer_name;
  } else {
    report.warnings.push_back("semantic scorer unavailable; semantic score omitted");
  }
  return report;
}

struct BreakdownResult {
  std::map<std::string, MetricReport> groups;
  std::size_t excluded = 0; // pairs missing the grouping field
};

enum class BreakdownDimension { QType, SkillName };

inline BreakdownResult breakdown(std::span<const ScoredPair> pairs, BreakdownDimension dim,
                                 const SemanticScorer* scorer) {
  std::map<std::string, std::vector<ScoredPair>> grouped;
  BreakdownResult out;
  for (const auto& pair : pairs) {
    std::optional<std::string> key;
    if (dim == BreakdownDimension::QType) {
      if (pair.qtype) key = std::string(question_type_name(*pair.qtype));
    } else {
      if (pair.skill) key = std::string(skill_code(*pair.skill));
    }
    if (!key) {
      ++out.excluded;
      continue;
    }
    grouped[*key].push_back(pair);
  }
  for (const auto& [key, group] : grouped) out.groups[key] = score_pairs(group, scorer);
  return out;
}

inline nlohmann::ordered_json metric_report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["n"] = r.n;
  j["tokenizer"] = r.tokenizer_id;
  j["smoothing"] = r.smoothing_id;
  for (std::size_t k = 0; k < 4; ++k) {
    j["bleu_" + std::to_string(k + 1)] = r.bleu.bleu_percent[k];
  }
  j["brevity_penalty"] = r.bleu.brevity_penalty;
  if (r.semantic_percent) {
    j["semantic"] = *r.semantic_percent;
    j["semantic_scorer"] = r.semantic_scorer_name;
  }
  if (!r.warnings.empty()) j["warnings"] = r.warnings;
  return j;
}

// CSV mirroring the headline results table layout (BLEU-1..4 + semantic).
inline std::string metric_report_to_csv(const MetricReport& r, const std::string& model_label) {
  const auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
  };
  std::string out = csv::row({"model", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "semantic"});
  out += csv::row({model_label, fmt(r.bleu.bleu_percent[0]), fmt(r.bleu.bleu_percent[1]),
                   fmt(r.bleu.bleu_percent[2]), fmt(r.bleu.bleu_percent[3]),
                   r.semantic_percent ? fmt(*r.semantic_percent) : std::string("n/a")});
  return out;
}

// ---------------------------------------------------------------------------
// Skill-control accuracy and per-skill F1
// ---------------------------------------------------------------------------

struct SkillJudgment {
  std::string question_id;
  Skill intended = Skill::BSE;
  std::optional<Skill> judged; // nullopt = NONE (unassignable)
};

struct PrecisionRecallF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0; // judgments with this intended skill
};

struct SkillControlScores {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::map<Skill, PrecisionRecallF1> per_skill;
  // confusion[intended][judged]; NONE judgments tracked separately
  std::array<std::array<std::size_t, kSkillCount>, kSkillCount> confusion{};
  std::array<std::size_t, kSkillCount> none_by_intended{};
};

// Accuracy is the confusion-matrix trace over n. A NONE judgment counts
// against its intended skill's recall but never enters any precision
// denominator (it is not a predicted class).
inline SkillControlScores skill_control_scores(std::span<const SkillJudgment> judgments) {
  if (judgments.empty()) throw DataError("skill_control_scores: no judgments");
  SkillControlScores out;
  out.n = judgments.size();
  for (const auto& j : judgments) {
    const std::size_t row = skill_index(j.intended);
    if (j.judged) ++out.confusion[row][skill_index(*j.judged)];
    else ++out.none_by_intended[row];
  }
  std::size_t trace = 0;
  for (std::size_t k = 0; k < kSkillCount; ++k) trace += out.confusion[k][k];
  out.accuracy = static_cast<double>(trace) / static_cast<double>(out.n);
  for (std::size_t k = 0; k < kSkillCount; ++k) {
    std::size_t tp = out.confusion[k][k];
    std::size_t predicted = 0;
    std::size_t intended = out.none_by_intended[k];
    for (std::size_t r = 0; r < kSkillCount; ++r) predicted += out.confusion[r][k];
    for (std::size_t c = 0; c < kSkillCount; ++c) intended += out.confusion[k][c];
    if (intended == 0 && predicted == 0) continue;
    PrecisionRecallF1 prf;
    prf.support = intended;
    prf.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    prf.recall = intended ? static_cast<double>(tp) / static_cast<double>(intended) : 0.0;
    prf.f1 = (prf.precision + prf.recall) > 0.0
                 ? 2.0 * prf.precision * prf.recall / (prf.precision + prf.recall)
                 : 0.0;
    out.per_skill[kAllSkills[k]] = prf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Human-evaluation packets
// ---------------------------------------------------------------------------

struct HumanEvalSample {
  std::string model;
  std::string story;
  std::string question;
};

struct HumanEvalExport {
  std::string packet_csv; // blinded: item_id,story,question,ay,fy,gy
  std::string key_csv;    // sealed: item_id,model
  std::size_t exported = 0;
  std::vector<std::string> warnings;
};

inline HumanEvalExport export_human_eval_packet(std::span<const HumanEvalSample> pool,
                                                std::size_t size, std::uint64_t seed) {
  HumanEvalExport out;
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Engine eng(seed);
  rng::shuffle(order, eng);
  if (pool.size() < size) {
    out.warnings.push_back("pool has " + std::to_string(pool.size()) +
                           " samples, fewer than requested " + std::to_string(size) +
                           "; exporting all");
  }
  const std::size_t take = std::min(size, pool.size());
  out.packet_csv = csv::row({"item_id", "story", "question", "ay", "fy", "gy"});
  out.key_csv = csv::row({"item_id", "model"});
  for (std::size_t i = 0; i < take; ++i) {
    const auto& s = pool[order[i]];
    const std::string item = "item-" + std::to_string(i + 1);
    out.packet_csv += csv::row({item, s.story, s.question, "", "", ""});
    out.key_csv += csv::row({item, s.model});
  }
  out.exported = take;
  return out;
}

struct HumanEvalMeans {
  double answerability = 0.0;
  double fluency = 0.0;
  double grammaticality = 0.0;
  std::size_t n = 0;
};

struct HumanEvalImport {
  std::map<std::string, HumanEvalMeans> per_model;
  std::vector<std::string> row_errors; // with 1-based line numbers
};

inline HumanEvalImport import_human_eval(const std::string& filled_packet_csv,
                                         const std::string& key_csv) {
  HumanEvalImport out;
  std::map<std::string, std::string> model_of;
  {
    std::size_t pos = 0;
    std::vector<std::string> fields;
    bool header = true;
    while (csv::parse_record(key_csv, pos, fields)) {
      if (header) {
        header = false;
        continue;
      }
      if (fields.size() >= 2) model_of[fields[0]] = fields[1];
    }
  }
  struct Acc {
    double ay = 0, fy = 0, gy = 0;
    std::size_t n = 0;
  };
  std::map<std::string, Acc> acc;
  std::size_t pos = 0;
  std::vector<std::string> fields;
  std::size_t lineno = 0;
  bool header = true;
  while (csv::parse_record(filled_packet_csv, pos, fields)) {
    ++lineno;
    if (header) {
      header = false;
      continue;
    }
    if (fields.size() != 6) {
      out.row_errors.push_back("line " + std::to_string(lineno) + ": expected 6 fields, got " +
                               std::to_string(fields.size()));
      continue;
    }
    const auto model_it = model_of.find(fields[0]);
    if (model_it == model_of.end()) {
      out.row_errors.push_back("line " + std::to_string(lineno) + ": item '" + fields[0] +
                               "' not in key file");
      continue;
    }
    double ratings[3];
    bool ok = true;
    for (int r = 0; r < 3; ++r) {
      try {
        std::size_t idx = 0;
        ratings[r] = std::stod(fields[static_cast<std::size_t>(3 + r)], &idx);
        if (idx != fields[static_cast<std::size_t>(3 + r)].size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        out.row_errors.push_back("line " + std::to_string(lineno) + ": rating " +
                                 std::to_string(r + 1) + " is not a number");
        ok = false;
        break;
      }
      if (ratings[r] < 1.0 || ratings[r] > 5.0) {
        out.row_errors.push_back("line " + std::to_string(lineno) + ": rating " +
                                 std::to_string(r + 1) + " outside 1-5");
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    auto& a = acc[model_it->second];
    a.ay += ratings[0];
    a.fy += ratings[1];
    a.gy += ratings[2];
    ++a.n;
  }
  for (const auto& [model, a] : acc) {
    HumanEvalMeans m;
    m.n = a.n;
    m.answerability = a.ay / static_cast<double>(a.n);
    m.fluency = a.fy / static_cast<double>(a.n);
    m.grammaticality = a.gy / static_cast<double>(a.n);
    out.per_model[model] = m;
  }
  return out;
}

}  // namespace skillforge
