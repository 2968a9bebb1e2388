#pragma once

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

struct SpanCandidate {
  std::size_t start = 0; // token offsets, [start, end)
  std::size_t end = 0;
  std::string text;
  double score = 0.0;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  // Deterministic: identical texts yield identical vectors.
  virtual std::vector<double> embed(const std::string& text) const = 0;
};

// Hashed bag of character n-grams (n = 2..4 over "^token$"). Deterministic,
// dependency-free, and similar texts land on similar buckets; ships as the
// default test embedder. Contextual-model adapters can replace it.
class HashedSubwordEmbedder final : public EmbeddingProvider {
 public:
  explicit HashedSubwordEmbedder(std::size_t dim = 128) : dim_(dim) {}
  std::size_t dim() const override { return dim_; }
  std::vector<double> embed(const std::string& text) const override {
    std::vector<double> v(dim_, 0.0);
    for (const auto& raw : metric_tokens(text)) {
      const std::string tok = "^" + raw + "$";
      for (std::size_t n = 2; n <= 4; ++n) {
        if (tok.size() < n) continue;
        for (std::size_t i = 0; i + n <= tok.size(); ++i) {
          const std::uint64_t h = fnv1a64(std::string_view(tok).substr(i, n));
          v[h % dim_] += 1.0;
        }
      }
    }
    return v;
  }

 private:
  std::size_t dim_;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return -std::numeric_limits<double>::infinity();
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct SpanBounds {
  std::size_t min_len = 1;
  std::optional<std::size_t> max_len; // default: min(answer tokens + 5, 20)
};

inline std::vector<SpanCandidate> enumerate_spans(std::span<const std::string> passage_tokens,
                                                  std::size_t min_len, std::size_t max_len) {
  if (passage_tokens.empty()) throw DataError("enumerate_spans: empty passage");
  if (min_len < 1 || min_len > max_len) throw ConfigError("enumerate_spans: bad length bounds");
  std::vector<SpanCandidate> out;
  const std::size_t n = passage_tokens.size();
  for (std::size_t len = min_len; len <= std::min(max_len, n); ++len) {
    for (std::size_t start = 0; start + len <= n; ++start) {
      SpanCandidate c;
      c.start = start;
      c.end = start + len;
      c.text = join_tokens({passage_tokens.begin() + static_cast<std::ptrdiff_t>(start),
                            passage_tokens.begin() + static_cast<std::ptrdiff_t>(start + len)});
      out.push_back(std::move(c));
    }
  }
  return out;
}

struct AlignOutcome {
  SpanCandidate best;
  std::vector<std::string> warnings;
};

// Argmax-cosine span retrieval; ties break to the earliest start, then the
// shortest span. Candidates with zero-vector embeddings score -inf.
inline AlignOutcome align_answer(const std::string& passage, const std::string& answer,
                                 const EmbeddingProvider& embedder, SpanBounds bounds = {}) {
  if (trim(answer).empty()) throw DataError("align_answer: empty answer");
  const auto passage_tokens = whitespace_tokens(passage);
  if (passage_tokens.empty()) throw DataError("align_answer: empty passage");
  const std::size_t answer_len = whitespace_tokens(answer).size();
  const std::size_t max_len =
      bounds.max_len ? *bounds.max_len : std::min<std::size_t>(answer_len + 5, 20);
  auto candidates = enumerate_spans(passage_tokens, bounds.min_len, max_len);

  AlignOutcome out;
  const std::vector<double> answer_vec = embedder.embed(answer);
  bool any_zero = false;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t best_idx = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::vector<double> v = embedder.embed(candidates[i].text);
    const double s = cosine_similarity(answer_vec, v);
    if (std::isinf(s) && s < 0.0) any_zero = true;
    candidates[i].score = s;
    const auto& cur = candidates[i];
    const auto& best = candidates[best_idx];
    const bool better =
        s > best_score ||
        (s == best_score && (cur.start < best.start ||
                             (cur.start == best.start && cur.end - cur.start < best.end - best.start)));
    if (i == 0 || better) {
      best_score = s;
      best_idx = i;
    }
  }
  if (any_zero) out.warnings.push_back("zero-vector embedding among candidates; scored -inf");
  out.best = candidates[best_idx];
  return out;
}

enum class AlignMode { Exact, Aligned };

struct AlignedSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  double score = 0.0;
  AlignMode mode = AlignMode::Aligned;
};

struct CorpusAlignment {
  std::map<std::string, AlignedSpan> by_pair_id;
  std::vector<std::string> failures; // pair id + reason; corpus still emitted
};

namespace detail {

inline std::optional<std::pair<std::size_t, std::size_t>> exact_token_match(
    const std::vector<std::string>& passage, const std::vector<std::string>& answer) {
  if (answer.empty() || answer.size() > passage.size()) return std::nullopt;
  for (std::size_t start = 0; start + answer.size() <= passage.size(); ++start) {
    bool hit = true;
    for (std::size_t k = 0; k < answer.size(); ++k) {
      if (passage[start + k] != answer[k]) {
        hit = false;
        break;
      }
    }
    if (hit) return std::make_pair(start, start + answer.size());
  }
  return std::nullopt;
}

}  // namespace detail

// Exact token-subsequence search first (the literal-answer fast path);
// embedding alignment only when exact search fails.
inline CorpusAlignment align_corpus(const SkillDataset& corpus, const EmbeddingProvider& embedder,
                                    SpanBounds bounds = {}) {
  CorpusAlignment out;
  for (const auto& story : corpus.stories) {
    const auto passage_tokens = whitespace_tokens(story.text);
    for (const auto& pair : story.pairs) {
      try {
        const auto answer_tokens = whitespace_tokens(pair.answer);
        AlignedSpan span;
        if (const auto hit = detail::exact_token_match(passage_tokens, answer_tokens)) {
          span.start = hit->first;
          span.end = hit->second;
          span.score = 1.0;
          span.mode = AlignMode::Exact;
        } else {
          const auto aligned = align_answer(story.text, pair.answer, embedder, bounds);
          span.start = aligned.best.start;
          span.end = aligned.best.end;
          span.score = aligned.best.score;
          span.mode = AlignMode::Aligned;
        }
        out.by_pair_id[pair.id] = span;
      } catch (const std::exception& e) {
        out.failures.push_back("pair '" + pair.id + "': " + e.what());
      }
    }
  }
  return out;
}

// Input JSONL schema extended with a "span" object per pair.
inline std::string aligned_corpus_to_jsonl(const SkillDataset& corpus,
                                           const CorpusAlignment& alignment) {
  std::string out;
  for (const auto& story : corpus.stories) {
    auto j = story_to_json(story);
    for (std::size_t i = 0; i < story.pairs.size(); ++i) {
      const auto it = alignment.by_pair_id.find(story.pairs[i].id);
      if (it == alignment.by_pair_id.end()) continue;
      nlohmann::ordered_json span;
      span["start"] = it->second.start;
      span["end"] = it->second.end;
      span["score"] = it->second.score;
      span["mode"] = it->second.mode == AlignMode::Exact ? "exact" : "aligned";
      j["pairs"][i]["span"] = std::move(span);
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace skillforge
