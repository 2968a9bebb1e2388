#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "skillforge/backend.hpp"
#include "skillforge/common.hpp"

namespace skillforge {

struct SamplerConfig {
  double top_p = 0.9;
  std::uint64_t seed = 13;
  std::size_t max_new_tokens = 128;
  int eos_id = -1; // -1: use the backend's eos id

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0,1]");
    if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be positive");
  }
};

struct NucleusResult {
  std::vector<double> probs; // full-size, zero outside the nucleus, sums to 1
  std::vector<int> kept;     // descending probability, ties by ascending id
};

// Keeps the minimal descending-probability prefix whose cumulative mass
// reaches p (>= at the boundary, so p=1 keeps the full support), then
// renormalizes. Ties at equal probability break by ascending token id.
inline NucleusResult nucleus_filter(std::span<const double> dist, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("top_p must be in (0,1]");
  if (dist.empty()) throw DataError("nucleus_filter: empty distribution");
  double sum = 0.0;
  for (const double v : dist) {
    if (v < 0.0) throw DataError("nucleus_filter: negative probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw DataError("nucleus_filter: distribution does not sum to 1");

  std::vector<int> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (dist[static_cast<std::size_t>(a)] != dist[static_cast<std::size_t>(b)])
      return dist[static_cast<std::size_t>(a)] > dist[static_cast<std::size_t>(b)];
    return a < b;
  });

  NucleusResult result;
  result.probs.assign(dist.size(), 0.0);
  double mass = 0.0;
  for (const int id : order) {
    result.kept.push_back(id);
    mass += dist[static_cast<std::size_t>(id)];
    if (mass >= p) break;
  }
  for (const int id : result.kept) {
    result.probs[static_cast<std::size_t>(id)] = dist[static_cast<std::size_t>(id)] / mass;
  }
  return result;
}

enum class TerminationReason { Eos, MaxLen };

struct GenerationResult {
  std::vector<int> token_ids; // includes the final eos when terminated by it
  std::string text;           // decoded, eos excluded
  std::vector<std::size_t> nucleus_sizes;
  TerminationReason terminated_by = TerminationReason::MaxLen;
};

namespace detail {

inline int sample_from(const NucleusResult& nucleus, rng::Engine& eng) {
  const double u = rng::uniform01(eng);
  double cum = 0.0;
  for (const int id : nucleus.kept) {
    cum += nucleus.probs[static_cast<std::size_t>(id)];
    if (u < cum) return id;
  }
  return nucleus.kept.back();
}

}  // namespace detail

// Autoregressive nucleus sampling; deterministic given (seed, backend state).
inline GenerationResult generate(Seq2SeqBackend& backend, const std::string& encoder_text,
                                 const SamplerConfig& config) {
  config.validate();
  const std::vector<int> encoder_ids = backend.tokenize(encoder_text);
  const int eos = config.eos_id >= 0 ? config.eos_id : backend.eos_id();
  rng::Engine eng(config.seed);

  GenerationResult result;
  for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
    std::vector<double> dist;
    try {
      dist = backend.next_token_distribution(encoder_ids, result.token_ids);
    } catch (const std::exception& e) {
      throw TrainError("generate: backend failed at step " + std::to_string(step) + ": " +
                       e.what());
    }
    const NucleusResult nucleus = nucleus_filter(dist, config.top_p);
    result.nucleus_sizes.push_back(nucleus.kept.size());
    const int token = detail::sample_from(nucleus, eng);
    result.token_ids.push_back(token);
    if (token == eos) {
      result.terminated_by = TerminationReason::Eos;
      break;
    }
  }
  if (!result.token_ids.empty() && result.token_ids.back() == eos &&
      result.terminated_by == TerminationReason::Eos) {
    result.text = backend.detokenize(
        std::span<const int>(result.token_ids.data(), result.token_ids.size() - 1));
  } else {
    result.terminated_by = TerminationReason::MaxLen;
    result.text = backend.detokenize(result.token_ids);
  }
  return result;
}

}  // namespace skillforge
