#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "skillforge/common.hpp"

namespace skillforge {

// One pre-tokenized training example. decoder_ids are the target ids and end
// with the eos id; backends prepend their own start-of-sequence marker.
struct TokenizedPair {
  std::vector<int> encoder_ids;
  std::vector<int> decoder_ids;
};

// Capability interface for sequence-to-sequence backends. The reference
// implementation is TinyBackend; adapters for pretrained models plug in
// behind the same surface.
//
// Contract:
//  - loss() returns the mean per-token negative log-likelihood of the batch
//    (sum of token NLLs divided by the total target token count). With
//    accumulate_gradients=true it also accumulates parameter gradients that
//    the next apply_gradient_step() consumes.
//  - next_token_distribution() returns a probability vector over the whole
//    vocabulary summing to 1 within 1e-6.
//  - snapshot()/restore() capture exactly the parameters; forward behavior
//    after restore is bitwise identical.
class Seq2SeqBackend {
 public:
  virtual ~Seq2SeqBackend() = default;

  virtual std::string name() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual int eos_id() const = 0;

  virtual std::vector<int> tokenize(const std::string& text) const = 0;
  virtual std::string detokenize(std::span<const int> ids) const = 0;
  virtual void register_special_tokens(const std::vector<std::string>& tokens) = 0;

  virtual double loss(const std::vector<TokenizedPair>& batch,
                      bool accumulate_gradients = false) = 0;
  virtual void apply_gradient_step(double learning_rate) = 0;
  virtual void reset_optimizer() = 0;

  virtual std::vector<double> next_token_distribution(std::span<const int> encoder_ids,
                                                      std::span<const int> decoder_prefix) = 0;

  virtual std::vector<double> snapshot() const = 0;
  virtual void restore(const std::vector<double>& params) = 0;

  virtual void save(const std::filesystem::path& path) const = 0;
};

}  // namespace skillforge
