#include <cstdio>
#include <set>
#include <vector>

#include "skillforge/tiny_backend.hpp"
#include "skillforge/train.hpp"

using namespace skillforge;

int main(int argc, char** argv) {
  const double lr = argc > 1 ? std::atof(argv[1]) : 3e-3;
  const std::size_t epochs = argc > 2 ? static_cast<std::size_t>(std::atoi(argv[2])) : 8;
  const std::size_t dim = argc > 3 ? static_cast<std::size_t>(std::atoi(argv[3])) : 24;

  rng::Engine eng(21);
  std::vector<std::string> words;
  for (char c = 'a'; c <= 'j'; ++c) words.emplace_back(1, c);
  std::vector<EncodedExample> examples;
  for (int i = 0; i < 200; ++i) {
    const std::size_t len = 3 + rng::uniform_below(eng, 4);
    std::vector<std::string> seq;
    for (std::size_t k = 0; k < len; ++k) seq.push_back(words[rng::uniform_below(eng, words.size())]);
    EncodedExample ex;
    ex.encoder_text = join_tokens(seq) + " </s>";
    ex.decoder_text = ex.encoder_text;
    examples.push_back(ex);
  }
  TinyBackendConfig cfg;
  cfg.dim = dim;
  cfg.ffn_dim = 2 * dim;
  cfg.max_len = 16;
  cfg.seed = 23;
  std::vector<std::string> vocab = words;
  vocab.push_back("</s>");
  TinyBackend backend(vocab, cfg);
  TrainConfig tc;
  tc.learning_rate = lr;
  tc.batch_size = 8;
  tc.max_epochs = epochs;
  tc.patience = epochs - 1;
  tc.seed = 7;
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = train_stage(backend, examples,
                                  std::vector<EncodedExample>(examples.begin(), examples.begin() + 20),
                                  tc);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("lr=%g dim=%zu epochs=%zu: first=%.4f last=%.4f ratio=%.4f (%.2fs)\n", lr, dim,
              epochs, report.train_losses.front(), report.train_losses.back(),
              report.train_losses.back() / report.train_losses.front(), secs);
  return 0;
}
