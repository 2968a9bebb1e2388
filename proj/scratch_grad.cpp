#include <cstdio>
#include <vector>

#include "skillforge/tiny_backend.hpp"

using namespace skillforge;

int main() {
  TinyBackendConfig cfg;
  cfg.dim = 8;
  cfg.ffn_dim = 12;
  cfg.max_len = 16;
  cfg.seed = 17;
  std::vector<std::string> vocab;
  for (char c = 'a'; c <= 'j'; ++c) vocab.emplace_back(1, c);
  vocab.push_back("</s>");
  TinyBackend backend(vocab, cfg);

  std::vector<TokenizedPair> batch(2);
  batch[0].encoder_ids = backend.tokenize("a b c </s>");
  batch[0].decoder_ids = backend.tokenize("d e </s>");
  batch[1].encoder_ids = backend.tokenize("f g </s>");
  batch[1].decoder_ids = backend.tokenize("h i j </s>");

  backend.zero_gradients();
  backend.loss(batch, true);
  const std::vector<double> grads = backend.gradients();

  for (const double h : {1e-4, 1e-5, 1e-6}) {
    double worst = 0.0;
    std::string worst_group;
    std::size_t worst_off = 0;
    for (const auto& group : backend.parameter_groups()) {
      for (const std::size_t off : {std::size_t{0}, group.size / 2, group.size - 1}) {
        const std::size_t idx = group.offset + off;
        auto& params = backend.mutable_parameters();
        const double saved = params[idx];
        params[idx] = saved + h;
        const double up = backend.loss(batch);
        params[idx] = saved - h;
        const double down = backend.loss(batch);
        params[idx] = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = grads[idx];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        const double rel = std::abs(numeric - analytic) / denom;
        if (rel > worst) {
          worst = rel;
          worst_group = group.name;
          worst_off = off;
        }
        if (rel > 1e-3) {
          std::printf("h=%g group=%-8s off=%zu analytic=%+.10e numeric=%+.10e rel=%.3e\n", h,
                      group.name.c_str(), off, analytic, numeric, rel);
        }
      }
    }
    std::printf("h=%g worst rel=%.3e at %s[%zu]\n\n", h, worst, worst_group.c_str(), worst_off);
  }
  return 0;
}
