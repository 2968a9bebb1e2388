// Prototype for the skill-conditioning experiment: WTA vs WTA_UNSKILLED
// template accuracy on held-out grammar stories.
#include <cstdio>
#include <set>

#include "skillforge/decoding.hpp"
#include "skillforge/experiment.hpp"
#include "skillforge/seqformat.hpp"
#include "skillforge/tiny_backend.hpp"
#include "skillforge/train.hpp"
#include "tests/support/synthetic.hpp"

using namespace skillforge;

namespace {

std::vector<std::string> vocab_of(const std::vector<const std::vector<EncodedExample>*>& sets,
                                  const SpecialTokens& tokens) {
  std::set<std::string> v;
  for (const auto* set : sets) {
    for (const auto& ex : *set) {
      for (const auto& t : whitespace_tokens(ex.encoder_text)) v.insert(t);
      for (const auto& t : whitespace_tokens(ex.decoder_text)) v.insert(t);
    }
  }
  for (const auto& t : tokens.all()) v.insert(t);
  return {v.begin(), v.end()};
}

double template_accuracy(TinyBackend& backend, const SkillDataset& test, bool skilled,
                         std::uint64_t seed, double top_p, std::size_t dim_unused = 0) {
  (void)dim_unused;
  const auto tokens = SpecialTokens::defaults();
  SamplerConfig sc;
  sc.top_p = top_p;
  sc.max_new_tokens = 24;
  std::size_t hits = 0, total = 0;
  std::size_t idx = 0;
  for (const auto& story : test.stories) {
    for (const Skill s : kAllSkills) {
      const std::string enc =
          skilled ? render_input(story.text, FormatKind::WTA, s, tokens)
                  : render_input(story.text, FormatKind::HTA, std::nullopt, tokens);
      sc.seed = rng::derive_seed(seed, idx++);
      const auto gen = generate(backend, enc, sc);
      const auto parsed = parse_generation(gen.text + " " + tokens.eos, tokens);
      const auto judged =
          parsed.pairs.empty() ? std::nullopt : sftest::classify_question(parsed.pairs[0].first);
      hits += (judged && *judged == s) ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace

int main(int argc, char** argv) {
  const std::size_t n_stories = argc > 1 ? std::atoi(argv[1]) : 220;
  const double lr = argc > 2 ? std::atof(argv[2]) : 3e-3;
  const std::size_t epochs = argc > 3 ? std::atoi(argv[3]) : 10;
  const std::size_t dim = argc > 4 ? std::atoi(argv[4]) : 32;

  const auto tokens = SpecialTokens::defaults();
  const SkillDataset corpus = sftest::make_skill_grammar_corpus(n_stories, 500);
  SplitSpec split_spec;
  split_spec.seed = 501;
  const auto split = stratified_split(corpus, split_spec);
  std::printf("stories: train=%zu val=%zu test=%zu\n", split.train.stories.size(),
              split.val.stories.size(), split.test.stories.size());

  BuildOptions skilled_opts;
  skilled_opts.kind = FormatKind::WTA;
  skilled_opts.max_encoder_tokens = 64;
  skilled_opts.max_decoder_tokens = 32;
  BuildOptions unskilled_opts = skilled_opts;
  unskilled_opts.include_skill_token = false;

  const auto sk_train = build_training_set(split.train, skilled_opts).examples;
  const auto sk_val = build_training_set(split.val, skilled_opts).examples;
  const auto un_train = build_training_set(split.train, unskilled_opts).examples;
  const auto un_val = build_training_set(split.val, unskilled_opts).examples;
  const auto vocab = vocab_of({&sk_train, &sk_val, &un_train, &un_val}, tokens);
  std::printf("examples: %zu, vocab: %zu\n", sk_train.size(), vocab.size());

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto t0 = std::chrono::steady_clock::now();
    TinyBackendConfig bc;
    bc.dim = dim;
    bc.ffn_dim = 2 * dim;
    bc.max_len = 64;
    bc.seed = rng::derive_seed(seed, 40);
    TrainConfig tc;
    tc.learning_rate = lr;
    tc.batch_size = 8;
    tc.max_epochs = epochs;
    tc.patience = 3;
    tc.seed = rng::derive_seed(seed, 41);

    TinyBackend skilled(vocab, bc);
    const auto rep_s = train_stage(skilled, sk_train, sk_val, tc);
    const double acc_s = template_accuracy(skilled, split.test, true, seed * 7 + 1, 0.9);

    TinyBackend unskilled(vocab, bc);
    const auto rep_u = train_stage(unskilled, un_train, un_val, tc);
    const double acc_u = template_accuracy(unskilled, split.test, false, seed * 7 + 2, 0.9);

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf(
        "seed %llu: skilled acc=%.3f (val %.4f, ep %zu) unskilled acc=%.3f (val %.4f, ep %zu) "
        "[%.1fs]\n",
        static_cast<unsigned long long>(seed), acc_s, rep_s.val_losses[rep_s.best_epoch - 1],
        rep_s.stopped_epoch, acc_u, rep_u.val_losses[rep_u.best_epoch - 1], rep_u.stopped_epoch,
        secs);
  }
  return 0;
}
