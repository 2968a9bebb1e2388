// Prototype for the two-stage benefit experiment: HTA_WTA vs T5_WTA held-out
// loss with WTA data subsampled to 10%.
#include <cstdio>
#include <set>

#include "skillforge/experiment.hpp"
#include "tests/support/synthetic.hpp"
#include "tests/support/testutil.hpp"

using namespace skillforge;

int main(int argc, char** argv) {
  const std::size_t dim = argc > 1 ? std::atoi(argv[1]) : 40;
  const double lr = argc > 2 ? std::atof(argv[2]) : 3e-3;
  const std::size_t hta_epochs = argc > 3 ? std::atoi(argv[3]) : 8;
  const std::size_t wta_epochs = argc > 4 ? std::atoi(argv[4]) : 10;

  const auto tokens = SpecialTokens::defaults();
  sftest::TempDir tmp("c7");
  const auto general_path = tmp.path() / "general.jsonl";
  write_file(general_path, sftest::make_general_qg_jsonl(150, 600));
  const auto external = load_external_corpus(general_path, ExternalFormat::Commonsense);
  const auto [ext_train, ext_val] = detail::split_external(external, 0.1, 601);

  const SkillDataset corpus = sftest::make_skill_grammar_corpus(220, 500);
  SplitSpec split_spec;
  split_spec.seed = 501;
  const auto split = stratified_split(corpus, split_spec);

  BuildOptions hta_opts;
  hta_opts.kind = FormatKind::HTA;
  hta_opts.max_encoder_tokens = 64;
  hta_opts.max_decoder_tokens = 96;
  BuildOptions wta_opts;
  wta_opts.kind = FormatKind::WTA;
  wta_opts.max_encoder_tokens = 64;
  wta_opts.max_decoder_tokens = 32;

  const auto hta_train = build_training_set(ext_train, hta_opts).examples;
  const auto hta_val = build_training_set(ext_val, hta_opts).examples;
  const auto wta_val = build_training_set(split.val, wta_opts).examples;
  const auto wta_test = build_training_set(split.test, wta_opts).examples;
  std::printf("hta train=%zu val=%zu; wta val=%zu test=%zu\n", hta_train.size(), hta_val.size(),
              wta_val.size(), wta_test.size());

  std::set<std::string> vocab_set;
  for (const auto* set : {&hta_train, &hta_val, &wta_val, &wta_test}) {
    for (const auto& ex : *set) {
      for (const auto& t : whitespace_tokens(ex.encoder_text)) vocab_set.insert(t);
      for (const auto& t : whitespace_tokens(ex.decoder_text)) vocab_set.insert(t);
    }
  }
  // full WTA train vocabulary too (subsamples vary per seed)
  for (const auto& ex : build_training_set(split.train, wta_opts).examples) {
    for (const auto& t : whitespace_tokens(ex.encoder_text)) vocab_set.insert(t);
    for (const auto& t : whitespace_tokens(ex.decoder_text)) vocab_set.insert(t);
  }
  for (const auto& t : tokens.all()) vocab_set.insert(t);
  const std::vector<std::string> vocab(vocab_set.begin(), vocab_set.end());
  std::printf("vocab=%zu\n", vocab.size());

  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const SkillDataset few =
        subsample_few_shot(split.train, FewShotAmount::ratio(0.1), rng::derive_seed(seed, 50));
    const auto wta_train = build_training_set(few, wta_opts).examples;

    TinyBackendConfig bc;
    bc.dim = dim;
    bc.ffn_dim = 2 * dim;
    bc.max_len = 96;
    bc.seed = rng::derive_seed(seed, 51);

    TrainConfig hta_tc;
    hta_tc.learning_rate = lr;
    hta_tc.max_epochs = hta_epochs;
    hta_tc.patience = 3;
    hta_tc.seed = rng::derive_seed(seed, 52);
    TrainConfig wta_tc = hta_tc;
    wta_tc.max_epochs = wta_epochs;
    wta_tc.seed = rng::derive_seed(seed, 53);

    TinyBackend staged(vocab, bc);
    train_stage(staged, hta_train, hta_val, hta_tc);
    staged.reset_optimizer();
    train_stage(staged, wta_train, wta_val, wta_tc);
    const double staged_loss =
        detail::evaluate_loss(staged, detail::tokenize_examples(staged, wta_test), 8);

    TinyBackend fresh(vocab, bc);
    train_stage(fresh, wta_train, wta_val, wta_tc);
    const double fresh_loss =
        detail::evaluate_loss(fresh, detail::tokenize_examples(fresh, wta_test), 8);

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    wins += staged_loss <= fresh_loss ? 1 : 0;
    std::printf("seed %llu: HTA_WTA=%.4f T5_WTA=%.4f %s [%.1fs]\n",
                static_cast<unsigned long long>(seed), staged_loss, fresh_loss,
                staged_loss <= fresh_loss ? "win" : "LOSS", secs);
  }
  std::printf("wins: %d/5\n", wins);
  return 0;
}
