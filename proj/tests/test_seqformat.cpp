#include <doctest.h>

#include <algorithm>

#include "skillforge/seqformat.hpp"
#include "support/testutil.hpp"

using namespace skillforge;

namespace {

std::vector<std::pair<std::string, std::string>> random_pairs(rng::Engine& eng,
                                                              std::size_t max_pairs = 5) {
  const std::size_t n = 1 + rng::uniform_below(eng, max_pairs);
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.emplace_back(sftest::random_text(eng, 1, 6), sftest::random_text(eng, 1, 4));
  }
  return out;
}

}  // namespace

TEST_CASE("default special tokens validate; collisions are rejected") {
  SpecialTokens tokens = SpecialTokens::defaults();
  CHECK_NOTHROW(tokens.validate());
  SUBCASE("duplicate") {
    tokens.pair_sep = tokens.qa_sep;
    CHECK_THROWS_AS(tokens.validate(), ConfigError);
  }
  SUBCASE("substring containment") {
    tokens.pair_sep = "<a";
    CHECK_THROWS_AS(tokens.validate(), ConfigError);
  }
}

TEST_CASE("render_input formats") {
  const auto tokens = SpecialTokens::defaults();
  CHECK(render_input("The fox ran.", FormatKind::WTA, Skill::FL, tokens) ==
        "<FL> The fox ran. </s>");
  CHECK(render_input("The fox ran.", FormatKind::HTA, std::nullopt, tokens) ==
        "The fox ran. </s>");
  CHECK(render_input("The fox ran.", FormatKind::OneStep, std::nullopt, tokens) ==
        "The fox ran. </s>");
  CHECK_THROWS_AS(render_input("x", FormatKind::WTA, std::nullopt, tokens), DataError);
  CHECK_THROWS_AS(render_input("x", FormatKind::HTA, Skill::FL, tokens), DataError);
  CHECK_THROWS_WITH_AS(render_input("has a literal <as> inside", FormatKind::HTA, std::nullopt,
                                    tokens),
                       doctest::Contains("RESERVED_TOKEN_IN_TEXT"), DataError);
}

TEST_CASE("escaping mode replaces reserved tokens with safe lookalikes") {
  const auto tokens = SpecialTokens::defaults();
  const auto out = render_input("bad <as> token", FormatKind::HTA, std::nullopt, tokens,
                                ReservedTokenPolicy::Escape);
  CHECK(out.find("<as>") == std::string::npos);
  CHECK(out.find("‹as›") != std::string::npos);
}

TEST_CASE("render_target formats and preconditions") {
  const auto tokens = SpecialTokens::defaults();
  std::vector<std::pair<std::string, std::string>> one = {{"Who ran?", "The fox"}};
  CHECK(render_target(std::span<const std::pair<std::string, std::string>>(one), FormatKind::WTA,
                      tokens) == "Who ran? <as> The fox </s>");
  std::vector<std::pair<std::string, std::string>> two = {{"Q1", "A1"}, {"Q2", "A2"}};
  CHECK(render_target(std::span<const std::pair<std::string, std::string>>(two), FormatKind::HTA,
                      tokens) == "Q1 <as> A1 <sp> Q2 <as> A2 </s>");
  std::vector<std::pair<std::string, std::string>> none;
  CHECK_THROWS_WITH_AS(
      render_target(std::span<const std::pair<std::string, std::string>>(none), FormatKind::HTA,
                    tokens),
      doctest::Contains("EMPTY_PAIRS"), DataError);
  CHECK_THROWS_AS(render_target(std::span<const std::pair<std::string, std::string>>(two),
                                FormatKind::WTA, tokens),
                  DataError);
}

TEST_CASE("parse_generation on well-formed and degenerate inputs") {
  const auto tokens = SpecialTokens::defaults();
  SUBCASE("two pairs") {
    const auto g = parse_generation("Q1 <as> A1 <sp> Q2 <as> A2 </s>", tokens);
    CHECK(g.well_formed);
    REQUIRE(g.pairs.size() == 2);
    CHECK(g.pairs[0] == std::pair<std::string, std::string>{"Q1", "A1"});
    CHECK(g.pairs[1] == std::pair<std::string, std::string>{"Q2", "A2"});
  }
  SUBCASE("empty input") {
    const auto g = parse_generation("", tokens);
    CHECK(!g.well_formed);
    CHECK(g.pairs.empty());
    REQUIRE(g.diagnostics.size() == 2);
    CHECK(std::count(g.diagnostics.begin(), g.diagnostics.end(), ParseIssue::MissingEos) == 1);
    CHECK(std::count(g.diagnostics.begin(), g.diagnostics.end(), ParseIssue::EmptyPair) == 1);
  }
  SUBCASE("missing qa separator still recovers the question") {
    const auto g = parse_generation("just a question </s>", tokens);
    CHECK(!g.well_formed);
    REQUIRE(g.pairs.size() == 1);
    CHECK(g.pairs[0].first == "just a question");
    CHECK(g.pairs[0].second.empty());
    CHECK(std::count(g.diagnostics.begin(), g.diagnostics.end(), ParseIssue::MissingQaSep) == 1);
  }
  SUBCASE("trailing separator") {
    const auto g = parse_generation("Q <as> A <sp> </s>", tokens);
    CHECK(!g.well_formed);
    CHECK(g.pairs.size() == 1);
    CHECK(std::count(g.diagnostics.begin(), g.diagnostics.end(), ParseIssue::TrailingSeparator) ==
          1);
  }
  SUBCASE("empty field") {
    const auto g = parse_generation("Q <as> </s>", tokens);
    CHECK(!g.well_formed);
    CHECK(std::count(g.diagnostics.begin(), g.diagnostics.end(), ParseIssue::EmptyField) == 1);
  }
  SUBCASE("never throws on junk") {
    CHECK_NOTHROW(parse_generation("<sp> <as> <sp> </s> </s>", tokens));
    CHECK_NOTHROW(parse_generation("<FL> <FL> <FL>", tokens));
  }
}

TEST_CASE("render/parse round-trip identity on 1000 random pair lists") {
  const auto tokens = SpecialTokens::defaults();
  rng::Engine eng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto pairs = random_pairs(eng);
    const auto text = render_target(
        std::span<const std::pair<std::string, std::string>>(pairs), FormatKind::HTA, tokens);
    const auto parsed = parse_generation(text, tokens);
    REQUIRE(parsed.well_formed);
    REQUIRE(parsed.pairs == pairs);
  }
}

TEST_CASE("WTA encoder is the HTA encoder plus a leading control token") {
  const auto tokens = SpecialTokens::defaults();
  rng::Engine eng(8);
  for (int i = 0; i < 50; ++i) {
    const std::string story = sftest::random_text(eng, 2, 40);
    const Skill skill = kAllSkills[rng::uniform_below(eng, kAllSkills.size())];
    const auto hta = render_input(story, FormatKind::HTA, std::nullopt, tokens);
    const auto wta = render_input(story, FormatKind::WTA, skill, tokens);
    CHECK(wta == tokens.skill_tokens.at(skill) + " " + hta);
  }
}

TEST_CASE("build_training_set: WTA yields one example per pair") {
  const SkillDataset ds = sftest::random_skill_dataset(3, 12);
  BuildOptions opts;
  opts.kind = FormatKind::WTA;
  const auto built = build_training_set(ds, opts);
  CHECK(built.examples.size() == ds.pair_count());
  const auto tokens = SpecialTokens::defaults();
  for (const auto& ex : built.examples) {
    CHECK(ex.kind == FormatKind::WTA);
    CHECK(ex.pair_ids.size() == 1);
    bool starts_with_skill = false;
    for (const Skill s : kAllSkills) {
      if (ex.encoder_text.rfind(tokens.skill_tokens.at(s) + " ", 0) == 0) starts_with_skill = true;
    }
    CHECK(starts_with_skill);
    const auto parsed = parse_generation(ex.decoder_text, tokens);
    CHECK(parsed.well_formed);
    CHECK(parsed.pairs.size() == 1);
  }
}

TEST_CASE("build_training_set: target exactly at the budget is unmodified") {
  SkillDataset ds;
  Story s;
  s.id = "s1";
  s.text = "tiny story";
  QAPair p;
  p.id = "p1";
  p.question = "q1 q2";
  p.answer = "a1";
  p.skill = Skill::I;
  p.qtype = QuestionType::Inferential;
  s.pairs.push_back(p);
  ds.stories.push_back(s);
  // target = "q1 q2 <as> a1 </s>" = 5 whitespace tokens
  BuildOptions opts;
  opts.kind = FormatKind::HTA;
  opts.max_decoder_tokens = 5;
  const auto built = build_training_set(ds, opts);
  REQUIRE(built.examples.size() == 1);
  CHECK(built.examples[0].decoder_text == "q1 q2 <as> a1 </s>");
  CHECK(built.warnings.empty());
}

TEST_CASE("build_training_set: overflowing HTA targets drop whole trailing pairs") {
  SkillDataset ds;
  Story s;
  s.id = "s1";
  s.text = "a story with words";
  for (int i = 0; i < 15; ++i) {
    QAPair p;
    p.id = "p" + std::to_string(i);
    p.question = "ask" + std::to_string(i) + " now";
    p.answer = "ans" + std::to_string(i);
    p.skill = Skill::S;
    p.qtype = QuestionType::Literal;
    s.pairs.push_back(p);
  }
  ds.stories.push_back(s);
  // Each pair renders as "askN now <as> ansN" = 4 tokens, separated by <sp>
  // (1 token), final </s> 1 token: total(k) = 4k + (k-1) + 1 = 5k.
  BuildOptions opts;
  opts.kind = FormatKind::HTA;
  opts.max_decoder_tokens = 45; // forces k = 9
  const auto built = build_training_set(ds, opts);
  REQUIRE(built.examples.size() == 1);
  const auto& ex = built.examples[0];
  CHECK(ex.pair_ids.size() == 9);
  for (int i = 0; i < 9; ++i) CHECK(ex.pair_ids[static_cast<std::size_t>(i)] == "p" + std::to_string(i));
  // re-render oracle: kept pairs re-render to exactly the emitted target
  std::vector<QAPair> kept(s.pairs.begin(), s.pairs.begin() + 9);
  CHECK(render_target(kept, FormatKind::HTA) == ex.decoder_text);
  CHECK(whitespace_token_count(ex.decoder_text) == 45);
  CHECK(!built.warnings.empty());
}

TEST_CASE("build_training_set: a single oversized pair is dropped with a warning") {
  SkillDataset ds;
  Story s;
  s.id = "s1";
  s.text = "story";
  QAPair p;
  p.id = "p1";
  p.question = "one two three four five six seven";
  p.answer = "eight nine";
  p.skill = Skill::V;
  p.qtype = QuestionType::Literal;
  s.pairs.push_back(p);
  ds.stories.push_back(s);
  BuildOptions opts;
  opts.kind = FormatKind::WTA;
  opts.max_decoder_tokens = 5;
  const auto built = build_training_set(ds, opts);
  CHECK(built.examples.empty());
  REQUIRE(built.warnings.size() == 1);
  CHECK(built.warnings[0].find("p1") != std::string::npos);
}

TEST_CASE("budget law holds for every emitted example") {
  const SkillDataset ds = sftest::random_skill_dataset(21, 60);
  for (const FormatKind kind : {FormatKind::HTA, FormatKind::WTA, FormatKind::OneStep}) {
    BuildOptions opts;
    opts.kind = kind;
    opts.max_encoder_tokens = 24;
    opts.max_decoder_tokens = 12;
    const auto built = build_training_set(ds, opts);
    for (const auto& ex : built.examples) {
      CHECK(whitespace_token_count(ex.encoder_text) <= 24);
      CHECK(whitespace_token_count(ex.decoder_text) <= 12);
      CHECK(ex.encoder_text.ends_with("</s>"));
      CHECK(ex.decoder_text.ends_with("</s>"));
    }
  }
}

TEST_CASE("external corpora render HTA but refuse skilled WTA") {
  ExternalQACorpus corpus;
  corpus.format = ExternalFormat::Commonsense;
  Story passage;
  passage.id = "c0";
  passage.text = "some context text";
  QAPair p;
  p.id = "q0";
  p.question = "why ?";
  p.answer = "because";
  passage.pairs.push_back(p);
  corpus.passages.push_back(passage);

  BuildOptions opts;
  opts.kind = FormatKind::HTA;
  CHECK(build_training_set(corpus, opts).examples.size() == 1);
  opts.kind = FormatKind::WTA;
  CHECK_THROWS_AS(build_training_set(corpus, opts), DataError);
}

TEST_CASE("encoded-set jsonl round-trips") {
  sftest::TempDir tmp("seqformat-jsonl");
  const SkillDataset ds = sftest::random_skill_dataset(31, 10);
  BuildOptions opts;
  opts.kind = FormatKind::WTA;
  const auto built = build_training_set(ds, opts);
  const auto path = tmp.path() / "enc.jsonl";
  save_encoded_jsonl(built.examples, path);
  const auto loaded = load_encoded_jsonl(path);
  REQUIRE(loaded.size() == built.examples.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].encoder_text == built.examples[i].encoder_text);
    CHECK(loaded[i].decoder_text == built.examples[i].decoder_text);
    CHECK(loaded[i].kind == built.examples[i].kind);
    CHECK(loaded[i].story_id == built.examples[i].story_id);
    CHECK(loaded[i].pair_ids == built.examples[i].pair_ids);
  }
}

TEST_CASE("reserved tokens in rendered output appear only at structural positions") {
  const auto tokens = SpecialTokens::defaults();
  rng::Engine eng(99);
  for (int i = 0; i < 200; ++i) {
    const auto pairs = random_pairs(eng);
    const auto text = render_target(
        std::span<const std::pair<std::string, std::string>>(pairs), FormatKind::HTA, tokens);
    // scanning oracle: structural tokens split the text back into fields that
    // contain no further structural tokens
    const auto parsed = parse_generation(text, tokens);
    for (const auto& [q, a] : parsed.pairs) {
      for (const auto& tok : tokens.all()) {
        CHECK(q.find(tok) == std::string::npos);
        CHECK(a.find(tok) == std::string::npos);
      }
    }
  }
}
