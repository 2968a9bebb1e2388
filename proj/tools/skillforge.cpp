// skillforge — skill-controlled question-generation pipeline CLI.
//
// Subcommands: prepare, stats, train, generate, evaluate, fewshot,
// export-humaneval, import-humaneval. Exit codes: 0 success, 2 config error,
// 3 data error, 4 training error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "skillforge/experiment.hpp"

namespace sf = skillforge;

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::string> recipe;
};

sf::ExperimentConfig resolve_config(const CommonOpts& opts) {
  if (opts.config_path.empty()) throw sf::ConfigError("--config is required");
  sf::ExperimentConfig cfg = sf::load_experiment_config(opts.config_path);
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.propagate_seed();
  }
  if (opts.output_dir) cfg.output_dir = *opts.output_dir;
  if (opts.recipe) cfg.recipe = sf::parse_recipe_name(*opts.recipe);
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "experiment config JSON");
  cmd->add_option("--seed", opts.seed, "global seed override");
  cmd->add_option("--output-dir", opts.output_dir, "output directory override");
}

std::vector<sf::FewShotAmount> parse_amounts(const std::vector<std::string>& raw) {
  std::vector<sf::FewShotAmount> out;
  for (const auto& a : raw) {
    if (a == "1") {
      out.push_back(sf::FewShotAmount::per_skill(1));
    } else if (a == "all" || a == "1.0") {
      out.push_back(sf::FewShotAmount::ratio(1.0));
    } else {
      std::size_t idx = 0;
      double r = 0.0;
      try {
        r = std::stod(a, &idx);
      } catch (const std::exception&) {
        throw sf::ConfigError("bad few-shot amount: '" + a + "'");
      }
      if (idx != a.size()) throw sf::ConfigError("bad few-shot amount: '" + a + "'");
      if (r > 1.0 && r == std::floor(r)) {
        out.push_back(sf::FewShotAmount::per_skill(static_cast<std::size_t>(r)));
      } else {
        out.push_back(sf::FewShotAmount::ratio(r));
      }
    }
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"skillforge: two-stage skill-controlled question generation pipeline"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "split corpora, render encoded sets, write stats");
  CommonOpts prepare_opts;
  add_common(prepare, prepare_opts);

  // stats
  auto* stats = app.add_subcommand("stats", "corpus statistics table (CSV)");
  std::string stats_input, stats_out;
  stats->add_option("--input", stats_input, "skill dataset JSONL")->required();
  stats->add_option("--out", stats_out, "output CSV (default: stdout)");

  // train
  auto* train = app.add_subcommand("train", "run the configured staged recipe");
  CommonOpts train_opts;
  add_common(train, train_opts);
  train->add_option("--recipe", train_opts.recipe,
                    "recipe override (HTA_WTA, T5_WTA, ONE_STEP, WTA_UNSKILLED)");

  // generate
  auto* generate = app.add_subcommand("generate", "sample questions from a checkpoint");
  CommonOpts gen_opts;
  add_common(generate, gen_opts);
  std::string gen_checkpoint, gen_stories, gen_out;
  std::vector<std::string> gen_skills;
  double gen_top_p = 0.9;
  std::uint64_t gen_seed = 13;
  std::size_t gen_max_new = 128;
  bool gen_all_skills = false;
  generate->add_option("--checkpoint", gen_checkpoint, "train directory (default: <output_dir>/train)");
  generate->add_option("--stories", gen_stories, "stories JSONL (skill-dataset schema)")->required();
  generate->add_option("--skill", gen_skills, "skill code, repeatable (required for WTA checkpoints)");
  generate->add_flag("--all-skills", gen_all_skills, "request every skill per story");
  generate->add_option("--top-p", gen_top_p, "nucleus sampling threshold")->capture_default_str();
  generate->add_option("--sampler-seed", gen_seed, "sampler seed")->capture_default_str();
  generate->add_option("--max-new-tokens", gen_max_new, "generation budget")->capture_default_str();
  generate->add_option("--out", gen_out, "output generations JSONL")->required();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "score generations against references");
  std::string eval_generations, eval_references, eval_judgments, eval_out, eval_label = "model";
  std::string eval_scorer = "overlap-f1";
  evaluate->add_option("--generations", eval_generations, "generations JSONL")->required();
  evaluate->add_option("--references", eval_references, "reference skill dataset JSONL")->required();
  evaluate->add_option("--judgments", eval_judgments, "skill judgments JSONL (optional)");
  evaluate->add_option("--semantic-scorer", eval_scorer, "semantic scorer name")->capture_default_str();
  evaluate->add_option("--model-label", eval_label, "label for the CSV row")->capture_default_str();
  evaluate->add_option("--out", eval_out, "output directory")->required();

  // fewshot
  auto* fewshot = app.add_subcommand("fewshot", "few-shot data-efficiency sweep");
  CommonOpts few_opts;
  add_common(fewshot, few_opts);
  std::vector<std::string> few_amounts = {"1", "0.1", "0.3", "0.5", "0.75", "1.0"};
  std::vector<std::string> few_recipes = {"HTA_WTA", "T5_WTA"};
  fewshot->add_option("--amounts", few_amounts,
                      "amounts: '1' = one pair per skill, otherwise a ratio in (0,1]")
      ->capture_default_str();
  fewshot->add_option("--recipes", few_recipes, "recipes to sweep")->capture_default_str();

  // export-humaneval
  auto* hexport = app.add_subcommand("export-humaneval", "build a blinded rater packet");
  std::vector<std::string> he_generations, he_labels;
  std::string he_out;
  std::size_t he_size = 110;
  std::uint64_t he_seed = 13;
  hexport->add_option("--generations", he_generations, "generations JSONL, repeatable")->required();
  hexport->add_option("--model-label", he_labels, "label per --generations, repeatable")->required();
  hexport->add_option("--size", he_size, "sample size")->capture_default_str();
  hexport->add_option("--sample-seed", he_seed, "shuffle seed")->capture_default_str();
  hexport->add_option("--out", he_out, "output directory")->required();

  // import-humaneval
  auto* himport = app.add_subcommand("import-humaneval", "aggregate filled rater packets");
  std::string hi_packet, hi_key, hi_out;
  himport->add_option("--packet", hi_packet, "filled packet CSV")->required();
  himport->add_option("--key", hi_key, "sealed key CSV")->required();
  himport->add_option("--out", hi_out, "output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (prepare->parsed()) {
    const auto cfg = resolve_config(prepare_opts);
    const auto result = sf::cmd_prepare(cfg);
    for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "prepared " << result.dir.string() << " (train " << result.split.train.stories.size()
              << " / val " << result.split.val.stories.size() << " / test "
              << result.split.test.stories.size() << " stories)\n";
    return 0;
  }

  if (stats->parsed()) {
    const auto csv = sf::stats_to_csv(sf::compute_stats(sf::load_skill_dataset(stats_input)));
    if (stats_out.empty()) std::cout << csv;
    else sf::write_file(stats_out, csv);
    return 0;
  }

  if (train->parsed()) {
    const auto cfg = resolve_config(train_opts);
    const auto outcome = sf::cmd_train(cfg);
    if (outcome.resumed_stages > 0) {
      std::cout << "resumed " << outcome.resumed_stages << " completed stage(s)\n";
    }
    for (std::size_t i = 0; i < outcome.reports.size(); ++i) {
      const auto& r = outcome.reports[i];
      if (r.stopped_epoch == 0) continue; // skipped
      std::cout << "stage " << (i + 1) << ": stopped epoch " << r.stopped_epoch
                << ", best epoch " << r.best_epoch << ", val loss "
                << r.val_losses[r.best_epoch - 1] << "\n";
    }
    std::cout << "final checkpoint: " << outcome.final_weights.string() << "\n";
    return 0;
  }

  if (generate->parsed()) {
    const auto cfg = resolve_config(gen_opts);
    std::filesystem::path checkpoint =
        gen_checkpoint.empty() ? cfg.output_dir / "train" : std::filesystem::path(gen_checkpoint);
    std::vector<sf::Skill> skills;
    if (gen_all_skills) {
      skills.assign(sf::kAllSkills.begin(), sf::kAllSkills.end());
    } else {
      for (const auto& code : gen_skills) skills.push_back(sf::parse_skill(code));
    }
    sf::SamplerConfig sampler = cfg.sampler;
    sampler.top_p = gen_top_p;
    sampler.seed = gen_seed;
    sampler.max_new_tokens = gen_max_new;
    const auto stories = sf::load_skill_dataset(gen_stories);
    const auto outcome = sf::cmd_generate(checkpoint, stories, skills, sampler, gen_out);
    std::size_t well_formed = 0;
    for (const auto& r : outcome.records) well_formed += r.parsed.well_formed ? 1 : 0;
    std::cout << "wrote " << outcome.records.size() << " generations (" << well_formed
              << " well-formed) to " << gen_out << "\n";
    return 0;
  }

  if (evaluate->parsed()) {
    const auto generations = sf::load_generations_jsonl(eval_generations);
    const auto references = sf::load_skill_dataset(eval_references);
    const auto scorer = sf::make_semantic_scorer(eval_scorer);
    if (!scorer) {
      std::cerr << "warning: semantic scorer '" << eval_scorer
                << "' unavailable; semantic score omitted\n";
    }
    auto report = sf::evaluate_generations(generations, references, scorer.get());
    if (!eval_judgments.empty()) {
      report.skill_control = sf::skill_control_scores(sf::load_judgments_jsonl(eval_judgments));
    }
    sf::write_evaluation_outputs(report, eval_out, eval_label);
    for (const auto& f : report.join_failures) std::cerr << "warning: " << f << "\n";
    std::cout << sf::metric_report_to_csv(report.corpus, eval_label);
    return 0;
  }

  if (fewshot->parsed()) {
    const auto cfg = resolve_config(few_opts);
    std::vector<sf::RecipeName> recipes;
    for (const auto& r : few_recipes) recipes.push_back(sf::parse_recipe_name(r));
    const auto result = sf::cmd_fewshot(cfg, parse_amounts(few_amounts), recipes);
    for (const auto& row : result.rows) {
      if (!row.error.empty()) {
        std::cerr << "warning: point (" << row.amount.label() << ", "
                  << sf::recipe_name_str(row.recipe) << ") failed: " << row.error << "\n";
      }
    }
    std::cout << "wrote " << result.csv_file.string() << "\n";
    return 0;
  }

  if (hexport->parsed()) {
    if (he_generations.size() != he_labels.size()) {
      throw sf::ConfigError("--generations and --model-label must be given the same number of times");
    }
    std::vector<sf::HumanEvalSample> pool;
    for (std::size_t i = 0; i < he_generations.size(); ++i) {
      for (const auto& rec : sf::load_generations_jsonl(he_generations[i])) {
        sf::HumanEvalSample s;
        s.model = he_labels[i];
        s.story = rec.encoder_text;
        s.question = rec.parsed.pairs.empty() ? rec.raw : rec.parsed.pairs.front().first;
        pool.push_back(std::move(s));
      }
    }
    const auto packet = sf::export_human_eval_packet(pool, he_size, he_seed);
    for (const auto& w : packet.warnings) std::cerr << "warning: " << w << "\n";
    sf::write_file(std::filesystem::path(he_out) / "packet.csv", packet.packet_csv);
    sf::write_file(std::filesystem::path(he_out) / "key.csv", packet.key_csv);
    std::cout << "exported " << packet.exported << " items to " << he_out << "\n";
    return 0;
  }

  if (himport->parsed()) {
    const auto result =
        sf::import_human_eval(sf::read_file(hi_packet), sf::read_file(hi_key));
    for (const auto& e : result.row_errors) std::cerr << "error: " << e << "\n";
    std::string csv = sf::csv::row({"model", "answerability", "fluency", "grammaticality", "n"});
    const auto fmt = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.2f", v);
      return std::string(buf);
    };
    for (const auto& [model, means] : result.per_model) {
      csv += sf::csv::row({model, fmt(means.answerability), fmt(means.fluency),
                           fmt(means.grammaticality), std::to_string(means.n)});
    }
    if (hi_out.empty()) std::cout << csv;
    else sf::write_file(hi_out, csv);
    return result.row_errors.empty() ? 0 : 3;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const sf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const sf::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const sf::TrainError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
