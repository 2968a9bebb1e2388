#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillforge/alignment.hpp"
#include "skillforge/backend.hpp"
#include "skillforge/common.hpp"
#include "skillforge/corpus.hpp"
#include "skillforge/decoding.hpp"
#include "skillforge/metrics.hpp"
#include "skillforge/seqformat.hpp"
#include "skillforge/tiny_backend.hpp"
#include "skillforge/train.hpp"

namespace skillforge {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct BackendSpec {
  std::string name = "tiny";
  std::size_t dim = 48;
  std::size_t ffn_dim = 96;
  std::size_t max_len = 576;
};

struct ExperimentConfig {
  RecipeName recipe = RecipeName::T5Wta;
  std::filesystem::path skill_corpus;
  std::optional<std::filesystem::path> extractive_corpus;
  std::optional<std::filesystem::path> commonsense_corpus;
  SplitSpec split;
  TrainConfig train;
  SamplerConfig sampler;
  std::string semantic_scorer = "overlap-f1";
  BackendSpec backend;
  std::filesystem::path output_dir;
  std::uint64_t seed = 13;

  // The run seed drives every stochastic component.
  void propagate_seed() {
    split.seed = rng::derive_seed(seed, 1);
    train.seed = rng::derive_seed(seed, 2);
    sampler.seed = rng::derive_seed(seed, 3);
  }

  void validate() const {
    split.validate();
    train.validate();
    sampler.validate();
    if (skill_corpus.empty()) throw ConfigError("corpora.skill is required");
    if (output_dir.empty()) throw ConfigError("output_dir is required");
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown config key '" + where + key + "'");
    }
  }
}

}  // namespace detail

// Parses and validates the declarative config document (schema published in
// schema/experiment-config.schema.json).
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    detail::reject_unknown_keys(j, {"recipe", "corpora", "split", "train", "sampler", "metrics",
                                    "backend", "output_dir", "seed"},
                                "");
    if (j.contains("recipe")) cfg.recipe = parse_recipe_name(j.at("recipe").get<std::string>());
    if (!j.contains("corpora")) throw ConfigError("missing 'corpora' section");
    const auto& corpora = j.at("corpora");
    detail::reject_unknown_keys(corpora, {"skill", "extractive", "commonsense"}, "corpora.");
    cfg.skill_corpus = corpora.at("skill").get<std::string>();
    if (corpora.contains("extractive"))
      cfg.extractive_corpus = std::filesystem::path(corpora.at("extractive").get<std::string>());
    if (corpora.contains("commonsense"))
      cfg.commonsense_corpus = std::filesystem::path(corpora.at("commonsense").get<std::string>());
    if (j.contains("split")) {
      const auto& s = j.at("split");
      detail::reject_unknown_keys(s, {"val_fraction", "test_fraction"}, "split.");
      if (s.contains("val_fraction")) cfg.split.val_fraction = s.at("val_fraction").get<double>();
      if (s.contains("test_fraction"))
        cfg.split.test_fraction = s.at("test_fraction").get<double>();
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown_keys(t,
                                  {"optimizer", "learning_rate", "batch_size", "max_epochs",
                                   "patience", "max_encoder_tokens", "max_decoder_tokens"},
                                  "train.");
      if (t.contains("optimizer")) cfg.train.optimizer = t.at("optimizer").get<std::string>();
      if (t.contains("learning_rate"))
        cfg.train.learning_rate = t.at("learning_rate").get<double>();
      if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<std::size_t>();
      if (t.contains("max_epochs")) cfg.train.max_epochs = t.at("max_epochs").get<std::size_t>();
      if (t.contains("patience")) cfg.train.patience = t.at("patience").get<std::size_t>();
      if (t.contains("max_encoder_tokens"))
        cfg.train.max_encoder_tokens = t.at("max_encoder_tokens").get<std::size_t>();
      if (t.contains("max_decoder_tokens"))
        cfg.train.max_decoder_tokens = t.at("max_decoder_tokens").get<std::size_t>();
    }
    if (j.contains("sampler")) {
      const auto& s = j.at("sampler");
      detail::reject_unknown_keys(s, {"top_p", "max_new_tokens"}, "sampler.");
      if (s.contains("top_p")) cfg.sampler.top_p = s.at("top_p").get<double>();
      if (s.contains("max_new_tokens"))
        cfg.sampler.max_new_tokens = s.at("max_new_tokens").get<std::size_t>();
    }
    if (j.contains("metrics")) {
      const auto& m = j.at("metrics");
      detail::reject_unknown_keys(m, {"semantic_scorer"}, "metrics.");
      if (m.contains("semantic_scorer"))
        cfg.semantic_scorer = m.at("semantic_scorer").get<std::string>();
    }
    if (j.contains("backend")) {
      const auto& b = j.at("backend");
      detail::reject_unknown_keys(b, {"name", "dim", "ffn_dim", "max_len"}, "backend.");
      if (b.contains("name")) cfg.backend.name = b.at("name").get<std::string>();
      if (b.contains("dim")) cfg.backend.dim = b.at("dim").get<std::size_t>();
      if (b.contains("ffn_dim")) cfg.backend.ffn_dim = b.at("ffn_dim").get<std::size_t>();
      if (b.contains("max_len")) cfg.backend.max_len = b.at("max_len").get<std::size_t>();
    }
    if (!j.contains("output_dir")) throw ConfigError("missing 'output_dir'");
    cfg.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  cfg.propagate_seed();
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": not valid JSON: " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_experiment_config(j);
}

// ---------------------------------------------------------------------------
// Backend registry (SKILLFORGE_BACKEND selects the plug-in)
// ---------------------------------------------------------------------------

inline std::string resolve_backend_name(const BackendSpec& spec) {
  if (const char* env = std::getenv("SKILLFORGE_BACKEND"); env != nullptr && *env != '\0') {
    return env;
  }
  return spec.name;
}

inline std::unique_ptr<Seq2SeqBackend> make_backend(const BackendSpec& spec,
                                                    std::vector<std::string> vocab,
                                                    std::uint64_t seed) {
  const std::string name = resolve_backend_name(spec);
  if (name == "tiny") {
    TinyBackendConfig cfg;
    cfg.dim = spec.dim;
    cfg.ffn_dim = spec.ffn_dim;
    cfg.max_len = spec.max_len;
    cfg.seed = seed;
    return std::make_unique<TinyBackend>(std::move(vocab), cfg);
  }
  throw ConfigError("unknown backend '" + name + "' (available: tiny)");
}

inline std::unique_ptr<Seq2SeqBackend> load_backend(const std::string& name,
                                                    const std::filesystem::path& weights) {
  if (name == "tiny") return TinyBackend::load(weights);
  throw ConfigError("unknown backend '" + name + "' (available: tiny)");
}

inline std::unique_ptr<SemanticScorer> make_semantic_scorer(const std::string& name) {
  if (name == "overlap-f1") return std::make_unique<OverlapF1Scorer>();
  return nullptr; // unavailable scorers are reported, never silently proxied
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string path; // relative to the manifest directory
  std::uint64_t bytes = 0;
  std::string hash;
};

struct Manifest {
  std::string algo = "fnv1a64";
  std::vector<ManifestEntry> entries;
};

inline Manifest build_manifest(const std::filesystem::path& root,
                               std::vector<std::string> rel_paths) {
  std::sort(rel_paths.begin(), rel_paths.end());
  Manifest m;
  for (const auto& rel : rel_paths) {
    const std::string content = read_file(root / rel);
    m.entries.push_back({rel, content.size(), fnv1a64_hex(content)});
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& root, const Manifest& m,
                           const std::string& filename = "manifest.json") {
  nlohmann::ordered_json j;
  j["algo"] = m.algo;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    nlohmann::ordered_json ej;
    ej["path"] = e.path;
    ej["bytes"] = e.bytes;
    ej["hash"] = e.hash;
    arr.push_back(std::move(ej));
  }
  j["artifacts"] = std::move(arr);
  write_file(root / filename, j.dump(2) + "\n");
}

inline Manifest load_manifest(const std::filesystem::path& file) {
  Manifest m;
  const auto j = nlohmann::json::parse(read_file(file));
  m.algo = j.at("algo").get<std::string>();
  for (const auto& e : j.at("artifacts")) {
    m.entries.push_back({e.at("path").get<std::string>(), e.at("bytes").get<std::uint64_t>(),
                         e.at("hash").get<std::string>()});
  }
  return m;
}

inline std::vector<std::string> verify_manifest(const std::filesystem::path& root,
                                                const Manifest& m) {
  std::vector<std::string> problems;
  for (const auto& e : m.entries) {
    const auto p = root / e.path;
    if (!std::filesystem::exists(p)) {
      problems.push_back(e.path + ": missing");
      continue;
    }
    const std::string content = read_file(p);
    if (fnv1a64_hex(content) != e.hash) problems.push_back(e.path + ": hash mismatch");
  }
  return problems;
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PrepareResult {
  std::filesystem::path dir;
  SplitResult split;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::pair<ExternalQACorpus, ExternalQACorpus> split_external(const ExternalQACorpus& corpus,
                                                                    double val_fraction,
                                                                    std::uint64_t seed) {
  std::vector<std::size_t> order(corpus.passages.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Engine eng(seed);
  rng::shuffle(order, eng);
  const std::size_t n_val = std::max<std::size_t>(
      corpus.passages.size() > 1 ? 1 : 0,
      static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(order.size()))));
  std::set<std::size_t> val_set(order.begin(),
                                order.begin() + static_cast<std::ptrdiff_t>(
                                                    std::min(n_val, order.size())));
  ExternalQACorpus train_part, val_part;
  train_part.format = val_part.format = corpus.format;
  train_part.provenance = val_part.provenance = corpus.provenance;
  for (std::size_t i = 0; i < corpus.passages.size(); ++i) {
    (val_set.contains(i) ? val_part : train_part).passages.push_back(corpus.passages[i]);
  }
  return {train_part, val_part};
}

inline BuildOptions make_build_options(const ExperimentConfig& cfg, FormatKind kind,
                                       bool include_skill_token) {
  BuildOptions opts;
  opts.kind = kind;
  opts.max_encoder_tokens = cfg.train.max_encoder_tokens;
  opts.max_decoder_tokens = cfg.train.max_decoder_tokens;
  opts.include_skill_token = include_skill_token;
  return opts;
}

}  // namespace detail

inline PrepareResult cmd_prepare(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto dir = cfg.output_dir / "prepare";
  PrepareResult result;
  result.dir = dir;

  const SkillDataset dataset = load_skill_dataset(cfg.skill_corpus);
  result.split = stratified_split(dataset, cfg.split);
  for (const auto& w : result.split.warnings) result.warnings.push_back(w);

  std::vector<std::string> files;
  const auto emit = [&](const std::string& rel, const std::string& content) {
    write_file(dir / rel, content);
    files.push_back(rel);
  };

  emit("splits/train.jsonl", skill_dataset_to_jsonl(result.split.train));
  emit("splits/val.jsonl", skill_dataset_to_jsonl(result.split.val));
  emit("splits/test.jsonl", skill_dataset_to_jsonl(result.split.test));
  emit("stats.csv", stats_to_csv(compute_stats(dataset)));

  const auto emit_encoded = [&](const std::string& stem, const SkillDataset& part,
                                FormatKind kind, bool with_skill) {
    auto built = build_training_set(part, detail::make_build_options(cfg, kind, with_skill));
    for (auto& w : built.warnings) result.warnings.push_back(std::move(w));
    emit("encoded/" + stem + ".jsonl", encoded_to_jsonl(built.examples));
  };
  const std::map<std::string, const SkillDataset*> parts = {
      {"train", &result.split.train}, {"val", &result.split.val}, {"test", &result.split.test}};
  for (const auto& [split_name, part] : parts) {
    emit_encoded("skill_hta_" + split_name, *part, FormatKind::HTA, false);
    emit_encoded("skill_wta_" + split_name, *part, FormatKind::WTA, true);
    emit_encoded("skill_wta_unskilled_" + split_name, *part, FormatKind::WTA, false);
    emit_encoded("skill_one_step_" + split_name, *part, FormatKind::OneStep, false);
  }

  const auto emit_external = [&](const std::filesystem::path& path, ExternalFormat format,
                                 const std::string& tag) {
    const auto corpus = load_external_corpus(path, format);
    const auto [train_part, val_part] =
        detail::split_external(corpus, cfg.split.val_fraction, rng::derive_seed(cfg.split.seed, 7));
    for (const auto& [part_name, part] :
         std::initializer_list<std::pair<const char*, const ExternalQACorpus*>>{
             {"train", &train_part}, {"val", &val_part}}) {
      auto built =
          build_training_set(*part, detail::make_build_options(cfg, FormatKind::HTA, false));
      for (auto& w : built.warnings) result.warnings.push_back(std::move(w));
      emit("encoded/external_" + tag + "_hta_" + part_name + ".jsonl",
           encoded_to_jsonl(built.examples));
    }
  };
  if (cfg.extractive_corpus)
    emit_external(*cfg.extractive_corpus, ExternalFormat::Extractive, "extractive");
  if (cfg.commonsense_corpus)
    emit_external(*cfg.commonsense_corpus, ExternalFormat::Commonsense, "commonsense");

  write_manifest(dir, build_manifest(dir, files));
  return result;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<EncodedExample> load_encoded_if_exists(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return {};
  return load_encoded_jsonl(path);
}

inline std::vector<EncodedExample> concat(std::vector<EncodedExample> a,
                                          std::vector<EncodedExample> b) {
  a.insert(a.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
  return a;
}

inline std::vector<std::string> external_tags(const ExperimentConfig& cfg) {
  std::vector<std::string> tags;
  if (cfg.extractive_corpus) tags.push_back("extractive");
  if (cfg.commonsense_corpus) tags.push_back("commonsense");
  return tags;
}

inline std::vector<EncodedExample> load_external_split(const ExperimentConfig& cfg,
                                                       const std::filesystem::path& enc_dir,
                                                       const std::string& part) {
  std::vector<EncodedExample> out;
  for (const auto& tag : external_tags(cfg)) {
    out = concat(std::move(out),
                 load_encoded_if_exists(enc_dir / ("external_" + tag + "_hta_" + part + ".jsonl")));
  }
  return out;
}

// Sorted union of whitespace tokens over every stage text, plus the special
// tokens; deterministic regardless of corpus order, so interrupted runs
// rebuild the identical vocabulary.
inline std::vector<std::string> build_vocabulary(const std::vector<Stage>& stages,
                                                 const SpecialTokens& tokens) {
  std::set<std::string> vocab;
  for (const auto& stage : stages) {
    for (const auto* list : {&stage.train, &stage.val}) {
      for (const auto& ex : *list) {
        for (auto& t : whitespace_tokens(ex.encoder_text)) vocab.insert(std::move(t));
        for (auto& t : whitespace_tokens(ex.decoder_text)) vocab.insert(std::move(t));
      }
    }
  }
  for (const auto& t : tokens.all()) vocab.insert(t);
  return {vocab.begin(), vocab.end()};
}

inline TrainConfig stage_config(const ExperimentConfig& cfg, std::uint64_t stage_stream) {
  TrainConfig tc = cfg.train;
  tc.seed = rng::derive_seed(cfg.train.seed, stage_stream);
  return tc;
}

inline std::vector<Stage> build_stages(const ExperimentConfig& cfg) {
  const auto enc = cfg.output_dir / "prepare" / "encoded";
  if (!std::filesystem::exists(enc)) {
    throw DataError("prepared data not found under " + enc.string() + "; run prepare first");
  }
  const auto skill = [&](const std::string& stem, const std::string& part) {
    return load_encoded_jsonl(enc / ("skill_" + stem + "_" + part + ".jsonl"));
  };
  std::vector<Stage> stages;
  switch (cfg.recipe) {
    case RecipeName::HtaWta: {
      Stage hta;
      hta.name = "hta";
      hta.kind = FormatKind::HTA;
      hta.train = load_external_split(cfg, enc, "train");
      hta.val = load_external_split(cfg, enc, "val"); // combined external validation sets
      hta.config = stage_config(cfg, 11);
      if (hta.train.empty()) {
        throw DataError("recipe HTA_WTA needs at least one external corpus with data");
      }
      Stage wta;
      wta.name = "wta";
      wta.kind = FormatKind::WTA;
      wta.uses_skill_tokens = true;
      wta.train = skill("wta", "train");
      wta.val = skill("wta", "val");
      wta.config = stage_config(cfg, 12);
      stages = {std::move(hta), std::move(wta)};
      break;
    }
    case RecipeName::T5Wta: {
      Stage wta;
      wta.name = "wta";
      wta.kind = FormatKind::WTA;
      wta.uses_skill_tokens = true;
      wta.train = skill("wta", "train");
      wta.val = skill("wta", "val");
      wta.config = stage_config(cfg, 11);
      stages = {std::move(wta)};
      break;
    }
    case RecipeName::OneStep: {
      Stage one;
      one.name = "one_step";
      one.kind = FormatKind::OneStep;
      one.train = concat(load_external_split(cfg, enc, "train"), skill("one_step", "train"));
      one.val = concat(load_external_split(cfg, enc, "val"), skill("one_step", "val"));
      one.config = stage_config(cfg, 11);
      stages = {std::move(one)};
      break;
    }
    case RecipeName::WtaUnskilled: {
      Stage wta;
      wta.name = "wta_unskilled";
      wta.kind = FormatKind::WTA;
      wta.uses_skill_tokens = false;
      wta.train = skill("wta_unskilled", "train");
      wta.val = skill("wta_unskilled", "val");
      wta.config = stage_config(cfg, 11);
      stages = {std::move(wta)};
      break;
    }
  }
  return stages;
}

inline nlohmann::ordered_json stage_to_json(const Stage& s) {
  nlohmann::ordered_json j;
  j["name"] = s.name;
  j["format"] = std::string(format_kind_name(s.kind));
  j["uses_skill_tokens"] = s.uses_skill_tokens;
  j["train_examples"] = s.train.size();
  j["val_examples"] = s.val.size();
  nlohmann::ordered_json tc;
  tc["optimizer"] = s.config.optimizer;
  tc["learning_rate"] = s.config.learning_rate;
  tc["batch_size"] = s.config.batch_size;
  tc["max_epochs"] = s.config.max_epochs;
  tc["patience"] = s.config.patience;
  tc["max_encoder_tokens"] = s.config.max_encoder_tokens;
  tc["max_decoder_tokens"] = s.config.max_decoder_tokens;
  tc["seed"] = s.config.seed;
  j["config"] = std::move(tc);
  return j;
}

}  // namespace detail

struct TrainOutcome {
  std::filesystem::path train_dir;
  std::vector<TrainReport> reports;
  std::filesystem::path final_weights;
  std::size_t resumed_stages = 0;
};

inline TrainOutcome cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto stages = detail::build_stages(cfg);
  const auto train_dir = cfg.output_dir / "train";
  const auto tokens = SpecialTokens::defaults();

  auto backend = make_backend(cfg.backend, detail::build_vocabulary(stages, tokens),
                              rng::derive_seed(cfg.seed, 4));
  backend->register_special_tokens(tokens.all());

  StageRecipe recipe;
  recipe.name = cfg.recipe;
  recipe.stages = stages;

  TrainOutcome outcome;
  outcome.train_dir = train_dir;

  nlohmann::ordered_json recipe_json;
  recipe_json["name"] = std::string(recipe_name_str(recipe.name));
  recipe_json["reset_optimizer_between_stages"] = recipe.reset_optimizer_between_stages;
  recipe_json["backend"] = resolve_backend_name(cfg.backend);
  auto stage_arr = nlohmann::ordered_json::array();
  for (const auto& s : recipe.stages) stage_arr.push_back(detail::stage_to_json(s));
  recipe_json["stages"] = std::move(stage_arr);
  write_file(train_dir / "recipe.json", recipe_json.dump(2) + "\n");

  const auto stage_dir = [&](std::size_t i) {
    return train_dir / ("stage-" + std::to_string(i + 1));
  };

  StageCallbacks callbacks;
  callbacks.skip_stage = [&](std::size_t i, const Stage&) {
    const auto weights = stage_dir(i) / "weights.bin";
    const auto report = stage_dir(i) / "report.json";
    if (!std::filesystem::exists(weights) || !std::filesystem::exists(report)) return false;
    const auto loaded = load_backend(resolve_backend_name(cfg.backend), weights);
    backend->restore(loaded->snapshot());
    ++outcome.resumed_stages;
    return true;
  };
  callbacks.on_stage_done = [&](std::size_t i, const Stage&, const TrainReport& report) {
    backend->save(stage_dir(i) / "weights.bin");
    write_file(stage_dir(i) / "report.json", train_report_to_json(report).dump(2) + "\n");
    nlohmann::ordered_json timing;
    timing["wall_seconds"] = report.wall_seconds;
    write_file(stage_dir(i) / "timing.json", timing.dump(2) + "\n");
  };

  auto recipe_result = run_recipe(*backend, recipe, callbacks);
  outcome.reports = std::move(recipe_result.reports);
  outcome.final_weights = stage_dir(recipe.stages.size() - 1) / "weights.bin";

  const Stage& final_stage = recipe.stages.back();
  nlohmann::ordered_json meta;
  meta["backend"] = resolve_backend_name(cfg.backend);
  meta["final_stage"] = recipe.stages.size();
  meta["format"] = std::string(format_kind_name(final_stage.kind));
  meta["uses_skill_tokens"] = final_stage.uses_skill_tokens;
  meta["max_encoder_tokens"] = cfg.train.max_encoder_tokens;
  write_file(train_dir / "checkpoint.json", meta.dump(2) + "\n");

  // timing.json is deliberately left out of the manifest: wall-clock time is
  // the one nondeterministic artifact.
  std::vector<std::string> files = {"recipe.json", "checkpoint.json"};
  for (std::size_t i = 0; i < recipe.stages.size(); ++i) {
    files.push_back("stage-" + std::to_string(i + 1) + "/weights.bin");
    files.push_back("stage-" + std::to_string(i + 1) + "/report.json");
  }
  write_manifest(train_dir, build_manifest(train_dir, files));
  return outcome;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::string backend = "tiny";
  std::size_t final_stage = 1;
  FormatKind format = FormatKind::WTA;
  bool uses_skill_tokens = true;
  std::size_t max_encoder_tokens = 512;
};

inline CheckpointMeta load_checkpoint_meta(const std::filesystem::path& train_dir) {
  const auto file = train_dir / "checkpoint.json";
  if (!std::filesystem::exists(file)) {
    throw DataError("checkpoint metadata not found: " + file.string());
  }
  const auto j = nlohmann::json::parse(read_file(file));
  CheckpointMeta meta;
  meta.backend = j.at("backend").get<std::string>();
  meta.final_stage = j.at("final_stage").get<std::size_t>();
  meta.format = parse_format_kind(j.at("format").get<std::string>());
  meta.uses_skill_tokens = j.at("uses_skill_tokens").get<bool>();
  meta.max_encoder_tokens = j.value("max_encoder_tokens", std::size_t{512});
  return meta;
}

struct GenerationRecord {
  std::string story_id;
  std::optional<Skill> skill;
  std::string encoder_text;
  std::string raw;
  ParsedGeneration parsed;
};

struct GenerateOutcome {
  std::vector<GenerationRecord> records;
  std::filesystem::path output_file;
};

inline std::string generations_to_jsonl(std::span<const GenerationRecord> records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["story_id"] = r.story_id;
    if (r.skill) j["skill"] = std::string(skill_code(*r.skill));
    j["encoder"] = r.encoder_text;
    j["raw"] = r.raw;
    auto pairs = nlohmann::ordered_json::array();
    for (const auto& [q, a] : r.parsed.pairs) {
      nlohmann::ordered_json pj;
      pj["question"] = q;
      pj["answer"] = a;
      pairs.push_back(std::move(pj));
    }
    j["pairs"] = std::move(pairs);
    j["well_formed"] = r.parsed.well_formed;
    auto diags = nlohmann::ordered_json::array();
    for (const auto d : r.parsed.diagnostics) diags.push_back(std::string(parse_issue_name(d)));
    j["diagnostics"] = std::move(diags);
    out += j.dump();
    out += '\n';
  }
  return out;
}

// WTA checkpoints refuse skill-less generation; skill-free checkpoints refuse
// a requested skill. One record per (story, requested skill).
inline GenerateOutcome cmd_generate(const std::filesystem::path& train_dir,
                                    const SkillDataset& stories,
                                    const std::vector<Skill>& requested_skills,
                                    const SamplerConfig& sampler,
                                    const std::filesystem::path& out_file) {
  const CheckpointMeta meta = load_checkpoint_meta(train_dir);
  if (meta.uses_skill_tokens && requested_skills.empty()) {
    throw ConfigError("checkpoint was trained with skill tokens; --skill is required");
  }
  if (!meta.uses_skill_tokens && !requested_skills.empty()) {
    throw ConfigError("checkpoint was trained without skill tokens; --skill is not allowed");
  }
  const auto weights =
      train_dir / ("stage-" + std::to_string(meta.final_stage)) / "weights.bin";
  auto backend = load_backend(meta.backend, weights);
  const auto tokens = SpecialTokens::defaults();

  BuildOptions trunc_opts;
  trunc_opts.tokens = tokens;
  trunc_opts.max_encoder_tokens = meta.max_encoder_tokens;
  trunc_opts.include_skill_token = meta.uses_skill_tokens;

  GenerateOutcome outcome;
  std::size_t record_index = 0;
  for (const auto& story : stories.stories) {
    const auto one = [&](std::optional<Skill> skill) {
      GenerationRecord rec;
      rec.story_id = story.id;
      rec.skill = skill;
      rec.encoder_text = detail::truncate_input(
          story.text, skill ? FormatKind::WTA : meta.format, skill, trunc_opts);
      SamplerConfig per_record = sampler;
      per_record.seed = rng::derive_seed(sampler.seed, record_index++);
      const GenerationResult gen = generate(*backend, rec.encoder_text, per_record);
      rec.raw = gen.text + (gen.terminated_by == TerminationReason::Eos ? " " + tokens.eos : "");
      rec.parsed = parse_generation(rec.raw, tokens);
      outcome.records.push_back(std::move(rec));
    };
    if (meta.uses_skill_tokens) {
      for (const Skill s : requested_skills) one(s);
    } else {
      one(std::nullopt);
    }
  }
  if (!out_file.empty()) {
    write_file(out_file, generations_to_jsonl(outcome.records));
    outcome.output_file = out_file;
    const auto parent = out_file.parent_path().empty() ? std::filesystem::path(".")
                                                       : out_file.parent_path();
    write_manifest(parent, build_manifest(parent, {out_file.filename().string()}),
                   out_file.filename().string() + ".manifest.json");
  }
  return outcome;
}

inline std::vector<GenerationRecord> load_generations_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open generations: " + path.string());
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GenerationRecord r;
      r.story_id = j.at("story_id").get<std::string>();
      if (j.contains("skill")) r.skill = parse_skill(j.at("skill").get<std::string>());
      r.raw = j.value("raw", std::string{});
      r.encoder_text = j.value("encoder", std::string{});
      if (j.contains("pairs")) {
        for (const auto& p : j.at("pairs")) {
          r.parsed.pairs.emplace_back(p.at("question").get<std::string>(),
                                      p.value("answer", std::string{}));
        }
      }
      r.parsed.well_formed = j.value("well_formed", false);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": malformed generation record: " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluationReport {
  MetricReport corpus;
  BreakdownResult by_qtype;
  BreakdownResult by_skill;
  std::optional<SkillControlScores> skill_control;
  std::vector<std::string> join_failures;
  std::size_t joined = 0;
};

inline nlohmann::ordered_json evaluation_report_to_json(const EvaluationReport& r) {
  nlohmann::ordered_json j;
  j["corpus"] = metric_report_to_json(r.corpus);
  j["joined"] = r.joined;
  const auto dump_breakdown = [](const BreakdownResult& b) {
    nlohmann::ordered_json out;
    for (const auto& [key, rep] : b.groups) out[key] = metric_report_to_json(rep);
    out["excluded"] = b.excluded;
    return out;
  };
  j["by_qtype"] = dump_breakdown(r.by_qtype);
  j["by_skill"] = dump_breakdown(r.by_skill);
  if (r.skill_control) {
    nlohmann::ordered_json sc;
    sc["accuracy"] = r.skill_control->accuracy;
    sc["n"] = r.skill_control->n;
    nlohmann::ordered_json per;
    for (const auto& [skill, prf] : r.skill_control->per_skill) {
      nlohmann::ordered_json p;
      p["precision"] = prf.precision;
      p["recall"] = prf.recall;
      p["f1"] = prf.f1;
      p["support"] = prf.support;
      per[std::string(skill_code(skill))] = std::move(p);
    }
    sc["per_skill"] = std::move(per);
    j["skill_control"] = std::move(sc);
  }
  if (!r.join_failures.empty()) j["join_failures"] = r.join_failures;
  return j;
}

// Joins generations to reference questions by story id (and skill when the
// generation requested one). Join failures are listed, never fatal.
inline EvaluationReport evaluate_generations(std::span<const GenerationRecord> generations,
                                             const SkillDataset& references,
                                             const SemanticScorer* scorer) {
  std::map<std::string, const Story*> story_of;
  for (const auto& s : references.stories) story_of[s.id] = &s;

  std::vector<ScoredPair> pairs;
  EvaluationReport report;
  for (const auto& gen : generations) {
    const auto it = story_of.find(gen.story_id);
    if (it == story_of.end()) {
      report.join_failures.push_back("story '" + gen.story_id + "' not in references");
      continue;
    }
    std::vector<const QAPair*> refs;
    for (const auto& p : it->second->pairs) {
      if (!gen.skill || (p.skill && *p.skill == *gen.skill)) refs.push_back(&p);
    }
    if (refs.empty()) {
      report.join_failures.push_back(
          "story '" + gen.story_id + "' has no reference pairs" +
          (gen.skill ? " for skill " + std::string(skill_code(*gen.skill)) : ""));
      continue;
    }
    ScoredPair sp;
    sp.story_id = gen.story_id;
    sp.hypothesis = !gen.parsed.pairs.empty() ? gen.parsed.pairs.front().first : trim(gen.raw);
    for (const auto* p : refs) sp.references.push_back(p->question);
    sp.skill = gen.skill ? gen.skill : refs.front()->skill;
    sp.qtype = refs.front()->qtype;
    pairs.push_back(std::move(sp));
  }
  if (pairs.empty()) throw DataError("evaluate: no generation joined a reference");
  report.joined = pairs.size();
  report.corpus = score_pairs(pairs, scorer);
  report.by_qtype = breakdown(pairs, BreakdownDimension::QType, scorer);
  report.by_skill = breakdown(pairs, BreakdownDimension::SkillName, scorer);
  return report;
}

inline std::vector<SkillJudgment> load_judgments_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open judgments: " + path.string());
  std::vector<SkillJudgment> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SkillJudgment s;
      s.question_id = j.value("question_id", std::string{});
      s.intended = parse_skill(j.at("intended").get<std::string>());
      const std::string judged = j.at("judged").get<std::string>();
      if (judged != "NONE") s.judged = parse_skill(judged);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": malformed judgment: " + e.what());
    }
  }
  return out;
}

inline void write_evaluation_outputs(const EvaluationReport& report,
                                     const std::filesystem::path& out_dir,
                                     const std::string& model_label) {
  write_file(out_dir / "report.json", evaluation_report_to_json(report).dump(2) + "\n");
  write_file(out_dir / "report.csv", metric_report_to_csv(report.corpus, model_label));
  write_manifest(out_dir, build_manifest(out_dir, {"report.json", "report.csv"}));
}

// ---------------------------------------------------------------------------
// few-shot sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  FewShotAmount amount;
  RecipeName recipe = RecipeName::T5Wta;
  std::optional<MetricReport> metrics;
  std::string error; // per-point failures recorded, sweep continues
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::filesystem::path csv_file;
};

inline std::string sweep_to_csv(std::span<const SweepRow> rows) {
  std::string out = csv::row(
      {"amount", "recipe", "n", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "semantic", "error"});
  const auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return std::string(buf);
  };
  for (const auto& row : rows) {
    std::vector<std::string> fields = {row.amount.label(),
                                       std::string(recipe_name_str(row.recipe))};
    if (row.metrics) {
      fields.push_back(std::to_string(row.metrics->n));
      for (std::size_t k = 0; k < 4; ++k) fields.push_back(fmt(row.metrics->bleu.bleu_percent[k]));
      fields.push_back(row.metrics->semantic_percent ? fmt(*row.metrics->semantic_percent)
                                                     : std::string("n/a"));
      fields.push_back("");
    } else {
      fields.insert(fields.end(), {"", "", "", "", "", "", row.error});
    }
    out += csv::row(fields);
  }
  return out;
}

inline SweepResult cmd_fewshot(const ExperimentConfig& cfg,
                               const std::vector<FewShotAmount>& amounts,
                               const std::vector<RecipeName>& recipes) {
  cfg.validate();
  for (const RecipeName r : recipes) {
    if (r != RecipeName::HtaWta && r != RecipeName::T5Wta) {
      throw ConfigError("fewshot recipes must be HTA_WTA or T5_WTA");
    }
  }
  const auto prepare_dir = cfg.output_dir / "prepare";
  const auto sweep_dir = cfg.output_dir / "fewshot";
  const SkillDataset full_train = load_skill_dataset(prepare_dir / "splits" / "train.jsonl");
  const SkillDataset val_set = load_skill_dataset(prepare_dir / "splits" / "val.jsonl");
  const SkillDataset test_set = load_skill_dataset(prepare_dir / "splits" / "test.jsonl");
  const auto tokens = SpecialTokens::defaults();
  const auto scorer = make_semantic_scorer(cfg.semantic_scorer);

  // Vocabulary over every prepared encoded dump so all sweep points and the
  // shared HTA checkpoint agree on token ids.
  std::set<std::string> vocab_set;
  for (const auto& entry :
       std::filesystem::directory_iterator(prepare_dir / "encoded")) {
    if (entry.path().extension() != ".jsonl") continue;
    for (const auto& ex : load_encoded_jsonl(entry.path())) {
      for (auto& t : whitespace_tokens(ex.encoder_text)) vocab_set.insert(std::move(t));
      for (auto& t : whitespace_tokens(ex.decoder_text)) vocab_set.insert(std::move(t));
    }
  }
  for (const auto& t : tokens.all()) vocab_set.insert(t);
  const std::vector<std::string> vocab(vocab_set.begin(), vocab_set.end());

  // One shared HTA checkpoint per sweep (recorded in the manifest).
  std::vector<double> hta_params;
  const bool needs_hta =
      std::find(recipes.begin(), recipes.end(), RecipeName::HtaWta) != recipes.end();
  if (needs_hta) {
    ExperimentConfig hta_cfg = cfg;
    hta_cfg.recipe = RecipeName::HtaWta;
    auto stages = detail::build_stages(hta_cfg);
    auto backend = make_backend(cfg.backend, vocab, rng::derive_seed(cfg.seed, 4));
    backend->register_special_tokens(tokens.all());
    const auto report = train_stage(*backend, stages[0].train, stages[0].val, stages[0].config);
    backend->save(sweep_dir / "hta_shared" / "weights.bin");
    write_file(sweep_dir / "hta_shared" / "report.json",
               train_report_to_json(report).dump(2) + "\n");
    hta_params = backend->snapshot();
  }

  const auto wta_val = build_training_set(
      val_set, detail::make_build_options(cfg, FormatKind::WTA, true));

  SweepResult result;
  for (const auto& amount : amounts) {
    // Seed streams key off the point identity (amount label, recipe), not the
    // loop index, so a single-point sweep reproduces the same row.
    const std::uint64_t amount_stream = fnv1a64(amount.label());
    const SkillDataset subsampled =
        subsample_few_shot(full_train, amount, rng::derive_seed(cfg.seed, amount_stream));
    for (const RecipeName recipe : recipes) {
      const std::uint64_t point_stream =
          fnv1a64(amount.label() + "|" + std::string(recipe_name_str(recipe)));
      SweepRow row;
      row.amount = amount;
      row.recipe = recipe;
      try {
        auto built =
            build_training_set(subsampled, detail::make_build_options(cfg, FormatKind::WTA, true));
        if (built.examples.empty()) throw TrainError("subsample produced no training examples");
        auto backend = make_backend(cfg.backend, vocab, rng::derive_seed(cfg.seed, 4));
        backend->register_special_tokens(tokens.all());
        if (recipe == RecipeName::HtaWta) backend->restore(hta_params);
        TrainConfig tc = detail::stage_config(cfg, point_stream);
        train_stage(*backend, built.examples, wta_val.examples, tc);

        // Generate one question per (test story, skill with a reference).
        std::vector<GenerationRecord> gens;
        std::size_t rec_idx = 0;
        BuildOptions trunc_opts;
        trunc_opts.tokens = tokens;
        trunc_opts.max_encoder_tokens = cfg.train.max_encoder_tokens;
        for (const auto& story : test_set.stories) {
          for (const Skill s : story.skills()) {
            GenerationRecord rec;
            rec.story_id = story.id;
            rec.skill = s;
            rec.encoder_text =
                detail::truncate_input(story.text, FormatKind::WTA, s, trunc_opts);
            SamplerConfig sc = cfg.sampler;
            sc.seed = rng::derive_seed(rng::derive_seed(cfg.sampler.seed, point_stream), rec_idx++);
            const auto gen = generate(*backend, rec.encoder_text, sc);
            rec.raw = gen.text + (gen.terminated_by == TerminationReason::Eos
                                      ? " " + tokens.eos
                                      : "");
            rec.parsed = parse_generation(rec.raw, tokens);
            gens.push_back(std::move(rec));
          }
        }
        const auto eval = evaluate_generations(gens, test_set, scorer.get());
        row.metrics = eval.corpus;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
      result.rows.push_back(std::move(row));
    }
  }

  write_file(sweep_dir / "sweep.csv", sweep_to_csv(result.rows));
  std::vector<std::string> files = {"sweep.csv"};
  if (needs_hta) {
    files.push_back("hta_shared/weights.bin");
    files.push_back("hta_shared/report.json");
  }
  write_manifest(sweep_dir, build_manifest(sweep_dir, files));
  result.csv_file = sweep_dir / "sweep.csv";
  return result;
}

}  // namespace skillforge
