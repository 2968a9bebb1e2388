#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillforge/backend.hpp"
#include "skillforge/common.hpp"
#include "skillforge/seqformat.hpp"

namespace skillforge {

struct TrainConfig {
  std::string optimizer = "adam";
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 10;
  std::size_t patience = 1;
  std::size_t max_encoder_tokens = 512;
  std::size_t max_decoder_tokens = 128;
  std::uint64_t seed = 13;

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
    if (patience >= max_epochs) throw ConfigError("patience must be < max_epochs");
    if (max_encoder_tokens == 0 || max_decoder_tokens == 0)
      throw ConfigError("sequence budgets must be positive");
    if (optimizer != "adam") throw ConfigError("unsupported optimizer: " + optimizer);
  }
};

struct TrainReport {
  std::vector<double> train_losses; // one per epoch run
  std::vector<double> val_losses;
  std::size_t stopped_epoch = 0; // 1-based, last epoch executed
  std::size_t best_epoch = 0;    // 1-based, minimum validation loss
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

// report.json stays deterministic; wall-clock time is serialized separately
// so manifests of equal-seed runs hash identically.
inline nlohmann::ordered_json train_report_to_json(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["train_losses"] = r.train_losses;
  j["val_losses"] = r.val_losses;
  j["stopped_epoch"] = r.stopped_epoch;
  j["best_epoch"] = r.best_epoch;
  j["seed"] = r.seed;
  return j;
}

namespace detail {

inline std::vector<TokenizedPair> tokenize_examples(Seq2SeqBackend& backend,
                                                    std::span<const EncodedExample> examples) {
  std::vector<TokenizedPair> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    TokenizedPair p;
    p.encoder_ids = backend.tokenize(ex.encoder_text);
    p.decoder_ids = backend.tokenize(ex.decoder_text);
    if (p.encoder_ids.empty() || p.decoder_ids.empty()) {
      throw TrainError("example tokenized to an empty sequence (story '" + ex.story_id + "')");
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Token-weighted mean NLL over a full example set.
inline double evaluate_loss(Seq2SeqBackend& backend, const std::vector<TokenizedPair>& examples,
                            std::size_t batch_size) {
  double nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    const std::size_t end = std::min(examples.size(), i + batch_size);
    std::vector<TokenizedPair> batch(examples.begin() + static_cast<std::ptrdiff_t>(i),
                                     examples.begin() + static_cast<std::ptrdiff_t>(end));
    std::size_t batch_tokens = 0;
    for (const auto& ex : batch) batch_tokens += ex.decoder_ids.size();
    nll += backend.loss(batch) * static_cast<double>(batch_tokens);
    tokens += batch_tokens;
  }
  return nll / static_cast<double>(tokens);
}

}  // namespace detail

// One optimization stage with per-epoch validation and early stopping: stop
// once validation loss has failed to improve for `patience` consecutive
// epochs, then restore the best-validation snapshot.
inline TrainReport train_stage(Seq2SeqBackend& backend,
                               std::span<const EncodedExample> train_examples,
                               std::span<const EncodedExample> val_examples,
                               const TrainConfig& config) {
  config.validate();
  if (train_examples.empty()) throw TrainError("train_stage: empty training set");
  if (val_examples.empty()) throw TrainError("train_stage: empty validation set");

  const auto t0 = std::chrono::steady_clock::now();
  auto train = detail::tokenize_examples(backend, train_examples);
  const auto val = detail::tokenize_examples(backend, val_examples);

  TrainReport report;
  report.seed = config.seed;
  rng::Engine shuffle_eng(rng::derive_seed(config.seed, 0x7261696e));

  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> best_params;
  std::size_t bad_streak = 0;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng::shuffle(order, shuffle_eng);
    double epoch_nll = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t i = 0; i < order.size(); i += config.batch_size) {
      const std::size_t end = std::min(order.size(), i + config.batch_size);
      std::vector<TokenizedPair> batch;
      batch.reserve(end - i);
      std::size_t batch_tokens = 0;
      for (std::size_t k = i; k < end; ++k) {
        batch.push_back(train[order[k]]);
        batch_tokens += batch.back().decoder_ids.size();
      }
      const double batch_loss = backend.loss(batch, /*accumulate_gradients=*/true);
      if (!std::isfinite(batch_loss)) throw TrainError("train_stage: non-finite training loss");
      backend.apply_gradient_step(config.learning_rate);
      epoch_nll += batch_loss * static_cast<double>(batch_tokens);
      epoch_tokens += batch_tokens;
    }
    report.train_losses.push_back(epoch_nll / static_cast<double>(epoch_tokens));

    const double val_loss = detail::evaluate_loss(backend, val, config.batch_size);
    if (!std::isfinite(val_loss)) throw TrainError("train_stage: non-finite validation loss");
    report.val_losses.push_back(val_loss);
    report.stopped_epoch = epoch;

    if (val_loss < best_val) {
      best_val = val_loss;
      report.best_epoch = epoch;
      best_params = backend.snapshot();
      bad_streak = 0;
    } else {
      ++bad_streak;
      if (bad_streak >= config.patience) break;
    }
  }

  if (!best_params.empty()) backend.restore(best_params);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Staged recipes
// ---------------------------------------------------------------------------

enum class RecipeName { HtaWta, T5Wta, OneStep, WtaUnskilled };

inline std::string_view recipe_name_str(RecipeName r) {
  switch (r) {
    case RecipeName::HtaWta: return "HTA_WTA";
    case RecipeName::T5Wta: return "T5_WTA";
    case RecipeName::OneStep: return "ONE_STEP";
    case RecipeName::WtaUnskilled: return "WTA_UNSKILLED";
  }
  return "?";
}

inline RecipeName parse_recipe_name(std::string_view s) {
  if (s == "HTA_WTA") return RecipeName::HtaWta;
  if (s == "T5_WTA") return RecipeName::T5Wta;
  if (s == "ONE_STEP") return RecipeName::OneStep;
  if (s == "WTA_UNSKILLED") return RecipeName::WtaUnskilled;
  throw ConfigError("unknown recipe: '" + std::string(s) + "'");
}

struct Stage {
  std::string name;
  std::vector<EncodedExample> train;
  std::vector<EncodedExample> val;
  FormatKind kind = FormatKind::HTA;
  bool uses_skill_tokens = false;
  TrainConfig config;
};

struct StageRecipe {
  RecipeName name = RecipeName::T5Wta;
  std::vector<Stage> stages;
  bool reset_optimizer_between_stages = true;
};

struct RecipeResult {
  std::vector<TrainReport> reports;
  std::vector<std::filesystem::path> stage_dirs;
};

struct StageCallbacks {
  // Called after a stage finishes; used by the CLI to persist checkpoints.
  std::function<void(std::size_t stage_index, const Stage&, const TrainReport&)> on_stage_done;
  // Returns true if the stage is already complete and should be skipped
  // (resume support); the callback must restore backend state itself.
  std::function<bool(std::size_t stage_index, const Stage&)> skip_stage;
};

// Runs stages sequentially; each stage starts from the previous stage's
// best-validation checkpoint (train_stage restores it before returning).
inline RecipeResult run_recipe(Seq2SeqBackend& backend, const StageRecipe& recipe,
                               const StageCallbacks& callbacks = {}) {
  if (recipe.stages.empty()) throw ConfigError("recipe has no stages");
  RecipeResult result;
  for (std::size_t i = 0; i < recipe.stages.size(); ++i) {
    const Stage& stage = recipe.stages[i];
    if (callbacks.skip_stage && callbacks.skip_stage(i, stage)) {
      result.reports.push_back({});
      continue;
    }
    if (recipe.reset_optimizer_between_stages) backend.reset_optimizer();
    TrainReport report;
    try {
      report = train_stage(backend, stage.train, stage.val, stage.config);
    } catch (const TrainError& e) {
      throw TrainError("stage " + std::to_string(i + 1) + " (" + stage.name + "): " + e.what());
    }
    if (callbacks.on_stage_done) callbacks.on_stage_done(i, stage, report);
    result.reports.push_back(std::move(report));
  }
  return result;
}

}  // namespace skillforge
