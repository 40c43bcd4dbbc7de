#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hat/model.hpp"
#include "hat/text_pipeline.hpp"
#include "json.hpp"

namespace hat {

enum class Selection { loss, bleu, rougeL };
std::string_view to_string(Selection s);
Selection parse_selection(std::string_view name);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  double peak_lr = 3e-5;
  std::size_t warmup_steps = 900;
  std::size_t total_steps = 30000;
  std::size_t grad_accum_steps = 1;
  double label_smoothing = 0.1;
  double dropout = 0.1;  // overrides the model's dropout while training
  std::size_t batch_size = 8;  // examples per micro-batch
  std::uint64_t seed = 0;
  std::size_t valid_interval = 500;
  Selection selection = Selection::loss;
  /// Per-epoch dropout override; epoch e uses entry e when present.
  std::vector<double> dropout_schedule;

  void validate() const;
  double dropout_for_epoch(std::size_t epoch) const;
};

nlohmann::json to_json(const OptimizerConfig& config);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);
OptimizerConfig load_optimizer_config(const std::filesystem::path& path);

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
double lr_at(std::size_t step, const OptimizerConfig& config);

/// Summed smoothed cross-entropy over non-pad rows of `logits` [N, V] and the
/// number of rows that contributed. The target keeps 1 - eps; eps is spread
/// evenly over the remaining classes other than `pad_id`.
struct LossSum {
  Tensor total;
  std::size_t count = 0;
};
LossSum label_smoothed_ce_sum(const Tensor& logits, std::span<const int> targets, double eps, int pad_id = kPadId);
/// Mean over non-pad rows; throws when every target is padding.
Tensor label_smoothed_ce(const Tensor& logits, std::span<const int> targets, double eps, int pad_id = kPadId);

struct TrainState {
  std::size_t step = 0;  // optimizer updates applied so far
  std::vector<std::vector<double>> m, v;
  double best_valid = std::numeric_limits<double>::infinity();
};

TrainState init_train_state(const std::vector<NamedTensor>& params);

/// One AdamW update from the accumulated gradients times `grad_scale`, using
/// lr_at(state.step + 1). Gradients are left in place.
void adam_step(const std::vector<NamedTensor>& params, TrainState& state, const OptimizerConfig& config,
               double grad_scale = 1.0);

/// Teacher-forced loss of one example: decoder input BOS + target[:-1].
LossSum sequence_loss(const EncodedExample& example, const HatParameters& params, const HatConfig& config,
                      ForwardContext& ctx, double label_smoothing);

/// Mean smoothed loss per target token, eval mode.
double validation_loss(std::span<const EncodedExample> data, const HatParameters& params, const HatConfig& config,
                       double label_smoothing);
/// Teacher-forced argmax accuracy over target tokens, eval mode.
double token_accuracy(std::span<const EncodedExample> data, const HatParameters& params, const HatConfig& config);

struct LogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> valid_loss;
  std::optional<double> valid_metric;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  /// Receives best.ckpt, last.ckpt and train_log.jsonl; nothing is written
  /// when empty.
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> init_from;
  std::function<void(const LogEntry&)> on_log;
};

struct TrainResult {
  HatParameters best_params;
  HatParameters last_params;
  double best_valid_loss = std::numeric_limits<double>::infinity();
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::vector<LogEntry> log;
  std::vector<std::string> not_initialized;  // names left fresh by init_from
  std::filesystem::path best_checkpoint;
};

TrainResult train(const HatConfig& model_config, const OptimizerConfig& opt, std::span<const EncodedExample> train_set,
                  std::span<const EncodedExample> valid_set, const TrainOptions& options = {});

// ---- masked language modelling ---------------------------------------------

struct MaskedExample {
  EncodedExample input;
  std::vector<int> positions;  // masked positions, ascending
  std::vector<int> labels;     // original ids at those positions
};

/// Selects each non-special token with probability `mask_prob` (at least one
/// per example) and replaces 80% by `mask_id`, 10% by a random corpus token
/// and keeps 10%. Deterministic in (seed, stream).
MaskedExample mask_tokens(const EncodedExample& example, int mask_id, std::size_t vocab_size, std::uint64_t seed,
                          std::uint64_t stream, double mask_prob = 0.15);

LossSum mlm_loss(const MaskedExample& example, const HatParameters& params, const HatConfig& config,
                 ForwardContext& ctx);
/// Mean masked-token cross-entropy in eval mode with a fixed masking seed.
double mlm_eval_loss(std::span<const EncodedExample> data, const HatParameters& params, const HatConfig& config,
                     int mask_id, std::uint64_t seed);

struct MlmResult {
  HatParameters params;
  std::vector<LogEntry> log;
  std::filesystem::path checkpoint;
};

/// Pre-trains an encoder-only model; `valid_set` (optional) is scored with
/// mlm_eval_loss every `valid_interval` steps.
MlmResult mlm_pretrain(const HatConfig& encoder_config, const OptimizerConfig& opt,
                       std::span<const EncodedExample> corpus, std::span<const EncodedExample> valid_set, int mask_id,
                       const TrainOptions& options = {});

}  // namespace hat
