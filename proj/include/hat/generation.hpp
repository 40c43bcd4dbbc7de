#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "hat/attention_viz.hpp"
#include "hat/model.hpp"
#include "json.hpp"

namespace hat {

/// Length counts generated tokens including the final EOS. EOS is disallowed
/// until `min_len` other tokens exist and forced once `max_len` do.
struct GenConfig {
  std::size_t beam_width = 2;
  double length_penalty = 1.0;
  std::size_t min_len = 0;
  std::size_t max_len = 128;
  bool trace_attention = false;

  void validate() const;
};

nlohmann::json to_json(const GenConfig& config);
GenConfig gen_config_from_json(const nlohmann::json& j);

/// score = logprob / len^alpha
double length_normalized_score(double log_prob, std::size_t length, double alpha);

/// Next-token log-probabilities for a decoder prefix that starts with BOS.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<double> log_probs(std::span<const int> prefix) = 0;
};

/// Scores prefixes with a trained model against a fixed encoder output.
class ModelScorer : public StepScorer {
 public:
  ModelScorer(const EncoderOutput& enc, const HatParameters& params, const HatConfig& config);
  std::size_t vocab_size() const override { return config_.vocab_size; }
  std::vector<double> log_probs(std::span<const int> prefix) override;

 private:
  const EncoderOutput& enc_;
  const HatParameters& params_;
  HatConfig config_;
};

struct BeamHypothesis {
  std::vector<int> tokens;  // generated tokens, ending in EOS when finished
  double log_prob = 0.0;
  bool finished = false;
  std::optional<AttentionTrace> trace;

  double score(double alpha) const { return length_normalized_score(log_prob, tokens.size(), alpha); }
};

/// Beam search. Every EOS extension of a live hypothesis is held aside as a
/// finished candidate; live beams are refilled with the best non-EOS
/// extensions by cumulative log-probability (ties: lower beam index, then
/// lower token id). Search ends when no live hypothesis can reach the best
/// finished score.
BeamHypothesis beam_search(StepScorer& scorer, const GenConfig& config);

/// The single-path reference: extends with the argmax non-EOS token, holds
/// each EOS extension aside, and stops under the same bound.
BeamHypothesis greedy_decode(StepScorer& scorer, const GenConfig& config);

/// Model entry points. With `trace_attention`, the winning sequence is
/// re-decoded with teacher forcing to record decoder-to-BOS attention.
BeamHypothesis beam_search(const EncoderOutput& enc, const HatParameters& params, const HatConfig& model_config,
                           const GenConfig& config);
BeamHypothesis greedy_decode(const EncoderOutput& enc, const HatParameters& params, const HatConfig& model_config,
                             const GenConfig& config);

/// Forced decode of `tokens` recording hierarchical attention per step.
AttentionTrace trace_attention(std::span<const int> tokens, const EncoderOutput& enc, const HatParameters& params,
                               const HatConfig& model_config);

}  // namespace hat
