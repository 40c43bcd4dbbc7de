#include "hat/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace hat {
namespace {

bool allowed(int token, std::size_t generated, const GenConfig& c) {
  if (token == kPadId || token == kBosId) return false;
  if (token == kEosId) return generated >= c.min_len;
  return generated < c.max_len;
}

// Best final score any extension of a live hypothesis could still reach:
// log-probabilities only fall, and a longer final length divides a negative
// total by more.
double upper_bound(double live_log_prob, const GenConfig& c) {
  if (c.length_penalty == 0.0 || live_log_prob >= 0.0) return live_log_prob;
  return length_normalized_score(live_log_prob, c.max_len + 1, c.length_penalty);
}

std::vector<int> with_bos(std::span<const int> tokens) {
  std::vector<int> prefix;
  prefix.reserve(tokens.size() + 1);
  prefix.push_back(kBosId);
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  return prefix;
}

std::vector<double> checked_log_probs(StepScorer& scorer, std::span<const int> prefix) {
  auto lp = scorer.log_probs(prefix);
  if (lp.size() != scorer.vocab_size())
    throw std::logic_error("scorer returned " + std::to_string(lp.size()) + " log-probabilities for vocabulary of " +
                           std::to_string(scorer.vocab_size()));
  return lp;
}

struct Candidate {
  double log_prob;
  std::size_t beam;
  int token;
};

}  // namespace

void GenConfig::validate() const {
  if (beam_width < 1) throw std::invalid_argument("beam_width must be at least 1");
  if (min_len > max_len) throw std::invalid_argument("min_len must not exceed max_len");
  if (length_penalty < 0.0) throw std::invalid_argument("length_penalty must be non-negative");
}

nlohmann::json to_json(const GenConfig& c) {
  return {{"beam_width", c.beam_width},
          {"length_penalty", c.length_penalty},
          {"min_len", c.min_len},
          {"max_len", c.max_len},
          {"trace_attention", c.trace_attention}};
}

GenConfig gen_config_from_json(const nlohmann::json& j) {
  GenConfig c;
  c.beam_width = j.value("beam_width", c.beam_width);
  c.length_penalty = j.value("length_penalty", c.length_penalty);
  c.min_len = j.value("min_len", c.min_len);
  c.max_len = j.value("max_len", c.max_len);
  c.trace_attention = j.value("trace_attention", c.trace_attention);
  for (const auto& [key, _] : j.items())
    if (!to_json(c).contains(key)) throw std::invalid_argument("unknown generation config key '" + key + "'");
  c.validate();
  return c;
}

double length_normalized_score(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), alpha);
}

ModelScorer::ModelScorer(const EncoderOutput& enc, const HatParameters& params, const HatConfig& config)
    : enc_(enc), params_(params), config_(config) {}

std::vector<double> ModelScorer::log_probs(std::span<const int> prefix) {
  auto logits = next_token_logits(prefix, enc_, params_, config_);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  for (double& v : logits) v -= lse;
  return logits;
}

BeamHypothesis beam_search(StepScorer& scorer, const GenConfig& config) {
  config.validate();
  struct Live {
    std::vector<int> tokens;
    double log_prob;
  };
  std::vector<Live> live{{{}, 0.0}};
  std::vector<BeamHypothesis> finished;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  const int vocab = static_cast<int>(scorer.vocab_size());

  for (std::size_t generated = 0;; ++generated) {
    std::vector<Candidate> candidates;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = checked_log_probs(scorer, with_bos(live[b].tokens));
      for (int v = 0; v < vocab; ++v) {
        if (!allowed(v, generated, config) || !std::isfinite(lp[static_cast<std::size_t>(v)])) continue;
        const double total = live[b].log_prob + lp[static_cast<std::size_t>(v)];
        if (v == kEosId) {
          BeamHypothesis h{live[b].tokens, total, true, std::nullopt};
          h.tokens.push_back(kEosId);
          if (h.score(config.length_penalty) > best) {
            best = h.score(config.length_penalty);
            best_index = finished.size();
          }
          finished.push_back(std::move(h));
        } else {
          candidates.push_back({total, b, v});
        }
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.token < b.token;
    });
    if (candidates.size() > config.beam_width) candidates.resize(config.beam_width);
    std::vector<Live> next;
    for (const auto& c : candidates) {
      Live h{live[c.beam].tokens, c.log_prob};
      h.tokens.push_back(c.token);
      next.push_back(std::move(h));
    }
    live = std::move(next);
    if (live.empty()) break;
    if (!finished.empty() && upper_bound(live.front().log_prob, config) <= best) break;
  }
  if (finished.empty()) throw std::runtime_error("beam search produced no finished hypothesis");
  return finished[best_index];
}

BeamHypothesis greedy_decode(StepScorer& scorer, const GenConfig& config) {
  config.validate();
  std::vector<int> tokens;
  double log_prob = 0.0;
  std::optional<BeamHypothesis> best;
  for (std::size_t generated = 0;; ++generated) {
    const auto lp = checked_log_probs(scorer, with_bos(tokens));
    if (allowed(kEosId, generated, config) && std::isfinite(lp[kEosId])) {
      BeamHypothesis h{tokens, log_prob + lp[kEosId], true, std::nullopt};
      h.tokens.push_back(kEosId);
      if (!best || h.score(config.length_penalty) > best->score(config.length_penalty)) best = std::move(h);
    }
    int arg = -1;
    for (int v = 0; v < static_cast<int>(lp.size()); ++v) {
      if (v == kEosId || !allowed(v, generated, config) || !std::isfinite(lp[static_cast<std::size_t>(v)])) continue;
      if (arg < 0 || lp[static_cast<std::size_t>(v)] > lp[static_cast<std::size_t>(arg)]) arg = v;
    }
    if (arg < 0) break;
    tokens.push_back(arg);
    log_prob += lp[static_cast<std::size_t>(arg)];
    if (best && upper_bound(log_prob, config) <= best->score(config.length_penalty)) break;
  }
  if (!best) throw std::runtime_error("greedy decoding produced no finished hypothesis");
  return *best;
}

AttentionTrace trace_attention(std::span<const int> tokens, const EncoderOutput& enc, const HatParameters& params,
                               const HatConfig& model_config) {
  if (model_config.mode != ModelMode::hat)
    throw std::invalid_argument("attention tracing requires a hat-mode model");
  if (tokens.empty()) throw std::invalid_argument("cannot trace an empty sequence");
  // Step t attends while predicting tokens[t] from BOS + tokens[0..t).
  const auto prefix = with_bos(tokens.first(tokens.size() - 1));
  ForwardContext ctx;
  DecoderTrace dtrace;
  decode_step(prefix, enc, params, model_config, ctx, &dtrace);
  const std::size_t heads = model_config.num_heads, steps = prefix.size(), nb = enc.num_hier_rows();
  AttentionTrace trace(dtrace.hier_attention.size(), heads, steps, nb);
  for (std::size_t l = 0; l < dtrace.hier_attention.size(); ++l) {
    const auto vals = dtrace.hier_attention[l].values();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t b = 0; b < nb; ++b) trace.at(l, h, t, b) = vals[(h * steps + t) * nb + b];
  }
  return trace;
}

BeamHypothesis beam_search(const EncoderOutput& enc, const HatParameters& params, const HatConfig& model_config,
                           const GenConfig& config) {
  ModelScorer scorer(enc, params, model_config);
  auto result = beam_search(scorer, config);
  if (config.trace_attention) result.trace = trace_attention(result.tokens, enc, params, model_config);
  return result;
}

BeamHypothesis greedy_decode(const EncoderOutput& enc, const HatParameters& params, const HatConfig& model_config,
                             const GenConfig& config) {
  ModelScorer scorer(enc, params, model_config);
  auto result = greedy_decode(scorer, config);
  if (config.trace_attention) result.trace = trace_attention(result.tokens, enc, params, model_config);
  return result;
}

}  // namespace hat
