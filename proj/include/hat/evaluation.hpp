#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace hat {

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Scoring tokenization: lowercase, split on whitespace.
std::vector<std::string> score_tokens(std::string_view text);

/// Clipped n-gram overlap. Throws on an empty reference or n == 0.
PRF rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
PRF rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);

struct BleuResult {
  double bleu = 0.0;  // 0..100
  double brevity_penalty = 0.0;
  std::vector<double> precisions;  // modified precision per order
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

/// Corpus BLEU without smoothing: any zero n-gram precision gives 0.
BleuResult corpus_bleu(const std::vector<std::vector<std::string>>& candidates,
                       const std::vector<std::vector<std::string>>& references, std::size_t max_n = 4);

struct EvalReport {
  PRF rouge1, rouge2, rougeL;  // macro-averaged over examples
  BleuResult bleu;
  std::size_t examples = 0;

  nlohmann::json to_json() const;
};

enum class Metric { rouge, bleu };
Metric parse_metric(std::string_view name);

EvalReport evaluate(std::span<const std::string> candidates, std::span<const std::string> references);

/// One example per line.
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace hat
