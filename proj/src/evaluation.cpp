#include "hat/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "hat/text_pipeline.hpp"

namespace hat {
namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(std::span<const std::string> tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

std::size_t clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return overlap;
}

std::size_t total(const NgramCounts& counts) {
  std::size_t t = 0;
  for (const auto& [_, c] : counts) t += c;
  return t;
}

PRF make_prf(double overlap, double cand_total, double ref_total) {
  PRF r;
  r.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  r.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

}  // namespace

std::vector<std::string> score_tokens(std::string_view text) { return tokenize(text, true); }

PRF rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n) {
  if (n == 0) throw std::invalid_argument("rouge_n: n must be at least 1");
  if (reference.empty()) throw std::invalid_argument("rouge_n: empty reference");
  const auto c = ngrams(candidate, n), r = ngrams(reference, n);
  return make_prf(static_cast<double>(clipped_overlap(c, r)), static_cast<double>(total(c)),
                  static_cast<double>(total(r)));
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

PRF rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (reference.empty()) throw std::invalid_argument("rouge_l: empty reference");
  return make_prf(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
                  static_cast<double>(reference.size()));
}

BleuResult corpus_bleu(const std::vector<std::vector<std::string>>& candidates,
                       const std::vector<std::vector<std::string>>& references, std::size_t max_n) {
  if (candidates.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (candidates.size() != references.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(candidates.size()) + " candidates but " +
                                std::to_string(references.size()) + " references");
  if (max_n == 0) throw std::invalid_argument("corpus_bleu: max_n must be at least 1");
  BleuResult res;
  std::vector<std::size_t> matched(max_n, 0), possible(max_n, 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    res.candidate_length += candidates[i].size();
    res.reference_length += references[i].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto c = ngrams(candidates[i], n);
      matched[n - 1] += clipped_overlap(c, ngrams(references[i], n));
      possible[n - 1] += total(c);
    }
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < max_n; ++n) {
    const double p = possible[n] ? static_cast<double>(matched[n]) / static_cast<double>(possible[n]) : 0.0;
    res.precisions.push_back(p);
    if (p == 0.0)
      zero = true;
    else
      log_sum += std::log(p);
  }
  const double c = static_cast<double>(res.candidate_length), r = static_cast<double>(res.reference_length);
  res.brevity_penalty = c == 0.0 ? 0.0 : (c < r ? std::exp(1.0 - r / c) : 1.0);
  res.bleu = zero ? 0.0 : 100.0 * res.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return res;
}

nlohmann::json EvalReport::to_json() const {
  auto prf = [](const PRF& p) { return nlohmann::json{{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}}; };
  return {{"examples", examples},
          {"rouge1", prf(rouge1)},
          {"rouge2", prf(rouge2)},
          {"rougeL", prf(rougeL)},
          {"bleu", bleu.bleu},
          {"brevity_penalty", bleu.brevity_penalty},
          {"precisions", bleu.precisions}};
}

Metric parse_metric(std::string_view name) {
  if (name == "rouge") return Metric::rouge;
  if (name == "bleu") return Metric::bleu;
  throw std::invalid_argument("unknown metric '" + std::string(name) + "'");
}

EvalReport evaluate(std::span<const std::string> candidates, std::span<const std::string> references) {
  if (candidates.size() != references.size())
    throw std::invalid_argument(std::to_string(candidates.size()) + " candidates but " +
                                std::to_string(references.size()) + " references");
  if (candidates.empty()) throw std::invalid_argument("nothing to evaluate");
  EvalReport rep;
  rep.examples = candidates.size();
  std::vector<std::vector<std::string>> cand_tok, ref_tok;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_tok.push_back(score_tokens(candidates[i]));
    ref_tok.push_back(score_tokens(references[i]));
    if (ref_tok.back().empty()) throw std::invalid_argument("reference " + std::to_string(i + 1) + " is empty");
    auto accumulate = [&](PRF& into, const PRF& p) {
      into.precision += p.precision;
      into.recall += p.recall;
      into.f1 += p.f1;
    };
    accumulate(rep.rouge1, rouge_n(cand_tok.back(), ref_tok.back(), 1));
    accumulate(rep.rouge2, rouge_n(cand_tok.back(), ref_tok.back(), 2));
    accumulate(rep.rougeL, rouge_l(cand_tok.back(), ref_tok.back()));
  }
  const double n = static_cast<double>(rep.examples);
  for (PRF* p : {&rep.rouge1, &rep.rouge2, &rep.rougeL}) {
    p->precision /= n;
    p->recall /= n;
    p->f1 /= n;
  }
  rep.bleu = corpus_bleu(cand_tok, ref_tok);
  return rep;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace hat
