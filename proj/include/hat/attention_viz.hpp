#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace hat {

/// Decoder-to-BOS hierarchical attention recorded while generating:
/// weights[layer][head][step][bos].
class AttentionTrace {
 public:
  AttentionTrace() = default;
  AttentionTrace(std::size_t layers, std::size_t heads, std::size_t steps, std::size_t num_bos);

  std::size_t layers() const { return layers_; }
  std::size_t heads() const { return heads_; }
  std::size_t steps() const { return steps_; }
  std::size_t num_bos() const { return num_bos_; }

  double& at(std::size_t layer, std::size_t head, std::size_t step, std::size_t bos);
  double at(std::size_t layer, std::size_t head, std::size_t step, std::size_t bos) const;

  /// Throws if any (layer, head, step) row does not sum to 1 within `tol`.
  void check_normalized(double tol = 1e-6) const;

  nlohmann::json to_json() const;
  static AttentionTrace from_json(const nlohmann::json& j);

 private:
  std::size_t index(std::size_t layer, std::size_t head, std::size_t step, std::size_t bos) const;

  std::size_t layers_ = 0, heads_ = 0, steps_ = 0, num_bos_ = 0;
  std::vector<double> weights_;
};

/// One layer's aggregated map: rows are BOS indices, columns generation steps.
struct Heatmap {
  std::size_t num_bos = 0;
  std::size_t steps = 0;
  std::vector<double> weights;  // row-major [num_bos][steps]

  double at(std::size_t bos, std::size_t step) const { return weights[bos * steps + step]; }
  double& at(std::size_t bos, std::size_t step) { return weights[bos * steps + step]; }
};

/// Head-mean per generated token, keep the top-k BOS entries (lower index
/// wins ties), zero the rest and renormalize each column to 1.
Heatmap aggregate(const AttentionTrace& trace, std::size_t layer, std::size_t k = 16);

enum class HeatmapFormat { csv, pgm };
HeatmapFormat parse_heatmap_format(std::string_view name);

/// CSV: header of step indices, then one row of weights per BOS index.
/// PGM: binary P5, width = steps, height = num_bos, round(255 * w / max w).
void export_heatmap(const Heatmap& heatmap, const std::filesystem::path& path, HeatmapFormat format);
/// Writes `{prefix}.layer{i}.{ext}` for every layer of the trace.
std::vector<std::filesystem::path> export_all_layers(const AttentionTrace& trace, const std::string& prefix,
                                                     std::size_t k, HeatmapFormat format);

Heatmap read_heatmap_csv(const std::filesystem::path& path);

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::vector<unsigned char> pixels;
};
/// Strict P5 reader; throws on any malformed header or short payload.
PgmImage read_pgm(const std::filesystem::path& path);

}  // namespace hat
