#include "hat/attention_viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hat {

AttentionTrace::AttentionTrace(std::size_t layers, std::size_t heads, std::size_t steps, std::size_t num_bos)
    : layers_(layers), heads_(heads), steps_(steps), num_bos_(num_bos), weights_(layers * heads * steps * num_bos, 0.0) {}

std::size_t AttentionTrace::index(std::size_t layer, std::size_t head, std::size_t step, std::size_t bos) const {
  if (layer >= layers_ || head >= heads_ || step >= steps_ || bos >= num_bos_)
    throw std::out_of_range("attention trace index out of range");
  return ((layer * heads_ + head) * steps_ + step) * num_bos_ + bos;
}

double& AttentionTrace::at(std::size_t layer, std::size_t head, std::size_t step, std::size_t bos) {
  return weights_[index(layer, head, step, bos)];
}

double AttentionTrace::at(std::size_t layer, std::size_t head, std::size_t step, std::size_t bos) const {
  return weights_[index(layer, head, step, bos)];
}

void AttentionTrace::check_normalized(double tol) const {
  for (std::size_t l = 0; l < layers_; ++l)
    for (std::size_t h = 0; h < heads_; ++h)
      for (std::size_t t = 0; t < steps_; ++t) {
        double s = 0.0;
        for (std::size_t b = 0; b < num_bos_; ++b) s += at(l, h, t, b);
        if (std::abs(s - 1.0) > tol)
          throw std::runtime_error("attention row (layer " + std::to_string(l) + ", head " + std::to_string(h) +
                                   ", step " + std::to_string(t) + ") sums to " + std::to_string(s));
      }
}

nlohmann::json AttentionTrace::to_json() const {
  return {{"layers", layers_}, {"heads", heads_}, {"steps", steps_}, {"num_bos", num_bos_}, {"weights", weights_}};
}

AttentionTrace AttentionTrace::from_json(const nlohmann::json& j) {
  AttentionTrace t(j.at("layers").get<std::size_t>(), j.at("heads").get<std::size_t>(),
                   j.at("steps").get<std::size_t>(), j.at("num_bos").get<std::size_t>());
  auto w = j.at("weights").get<std::vector<double>>();
  if (w.size() != t.weights_.size())
    throw std::invalid_argument("trace weights have " + std::to_string(w.size()) + " entries, expected " +
                                std::to_string(t.weights_.size()));
  t.weights_ = std::move(w);
  return t;
}

Heatmap aggregate(const AttentionTrace& trace, std::size_t layer, std::size_t k) {
  if (layer >= trace.layers())
    throw std::out_of_range("layer " + std::to_string(layer) + " out of range; trace has " +
                            std::to_string(trace.layers()) + " layers");
  if (k == 0) throw std::invalid_argument("top-k must be positive");
  const std::size_t nb = trace.num_bos(), steps = trace.steps(), heads = trace.heads();
  Heatmap map{nb, steps, std::vector<double>(nb * steps, 0.0)};
  std::vector<double> avg(nb);
  std::vector<std::size_t> order(nb);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < nb; ++b) {
      double s = 0.0;
      for (std::size_t h = 0; h < heads; ++h) s += trace.at(layer, h, t, b);
      avg[b] = s / static_cast<double>(heads);
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return avg[a] > avg[b]; });
    const std::size_t keep = std::min(k, nb);
    double total = 0.0;
    for (std::size_t i = 0; i < keep; ++i) total += avg[order[i]];
    for (std::size_t i = 0; i < keep; ++i) map.at(order[i], t) = total > 0.0 ? avg[order[i]] / total : 1.0 / static_cast<double>(keep);
  }
  return map;
}

HeatmapFormat parse_heatmap_format(std::string_view name) {
  if (name == "csv") return HeatmapFormat::csv;
  if (name == "pgm") return HeatmapFormat::pgm;
  throw std::invalid_argument("unknown heatmap format '" + std::string(name) + "'");
}

void export_heatmap(const Heatmap& heatmap, const std::filesystem::path& path, HeatmapFormat format) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write heatmap " + path.string());
  if (format == HeatmapFormat::csv) {
    for (std::size_t t = 0; t < heatmap.steps; ++t) os << (t ? "," : "") << t;
    os << '\n';
    char buf[32];
    for (std::size_t b = 0; b < heatmap.num_bos; ++b) {
      for (std::size_t t = 0; t < heatmap.steps; ++t) {
        std::snprintf(buf, sizeof buf, "%.17g", heatmap.at(b, t));
        os << (t ? "," : "") << buf;
      }
      os << '\n';
    }
  } else {
    const double mx = heatmap.weights.empty() ? 0.0 : *std::max_element(heatmap.weights.begin(), heatmap.weights.end());
    os << "P5\n" << heatmap.steps << ' ' << heatmap.num_bos << "\n255\n";
    std::vector<unsigned char> row(heatmap.steps);
    for (std::size_t b = 0; b < heatmap.num_bos; ++b) {
      for (std::size_t t = 0; t < heatmap.steps; ++t)
        row[t] = mx > 0.0 ? static_cast<unsigned char>(std::lround(255.0 * heatmap.at(b, t) / mx)) : 0;
      os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
  }
  if (!os) throw std::runtime_error("write failed for heatmap " + path.string());
}

std::vector<std::filesystem::path> export_all_layers(const AttentionTrace& trace, const std::string& prefix,
                                                     std::size_t k, HeatmapFormat format) {
  std::vector<std::filesystem::path> written;
  const char* ext = format == HeatmapFormat::csv ? "csv" : "pgm";
  for (std::size_t l = 0; l < trace.layers(); ++l) {
    std::filesystem::path p = prefix + ".layer" + std::to_string(l) + "." + ext;
    export_heatmap(aggregate(trace, l, k), p, format);
    written.push_back(std::move(p));
  }
  return written;
}

Heatmap read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": missing header");
  Heatmap map;
  map.steps = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      map.weights.push_back(std::stod(cell));
      ++n;
    }
    if (n != map.steps) throw std::runtime_error(path.string() + ": ragged row " + std::to_string(map.num_bos + 1));
    ++map.num_bos;
  }
  return map;
}

PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  PgmImage img;
  is >> magic >> img.width >> img.height >> img.maxval;
  if (!is || magic != "P5") throw std::runtime_error(path.string() + ": not a binary PGM (P5)");
  if (img.width == 0 || img.height == 0 || img.maxval == 0 || img.maxval > 255)
    throw std::runtime_error(path.string() + ": invalid PGM dimensions or maxval");
  if (!std::isspace(is.get())) throw std::runtime_error(path.string() + ": malformed PGM header");
  img.pixels.resize(img.width * img.height);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw std::runtime_error(path.string() + ": truncated PGM payload");
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path.string() + ": trailing PGM bytes");
  return img;
}

}  // namespace hat
