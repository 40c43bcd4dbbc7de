#include "hat/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "hat/evaluation.hpp"
#include "hat/generation.hpp"

namespace hat {
namespace {

std::vector<int> decoder_input(const EncodedExample& ex) {
  std::vector<int> in{kBosId};
  in.insert(in.end(), ex.target_ids.begin(), ex.target_ids.end() - 1);
  return in;
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw std::runtime_error("non-finite " + what);
}

std::vector<std::string> id_strings(std::span<const int> ids) {
  std::vector<std::string> out;
  for (int id : ids)
    if (id != kEosId && id != kPadId && id != kBosId) out.push_back(std::to_string(id));
  return out;
}

// Higher is better.
double selection_metric(Selection sel, std::span<const EncodedExample> data, const HatParameters& params,
                        const HatConfig& config) {
  GenConfig gen;
  gen.beam_width = 1;
  gen.length_penalty = 0.0;
  std::vector<std::vector<std::string>> cands, refs;
  double rouge = 0.0;
  for (const auto& ex : data) {
    gen.max_len = std::max<std::size_t>(ex.target_ids.size() * 2, 1);
    gen.max_len = std::min(gen.max_len, config.max_positions - 1);
    ForwardContext ctx;
    const auto enc = encode(ex, params, config, ctx);
    cands.push_back(id_strings(greedy_decode(enc, params, config, gen).tokens));
    refs.push_back(id_strings(ex.target_ids));
    if (sel == Selection::rougeL && !refs.back().empty()) rouge += rouge_l(cands.back(), refs.back()).f1;
  }
  if (sel == Selection::bleu) return corpus_bleu(cands, refs).bleu;
  return rouge / static_cast<double>(data.size());
}

void append_log(const std::filesystem::path& dir, const LogEntry& e) {
  if (dir.empty()) return;
  std::ofstream os(dir / "train_log.jsonl", std::ios::app);
  if (!os) throw std::runtime_error("cannot append to " + (dir / "train_log.jsonl").string());
  os << e.to_json().dump() << '\n';
}

void prepare_out_dir(const TrainOptions& options) {
  if (options.out_dir.empty()) return;
  std::filesystem::create_directories(options.out_dir);
  std::filesystem::remove(options.out_dir / "train_log.jsonl");
}

// Epoch-ordered stream of example indices, reshuffled from the seed at every
// epoch boundary.
class DataOrder {
 public:
  DataOrder(std::size_t n, std::uint64_t seed) : order_(n), seed_(seed) { reshuffle(); }

  std::size_t epoch() const { return epoch_; }

  std::vector<std::size_t> take(std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      if (cursor_ == order_.size()) {
        ++epoch_;
        reshuffle();
        if (!out.empty()) break;  // a micro-batch never spans epochs
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), 0);
    std::mt19937_64 gen(seed_ + 0x9E3779B97F4A7C15ULL * (epoch_ + 1));
    std::shuffle(order_.begin(), order_.end(), gen);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
};

}  // namespace

std::string_view to_string(Selection s) {
  switch (s) {
    case Selection::loss: return "loss";
    case Selection::bleu: return "bleu";
    case Selection::rougeL: return "rougeL";
  }
  return "?";
}

Selection parse_selection(std::string_view name) {
  if (name == "loss") return Selection::loss;
  if (name == "bleu") return Selection::bleu;
  if (name == "rougeL") return Selection::rougeL;
  throw std::invalid_argument("unknown selection criterion '" + std::string(name) + "'");
}

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("optimizer config: " + m); };
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(epsilon > 0)) fail("epsilon must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (!(peak_lr > 0)) fail("peak_lr must be positive");
  if (total_steps == 0) fail("total_steps must be positive");
  if (warmup_steps > total_steps) fail("warmup_steps exceeds total_steps");
  if (grad_accum_steps == 0) fail("grad_accum_steps must be positive");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) fail("label_smoothing must lie in [0, 1)");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must lie in [0, 1)");
  for (double p : dropout_schedule)
    if (!(p >= 0 && p < 1)) fail("dropout_schedule entries must lie in [0, 1)");
  if (batch_size == 0) fail("batch_size must be positive");
  if (valid_interval == 0) fail("valid_interval must be positive");
}

double OptimizerConfig::dropout_for_epoch(std::size_t epoch) const {
  return epoch < dropout_schedule.size() ? dropout_schedule[epoch] : dropout;
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"weight_decay", c.weight_decay},
          {"peak_lr", c.peak_lr},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"grad_accum_steps", c.grad_accum_steps},
          {"label_smoothing", c.label_smoothing},
          {"dropout", c.dropout},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"valid_interval", c.valid_interval},
          {"selection", std::string(to_string(c.selection))},
          {"dropout_schedule", c.dropout_schedule}};
}

OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("optimizer config must be a JSON object");
  OptimizerConfig c;
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw std::invalid_argument("unknown optimizer config key '" + key + "'");
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.grad_accum_steps = j.value("grad_accum_steps", c.grad_accum_steps);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.dropout = j.value("dropout", c.dropout);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.valid_interval = j.value("valid_interval", c.valid_interval);
  if (j.contains("selection")) c.selection = parse_selection(j.at("selection").get<std::string>());
  c.dropout_schedule = j.value("dropout_schedule", c.dropout_schedule);
  c.validate();
  return c;
}

OptimizerConfig load_optimizer_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  try {
    return optimizer_config_from_json(nlohmann::json::parse(is));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

double lr_at(std::size_t step, const OptimizerConfig& c) {
  if (step > c.total_steps)
    throw std::out_of_range("step " + std::to_string(step) + " outside [0, " + std::to_string(c.total_steps) + "]");
  const double s = static_cast<double>(step);
  if (step <= c.warmup_steps) return c.warmup_steps == 0 ? c.peak_lr : c.peak_lr * s / static_cast<double>(c.warmup_steps);
  return c.peak_lr * static_cast<double>(c.total_steps - step) / static_cast<double>(c.total_steps - c.warmup_steps);
}

LossSum label_smoothed_ce_sum(const Tensor& logits, std::span<const int> targets, double eps, int pad_id) {
  if (logits.rank() != 2) throw DimensionError("loss expects logits [N, V], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), V = logits.dim(1);
  if (targets.size() != n)
    throw std::invalid_argument("loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                                " logit rows");
  if (!(eps >= 0 && eps < 1)) throw std::invalid_argument("label smoothing must lie in [0, 1)");
  const bool pad_is_class = pad_id >= 0 && static_cast<std::size_t>(pad_id) < V;
  std::vector<double> q(n * V, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw std::out_of_range("target id " + std::to_string(t) + " outside [0, " + std::to_string(V) + ")");
    ++count;
    const std::size_t others = V - 1 - (pad_is_class ? 1 : 0);
    const double spread = others ? eps / static_cast<double>(others) : 0.0;
    for (std::size_t v = 0; v < V; ++v) q[i * V + v] = spread;
    if (pad_is_class) q[i * V + static_cast<std::size_t>(pad_id)] = 0.0;
    q[i * V + static_cast<std::size_t>(t)] = others ? 1.0 - eps : 1.0;
  }
  const Tensor weights({n, V}, std::move(q));
  return {scale(sum(mul(log_softmax(logits), weights)), -1.0), count};
}

Tensor label_smoothed_ce(const Tensor& logits, std::span<const int> targets, double eps, int pad_id) {
  auto ls = label_smoothed_ce_sum(logits, targets, eps, pad_id);
  if (ls.count == 0) throw std::invalid_argument("loss over an all-padding batch");
  return scale(ls.total, 1.0 / static_cast<double>(ls.count));
}

TrainState init_train_state(const std::vector<NamedTensor>& params) {
  TrainState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adam_step(const std::vector<NamedTensor>& params, TrainState& state, const OptimizerConfig& c,
               double grad_scale) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("optimizer state does not match the parameter list");
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.node()->grad)
      if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in parameter '" + p.name + "'");
  }
  const std::size_t t = state.step + 1;
  const double lr = lr_at(t, c);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Node& node = *params[i].tensor.node();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != node.value.size()) throw std::invalid_argument("moment shape mismatch for '" + params[i].name + "'");
    const bool has = !node.grad.empty();
    for (std::size_t k = 0; k < node.value.size(); ++k) {
      const double g = has ? node.grad[k] * grad_scale : 0.0;
      node.value[k] -= lr * c.weight_decay * node.value[k];
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      node.value[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + c.epsilon);
    }
  }
  state.step = t;
}

LossSum sequence_loss(const EncodedExample& example, const HatParameters& params, const HatConfig& config,
                      ForwardContext& ctx, double label_smoothing) {
  if (example.target_ids.empty()) throw std::invalid_argument("example has no target");
  const auto enc = encode(example, params, config, ctx);
  const Tensor logits = decode_step(decoder_input(example), enc, params, config, ctx);
  return label_smoothed_ce_sum(logits, example.target_ids, label_smoothing);
}

double validation_loss(std::span<const EncodedExample> data, const HatParameters& params, const HatConfig& config,
                       double label_smoothing) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : data) {
    ForwardContext ctx;
    const auto ls = sequence_loss(ex, params, config, ctx, label_smoothing);
    total += ls.total.item();
    count += ls.count;
  }
  if (count == 0) throw std::invalid_argument("validation set has no target tokens");
  return total / static_cast<double>(count);
}

double token_accuracy(std::span<const EncodedExample> data, const HatParameters& params, const HatConfig& config) {
  std::size_t hit = 0, count = 0;
  for (const auto& ex : data) {
    ForwardContext ctx;
    const auto enc = encode(ex, params, config, ctx);
    const Tensor logits = decode_step(decoder_input(ex), enc, params, config, ctx);
    const std::size_t V = logits.dim(1);
    const auto vals = logits.values();
    for (std::size_t i = 0; i < ex.target_ids.size(); ++i) {
      if (ex.target_ids[i] == kPadId) continue;
      const auto row = vals.subspan(i * V, V);
      const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      hit += arg == ex.target_ids[i];
      ++count;
    }
  }
  return count ? static_cast<double>(hit) / static_cast<double>(count) : 0.0;
}

nlohmann::json LogEntry::to_json() const {
  nlohmann::json j{{"step", step}, {"lr", lr}, {"train_loss", train_loss}};
  if (valid_loss) j["valid_loss"] = *valid_loss;
  if (valid_metric) j["valid_metric"] = *valid_metric;
  return j;
}

TrainResult train(const HatConfig& model_config, const OptimizerConfig& opt, std::span<const EncodedExample> train_set,
                  std::span<const EncodedExample> valid_set, const TrainOptions& options) {
  model_config.validate();
  opt.validate();
  if (model_config.encoder_only()) throw std::invalid_argument("train() needs an encoder-decoder mode; use mlm_pretrain");
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  if (valid_set.empty()) throw std::invalid_argument("empty validation set");
  prepare_out_dir(options);

  TrainResult result;
  HatParameters params = init_parameters(model_config, opt.seed);
  if (options.init_from) result.not_initialized = load_matching(*options.init_from, params);
  const auto named = params.named();
  TrainState state = init_train_state(named);
  DataOrder order(train_set.size(), opt.seed);
  const CounterRng dropout_seeds(opt.seed ^ 0xD1B54A32D192ED03ULL);
  HatConfig run_config = model_config;

  auto validate_now = [&](LogEntry& entry) {
    run_config.dropout = 0.0;
    entry.valid_loss = validation_loss(valid_set, params, run_config, opt.label_smoothing);
    bool better;
    if (opt.selection == Selection::loss) {
      better = *entry.valid_loss < result.best_valid_loss;
    } else {
      entry.valid_metric = selection_metric(opt.selection, valid_set, params, run_config);
      better = *entry.valid_metric > result.best_metric;
    }
    if (better) {
      result.best_valid_loss = *entry.valid_loss;
      if (entry.valid_metric) result.best_metric = *entry.valid_metric;
      result.best_step = state.step;
      result.best_params = params.clone();
      state.best_valid = *entry.valid_loss;
      if (!options.out_dir.empty()) {
        result.best_checkpoint = options.out_dir / "best.ckpt";
        save_checkpoint(result.best_checkpoint, model_config, params);
      }
    }
  };

  std::uint64_t example_counter = 0;
  while (state.step < opt.total_steps) {
    params.zero_grad();
    double loss_sum = 0.0;
    for (std::size_t micro = 0; micro < opt.grad_accum_steps; ++micro) {
      const auto batch = order.take(opt.batch_size);
      run_config.dropout = opt.dropout_for_epoch(order.epoch());
      Tensor total;
      std::size_t count = 0;
      bool first = true;
      for (std::size_t idx : batch) {
        ForwardContext ctx(true, dropout_seeds.bits(state.step, example_counter++));
        auto ls = sequence_loss(train_set[idx], params, run_config, ctx, opt.label_smoothing);
        total = first ? ls.total : add(total, ls.total);
        count += ls.count;
        first = false;
      }
      if (count == 0) throw std::invalid_argument("micro-batch without target tokens");
      const Tensor loss = scale(total, 1.0 / static_cast<double>(count));
      check_finite(loss.item(), "training loss at step " + std::to_string(state.step + 1));
      loss.backward();
      loss_sum += loss.item();
    }
    adam_step(named, state, opt, 1.0 / static_cast<double>(opt.grad_accum_steps));
    LogEntry entry{state.step, lr_at(state.step, opt), loss_sum / static_cast<double>(opt.grad_accum_steps), {}, {}};
    if (state.step % opt.valid_interval == 0 || state.step == opt.total_steps) validate_now(entry);
    result.log.push_back(entry);
    append_log(options.out_dir, entry);
    if (options.on_log) options.on_log(entry);
  }
  result.last_params = params;
  if (!options.out_dir.empty()) save_checkpoint(options.out_dir / "last.ckpt", model_config, params);
  return result;
}

MaskedExample mask_tokens(const EncodedExample& example, int mask_id, std::size_t vocab_size, std::uint64_t seed,
                          std::uint64_t stream, double mask_prob) {
  if (mask_id < kNumReserved || static_cast<std::size_t>(mask_id) >= vocab_size)
    throw std::invalid_argument("mask id " + std::to_string(mask_id) + " is not a vocabulary entry");
  const CounterRng rng(seed);
  std::vector<int> candidates;
  for (std::size_t i = 0; i < example.source_ids.size(); ++i) {
    const int id = example.source_ids[i];
    if (id >= kNumReserved || id == kUnkId) candidates.push_back(static_cast<int>(i));
  }
  if (candidates.empty()) throw std::invalid_argument("example has no maskable tokens");
  MaskedExample out{example, {}, {}};
  std::uint64_t draw = 0;
  for (int pos : candidates)
    if (rng.uniform(stream, draw++) < mask_prob) out.positions.push_back(pos);
  if (out.positions.empty())
    out.positions.push_back(candidates[rng.bits(stream, draw++) % candidates.size()]);
  const std::size_t first_corpus = static_cast<std::size_t>(kNumReserved);
  for (int pos : out.positions) {
    int& slot = out.input.source_ids[static_cast<std::size_t>(pos)];
    out.labels.push_back(slot);
    const double u = rng.uniform(stream, draw++);
    if (u < 0.8)
      slot = mask_id;
    else if (u < 0.9)
      slot = static_cast<int>(first_corpus + rng.bits(stream, draw++) % (vocab_size - first_corpus));
  }
  return out;
}

LossSum mlm_loss(const MaskedExample& example, const HatParameters& params, const HatConfig& config,
                 ForwardContext& ctx) {
  const auto out = encoder_only_forward(example.input, params, config, ctx);
  return label_smoothed_ce_sum(mlm_logits(out, example.positions, params), example.labels, 0.0);
}

double mlm_eval_loss(std::span<const EncodedExample> data, const HatParameters& params, const HatConfig& config,
                     int mask_id, std::uint64_t seed) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ForwardContext ctx;
    const auto ls = mlm_loss(mask_tokens(data[i], mask_id, config.vocab_size, seed, i), params, config, ctx);
    total += ls.total.item();
    count += ls.count;
  }
  if (count == 0) throw std::invalid_argument("no masked tokens to score");
  return total / static_cast<double>(count);
}

MlmResult mlm_pretrain(const HatConfig& encoder_config, const OptimizerConfig& opt,
                       std::span<const EncodedExample> corpus, std::span<const EncodedExample> valid_set, int mask_id,
                       const TrainOptions& options) {
  encoder_config.validate();
  opt.validate();
  if (!encoder_config.encoder_only())
    throw std::invalid_argument("mlm_pretrain needs an encoder_only_* mode, got " +
                                std::string(to_string(encoder_config.mode)));
  if (corpus.empty()) throw std::invalid_argument("empty pre-training corpus");
  prepare_out_dir(options);

  MlmResult result{init_parameters(encoder_config, opt.seed), {}, {}};
  if (options.init_from) load_matching(*options.init_from, result.params);
  const auto named = result.params.named();
  TrainState state = init_train_state(named);
  DataOrder order(corpus.size(), opt.seed);
  const CounterRng dropout_seeds(opt.seed ^ 0xD1B54A32D192ED03ULL);
  const std::uint64_t mask_seed = opt.seed ^ 0x94D049BB133111EBULL;
  HatConfig run_config = encoder_config;
  std::uint64_t example_counter = 0;

  while (state.step < opt.total_steps) {
    result.params.zero_grad();
    double loss_sum = 0.0;
    for (std::size_t micro = 0; micro < opt.grad_accum_steps; ++micro) {
      const auto batch = order.take(opt.batch_size);
      run_config.dropout = opt.dropout_for_epoch(order.epoch());
      Tensor total;
      std::size_t count = 0;
      bool first = true;
      for (std::size_t idx : batch) {
        const std::uint64_t n = example_counter++;
        ForwardContext ctx(true, dropout_seeds.bits(state.step, n));
        const auto masked = mask_tokens(corpus[idx], mask_id, encoder_config.vocab_size, mask_seed, n);
        auto ls = mlm_loss(masked, result.params, run_config, ctx);
        total = first ? ls.total : add(total, ls.total);
        count += ls.count;
        first = false;
      }
      const Tensor loss = scale(total, 1.0 / static_cast<double>(count));
      check_finite(loss.item(), "masked-token loss at step " + std::to_string(state.step + 1));
      loss.backward();
      loss_sum += loss.item();
    }
    adam_step(named, state, opt, 1.0 / static_cast<double>(opt.grad_accum_steps));
    LogEntry entry{state.step, lr_at(state.step, opt), loss_sum / static_cast<double>(opt.grad_accum_steps), {}, {}};
    if (!valid_set.empty() && (state.step % opt.valid_interval == 0 || state.step == opt.total_steps)) {
      run_config.dropout = 0.0;
      entry.valid_loss = mlm_eval_loss(valid_set, result.params, run_config, mask_id, opt.seed);
    }
    result.log.push_back(entry);
    append_log(options.out_dir, entry);
    if (options.on_log) options.on_log(entry);
  }
  if (!options.out_dir.empty()) {
    result.checkpoint = options.out_dir / "mlm.ckpt";
    save_checkpoint(result.checkpoint, encoder_config, result.params);
  }
  return result;
}

}  // namespace hat
