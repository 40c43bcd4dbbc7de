#include "hat/model.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace hat {
namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

AttentionWeights make_attention(std::size_t d) {
  return {Tensor({d, d}), Tensor({d}), Tensor({d, d}), Tensor({d}),
          Tensor({d, d}), Tensor({d}), Tensor({d, d}), Tensor({d})};
}
FeedForwardWeights make_ffn(std::size_t d, std::size_t f) {
  return {Tensor({d, f}), Tensor({f}), Tensor({f, d}), Tensor({d})};
}
NormWeights make_norm(std::size_t d) { return {Tensor({d}, 1.0), Tensor({d})}; }

EncoderLayerWeights make_encoder_layer(const HatConfig& c, bool with_hier) {
  EncoderLayerWeights w{make_attention(c.hidden_size), make_norm(c.hidden_size), std::nullopt, std::nullopt,
                        make_ffn(c.hidden_size, c.ffn_size), make_norm(c.hidden_size)};
  if (with_hier) {
    w.hier_attn = make_attention(c.hidden_size);
    w.hier_norm = make_norm(c.hidden_size);
  }
  return w;
}

DecoderLayerWeights make_decoder_layer(const HatConfig& c, bool with_hier) {
  DecoderLayerWeights w{make_attention(c.hidden_size), make_norm(c.hidden_size),
                        make_attention(c.hidden_size), make_norm(c.hidden_size),
                        std::nullopt,                  std::nullopt,
                        make_ffn(c.hidden_size, c.ffn_size), make_norm(c.hidden_size)};
  if (with_hier) {
    w.hier_attn = make_attention(c.hidden_size);
    w.hier_norm = make_norm(c.hidden_size);
  }
  return w;
}

void push_attention(std::vector<NamedTensor>& out, const std::string& p, const AttentionWeights& a) {
  out.push_back({p + ".wq", a.wq});
  out.push_back({p + ".bq", a.bq});
  out.push_back({p + ".wk", a.wk});
  out.push_back({p + ".bk", a.bk});
  out.push_back({p + ".wv", a.wv});
  out.push_back({p + ".bv", a.bv});
  out.push_back({p + ".wo", a.wo});
  out.push_back({p + ".bo", a.bo});
}
void push_norm(std::vector<NamedTensor>& out, const std::string& p, const NormWeights& n) {
  out.push_back({p + ".gain", n.gain});
  out.push_back({p + ".bias", n.bias});
}
void push_ffn(std::vector<NamedTensor>& out, const std::string& p, const FeedForwardWeights& f) {
  out.push_back({p + ".w1", f.w1});
  out.push_back({p + ".b1", f.b1});
  out.push_back({p + ".w2", f.w2});
  out.push_back({p + ".b2", f.b2});
}
void push_encoder_layer(std::vector<NamedTensor>& out, const std::string& p, const EncoderLayerWeights& l) {
  push_attention(out, p + ".self_attn", l.self_attn);
  push_norm(out, p + ".self_norm", l.self_norm);
  if (l.hier_attn) push_attention(out, p + ".hier_attn", *l.hier_attn);
  if (l.hier_norm) push_norm(out, p + ".hier_norm", *l.hier_norm);
  push_ffn(out, p + ".ffn", l.ffn);
  push_norm(out, p + ".ffn_norm", l.ffn_norm);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

Tensor feed_forward(const Tensor& x, const FeedForwardWeights& f) {
  return linear(gelu(linear(x, f.w1, f.b1)), f.w2, f.b2);
}

Tensor norm(const Tensor& x, const NormWeights& n, const HatConfig& c) {
  return layer_norm(x, n.gain, n.bias, c.layer_norm_eps);
}

Tensor drop(const Tensor& x, const HatConfig& c, ForwardContext& ctx) {
  if (!ctx.train() || c.dropout == 0.0) return x;
  return dropout(x, c.dropout, true, ctx.rng(), ctx.next_stream());
}

struct AttentionResult {
  Tensor out;
  Tensor probs;  // [h, Lq, Lk]
};

// `keep` has Lq*Lk entries or is empty for unrestricted attention.
AttentionResult attention(const Tensor& query_in, const Tensor& kv_in, const AttentionWeights& w,
                          std::span<const std::uint8_t> keep, const HatConfig& c, ForwardContext& ctx) {
  const std::size_t h = c.num_heads;
  const Tensor q = split_heads(linear(query_in, w.wq, w.bq), h);
  const Tensor k = split_heads(linear(kv_in, w.wk, w.bk), h);
  const Tensor v = split_heads(linear(kv_in, w.wv, w.bv), h);
  const Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(c.head_dim())));
  Tensor probs = keep.empty() ? softmax(scores, -1) : masked_softmax(scores, keep);
  const Tensor context = merge_heads(matmul(drop(probs, c, ctx), v));
  return {linear(context, w.wo, w.bo), probs};
}

Tensor encoder_layer(const Tensor& x_in, const EncoderLayerWeights& w, std::span<const int> bos_positions,
                     const HatConfig& c, ForwardContext& ctx) {
  Tensor x = norm(add(x_in, drop(attention(x_in, x_in, w.self_attn, {}, c, ctx).out, c, ctx)), w.self_norm, c);
  if (w.hier_attn) {
    // Pre-norm residual: a zero output projection leaves x untouched.
    const Tensor normed = norm(x, *w.hier_norm, c);
    const Tensor bos_rows = gather_rows(normed, bos_positions);
    x = add(x, drop(attention(normed, bos_rows, *w.hier_attn, {}, c, ctx).out, c, ctx));
  }
  return norm(add(x, drop(feed_forward(x, w.ffn), c, ctx)), w.ffn_norm, c);
}

void check_source(const EncodedExample& ex, const HatConfig& c) {
  if (ex.source_ids.empty()) throw std::invalid_argument("empty source sequence");
  if (ex.source_ids.size() > c.max_positions)
    throw std::invalid_argument("source length " + std::to_string(ex.source_ids.size()) +
                                " exceeds max_positions " + std::to_string(c.max_positions));
  if (ex.segment_ids.size() != ex.source_ids.size())
    throw std::invalid_argument("segment_ids length differs from source length");
  for (int s : ex.segment_ids)
    if (s < 0 || static_cast<std::size_t>(s) >= c.num_segments)
      throw std::invalid_argument("segment id " + std::to_string(s) + " outside [0, " +
                                  std::to_string(c.num_segments) + ")");
}

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i);
  return v;
}

}  // namespace

std::string_view to_string(ModelMode mode) {
  switch (mode) {
    case ModelMode::hat: return "hat";
    case ModelMode::plain: return "plain";
    case ModelMode::encoder_only_hat: return "encoder_only_hat";
    case ModelMode::encoder_only_plain: return "encoder_only_plain";
  }
  return "?";
}

ModelMode parse_model_mode(std::string_view name) {
  for (auto m : {ModelMode::hat, ModelMode::plain, ModelMode::encoder_only_hat, ModelMode::encoder_only_plain})
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown model mode '" + std::string(name) + "'");
}

void HatConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("invalid HatConfig: " + m); };
  if (hidden_size == 0 || num_heads == 0 || hidden_size % num_heads != 0)
    fail("hidden_size must be a positive multiple of num_heads");
  if (num_layers == 0) fail("num_layers must be positive");
  if (ffn_size == 0) fail("ffn_size must be positive");
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) fail("vocab_size must exceed the reserved ids");
  if (max_positions == 0) fail("max_positions must be positive");
  if (num_segments == 0) fail("num_segments must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (layer_norm_eps <= 0.0) fail("layer_norm_eps must be positive");
  if (mode == ModelMode::plain && num_hier_layers != 0) fail("plain mode requires num_hier_layers = 0");
}

nlohmann::json to_json(const HatConfig& c) {
  return {{"num_layers", c.num_layers},     {"hidden_size", c.hidden_size},
          {"ffn_size", c.ffn_size},         {"num_heads", c.num_heads},
          {"num_hier_layers", c.num_hier_layers}, {"vocab_size", c.vocab_size},
          {"max_positions", c.max_positions}, {"num_segments", c.num_segments},
          {"dropout", c.dropout},           {"layer_norm_eps", c.layer_norm_eps},
          {"mode", std::string(to_string(c.mode))}};
}

HatConfig config_from_json(const nlohmann::json& j) {
  HatConfig c;
  c.num_layers = j.value("num_layers", c.num_layers);
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.ffn_size = j.value("ffn_size", c.ffn_size);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.num_segments = j.value("num_segments", c.num_segments);
  c.dropout = j.value("dropout", c.dropout);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  c.mode = parse_model_mode(j.value("mode", std::string("hat")));
  c.num_hier_layers = j.value("num_hier_layers", c.mode == ModelMode::plain ? std::size_t{0} : std::size_t{1});
  for (const auto& [key, _] : j.items())
    if (!to_json(c).contains(key)) throw std::invalid_argument("unknown model config key '" + key + "'");
  return c;
}

HatConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read model config " + path.string());
  try {
    return config_from_json(nlohmann::json::parse(is));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::vector<NamedTensor> HatParameters::named() const {
  std::vector<NamedTensor> out;
  out.push_back({"token_embedding", token_embedding});
  out.push_back({"source_positions", source_positions});
  if (target_positions) out.push_back({"target_positions", *target_positions});
  out.push_back({"segment_embedding", segment_embedding});
  for (std::size_t i = 0; i < encoder.size(); ++i) push_encoder_layer(out, "encoder." + std::to_string(i), encoder[i]);
  for (std::size_t i = 0; i < hier_encoder.size(); ++i)
    push_encoder_layer(out, "hier_encoder." + std::to_string(i), hier_encoder[i]);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const auto p = "decoder." + std::to_string(i);
    const auto& l = decoder[i];
    push_attention(out, p + ".self_attn", l.self_attn);
    push_norm(out, p + ".self_norm", l.self_norm);
    push_attention(out, p + ".cross_attn", l.cross_attn);
    push_norm(out, p + ".cross_norm", l.cross_norm);
    if (l.hier_attn) push_attention(out, p + ".hier_attn", *l.hier_attn);
    if (l.hier_norm) push_norm(out, p + ".hier_norm", *l.hier_norm);
    push_ffn(out, p + ".ffn", l.ffn);
    push_norm(out, p + ".ffn_norm", l.ffn_norm);
  }
  return out;
}

HatParameters HatParameters::clone() const {
  HatParameters copy = *this;  // shares nodes until each handle is rebound
  auto fresh = [](Tensor& t) {
    t = Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), t.requires_grad());
  };
  auto attn = [&](AttentionWeights& a) {
    for (Tensor* t : {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo}) fresh(*t);
  };
  auto nrm = [&](NormWeights& n) {
    fresh(n.gain);
    fresh(n.bias);
  };
  auto ffn = [&](FeedForwardWeights& f) {
    for (Tensor* t : {&f.w1, &f.b1, &f.w2, &f.b2}) fresh(*t);
  };
  auto enc = [&](EncoderLayerWeights& l) {
    attn(l.self_attn);
    nrm(l.self_norm);
    if (l.hier_attn) attn(*l.hier_attn);
    if (l.hier_norm) nrm(*l.hier_norm);
    ffn(l.ffn);
    nrm(l.ffn_norm);
  };
  fresh(copy.token_embedding);
  fresh(copy.source_positions);
  if (copy.target_positions) fresh(*copy.target_positions);
  fresh(copy.segment_embedding);
  for (auto& l : copy.encoder) enc(l);
  for (auto& l : copy.hier_encoder) enc(l);
  for (auto& l : copy.decoder) {
    attn(l.self_attn);
    nrm(l.self_norm);
    attn(l.cross_attn);
    nrm(l.cross_norm);
    if (l.hier_attn) attn(*l.hier_attn);
    if (l.hier_norm) nrm(*l.hier_norm);
    ffn(l.ffn);
    nrm(l.ffn_norm);
  }
  return copy;
}

void HatParameters::zero_grad() const {
  for (auto& nt : named()) {
    Tensor t = nt.tensor;
    t.zero_grad();
  }
}

std::size_t HatParameters::numel() const {
  std::size_t n = 0;
  for (const auto& nt : named()) n += nt.tensor.numel();
  return n;
}

HatParameters init_parameters(const HatConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.hidden_size;
  HatParameters p;
  p.token_embedding = Tensor({config.vocab_size, d});
  p.source_positions = Tensor({config.max_positions, d});
  if (!config.encoder_only()) p.target_positions = Tensor({config.max_positions, d});
  p.segment_embedding = Tensor({config.num_segments, d});
  for (std::size_t i = 0; i < config.num_layers; ++i)
    p.encoder.push_back(make_encoder_layer(config, config.mode == ModelMode::encoder_only_hat));
  for (std::size_t i = 0; i < config.hier_encoder_layers(); ++i) p.hier_encoder.push_back(make_encoder_layer(config, false));
  if (!config.encoder_only())
    for (std::size_t i = 0; i < config.num_layers; ++i)
      p.decoder.push_back(make_decoder_layer(config, config.mode == ModelMode::hat));

  // Each weight matrix draws from its own stream keyed by name, so modes
  // sharing a tensor name also share its initial values.
  const CounterRng rng(seed);
  for (auto& nt : p.named()) {
    const bool is_weight = nt.name == "token_embedding" || ends_with(nt.name, "_positions") ||
                           nt.name == "segment_embedding" || ends_with(nt.name, ".wq") ||
                           ends_with(nt.name, ".wk") || ends_with(nt.name, ".wv") || ends_with(nt.name, ".wo") ||
                           ends_with(nt.name, ".w1") || ends_with(nt.name, ".w2");
    Tensor t = nt.tensor;
    if (is_weight) {
      const std::uint64_t stream = fnv1a(nt.name);
      auto vals = t.mutable_values();
      for (std::size_t j = 0; j < vals.size(); ++j) {
        const double u1 = rng.uniform(stream, 2 * j);
        const double u2 = rng.uniform(stream, 2 * j + 1);
        vals[j] = 0.02 * std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
      }
    }
    t.set_requires_grad(true);
  }
  return p;
}

void zero_hierarchical_output(HatParameters& params) {
  const auto zero = [](AttentionWeights& a) {
    for (auto& v : a.wo.mutable_values()) v = 0.0;
    for (auto& v : a.bo.mutable_values()) v = 0.0;
  };
  for (auto& l : params.encoder)
    if (l.hier_attn) zero(*l.hier_attn);
  for (auto& l : params.decoder)
    if (l.hier_attn) zero(*l.hier_attn);
}

Tensor source_embeddings(const EncodedExample& example, const HatParameters& params, const HatConfig& config) {
  check_source(example, config);
  for (int id : example.source_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size)
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  const auto positions = iota_ids(example.source_ids.size());
  return add(add(embedding(params.token_embedding, example.source_ids), gather_rows(params.source_positions, positions)),
             embedding(params.segment_embedding, example.segment_ids));
}

Tensor hierarchical_encode(const Tensor& token_states, std::span<const int> bos_positions, const HatParameters& params,
                           const HatConfig& config, ForwardContext& ctx) {
  if (bos_positions.empty()) throw std::invalid_argument("hierarchical encoding needs at least one BOS position");
  Tensor h = gather_rows(token_states, bos_positions);
  for (const auto& layer : params.hier_encoder) h = encoder_layer(h, layer, {}, config, ctx);
  return h;
}

EncoderOutput encode(const EncodedExample& example, const HatParameters& params, const HatConfig& config,
                     ForwardContext& ctx) {
  if (config.encoder_only()) throw std::invalid_argument("encode() called with an encoder-only mode");
  Tensor x = drop(source_embeddings(example, params, config), config, ctx);
  for (const auto& layer : params.encoder) x = encoder_layer(x, layer, {}, config, ctx);
  EncoderOutput out{x, std::nullopt, example.bos_positions};
  if (config.mode == ModelMode::hat) out.hier_states = hierarchical_encode(x, example.bos_positions, params, config, ctx);
  return out;
}

std::vector<EncoderOutput> encode(const Batch& batch, const HatParameters& params, const HatConfig& config,
                                  ForwardContext& ctx) {
  std::vector<EncoderOutput> out;
  out.reserve(batch.size());
  for (std::size_t r = 0; r < batch.size(); ++r) out.push_back(encode(batch.row(r), params, config, ctx));
  return out;
}

Tensor decoder_forward(const Tensor& inputs, const EncoderOutput& enc, const HatParameters& params,
                       const HatConfig& config, ForwardContext& ctx, DecoderTrace* trace) {
  const std::size_t T = inputs.dim(0);
  if (T > config.max_positions)
    throw std::invalid_argument("target prefix length " + std::to_string(T) + " exceeds max_positions " +
                                std::to_string(config.max_positions));
  if (config.mode == ModelMode::hat && !enc.hier_states)
    throw std::invalid_argument("hat decoder requires hierarchical encoder states");
  std::vector<std::uint8_t> causal(T * T, 0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j <= i; ++j) causal[i * T + j] = 1;

  if (trace) trace->hier_attention.clear();
  Tensor x = inputs;
  for (const auto& layer : params.decoder) {
    x = norm(add(x, drop(attention(x, x, layer.self_attn, causal, config, ctx).out, config, ctx)), layer.self_norm,
             config);
    x = norm(add(x, drop(attention(x, enc.token_states, layer.cross_attn, {}, config, ctx).out, config, ctx)),
             layer.cross_norm, config);
    if (config.mode == ModelMode::hat && layer.hier_attn) {
      auto res = attention(norm(x, *layer.hier_norm, config), *enc.hier_states, *layer.hier_attn, {}, config, ctx);
      x = add(x, drop(res.out, config, ctx));
      if (trace) trace->hier_attention.push_back(res.probs.detach());
    }
    x = norm(add(x, drop(feed_forward(x, layer.ffn), config, ctx)), layer.ffn_norm, config);
  }
  return x;
}

Tensor decode_step(std::span<const int> target_prefix, const EncoderOutput& enc, const HatParameters& params,
                   const HatConfig& config, ForwardContext& ctx, DecoderTrace* trace) {
  if (config.encoder_only()) throw std::invalid_argument("decode_step() called with an encoder-only mode");
  if (target_prefix.empty()) throw std::invalid_argument("decoder prefix must start with BOS");
  if (target_prefix.size() > config.max_positions)
    throw std::invalid_argument("target prefix length " + std::to_string(target_prefix.size()) +
                                " exceeds max_positions " + std::to_string(config.max_positions));
  const auto positions = iota_ids(target_prefix.size());
  const Tensor inputs =
      drop(add(embedding(params.token_embedding, target_prefix), gather_rows(*params.target_positions, positions)),
           config, ctx);
  const Tensor hidden = decoder_forward(inputs, enc, params, config, ctx, trace);
  return matmul(hidden, transpose(params.token_embedding));
}

std::vector<double> next_token_logits(std::span<const int> target_prefix, const EncoderOutput& enc,
                                      const HatParameters& params, const HatConfig& config) {
  if (target_prefix.empty()) throw std::invalid_argument("decoder prefix must start with BOS");
  ForwardContext ctx;
  const auto positions = iota_ids(target_prefix.size());
  const Tensor inputs =
      add(embedding(params.token_embedding, target_prefix), gather_rows(*params.target_positions, positions));
  const Tensor hidden = decoder_forward(inputs, enc, params, config, ctx);
  const int last = static_cast<int>(target_prefix.size()) - 1;
  const Tensor logits = matmul(gather_rows(hidden, std::span<const int>(&last, 1)), transpose(params.token_embedding));
  return {logits.values().begin(), logits.values().end()};
}

EncoderOnlyOutput encoder_only_forward(const EncodedExample& example, const HatParameters& params,
                                       const HatConfig& config, ForwardContext& ctx) {
  if (!config.encoder_only())
    throw std::invalid_argument("encoder_only_forward() requires an encoder_only_* mode, got " +
                                std::string(to_string(config.mode)));
  if (config.mode == ModelMode::encoder_only_hat && example.bos_positions.empty())
    throw std::invalid_argument("hierarchical encoder needs at least one BOS position");
  Tensor x = drop(source_embeddings(example, params, config), config, ctx);
  for (const auto& layer : params.encoder) x = encoder_layer(x, layer, example.bos_positions, config, ctx);
  const int first = 0;
  return {x, gather_rows(x, std::span<const int>(&first, 1))};
}

Tensor mlm_logits(const EncoderOnlyOutput& out, std::span<const int> masked_positions, const HatParameters& params) {
  return matmul(gather_rows(out.token_states, masked_positions), transpose(params.token_embedding));
}

ParameterBreakdown parameter_breakdown(const HatConfig& c) {
  c.validate();
  const std::size_t d = c.hidden_size, f = c.ffn_size, L = c.num_layers;
  const std::size_t attn = 4 * d * d + 4 * d;
  const std::size_t ln = 2 * d;
  const std::size_t ffn = 2 * d * f + f + d;
  const std::size_t enc_layer = attn + ffn + 2 * ln;
  const std::size_t dec_layer = 2 * attn + ffn + 3 * ln;
  const std::size_t hier_block = attn + ln;

  ParameterBreakdown b;
  b.token_embedding = c.vocab_size * d;
  b.positions = c.max_positions * d * (c.encoder_only() ? 1 : 2);
  b.segments = c.num_segments * d;
  b.encoder = L * enc_layer;
  if (c.mode == ModelMode::encoder_only_hat) {
    b.encoder_hier = L * hier_block;
    b.encoder += b.encoder_hier;
  }
  b.hier_encoder = c.hier_encoder_layers() * enc_layer;
  if (!c.encoder_only()) {
    b.decoder = L * dec_layer;
    if (c.mode == ModelMode::hat) {
      b.decoder_hier = L * hier_block;
      b.decoder += b.decoder_hier;
    }
  }
  return b;
}

std::size_t count_parameters(const HatConfig& config) { return parameter_breakdown(config).total(); }

std::size_t hierarchical_delta(const HatConfig& c) {
  const std::size_t d = c.hidden_size, f = c.ffn_size, L = c.num_layers;
  const std::size_t hier_block = 4 * d * d + 6 * d;
  if (c.encoder_only()) return L * hier_block;
  const std::size_t enc_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
  const std::size_t hier_layers = c.mode == ModelMode::plain ? 1 : c.num_hier_layers;
  return L * hier_block + hier_layers * enc_layer;
}

}  // namespace hat
