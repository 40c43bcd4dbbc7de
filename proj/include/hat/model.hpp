#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hat/tensor.hpp"
#include "hat/text_pipeline.hpp"
#include "json.hpp"

namespace hat {

enum class ModelMode { hat, plain, encoder_only_hat, encoder_only_plain };

std::string_view to_string(ModelMode mode);
ModelMode parse_model_mode(std::string_view name);

struct HatConfig {
  std::size_t num_layers = 2;  // encoder and decoder each
  std::size_t hidden_size = 64;
  std::size_t ffn_size = 256;
  std::size_t num_heads = 4;
  std::size_t num_hier_layers = 1;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 512;
  std::size_t num_segments = 1;
  double dropout = 0.1;
  double layer_norm_eps = 1e-5;
  ModelMode mode = ModelMode::hat;

  void validate() const;
  bool encoder_only() const { return mode == ModelMode::encoder_only_hat || mode == ModelMode::encoder_only_plain; }
  bool hierarchical() const { return mode == ModelMode::hat || mode == ModelMode::encoder_only_hat; }
  /// Extra BOS-only encoder layers; zero outside hat mode.
  std::size_t hier_encoder_layers() const { return mode == ModelMode::hat ? num_hier_layers : 0; }
  std::size_t head_dim() const { return hidden_size / num_heads; }
};

nlohmann::json to_json(const HatConfig& config);
HatConfig config_from_json(const nlohmann::json& j);
HatConfig load_model_config(const std::filesystem::path& path);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};
struct FeedForwardWeights {
  Tensor w1, b1, w2, b2;
};
struct NormWeights {
  Tensor gain, bias;
};

/// Post-norm encoder layer. The optional hierarchical block is used by the
/// encoder-only hierarchical variant.
struct EncoderLayerWeights {
  AttentionWeights self_attn;
  NormWeights self_norm;
  std::optional<AttentionWeights> hier_attn;
  std::optional<NormWeights> hier_norm;
  FeedForwardWeights ffn;
  NormWeights ffn_norm;
};

struct DecoderLayerWeights {
  AttentionWeights self_attn;
  NormWeights self_norm;
  AttentionWeights cross_attn;
  NormWeights cross_norm;
  std::optional<AttentionWeights> hier_attn;
  std::optional<NormWeights> hier_norm;
  FeedForwardWeights ffn;
  NormWeights ffn_norm;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct HatParameters {
  Tensor token_embedding;     // [V, d], also the tied output projection
  Tensor source_positions;    // [max_positions, d]
  std::optional<Tensor> target_positions;  // absent for encoder-only modes
  Tensor segment_embedding;   // [num_segments, d]
  std::vector<EncoderLayerWeights> encoder;
  std::vector<EncoderLayerWeights> hier_encoder;
  std::vector<DecoderLayerWeights> decoder;

  /// Every learnable tensor in a fixed order with stable dotted names.
  std::vector<NamedTensor> named() const;
  /// Deep copy with fresh leaves.
  HatParameters clone() const;
  void zero_grad() const;
  std::size_t numel() const;
};

/// Normal(0, 0.02) weights, zero biases, unit gains; deterministic in `seed`.
HatParameters init_parameters(const HatConfig& config, std::uint64_t seed);

/// Zeroes the output projection (weight and bias) of every hierarchical
/// attention block, which turns each of them into an identity sublayer.
void zero_hierarchical_output(HatParameters& params);

/// Per-forward state: train/eval switch and the dropout stream counter.
class ForwardContext {
 public:
  ForwardContext() = default;
  ForwardContext(bool train, std::uint64_t seed) : train_(train), rng_(seed) {}
  bool train() const { return train_; }
  const CounterRng& rng() const { return rng_; }
  std::uint64_t next_stream() { return stream_++; }

 private:
  bool train_ = false;
  CounterRng rng_{0};
  std::uint64_t stream_ = 0;
};

struct EncoderOutput {
  Tensor token_states;                // [src_len, d]
  std::optional<Tensor> hier_states;  // [num_bos, d]; absent in plain mode
  std::vector<int> bos_positions;

  std::size_t num_hier_rows() const { return hier_states ? hier_states->dim(0) : 0; }
};

/// Per decoder layer: hierarchical attention probabilities [heads, T, num_bos].
struct DecoderTrace {
  std::vector<Tensor> hier_attention;
};

/// Token embeddings + learned positions + segment embeddings.
Tensor source_embeddings(const EncodedExample& example, const HatParameters& params,
                         const HatConfig& config);

EncoderOutput encode(const EncodedExample& example, const HatParameters& params, const HatConfig& config,
                     ForwardContext& ctx);
/// Encodes every row of a padded batch; padding positions are excluded.
std::vector<EncoderOutput> encode(const Batch& batch, const HatParameters& params, const HatConfig& config,
                                  ForwardContext& ctx);

/// The hierarchical encoder layer(s): a Transformer layer run on the rows of
/// `token_states` selected by `bos_positions`, and nothing else.
Tensor hierarchical_encode(const Tensor& token_states, std::span<const int> bos_positions,
                           const HatParameters& params, const HatConfig& config, ForwardContext& ctx);

/// Runs the decoder stack on already-embedded inputs [T, d] and returns the
/// final hidden states [T, d].
Tensor decoder_forward(const Tensor& inputs, const EncoderOutput& enc, const HatParameters& params,
                       const HatConfig& config, ForwardContext& ctx, DecoderTrace* trace = nullptr);

/// Teacher-forced decoder over `target_prefix` (starting with BOS); returns
/// logits [T, V] through the tied embedding.
Tensor decode_step(std::span<const int> target_prefix, const EncoderOutput& enc, const HatParameters& params,
                   const HatConfig& config, ForwardContext& ctx, DecoderTrace* trace = nullptr);

/// Logits for the token following `target_prefix`, computed from the last
/// decoder row only. Eval mode.
std::vector<double> next_token_logits(std::span<const int> target_prefix, const EncoderOutput& enc,
                                      const HatParameters& params, const HatConfig& config);

struct EncoderOnlyOutput {
  Tensor token_states;  // [len, d]
  Tensor pooled;        // [1, d], state of the first token
};

EncoderOnlyOutput encoder_only_forward(const EncodedExample& example, const HatParameters& params,
                                       const HatConfig& config, ForwardContext& ctx);

/// Masked-token prediction head: tied projection of the selected rows.
Tensor mlm_logits(const EncoderOnlyOutput& out, std::span<const int> masked_positions,
                  const HatParameters& params);

// ---- parameter accounting --------------------------------------------------

struct ParameterBreakdown {
  std::size_t token_embedding = 0;
  std::size_t positions = 0;
  std::size_t segments = 0;
  std::size_t encoder = 0;
  std::size_t hier_encoder = 0;
  std::size_t decoder = 0;
  std::size_t decoder_hier = 0;  // hierarchical blocks inside decoder layers
  std::size_t encoder_hier = 0;  // hierarchical blocks inside encoder-only layers

  std::size_t total() const {
    return token_embedding + positions + segments + encoder + hier_encoder + decoder;
  }
};

/// Closed-form count of learnable scalars:
///   attention block     4d^2 + 4d
///   layer norm          2d
///   feed-forward        2*d*ffn + ffn + d
///   encoder layer       attention + ffn + 2 norms
///   decoder layer       2 attentions + ffn + 3 norms (+ hier attention + norm)
ParameterBreakdown parameter_breakdown(const HatConfig& config);
std::size_t count_parameters(const HatConfig& config);

/// Closed-form hierarchical overhead for the hierarchical mode of `config`:
/// decoder layers x (4d^2 + 6d) + hier layers x encoder-layer size, or
/// layers x (4d^2 + 6d) for the encoder-only variant.
std::size_t hierarchical_delta(const HatConfig& config);

// ---- checkpoints -----------------------------------------------------------

/// Versioned binary format: magic "HATCKPT1", uint32 version, config JSON,
/// then named float32 little-endian blobs in `HatParameters::named()` order.
void save_checkpoint(const std::filesystem::path& path, const HatConfig& config, const HatParameters& params);

struct Checkpoint {
  HatConfig config;
  HatParameters params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every checkpoint tensor whose name and shape match into `params`;
/// returns the names of target tensors left untouched.
std::vector<std::string> load_matching(const std::filesystem::path& path, HatParameters& params);

}  // namespace hat
