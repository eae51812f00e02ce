#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mimo/attention.hpp"
#include "mimo/config.hpp"
#include "mimo/kvcache.hpp"
#include "mimo/moe.hpp"
#include "mimo/tensor.hpp"

namespace mimo {

/// Projections and per-head sinks of one attention layer.
struct AttentionParams {
  std::size_t q_heads = 0;
  std::size_t kv_heads = 0;
  std::size_t head_dim_qk = 0;
  std::size_t head_dim_v = 0;
  std::size_t rope_rot_dims = 0;
  double rope_base = 10'000.0;
  bool sliding = false;
  std::size_t window = 0;

  Matrix wq;  // q_heads*dqk x hidden
  Matrix wk;  // kv_heads*dqk x hidden
  Matrix wv;  // kv_heads*dv x hidden
  Matrix wo;  // hidden x q_heads*dv
  std::vector<double> sinks;  // one per query head

  std::vector<AttentionHeadState> head_states() const;
};

struct LayerParams {
  LayerKind kind = LayerKind::SwaMoe;
  std::vector<double> attn_norm;
  AttentionParams attn;
  std::vector<double> ffn_norm;
  std::optional<FeedForward> dense;  // GaDense only
  std::optional<MoeLayer> moe;       // SwaMoe / GaMoe
};

/// Pre-norm residual stack: h += attn(norm(h)); h += ffn(norm(h)); the head
/// reads norm(h) after the last layer. Output head is not tied to the
/// embedding table.
struct HybridModel {
  ModelConfig config;
  std::vector<LayerKind> layout;
  Matrix embedding;  // vocab x hidden
  std::vector<LayerParams> layers;
  std::vector<double> final_norm;
  Matrix head;  // vocab x hidden
};

AttentionParams make_attention_params(const ModelConfig& config, bool sliding);

/// Weights ~ N(0, init_std) from a counter-based generator keyed by (seed,
/// tensor index); norm gains start at 1, sinks and expert biases at 0.
HybridModel init_model(const ModelConfig& config, std::uint64_t seed);

/// Visits every named parameter tensor in a fixed order. Vectors are exposed as
/// 1 x n matrices through the span; `shape` is {rows, cols}.
using ParamVisitor = std::function<void(const std::string& name, std::span<double> data, std::size_t rows, std::size_t cols)>;
void for_each_parameter(HybridModel& model, const ParamVisitor& fn);
using ConstParamVisitor =
    std::function<void(const std::string& name, std::span<const double> data, std::size_t rows, std::size_t cols)>;
void for_each_parameter(const HybridModel& model, const ConstParamVisitor& fn);

struct ForwardOptions {
  bool full_causal_everywhere = false;  // SWA layers use the causal mask instead of the window
  const RoutingRecord* replay = nullptr;
  bool keep_layer_hidden = false;
};

struct ForwardTrace {
  std::vector<Matrix> layer_hidden;  // residual stream after each layer (optional)
  Matrix hidden;                     // norm(h) after the last layer, the head's input
  Matrix logits;                     // tokens x vocab
  RoutingRecord routing;
  std::vector<double> entropy;  // nats, per token
};

/// Cache-free causal forward over the whole sequence.
ForwardTrace forward_full(const HybridModel& model, std::span<const int> tokens, const ForwardOptions& options = {});

using LayerCache = std::variant<WindowKvCache, GlobalKvCache>;

/// Per-stream decode caches, one per layer.
struct DecodeState {
  std::vector<LayerCache> caches;
  std::int64_t next_position = 0;
};

DecodeState make_decode_state(const HybridModel& model);

/// Forward over `tokens` placed at positions next_position.. on top of the
/// cached prefix. The state is not modified; the keys/values produced for the
/// chunk are returned so a caller can commit any prefix of them.
struct ChunkResult {
  std::int64_t first_position = 0;
  Matrix hidden;
  Matrix logits;
  RoutingRecord routing;
  std::vector<Matrix> keys;    // per layer: tokens x (kv_heads * dqk), post-RoPE
  std::vector<Matrix> values;  // per layer: tokens x (kv_heads * dv)
};

ChunkResult forward_chunk(const HybridModel& model, const DecodeState& state, std::span<const int> tokens,
                          const RoutingRecord* replay = nullptr);

/// Appends the first `count` chunk positions to the caches.
void commit_chunk(DecodeState& state, const ChunkResult& chunk, std::size_t count);

struct StepResult {
  std::vector<double> logits;
  std::vector<double> hidden;
  RoutingRecord routing;
};

StepResult decode_step(const HybridModel& model, DecodeState& state, int token, const RoutingRecord* replay = nullptr);

struct ParamCounts {
  std::int64_t total = 0;
  std::int64_t active = 0;     // per token: k of E experts in each MoE layer
  std::int64_t mtp_block = 0;  // one MTP head, excluding the shared embedding and output head
};

ParamCounts count_params(const ModelConfig& config);

/// Sum of all learnable tensor sizes actually allocated (expert biases excluded).
std::int64_t allocated_params(const HybridModel& model);

/// Shared helpers used by the MTP heads.
namespace layers {

struct AttentionResult {
  Matrix output;  // tokens x hidden (after wo)
  Matrix keys;    // new keys (post-RoPE)
  Matrix values;
};

/// Attention sub-block on already-normalized inputs `x` at `positions`, with
/// optional prior keys/values from a cache.
AttentionResult attention_block(const AttentionParams& p, const Matrix& x, std::span<const std::int64_t> positions,
                                const KvEntries* prior, bool force_causal);

Matrix rms_norm_rows(const Matrix& h, std::span<const double> gain);

}  // namespace layers

}  // namespace mimo
