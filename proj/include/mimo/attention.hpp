#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mimo/tensor.hpp"

namespace mimo {

/// Learnable per-head sink bias plus the logit scaling dimension.
struct AttentionHeadState {
  double sink = 0.0;
  std::size_t head_dim_qk = 0;

  void validate() const;
};

/// Inclusive range of key positions a query may attend to.
struct KeyRange {
  std::int64_t first = 0;
  std::int64_t last = 0;

  bool contains(std::int64_t p) const { return p >= first && p <= last; }
  bool operator==(const KeyRange&) const = default;
};

/// Result of the sink-biased softmax over one row of logits.
///   m      = max(max_j a_j, sink)
///   s_j    = exp(a_j - m) / (exp(sink - m) + sum_j' exp(a_j' - m))
///   sink_mass = exp(sink - m) / (same denominator)
/// so sum_j s_j + sink_mass == 1.
struct SinkSoftmax {
  std::vector<double> weights;
  double sink_mass = 0.0;
  double row_max = 0.0;
};

// a_j = (q . k_j) / sqrt(d); `keys` holds one key per row.
std::vector<double> attention_logits(std::span<const double> q, const Matrix& keys, std::size_t d);

// Entries equal to -inf are treated as masked and receive zero weight.
SinkSoftmax sink_softmax(std::span<const double> logits, double sink);

// Last W positions including the query itself.
KeyRange swa_window(std::int64_t query_pos, std::int64_t window);
KeyRange causal_range(std::int64_t query_pos);

// Rotates pairs (2t, 2t+1) of the first rot_dims entries by pos * base^(-2t/rot_dims).
void apply_partial_rope(std::span<double> vec, std::int64_t pos, double base, std::size_t rot_dims);
std::vector<double> partial_rope(std::span<const double> vec, std::int64_t pos, double base, std::size_t rot_dims);

/// Multi-head attention operands. Head h of q uses kv head h / (q_heads / kv_heads).
struct AttentionInputs {
  std::size_t q_heads = 1;
  std::size_t kv_heads = 1;
  std::size_t head_dim_qk = 0;
  std::size_t head_dim_v = 0;
  Matrix q;  // queries x (q_heads * head_dim_qk)
  Matrix k;  // keys x (kv_heads * head_dim_qk)
  Matrix v;  // keys x (kv_heads * head_dim_v)
  std::vector<std::int64_t> q_positions;
  std::vector<std::int64_t> k_positions;  // strictly increasing

  void validate() const;
};

/// o_i = sum_j s_ij v_j over the keys whose positions lie in mask[i].
/// Returns queries x (q_heads * head_dim_v). Parallel over (query, head);
/// keys are reduced left to right so the result does not depend on the
/// thread count. Throws std::invalid_argument on a non-causal mask.
Matrix attend(const AttentionInputs& in, std::span<const AttentionHeadState> heads, std::span<const KeyRange> mask);

/// Serial reference: materializes each logit row and routes it through
/// sink_softmax before the weighted value sum.
Matrix attend_reference(const AttentionInputs& in, std::span<const AttentionHeadState> heads,
                        std::span<const KeyRange> mask);

}  // namespace mimo
