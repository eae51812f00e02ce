#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mimo/tensor.hpp"

namespace mimo {

/// Selected experts for one token in one layer, in selection order, with
/// gates that sum to one.
struct Routing {
  std::vector<std::size_t> experts;
  std::vector<double> gates;

  bool operator==(const Routing&) const = default;
};

struct RouterState {
  Matrix gate_weights;              // num_experts x hidden, kept in double
  std::vector<double> expert_bias;  // steers selection only
  double bias_update_factor = 0.001;
  double aux_loss_coeff = 1e-5;

  std::size_t num_experts() const { return gate_weights.rows; }
};

// sigmoid(W h) per expert.
std::vector<double> router_scores(std::span<const double> hidden, const RouterState& state);

/// Top-k of (score + bias); ties go to the lower expert index. Gates are the
/// raw scores of the selected experts renormalized to sum to one.
Routing select_experts(std::span<const double> scores, std::span<const double> bias, std::size_t k);

Routing route(std::span<const double> hidden, const RouterState& state, std::size_t k);

// bias_e += factor * sign(mean_load - load_e)
void update_expert_bias(RouterState& state, std::span<const double> per_expert_load);

/// Per-sequence load-balance loss E * sum_e f_e * P_e, where P_e is the mean
/// routing probability and f_e = count_e / (k T) the routed fraction of the
/// top-k choices taken from `probs`. Balanced routing gives 1; sending every
/// token to one expert (k = 1) gives E. The caller applies aux_loss_coeff.
double sequence_aux_loss(const Matrix& probs, std::size_t k);

/// Gated feed-forward: down(silu(gate x) * up x).
struct FeedForward {
  Matrix w_gate;  // hidden_ffn x d
  Matrix w_up;    // hidden_ffn x d
  Matrix w_down;  // d x hidden_ffn
};

std::vector<double> ffn_forward(const FeedForward& ffn, std::span<const double> x);

struct MoeLayer {
  RouterState router;
  std::vector<FeedForward> experts;
  std::size_t top_k = 1;
};

struct MoeOutput {
  std::vector<double> output;
  Routing routing;
};

/// Throws std::invalid_argument("moe_forward: replay shape mismatch") unless
/// `replay` names top_k distinct in-range experts with matching gates.
void validate_replay(const MoeLayer& layer, const Routing& replay);

/// Without `replay` the token is routed fresh. With `replay` selection is
/// bypassed and the recorded experts and gates are used as-is.
MoeOutput moe_forward(const MoeLayer& layer, std::span<const double> hidden, const Routing* replay = nullptr);

struct RoutingEntry {
  int layer = 0;
  std::int64_t token = 0;
  Routing routing;

  bool operator==(const RoutingEntry&) const = default;
};

/// Routed experts per (layer, token) captured during a forward pass.
struct RoutingRecord {
  std::vector<RoutingEntry> entries;

  const Routing* find(int layer, std::int64_t token) const;
  bool operator==(const RoutingRecord&) const = default;
};

/// Text format, gates written as hex floats so a reload is bit-exact:
///   mimo-routing 1
///   entries <n>
///   <layer> <token> <k> <expert>... <gate>...
void write_routing_record(std::ostream& os, const RoutingRecord& record);
RoutingRecord read_routing_record(std::istream& is);

}  // namespace mimo
