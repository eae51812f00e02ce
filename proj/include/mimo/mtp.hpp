#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mimo/kvcache.hpp"
#include "mimo/model.hpp"

namespace mimo {

/// One multi-token-prediction block: fuse [prev hidden ; token embedding] down
/// to the model width, then one sliding-window attention sub-block and one
/// dense FFN sub-block (pre-norm residual), then an output norm. Logits come
/// from the main model's output head.
struct MtpHead {
  Matrix fuse;  // hidden x 2*hidden
  std::vector<double> attn_norm;
  AttentionParams attn;  // always sliding
  std::vector<double> ffn_norm;
  FeedForward ffn;  // always dense
  std::vector<double> out_norm;
};

/// K chained heads. Head t reads head t-1's output hidden (head 1 reads the
/// main model's) and the embedding of the token it is fed.
struct DraftChain {
  std::vector<MtpHead> heads;

  std::size_t steps() const { return heads.size(); }
};

/// K heads, each initialized identically from `seed` (one pre-training head
/// replicated K times).
DraftChain init_draft_chain(const ModelConfig& config, std::size_t steps, std::uint64_t seed);

/// Heads that copy the main model's first layer: the fuser passes the token
/// embedding through and drops the hidden input, attention/FFN/norms are
/// layer 0's. On a model whose later layers are inert this drafts exactly the
/// main model's greedy continuation. `noise_std` > 0 perturbs the copied
/// weights to give a weaker draft.
DraftChain copy_layer_draft_chain(const HybridModel& model, std::size_t steps, double noise_std = 0.0,
                                  std::uint64_t seed = 0);

/// Per-head caches over token positions. Entry q of head t was computed from
/// (output of head t-1 at q-1, embedding of token q).
struct DraftState {
  std::vector<WindowKvCache> caches;
  std::vector<std::vector<double>> last_output;  // head output at the newest committed position
  std::int64_t next_position = 0;
};

DraftState make_draft_state(const HybridModel& model, const DraftChain& chain);

/// Teacher-forces every head over tokens at positions next_position.. and
/// commits them. `prev_main_hidden[i]` is the main model's hidden state at the
/// position before tokens[i] (a zero vector for position 0).
void catch_up(const HybridModel& model, const DraftChain& chain, DraftState& state,
              std::span<const std::vector<double>> prev_main_hidden, std::span<const int> tokens);

/// Greedy drafts for the next `count` (<= K) positions after the newest
/// committed token. Does not modify the state.
std::vector<int> draft(const HybridModel& model, const DraftChain& chain, const DraftState& state, std::size_t count);

// Length of the longest prefix where drafts[i] == targets[i].
std::size_t accepted_prefix_length(std::span<const int> drafts, std::span<const int> targets);

struct VerifyResult {
  std::size_t accepted = 0;
  int corrected_token = 0;
  Matrix hidden;                 // main hidden at the committed positions (accepted + 1 rows)
  std::vector<double> entropy;   // next-token entropy at the committed positions
};

/// Scores [pending, drafts...] in one chunk forward, accepts the longest
/// prefix matching the main model's argmax, and commits pending plus the
/// accepted drafts to the caches. corrected_token is the main argmax after the
/// last accepted position.
VerifyResult verify(const HybridModel& model, DecodeState& state, int pending, std::span<const int> drafts);

struct SpecDecodeStats {
  std::size_t steps = 0;  // K
  std::vector<std::size_t> per_round_accepted;  // histogram over 0..K
  std::size_t rounds = 0;
  std::size_t draft_tokens_proposed = 0;
  std::size_t draft_tokens_accepted = 0;
  std::size_t draft_tokens_rejected = 0;
  double mean_accept_length = 0.0;  // accepted drafts + the verifier's own token, per round
  double mean_output_entropy = 0.0;  // nats, over emitted positions
};

struct DecodeOutput {
  std::vector<int> tokens;  // generated tokens only
  SpecDecodeStats stats;
};

/// Plain greedy decoding through the KV caches.
std::vector<int> greedy_decode(const HybridModel& model, std::span<const int> prompt, std::size_t max_new);

/// Greedy self-speculative decoding with the first `steps` heads of the chain.
/// Emits exactly what greedy_decode emits.
DecodeOutput speculative_decode(const HybridModel& model, const DraftChain& chain, std::span<const int> prompt,
                                std::size_t max_new, std::size_t steps);

struct AcceptanceSimulation {
  double mean_accepted = 0.0;  // drafts per round, excludes the verifier token
  double std_error = 0.0;
  std::vector<std::size_t> histogram;
};

/// Rounds where each draft independently matches the target with probability
/// p, scored with the same prefix rule as verify().
AcceptanceSimulation simulate_acceptance(double p, std::size_t steps, std::size_t rounds, std::uint64_t seed);

// sum_{i=1..K} p^i
double expected_accepted_drafts(double p, std::size_t steps);

/// y = ceiling * (1 - a * x^b)
struct AcceptanceCurve {
  double ceiling = 4.0;
  double a = 0.58;
  double b = 0.58;

  double operator()(double x) const;
  // Entropy where the curve reaches 1.
  double clamp_point() const;
};

/// Accept length predicted from next-token entropy (nats) with the 3-head fit,
/// clamped below at 1. Throws on negative entropy.
double acceptance_curve(double entropy);

struct SpeculationCost {
  double draft_cost_ratio = 0.0;  // one draft head relative to one main forward
  double verify_overhead = 0.0;   // extra cost of the K+1 wide verify pass
};

// accept_length / (1 + K * draft_cost_ratio + verify_overhead)
double estimate_speedup(double accept_length, std::size_t steps, const SpeculationCost& cost);

}  // namespace mimo
