#pragma once

// Random toy models shared by the model, MTP and acceptance tests.

#include <array>
#include <vector>

#include "mimo/config.hpp"
#include "mimo/model.hpp"
#include "mimo/rng.hpp"

namespace fixture {

using namespace mimo;

inline ModelConfig random_toy_config(Rng& rng) {
  ModelConfig c = profile_config("tiny");
  c.hybrid_blocks = 1 + static_cast<int>(rng.below(2));
  c.swa_per_block = 1 + static_cast<int>(rng.below(3));
  c.num_layers = c.hybrid_blocks * (c.swa_per_block + 1);
  constexpr std::array windows{4, 8, 16};
  c.window = windows[rng.below(3)];
  c.hidden_dim = 16;
  c.swa_q_heads = 4;
  c.swa_kv_heads = 2;
  c.ga_q_heads = 4;
  c.ga_kv_heads = 1 + static_cast<int>(rng.below(2));
  c.head_dim_qk = 8;
  c.head_dim_v = 4;
  c.rope_rot_dims = 4;
  c.num_experts = 4;
  c.experts_per_token = 1 + static_cast<int>(rng.below(2));
  c.expert_hidden_dim = 8;
  c.dense_ffn_hidden_dim = 16;
  c.vocab_size = 32;
  c.init_std = 0.3;
  return c;
}

// Nonzero sinks and expert biases so those paths are exercised.
inline void randomize_extras(HybridModel& m, Rng& rng) {
  for (auto& layer : m.layers) {
    for (auto& s : layer.attn.sinks) s = 1.5 * rng.normal();
    if (layer.moe)
      for (auto& b : layer.moe->router.expert_bias) b = 0.05 * rng.normal();
  }
}

inline HybridModel random_toy_model(Rng& rng) {
  const auto config = random_toy_config(rng);
  auto m = init_model(config, mix64(rng.below(1u << 30)));
  randomize_extras(m, rng);
  return m;
}

inline std::vector<int> random_tokens(Rng& rng, std::size_t n, int vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::size_t>(vocab)));
  return t;
}

}  // namespace fixture
