#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mimo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// GA base after long-context extension.
inline constexpr double kRopeBaseGaExtended = 5'000'000.0;

struct ModelConfig {
  int hidden_dim = 4096;
  int num_layers = 48;
  int hybrid_blocks = 8;   // M
  int swa_per_block = 5;   // N
  int window = 128;        // W, tokens
  int swa_q_heads = 64;
  int swa_kv_heads = 8;
  int ga_q_heads = 64;
  int ga_kv_heads = 4;
  int head_dim_qk = 192;
  int head_dim_v = 128;
  int rope_rot_dims = 64;
  double rope_base_ga = 640'000.0;
  double rope_base_swa = 10'000.0;
  int num_experts = 256;
  int experts_per_token = 8;
  int expert_hidden_dim = 2048;
  int dense_ffn_hidden_dim = 16384;
  int mtp_steps = 1;  // K
  int vocab_size = 152064;
  int max_seq_len = 262144;
  double init_std = 0.006;
  std::uint64_t seed = 0;
  double expert_bias_update_factor = 0.001;
  double aux_loss_coeff = 1e-5;

  bool operator==(const ModelConfig&) const = default;
};

enum class LayerKind { SwaMoe, GaMoe, GaDense };

std::string_view to_string(LayerKind kind);
inline bool is_global(LayerKind kind) { return kind != LayerKind::SwaMoe; }
inline bool is_moe(LayerKind kind) { return kind != LayerKind::GaDense; }

/// Returns one message per violated invariant; empty when the config is valid.
std::vector<std::string> config_violations(const ModelConfig& config);

/// Throws ConfigError naming the first violated invariant.
void validate_config(const ModelConfig& config);

/// Parses `key = value` lines (`#` starts a comment). Keys missing from the
/// document keep their value from `defaults`. Unknown or repeated keys, bad
/// numbers, and invariant violations all throw ConfigError.
ModelConfig parse_config(std::string_view text, const ModelConfig& defaults);
ModelConfig parse_config(std::string_view text);

std::string serialize_config(const ModelConfig& config);

ModelConfig load_config_file(const std::string& path, const ModelConfig& defaults);

/// Named presets: "paper" (full size), "small" and "tiny".
ModelConfig profile_config(std::string_view name);

/// Layer pattern: block 0 is GaDense, SwaMoe x (N-1), GaMoe; every later block
/// is SwaMoe x N, GaMoe.
std::vector<LayerKind> build_layout(const ModelConfig& config);

struct LayoutCounts {
  int swa_moe = 0;
  int ga_moe = 0;
  int ga_dense = 0;
  int swa() const { return swa_moe; }
  int ga() const { return ga_moe + ga_dense; }
};
LayoutCounts count_layout(const std::vector<LayerKind>& layout);

}  // namespace mimo
