#include "mimo/config.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <variant>

namespace mimo {
namespace {

using FieldPtr = std::variant<int ModelConfig::*, double ModelConfig::*, std::uint64_t ModelConfig::*>;

struct Field {
  std::string_view key;
  FieldPtr ptr;
};

constexpr std::array<Field, 25> kFields{{
    {"hidden_dim", &ModelConfig::hidden_dim},
    {"num_layers", &ModelConfig::num_layers},
    {"hybrid_blocks", &ModelConfig::hybrid_blocks},
    {"swa_per_block", &ModelConfig::swa_per_block},
    {"window", &ModelConfig::window},
    {"swa_q_heads", &ModelConfig::swa_q_heads},
    {"swa_kv_heads", &ModelConfig::swa_kv_heads},
    {"ga_q_heads", &ModelConfig::ga_q_heads},
    {"ga_kv_heads", &ModelConfig::ga_kv_heads},
    {"head_dim_qk", &ModelConfig::head_dim_qk},
    {"head_dim_v", &ModelConfig::head_dim_v},
    {"rope_rot_dims", &ModelConfig::rope_rot_dims},
    {"rope_base_ga", &ModelConfig::rope_base_ga},
    {"rope_base_swa", &ModelConfig::rope_base_swa},
    {"num_experts", &ModelConfig::num_experts},
    {"experts_per_token", &ModelConfig::experts_per_token},
    {"expert_hidden_dim", &ModelConfig::expert_hidden_dim},
    {"dense_ffn_hidden_dim", &ModelConfig::dense_ffn_hidden_dim},
    {"mtp_steps", &ModelConfig::mtp_steps},
    {"vocab_size", &ModelConfig::vocab_size},
    {"max_seq_len", &ModelConfig::max_seq_len},
    {"init_std", &ModelConfig::init_std},
    {"seed", &ModelConfig::seed},
    {"expert_bias_update_factor", &ModelConfig::expert_bias_update_factor},
    {"aux_loss_coeff", &ModelConfig::aux_loss_coeff},
}};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text, int line) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("line " + std::to_string(line) + ": invalid value '" + std::string(text) + "' for key '" +
                      std::string(key) + "'");
  }
  return value;
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::SwaMoe: return "SwaMoe";
    case LayerKind::GaMoe: return "GaMoe";
    case LayerKind::GaDense: return "GaDense";
  }
  return "?";
}

std::vector<std::string> config_violations(const ModelConfig& c) {
  std::vector<std::string> out;
  auto require = [&](bool ok, const char* what) {
    if (!ok) out.emplace_back(what);
  };
  require(c.hidden_dim > 0, "hidden_dim > 0 violated");
  require(c.num_layers > 0, "num_layers > 0 violated");
  require(c.hybrid_blocks > 0, "hybrid_blocks (M) > 0 violated");
  require(c.swa_per_block > 0, "swa_per_block (N) > 0 violated");
  require(c.num_layers == c.hybrid_blocks * (c.swa_per_block + 1), "num_layers == M×(N+1) violated");
  require(c.window >= 1, "window W >= 1 violated");
  require(c.swa_q_heads > 0 && c.swa_kv_heads > 0, "swa head counts > 0 violated");
  require(c.ga_q_heads > 0 && c.ga_kv_heads > 0, "ga head counts > 0 violated");
  require(c.swa_kv_heads > 0 && c.swa_q_heads % c.swa_kv_heads == 0,
          "swa_q_heads divisible by swa_kv_heads violated");
  require(c.ga_kv_heads > 0 && c.ga_q_heads % c.ga_kv_heads == 0, "ga_q_heads divisible by ga_kv_heads violated");
  require(c.head_dim_qk > 0 && c.head_dim_v > 0, "head dims > 0 violated");
  require(c.rope_rot_dims >= 0 && c.rope_rot_dims <= c.head_dim_qk, "rope_rot_dims <= head_dim_qk violated");
  require(c.rope_rot_dims % 2 == 0, "rope_rot_dims even violated");
  require(c.rope_base_ga > 0 && c.rope_base_swa > 0, "rope bases > 0 violated");
  require(c.num_experts > 0 && c.experts_per_token > 0, "expert counts > 0 violated");
  require(c.experts_per_token <= c.num_experts, "experts_per_token <= num_experts violated");
  require(c.expert_hidden_dim > 0 && c.dense_ffn_hidden_dim > 0, "ffn hidden dims > 0 violated");
  require(c.mtp_steps >= 0, "mtp_steps K >= 0 violated");
  require(c.vocab_size > 0, "vocab_size > 0 violated");
  require(c.max_seq_len > 0, "max_seq_len > 0 violated");
  require(c.init_std >= 0 && std::isfinite(c.init_std), "init_std >= 0 violated");
  require(c.expert_bias_update_factor >= 0 && c.aux_loss_coeff >= 0, "router factors >= 0 violated");
  return out;
}

void validate_config(const ModelConfig& config) {
  auto v = config_violations(config);
  if (!v.empty()) throw ConfigError(v.front());
}

ModelConfig parse_config(std::string_view text, const ModelConfig& defaults) {
  ModelConfig config = defaults;
  std::set<std::string_view> seen;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : kFields)
      if (f.key == key) field = &f;
    if (field == nullptr) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    if (!seen.insert(field->key).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + std::string(key) + "'");
    }
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(config.*member)>;
          config.*member = parse_number<T>(key, value, line_no);
        },
        field->ptr);
  }
  validate_config(config);
  return config;
}

ModelConfig parse_config(std::string_view text) { return parse_config(text, ModelConfig{}); }

std::string serialize_config(const ModelConfig& config) {
  std::ostringstream os;
  for (const auto& f : kFields) {
    os << f.key << " = ";
    std::visit(
        [&](auto member) {
          const auto v = config.*member;
          if constexpr (std::is_same_v<std::remove_cvref_t<decltype(v)>, double>) {
            os << format_double(v);
          } else {
            os << v;
          }
        },
        f.ptr);
    os << '\n';
  }
  return os.str();
}

ModelConfig load_config_file(const std::string& path, const ModelConfig& defaults) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), defaults);
}

ModelConfig profile_config(std::string_view name) {
  ModelConfig c;  // full-size values
  if (name == "paper") return c;
  if (name == "small") {
    c.hidden_dim = 64;
    c.num_layers = 12;
    c.hybrid_blocks = 2;
    c.swa_per_block = 5;
    c.window = 8;
    c.swa_q_heads = 8;
    c.swa_kv_heads = 2;
    c.ga_q_heads = 8;
    c.ga_kv_heads = 1;
    c.head_dim_qk = 16;
    c.head_dim_v = 8;
    c.rope_rot_dims = 8;
    c.num_experts = 4;
    c.experts_per_token = 2;
    c.expert_hidden_dim = 32;
    c.dense_ffn_hidden_dim = 128;
    c.mtp_steps = 3;
    c.vocab_size = 128;
    c.max_seq_len = 1024;
    c.init_std = 0.1;
    return c;
  }
  if (name == "tiny") {
    c.hidden_dim = 32;
    c.num_layers = 6;
    c.hybrid_blocks = 2;
    c.swa_per_block = 2;
    c.window = 8;
    c.swa_q_heads = 4;
    c.swa_kv_heads = 2;
    c.ga_q_heads = 4;
    c.ga_kv_heads = 1;
    c.head_dim_qk = 8;
    c.head_dim_v = 8;
    c.rope_rot_dims = 4;
    c.num_experts = 4;
    c.experts_per_token = 2;
    c.expert_hidden_dim = 16;
    c.dense_ffn_hidden_dim = 64;
    c.mtp_steps = 3;
    c.vocab_size = 64;
    c.max_seq_len = 1024;
    c.init_std = 0.1;
    return c;
  }
  throw ConfigError("unknown profile '" + std::string(name) + "' (expected tiny, small or paper)");
}

std::vector<LayerKind> build_layout(const ModelConfig& config) {
  validate_config(config);
  std::vector<LayerKind> layout;
  layout.reserve(static_cast<std::size_t>(config.num_layers));
  for (int block = 0; block < config.hybrid_blocks; ++block) {
    for (int s = 0; s < config.swa_per_block; ++s) {
      layout.push_back(block == 0 && s == 0 ? LayerKind::GaDense : LayerKind::SwaMoe);
    }
    layout.push_back(LayerKind::GaMoe);
  }
  return layout;
}

LayoutCounts count_layout(const std::vector<LayerKind>& layout) {
  LayoutCounts c;
  for (auto k : layout) {
    switch (k) {
      case LayerKind::SwaMoe: ++c.swa_moe; break;
      case LayerKind::GaMoe: ++c.ga_moe; break;
      case LayerKind::GaDense: ++c.ga_dense; break;
    }
  }
  return c;
}

}  // namespace mimo
