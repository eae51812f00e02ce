#include "mimo/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "mimo/rng.hpp"

namespace mimo {

std::vector<AttentionHeadState> AttentionParams::head_states() const {
  std::vector<AttentionHeadState> heads(q_heads);
  for (std::size_t h = 0; h < q_heads; ++h) heads[h] = {sinks[h], head_dim_qk};
  return heads;
}

AttentionParams make_attention_params(const ModelConfig& c, bool sliding) {
  AttentionParams p;
  p.sliding = sliding;
  p.q_heads = static_cast<std::size_t>(sliding ? c.swa_q_heads : c.ga_q_heads);
  p.kv_heads = static_cast<std::size_t>(sliding ? c.swa_kv_heads : c.ga_kv_heads);
  p.head_dim_qk = static_cast<std::size_t>(c.head_dim_qk);
  p.head_dim_v = static_cast<std::size_t>(c.head_dim_v);
  p.rope_rot_dims = static_cast<std::size_t>(c.rope_rot_dims);
  p.rope_base = sliding ? c.rope_base_swa : c.rope_base_ga;
  p.window = static_cast<std::size_t>(c.window);
  const auto d = static_cast<std::size_t>(c.hidden_dim);
  p.wq = Matrix(p.q_heads * p.head_dim_qk, d);
  p.wk = Matrix(p.kv_heads * p.head_dim_qk, d);
  p.wv = Matrix(p.kv_heads * p.head_dim_v, d);
  p.wo = Matrix(d, p.q_heads * p.head_dim_v);
  p.sinks.assign(p.q_heads, 0.0);
  return p;
}

namespace {

FeedForward make_ffn(std::size_t d, std::size_t inner) {
  return {Matrix(inner, d), Matrix(inner, d), Matrix(d, inner)};
}

void visit_ffn(const std::string& prefix, FeedForward& f, const ParamVisitor& fn) {
  fn(prefix + ".w_gate", f.w_gate.data, f.w_gate.rows, f.w_gate.cols);
  fn(prefix + ".w_up", f.w_up.data, f.w_up.rows, f.w_up.cols);
  fn(prefix + ".w_down", f.w_down.data, f.w_down.rows, f.w_down.cols);
}

void visit_attention(const std::string& prefix, AttentionParams& a, const ParamVisitor& fn) {
  fn(prefix + ".wq", a.wq.data, a.wq.rows, a.wq.cols);
  fn(prefix + ".wk", a.wk.data, a.wk.rows, a.wk.cols);
  fn(prefix + ".wv", a.wv.data, a.wv.rows, a.wv.cols);
  fn(prefix + ".wo", a.wo.data, a.wo.rows, a.wo.cols);
  fn(prefix + ".sinks", a.sinks, 1, a.sinks.size());
}

bool is_gain_or_state(const std::string& name) {
  auto ends_with = [&](std::string_view s) { return name.size() >= s.size() && name.ends_with(s); };
  return ends_with("norm") || ends_with(".sinks") || ends_with(".expert_bias");
}

}  // namespace

void for_each_parameter(HybridModel& m, const ParamVisitor& fn) {
  fn("embedding", m.embedding.data, m.embedding.rows, m.embedding.cols);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& layer = m.layers[l];
    const std::string p = "layers." + std::to_string(l);
    fn(p + ".attn_norm", layer.attn_norm, 1, layer.attn_norm.size());
    visit_attention(p + ".attn", layer.attn, fn);
    fn(p + ".ffn_norm", layer.ffn_norm, 1, layer.ffn_norm.size());
    if (layer.dense) visit_ffn(p + ".dense", *layer.dense, fn);
    if (layer.moe) {
      auto& r = layer.moe->router;
      fn(p + ".router.gate", r.gate_weights.data, r.gate_weights.rows, r.gate_weights.cols);
      fn(p + ".router.expert_bias", r.expert_bias, 1, r.expert_bias.size());
      for (std::size_t e = 0; e < layer.moe->experts.size(); ++e)
        visit_ffn(p + ".experts." + std::to_string(e), layer.moe->experts[e], fn);
    }
  }
  fn("final_norm", m.final_norm, 1, m.final_norm.size());
  fn("head", m.head.data, m.head.rows, m.head.cols);
}

void for_each_parameter(const HybridModel& m, const ConstParamVisitor& fn) {
  for_each_parameter(const_cast<HybridModel&>(m),
                     [&](const std::string& name, std::span<double> data, std::size_t rows, std::size_t cols) {
                       fn(name, std::span<const double>(data), rows, cols);
                     });
}

HybridModel init_model(const ModelConfig& config, std::uint64_t seed) {
  validate_config(config);
  HybridModel m;
  m.config = config;
  m.layout = build_layout(config);
  const auto d = static_cast<std::size_t>(config.hidden_dim);
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  m.embedding = Matrix(vocab, d);
  m.head = Matrix(vocab, d);
  m.final_norm.assign(d, 1.0);
  for (auto kind : m.layout) {
    LayerParams layer;
    layer.kind = kind;
    layer.attn_norm.assign(d, 1.0);
    layer.ffn_norm.assign(d, 1.0);
    layer.attn = make_attention_params(config, !is_global(kind));
    if (is_moe(kind)) {
      MoeLayer moe;
      moe.top_k = static_cast<std::size_t>(config.experts_per_token);
      moe.router.gate_weights = Matrix(static_cast<std::size_t>(config.num_experts), d);
      moe.router.expert_bias.assign(static_cast<std::size_t>(config.num_experts), 0.0);
      moe.router.bias_update_factor = config.expert_bias_update_factor;
      moe.router.aux_loss_coeff = config.aux_loss_coeff;
      for (int e = 0; e < config.num_experts; ++e)
        moe.experts.push_back(make_ffn(d, static_cast<std::size_t>(config.expert_hidden_dim)));
      layer.moe = std::move(moe);
    } else {
      layer.dense = make_ffn(d, static_cast<std::size_t>(config.dense_ffn_hidden_dim));
    }
    m.layers.push_back(std::move(layer));
  }

  std::uint64_t stream = 0;
  const double std_dev = config.init_std;
  for_each_parameter(m, [&](const std::string& name, std::span<double> data, std::size_t, std::size_t) {
    const CounterNormal gen{seed, stream++};
    if (is_gain_or_state(name)) return;
    const auto n = static_cast<long long>(data.size());
#pragma omp parallel for schedule(static) if (n > 65536)
    for (long long i = 0; i < n; ++i) data[static_cast<std::size_t>(i)] = std_dev * gen(static_cast<std::uint64_t>(i));
  });
  return m;
}

namespace layers {

Matrix rms_norm_rows(const Matrix& h, std::span<const double> gain) {
  Matrix out(h.rows, h.cols);
  for (std::size_t t = 0; t < h.rows; ++t) {
    const auto y = rms_norm(h.row(t), gain);
    std::ranges::copy(y, out.row(t).begin());
  }
  return out;
}

AttentionResult attention_block(const AttentionParams& p, const Matrix& x, std::span<const std::int64_t> positions,
                                const KvEntries* prior, bool force_causal) {
  AttentionInputs in;
  in.q_heads = p.q_heads;
  in.kv_heads = p.kv_heads;
  in.head_dim_qk = p.head_dim_qk;
  in.head_dim_v = p.head_dim_v;
  in.q = linear_rows(p.wq, x);
  Matrix k_new = linear_rows(p.wk, x);
  Matrix v_new = linear_rows(p.wv, x);
  for (std::size_t t = 0; t < x.rows; ++t) {
    for (std::size_t h = 0; h < p.q_heads; ++h)
      apply_partial_rope(in.q.row(t).subspan(h * p.head_dim_qk, p.head_dim_qk), positions[t], p.rope_base,
                         p.rope_rot_dims);
    for (std::size_t h = 0; h < p.kv_heads; ++h)
      apply_partial_rope(k_new.row(t).subspan(h * p.head_dim_qk, p.head_dim_qk), positions[t], p.rope_base,
                         p.rope_rot_dims);
  }
  const std::size_t n_prior = prior != nullptr ? prior->positions.size() : 0;
  in.k = Matrix(n_prior + x.rows, k_new.cols);
  in.v = Matrix(n_prior + x.rows, v_new.cols);
  if (prior != nullptr) {
    std::ranges::copy(prior->keys.data, in.k.data.begin());
    std::ranges::copy(prior->values.data, in.v.data.begin());
    in.k_positions = prior->positions;
  }
  std::ranges::copy(k_new.data, in.k.data.begin() + static_cast<std::ptrdiff_t>(n_prior * k_new.cols));
  std::ranges::copy(v_new.data, in.v.data.begin() + static_cast<std::ptrdiff_t>(n_prior * v_new.cols));
  in.k_positions.insert(in.k_positions.end(), positions.begin(), positions.end());
  in.q_positions.assign(positions.begin(), positions.end());

  std::vector<KeyRange> mask(x.rows);
  for (std::size_t t = 0; t < x.rows; ++t) {
    mask[t] = p.sliding && !force_causal ? swa_window(positions[t], static_cast<std::int64_t>(p.window))
                                         : causal_range(positions[t]);
  }
  const auto heads = p.head_states();
  const Matrix o = attend(in, heads, mask);
  return {linear_rows(p.wo, o), std::move(k_new), std::move(v_new)};
}

}  // namespace layers

namespace {

void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  for (int t : tokens)
    if (t < 0 || t >= c.vocab_size) throw std::invalid_argument("forward: token id out of range");
}

Matrix embed(const HybridModel& m, std::span<const int> tokens) {
  Matrix h(tokens.size(), m.embedding.cols);
  for (std::size_t t = 0; t < tokens.size(); ++t)
    std::ranges::copy(m.embedding.row(static_cast<std::size_t>(tokens[t])), h.row(t).begin());
  return h;
}

// h += ffn(norm(h)) for every row; MoE routing appended to `record`.
void ffn_sublayer(const LayerParams& layer, int layer_index, Matrix& h, std::span<const std::int64_t> positions,
                  const RoutingRecord* replay, RoutingRecord& record) {
  const Matrix x = layers::rms_norm_rows(h, layer.ffn_norm);
  if (layer.dense) {
    const auto n = static_cast<long long>(h.rows);
#pragma omp parallel for schedule(static) if (n > 4)
    for (long long t = 0; t < n; ++t) {
      const auto row = static_cast<std::size_t>(t);
      add_inplace(h.row(row), ffn_forward(*layer.dense, x.row(row)));
    }
    return;
  }
  std::vector<Routing> routed(h.rows);
  std::vector<const Routing*> forced(h.rows, nullptr);
  if (replay != nullptr) {
    for (std::size_t t = 0; t < h.rows; ++t) {
      forced[t] = replay->find(layer_index, positions[t]);
      if (forced[t] == nullptr) throw std::invalid_argument("moe_forward: replay shape mismatch");
      validate_replay(*layer.moe, *forced[t]);
    }
  }
  const auto n = static_cast<long long>(h.rows);
#pragma omp parallel for schedule(static) if (n > 4)
  for (long long t = 0; t < n; ++t) {
    const auto row = static_cast<std::size_t>(t);
    auto out = moe_forward(*layer.moe, x.row(row), forced[row]);
    add_inplace(h.row(row), out.output);
    routed[row] = std::move(out.routing);
  }
  for (std::size_t t = 0; t < h.rows; ++t) record.entries.push_back({layer_index, positions[t], std::move(routed[t])});
}

void head_forward(const HybridModel& m, const Matrix& h, Matrix& hidden, Matrix& logits) {
  hidden = layers::rms_norm_rows(h, m.final_norm);
  logits = linear_rows(m.head, hidden);
}

}  // namespace

ForwardTrace forward_full(const HybridModel& model, std::span<const int> tokens, const ForwardOptions& options) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(model.config.max_seq_len))
    throw std::invalid_argument("forward: sequence exceeds max_seq_len");
  check_tokens(model.config, tokens);
  std::vector<std::int64_t> positions(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) positions[t] = static_cast<std::int64_t>(t);

  ForwardTrace trace;
  Matrix h = embed(model, tokens);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    const Matrix x = layers::rms_norm_rows(h, layer.attn_norm);
    const auto attn = layers::attention_block(layer.attn, x, positions, nullptr, options.full_causal_everywhere);
    add_inplace(h.data, attn.output.data);
    ffn_sublayer(layer, static_cast<int>(l), h, positions, options.replay, trace.routing);
    if (options.keep_layer_hidden) trace.layer_hidden.push_back(h);
  }
  head_forward(model, h, trace.hidden, trace.logits);
  trace.entropy.resize(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) trace.entropy[t] = softmax_entropy(trace.logits.row(t));
  return trace;
}

DecodeState make_decode_state(const HybridModel& model) {
  DecodeState s;
  for (const auto& layer : model.layers) {
    const auto& a = layer.attn;
    const std::size_t kw = a.kv_heads * a.head_dim_qk;
    const std::size_t vw = a.kv_heads * a.head_dim_v;
    if (a.sliding)
      s.caches.emplace_back(WindowKvCache(a.window, kw, vw));
    else
      s.caches.emplace_back(GlobalKvCache(kw, vw));
  }
  return s;
}

ChunkResult forward_chunk(const HybridModel& model, const DecodeState& state, std::span<const int> tokens,
                          const RoutingRecord* replay) {
  if (tokens.empty()) throw std::invalid_argument("forward_chunk: empty chunk");
  if (state.caches.size() != model.layers.size()) throw std::invalid_argument("forward_chunk: cache/model mismatch");
  if (state.next_position + static_cast<std::int64_t>(tokens.size()) > model.config.max_seq_len)
    throw std::invalid_argument("forward_chunk: sequence exceeds max_seq_len");
  check_tokens(model.config, tokens);

  ChunkResult r;
  r.first_position = state.next_position;
  std::vector<std::int64_t> positions(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) positions[t] = state.next_position + static_cast<std::int64_t>(t);

  Matrix h = embed(model, tokens);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    const KvEntries prior = std::visit(
        [&](const auto& cache) {
          const auto newest = cache.newest();
          const std::int64_t expected = newest ? *newest + 1 : 0;
          if (expected != state.next_position) throw std::invalid_argument("forward_chunk: cache/prefix mismatch");
          return cache.gather(state.next_position);
        },
        state.caches[l]);
    const Matrix x = layers::rms_norm_rows(h, layer.attn_norm);
    auto attn = layers::attention_block(layer.attn, x, positions, &prior, false);
    add_inplace(h.data, attn.output.data);
    ffn_sublayer(layer, static_cast<int>(l), h, positions, replay, r.routing);
    r.keys.push_back(std::move(attn.keys));
    r.values.push_back(std::move(attn.values));
  }
  head_forward(model, h, r.hidden, r.logits);
  return r;
}

void commit_chunk(DecodeState& state, const ChunkResult& chunk, std::size_t count) {
  if (chunk.first_position != state.next_position) throw std::invalid_argument("commit_chunk: chunk is stale");
  if (chunk.keys.size() != state.caches.size()) throw std::invalid_argument("commit_chunk: cache/model mismatch");
  if (count > chunk.logits.rows) throw std::invalid_argument("commit_chunk: count exceeds chunk length");
  for (std::size_t l = 0; l < state.caches.size(); ++l) {
    std::visit(
        [&](auto& cache) {
          for (std::size_t t = 0; t < count; ++t)
            cache.append(chunk.first_position + static_cast<std::int64_t>(t), chunk.keys[l].row(t),
                         chunk.values[l].row(t));
        },
        state.caches[l]);
  }
  state.next_position += static_cast<std::int64_t>(count);
}

StepResult decode_step(const HybridModel& model, DecodeState& state, int token, const RoutingRecord* replay) {
  const int tokens[1] = {token};
  auto chunk = forward_chunk(model, state, tokens, replay);
  commit_chunk(state, chunk, 1);
  StepResult out;
  out.logits.assign(chunk.logits.row(0).begin(), chunk.logits.row(0).end());
  out.hidden.assign(chunk.hidden.row(0).begin(), chunk.hidden.row(0).end());
  out.routing = std::move(chunk.routing);
  return out;
}

namespace {

std::int64_t attention_count(const ModelConfig& c, bool sliding) {
  const std::int64_t d = c.hidden_dim;
  const std::int64_t qh = sliding ? c.swa_q_heads : c.ga_q_heads;
  const std::int64_t kvh = sliding ? c.swa_kv_heads : c.ga_kv_heads;
  return d * qh * c.head_dim_qk + d * kvh * c.head_dim_qk + d * kvh * c.head_dim_v + qh * c.head_dim_v * d + qh;
}

}  // namespace

ParamCounts count_params(const ModelConfig& c) {
  validate_config(c);
  const std::int64_t d = c.hidden_dim;
  const std::int64_t dense_ffn = 3 * d * c.dense_ffn_hidden_dim;
  const std::int64_t expert = 3 * d * c.expert_hidden_dim;
  const std::int64_t router = std::int64_t{c.num_experts} * d;
  const std::int64_t norms = 2 * d;
  const std::int64_t io = 2 * std::int64_t{c.vocab_size} * d + d;  // embedding, head, final norm

  ParamCounts out;
  out.total = io;
  out.active = io;
  for (auto kind : build_layout(c)) {
    const std::int64_t attn = attention_count(c, !is_global(kind)) + norms;
    out.total += attn;
    out.active += attn;
    if (is_moe(kind)) {
      out.total += router + std::int64_t{c.num_experts} * expert;
      out.active += router + std::int64_t{c.experts_per_token} * expert;
    } else {
      out.total += dense_ffn;
      out.active += dense_ffn;
    }
  }
  // fuser (d x 2d), SWA attention, two sub-block norms, dense FFN, output norm
  out.mtp_block = 2 * d * d + attention_count(c, true) + norms + dense_ffn + d;
  return out;
}

std::int64_t allocated_params(const HybridModel& model) {
  std::int64_t n = 0;
  for_each_parameter(model, [&](const std::string& name, std::span<const double> data, std::size_t, std::size_t) {
    if (!name.ends_with(".expert_bias")) n += static_cast<std::int64_t>(data.size());
  });
  return n;
}

}  // namespace mimo
