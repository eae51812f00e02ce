#include "mimo/mtp.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mimo/rng.hpp"

namespace mimo {
namespace {

void fill_normal(std::span<double> data, double std_dev, std::uint64_t seed, std::uint64_t stream) {
  const CounterNormal gen{seed, stream};
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std_dev * gen(i);
}

void perturb(std::span<double> data, double std_dev, std::uint64_t seed, std::uint64_t& stream) {
  if (std_dev <= 0.0) return;
  const CounterNormal gen{seed, stream++};
  for (std::size_t i = 0; i < data.size(); ++i) data[i] += std_dev * gen(i);
}

struct HeadChunk {
  Matrix outputs;  // tokens x hidden, after out_norm
  Matrix keys;
  Matrix values;
};

HeadChunk run_head(const HybridModel& model, const MtpHead& head, const WindowKvCache& cache,
                   std::int64_t first_position, std::span<const std::vector<double>> prev_hidden,
                   std::span<const int> tokens) {
  const std::size_t d = model.embedding.cols;
  const std::size_t n = tokens.size();
  Matrix fused_in(n, 2 * d);
  std::vector<std::int64_t> positions(n);
  for (std::size_t t = 0; t < n; ++t) {
    if (tokens[t] < 0 || tokens[t] >= model.config.vocab_size) throw std::invalid_argument("mtp: token id out of range");
    if (prev_hidden[t].size() != d) throw std::invalid_argument("mtp: hidden width mismatch");
    auto row = fused_in.row(t);
    std::ranges::copy(prev_hidden[t], row.begin());
    std::ranges::copy(model.embedding.row(static_cast<std::size_t>(tokens[t])), row.begin() + static_cast<std::ptrdiff_t>(d));
    positions[t] = first_position + static_cast<std::int64_t>(t);
  }
  Matrix h = linear_rows(head.fuse, fused_in);

  const auto newest = cache.newest();
  if ((newest ? *newest + 1 : 0) != first_position) throw std::invalid_argument("mtp: draft cache inconsistency");
  const KvEntries prior = cache.gather(first_position);
  auto attn = layers::attention_block(head.attn, layers::rms_norm_rows(h, head.attn_norm), positions, &prior, false);
  add_inplace(h.data, attn.output.data);
  const Matrix x = layers::rms_norm_rows(h, head.ffn_norm);
  for (std::size_t t = 0; t < n; ++t) add_inplace(h.row(t), ffn_forward(head.ffn, x.row(t)));
  return {layers::rms_norm_rows(h, head.out_norm), std::move(attn.keys), std::move(attn.values)};
}

int head_argmax(const HybridModel& model, std::span<const double> hidden) {
  std::vector<double> logits(model.head.rows);
  matvec(model.head, hidden, logits);
  return static_cast<int>(argmax(logits));
}

std::vector<std::vector<double>> rows_of(const Matrix& m) {
  std::vector<std::vector<double>> out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) out[r].assign(m.row(r).begin(), m.row(r).end());
  return out;
}

}  // namespace

DraftChain init_draft_chain(const ModelConfig& config, std::size_t steps, std::uint64_t seed) {
  validate_config(config);
  const auto d = static_cast<std::size_t>(config.hidden_dim);
  const auto inner = static_cast<std::size_t>(config.dense_ffn_hidden_dim);
  MtpHead proto;
  proto.fuse = Matrix(d, 2 * d);
  proto.attn_norm.assign(d, 1.0);
  proto.attn = make_attention_params(config, true);
  proto.ffn_norm.assign(d, 1.0);
  proto.ffn = {Matrix(inner, d), Matrix(inner, d), Matrix(d, inner)};
  proto.out_norm.assign(d, 1.0);
  const double s = config.init_std;
  std::uint64_t stream = 0;
  for (Matrix* m : {&proto.fuse, &proto.attn.wq, &proto.attn.wk, &proto.attn.wv, &proto.attn.wo, &proto.ffn.w_gate,
                    &proto.ffn.w_up, &proto.ffn.w_down})
    fill_normal(m->data, s, seed, stream++);
  return DraftChain{std::vector<MtpHead>(steps, proto)};
}

DraftChain copy_layer_draft_chain(const HybridModel& model, std::size_t steps, double noise_std, std::uint64_t seed) {
  const auto& first = model.layers.front();
  if (!first.dense) throw std::invalid_argument("copy_layer_draft_chain: layer 0 must be dense");
  const std::size_t d = model.embedding.cols;
  MtpHead proto;
  proto.fuse = Matrix(d, 2 * d);
  for (std::size_t i = 0; i < d; ++i) proto.fuse(i, d + i) = 1.0;
  proto.attn_norm = first.attn_norm;
  proto.attn = first.attn;
  proto.attn.sliding = true;
  proto.attn.window = static_cast<std::size_t>(model.config.window);
  proto.ffn_norm = first.ffn_norm;
  proto.ffn = *first.dense;
  proto.out_norm = model.final_norm;

  DraftChain chain{std::vector<MtpHead>(steps, proto)};
  std::uint64_t stream = 0;
  for (auto& head : chain.heads) {
    for (Matrix* m : {&head.attn.wq, &head.attn.wk, &head.attn.wv, &head.attn.wo, &head.ffn.w_gate, &head.ffn.w_up,
                      &head.ffn.w_down})
      perturb(m->data, noise_std, seed, stream);
  }
  return chain;
}

DraftState make_draft_state(const HybridModel& model, const DraftChain& chain) {
  DraftState s;
  for (const auto& head : chain.heads) {
    const auto& a = head.attn;
    s.caches.emplace_back(a.window, a.kv_heads * a.head_dim_qk, a.kv_heads * a.head_dim_v);
    s.last_output.emplace_back(model.embedding.cols, 0.0);
  }
  return s;
}

void catch_up(const HybridModel& model, const DraftChain& chain, DraftState& state,
              std::span<const std::vector<double>> prev_main_hidden, std::span<const int> tokens) {
  if (prev_main_hidden.size() != tokens.size()) throw std::invalid_argument("catch_up: hidden/token count mismatch");
  if (tokens.empty()) return;
  std::vector<std::vector<double>> prev(prev_main_hidden.begin(), prev_main_hidden.end());
  for (std::size_t t = 0; t < chain.steps(); ++t) {
    auto chunk = run_head(model, chain.heads[t], state.caches[t], state.next_position, prev, tokens);
    for (std::size_t i = 0; i < tokens.size(); ++i)
      state.caches[t].append(state.next_position + static_cast<std::int64_t>(i), chunk.keys.row(i),
                             chunk.values.row(i));
    // Next head sees this head's output at q-1: the previous frontier, then all but the newest row.
    auto outputs = rows_of(chunk.outputs);
    prev.assign(1, state.last_output[t]);
    prev.insert(prev.end(), outputs.begin(), outputs.end() - 1);
    state.last_output[t] = outputs.back();
  }
  state.next_position += static_cast<std::int64_t>(tokens.size());
}

std::vector<int> draft(const HybridModel& model, const DraftChain& chain, const DraftState& state, std::size_t count) {
  if (count > chain.steps()) throw std::invalid_argument("draft: count exceeds chain depth");
  std::vector<int> drafts;
  if (count == 0) return drafts;
  if (state.next_position == 0) throw std::invalid_argument("draft: draft state has no committed tokens");
  drafts.push_back(head_argmax(model, state.last_output[0]));

  // Outputs of the previous head at positions frontier .. frontier + t - 1.
  std::vector<std::vector<double>> prev_outputs{state.last_output[0]};
  for (std::size_t t = 1; t < count; ++t) {
    std::vector<std::vector<double>> prev{state.last_output[t - 1]};
    prev.insert(prev.end(), prev_outputs.begin() + 1, prev_outputs.end());
    prev.resize(t);
    const std::span<const int> fed(drafts.data(), t);
    auto chunk = run_head(model, chain.heads[t], state.caches[t], state.next_position, prev, fed);
    auto outputs = rows_of(chunk.outputs);
    drafts.push_back(head_argmax(model, outputs.back()));
    prev_outputs.assign(1, state.last_output[t]);
    prev_outputs.insert(prev_outputs.end(), outputs.begin(), outputs.end());
  }
  return drafts;
}

std::size_t accepted_prefix_length(std::span<const int> drafts, std::span<const int> targets) {
  std::size_t n = 0;
  while (n < drafts.size() && n < targets.size() && drafts[n] == targets[n]) ++n;
  return n;
}

VerifyResult verify(const HybridModel& model, DecodeState& state, int pending, std::span<const int> drafts) {
  std::vector<int> chunk_tokens{pending};
  chunk_tokens.insert(chunk_tokens.end(), drafts.begin(), drafts.end());
  const auto chunk = forward_chunk(model, state, chunk_tokens);
  std::vector<int> targets(chunk_tokens.size());
  for (std::size_t r = 0; r < chunk_tokens.size(); ++r) targets[r] = static_cast<int>(argmax(chunk.logits.row(r)));

  VerifyResult out;
  out.accepted = accepted_prefix_length(drafts, targets);
  out.corrected_token = targets[out.accepted];
  commit_chunk(state, chunk, out.accepted + 1);
  out.hidden = Matrix(out.accepted + 1, chunk.hidden.cols);
  std::copy_n(chunk.hidden.data.begin(), out.hidden.size(), out.hidden.data.begin());
  for (std::size_t r = 0; r <= out.accepted; ++r) out.entropy.push_back(softmax_entropy(chunk.logits.row(r)));
  return out;
}

std::vector<int> greedy_decode(const HybridModel& model, std::span<const int> prompt, std::size_t max_new) {
  std::vector<int> out;
  if (max_new == 0) return out;
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  DecodeState state = make_decode_state(model);
  std::vector<double> logits;
  for (int tok : prompt) logits = decode_step(model, state, tok).logits;
  out.push_back(static_cast<int>(argmax(logits)));
  while (out.size() < max_new) {
    logits = decode_step(model, state, out.back()).logits;
    out.push_back(static_cast<int>(argmax(logits)));
  }
  return out;
}

DecodeOutput speculative_decode(const HybridModel& model, const DraftChain& chain, std::span<const int> prompt,
                                std::size_t max_new, std::size_t steps) {
  if (steps > chain.steps()) throw std::invalid_argument("speculative_decode: K exceeds chain depth");
  DecodeOutput out;
  out.stats.steps = steps;
  out.stats.per_round_accepted.assign(steps + 1, 0);
  if (max_new == 0) return out;
  if (prompt.empty()) throw std::invalid_argument("speculative_decode: empty prompt");

  DecodeState state = make_decode_state(model);
  const auto prefill = forward_chunk(model, state, prompt);
  commit_chunk(state, prefill, prompt.size());
  const std::size_t last = prompt.size() - 1;
  int pending = static_cast<int>(argmax(prefill.logits.row(last)));
  out.tokens.push_back(pending);
  double entropy_sum = softmax_entropy(prefill.logits.row(last));
  std::size_t entropy_count = 1;

  DraftState draft_state = make_draft_state(model, chain);
  if (steps > 0) {
    std::vector<std::vector<double>> prev{std::vector<double>(model.embedding.cols, 0.0)};
    for (std::size_t r = 0; r < prompt.size(); ++r) prev.emplace_back(prefill.hidden.row(r).begin(), prefill.hidden.row(r).end());
    std::vector<int> known(prompt.begin(), prompt.end());
    known.push_back(pending);
    catch_up(model, chain, draft_state, prev, known);
  }

  std::size_t accept_total = 0;
  const auto seq_cap = static_cast<std::size_t>(model.config.max_seq_len);
  while (out.tokens.size() < max_new) {
    const std::size_t position = static_cast<std::size_t>(state.next_position);
    if (position + 1 > seq_cap) throw std::invalid_argument("speculative_decode: sequence exceeds max_seq_len");
    const std::size_t k_round = std::min({steps, max_new - out.tokens.size() - 1, seq_cap - position - 1});
    const auto drafts = draft(model, chain, draft_state, k_round);
    const auto v = verify(model, state, pending, drafts);

    ++out.stats.rounds;
    ++out.stats.per_round_accepted[v.accepted];
    out.stats.draft_tokens_proposed += drafts.size();
    out.stats.draft_tokens_accepted += v.accepted;
    accept_total += v.accepted + 1;
    for (double e : v.entropy) entropy_sum += e;
    entropy_count += v.entropy.size();

    std::vector<int> fresh(drafts.begin(), drafts.begin() + static_cast<std::ptrdiff_t>(v.accepted));
    fresh.push_back(v.corrected_token);
    for (int tok : fresh)
      if (out.tokens.size() < max_new) out.tokens.push_back(tok);
    if (steps > 0) catch_up(model, chain, draft_state, rows_of(v.hidden), fresh);
    pending = v.corrected_token;
  }

  auto& s = out.stats;
  s.draft_tokens_rejected = s.draft_tokens_proposed - s.draft_tokens_accepted;
  s.mean_accept_length = s.rounds > 0 ? static_cast<double>(accept_total) / static_cast<double>(s.rounds) : 1.0;
  s.mean_output_entropy = entropy_sum / static_cast<double>(entropy_count);
  return out;
}

AcceptanceSimulation simulate_acceptance(double p, std::size_t steps, std::size_t rounds, std::uint64_t seed) {
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("simulate_acceptance: p must lie in [0, 1]");
  if (rounds == 0) throw std::invalid_argument("simulate_acceptance: need at least one round");
  Rng rng(seed);
  AcceptanceSimulation sim;
  sim.histogram.assign(steps + 1, 0);
  const std::vector<int> targets(steps, 0);
  std::vector<int> drafts(steps);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t r = 0; r < rounds; ++r) {
    for (auto& d : drafts) d = rng.uniform() < p ? 0 : 1;
    const auto n = static_cast<double>(accepted_prefix_length(drafts, targets));
    ++sim.histogram[static_cast<std::size_t>(n)];
    sum += n;
    sum_sq += n * n;
  }
  const auto count = static_cast<double>(rounds);
  sim.mean_accepted = sum / count;
  const double var = std::max(0.0, sum_sq / count - sim.mean_accepted * sim.mean_accepted);
  sim.std_error = std::sqrt(var / count);
  return sim;
}

double expected_accepted_drafts(double p, std::size_t steps) {
  double total = 0.0;
  double term = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    term *= p;
    total += term;
  }
  return total;
}

double AcceptanceCurve::operator()(double x) const {
  if (x < 0.0) throw std::invalid_argument("acceptance curve: entropy must be >= 0");
  return ceiling * (1.0 - a * std::pow(x, b));
}

double AcceptanceCurve::clamp_point() const { return std::pow((1.0 - 1.0 / ceiling) / a, 1.0 / b); }

double acceptance_curve(double entropy) { return std::max(1.0, AcceptanceCurve{}(entropy)); }

double estimate_speedup(double accept_length, std::size_t steps, const SpeculationCost& cost) {
  if (accept_length < 1.0) throw std::invalid_argument("estimate_speedup: accept length must be >= 1");
  return accept_length / (1.0 + static_cast<double>(steps) * cost.draft_cost_ratio + cost.verify_overhead);
}

}  // namespace mimo
