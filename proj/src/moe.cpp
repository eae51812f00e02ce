#include "mimo/moe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mimo {

std::vector<double> router_scores(std::span<const double> hidden, const RouterState& state) {
  std::vector<double> scores(state.num_experts());
  matvec(state.gate_weights, hidden, scores);
  for (double& s : scores) s = 1.0 / (1.0 + std::exp(-s));
  return scores;
}

Routing select_experts(std::span<const double> scores, std::span<const double> bias, std::size_t k) {
  if (bias.size() != scores.size()) throw std::invalid_argument("select_experts: bias length mismatch");
  if (k == 0 || k > scores.size()) throw std::invalid_argument("select_experts: need 1 <= k <= num_experts");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] + bias[a] > scores[b] + bias[b]; });
  Routing r;
  r.experts.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  double total = 0.0;
  for (auto e : r.experts) total += scores[e];
  for (auto e : r.experts) r.gates.push_back(total > 0.0 ? scores[e] / total : 1.0 / static_cast<double>(k));
  return r;
}

Routing route(std::span<const double> hidden, const RouterState& state, std::size_t k) {
  return select_experts(router_scores(hidden, state), state.expert_bias, k);
}

void update_expert_bias(RouterState& state, std::span<const double> per_expert_load) {
  if (per_expert_load.size() != state.expert_bias.size())
    throw std::invalid_argument("update_expert_bias: load length mismatch");
  const double mean = std::accumulate(per_expert_load.begin(), per_expert_load.end(), 0.0) /
                      static_cast<double>(per_expert_load.size());
  for (std::size_t e = 0; e < per_expert_load.size(); ++e) {
    if (per_expert_load[e] < 0) throw std::invalid_argument("update_expert_bias: negative load");
    const double err = mean - per_expert_load[e];
    const double sign = err > 0 ? 1.0 : (err < 0 ? -1.0 : 0.0);
    state.expert_bias[e] += state.bias_update_factor * sign;
  }
}

double sequence_aux_loss(const Matrix& probs, std::size_t k) {
  const std::size_t tokens = probs.rows;
  const std::size_t experts = probs.cols;
  if (tokens == 0 || experts == 0) throw std::invalid_argument("sequence_aux_loss: empty input");
  std::vector<double> count(experts, 0.0);
  std::vector<double> mean_prob(experts, 0.0);
  const std::vector<double> zero_bias(experts, 0.0);
  for (std::size_t t = 0; t < tokens; ++t) {
    const auto row = probs.row(t);
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("sequence_aux_loss: probability rows must sum to 1");
    for (auto e : select_experts(row, zero_bias, k).experts) count[e] += 1.0;
    for (std::size_t e = 0; e < experts; ++e) mean_prob[e] += row[e];
  }
  double loss = 0.0;
  const double f_scale = static_cast<double>(experts) / (static_cast<double>(k) * static_cast<double>(tokens));
  for (std::size_t e = 0; e < experts; ++e) loss += f_scale * count[e] * (mean_prob[e] / static_cast<double>(tokens));
  return loss;
}

std::vector<double> ffn_forward(const FeedForward& ffn, std::span<const double> x) {
  const std::size_t inner = ffn.w_gate.rows;
  std::vector<double> gate(inner), up(inner), out(ffn.w_down.rows);
  matvec(ffn.w_gate, x, gate);
  matvec(ffn.w_up, x, up);
  for (std::size_t i = 0; i < inner; ++i) gate[i] = silu(gate[i]) * up[i];
  matvec(ffn.w_down, gate, out);
  return out;
}

void validate_replay(const MoeLayer& layer, const Routing& r) {
  if (r.experts.size() != layer.top_k || r.gates.size() != layer.top_k)
    throw std::invalid_argument("moe_forward: replay shape mismatch");
  for (std::size_t i = 0; i < r.experts.size(); ++i) {
    if (r.experts[i] >= layer.experts.size()) throw std::invalid_argument("moe_forward: replay shape mismatch");
    for (std::size_t j = 0; j < i; ++j)
      if (r.experts[j] == r.experts[i]) throw std::invalid_argument("moe_forward: replay shape mismatch");
  }
}

MoeOutput moe_forward(const MoeLayer& layer, std::span<const double> hidden, const Routing* replay) {
  MoeOutput out;
  if (replay != nullptr) {
    validate_replay(layer, *replay);
    out.routing = *replay;
  } else {
    out.routing = route(hidden, layer.router, layer.top_k);
  }
  out.output.assign(hidden.size(), 0.0);
  for (std::size_t i = 0; i < out.routing.experts.size(); ++i) {
    const auto y = ffn_forward(layer.experts[out.routing.experts[i]], hidden);
    const double g = out.routing.gates[i];
    for (std::size_t c = 0; c < y.size(); ++c) out.output[c] += g * y[c];
  }
  return out;
}

const Routing* RoutingRecord::find(int layer, std::int64_t token) const {
  for (const auto& e : entries)
    if (e.layer == layer && e.token == token) return &e.routing;
  return nullptr;
}

void write_routing_record(std::ostream& os, const RoutingRecord& record) {
  os << "mimo-routing 1\n";
  os << "entries " << record.entries.size() << '\n';
  char buf[64];
  for (const auto& e : record.entries) {
    os << e.layer << ' ' << e.token << ' ' << e.routing.experts.size();
    for (auto x : e.routing.experts) os << ' ' << x;
    for (double g : e.routing.gates) {
      std::snprintf(buf, sizeof buf, " %a", g);
      os << buf;
    }
    os << '\n';
  }
}

RoutingRecord read_routing_record(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "mimo-routing" || version != 1)
    throw std::runtime_error("routing record: header mismatch");
  std::string word;
  std::size_t n = 0;
  if (!(is >> word >> n) || word != "entries") throw std::runtime_error("routing record: missing entry count");
  RoutingRecord rec;
  rec.entries.resize(n);
  for (auto& e : rec.entries) {
    std::size_t k = 0;
    if (!(is >> e.layer >> e.token >> k)) throw std::runtime_error("routing record: truncated entry");
    e.routing.experts.resize(k);
    e.routing.gates.resize(k);
    for (auto& x : e.routing.experts)
      if (!(is >> x)) throw std::runtime_error("routing record: truncated entry");
    for (auto& g : e.routing.gates) {
      if (!(is >> word)) throw std::runtime_error("routing record: truncated entry");
      char* end = nullptr;
      g = std::strtod(word.c_str(), &end);
      if (end != word.c_str() + word.size()) throw std::runtime_error("routing record: bad gate value");
    }
  }
  return rec;
}

}  // namespace mimo
