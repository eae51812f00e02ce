#include "mimo/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "attention_detail.hpp"

namespace mimo {

void AttentionHeadState::validate() const {
  if (!std::isfinite(sink)) throw std::invalid_argument("attention head: sink must be finite");
  if (head_dim_qk == 0) throw std::invalid_argument("attention head: d must be positive");
}

std::vector<double> attention_logits(std::span<const double> q, const Matrix& keys, std::size_t d) {
  if (d == 0 || q.size() != d || keys.cols != d) throw std::invalid_argument("attention_logits: dimension mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> a(keys.rows);
  for (std::size_t j = 0; j < keys.rows; ++j) a[j] = dot(q, keys.row(j)) * scale;
  return a;
}

SinkSoftmax sink_softmax(std::span<const double> logits, double sink) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  double m = sink;
  for (double a : logits) m = std::max(m, a);
  if (m == kNegInf) throw std::invalid_argument("sink_softmax: no finite logit and sink = -inf");

  SinkSoftmax out;
  out.row_max = m;
  out.weights.resize(logits.size());
  const double sink_term = std::exp(sink - m);
  double denom = sink_term;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out.weights[j] = logits[j] == kNegInf ? 0.0 : std::exp(logits[j] - m);
    denom += out.weights[j];
  }
  for (double& w : out.weights) w /= denom;
  out.sink_mass = sink_term / denom;
  return out;
}

KeyRange swa_window(std::int64_t query_pos, std::int64_t window) {
  if (query_pos < 0 || window < 1) throw std::invalid_argument("swa_window: need i >= 0 and W >= 1");
  return {std::max<std::int64_t>(0, query_pos - window + 1), query_pos};
}

KeyRange causal_range(std::int64_t query_pos) { return {0, query_pos}; }

void apply_partial_rope(std::span<double> vec, std::int64_t pos, double base, std::size_t rot_dims) {
  if (rot_dims % 2 != 0) throw std::invalid_argument("partial rope: rot_dims must be even");
  if (rot_dims > vec.size()) throw std::invalid_argument("partial rope: rot_dims exceeds vector length");
  const double p = static_cast<double>(pos);
  for (std::size_t t = 0; t < rot_dims / 2; ++t) {
    const double inv_freq = std::pow(base, -2.0 * static_cast<double>(t) / static_cast<double>(rot_dims));
    const double angle = p * inv_freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = vec[2 * t];
    const double x1 = vec[2 * t + 1];
    vec[2 * t] = x0 * c - x1 * s;
    vec[2 * t + 1] = x0 * s + x1 * c;
  }
}

std::vector<double> partial_rope(std::span<const double> vec, std::int64_t pos, double base, std::size_t rot_dims) {
  std::vector<double> out(vec.begin(), vec.end());
  apply_partial_rope(out, pos, base, rot_dims);
  return out;
}

void AttentionInputs::validate() const {
  if (q_heads == 0 || kv_heads == 0 || q_heads % kv_heads != 0)
    throw std::invalid_argument("attend: q_heads must be a positive multiple of kv_heads");
  if (head_dim_qk == 0 || head_dim_v == 0) throw std::invalid_argument("attend: head dims must be positive");
  if (q.rows == 0) throw std::invalid_argument("attend: need at least one query");
  if (q.cols != q_heads * head_dim_qk || k.cols != kv_heads * head_dim_qk || v.cols != kv_heads * head_dim_v)
    throw std::invalid_argument("attend: operand width mismatch");
  if (k.rows != v.rows) throw std::invalid_argument("attend: key and value counts differ");
  if (q_positions.size() != q.rows || k_positions.size() != k.rows)
    throw std::invalid_argument("attend: position count mismatch");
  for (std::size_t j = 1; j < k_positions.size(); ++j)
    if (k_positions[j] <= k_positions[j - 1]) throw std::invalid_argument("attend: key positions must increase");
}

namespace detail {

void check_attend_args(const AttentionInputs& in, std::span<const AttentionHeadState> heads,
                       std::span<const KeyRange> mask) {
  in.validate();
  if (heads.size() != in.q_heads) throw std::invalid_argument("attend: one head state per query head required");
  for (const auto& h : heads) {
    h.validate();
    if (h.head_dim_qk != in.head_dim_qk) throw std::invalid_argument("attend: head dimension mismatch");
  }
  if (mask.size() != in.q.rows) throw std::invalid_argument("attend: one mask range per query required");
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i].last > in.q_positions[i]) throw std::invalid_argument("attend: non-causal mask");
  }
}

std::pair<std::size_t, std::size_t> key_span(const std::vector<std::int64_t>& positions, KeyRange r) {
  const auto lo = std::lower_bound(positions.begin(), positions.end(), r.first);
  const auto hi = std::upper_bound(lo, positions.end(), r.last);
  return {static_cast<std::size_t>(lo - positions.begin()), static_cast<std::size_t>(hi - positions.begin())};
}

}  // namespace detail

Matrix attend(const AttentionInputs& in, std::span<const AttentionHeadState> heads, std::span<const KeyRange> mask) {
  detail::check_attend_args(in, heads, mask);
  const std::size_t dqk = in.head_dim_qk;
  const std::size_t dv = in.head_dim_v;
  const std::size_t group = in.q_heads / in.kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dqk));
  Matrix out(in.q.rows, in.q_heads * dv);
  const auto tasks = static_cast<long long>(in.q.rows * in.q_heads);

#pragma omp parallel if (tasks > 16)
  {
    std::vector<double> scratch;
    std::vector<double> acc(dv);
#pragma omp for schedule(static)
    for (long long task = 0; task < tasks; ++task) {
      const auto i = static_cast<std::size_t>(task) / in.q_heads;
      const auto h = static_cast<std::size_t>(task) % in.q_heads;
      const std::size_t g = h / group;
      const auto [lo, hi] = detail::key_span(in.k_positions, mask[i]);
      const auto qi = in.q.row(i).subspan(h * dqk, dqk);

      scratch.resize(hi - lo);
      double m = heads[h].sink;
      for (std::size_t j = lo; j < hi; ++j) {
        scratch[j - lo] = dot(qi, in.k.row(j).subspan(g * dqk, dqk)) * scale;
        m = std::max(m, scratch[j - lo]);
      }
      double denom = std::exp(heads[h].sink - m);
      for (double& a : scratch) {
        a = std::exp(a - m);
        denom += a;
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = lo; j < hi; ++j) {
        const double w = scratch[j - lo] / denom;
        const auto vj = in.v.row(j).subspan(g * dv, dv);
        for (std::size_t c = 0; c < dv; ++c) acc[c] += w * vj[c];
      }
      std::copy(acc.begin(), acc.end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(h * dv));
    }
  }
  return out;
}

}  // namespace mimo
