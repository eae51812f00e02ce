#include <cmath>

#include "attention_detail.hpp"

namespace mimo {

Matrix attend_reference(const AttentionInputs& in, std::span<const AttentionHeadState> heads,
                        std::span<const KeyRange> mask) {
  detail::check_attend_args(in, heads, mask);
  const std::size_t dqk = in.head_dim_qk;
  const std::size_t dv = in.head_dim_v;
  const std::size_t group = in.q_heads / in.kv_heads;
  Matrix out(in.q.rows, in.q_heads * dv);

  for (std::size_t i = 0; i < in.q.rows; ++i) {
    const auto [lo, hi] = detail::key_span(in.k_positions, mask[i]);
    for (std::size_t h = 0; h < in.q_heads; ++h) {
      const std::size_t g = h / group;
      Matrix keys(hi - lo, dqk);
      for (std::size_t j = lo; j < hi; ++j) {
        const auto src = in.k.row(j).subspan(g * dqk, dqk);
        std::copy(src.begin(), src.end(), keys.row(j - lo).begin());
      }
      const auto logits = attention_logits(in.q.row(i).subspan(h * dqk, dqk), keys, dqk);
      const auto sm = sink_softmax(logits, heads[h].sink);
      auto o = out.row(i).subspan(h * dv, dv);
      for (std::size_t j = lo; j < hi; ++j) {
        const auto vj = in.v.row(j).subspan(g * dv, dv);
        for (std::size_t c = 0; c < dv; ++c) o[c] += sm.weights[j - lo] * vj[c];
      }
    }
  }
  return out;
}

}  // namespace mimo
