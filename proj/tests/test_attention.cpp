#include <doctest.h>

#include <cmath>
#include <limits>

#include "mimo/attention.hpp"
#include "mimo/rng.hpp"
#include "oracles.hpp"

using namespace mimo;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

AttentionInputs random_inputs(Rng& rng, std::size_t n, std::size_t qh, std::size_t kvh, std::size_t dqk,
                              std::size_t dv) {
  AttentionInputs in;
  in.q_heads = qh;
  in.kv_heads = kvh;
  in.head_dim_qk = dqk;
  in.head_dim_v = dv;
  in.q = Matrix(n, qh * dqk);
  in.k = Matrix(n, kvh * dqk);
  in.v = Matrix(n, kvh * dv);
  for (auto* m : {&in.q, &in.k, &in.v})
    for (auto& x : m->data) x = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    in.q_positions.push_back(static_cast<std::int64_t>(i));
    in.k_positions.push_back(static_cast<std::int64_t>(i));
  }
  return in;
}

// o_i with an explicit n x n masked score matrix per head.
Matrix brute_attend(const AttentionInputs& in, std::span<const AttentionHeadState> heads, std::int64_t window) {
  const std::size_t n = in.q.rows;
  Matrix out(n, in.q_heads * in.head_dim_v);
  const std::size_t group = in.q_heads / in.kv_heads;
  for (std::size_t h = 0; h < in.q_heads; ++h) {
    const std::size_t g = h / group;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      for (std::size_t j = 0; j < n; ++j) {
        const bool ok = j <= i && static_cast<std::int64_t>(i - j) < window;
        double dot = 0.0;
        for (std::size_t c = 0; c < in.head_dim_qk; ++c)
          dot += in.q(i, h * in.head_dim_qk + c) * in.k(j, g * in.head_dim_qk + c);
        s[j] = ok ? dot / std::sqrt(static_cast<double>(in.head_dim_qk)) : -kInf;
      }
      const auto p = oracle::direct_sink_softmax(s, heads[h].sink);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < in.head_dim_v; ++c) out(i, h * in.head_dim_v + c) += p.weights[j] * in.v(j, g * in.head_dim_v + c);
    }
  }
  return out;
}

std::vector<KeyRange> window_mask(std::size_t n, std::int64_t w) {
  std::vector<KeyRange> m;
  for (std::size_t i = 0; i < n; ++i) m.push_back(swa_window(static_cast<std::int64_t>(i), w));
  return m;
}

}  // namespace

TEST_CASE("attention logits") {
  const std::vector<double> e0{1, 0, 0, 0};
  const std::vector<double> e1{0, 1, 0, 0};
  Matrix keys(1, 4);
  std::ranges::copy(e0, keys.row(0).begin());
  CHECK(attention_logits(e0, keys, 4)[0] == 0.5);
  CHECK(attention_logits(e1, keys, 4)[0] == 0.0);

  Rng rng(3);
  std::vector<double> q(8);
  for (auto& x : q) x = rng.normal();
  Matrix k3(3, 8);
  for (auto& x : k3.data) x = rng.normal();
  const auto a = attention_logits(q, k3, 8);
  for (std::size_t j = 0; j < 3; ++j) {
    double dot = 0.0;
    for (std::size_t c = 0; c < 8; ++c) dot += q[c] * k3(j, c);
    CHECK(std::abs(a[j] - dot / std::sqrt(8.0)) <= 1e-12);
  }
  CHECK_THROWS_AS(attention_logits(q, Matrix(1, 4), 8), std::invalid_argument);
}

TEST_CASE("sink softmax examples") {
  auto s = sink_softmax(std::vector<double>{0.0, 0.0}, -1e9);
  CHECK(s.weights[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.weights[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.sink_mass < 1e-300);

  s = sink_softmax(std::vector<double>{0.0}, 0.0);
  CHECK(s.weights[0] == 0.5);
  CHECK(s.sink_mass == 0.5);

  const std::vector<double> a{1.0, 2.0};
  s = sink_softmax(a, 0.5);
  const auto d = oracle::direct_sink_softmax(a, 0.5);
  CHECK(std::abs(s.weights[0] - d.weights[0]) <= 1e-12);
  CHECK(std::abs(s.weights[1] - d.weights[1]) <= 1e-12);
  CHECK(std::abs(s.sink_mass - d.sink_mass) <= 1e-12);
  CHECK(s.row_max == 2.0);
}

TEST_CASE("sink softmax with masked entries and degenerate inputs") {
  const auto s = sink_softmax(std::vector<double>{-kInf, 1.0, -kInf}, 1.0);
  CHECK(s.weights[0] == 0.0);
  CHECK(s.weights[2] == 0.0);
  CHECK(s.weights[1] == doctest::Approx(0.5));
  CHECK(s.row_max == 1.0);
  const auto empty = sink_softmax(std::vector<double>{}, 0.3);
  CHECK(empty.weights.empty());
  CHECK(empty.sink_mass == 1.0);
  CHECK_THROWS_AS(sink_softmax(std::vector<double>{}, -kInf), std::invalid_argument);
  CHECK_THROWS_AS(sink_softmax(std::vector<double>{-kInf}, -kInf), std::invalid_argument);
}

TEST_CASE("sink softmax properties over random rows") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(1 + rng.below(64));
    for (auto& x : a) x = 20.0 * (rng.uniform() - 0.5);
    const double sink = 80.0 * (rng.uniform() - 0.5);
    const auto s = sink_softmax(a, sink);
    double total = s.sink_mass;
    double maxa = sink;
    for (std::size_t j = 0; j < a.size(); ++j) {
      CHECK(s.weights[j] >= 0.0);
      total += s.weights[j];
      maxa = std::max(maxa, a[j]);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
    CHECK(s.row_max == maxa);
    CHECK(s.sink_mass > 0.0);

    // shift invariance
    const double c = 30.0 * (rng.uniform() - 0.5);
    auto shifted = a;
    for (auto& x : shifted) x += c;
    const auto t = sink_softmax(shifted, sink + c);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(t.weights[j] - s.weights[j]) <= 1e-12);
  }
}

TEST_CASE("swa window examples") {
  CHECK(swa_window(200, 128) == KeyRange{73, 200});
  CHECK(swa_window(5, 128) == KeyRange{0, 5});
  CHECK(swa_window(0, 1) == KeyRange{0, 0});
  CHECK(swa_window(0, 1000) == KeyRange{0, 0});
  CHECK(causal_range(9) == KeyRange{0, 9});
  CHECK_THROWS_AS(swa_window(3, 0), std::invalid_argument);
  CHECK_THROWS_AS(swa_window(-1, 4), std::invalid_argument);
}

TEST_CASE("partial rope") {
  Rng rng(5);
  std::vector<double> v(192);
  for (auto& x : v) x = rng.normal();
  CHECK(partial_rope(v, 0, 10'000.0, 64) == v);

  const auto r = partial_rope(v, 1234, 640'000.0, 64);
  for (std::size_t i = 64; i < 192; ++i) CHECK(r[i] == v[i]);
  for (std::size_t t = 0; t < 32; ++t) {
    const double before = std::hypot(v[2 * t], v[2 * t + 1]);
    const double after = std::hypot(r[2 * t], r[2 * t + 1]);
    CHECK(std::abs(before - after) <= 1e-12);
  }
  CHECK_THROWS_AS(partial_rope(v, 1, 10'000.0, 63), std::invalid_argument);
  CHECK_THROWS_AS(partial_rope(std::vector<double>(4), 1, 10'000.0, 8), std::invalid_argument);
}

TEST_CASE("rope scores depend only on relative position") {
  Rng rng(6);
  std::vector<double> q(16), k(16);
  for (auto& x : q) x = rng.normal();
  for (auto& x : k) x = rng.normal();
  auto score = [&](std::int64_t m, std::int64_t n) {
    return dot(partial_rope(q, m, 10'000.0, 8), partial_rope(k, n, 10'000.0, 8));
  };
  CHECK(std::abs(score(7, 3) - score(107, 103)) <= 1e-10);
  CHECK(std::abs(score(40, 0) - score(1040, 1000)) <= 1e-10);
}

TEST_CASE("attend single key examples") {
  AttentionInputs in;
  in.head_dim_qk = 2;
  in.head_dim_v = 3;
  in.q = Matrix(1, 2);
  in.k = Matrix(1, 2);
  in.v = Matrix(1, 3);
  in.q.data = {0.3, -0.4};
  in.k.data = {1.0, 2.0};
  in.v.data = {1.0, -2.0, 3.0};
  in.q_positions = {0};
  in.k_positions = {0};
  const std::vector<KeyRange> mask{{0, 0}};

  std::vector<AttentionHeadState> heads{{-1e9, 2}};
  CHECK(attend(in, heads, mask).data == in.v.data);

  const double a11 = (0.3 * 1.0 - 0.4 * 2.0) / std::sqrt(2.0);
  heads[0].sink = a11;
  const auto o = attend(in, heads, mask);
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(o.data[c] - 0.5 * in.v.data[c]) <= 1e-15);
}

TEST_CASE("attend matches the brute-force banded oracle") {
  Rng rng(21);
  for (std::int64_t w : {1, 3, 5, 100}) {
    for (auto [qh, kvh] : {std::pair<std::size_t, std::size_t>{1, 1}, {4, 2}, {6, 3}, {4, 1}}) {
      const auto in = random_inputs(rng, 8, qh, kvh, 6, 5);
      std::vector<AttentionHeadState> heads(qh);
      for (auto& h : heads) h = {3.0 * rng.normal(), 6};
      const auto mask = window_mask(8, w);
      const auto fast = attend(in, heads, mask);
      CHECK(oracle::max_abs_diff(fast, brute_attend(in, heads, w)) <= 1e-10);
      CHECK(fast == attend_reference(in, heads, mask));
    }
  }
}

TEST_CASE("short sequences: windowed equals causal bit for bit") {
  Rng rng(22);
  const auto in = random_inputs(rng, 10, 4, 2, 8, 4);
  std::vector<AttentionHeadState> heads(4, {0.25, 8});
  std::vector<KeyRange> causal;
  for (std::int64_t i = 0; i < 10; ++i) causal.push_back(causal_range(i));
  CHECK(attend(in, heads, window_mask(10, 10)) == attend(in, heads, causal));
  CHECK(attend(in, heads, window_mask(10, 64)) == attend(in, heads, causal));
}

TEST_CASE("GQA with group size one equals per-head attention") {
  Rng rng(23);
  const auto in = random_inputs(rng, 7, 3, 3, 4, 4);
  std::vector<AttentionHeadState> heads{{0.1, 4}, {-0.7, 4}, {1.3, 4}};
  const auto mask = window_mask(7, 4);
  const auto all = attend(in, heads, mask);
  for (std::size_t h = 0; h < 3; ++h) {
    AttentionInputs one;
    one.head_dim_qk = 4;
    one.head_dim_v = 4;
    one.q = Matrix(7, 4);
    one.k = Matrix(7, 4);
    one.v = Matrix(7, 4);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t c = 0; c < 4; ++c) {
        one.q(i, c) = in.q(i, h * 4 + c);
        one.k(i, c) = in.k(i, h * 4 + c);
        one.v(i, c) = in.v(i, h * 4 + c);
      }
    one.q_positions = in.q_positions;
    one.k_positions = in.k_positions;
    const std::vector<AttentionHeadState> single{heads[h]};
    const auto o = attend(one, single, mask);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t c = 0; c < 4; ++c) CHECK(o(i, c) == all(i, h * 4 + c));
  }
}

TEST_CASE("output lies in the hull of zero and the values") {
  Rng rng(24);
  auto in = random_inputs(rng, 12, 2, 1, 4, 1);
  for (auto& x : in.v.data) x = 1.0;  // with all v = 1, o = total key weight
  std::vector<AttentionHeadState> heads{{0.0, 4}, {-2.0, 4}};
  const auto o = attend(in, heads, window_mask(12, 5));
  for (double x : o.data) {
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("attend rejects non-causal masks and bad heads") {
  Rng rng(25);
  const auto in = random_inputs(rng, 3, 1, 1, 4, 4);
  const std::vector<AttentionHeadState> heads{{0.0, 4}};
  const std::vector<KeyRange> bad{{0, 0}, {0, 2}, {0, 2}};
  CHECK_THROWS_WITH_AS(attend(in, heads, bad), "attend: non-causal mask", std::invalid_argument);
  const std::vector<AttentionHeadState> nan_sink{{std::nan(""), 4}};
  CHECK_THROWS_AS(attend(in, nan_sink, window_mask(3, 2)), std::invalid_argument);
}
