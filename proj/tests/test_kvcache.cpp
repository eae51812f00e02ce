#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mimo/kvcache.hpp"
#include "mimo/rng.hpp"

using namespace mimo;

namespace {

std::vector<double> key_of(std::int64_t pos) { return {static_cast<double>(pos), -static_cast<double>(pos)}; }
std::vector<double> value_of(std::int64_t pos) { return {0.5 * static_cast<double>(pos)}; }

std::vector<std::int64_t> iota_positions(std::int64_t a, std::int64_t b) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(b - a + 1));
  std::iota(v.begin(), v.end(), a);
  return v;
}

}  // namespace

TEST_CASE("window cache eviction") {
  WindowKvCache c(4, 2, 1);
  for (std::int64_t p = 0; p <= 3; ++p) c.append(p, key_of(p), value_of(p));
  CHECK(c.positions() == iota_positions(0, 3));
  for (std::int64_t p = 4; p <= 5; ++p) c.append(p, key_of(p), value_of(p));
  CHECK(c.positions() == iota_positions(2, 5));
  CHECK(c.size() == 4);
  CHECK(c.newest() == 5);
  CHECK_THROWS_WITH_AS(c.append(7, key_of(7), value_of(7)), doctest::Contains("non-contiguous position"),
                       std::invalid_argument);
}

TEST_CASE("window cache gather") {
  WindowKvCache c(4, 2, 1);
  for (std::int64_t p = 0; p <= 5; ++p) c.append(p, key_of(p), value_of(p));
  auto e = c.gather(5);
  CHECK(e.positions == iota_positions(2, 5));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(e.keys(i, 0) == static_cast<double>(e.positions[i]));
    CHECK(e.keys(i, 1) == -static_cast<double>(e.positions[i]));
    CHECK(e.values(i, 0) == 0.5 * static_cast<double>(e.positions[i]));
  }
  // the next query excludes the oldest stored entry
  e = c.gather(6);
  CHECK(e.positions == iota_positions(3, 5));
  CHECK_THROWS_WITH_AS(c.gather(4), "kv cache: query position precedes newest stored position", std::invalid_argument);
  WindowKvCache empty(3, 2, 1);
  CHECK(empty.gather(0).positions.empty());
}

TEST_CASE("global cache") {
  GlobalKvCache g(2, 1);
  for (std::int64_t p = 0; p <= 5; ++p) g.append(p, key_of(p), value_of(p));
  const auto e = g.gather(5);
  CHECK(e.positions == iota_positions(0, 5));
  CHECK(e.keys(3, 0) == 3.0);
  CHECK(g.gather(6).positions.size() == 6);
  CHECK_THROWS_AS(g.append(9, key_of(9), value_of(9)), std::invalid_argument);
  CHECK_THROWS_AS(g.append(6, std::vector<double>{1.0}, value_of(6)), std::invalid_argument);
}

TEST_CASE("ring invariant under random append runs") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cap = 1 + rng.below(9);
    WindowKvCache c(cap, 2, 1);
    const auto n = static_cast<std::int64_t>(rng.below(40));
    for (std::int64_t p = 0; p < n; ++p) {
      c.append(p, key_of(p), value_of(p));
      const auto pos = c.positions();
      const auto expect_len = std::min<std::int64_t>(p + 1, static_cast<std::int64_t>(cap));
      REQUIRE(static_cast<std::int64_t>(pos.size()) == expect_len);
      CHECK(pos == iota_positions(p + 1 - expect_len, p));
      const auto e = c.gather(p);
      CHECK(e.positions == pos);
      for (std::size_t i = 0; i < pos.size(); ++i) CHECK(e.keys(i, 0) == static_cast<double>(pos[i]));
    }
  }
}

TEST_CASE("memory report on the full-size config") {
  const ModelConfig c;
  const std::int64_t L = 262'144;
  const auto r = memory_report(c, L);
  CHECK(r.swa_layers == 39);
  CHECK(r.ga_layers == 9);
  CHECK(r.swa_entries_per_layer == 128);
  CHECK(r.swa_bytes_per_entry == 8 * (192 + 128) * 2);
  CHECK(r.ga_bytes_per_entry == 4 * (192 + 128) * 2);
  CHECK(r.hybrid_bytes == r.swa_bytes + r.ga_bytes);
  CHECK(r.swa_bytes == 39LL * 128 * 5120);
  CHECK(r.ga_bytes == 9LL * L * 2560);
  CHECK(r.baseline_bytes == L * (39LL * 5120 + 9LL * 2560));

  // closed forms
  CHECK(r.limit_layer_normalized == doctest::Approx(48.0 / 9.0).epsilon(1e-15));
  CHECK(r.limit_byte_exact == doctest::Approx(348.0 / 36.0).epsilon(1e-15));
  const double layer_norm = 48.0 * L / (9.0 * L + 39.0 * 128);
  const double byte_exact = (39.0 * 8 + 9.0 * 4) * L / (9.0 * 4 * L + 39.0 * 8 * 128);
  CHECK(r.ratio_layer_normalized == doctest::Approx(layer_norm).epsilon(1e-14));
  CHECK(r.ratio_byte_exact == doctest::Approx(byte_exact).epsilon(1e-14));
  CHECK(r.ratio_layer_normalized == doctest::Approx(5.3219).epsilon(1e-4));
  CHECK(r.ratio_byte_exact == doctest::Approx(9.6263).epsilon(1e-4));
}

TEST_CASE("memory report on the small profile") {
  const auto r = memory_report(profile_config("small"), 1024);
  CHECK(r.ga_layers == 3);
  CHECK(r.swa_layers == 9);
  CHECK(r.ratio_layer_normalized == doctest::Approx(12.0 * 1024 / (3.0 * 1024 + 9.0 * 8)).epsilon(1e-14));
  CHECK(r.ratio_layer_normalized == doctest::Approx(3.908).epsilon(1e-3));
}

TEST_CASE("memory report at L = W is 1") {
  const ModelConfig c;
  const auto r = memory_report(c, c.window);
  CHECK(r.ratio_layer_normalized == 1.0);
  CHECK(r.ratio_byte_exact == 1.0);
}

TEST_CASE("memory report is monotone in L and approaches the limit") {
  const ModelConfig c;
  CacheReport prev = memory_report(c, 1);
  for (std::int64_t L = 2; L < 1 << 22; L = L * 3 / 2 + 1) {
    const auto r = memory_report(c, L);
    CHECK(r.hybrid_bytes >= prev.hybrid_bytes);
    CHECK(r.baseline_bytes >= prev.baseline_bytes);
    CHECK(r.ratio_layer_normalized >= prev.ratio_layer_normalized);
    CHECK(r.ratio_byte_exact >= prev.ratio_byte_exact);
    CHECK(r.ratio_layer_normalized <= r.limit_layer_normalized);
    prev = r;
  }
  CHECK(prev.limit_layer_normalized - prev.ratio_layer_normalized < 1e-3);
}

TEST_CASE("report text is aligned key = value") {
  const auto text = format_report(memory_report(ModelConfig{}, 262'144));
  CHECK(text.find("ratio_layer_normalized   = ") != std::string::npos);
  CHECK(text.find("limit_byte_exact         = 9.666667") != std::string::npos);
  CHECK_THROWS_AS(memory_report(ModelConfig{}, 0), std::invalid_argument);
}
