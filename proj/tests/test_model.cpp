#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "fixtures.hpp"
#include "mimo/checkpoint.hpp"
#include "oracles.hpp"

using namespace mimo;

namespace {

std::map<std::string, std::vector<double>> snapshot(const HybridModel& m) {
  std::map<std::string, std::vector<double>> out;
  for_each_parameter(m, [&](const std::string& name, std::span<const double> data, std::size_t, std::size_t) {
    out[name].assign(data.begin(), data.end());
  });
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mimo-test-model";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("forward matches the full-matrix oracle") {
  Rng rng(100);
  for (int trial = 0; trial < 15; ++trial) {
    const auto m = fixture::random_toy_model(rng);
    const auto tokens = fixture::random_tokens(rng, 1 + rng.below(40), m.config.vocab_size);
    const auto trace = forward_full(m, tokens);
    CHECK(oracle::max_abs_diff(trace.logits, oracle::forward_logits(m, tokens)) <= 1e-10);

    ForwardOptions causal;
    causal.full_causal_everywhere = true;
    CHECK(oracle::max_abs_diff(forward_full(m, tokens, causal).logits, oracle::forward_logits(m, tokens, true)) <=
          1e-10);
  }
}

TEST_CASE("entropy is the softmax entropy of each logit row") {
  Rng rng(101);
  const auto m = fixture::random_toy_model(rng);
  const auto tokens = fixture::random_tokens(rng, 12, m.config.vocab_size);
  const auto trace = forward_full(m, tokens);
  REQUIRE(trace.entropy.size() == tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto p = softmax(trace.logits.row(i));
    double h = 0.0;
    for (double x : p) h -= x > 0 ? x * std::log(x) : 0.0;
    CHECK(trace.entropy[i] == doctest::Approx(h).epsilon(1e-12));
    CHECK(trace.entropy[i] >= 0.0);
    CHECK(trace.entropy[i] <= std::log(static_cast<double>(m.config.vocab_size)) + 1e-12);
  }
}

TEST_CASE("causality: later tokens never change earlier logits") {
  Rng rng(102);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = fixture::random_toy_model(rng);
    auto tokens = fixture::random_tokens(rng, 20, m.config.vocab_size);
    const auto before = forward_full(m, tokens).logits;
    const std::size_t j = 1 + rng.below(19);
    tokens[j] = (tokens[j] + 1) % m.config.vocab_size;
    const auto after = forward_full(m, tokens).logits;
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t v = 0; v < before.cols; ++v) CHECK(before(i, v) == after(i, v));
    bool changed = false;
    for (std::size_t v = 0; v < before.cols; ++v) changed |= before(j, v) != after(j, v);
    CHECK(changed);
  }
}

TEST_CASE("cached decode matches the full forward") {
  Rng rng(103);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = fixture::random_toy_model(rng);
    const auto tokens = fixture::random_tokens(rng, 1 + rng.below(60), m.config.vocab_size);
    const auto full = forward_full(m, tokens);
    auto state = make_decode_state(m);
    double worst = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto step = decode_step(m, state, tokens[i]);
      for (std::size_t v = 0; v < step.logits.size(); ++v)
        worst = std::max(worst, std::abs(step.logits[v] - full.logits(i, v)));
    }
    CHECK(worst <= 1e-8);
    CHECK(state.next_position == static_cast<std::int64_t>(tokens.size()));
  }
}

TEST_CASE("chunked forward with partial commits matches the full forward") {
  Rng rng(104);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = fixture::random_toy_model(rng);
    const auto tokens = fixture::random_tokens(rng, 40, m.config.vocab_size);
    const auto full = forward_full(m, tokens);
    auto state = make_decode_state(m);
    std::size_t pos = 0;
    while (pos < tokens.size()) {
      const std::size_t len = std::min<std::size_t>(1 + rng.below(7), tokens.size() - pos);
      const auto chunk = forward_chunk(m, state, std::span(tokens).subspan(pos, len));
      CHECK(state.next_position == static_cast<std::int64_t>(pos));  // forward_chunk is read-only
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t v = 0; v < chunk.logits.cols; ++v)
          CHECK(std::abs(chunk.logits(i, v) - full.logits(pos + i, v)) <= 1e-8);
      const std::size_t keep = 1 + rng.below(len);
      commit_chunk(state, chunk, keep);
      pos += keep;
    }
  }
}

TEST_CASE("replayed forward reproduces the recorded pass") {
  Rng rng(105);
  const auto m = fixture::random_toy_model(rng);
  const auto tokens = fixture::random_tokens(rng, 16, m.config.vocab_size);
  const auto first = forward_full(m, tokens);
  auto perturbed = m;
  for (auto& layer : perturbed.layers)
    if (layer.moe)
      for (auto& w : layer.moe->router.gate_weights.data) w += 1e-3 * rng.normal();
  ForwardOptions opt;
  opt.replay = &first.routing;
  const auto replayed = forward_full(perturbed, tokens, opt);
  CHECK(replayed.logits == first.logits);
  CHECK(replayed.routing == first.routing);

  RoutingRecord partial = first.routing;
  partial.entries.pop_back();
  opt.replay = &partial;
  CHECK_THROWS_AS(forward_full(perturbed, tokens, opt), std::invalid_argument);
}

TEST_CASE("init is deterministic in the seed") {
  const auto c = profile_config("tiny");
  const auto a = snapshot(init_model(c, 7));
  CHECK(a == snapshot(init_model(c, 7)));
  CHECK_FALSE(a == snapshot(init_model(c, 8)));
  for (const auto& [name, data] : a) {
    if (name.ends_with("norm"))
      for (double x : data) CHECK(x == 1.0);
    if (name.ends_with(".sinks") || name.ends_with(".expert_bias"))
      for (double x : data) CHECK(x == 0.0);
  }
}

TEST_CASE("init std matches the configured value") {
  auto c = profile_config("small");
  c.hidden_dim = 128;
  c.vocab_size = 1024;
  c.init_std = 0.006;
  const auto m = init_model(c, 11);
  double sum = 0.0, sq = 0.0;
  std::int64_t n = 0;
  for_each_parameter(m, [&](const std::string& name, std::span<const double> data, std::size_t, std::size_t) {
    if (name.ends_with("norm") || name.ends_with(".sinks") || name.ends_with(".expert_bias")) return;
    for (double x : data) {
      sum += x;
      sq += x * x;
    }
    n += static_cast<std::int64_t>(data.size());
  });
  REQUIRE(n >= 1'000'000);
  const double mean = sum / static_cast<double>(n);
  const double sd = std::sqrt(sq / static_cast<double>(n) - mean * mean);
  CHECK(std::abs(sd - 0.006) <= 0.02 * 0.006);
  CHECK(std::abs(mean) <= 1e-4);
}

TEST_CASE("parameter counts, tiny profile by hand") {
  // d=32; layout GaDense, SwaMoe, GaMoe, SwaMoe, SwaMoe, GaMoe
  // SWA attn 1024+512+512+1024+4 = 3076, GA attn 1024+256+256+1024+4 = 2564
  // norms 64 per layer, expert 1536, router 128, dense 6144, io 4128
  const auto c = profile_config("tiny");
  const auto p = count_params(c);
  CHECK(p.total == 58936);
  CHECK(p.active == 43576);
  CHECK(p.mtp_block == 11364);
  CHECK(allocated_params(init_model(c, 0)) == p.total);
}

TEST_CASE("parameter counts, structural properties") {
  Rng rng(106);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = fixture::random_toy_config(rng);
    CHECK(allocated_params(init_model(c, 1)) == count_params(c).total);
    c.experts_per_token = c.num_experts;
    const auto p = count_params(c);
    CHECK(p.total == p.active);
  }
  // full-size config against reference counts 309B / 15B / 0.33B
  const auto full = count_params(profile_config("paper"));
  CHECK(std::abs(full.total / 309.0e9 - 1.0) < 0.02);
  CHECK(std::abs(full.active / 15.0e9 - 1.0) < 0.05);
  CHECK(std::abs(full.mtp_block / 0.33e9 - 1.0) < 0.02);
  MESSAGE("full-size counts: total " << full.total << " active " << full.active << " mtp " << full.mtp_block);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(107);
  auto m = fixture::random_toy_model(rng);
  const auto path = scratch("round.ckpt");
  save_checkpoint(path.string(), m);
  const auto back = load_checkpoint(path.string());
  CHECK(back.config == m.config);
  CHECK(snapshot(back) == snapshot(m));
  CHECK(parameter_fingerprint(back) == parameter_fingerprint(m));
  const auto tokens = fixture::random_tokens(rng, 10, m.config.vocab_size);
  CHECK(forward_full(back, tokens).logits == forward_full(m, tokens).logits);

  const auto bytes = read_bytes(path);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "MIMOCKPT");
}

TEST_CASE("checkpoint corruption is reported") {
  Rng rng(108);
  const auto m = fixture::random_toy_model(rng);
  const auto path = scratch("bad.ckpt");
  save_checkpoint(path.string(), m);
  const auto good = read_bytes(path);

  auto flipped = good;
  flipped[flipped.size() / 2] ^= 0x10;
  write_bytes(path, flipped);
  CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), "checkpoint checksum mismatch", CheckpointError);

  write_bytes(path, std::vector<char>(good.begin(), good.end() - 20));
  CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), "checkpoint truncated", CheckpointError);

  auto magic = good;
  magic[0] = 'X';
  write_bytes(path, magic);
  CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), "checkpoint header mismatch", CheckpointError);

  auto trailing = good;
  trailing.push_back(0);
  write_bytes(path, trailing);
  CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), "checkpoint has trailing bytes", CheckpointError);

  CHECK_THROWS_AS(load_checkpoint((path.parent_path() / "missing.ckpt").string()), CheckpointError);
}
