#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "mimo/mtp.hpp"

using namespace mimo;

namespace {

// Two layers (dense GA, then MoE GA) with the second one zeroed out, so the
// main model is embedding -> layer 0 -> head and a copy of layer 0 drafts it
// exactly while everything fits in the window.
HybridModel inert_tail_model(std::uint64_t seed) {
  auto c = profile_config("tiny");
  c.hybrid_blocks = 1;
  c.swa_per_block = 1;
  c.num_layers = 2;
  c.window = 64;
  auto m = init_model(c, seed);
  auto& tail = m.layers[1];
  for (auto& x : tail.attn.wo.data) x = 0.0;
  for (auto& e : tail.moe->experts)
    for (auto& x : e.w_down.data) x = 0.0;
  return m;
}

}  // namespace

TEST_CASE("accepted prefix length") {
  const std::vector<int> t{1, 2, 3, 4};
  CHECK(accepted_prefix_length(std::vector<int>{}, t) == 0);
  CHECK(accepted_prefix_length(std::vector<int>{1, 2, 9}, t) == 2);
  CHECK(accepted_prefix_length(std::vector<int>{9, 2, 3}, t) == 0);
  CHECK(accepted_prefix_length(std::vector<int>{1, 2, 3}, t) == 3);
}

TEST_CASE("K = 0 degenerates to greedy decoding") {
  Rng rng(200);
  const auto m = fixture::random_toy_model(rng);
  const auto chain = init_draft_chain(m.config, 3, 1);
  const auto prompt = fixture::random_tokens(rng, 6, m.config.vocab_size);
  const auto out = speculative_decode(m, chain, prompt, 20, 0);
  CHECK(out.tokens == greedy_decode(m, prompt, 20));
  CHECK(out.stats.rounds == 19);
  CHECK(out.stats.mean_accept_length == 1.0);
  CHECK(out.stats.draft_tokens_proposed == 0);
  CHECK(speculative_decode(m, chain, prompt, 0, 3).tokens.empty());
  CHECK_THROWS_AS(speculative_decode(m, chain, prompt, 5, 4), std::invalid_argument);
}

TEST_CASE("a perfect draft chain accepts everything") {
  for (std::size_t k = 1; k <= 3; ++k) {
    const auto m = inert_tail_model(10 + k);
    const auto chain = copy_layer_draft_chain(m, k);
    Rng rng(201);
    const auto prompt = fixture::random_tokens(rng, 5, m.config.vocab_size);
    const std::size_t rounds = 6;
    const auto out = speculative_decode(m, chain, prompt, 1 + rounds * (k + 1), k);
    CHECK(out.tokens == greedy_decode(m, prompt, 1 + rounds * (k + 1)));
    CHECK(out.stats.rounds == rounds);
    CHECK(out.stats.mean_accept_length == static_cast<double>(k + 1));
    CHECK(out.stats.draft_tokens_rejected == 0);
    CHECK(out.stats.per_round_accepted[k] == rounds);
  }
}

TEST_CASE("speculative decoding is lossless") {
  Rng rng(202);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = fixture::random_toy_model(rng);
    const std::size_t k = 1 + rng.below(3);
    const auto chain = trial % 3 == 0 ? init_draft_chain(m.config, k, trial)
                                      : copy_layer_draft_chain(m, k, 0.05 * (trial % 3 - 1), trial);
    const auto prompt = fixture::random_tokens(rng, 1 + rng.below(20), m.config.vocab_size);
    const std::size_t max_new = 1 + rng.below(30);
    const auto out = speculative_decode(m, chain, prompt, max_new, k);
    CHECK(out.tokens == greedy_decode(m, prompt, max_new));
    const auto& s = out.stats;
    CHECK(s.draft_tokens_accepted + s.draft_tokens_rejected == s.draft_tokens_proposed);
    std::size_t hist = 0;
    for (auto c : s.per_round_accepted) hist += c;
    CHECK(hist == s.rounds);
    CHECK(s.mean_accept_length >= 1.0);
    CHECK(s.mean_accept_length <= static_cast<double>(k + 1));
  }
}

TEST_CASE("verify agrees with one-token-at-a-time decoding") {
  Rng rng(203);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = fixture::random_toy_model(rng);
    const auto prompt = fixture::random_tokens(rng, 8, m.config.vocab_size);
    auto batched = make_decode_state(m);
    auto serial = make_decode_state(m);
    for (int tok : prompt) {
      decode_step(m, batched, tok);
      decode_step(m, serial, tok);
    }
    const int pending = static_cast<int>(rng.below(static_cast<std::size_t>(m.config.vocab_size)));

    // Oracle: feed pending, then each draft while it matches the argmax.
    auto drafts = fixture::random_tokens(rng, 3, m.config.vocab_size);
    auto probe = serial;
    std::vector<int> targets;
    int tok = pending;
    for (std::size_t i = 0; i <= drafts.size(); ++i) {
      targets.push_back(static_cast<int>(argmax(decode_step(m, probe, tok).logits)));
      if (i < drafts.size()) tok = drafts[i];
    }
    // make some drafts right
    const std::size_t good = rng.below(4);
    for (std::size_t i = 0; i < good && i < drafts.size(); ++i) {
      drafts[i] = targets[i];
      probe = serial;
      targets.clear();
      tok = pending;
      for (std::size_t j = 0; j <= drafts.size(); ++j) {
        targets.push_back(static_cast<int>(argmax(decode_step(m, probe, tok).logits)));
        if (j < drafts.size()) tok = drafts[j];
      }
    }
    const auto expected = accepted_prefix_length(drafts, targets);

    const auto v = verify(m, batched, pending, drafts);
    CHECK(v.accepted == expected);
    CHECK(v.corrected_token == targets[expected]);
    CHECK(v.hidden.rows == expected + 1);
    CHECK(batched.next_position == static_cast<std::int64_t>(prompt.size() + expected + 1));

    decode_step(m, serial, pending);
    for (std::size_t i = 0; i < expected; ++i) decode_step(m, serial, drafts[i]);
    const auto a = decode_step(m, batched, 3).logits;
    const auto b = decode_step(m, serial, 3).logits;
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j] - b[j]) <= 1e-8);
  }
}

TEST_CASE("draft validates its inputs and leaves the state alone") {
  Rng rng(204);
  const auto m = fixture::random_toy_model(rng);
  const auto chain = init_draft_chain(m.config, 2, 3);
  auto state = make_draft_state(m, chain);
  CHECK(draft(m, chain, state, 0).empty());
  CHECK_THROWS_AS(draft(m, chain, state, 1), std::invalid_argument);
  CHECK_THROWS_AS(draft(m, chain, state, 3), std::invalid_argument);

  const std::vector<std::vector<double>> prev(4, std::vector<double>(m.embedding.cols, 0.1));
  catch_up(m, chain, state, prev, std::vector<int>{1, 2, 3, 4});
  CHECK(state.next_position == 4);
  const auto a = draft(m, chain, state, 2);
  const auto b = draft(m, chain, state, 2);
  CHECK(a == b);
  CHECK(a.size() == 2);
  CHECK_THROWS_AS(catch_up(m, chain, state, prev, std::vector<int>{1}), std::invalid_argument);
}

TEST_CASE("a noisier draft accepts less") {
  const auto m = inert_tail_model(77);
  Rng rng(205);
  std::vector<std::vector<int>> prompts;
  for (int i = 0; i < 8; ++i) prompts.push_back(fixture::random_tokens(rng, 4, m.config.vocab_size));
  double prev = 1e9;
  for (double noise : {0.0, 0.1, 1.0}) {
    const auto chain = copy_layer_draft_chain(m, 3, noise, 5);
    double total = 0.0;
    for (const auto& p : prompts) total += speculative_decode(m, chain, p, 40, 3).stats.mean_accept_length;
    const double mean = total / static_cast<double>(prompts.size());
    CHECK(mean <= prev);
    prev = mean;
  }
  CHECK(prev < 2.0);
}

TEST_CASE("simulated acceptance matches the geometric sum") {
  for (double p : {0.5, 0.8, 0.95}) {
    for (std::size_t k = 1; k <= 3; ++k) {
      const auto sim = simulate_acceptance(p, k, 100'000, 17 * k);
      CHECK(std::abs(sim.mean_accepted - expected_accepted_drafts(p, k)) <= 3.0 * sim.std_error);
      std::size_t total = 0;
      for (auto c : sim.histogram) total += c;
      CHECK(total == 100'000);
    }
  }
  CHECK(simulate_acceptance(1.0, 3, 100, 1).mean_accepted == 3.0);
  CHECK(simulate_acceptance(0.0, 3, 100, 1).mean_accepted == 0.0);
  CHECK(expected_accepted_drafts(0.5, 3) == 0.875);
  CHECK_THROWS_AS(simulate_acceptance(1.5, 3, 10, 1), std::invalid_argument);
}

TEST_CASE("acceptance curve") {
  const AcceptanceCurve curve;
  CHECK(acceptance_curve(0.0) == 4.0);
  const double xc = curve.clamp_point();
  CHECK(curve(xc) == doctest::Approx(1.0).epsilon(1e-12));
  double prev = acceptance_curve(0.0);
  for (int i = 1; i < 1000; ++i) {
    const double x = xc * i / 1000.0;
    const double y = acceptance_curve(x);
    CHECK(y < prev);
    prev = y;
  }
  CHECK(acceptance_curve(xc * 1.5) == 1.0);
  CHECK(acceptance_curve(1.0) == doctest::Approx(4.0 * 0.42).epsilon(1e-14));
  CHECK_THROWS_AS(acceptance_curve(-0.1), std::invalid_argument);
}

TEST_CASE("speedup estimate") {
  CHECK(estimate_speedup(4.0, 3, {}) == 4.0);
  CHECK(estimate_speedup(3.0, 3, {0.1, 0.2}) == doctest::Approx(3.0 / 1.5));
  CHECK(estimate_speedup(1.0, 2, {0.05, 0.0}) < 1.0);
  CHECK_THROWS_AS(estimate_speedup(0.5, 1, {}), std::invalid_argument);
}
