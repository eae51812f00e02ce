#include "mimo/verify_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <cstdio>

#include "mimo/attention.hpp"
#include "mimo/kvcache.hpp"
#include "mimo/model.hpp"
#include "mimo/mopd.hpp"
#include "mimo/mtp.hpp"
#include "mimo/rng.hpp"

namespace mimo {
namespace {

using SinkFn = std::function<SinkSoftmax(std::span<const double>, double)>;

SinkSoftmax sink_softmax_without_sink_term(std::span<const double> logits, double sink) {
  auto s = sink_softmax(logits, sink);
  double total = 0.0;
  for (double w : s.weights) total += w;
  for (auto& w : s.weights) w /= total;
  return s;
}

std::string fmt_err(const char* what, double err) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s %.3g", what, err);
  return buf;
}

std::vector<int> random_tokens(Rng& rng, std::size_t n, int vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::size_t>(vocab)));
  return t;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

class Runner {
 public:
  explicit Runner(const VerifyOptions& o) : opt_(o) {}

  void check(const std::string& suite, const std::string& name, const std::function<std::string(bool&)>& body) {
    PropertyResult r{suite, name, false, ""};
    try {
      bool ok = true;
      r.detail = body(ok);
      r.passed = ok;
    } catch (const std::exception& e) {
      r.detail = std::string("threw: ") + e.what();
    }
    results_.push_back(std::move(r));
  }

  const VerifyOptions& opt() const { return opt_; }
  std::vector<PropertyResult> take() { return std::move(results_); }

 private:
  const VerifyOptions& opt_;
  std::vector<PropertyResult> results_;
};

void attention_suite(Runner& run) {
  const auto& opt = run.opt();
  const SinkFn sink_fn = opt.inject_sink_normalization_bug ? SinkFn(sink_softmax_without_sink_term) : SinkFn(sink_softmax);

  run.check("attention", "sink_softmax.normalization", [&](bool& ok) {
    Rng rng(opt.seed);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 1 + rng.below(64);
      std::vector<double> a(n);
      for (auto& x : a) x = 20.0 * (rng.uniform() - 0.5);
      const double sink = 80.0 * (rng.uniform() - 0.5);
      const auto s = sink_fn(a, sink);
      double total = s.sink_mass;
      double denom = std::exp(sink);
      for (double x : a) denom += std::exp(x);
      for (std::size_t j = 0; j < n; ++j) {
        total += s.weights[j];
        worst = std::max(worst, std::abs(s.weights[j] - std::exp(a[j]) / denom));
      }
      worst = std::max(worst, std::abs(total - 1.0));
    }
    ok = worst <= 1e-12;
    return fmt_err("max error", worst);
  });

  run.check("attention", "sink_softmax.sink_limit", [&](bool& ok) {
    Rng rng(opt.seed + 1);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<double> a(1 + rng.below(64));
      for (auto& x : a) x = 20.0 * (rng.uniform() - 0.5);
      const auto s = sink_fn(a, -40.0);
      const auto p = softmax(a);
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(s.weights[j] - p[j]));
    }
    ok = worst < 1e-9;
    return fmt_err("max |diff|", worst);
  });

  run.check("attention", "attend.parallel_matches_serial", [&](bool& ok) {
    Rng rng(opt.seed + 2);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < opt.trials; ++trial) {
      AttentionInputs in;
      in.kv_heads = 1 + rng.below(3);
      in.q_heads = in.kv_heads * (1 + rng.below(3));
      in.head_dim_qk = 4;
      in.head_dim_v = 3;
      const std::size_t n = 1 + rng.below(40);
      in.q = Matrix(n, in.q_heads * 4);
      in.k = Matrix(n, in.kv_heads * 4);
      in.v = Matrix(n, in.kv_heads * 3);
      for (auto* m : {&in.q, &in.k, &in.v})
        for (auto& x : m->data) x = rng.normal();
      std::vector<KeyRange> mask;
      for (std::size_t i = 0; i < n; ++i) {
        in.q_positions.push_back(static_cast<std::int64_t>(i));
        in.k_positions.push_back(static_cast<std::int64_t>(i));
        mask.push_back(swa_window(static_cast<std::int64_t>(i), 1 + static_cast<std::int64_t>(rng.below(8))));
      }
      std::vector<AttentionHeadState> heads(in.q_heads);
      for (auto& h : heads) h = {4.0 * rng.normal(), 4};
      worst = std::max(worst, max_abs_diff(attend(in, heads, mask), attend_reference(in, heads, mask)));
    }
    ok = worst <= 1e-12;
    return fmt_err("max |diff|", worst);
  });

  run.check("attention", "swa.wide_window_equals_causal", [&](bool& ok) {
    ModelConfig c = opt.config;
    const std::size_t len = 24;
    c.window = static_cast<int>(len);
    const auto model = init_model(c, opt.seed + 3);
    Rng rng(opt.seed + 3);
    const auto tokens = random_tokens(rng, len, c.vocab_size);
    const auto windowed = forward_full(model, tokens);
    const auto causal = forward_full(model, tokens, {.full_causal_everywhere = true});
    const double d = max_abs_diff(windowed.logits, causal.logits);
    ok = d <= 1e-10;
    return fmt_err("max |diff|", d);
  });

  run.check("attention", "swa.narrow_window_differs", [&](bool& ok) {
    ModelConfig c = opt.config;
    c.window = 2;
    const auto model = init_model(c, opt.seed + 4);
    Rng rng(opt.seed + 4);
    const auto tokens = random_tokens(rng, 16, c.vocab_size);
    const double d = max_abs_diff(forward_full(model, tokens).logits,
                                  forward_full(model, tokens, {.full_causal_everywhere = true}).logits);
    ok = d > 1e-9;
    return fmt_err("max |diff|", d);
  });
}

void cache_suite(Runner& run) {
  const auto& opt = run.opt();
  run.check("cache", "decode.matches_forward_full", [&](bool& ok) {
    double worst = 0.0;
    for (std::size_t trial = 0; trial < opt.trials; ++trial) {
      const auto model = init_model(opt.config, opt.seed + 100 + trial);
      Rng rng(opt.seed + 100 + trial);
      const auto tokens = random_tokens(rng, 4 + rng.below(40), opt.config.vocab_size);
      const auto full = forward_full(model, tokens);
      auto state = make_decode_state(model);
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto step = decode_step(model, state, tokens[i]);
        for (std::size_t v = 0; v < step.logits.size(); ++v)
          worst = std::max(worst, std::abs(step.logits[v] - full.logits(i, v)));
      }
    }
    ok = worst <= 1e-8;
    return fmt_err("max |diff|", worst);
  });

  run.check("cache", "speculative.lossless", [&](bool& ok) {
    std::size_t mismatches = 0;
    for (std::size_t trial = 0; trial < opt.trials; ++trial) {
      const auto model = init_model(opt.config, opt.seed + 200 + trial);
      const auto chain = init_draft_chain(opt.config, 3, opt.seed + 300 + trial);
      Rng rng(opt.seed + 200 + trial);
      const auto prompt = random_tokens(rng, 1 + rng.below(12), opt.config.vocab_size);
      const std::size_t k = 1 + trial % 3;
      const auto spec = speculative_decode(model, chain, prompt, 24, k);
      if (spec.tokens != greedy_decode(model, prompt, 24)) ++mismatches;
    }
    ok = mismatches == 0;
    return std::to_string(mismatches) + " mismatching runs";
  });

  run.check("cache", "kv.asymptotic_ratio", [&](bool& ok) {
    const auto r = memory_report(ModelConfig{}, 262'144);
    ok = std::abs(r.limit_layer_normalized - 48.0 / 9.0) < 0.01 && std::abs(r.limit_byte_exact - 348.0 / 36.0) < 0.01;
    char buf[96];
    std::snprintf(buf, sizeof buf, "layer-normalized %.4f, byte-exact %.4f", r.limit_layer_normalized, r.limit_byte_exact);
    return std::string(buf);
  });

  run.check("cache", "layout.counts", [&](bool& ok) {
    const auto c = count_layout(build_layout(ModelConfig{}));
    ok = c.swa() == 39 && c.ga() == 9;
    return std::to_string(c.swa()) + " SWA / " + std::to_string(c.ga()) + " GA";
  });
}

void gradient_suite(Runner& run) {
  const auto& opt = run.opt();
  run.check("gradient", "mopd.surrogate_finite_difference", [&](bool& ok) {
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 20; ++trial) {
      const auto student = TabularPolicy::random(2, 3, 5, 1.0, opt.seed + 400 + trial);
      const auto teacher = TabularPolicy::random(2, 3, 5, 1.0, opt.seed + 500 + trial);
      Rng rng(opt.seed + 400 + trial);
      MopdBatch batch;
      for (std::size_t r = 0; r < 6; ++r) {
        MopdResponse resp;
        resp.prompt = r % 2;
        resp.tokens = student.sample(resp.prompt, rng);
        resp.train_logprob = student.token_logprobs(resp.prompt, resp.tokens);
        resp.sample_logprob = resp.train_logprob;
        for (auto& x : resp.sample_logprob) x = std::min(0.0, x + 0.1 * rng.normal());
        resp.teacher_logprob = teacher.token_logprobs(resp.prompt, resp.tokens);
        resp.orm_advantage = rng.normal();
        batch.responses.push_back(resp);
      }
      const auto terms = surrogate_terms(batch);
      const auto grad = surrogate_gradient(student, terms);
      auto probe = student;
      const double h = 1e-5;
      double gmax = 0.0;
      double err = 0.0;
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const double saved = probe.params()[i];
        probe.params()[i] = saved + h;
        const double up = surrogate_loss(probe, terms);
        probe.params()[i] = saved - h;
        const double down = surrogate_loss(probe, terms);
        probe.params()[i] = saved;
        err = std::max(err, std::abs((up - down) / (2 * h) - grad[i]));
        gmax = std::max(gmax, std::abs(grad[i]));
      }
      worst = std::max(worst, gmax > 0.0 ? err / gmax : err);
    }
    ok = worst < 1e-4;
    return fmt_err("max relative error", worst);
  });

  run.check("gradient", "mopd.self_distillation_zero_advantage", [&](bool& ok) {
    const auto policy = TabularPolicy::random(3, 4, 6, 1.0, opt.seed + 600);
    Rng rng(opt.seed + 600);
    double worst = 0.0;
    for (std::size_t p = 0; p < 3; ++p) {
      const auto y = policy.sample(p, rng);
      const auto lp = policy.token_logprobs(p, y);
      for (double a : mopd_advantage(lp, lp, 0.0, 1.0)) worst = std::max(worst, std::abs(a));
    }
    ok = worst == 0.0;
    return fmt_err("max |A|", worst);
  });
}

void replay_suite(Runner& run) {
  const auto& opt = run.opt();
  run.check("replay", "moe.replay_deterministic_and_immune", [&](bool& ok) {
    std::size_t failures = 0;
    for (std::size_t trial = 0; trial < opt.trials; ++trial) {
      const auto model = init_model(opt.config, opt.seed + 700 + trial);
      Rng rng(opt.seed + 700 + trial);
      const auto tokens = random_tokens(rng, 12, opt.config.vocab_size);
      const auto recorded = forward_full(model, tokens);
      auto perturbed = model;
      for (auto& layer : perturbed.layers)
        if (layer.moe)
          for (auto& w : layer.moe->router.gate_weights.data) w += 1e-3 * rng.normal();
      const auto a = forward_full(perturbed, tokens, {.replay = &recorded.routing});
      const auto b = forward_full(perturbed, tokens, {.replay = &recorded.routing});
      const auto fresh = forward_full(perturbed, tokens);
      const bool same = a.logits == recorded.logits && b.logits == recorded.logits;
      const bool fresh_differs = !(fresh.logits == recorded.logits);
      if (!same || !fresh_differs) ++failures;
    }
    ok = failures == 0;
    return std::to_string(failures) + " failing fixtures";
  });
}

}  // namespace

std::vector<std::string> suite_names() { return {"attention", "cache", "gradient", "replay"}; }

std::vector<PropertyResult> run_verify_suite(const VerifyOptions& options) {
  const auto names = suite_names();
  for (const auto& s : options.only)
    if (std::ranges::find(names, s) == names.end()) throw std::invalid_argument("unknown suite '" + s + "'");
  validate_config(options.config);
  auto wanted = [&](const std::string& s) { return options.only.empty() || std::ranges::find(options.only, s) != options.only.end(); };

  Runner run(options);
  if (wanted("attention")) attention_suite(run);
  if (wanted("cache")) cache_suite(run);
  if (wanted("gradient")) gradient_suite(run);
  if (wanted("replay")) replay_suite(run);
  return run.take();
}

std::string format_results(const std::vector<PropertyResult>& results) {
  std::size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.suite.size() + 1 + r.name.size());
  std::ostringstream os;
  for (const auto& r : results) {
    const auto label = r.suite + "/" + r.name;
    os << (r.passed ? "PASS  " : "FAIL  ") << label << std::string(width - label.size() + 2, ' ') << r.detail << '\n';
  }
  return os.str();
}

}  // namespace mimo
