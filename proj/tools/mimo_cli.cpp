// Command-line harness over the mimo library.

#include <CLI11.hpp>
#include <fmt/core.h>
#include <fmt/ostream.h>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "mimo/checkpoint.hpp"
#include "mimo/config.hpp"
#include "mimo/curve_fit.hpp"
#include "mimo/kvcache.hpp"
#include "mimo/model.hpp"
#include "mimo/mopd.hpp"
#include "mimo/mtp.hpp"
#include "mimo/rng.hpp"
#include "mimo/verify_suite.hpp"

namespace fs = std::filesystem;
using namespace mimo;

namespace {

constexpr int kOk = 0;
constexpr int kPropertyFailure = 1;
constexpr int kInputError = 2;

// Raised for bad files or arguments; maps to exit code 2.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::string profile = "tiny";
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir = "mimo-out";
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Run {
 public:
  Run(std::string command, const Globals& g) : command_(std::move(command)), globals_(g), start_(utc_now()) {
    config_ = profile_config(g.profile);
    if (!g.config_path.empty()) config_ = load_config_file(g.config_path, config_);
    if (g.seed_given) config_.seed = g.seed;
    std::error_code ec;
    fs::create_directories(g.out_dir, ec);
    if (ec) throw InputError("cannot create output directory '" + g.out_dir + "': " + ec.message());
  }

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return config_.seed; }

  fs::path output(const std::string& name) {
    auto p = fs::path(globals_.out_dir) / name;
    outputs_.push_back(p.string());
    return p;
  }

  // Write-or-throw helper for text outputs.
  void write_text(const std::string& name, const std::string& text) {
    std::ofstream out(output(name), std::ios::binary);
    if (!out) throw InputError("cannot write '" + name + "' in " + globals_.out_dir);
    out << text;
  }

  void note(const std::string& key, nlohmann::json value) { extra_[key] = std::move(value); }

  void finish(int exit_code) {
    nlohmann::json m;
    m["command"] = command_;
    m["profile"] = globals_.profile;
    m["config_path"] = globals_.config_path;
    m["config"] = serialize_config(config_);
    m["seed"] = config_.seed;
    m["version"] = MIMO_VERSION;
    m["start"] = start_;
    m["end"] = utc_now();
    m["outputs"] = outputs_;
    m["exit_code"] = exit_code;
    if (!extra_.empty()) m["details"] = extra_;
    std::ofstream out(fs::path(globals_.out_dir) / (command_ + ".manifest.json"));
    out << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  Globals globals_;
  ModelConfig config_;
  std::string start_;
  std::vector<std::string> outputs_;
  nlohmann::json extra_ = nlohmann::json::object();
};

// Synthetic prompts: a few token-id sequences with different structure.
struct PromptSet {
  std::string dataset;
  std::vector<std::vector<int>> prompts;
};

std::vector<PromptSet> bundled_prompts(int vocab, std::uint64_t seed) {
  Rng rng(seed ^ 0x5eedULL);
  std::vector<PromptSet> sets;
  PromptSet repeat{"repeat", {}};
  for (int i = 0; i < 4; ++i) {
    std::vector<int> p;
    for (int j = 0; j < 12; ++j) p.push_back((i + j % 3) % vocab);
    repeat.prompts.push_back(p);
  }
  PromptSet ramp{"ramp", {}};
  for (int i = 0; i < 4; ++i) {
    std::vector<int> p;
    for (int j = 0; j < 12; ++j) p.push_back((i * 7 + j) % vocab);
    ramp.prompts.push_back(p);
  }
  PromptSet noise{"random", {}};
  for (int i = 0; i < 4; ++i) {
    std::vector<int> p;
    for (int j = 0; j < 12; ++j) p.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(vocab))));
    noise.prompts.push_back(p);
  }
  sets.push_back(std::move(repeat));
  sets.push_back(std::move(ramp));
  sets.push_back(std::move(noise));
  return sets;
}

// Each line: "<dataset>,<tok> <tok> ...". Blank lines and '#' lines skipped.
std::vector<PromptSet> read_prompt_file(const std::string& path, int vocab) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open prompts file '" + path + "'");
  std::vector<PromptSet> sets;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw InputError(fmt::format("{}:{}: expected '<dataset>,<tokens>'", path, line_no));
    const std::string name = line.substr(0, comma);
    std::istringstream toks(line.substr(comma + 1));
    std::vector<int> prompt;
    int t = 0;
    while (toks >> t) {
      if (t < 0 || t >= vocab) throw InputError(fmt::format("{}:{}: token {} outside vocab", path, line_no, t));
      prompt.push_back(t);
    }
    if (!toks.eof()) throw InputError(fmt::format("{}:{}: malformed token list", path, line_no));
    if (prompt.empty()) throw InputError(fmt::format("{}:{}: empty prompt", path, line_no));
    auto it = std::find_if(sets.begin(), sets.end(), [&](const PromptSet& s) { return s.dataset == name; });
    if (it == sets.end()) {
      sets.push_back({name, {}});
      it = sets.end() - 1;
    }
    it->prompts.push_back(std::move(prompt));
  }
  if (sets.empty()) throw InputError("prompts file '" + path + "' has no prompts");
  return sets;
}

std::string join_tokens(const std::vector<int>& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + std::to_string(t[i]);
  return s;
}

std::string format_stats(const SpecDecodeStats& s) {
  std::string hist;
  for (std::size_t i = 0; i < s.per_round_accepted.size(); ++i) hist += (i ? " " : "") + std::to_string(s.per_round_accepted[i]);
  return fmt::format(
      "rounds                   = {}\n"
      "accepted_histogram       = {}\n"
      "draft_tokens_proposed    = {}\n"
      "draft_tokens_accepted    = {}\n"
      "draft_tokens_rejected    = {}\n"
      "mean_accept_length       = {:.6f}\n"
      "mean_output_entropy      = {:.6f}\n",
      s.rounds, hist, s.draft_tokens_proposed, s.draft_tokens_accepted, s.draft_tokens_rejected, s.mean_accept_length,
      s.mean_output_entropy);
}

HybridModel model_for(const Run& run, const std::string& checkpoint) {
  if (!checkpoint.empty()) return load_checkpoint(checkpoint);
  return init_model(run.config(), run.seed());
}

int cmd_demo(Run& run, std::size_t k, std::size_t max_new, const std::string& checkpoint, double draft_noise) {
  const auto model = model_for(run, checkpoint);
  const auto chain = copy_layer_draft_chain(model, std::max<std::size_t>(k, 1), draft_noise, run.seed());
  const auto sets = bundled_prompts(model.config.vocab_size, run.seed());
  bool lossless = true;
  double accept_sum = 0.0;
  std::size_t runs = 0;
  for (const auto& set : sets) {
    const auto& prompt = set.prompts.front();
    const auto greedy = greedy_decode(model, prompt, max_new);
    const auto spec = speculative_decode(model, chain, prompt, max_new, k);
    const bool same = greedy == spec.tokens;
    lossless = lossless && same;
    fmt::print("[{}] prompt      : {}\n", set.dataset, join_tokens(prompt));
    fmt::print("[{}] greedy      : {}\n", set.dataset, join_tokens(greedy));
    fmt::print("[{}] speculative : {}\n", set.dataset, join_tokens(spec.tokens));
    fmt::print("[{}] identical   : {}\n", set.dataset, same ? "yes" : "NO");
    fmt::print("{}\n", format_stats(spec.stats));
    accept_sum += spec.stats.mean_accept_length;
    ++runs;
  }
  run.note("mean_accept_length", accept_sum / static_cast<double>(runs));
  run.note("lossless", lossless);
  if (!lossless) {
    fmt::print(stderr, "check failed: speculative/greedy losslessness\n");
    return kPropertyFailure;
  }
  fmt::print("losslessness check passed\n");
  return kOk;
}

int cmd_bench_decode(Run& run, std::size_t k, const std::string& prompts_path, std::size_t seeds, std::size_t max_new,
                     double draft_noise) {
  const auto sets = prompts_path.empty() ? bundled_prompts(run.config().vocab_size, run.seed())
                                         : read_prompt_file(prompts_path, run.config().vocab_size);
  if (seeds == 0) throw InputError("--seeds must be >= 1");
  std::ostringstream csv;
  csv << "dataset,mean_entropy,mean_accept_length\n";
  SpecDecodeStats agg;
  agg.per_round_accepted.assign(k + 1, 0);
  double entropy_total = 0.0;
  std::size_t runs = 0;
  for (const auto& set : sets) {
    double entropy = 0.0;
    double accept = 0.0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      const auto model = init_model(run.config(), run.seed() + s);
      const auto chain = copy_layer_draft_chain(model, std::max<std::size_t>(k, 1), draft_noise, run.seed() + s);
      for (const auto& prompt : set.prompts) {
        const auto out = speculative_decode(model, chain, prompt, max_new, k);
        entropy += out.stats.mean_output_entropy;
        accept += out.stats.mean_accept_length;
        ++n;
        entropy_total += out.stats.mean_output_entropy;
        ++runs;
        agg.rounds += out.stats.rounds;
        agg.draft_tokens_proposed += out.stats.draft_tokens_proposed;
        agg.draft_tokens_accepted += out.stats.draft_tokens_accepted;
        agg.draft_tokens_rejected += out.stats.draft_tokens_rejected;
        for (std::size_t i = 0; i <= k; ++i) agg.per_round_accepted[i] += out.stats.per_round_accepted[i];
      }
    }
    csv << fmt::format("{},{:.9g},{:.9g}\n", set.dataset, entropy / static_cast<double>(n), accept / static_cast<double>(n));
  }
  agg.mean_accept_length = agg.rounds ? 1.0 + static_cast<double>(agg.draft_tokens_accepted) / static_cast<double>(agg.rounds) : 1.0;
  agg.mean_output_entropy = runs ? entropy_total / static_cast<double>(runs) : 0.0;
  fmt::print("{}", format_stats(agg));
  fmt::print("{}", csv.str());
  run.write_text("bench_decode.csv", csv.str());
  return kOk;
}

int cmd_cache_report(Run& run, std::int64_t seq_len, int bytes) {
  if (seq_len <= 0 || bytes <= 0) throw InputError("--seq-len and --bytes-per-scalar must be positive");
  const auto text = format_report(memory_report(run.config(), seq_len, bytes));
  fmt::print("{}", text);
  run.write_text("cache_report.txt", text);
  return kOk;
}

int cmd_replay_check(Run& run, std::size_t tokens, double perturb, const std::string& record_in) {
  const auto model = init_model(run.config(), run.seed());
  Rng rng(run.seed() + 1);
  std::vector<int> seq(tokens);
  for (auto& t : seq) t = static_cast<int>(rng.below(static_cast<std::size_t>(model.config.vocab_size)));

  const auto recorded = forward_full(model, seq);
  RoutingRecord record = recorded.routing;
  if (!record_in.empty()) {
    std::ifstream in(record_in);
    if (!in) throw InputError("cannot open routing record '" + record_in + "'");
    try {
      record = read_routing_record(in);
    } catch (const std::exception& e) {
      throw InputError(e.what());
    }
  }
  {
    std::ostringstream os;
    write_routing_record(os, record);
    run.write_text("routing.txt", os.str());
    std::istringstream is(os.str());
    if (!(read_routing_record(is) == record)) {
      fmt::print(stderr, "check failed: routing record round trip\n");
      return kPropertyFailure;
    }
  }

  auto perturbed = model;
  for (auto& layer : perturbed.layers)
    if (layer.moe)
      for (auto& w : layer.moe->router.gate_weights.data) w += perturb * rng.normal();
  const auto a = forward_full(perturbed, seq, {.replay = &record});
  const auto b = forward_full(perturbed, seq, {.replay = &record});
  const auto fresh = forward_full(perturbed, seq);

  const bool deterministic = a.logits == b.logits;
  const bool immune = record_in.empty() ? a.logits == recorded.logits : true;
  const bool fresh_differs = !(fresh.logits == recorded.logits);
  fmt::print("routing entries           = {}\n", record.entries.size());
  fmt::print("replay deterministic      = {}\n", deterministic);
  fmt::print("replay immune to perturb  = {}\n", immune);
  fmt::print("fresh routing differs     = {}\n", fresh_differs);
  run.note("deterministic", deterministic);
  run.note("immune", immune);
  run.note("fresh_differs", fresh_differs);
  if (!(deterministic && immune && fresh_differs)) {
    fmt::print(stderr, "check failed: routing replay\n");
    return kPropertyFailure;
  }
  return kOk;
}

struct MopdFlags {
  std::string domains = "math,code";
  std::size_t steps = 200;
  double alpha = 0.0;
  double eps_low = 0.8;
  double eps_high = 1.25;
  double lr = 2.0;
  std::size_t group = 16;
  double noise = 0.0;
  std::size_t prompts_per_domain = 2;
  std::size_t length = 1;
  std::size_t vocab = 5;
  double teacher_scale = 2.0;
};

int cmd_mopd_train(Run& run, const MopdFlags& f) {
  if (!(f.eps_low <= 1.0 && 1.0 <= f.eps_high)) throw InputError("--eps-low <= 1 <= --eps-high required");
  MopdTask task;
  try {
    task = parse_domain_spec(f.domains, f.prompts_per_domain, f.length, f.vocab, f.teacher_scale, run.seed());
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  TabularPolicy student(f.prompts_per_domain * task.domain_names.size(), f.length, f.vocab);
  MopdSettings settings;
  settings.learning_rate = f.lr;
  settings.group_size = f.group;
  settings.eps_low = f.eps_low;
  settings.eps_high = f.eps_high;
  settings.alpha = f.alpha;
  settings.sample_noise = f.noise;
  // Synthetic outcome reward: response opens with token 0.
  task.orm = [](std::size_t, std::span<const int> y) { return y.empty() || y[0] != 0 ? 0.0 : 1.0; };

  std::ostringstream csv;
  csv << "step";
  for (const auto& d : task.domain_names) csv << ",reverse_kl_" << d;
  csv << ",discard_frac,loss\n";
  auto emit = [&](std::size_t step, const std::vector<double>& kl, double discard, double loss) {
    csv << step;
    for (double x : kl) csv << fmt::format(",{:.9g}", x);
    csv << fmt::format(",{:.9g},{:.9g}\n", discard, loss);
  };
  emit(0, domain_reverse_kl(student, task), 0.0, 0.0);
  Rng rng(run.seed());
  MopdMetrics last;
  for (std::size_t s = 1; s <= f.steps; ++s) {
    last = mopd_train_step(student, task, settings, rng);
    emit(s, last.reverse_kl, last.discard_fraction, last.loss);
  }
  fmt::print("{}", csv.str());
  run.write_text("mopd_train.csv", csv.str());
  nlohmann::json final_kl = nlohmann::json::object();
  for (std::size_t d = 0; d < task.domain_names.size(); ++d)
    final_kl[task.domain_names[d]] = last.reverse_kl.empty() ? 0.0 : last.reverse_kl[d];
  run.note("final_reverse_kl", final_kl);
  return kOk;
}

int cmd_verify_suite(Run& run, const std::vector<std::string>& only, const std::string& fault, std::size_t trials) {
  VerifyOptions opt;
  opt.config = run.config();
  opt.seed = run.seed();
  opt.trials = trials;
  for (const auto& item : only) {
    std::stringstream ss(item);
    std::string name;
    while (std::getline(ss, name, ',')) opt.only.push_back(name);
  }
  if (!fault.empty()) {
    if (fault != "sink-normalization") throw InputError("unknown fault '" + fault + "' (expected sink-normalization)");
    opt.inject_sink_normalization_bug = true;
  }
  std::vector<PropertyResult> results;
  try {
    results = run_verify_suite(opt);
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  const auto table = format_results(results);
  fmt::print("{}", table);
  run.write_text("verify_suite.txt", table);
  std::vector<std::string> failed;
  for (const auto& r : results)
    if (!r.passed) failed.push_back(r.suite + "/" + r.name);
  run.note("failed", failed);
  if (!failed.empty()) {
    fmt::print(stderr, "failing properties:\n");
    for (const auto& f : failed) fmt::print(stderr, "  {}\n", f);
    return kPropertyFailure;
  }
  fmt::print("all {} properties passed\n", results.size());
  return kOk;
}

int cmd_fit_curve(Run& run, const std::string& path) {
  std::vector<CurvePoint> pts;
  try {
    pts = read_curve_csv(path);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
  CurveFit fit;
  try {
    fit = fit_acceptance_curve(pts);
  } catch (const CurveFitError& e) {
    throw InputError(e.what());
  }
  const auto text = fmt::format(
      "points    = {}\nceiling   = {:.9g}\na         = {:.9g}\nb         = {:.9g}\nr_squared = {:.9g}\n", pts.size(),
      fit.ceiling, fit.a, fit.b, fit.r_squared);
  fmt::print("{}", text);
  if (fit.r_squared < 0.9) fmt::print(stderr, "warning: r_squared {:.3f}; the points do not follow the curve\n", fit.r_squared);
  run.write_text("fit_curve.txt", text);
  return kOk;
}

int cmd_dump(Run& run, const std::string& path) {
  const auto model = init_model(run.config(), run.seed());
  const auto target = path.empty() ? run.output("model.ckpt") : fs::path(path);
  try {
    save_checkpoint(target.string(), model);
  } catch (const std::exception& e) {
    throw InputError(e.what());
  }
  fmt::print("wrote {}\nparameters  = {}\nfingerprint = {:016x}\n", target.string(), allocated_params(model),
             parameter_fingerprint(model));
  return kOk;
}

int cmd_load(Run& run, const std::string& path) {
  const auto model = load_checkpoint(path);
  const auto counts = count_layout(model.layout);
  const auto text = fmt::format(
      "layers      = {} ({} SWA / {} GA)\nhidden_dim  = {}\nvocab_size  = {}\nparameters  = {}\nfingerprint = {:016x}\n",
      model.layers.size(), counts.swa(), counts.ga(), model.config.hidden_dim, model.config.vocab_size,
      allocated_params(model), parameter_fingerprint(model));
  fmt::print("{}", text);
  run.note("checkpoint", path);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mimo: hybrid attention, speculative decoding and MOPD toolkit"};
  app.set_version_flag("--version", std::string(MIMO_VERSION));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "Config file (key = value)");
  app.add_option("--profile", g.profile, "Base profile")->check(CLI::IsMember({"tiny", "small", "paper"}));
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { g.seed = s; g.seed_given = true; }, "Seed");
  app.add_option("--out-dir", g.out_dir, "Directory for outputs and the run manifest");

  std::size_t k = 3;
  std::size_t max_new = 32;
  std::string checkpoint;
  double draft_noise = 0.0;
  auto* demo = app.add_subcommand("demo", "Greedy vs speculative decode on bundled prompts");
  demo->add_option("--k", k, "Draft depth");
  demo->add_option("--max-new", max_new, "Tokens to generate");
  demo->add_option("--checkpoint", checkpoint, "Load the model from a checkpoint");
  demo->add_option("--draft-noise", draft_noise, "Perturb the draft heads");

  std::string prompts_path;
  std::size_t seeds = 4;
  auto* bench = app.add_subcommand("bench-decode", "Speculative decode statistics as CSV");
  bench->add_option("--k", k, "Draft depth");
  bench->add_option("--prompts", prompts_path, "Prompt file, lines '<dataset>,<tok> <tok> ...'");
  bench->add_option("--seeds", seeds, "Model seeds per dataset");
  bench->add_option("--max-new", max_new, "Tokens per prompt");
  bench->add_option("--draft-noise", draft_noise, "Perturb the draft heads");

  std::int64_t seq_len = 262'144;
  int bytes_per_scalar = 2;
  auto* cache = app.add_subcommand("cache-report", "KV-cache memory accounting");
  cache->add_option("--seq-len", seq_len, "Sequence length L");
  cache->add_option("--bytes-per-scalar", bytes_per_scalar, "Bytes per cached scalar");

  std::size_t replay_tokens = 16;
  double perturb = 1e-3;
  std::string record_in;
  auto* replay = app.add_subcommand("replay-check", "Record, serialize and replay MoE routing");
  replay->add_option("--tokens", replay_tokens, "Sequence length");
  replay->add_option("--perturb", perturb, "Router weight perturbation");
  replay->add_option("--record", record_in, "Replay an existing routing record");

  MopdFlags mf;
  auto* mopd = app.add_subcommand("mopd-train", "Toy multi-teacher on-policy distillation");
  mopd->add_option("--domains", mf.domains, "Comma list, ':self' for self-distillation");
  mopd->add_option("--steps", mf.steps, "Training steps");
  mopd->add_option("--alpha", mf.alpha, "ORM mixing coefficient");
  mopd->add_option("--eps-low", mf.eps_low, "Lower clip bound");
  mopd->add_option("--eps-high", mf.eps_high, "Upper clip bound");
  mopd->add_option("--lr", mf.lr, "Learning rate");
  mopd->add_option("--group", mf.group, "Responses per prompt");
  mopd->add_option("--sample-noise", mf.noise, "Logit jitter of the sampling engine");
  mopd->add_option("--prompts-per-domain", mf.prompts_per_domain, "Prompts per domain");
  mopd->add_option("--length", mf.length, "Response length");
  mopd->add_option("--vocab", mf.vocab, "Policy vocabulary");
  mopd->add_option("--teacher-scale", mf.teacher_scale, "Teacher logit scale");

  std::vector<std::string> only;
  std::string fault;
  std::size_t trials = 8;
  auto* verify = app.add_subcommand("verify-suite", "Run the oracle suites");
  verify->add_option("--only", only, "Suites to run: attention, cache, gradient, replay");
  verify->add_option("--inject-fault", fault, "Fixture fault: sink-normalization");
  verify->add_option("--trials", trials, "Random fixtures per model-level check");

  std::string curve_csv;
  auto* fit = app.add_subcommand("fit-curve", "Fit y = c(1 - a x^b) to (entropy, accept length) CSV");
  fit->add_option("csv", curve_csv, "CSV path")->required();

  std::string dump_path;
  auto* dump = app.add_subcommand("dump", "Write a freshly initialized model as a checkpoint");
  dump->add_option("--out", dump_path, "Checkpoint path (default <out-dir>/model.ckpt)");

  std::string load_path;
  auto* load = app.add_subcommand("load", "Read and summarize a checkpoint");
  load->add_option("checkpoint", load_path, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  CLI::App* sub = app.get_subcommands().front();
  std::unique_ptr<Run> run;
  int code = kOk;
  try {
    run = std::make_unique<Run>(sub->get_name(), g);
    if (sub == demo) code = cmd_demo(*run, k, max_new, checkpoint, draft_noise);
    else if (sub == bench) code = cmd_bench_decode(*run, k, prompts_path, seeds, max_new, draft_noise);
    else if (sub == cache) code = cmd_cache_report(*run, seq_len, bytes_per_scalar);
    else if (sub == replay) code = cmd_replay_check(*run, replay_tokens, perturb, record_in);
    else if (sub == mopd) code = cmd_mopd_train(*run, mf);
    else if (sub == verify) code = cmd_verify_suite(*run, only, fault, trials);
    else if (sub == fit) code = cmd_fit_curve(*run, curve_csv);
    else if (sub == dump) code = cmd_dump(*run, dump_path);
    else if (sub == load) code = cmd_load(*run, load_path);
  } catch (const std::exception& e) {
    // Config, checkpoint, file and argument errors all land here.
    fmt::print(stderr, "error: {}\n", e.what());
    code = kInputError;
  }
  if (run) run->finish(code);
  return code;
}
