#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mimo/rng.hpp"

namespace mimo {

/// Autoregressive policy over fixed-length responses where the next-token
/// distribution depends on (prompt, step, previous token). Previous token
/// index `vocab` stands for the start of the response.
class TabularPolicy {
 public:
  TabularPolicy() = default;
  TabularPolicy(std::size_t prompts, std::size_t length, std::size_t vocab, double fill = 0.0);

  static TabularPolicy random(std::size_t prompts, std::size_t length, std::size_t vocab, double scale,
                              std::uint64_t seed);

  std::size_t prompts() const { return prompts_; }
  std::size_t length() const { return length_; }
  std::size_t vocab() const { return vocab_; }
  std::size_t bos() const { return vocab_; }

  std::span<double> logits(std::size_t prompt, std::size_t step, std::size_t prev);
  std::span<const double> logits(std::size_t prompt, std::size_t step, std::size_t prev) const;
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  // Per-token log-probabilities of `tokens` (length() entries) under this policy.
  std::vector<double> token_logprobs(std::size_t prompt, std::span<const int> tokens) const;
  std::vector<int> sample(std::size_t prompt, Rng& rng) const;
  std::vector<int> greedy(std::size_t prompt) const;

 private:
  std::size_t offset(std::size_t prompt, std::size_t step, std::size_t prev) const;

  std::size_t prompts_ = 0;
  std::size_t length_ = 0;
  std::size_t vocab_ = 0;
  std::vector<double> params_;
};

/// Exact sequence-level KL(student || teacher) for one prompt, by forward
/// propagation of the student's previous-token marginals.
double exact_reverse_kl(const TabularPolicy& student, const TabularPolicy& teacher, std::size_t prompt);

struct MopdResponse {
  std::size_t prompt = 0;
  std::vector<int> tokens;
  std::vector<double> train_logprob;    // pi_theta, training forward
  std::vector<double> sample_logprob;   // mu_theta, recorded when sampling
  std::vector<double> teacher_logprob;  // domain teacher
  double orm_advantage = 0.0;
};

struct MopdBatch {
  std::vector<MopdResponse> responses;
  double eps_low = 0.8;
  double eps_high = 1.25;
  double alpha = 1.0;

  // Throws std::invalid_argument naming the first broken invariant.
  void validate() const;
};

/// Mean over every sampled token of log pi_theta - log pi_teacher.
double reverse_kl_loss(const MopdBatch& batch);

/// (log pi_teacher - log pi_theta) + alpha * orm_adv, per token.
std::vector<double> mopd_advantage(std::span<const double> teacher_lp, std::span<const double> student_lp,
                                   double orm_adv, double alpha);

// exp(train - sample) when inside [eps_low, eps_high], else 0.
double token_weight(double train_lp, double sample_lp, double eps_low, double eps_high);

inline constexpr double kGrpoStabilizer = 1e-8;

/// Group-relative advantages. Normalized mode divides by the sample standard
/// deviation (n - 1) plus a small stabilizer and needs at least 2 rewards.
std::vector<double> grpo_advantage(std::span<const double> rewards, bool normalize = true);

/// Frozen per-token factors of the surrogate. Weights and advantages carry no
/// parameter sensitivity; only log pi_theta(tokens) does.
struct SurrogateTerm {
  std::size_t prompt = 0;
  std::vector<int> tokens;
  std::vector<double> weight;
  std::vector<double> advantage;
};

std::vector<SurrogateTerm> surrogate_terms(const MopdBatch& batch);

// -mean_r (1/|y_r|) sum_t w_t A_t log pi_theta(y_t), with log pi from the batch.
double surrogate_loss(const MopdBatch& batch);

// Same objective re-evaluated under `policy`.
double surrogate_loss(const TabularPolicy& policy, std::span<const SurrogateTerm> terms);

// d surrogate / d policy logits, laid out like policy.params().
std::vector<double> surrogate_gradient(const TabularPolicy& policy, std::span<const SurrogateTerm> terms);

struct MopdSettings {
  double learning_rate = 1.0;
  std::size_t group_size = 8;  // responses per prompt
  double eps_low = 0.8;
  double eps_high = 1.25;
  double alpha = 1.0;
  // Inference-engine mismatch: mu samples from logits rounded to float plus
  // N(0, sample_noise) jitter.
  bool sample_in_float = true;
  double sample_noise = 0.0;
};

/// Outcome reward of one response; advantages come from grpo_advantage over
/// each prompt's group.
using OrmReward = std::function<double(std::size_t prompt, std::span<const int> tokens)>;

struct MopdTask {
  std::vector<std::string> domain_names;
  // nullopt: the domain distills from the current student ("self").
  std::vector<std::optional<TabularPolicy>> teachers;
  std::vector<std::size_t> prompt_domain;
  OrmReward orm;  // optional

  // Throws std::invalid_argument on shape or domain errors.
  void validate(const TabularPolicy& student) const;
};

struct MopdMetrics {
  std::vector<double> reverse_kl;  // exact, per domain, after the step
  double reverse_kl_estimate = 0.0;
  double discard_fraction = 0.0;
  double loss = 0.0;
  double mean_abs_advantage = 0.0;
};

/// Samples each prompt's group on-policy, scores it with the domain teacher,
/// and applies one SGD step on the surrogate.
MopdMetrics mopd_train_step(TabularPolicy& student, const MopdTask& task, const MopdSettings& settings, Rng& rng);

std::vector<double> domain_reverse_kl(const TabularPolicy& student, const MopdTask& task);

/// Two domains over `prompts_per_domain` prompts each, with distinct random
/// teachers of the given sharpness. Returns the task and a flat-initialized
/// student.
struct TwoDomainProblem {
  MopdTask task;
  TabularPolicy student;
};
TwoDomainProblem make_two_domain_problem(std::size_t prompts_per_domain, std::size_t length, std::size_t vocab,
                                         double teacher_scale, std::uint64_t seed);

/// Parses "math,code,chat:self" into domain names and teachers. Every domain
/// without the ":self" suffix gets a random teacher keyed by its index.
MopdTask parse_domain_spec(const std::string& spec, std::size_t prompts_per_domain, std::size_t length,
                           std::size_t vocab, double teacher_scale, std::uint64_t seed);

}  // namespace mimo
