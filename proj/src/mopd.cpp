#include "mimo/mopd.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mimo/tensor.hpp"

namespace mimo {

TabularPolicy::TabularPolicy(std::size_t prompts, std::size_t length, std::size_t vocab, double fill)
    : prompts_(prompts), length_(length), vocab_(vocab), params_(prompts * length * (vocab + 1) * vocab, fill) {
  if (vocab == 0 || length == 0 || prompts == 0) throw std::invalid_argument("TabularPolicy: empty shape");
}

TabularPolicy TabularPolicy::random(std::size_t prompts, std::size_t length, std::size_t vocab, double scale,
                                    std::uint64_t seed) {
  TabularPolicy p(prompts, length, vocab);
  const CounterNormal gen{seed, 0};
  for (std::size_t i = 0; i < p.params_.size(); ++i) p.params_[i] = scale * gen(i);
  return p;
}

std::size_t TabularPolicy::offset(std::size_t prompt, std::size_t step, std::size_t prev) const {
  if (prompt >= prompts_ || step >= length_ || prev > vocab_) throw std::out_of_range("TabularPolicy: index out of range");
  return ((prompt * length_ + step) * (vocab_ + 1) + prev) * vocab_;
}

std::span<double> TabularPolicy::logits(std::size_t prompt, std::size_t step, std::size_t prev) {
  return {params_.data() + offset(prompt, step, prev), vocab_};
}

std::span<const double> TabularPolicy::logits(std::size_t prompt, std::size_t step, std::size_t prev) const {
  return {params_.data() + offset(prompt, step, prev), vocab_};
}

std::vector<double> TabularPolicy::token_logprobs(std::size_t prompt, std::span<const int> tokens) const {
  if (tokens.size() != length_) throw std::invalid_argument("token_logprobs: response length mismatch");
  std::vector<double> out(length_);
  std::size_t prev = bos();
  for (std::size_t t = 0; t < length_; ++t) {
    const auto tok = static_cast<std::size_t>(tokens[t]);
    if (tokens[t] < 0 || tok >= vocab_) throw std::invalid_argument("token_logprobs: token out of range");
    const auto l = logits(prompt, t, prev);
    out[t] = l[tok] - log_sum_exp(l);
    prev = tok;
  }
  return out;
}

std::vector<int> TabularPolicy::sample(std::size_t prompt, Rng& rng) const {
  std::vector<int> out(length_);
  std::size_t prev = bos();
  for (std::size_t t = 0; t < length_; ++t) {
    const auto p = softmax(logits(prompt, t, prev));
    prev = rng.categorical(p);
    out[t] = static_cast<int>(prev);
  }
  return out;
}

std::vector<int> TabularPolicy::greedy(std::size_t prompt) const {
  std::vector<int> out(length_);
  std::size_t prev = bos();
  for (std::size_t t = 0; t < length_; ++t) {
    prev = argmax(logits(prompt, t, prev));
    out[t] = static_cast<int>(prev);
  }
  return out;
}

double exact_reverse_kl(const TabularPolicy& student, const TabularPolicy& teacher, std::size_t prompt) {
  if (student.params().size() != teacher.params().size() || student.vocab() != teacher.vocab())
    throw std::invalid_argument("exact_reverse_kl: policy shape mismatch");
  const std::size_t v = student.vocab();
  std::vector<double> marginal(v + 1, 0.0);
  marginal[student.bos()] = 1.0;
  double kl = 0.0;
  for (std::size_t t = 0; t < student.length(); ++t) {
    std::vector<double> next(v + 1, 0.0);
    for (std::size_t prev = 0; prev <= v; ++prev) {
      if (marginal[prev] == 0.0) continue;
      const auto p = softmax(student.logits(prompt, t, prev));
      const auto lp = log_softmax(student.logits(prompt, t, prev));
      const auto lq = log_softmax(teacher.logits(prompt, t, prev));
      double row = 0.0;
      for (std::size_t a = 0; a < v; ++a) {
        row += p[a] * (lp[a] - lq[a]);
        next[a] += marginal[prev] * p[a];
      }
      kl += marginal[prev] * row;
    }
    marginal = std::move(next);
  }
  return kl;
}

void MopdBatch::validate() const {
  if (!(eps_low <= 1.0 && 1.0 <= eps_high)) throw std::invalid_argument("mopd: clip band must satisfy eps_low <= 1 <= eps_high");
  for (const auto& r : responses) {
    const auto n = r.tokens.size();
    if (r.train_logprob.size() != n || r.sample_logprob.size() != n || r.teacher_logprob.size() != n)
      throw std::invalid_argument("mopd: per-token length mismatch");
    for (std::size_t t = 0; t < n; ++t)
      if (r.train_logprob[t] > 0.0 || r.sample_logprob[t] > 0.0 || r.teacher_logprob[t] > 0.0)
        throw std::invalid_argument("mopd: log-probability > 0");
  }
}

double reverse_kl_loss(const MopdBatch& batch) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& r : batch.responses) {
    if (r.train_logprob.size() != r.teacher_logprob.size()) throw std::invalid_argument("reverse_kl_loss: length mismatch");
    for (std::size_t t = 0; t < r.train_logprob.size(); ++t) sum += r.train_logprob[t] - r.teacher_logprob[t];
    count += r.train_logprob.size();
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

std::vector<double> mopd_advantage(std::span<const double> teacher_lp, std::span<const double> student_lp,
                                   double orm_adv, double alpha) {
  if (teacher_lp.size() != student_lp.size()) throw std::invalid_argument("mopd_advantage: length mismatch");
  std::vector<double> out(teacher_lp.size());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = (teacher_lp[t] - student_lp[t]) + alpha * orm_adv;
  return out;
}

double token_weight(double train_lp, double sample_lp, double eps_low, double eps_high) {
  const double ratio = std::exp(train_lp - sample_lp);
  return ratio >= eps_low && ratio <= eps_high ? ratio : 0.0;
}

std::vector<double> grpo_advantage(std::span<const double> rewards, bool normalize) {
  const auto n = rewards.size();
  if (normalize && n < 2) throw std::invalid_argument("grpo_advantage: normalized mode needs a group of at least 2");
  if (n == 0) return {};
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = rewards[i] - mean;
  if (!normalize) return out;
  double ss = 0.0;
  for (double a : out) ss += a * a;
  const double scale = std::sqrt(ss / static_cast<double>(n - 1)) + kGrpoStabilizer;
  for (auto& a : out) a /= scale;
  return out;
}

std::vector<SurrogateTerm> surrogate_terms(const MopdBatch& batch) {
  batch.validate();
  std::vector<SurrogateTerm> terms;
  terms.reserve(batch.responses.size());
  for (const auto& r : batch.responses) {
    SurrogateTerm term{r.prompt, r.tokens, {}, mopd_advantage(r.teacher_logprob, r.train_logprob, r.orm_advantage, batch.alpha)};
    for (std::size_t t = 0; t < r.tokens.size(); ++t)
      term.weight.push_back(token_weight(r.train_logprob[t], r.sample_logprob[t], batch.eps_low, batch.eps_high));
    terms.push_back(std::move(term));
  }
  return terms;
}

namespace {

double surrogate_from(std::span<const SurrogateTerm> terms,
                      const std::function<std::vector<double>(std::size_t)>& lp) {
  if (terms.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& term = terms[i];
    if (term.tokens.empty()) continue;
    const auto logp = lp(i);
    double s = 0.0;
    for (std::size_t t = 0; t < term.tokens.size(); ++t) s += term.weight[t] * term.advantage[t] * logp[t];
    total += s / static_cast<double>(term.tokens.size());
  }
  return -total / static_cast<double>(terms.size());
}

}  // namespace

double surrogate_loss(const MopdBatch& batch) {
  const auto terms = surrogate_terms(batch);
  return surrogate_from(terms, [&](std::size_t i) { return batch.responses[i].train_logprob; });
}

double surrogate_loss(const TabularPolicy& policy, std::span<const SurrogateTerm> terms) {
  return surrogate_from(terms, [&](std::size_t i) { return policy.token_logprobs(terms[i].prompt, terms[i].tokens); });
}

std::vector<double> surrogate_gradient(const TabularPolicy& policy, std::span<const SurrogateTerm> terms) {
  TabularPolicy grad(policy.prompts(), policy.length(), policy.vocab());
  if (terms.empty()) return grad.params();
  const double outer = -1.0 / static_cast<double>(terms.size());
  for (const auto& term : terms) {
    if (term.tokens.empty()) continue;
    const double inner = outer / static_cast<double>(term.tokens.size());
    std::size_t prev = policy.bos();
    for (std::size_t t = 0; t < term.tokens.size(); ++t) {
      const auto tok = static_cast<std::size_t>(term.tokens[t]);
      const double c = inner * term.weight[t] * term.advantage[t];
      if (c != 0.0) {
        // d log softmax(l)[tok] / d l = onehot(tok) - softmax(l)
        const auto p = softmax(policy.logits(term.prompt, t, prev));
        auto g = grad.logits(term.prompt, t, prev);
        for (std::size_t a = 0; a < p.size(); ++a) g[a] -= c * p[a];
        g[tok] += c;
      }
      prev = tok;
    }
  }
  return std::move(grad.params());
}

void MopdTask::validate(const TabularPolicy& student) const {
  if (domain_names.size() != teachers.size() || domain_names.empty())
    throw std::invalid_argument("mopd task: need one teacher slot per domain");
  for (const auto& t : teachers)
    if (t && (t->params().size() != student.params().size() || t->vocab() != student.vocab() ||
              t->length() != student.length()))
      throw std::invalid_argument("mopd task: teacher shape differs from student");
  if (prompt_domain.size() != student.prompts()) throw std::invalid_argument("mopd task: one domain tag per prompt");
  for (auto d : prompt_domain)
    if (d >= domain_names.size()) throw std::invalid_argument("mopd task: unknown domain tag " + std::to_string(d));
}

std::vector<double> domain_reverse_kl(const TabularPolicy& student, const MopdTask& task) {
  std::vector<double> sum(task.domain_names.size(), 0.0);
  std::vector<std::size_t> count(sum.size(), 0);
  for (std::size_t p = 0; p < task.prompt_domain.size(); ++p) {
    const auto d = task.prompt_domain[p];
    const TabularPolicy& teacher = task.teachers[d] ? *task.teachers[d] : student;
    sum[d] += exact_reverse_kl(student, teacher, p);
    ++count[d];
  }
  for (std::size_t d = 0; d < sum.size(); ++d)
    if (count[d] > 0) sum[d] /= static_cast<double>(count[d]);
  return sum;
}

MopdMetrics mopd_train_step(TabularPolicy& student, const MopdTask& task, const MopdSettings& settings, Rng& rng) {
  task.validate(student);
  if (settings.group_size == 0) throw std::invalid_argument("mopd_train_step: group_size must be > 0");
  TabularPolicy engine = student;
  for (auto& x : engine.params()) {
    if (settings.sample_in_float) x = static_cast<double>(static_cast<float>(x));
    if (settings.sample_noise > 0.0) x += settings.sample_noise * rng.normal();
  }

  MopdBatch batch;
  batch.eps_low = settings.eps_low;
  batch.eps_high = settings.eps_high;
  batch.alpha = settings.alpha;
  const bool use_orm = task.orm && settings.alpha != 0.0;
  for (std::size_t p = 0; p < student.prompts(); ++p) {
    const auto& teacher = task.teachers[task.prompt_domain[p]];
    std::vector<double> rewards;
    for (std::size_t g = 0; g < settings.group_size; ++g) {
      MopdResponse r;
      r.prompt = p;
      r.tokens = engine.sample(p, rng);
      r.sample_logprob = engine.token_logprobs(p, r.tokens);
      r.train_logprob = student.token_logprobs(p, r.tokens);
      r.teacher_logprob = teacher ? teacher->token_logprobs(p, r.tokens) : r.train_logprob;
      if (use_orm) rewards.push_back(task.orm(p, r.tokens));
      batch.responses.push_back(std::move(r));
    }
    if (use_orm) {
      const auto adv = grpo_advantage(rewards, rewards.size() >= 2);
      for (std::size_t g = 0; g < adv.size(); ++g)
        batch.responses[batch.responses.size() - adv.size() + g].orm_advantage = adv[g];
    }
  }

  const auto terms = surrogate_terms(batch);
  MopdMetrics m;
  m.loss = surrogate_loss(batch);
  m.reverse_kl_estimate = reverse_kl_loss(batch);
  std::size_t tokens = 0;
  std::size_t discarded = 0;
  double abs_adv = 0.0;
  for (const auto& term : terms) {
    for (std::size_t t = 0; t < term.tokens.size(); ++t) {
      ++tokens;
      if (term.weight[t] == 0.0) ++discarded;
      abs_adv += std::abs(term.advantage[t]);
    }
  }
  if (tokens > 0) {
    m.discard_fraction = static_cast<double>(discarded) / static_cast<double>(tokens);
    m.mean_abs_advantage = abs_adv / static_cast<double>(tokens);
  }

  const auto grad = surrogate_gradient(student, terms);
  auto& theta = student.params();
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= settings.learning_rate * grad[i];
  m.reverse_kl = domain_reverse_kl(student, task);
  return m;
}

MopdTask parse_domain_spec(const std::string& spec, std::size_t prompts_per_domain, std::size_t length,
                           std::size_t vocab, double teacher_scale, std::uint64_t seed) {
  MopdTask task;
  std::stringstream in(spec);
  std::string item;
  std::vector<bool> self;
  while (std::getline(in, item, ',')) {
    std::string name = item;
    bool is_self = false;
    if (const auto colon = item.find(':'); colon != std::string::npos) {
      name = item.substr(0, colon);
      const auto tag = item.substr(colon + 1);
      if (tag != "self") throw std::invalid_argument("unknown domain tag '" + tag + "' (only ':self' is recognized)");
      is_self = true;
    }
    if (name.empty()) throw std::invalid_argument("empty domain name in '" + spec + "'");
    for (const auto& seen : task.domain_names)
      if (seen == name) throw std::invalid_argument("duplicate domain '" + name + "'");
    task.domain_names.push_back(name);
    self.push_back(is_self);
  }
  if (task.domain_names.empty()) throw std::invalid_argument("no domains given");
  const std::size_t prompts = prompts_per_domain * task.domain_names.size();
  for (std::size_t d = 0; d < self.size(); ++d) {
    if (self[d]) {
      task.teachers.emplace_back(std::nullopt);
    } else {
      task.teachers.emplace_back(TabularPolicy::random(prompts, length, vocab, teacher_scale, mix64(seed + d + 1)));
    }
  }
  for (std::size_t p = 0; p < prompts; ++p) task.prompt_domain.push_back(p / prompts_per_domain);
  return task;
}

TwoDomainProblem make_two_domain_problem(std::size_t prompts_per_domain, std::size_t length, std::size_t vocab,
                                         double teacher_scale, std::uint64_t seed) {
  auto task = parse_domain_spec("math,code", prompts_per_domain, length, vocab, teacher_scale, seed);
  TabularPolicy student(prompts_per_domain * 2, length, vocab);
  return {std::move(task), std::move(student)};
}

}  // namespace mimo
