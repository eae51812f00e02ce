#include "mimo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mimo {

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void matvec(const Matrix& w, std::span<const double> x, std::span<double> y) {
  if (x.size() != w.cols || y.size() != w.rows) throw std::invalid_argument("matvec: shape mismatch");
  for (std::size_t o = 0; o < w.rows; ++o) y[o] = dot(w.row(o), x);
}

Matrix linear_rows(const Matrix& w, const Matrix& x) {
  if (x.cols != w.cols) throw std::invalid_argument("linear_rows: shape mismatch");
  Matrix y(x.rows, w.rows);
  const auto total = static_cast<long long>(x.rows * w.rows);
  const std::size_t out = w.rows;
#pragma omp parallel for schedule(static) if (total > 4096)
  for (long long idx = 0; idx < total; ++idx) {
    const auto t = static_cast<std::size_t>(idx) / out;
    const auto o = static_cast<std::size_t>(idx) % out;
    y(t, o) = dot(w.row(o), x.row(t));
  }
  return y;
}

Matrix linear_rows_reference(const Matrix& w, const Matrix& x) {
  if (x.cols != w.cols) throw std::invalid_argument("linear_rows: shape mismatch");
  Matrix y(x.rows, w.rows);
  for (std::size_t t = 0; t < x.rows; ++t) matvec(w, x.row(t), y.row(t));
  return y;
}

std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain, double eps) {
  if (x.size() != gain.size()) throw std::invalid_argument("rms_norm: dimension mismatch");
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gain[i];
  return y;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  auto out = log_softmax(logits);
  for (double& x : out) x = std::exp(x);
  return out;
}

double softmax_entropy(std::span<const double> logits) {
  const auto lp = log_softmax(logits);
  double h = 0.0;
  for (double l : lp) {
    const double p = std::exp(l);
    if (p > 0.0) h -= p * l;
  }
  return h;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

void add_inplace(std::span<double> acc, std::span<const double> x) {
  if (acc.size() != x.size()) throw std::invalid_argument("add_inplace: dimension mismatch");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

}  // namespace mimo
