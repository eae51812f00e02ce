#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace mimo {

/// Dense row-major matrix of doubles. Every activation, weight and logit in
/// the library is held in double precision.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::size_t size() const { return data.size(); }

  bool operator==(const Matrix&) const = default;
};

double dot(std::span<const double> a, std::span<const double> b);

// y = W x for a single vector. W is (out x in).
void matvec(const Matrix& w, std::span<const double> x, std::span<double> y);

// Batched y_t = W x_t over the rows of `x`. OpenMP over output elements; each
// element is reduced left-to-right by one thread, so results are identical to
// linear_rows_reference bit for bit.
Matrix linear_rows(const Matrix& w, const Matrix& x);
Matrix linear_rows_reference(const Matrix& w, const Matrix& x);

std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain, double eps = 1e-6);

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

double log_sum_exp(std::span<const double> v);
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);
// Shannon entropy in nats of softmax(logits).
double softmax_entropy(std::span<const double> logits);
// Lowest index wins ties.
std::size_t argmax(std::span<const double> v);

void add_inplace(std::span<double> acc, std::span<const double> x);

}  // namespace mimo
