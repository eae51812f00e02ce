#include "mimo/curve_fit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

namespace mimo {
namespace {

struct Params {
  double c, a, b;
};

double model(const Params& p, double x) { return p.c * (1.0 - p.a * std::pow(x, p.b)); }

double sse_of(const Params& p, std::span<const CurvePoint> pts) {
  double s = 0.0;
  for (const auto& q : pts) {
    const double r = q.y - model(p, q.x);
    s += r * r;
  }
  return s;
}

// For a fixed ceiling, log(1 - y/c) = log a + b log x is linear.
std::optional<Params> log_linear(double c, std::span<const CurvePoint> pts) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& q : pts) {
    const double z = 1.0 - q.y / c;
    if (q.x <= 0.0 || z <= 0.0) continue;
    const double lx = std::log(q.x);
    const double lz = std::log(z);
    n += 1;
    sx += lx;
    sy += lz;
    sxx += lx * lx;
    sxy += lx * lz;
  }
  const double det = n * sxx - sx * sx;
  if (n < 2 || std::abs(det) < 1e-14) return std::nullopt;
  const double b = (n * sxy - sx * sy) / det;
  const double log_a = (sy - b * sx) / n;
  return Params{c, std::exp(log_a), b};
}

std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

}  // namespace

double CurveFit::operator()(double x) const { return model({ceiling, a, b}, x); }

CurveFit fit_acceptance_curve(std::span<const CurvePoint> points) {
  if (points.size() < 3) throw CurveFitError("fit needs at least 3 data points");
  std::set<double> positive_x;
  for (const auto& p : points) {
    if (!(p.x >= 0.0) || !std::isfinite(p.y)) throw CurveFitError("fit needs finite points with x >= 0");
    if (p.x > 0.0) positive_x.insert(p.x);
  }
  if (positive_x.size() < 2) throw CurveFitError("insufficient spread in x");

  double y_max = -std::numeric_limits<double>::infinity();
  for (const auto& p : points) y_max = std::max(y_max, p.y);
  if (y_max <= 0.0) throw CurveFitError("fit needs positive y values");

  Params best{y_max, 0.0, 1.0};
  double best_sse = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 400; ++i) {
    const double c = y_max * (1.0 + 1e-4 + 2.0 * i / 400.0);
    if (auto p = log_linear(c, points)) {
      const double s = sse_of(*p, points);
      if (std::isfinite(s) && s < best_sse) {
        best = *p;
        best_sse = s;
      }
    }
  }

  // Levenberg-Marquardt with multiplicative damping.
  Params p = best;
  double cost = sse_of(p, points);
  double lambda = 1e-3;
  int iter = 0;
  bool converged = false;
  for (; iter < 500 && !converged; ++iter) {
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (const auto& q : points) {
      const double xb = q.x > 0.0 ? std::pow(q.x, p.b) : 0.0;
      const double lx = q.x > 0.0 ? std::log(q.x) : 0.0;
      const Eigen::Vector3d j(1.0 - p.a * xb, -p.c * xb, -p.c * p.a * xb * lx);
      const double r = q.y - model(p, q.x);
      jtj += j * j.transpose();
      jtr += j * r;
    }
    bool improved = false;
    for (int tries = 0; tries < 30 && !improved; ++tries) {
      Eigen::Matrix3d damped = jtj;
      damped.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::Vector3d step = damped.ldlt().solve(jtr);
      const Params trial{p.c + step[0], p.a + step[1], p.b + step[2]};
      const double trial_cost = sse_of(trial, points);
      if (std::isfinite(trial_cost) && trial_cost <= cost) {
        const double drop = cost - trial_cost;
        p = trial;
        cost = trial_cost;
        lambda = std::max(lambda / 10.0, 1e-15);
        improved = true;
        converged = drop <= 1e-15 * cost || step.norm() < 1e-14;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }

  double mean = 0.0;
  for (const auto& q : points) mean += q.y;
  mean /= static_cast<double>(points.size());
  double sst = 0.0;
  for (const auto& q : points) sst += (q.y - mean) * (q.y - mean);

  CurveFit fit{p.c, p.a, p.b, 0.0, cost, iter};
  fit.r_squared = sst > 0.0 ? 1.0 - cost / sst : (cost == 0.0 ? 1.0 : 0.0);
  return fit;
}

std::vector<CurvePoint> read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<CurvePoint> out;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() < 2) continue;
    const auto x = parse_double(fields[fields.size() - 2]);
    const auto y = parse_double(fields.back());
    if (x && y) out.push_back({*x, *y});
  }
  return out;
}

}  // namespace mimo
