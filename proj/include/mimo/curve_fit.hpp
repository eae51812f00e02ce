#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mimo {

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
};

/// y = ceiling * (1 - a * x^b)
struct CurveFit {
  double ceiling = 0.0;
  double a = 0.0;
  double b = 0.0;
  double r_squared = 0.0;
  double sse = 0.0;
  int iterations = 0;

  double operator()(double x) const;
};

class CurveFitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Least squares on the original scale. Starts from a log-linear fit of
/// log(1 - y/ceiling) against log x over a grid of ceilings, then refines all
/// three parameters with Levenberg-Marquardt. Requires x >= 0, at least 3
/// points and at least 2 distinct positive x values.
CurveFit fit_acceptance_curve(std::span<const CurvePoint> points);

/// Reads (x, y) from the last two numeric fields of each CSV line; lines
/// whose trailing fields are not numbers (headers) are skipped.
std::vector<CurvePoint> read_curve_csv(const std::string& path);

}  // namespace mimo
