#pragma once

// Quasi-Monte-Carlo support: a Sobol sequence facade and the inverse
// normal CDF used to push low-discrepancy points through Gaussian maps.

#include "nfc/common.hpp"

#include <boost/random/sobol.hpp>

#include <cmath>
#include <cstdint>

namespace nfc {

// Low-discrepancy sequence on [0,1)^dim. The underlying generator emits
// one coordinate per call and starts at the point (0.5, ...), i.e. the
// all-zero point is skipped.
class SobolSequence {
 public:
  explicit SobolSequence(int dim)
      : dim_(dim), eng_(static_cast<std::size_t>(dim)) {
    require(dim > 0, "SobolSequence: dim must be positive");
  }

  int dim() const { return dim_; }

  // Next point in the sequence.
  Vec next() {
    Vec p(dim_);
    for (int i = 0; i < dim_; ++i) {
      p[i] = static_cast<double>(eng_()) * 0x1.0p-64;
    }
    return p;
  }

 private:
  int dim_;
  boost::random::sobol_engine<std::uint_least64_t, 64u,
                              boost::random::default_sobol_table>
      eng_;
};

// Inverse standard-normal CDF. Acklam's rational approximation followed by
// one Halley refinement step; accurate to ~1e-15 over (0, 1).
inline double inverse_normal_cdf(double p) {
  require(p > 0.0 && p < 1.0, "inverse_normal_cdf: p must lie in (0, 1)");

  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};

  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }

  // One Halley step against the exact CDF tightens the tails.
  const double inv_sqrt2 = 0.7071067811865475244;
  const double sqrt_2pi = 2.5066282746310005024;
  double e = 0.5 * std::erfc(-x * inv_sqrt2) - p;
  double u = e * sqrt_2pi * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

}  // namespace nfc
