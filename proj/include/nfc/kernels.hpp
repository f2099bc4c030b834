#pragma once

// Radial kernels and two scalable feature approximations: Random Fourier
// Features (Bochner spectral sampling) and Fast Kernel Slicing (random
// sphere projections composed with a 1-D basis obtained by inverting the
// generalized Riemann-Liouville fractional integral of the radial profile).

#include "nfc/common.hpp"
#include "nfc/qmc.hpp"
#include "nfc/rng.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace nfc {

enum class KernelFamily { Gaussian, Laplacian, Matern };

inline KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "gaussian") return KernelFamily::Gaussian;
  if (s == "laplacian") return KernelFamily::Laplacian;
  if (s == "matern") return KernelFamily::Matern;
  throw DomainError("unknown kernel family: " + s);
}

// Parameters of a radial kernel K(x, y) = F(||x - y||). Exactly the
// parameters of the chosen family are meaningful.
struct RadialKernelSpec {
  KernelFamily family = KernelFamily::Gaussian;
  double sigma = 1.0;  // gaussian bandwidth
  double alpha = 1.0;  // laplacian decay rate
  double nu = 1.5;     // matern smoothness
  double beta = 1.0;   // matern length scale

  static RadialKernelSpec gaussian(double sigma) {
    require(sigma > 0.0, "RadialKernelSpec: sigma must be positive");
    RadialKernelSpec s;
    s.family = KernelFamily::Gaussian;
    s.sigma = sigma;
    return s;
  }
  static RadialKernelSpec laplacian(double alpha) {
    require(alpha > 0.0, "RadialKernelSpec: alpha must be positive");
    RadialKernelSpec s;
    s.family = KernelFamily::Laplacian;
    s.alpha = alpha;
    return s;
  }
  static RadialKernelSpec matern(double nu, double beta) {
    require(nu > 0.0 && beta > 0.0,
            "RadialKernelSpec: nu and beta must be positive");
    RadialKernelSpec s;
    s.family = KernelFamily::Matern;
    s.nu = nu;
    s.beta = beta;
    return s;
  }
};

// Radial profile F(r) of the kernel.
inline double radial_profile(const RadialKernelSpec& spec, double r) {
  require(r >= 0.0, "radial_profile: radius must be non-negative");
  switch (spec.family) {
    case KernelFamily::Gaussian:
      return std::exp(-0.5 * r * r / (spec.sigma * spec.sigma));
    case KernelFamily::Laplacian:
      return std::exp(-spec.alpha * r);
    case KernelFamily::Matern: {
      if (r == 0.0) return 1.0;
      double z = std::sqrt(2.0 * spec.nu) * r / spec.beta;
      double lg = std::lgamma(spec.nu);
      return std::exp((1.0 - spec.nu) * std::numbers::ln2 - lg +
                      spec.nu * std::log(z)) *
             std::cyl_bessel_k(spec.nu, z);
    }
  }
  throw DomainError("radial_profile: unknown family");
}

inline double kernel_eval(const RadialKernelSpec& spec, const Vec& x,
                          const Vec& y) {
  require(x.size() == y.size(), "kernel_eval: dimension mismatch");
  return radial_profile(spec, (x - y).norm());
}

// ---------------------------------------------------------------------------
// Random Fourier Features
// ---------------------------------------------------------------------------

// Frozen spectral map: directions v_p drawn from the kernel's spectral
// measure, plus phases b_p retained for the single-cosine variant.
struct RffMap {
  Mat directions;  // D x d
  Vec phases;      // D, in [0, 2pi)
  int feature_count = 0;
  bool qmc = false;
};

// Samples the spectral measure. Gaussian kernels admit the Sobol
// quasi-random construction; the Laplacian spectral measure (multivariate
// Cauchy) is sampled pseudo-randomly; the Matern family has no closed
// spectral sampler here.
inline RffMap rff_build(const RadialKernelSpec& spec, int d, int D, bool qmc,
                        std::uint64_t seed) {
  require(d >= 1, "rff_build: d must be >= 1");
  require(D >= 1, "rff_build: D must be >= 1");
  if (spec.family == KernelFamily::Matern)
    throw DomainError(
        "rff_build: matern family has no closed-form spectral sampler");
  if (qmc && spec.family != KernelFamily::Gaussian)
    throw DomainError(
        "rff_build: quasi-random spectral sampling supported for the "
        "gaussian family only");

  RffMap map;
  map.feature_count = D;
  map.qmc = qmc;
  map.directions.resize(D, d);
  map.phases.resize(D);

  Rng rng(derive_seed(seed, "rff_build"));
  SobolSequence sobol(d);
  for (int p = 0; p < D; ++p) {
    Vec z(d);
    if (qmc) {
      Vec u = sobol.next();
      for (int j = 0; j < d; ++j)
        z[j] = inverse_normal_cdf(std::min(std::max(u[j], 1e-15), 1.0 - 1e-15));
    } else {
      z = rng.normal_vec(d);
    }
    if (spec.family == KernelFamily::Gaussian) {
      map.directions.row(p) = (z / spec.sigma).transpose();
    } else {
      // Multivariate Cauchy with scale alpha: z / sqrt(chi^2_1), scaled.
      double g = rng.normal();
      double u = std::max(g * g, 1e-300);
      map.directions.row(p) = (spec.alpha * z / std::sqrt(u)).transpose();
    }
    map.phases[p] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return map;
}

// Interleaved (cos, sin) feature pairs scaled by 1/sqrt(D), so the feature
// inner product is an unbiased kernel estimate and <enc(x), enc(x)> == 1.
inline Vec rff_encode(const RffMap& map, const Vec& x) {
  require(x.size() == map.directions.cols(),
          "rff_encode: input dimension mismatch");
  const int D = map.feature_count;
  Vec proj = map.directions * x;
  Vec out(2 * D);
  double scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (int p = 0; p < D; ++p) {
    out[2 * p] = std::cos(proj[p]) * scale;
    out[2 * p + 1] = std::sin(proj[p]) * scale;
  }
  return out;
}

// Optional single-cosine variant using the stored phases:
// sqrt(2/D) cos(<x, v_p> + b_p).
inline Vec rff_encode_cosine(const RffMap& map, const Vec& x) {
  require(x.size() == map.directions.cols(),
          "rff_encode_cosine: input dimension mismatch");
  const int D = map.feature_count;
  Vec proj = map.directions * x;
  Vec out(D);
  double scale = std::sqrt(2.0 / static_cast<double>(D));
  for (int p = 0; p < D; ++p)
    out[p] = scale * std::cos(proj[p] + map.phases[p]);
  return out;
}

// ---------------------------------------------------------------------------
// Fast Kernel Slicing
// ---------------------------------------------------------------------------

// Truncated Taylor coefficients b_n of the 1-D basis f such that averaging
// f over sphere projections reconstructs the radial profile F.
struct FksBasis {
  Vec coeffs;           // b_0 .. b_{N-1}; odd entries vanish for gaussian
  int effective_n = 0;  // coefficients kept before the overflow guard
  int dim = 0;          // ambient dimension the basis was derived for
};

// c_d = 2 Gamma(d/2) / (sqrt(pi) Gamma((d-1)/2)); the normalization of the
// sphere-projection density.
inline double fks_dimension_constant(int d) {
  require_domain(d >= 2, "fks: dimension must be >= 2");
  return std::exp(std::numbers::ln2 + std::lgamma(0.5 * d) -
                  0.5 * std::log(std::numbers::pi) -
                  std::lgamma(0.5 * (d - 1)));
}

// Inverts the fractional-integral relation term by term:
// a_n = c_d * b_n * (1/2) B((n+1)/2, (d-1)/2)  =>  b_n = a_n / (...).
// Only the gaussian profile has the required globally convergent Taylor
// series here. Terms whose coefficients would exceed the overflow guard
// truncate the series; the kept count is recorded.
inline FksBasis fks_derive_basis(const RadialKernelSpec& spec, int d,
                                 int n_taylor) {
  require_domain(d >= 2, "fks_derive_basis: dimension must be >= 2");
  require(n_taylor >= 1, "fks_derive_basis: N_taylor must be >= 1");
  if (spec.family != KernelFamily::Gaussian)
    throw DomainError(
        "fks_derive_basis: only the gaussian profile has the supported "
        "Taylor expansion");

  const double c_d = fks_dimension_constant(d);
  FksBasis basis;
  basis.dim = d;
  basis.coeffs = Vec::Zero(n_taylor);
  basis.effective_n = n_taylor;

  // F(s) = exp(-s^2 / (2 sigma^2)): a_{2m} = (-1)^m / (m! (2 sigma^2)^m).
  const double two_sigma_sq = 2.0 * spec.sigma * spec.sigma;
  double log_mfact = 0.0;  // log(m!)
  for (int n = 0; n < n_taylor; ++n) {
    if (n % 2 == 1) continue;  // odd Taylor coefficients of F vanish
    int m = n / 2;
    if (m > 0) log_mfact += std::log(static_cast<double>(m));
    double log_abs_a = -log_mfact - m * std::log(two_sigma_sq);
    double log_half_beta =
        std::lgamma(0.5 * (n + 1)) + std::lgamma(0.5 * (d - 1)) -
        std::lgamma(0.5 * (n + d)) - std::numbers::ln2;
    double log_abs_b = log_abs_a - std::log(c_d) - log_half_beta;
    if (log_abs_b > std::log(1e12)) {
      basis.effective_n = n;
      basis.coeffs.conservativeResize(n);
      break;
    }
    basis.coeffs[n] = (m % 2 == 0 ? 1.0 : -1.0) * std::exp(log_abs_b);
  }
  return basis;
}

// Evaluates the 1-D basis f(u) by Horner's rule on the signed projection
// value (even series, so the sign is immaterial for gaussian bases).
inline double fks_basis_eval(const FksBasis& basis, double u) {
  double acc = 0.0;
  for (Eigen::Index n = basis.coeffs.size() - 1; n >= 0; --n)
    acc = acc * u + basis.coeffs[n];
  return acc;
}

// Frozen slicing map: unit directions on the sphere plus uniform weights.
struct FksMap {
  Mat directions;  // D x d, rows on S^{d-1}
  Vec weights;     // D, all 1/sqrt(D)
  FksBasis basis;
  int feature_count = 0;
  bool qmc = false;

  void validate() const {
    require(feature_count >= 1 && directions.rows() == feature_count,
            "FksMap: inconsistent feature count");
    for (Eigen::Index p = 0; p < directions.rows(); ++p) {
      if (std::abs(directions.row(p).norm() - 1.0) > 1e-9)
        throw DomainError("FksMap: direction " + std::to_string(p) +
                          " is not unit length");
    }
    require_finite(basis.coeffs, "FksBasis::coeffs");
  }
};

// Uniform sphere directions: Gaussian draws (Sobol-seeded when qmc) pushed
// through normalization.
inline FksMap fks_build(const RadialKernelSpec& spec, int d, int D, bool qmc,
                        std::uint64_t seed, int n_taylor = 40) {
  require(D >= 1, "fks_build: D must be >= 1");
  FksMap map;
  map.basis = fks_derive_basis(spec, d, n_taylor);
  map.feature_count = D;
  map.qmc = qmc;
  map.directions.resize(D, d);
  map.weights = Vec::Constant(D, 1.0 / std::sqrt(static_cast<double>(D)));

  Rng rng(derive_seed(seed, "fks_build"));
  SobolSequence sobol(d);
  for (int p = 0; p < D; ++p) {
    Vec z(d);
    if (qmc) {
      Vec u = sobol.next();
      for (int j = 0; j < d; ++j)
        z[j] = inverse_normal_cdf(std::min(std::max(u[j], 1e-15), 1.0 - 1e-15));
    } else {
      z = rng.normal_vec(d);
    }
    double norm = z.norm();
    if (norm < 1e-12) {
      z = Vec::Unit(d, 0);
      norm = 1.0;
    }
    map.directions.row(p) = (z / norm).transpose();
  }
  map.validate();
  return map;
}

// Projected features w_p * f(<xi_p, x>).
inline Vec fks_encode(const FksMap& map, const Vec& x) {
  require(x.size() == map.directions.cols(),
          "fks_encode: input dimension mismatch");
  Vec proj = map.directions * x;
  Vec out(map.feature_count);
  for (int p = 0; p < map.feature_count; ++p)
    out[p] = map.weights[p] * fks_basis_eval(map.basis, proj[p]);
  return out;
}

// Sliced kernel estimate (1/D) sum_p f(|<xi_p, x - y>|); unbiased for
// K(x, y) by the fractional-integral identity.
inline double fks_kernel_estimate(const FksMap& map, const Vec& x,
                                  const Vec& y) {
  require(x.size() == y.size(), "fks_kernel_estimate: dimension mismatch");
  Vec proj = map.directions * (x - y);
  double acc = 0.0;
  for (int p = 0; p < map.feature_count; ++p)
    acc += fks_basis_eval(map.basis, std::abs(proj[p]));
  return acc / static_cast<double>(map.feature_count);
}

}  // namespace nfc
