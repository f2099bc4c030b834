#include "nfc/kernels.hpp"
#include "nfc/rng.hpp"

#include "support/test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace nfc;
using Catch::Approx;

namespace {

double rff_estimate(const RffMap& map, const Vec& x, const Vec& y) {
  return rff_encode(map, x).dot(rff_encode(map, y));
}

}  // namespace

TEST_CASE("kernel_eval: closed forms") {
  Vec x = Vec::Zero(3), y = Vec::Zero(3);
  auto g = RadialKernelSpec::gaussian(1.0);
  REQUIRE(kernel_eval(g, x, x) == 1.0);
  y[0] = 1.0;
  REQUIRE(kernel_eval(g, x, y) == Approx(std::exp(-0.5)).margin(1e-12));

  auto l = RadialKernelSpec::laplacian(2.0);
  REQUIRE(kernel_eval(l, x, y) == Approx(std::exp(-2.0)).margin(1e-12));

  Vec bad = Vec::Zero(2);
  REQUIRE_THROWS_AS(kernel_eval(g, x, bad), ContractViolation);

  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    Vec a = rng.normal_vec(3), b = rng.normal_vec(3);
    double kg = kernel_eval(g, a, b);
    double kl = kernel_eval(l, a, b);
    REQUIRE(kg > 0.0);
    REQUIRE(kg <= 1.0);
    REQUIRE(kl > 0.0);
    REQUIRE(kl <= 1.0);
  }
}

TEST_CASE("matern nu=1/2 reduces to the laplacian closed form") {
  double beta = 0.7;
  auto m = RadialKernelSpec::matern(0.5, beta);
  auto l = RadialKernelSpec::laplacian(1.0 / beta);
  Rng rng(11);
  for (int i = 0; i < 10; ++i) {
    double r = rng.uniform(0.05, 3.0);
    REQUIRE(radial_profile(m, r) ==
            Approx(radial_profile(l, r)).margin(1e-9));
  }
  REQUIRE(radial_profile(m, 0.0) == 1.0);
}

TEST_CASE("rff_build: family support") {
  auto g = RadialKernelSpec::gaussian(1.0);
  auto l = RadialKernelSpec::laplacian(1.0);
  auto m = RadialKernelSpec::matern(1.5, 1.0);
  REQUIRE_NOTHROW(rff_build(g, 3, 16, true, 1));
  REQUIRE_NOTHROW(rff_build(l, 3, 16, false, 1));
  REQUIRE_THROWS_AS(rff_build(m, 3, 16, false, 1), DomainError);
  REQUIRE_THROWS_AS(rff_build(l, 3, 16, true, 1), DomainError);
  REQUIRE_THROWS_AS(rff_build(g, 3, 0, false, 1), ContractViolation);
}

TEST_CASE("rff_encode: self inner product is exactly one") {
  auto g = RadialKernelSpec::gaussian(0.8);
  auto map = rff_build(g, 4, 64, false, 7);
  Rng rng(9);
  for (int i = 0; i < 10; ++i) {
    Vec x = rng.normal_vec(4);
    Vec f = rff_encode(map, x);
    REQUIRE(f.size() == 128);
    REQUIRE(f.dot(f) == Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("rff: kernel approximation accuracy") {
  auto g = RadialKernelSpec::gaussian(1.0);
  Rng rng(21);
  std::vector<std::pair<Vec, Vec>> pairs;
  for (int i = 0; i < 100; ++i)
    pairs.emplace_back(rng.normal_vec(4), rng.normal_vec(4));

  SECTION("mean absolute error at D = 1024") {
    auto map = rff_build(g, 4, 1024, true, 5);
    double mae = 0.0;
    for (const auto& [x, y] : pairs)
      mae += std::abs(rff_estimate(map, x, y) - kernel_eval(g, x, y));
    mae /= pairs.size();
    REQUIRE(mae <= 0.05);
  }

  SECTION("max error shrinks from D = 64 to D = 4096") {
    auto small = rff_build(g, 4, 64, false, 5);
    auto large = rff_build(g, 4, 4096, false, 5);
    double err_small = 0.0, err_large = 0.0;
    for (const auto& [x, y] : pairs) {
      double truth = kernel_eval(g, x, y);
      err_small =
          std::max(err_small, std::abs(rff_estimate(small, x, y) - truth));
      err_large =
          std::max(err_large, std::abs(rff_estimate(large, x, y) - truth));
    }
    REQUIRE(err_large <= err_small);
  }
}

TEST_CASE("rff: shift invariance and symmetry") {
  auto g = RadialKernelSpec::gaussian(1.2);
  auto map = rff_build(g, 3, 32, false, 13);
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    Vec x = rng.normal_vec(3), y = rng.normal_vec(3), c = rng.normal_vec(3);
    double base = rff_estimate(map, x, y);
    REQUIRE(rff_estimate(map, x + c, y + c) == Approx(base).margin(1e-12));
    REQUIRE(rff_estimate(map, y, x) == Approx(base).margin(1e-15));
  }
}

TEST_CASE("rff: unbiasedness over independent maps") {
  auto g = RadialKernelSpec::gaussian(1.0);
  Vec x(3), y(3);
  x << 0.2, -0.4, 1.0;
  y << -0.3, 0.5, 0.2;
  double truth = kernel_eval(g, x, y);

  const int n_maps = 10000;
  std::vector<double> est(n_maps);
  for (int i = 0; i < n_maps; ++i) {
    auto map = rff_build(g, 3, 8, false, 1000 + i);
    est[i] = rff_estimate(map, x, y);
  }
  double mean = test::mean_of(est);
  double se = test::std_of(est) / std::sqrt(static_cast<double>(n_maps));
  REQUIRE(std::abs(mean - truth) <= 3.0 * se);
}

TEST_CASE("rff: cosine variant also estimates the kernel") {
  auto g = RadialKernelSpec::gaussian(1.0);
  auto map = rff_build(g, 4, 4096, false, 3);
  Rng rng(6);
  Vec x = rng.normal_vec(4), y = rng.normal_vec(4);
  double est = rff_encode_cosine(map, x).dot(rff_encode_cosine(map, y));
  REQUIRE(est == Approx(kernel_eval(g, x, y)).margin(0.05));
}

TEST_CASE("rff: determinism") {
  auto g = RadialKernelSpec::gaussian(1.0);
  auto a = rff_build(g, 3, 32, false, 42);
  auto b = rff_build(g, 3, 32, false, 42);
  REQUIRE(a.directions == b.directions);
  REQUIRE(a.phases == b.phases);
}

TEST_CASE("fks_derive_basis: constants and structure") {
  SECTION("d = 3, n = 0 collapses to b0 = a0") {
    auto basis = fks_derive_basis(RadialKernelSpec::gaussian(1.0), 3, 4);
    REQUIRE(basis.coeffs[0] == Approx(1.0).margin(1e-12));
  }

  SECTION("odd coefficients vanish") {
    auto basis = fks_derive_basis(RadialKernelSpec::gaussian(1.0), 4, 20);
    for (int n = 1; n < 20; n += 2) REQUIRE(basis.coeffs[n] == 0.0);
  }

  SECTION("d < 2 is a domain error") {
    REQUIRE_THROWS_AS(fks_derive_basis(RadialKernelSpec::gaussian(1.0), 1, 4),
                      DomainError);
  }

  SECTION("unsupported families are rejected") {
    REQUIRE_THROWS_AS(fks_derive_basis(RadialKernelSpec::laplacian(1.0), 3, 4),
                      DomainError);
  }

  SECTION("overflow guard truncates and records the effective order") {
    auto basis = fks_derive_basis(RadialKernelSpec::gaussian(0.02), 4, 40);
    REQUIRE(basis.effective_n < 40);
    REQUIRE(basis.coeffs.size() == basis.effective_n);
    REQUIRE(basis.coeffs.allFinite());
  }
}

TEST_CASE("fks: quadrature reconstruction of the radial profile") {
  // Independent oracle: F(s) = c_d * Integral_0^1 f(ts) (1-t^2)^((d-3)/2) dt
  // evaluated by 128-node Gauss-Legendre quadrature.
  const int d = 4;
  auto spec = RadialKernelSpec::gaussian(1.0);
  auto basis = fks_derive_basis(spec, d, 40);
  double c_d = fks_dimension_constant(d);
  test::GaussLegendre quad(128);

  auto reconstruct = [&](double s) {
    return c_d * quad.integrate([&](double t) {
             return fks_basis_eval(basis, t * s) *
                    std::pow(1.0 - t * t, 0.5 * (d - 3));
           });
  };

  for (double s : {0.1, 0.5, 1.0, 2.0}) {
    REQUIRE(std::abs(reconstruct(s) - radial_profile(spec, s)) <= 1e-6);
  }

  // Basis-consistency sweep over [0, 2 sigma].
  for (int i = 0; i <= 20; ++i) {
    double s = 2.0 * i / 20.0;
    REQUIRE(std::abs(reconstruct(s) - radial_profile(spec, s)) <= 1e-6);
  }
}

TEST_CASE("fks_build and fks_encode") {
  auto spec = RadialKernelSpec::gaussian(1.0);
  auto map = fks_build(spec, 4, 64, true, 9);
  REQUIRE_NOTHROW(map.validate());

  SECTION("directions are unit length") {
    for (Eigen::Index p = 0; p < map.directions.rows(); ++p)
      REQUIRE(map.directions.row(p).norm() == Approx(1.0).margin(1e-12));
  }

  SECTION("zero input hits w_p * b0 in every feature") {
    Vec f = fks_encode(map, Vec::Zero(4));
    double expect = map.weights[0] * map.basis.coeffs[0];
    for (int p = 0; p < 64; ++p)
      REQUIRE(f[p] == Approx(expect).margin(1e-12));
  }

  SECTION("same seed, identical map") {
    auto again = fks_build(spec, 4, 64, true, 9);
    REQUIRE(map.directions == again.directions);
    REQUIRE(map.weights == again.weights);
  }

  SECTION("estimate symmetry") {
    Rng rng(2);
    Vec x = rng.normal_vec(4), y = rng.normal_vec(4);
    REQUIRE(fks_kernel_estimate(map, x, y) ==
            Approx(fks_kernel_estimate(map, y, x)).margin(1e-15));
  }
}

TEST_CASE("fks: slicing error follows the 1/sqrt(D) law") {
  const int d = 4;
  auto spec = RadialKernelSpec::gaussian(1.0);
  Rng rng(31);
  std::vector<std::pair<Vec, Vec>> pairs;
  for (int i = 0; i < 100; ++i)
    pairs.emplace_back(0.7 * rng.normal_vec(d), 0.7 * rng.normal_vec(d));

  // Mean absolute estimation error averaged over pairs and independent
  // maps; Monte-Carlo directions so the O(1/sqrt(D)) rate applies.
  auto mean_error = [&](int D) {
    const int n_maps = 30;
    double acc = 0.0;
    for (int m = 0; m < n_maps; ++m) {
      auto map = fks_build(spec, d, D, false, 500 + m);
      for (const auto& [x, y] : pairs)
        acc += std::abs(fks_kernel_estimate(map, x, y) -
                        kernel_eval(spec, x, y));
    }
    return acc / (n_maps * static_cast<double>(pairs.size()));
  };

  double e64 = mean_error(64);
  double e256 = mean_error(256);
  double e1024 = mean_error(1024);
  // Quadrupling D should halve the error; allow a factor-2 band.
  REQUIRE(e256 / e64 >= 0.25);
  REQUIRE(e256 / e64 <= 1.0);
  REQUIRE(e1024 / e256 >= 0.25);
  REQUIRE(e1024 / e256 <= 1.0);
}
