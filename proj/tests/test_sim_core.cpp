#include "nfc/grid.hpp"
#include "nfc/qmc.hpp"
#include "nfc/rng.hpp"
#include "nfc/serialize.hpp"
#include "nfc/sim.hpp"
#include "nfc/simulators.hpp"

#include "support/test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

using namespace nfc;
using Catch::Approx;

TEST_CASE("rng: deterministic and well-scaled") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());

  Rng c(7);
  double sum = 0.0, sum_sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = c.normal();
    sum += z;
    sum_sq += z * z;
  }
  REQUIRE(std::abs(sum / n) < 0.03);
  REQUIRE(sum_sq / n == Approx(1.0).margin(0.05));

  Rng d(9);
  for (int i = 0; i < 1000; ++i) {
    double u = d.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("derive_seed: distinct streams decorrelate") {
  REQUIRE(derive_seed(1, 0) != derive_seed(1, 1));
  REQUIRE(derive_seed(1, 0) != derive_seed(2, 0));
  REQUIRE(derive_seed(5, "alpha") != derive_seed(5, "beta"));
  // Chained derivation is order-sensitive.
  REQUIRE(derive_seed(3, 1, 2) != derive_seed(3, 2, 1));
}

TEST_CASE("sobol: 1-D reference sequence") {
  SobolSequence s(1);
  REQUIRE(s.next()[0] == Approx(0.5).margin(1e-15));
  REQUIRE(s.next()[0] == Approx(0.75).margin(1e-15));
  REQUIRE(s.next()[0] == Approx(0.25).margin(1e-15));
  REQUIRE(s.next()[0] == Approx(0.375).margin(1e-15));
}

TEST_CASE("inverse_normal_cdf: matches erfc round trip") {
  for (double p : {1e-9, 1e-4, 0.1, 0.3, 0.5, 0.7, 0.975, 1.0 - 1e-6}) {
    double x = inverse_normal_cdf(p);
    double back = 0.5 * std::erfc(-x / std::sqrt(2.0));
    REQUIRE(back == Approx(p).epsilon(1e-10).margin(1e-12));
  }
  REQUIRE(inverse_normal_cdf(0.5) == Approx(0.0).margin(1e-12));
  REQUIRE_THROWS_AS(inverse_normal_cdf(0.0), ContractViolation);
  REQUIRE_THROWS_AS(inverse_normal_cdf(1.0), ContractViolation);
}

TEST_CASE("ParamSpace: validation, membership, clamping") {
  ParamSpace sp;
  sp.names = {"a", "b"};
  sp.lower = Vec::Zero(2);
  sp.upper = Vec::Ones(2);
  REQUIRE_NOTHROW(sp.validate());

  Vec in(2), out(2);
  in << 0.5, 1.0;
  out << -0.5, 2.0;
  REQUIRE(sp.contains(in));
  REQUIRE_FALSE(sp.contains(out));
  REQUIRE(sp.clamp(out) == 2);
  REQUIRE(out[0] == 0.0);
  REQUIRE(out[1] == 1.0);

  ParamSpace bad = sp;
  bad.upper[0] = -1.0;
  REQUIRE_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("sample_params: uniform bounds and Sobol reference order") {
  ParamSpace sp;
  sp.names = {"p"};
  sp.lower = Vec::Zero(1);
  sp.upper = Vec::Ones(1);
  Prior prior;  // uniform

  auto res = sample_params(sp, prior, 1, false, 11);
  REQUIRE(res.samples.size() == 1);
  REQUIRE(res.samples[0].values[0] >= 0.0);
  REQUIRE(res.samples[0].values[0] <= 1.0);

  auto qres = sample_params(sp, prior, 4, true, 11);
  REQUIRE(qres.samples[0].values[0] == Approx(0.5).margin(1e-15));
  REQUIRE(qres.samples[1].values[0] == Approx(0.75).margin(1e-15));
  REQUIRE(qres.samples[2].values[0] == Approx(0.25).margin(1e-15));
  REQUIRE(qres.samples[3].values[0] == Approx(0.375).margin(1e-15));
}

TEST_CASE("sample_params: gaussian priors") {
  ParamSpace sp;
  sp.names = {"a", "b"};
  sp.lower = Vec::Constant(2, -10.0);
  sp.upper = Vec::Constant(2, 10.0);

  SECTION("zero covariance collapses onto the mean") {
    Prior prior;
    prior.kind = PriorKind::Gaussian;
    prior.mean = Vec::Constant(2, 1.5);
    prior.cov = Mat::Zero(2, 2);
    auto res = sample_params(sp, prior, 8, false, 3);
    for (const auto& s : res.samples) {
      REQUIRE(s.values[0] == Approx(1.5).margin(1e-12));
      REQUIRE(s.values[1] == Approx(1.5).margin(1e-12));
    }
    REQUIRE(res.clamp_count == 0);
  }

  SECTION("non-PSD covariance is rejected") {
    Prior prior;
    prior.kind = PriorKind::Gaussian;
    prior.mean = Vec::Zero(2);
    prior.cov = Mat::Identity(2, 2);
    prior.cov(0, 0) = -1.0;
    REQUIRE_THROWS_AS(sample_params(sp, prior, 1, false, 3), DomainError);
  }

  SECTION("sample moments match the prior") {
    Prior prior;
    prior.kind = PriorKind::Gaussian;
    prior.mean = Vec::Zero(2);
    prior.mean << 1.0, -2.0;
    prior.cov = Mat::Zero(2, 2);
    prior.cov(0, 0) = 4.0;
    prior.cov(1, 1) = 0.25;
    auto res = sample_params(sp, prior, 4000, false, 17);
    double m0 = 0.0, m1 = 0.0, v0 = 0.0, v1 = 0.0;
    for (const auto& s : res.samples) {
      m0 += s.values[0];
      m1 += s.values[1];
    }
    m0 /= 4000.0;
    m1 /= 4000.0;
    for (const auto& s : res.samples) {
      v0 += (s.values[0] - m0) * (s.values[0] - m0);
      v1 += (s.values[1] - m1) * (s.values[1] - m1);
    }
    v0 /= 4000.0;
    v1 /= 4000.0;
    REQUIRE(m0 == Approx(1.0).margin(0.1));
    REQUIRE(m1 == Approx(-2.0).margin(0.05));
    REQUIRE(v0 == Approx(4.0).epsilon(0.1));
    REQUIRE(v1 == Approx(0.25).epsilon(0.1));
  }

  SECTION("out-of-box gaussian draws are clamped and counted") {
    ParamSpace tight;
    tight.names = {"a"};
    tight.lower = Vec::Zero(1);
    tight.upper = Vec::Ones(1);
    Prior prior;
    prior.kind = PriorKind::Gaussian;
    prior.mean = Vec::Constant(1, 0.0);
    prior.cov = Mat::Identity(1, 1) * 4.0;
    auto res = sample_params(tight, prior, 500, false, 5);
    REQUIRE(res.clamp_count > 100);
    for (const auto& s : res.samples) {
      REQUIRE(s.values[0] >= 0.0);
      REQUIRE(s.values[0] <= 1.0);
    }
  }

  SECTION("qmc gaussian matches mean closely") {
    Prior prior;
    prior.kind = PriorKind::Gaussian;
    prior.mean = Vec::Zero(2);
    prior.cov = Mat::Identity(2, 2);
    auto res = sample_params(sp, prior, 1024, true, 5);
    Vec m = Vec::Zero(2);
    for (const auto& s : res.samples) m += s.values;
    m /= 1024.0;
    REQUIRE(m.norm() < 0.01);
  }
}

TEST_CASE("prior log density") {
  ParamSpace sp;
  sp.names = {"a", "b"};
  sp.lower = Vec::Constant(2, 0.0);
  sp.upper = Vec::Constant(2, 2.0);

  Prior uni;
  Vec inside = Vec::Constant(2, 1.0);
  Vec outside = Vec::Constant(2, 3.0);
  REQUIRE(uni.log_density(sp, inside) == Approx(-std::log(4.0)).margin(1e-12));
  REQUIRE(std::isinf(uni.log_density(sp, outside)));

  Prior g;
  g.kind = PriorKind::Gaussian;
  g.mean = Vec::Ones(2);
  g.cov = Mat::Identity(2, 2) * 2.0;
  // Independent normal log pdf at the mean: -0.5*log((2*pi*2)^2).
  double expect = -std::log(2.0 * std::numbers::pi * 2.0);
  REQUIRE(g.log_density(sp, g.mean) == Approx(expect).margin(1e-12));
}

TEST_CASE("make_terrain: flat, rough, deterministic") {
  EnvGrid flat = make_terrain(TerrainKind::Flat, 8, 8, 0.1, 0.2, 1);
  REQUIRE(flat.heights.cwiseAbs().maxCoeff() == 0.0);

  EnvGrid a = make_terrain(TerrainKind::Rough, 25, 40, 0.1, 0.2, 99);
  EnvGrid b = make_terrain(TerrainKind::Rough, 25, 40, 0.1, 0.2, 99);
  REQUIRE(a.heights == b.heights);
  REQUIRE(a.heights.size() == 1000);

  double mean = a.heights.mean();
  double sd = std::sqrt((a.heights.array() - mean).square().mean());
  REQUIRE(std::abs(mean) < 1e-12);
  REQUIRE(sd >= 0.1);
  REQUIRE(sd <= 0.3);

  REQUIRE_THROWS_AS(make_terrain(TerrainKind::Rough, 0, 4, 0.1, 0.2, 1),
                    ContractViolation);
}

TEST_CASE("EnvGrid: bilinear lookup and gradients") {
  EnvGrid g;
  g.resolution = 1.0;
  g.origin = {0.0, 0.0};
  g.heights.resize(2, 2);
  // height = x + 2y on the corners.
  g.heights << 0.0, 1.0,  // row 0: y=0, x=0..1
      2.0, 3.0;           // row 1: y=1
  REQUIRE(g.height_at(0.5, 0.5) == Approx(1.5).margin(1e-12));
  REQUIRE(g.height_at(1.0, 1.0) == Approx(3.0).margin(1e-12));
  // Clamped beyond borders.
  REQUIRE(g.height_at(5.0, 5.0) == Approx(3.0).margin(1e-12));
  Eigen::Vector2d grad = g.gradient_at(0.5, 0.5);
  REQUIRE(grad[0] == Approx(1.0).margin(1e-9));
  REQUIRE(grad[1] == Approx(2.0).margin(1e-9));
}

TEST_CASE("perceive: noise model contracts") {
  EnvGrid truth = make_terrain(TerrainKind::Rough, 20, 20, 0.1, 0.2, 4);
  Eigen::Vector2d pose{0.0, 0.0};

  SECTION("zero noise is the identity") {
    NoiseSpec none;
    auto res = perceive(truth, none, pose, 1);
    REQUIRE(res.grid.heights == truth.heights);
    REQUIRE(res.dropped == 0);
  }

  SECTION("dropout is recorded in the mask") {
    NoiseSpec n;
    n.dropout_rate = 0.3;
    auto res = perceive(truth, n, pose, 2);
    double frac = static_cast<double>(res.dropped) /
                  static_cast<double>(truth.heights.size());
    REQUIRE(frac >= 0.25);
    REQUIRE(res.dropout_mask.sum() == res.dropped);
    // Filled values come from surviving neighbors, hence stay finite.
    REQUIRE(res.grid.heights.allFinite());
  }

  SECTION("quantization emits exact multiples") {
    NoiseSpec n;
    n.quantization = 0.05;
    auto res = perceive(truth, n, pose, 3);
    for (Eigen::Index i = 0; i < res.grid.heights.size(); ++i) {
      double h = res.grid.heights.data()[i];
      double k = std::round(h / 0.05);
      REQUIRE(std::abs(h - k * 0.05) < 1e-12);
    }
  }

  SECTION("deterministic in the seed") {
    NoiseSpec n;
    n.depth_base_std = 0.01;
    n.depth_range_coef = 0.005;
    n.dropout_rate = 0.1;
    auto r1 = perceive(truth, n, pose, 77);
    auto r2 = perceive(truth, n, pose, 77);
    REQUIRE(r1.grid.heights == r2.grid.heights);
    REQUIRE(r1.dropout_mask == r2.dropout_mask);
  }

  SECTION("range-dependent noise grows with distance") {
    NoiseSpec n;
    n.depth_range_coef = 0.05;
    // Average absolute perturbation over many seeds, near vs far cell.
    double near_acc = 0.0, far_acc = 0.0;
    for (int s = 0; s < 200; ++s) {
      auto res = perceive(truth, n, pose, 1000 + s);
      Mat diff = (res.grid.heights - truth.heights).cwiseAbs();
      near_acc += diff(10, 10);  // cell at the robot
      far_acc += diff(0, 0);     // corner cell
    }
    REQUIRE(far_acc > 2.0 * near_acc);
  }
}

TEST_CASE("resize and pooling") {
  EnvGrid g = make_terrain(TerrainKind::Rough, 16, 16, 0.1, 0.2, 8);
  EnvGrid up = resize_bilinear(g, 32, 32);
  REQUIRE(up.rows() == 32);
  // Corner alignment preserves the corner values exactly.
  REQUIRE(up.heights(0, 0) == Approx(g.heights(0, 0)).margin(1e-12));
  REQUIRE(up.heights(31, 31) == Approx(g.heights(15, 15)).margin(1e-12));

  Mat m(4, 4);
  m << 1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4;
  Mat pooled = avg_pool(m, 2, 2);
  REQUIRE(pooled(0, 0) == 1.0);
  REQUIRE(pooled(0, 1) == 2.0);
  REQUIRE(pooled(1, 0) == 3.0);
  REQUIRE(pooled(1, 1) == 4.0);
}

TEST_CASE("lingauss: step contract") {
  LinGaussSim sim(3, 0.01);
  EnvGrid env = make_terrain(TerrainKind::Flat, 4, 4, 0.1, 0.0, 0);
  NoiseSpec none;
  Rng rng(1);

  SECTION("zero parameters fix the state") {
    Vec s(3);
    s << 0.3, -0.7, 2.0;
    Vec next = sim.step(Vec::Zero(3), ResidualFidelity::zero(), s,
                        Vec::Zero(1), env, none, rng);
    REQUIRE(next == s);
  }

  SECTION("unit drift matches the one-line oracle") {
    Vec psi = Vec::Ones(3);
    Vec s = Vec::Zero(3);
    Vec next = sim.step(psi, ResidualFidelity::zero(), s, Vec::Zero(1), env,
                        none, rng);
    Vec oracle = s + psi * 0.01;
    REQUIRE((next - oracle).cwiseAbs().maxCoeff() < 1e-15);
  }

  SECTION("shape violations throw") {
    REQUIRE_THROWS_AS(sim.step(Vec::Zero(2), ResidualFidelity::zero(),
                               Vec::Zero(3), Vec::Zero(1), env, none, rng),
                      ContractViolation);
    REQUIRE_THROWS_AS(sim.step(Vec::Zero(3), ResidualFidelity::zero(),
                               Vec::Zero(4), Vec::Zero(1), env, none, rng),
                      ContractViolation);
  }

  SECTION("non-finite input is a domain error") {
    Vec s(3);
    s << 0.0, std::numeric_limits<double>::quiet_NaN(), 0.0;
    REQUIRE_THROWS_AS(sim.step(Vec::Zero(3), ResidualFidelity::zero(), s,
                               Vec::Zero(1), env, none, rng),
                      DomainError);
  }
}

TEST_CASE("diffdrive: step examples") {
  DiffDriveSim sim;
  EnvGrid flat = make_terrain(TerrainKind::Flat, 16, 16, 0.1, 0.0, 0);
  NoiseSpec none;
  Rng rng(1);

  SECTION("additive delta_s moves x by exactly 0.1") {
    ResidualFidelity phi;
    phi.delta_s = Vec::Zero(5);
    phi.delta_s[0] = 0.1;
    Vec next = sim.step(sim.nominal_params(), phi, Vec::Zero(5), Vec::Zero(2),
                        flat, none, rng);
    REQUIRE(next[0] == Approx(0.1).margin(1e-15));
    REQUIRE(next.tail(4).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("heading stays wrapped") {
    Vec s = Vec::Zero(5);
    s[2] = 3.1;
    s[4] = 5.0;  // strong yaw rate pushes heading past pi
    Vec a = Vec::Zero(2);
    Vec next = sim.step(sim.nominal_params(), ResidualFidelity::zero(), s, a,
                        flat, none, rng);
    REQUIRE(next[2] <= std::numbers::pi);
    REQUIRE(next[2] > -std::numbers::pi);
  }
}

TEST_CASE("step: decomposition additivity is literal") {
  auto check = [](const Simulator& sim, const Vec& s, const Vec& a) {
    EnvGrid env = make_terrain(TerrainKind::Rough, 12, 12, 0.1, 0.1, 3);
    NoiseSpec none;
    Rng rng1(0), rng2(0);
    Rng draw(5);
    ResidualFidelity phi;
    phi.delta_s = 0.05 * draw.normal_vec(sim.state_dim());
    Vec with = sim.step(sim.nominal_params(), phi, s, a, env, none, rng1);
    Vec without = sim.step(sim.nominal_params(), ResidualFidelity::zero(), s,
                           a, env, none, rng2);
    // Additivity is literal in the implementation; the comparison allows
    // one ulp of float rounding from the (f + delta) - f - delta chain.
    REQUIRE((with - without - phi.delta_s).cwiseAbs().maxCoeff() < 1e-13);
  };

  LinGaussSim lg(4);
  Rng r(2);
  for (int i = 0; i < 10; ++i)
    check(lg, r.normal_vec(4), Vec::Zero(1));

  DiffDriveSim dd;
  for (int i = 0; i < 10; ++i) {
    Vec s = 0.3 * r.normal_vec(5);
    Vec a = r.uniform_vec(2) * 2.0 - Vec::Ones(2);
    check(dd, s, a);
  }
}

TEST_CASE("rollout: contracts and determinism") {
  DiffDriveSim sim;
  EnvGrid env = make_terrain(TerrainKind::Flat, 16, 16, 0.1, 0.0, 0);
  NoiseSpec none;

  SECTION("H = 1 gives 2 states and 1 action") {
    auto traj = rollout(sim, zero_policy(2), sim.nominal_params(),
                        ResidualFidelity::zero(), env, 1, none, 7);
    REQUIRE(traj.states.rows() == 2);
    REQUIRE(traj.actions.rows() == 1);
    REQUIRE_NOTHROW(traj.validate());
  }

  SECTION("same seed, bitwise identical") {
    NoiseSpec noisy;
    noisy.process_std = Vec::Constant(5, 0.01);
    auto t1 = rollout(sim, zero_policy(2), sim.nominal_params(),
                      ResidualFidelity::zero(), env, 20, noisy, 99);
    auto t2 = rollout(sim, zero_policy(2), sim.nominal_params(),
                      ResidualFidelity::zero(), env, 20, noisy, 99);
    REQUIRE(t1.states == t2.states);
    REQUIRE(t1.actions == t2.actions);
  }

  SECTION("equal wheel commands drive straight") {
    PolicyFn forward = [](const Vec&, const Vec&) {
      return Vec(Vec::Constant(2, 0.6));
    };
    auto traj = rollout(sim, forward, sim.nominal_params(),
                        ResidualFidelity::zero(), env, 50, none, 3);
    for (Eigen::Index t = 0; t <= 50; ++t)
      REQUIRE(std::abs(traj.states(t, 2)) < 1e-9);
    REQUIRE(traj.states(50, 0) > 0.1);  // actually moved forward
  }

  SECTION("out-of-range policy output is clamped and counted") {
    PolicyFn wild = [](const Vec&, const Vec&) {
      return Vec(Vec::Constant(2, 1.7));
    };
    auto traj = rollout(sim, wild, sim.nominal_params(),
                        ResidualFidelity::zero(), env, 5, none, 3);
    REQUIRE(traj.clamp_warnings == 10);
    REQUIRE(traj.actions.maxCoeff() == 1.0);
  }
}

TEST_CASE("diffdrive: broken-axle monotonicity") {
  DiffDriveSim sim;
  EnvGrid flat = make_terrain(TerrainKind::Flat, 16, 16, 0.1, 0.0, 0);
  NoiseSpec none;
  PolicyFn forward = [](const Vec&, const Vec&) {
    return Vec(Vec::Constant(2, 0.8));
  };

  // Net forward impulse strictly decreases as the left gain drops.
  double prev_v = std::numeric_limits<double>::infinity();
  for (double gain : {10.0, 6.0, 3.0, 0.0}) {
    Vec psi = sim.nominal_params();
    psi[1] = gain;
    auto traj = rollout(sim, forward, psi, ResidualFidelity::zero(), flat, 30,
                        none, 5);
    double v_final = traj.states(30, 3);
    REQUIRE(v_final < prev_v);
    prev_v = v_final;
  }

  // Dead left axle: symmetric command produces a heading drift.
  Vec dead = sim.nominal_params();
  dead[1] = 0.0;
  auto traj = rollout(sim, forward, dead, ResidualFidelity::zero(), flat, 30,
                      none, 5);
  REQUIRE(std::abs(traj.states(30, 2)) > 0.05);
}

TEST_CASE("lingauss conjugacy: simulated increments match the oracle") {
  // Monte-Carlo check that step noise matches the likelihood the oracle
  // assumes: increments y = psi*dt + eps with eps ~ N(0, sigma^2).
  LinGaussSim sim(2, 0.02);
  EnvGrid env = make_terrain(TerrainKind::Flat, 4, 4, 0.1, 0.0, 0);
  NoiseSpec noisy;
  noisy.process_std = Vec::Constant(2, 0.01);
  Vec psi(2);
  psi << 1.0, -2.0;

  std::vector<double> inc0, inc1;
  for (int e = 0; e < 200; ++e) {
    auto traj = rollout(sim, zero_policy(1), psi, ResidualFidelity::zero(),
                        env, 20, noisy, 1000 + e);
    for (int t = 0; t < 20; ++t) {
      inc0.push_back(traj.states(t + 1, 0) - traj.states(t, 0));
      inc1.push_back(traj.states(t + 1, 1) - traj.states(t, 1));
    }
  }
  REQUIRE(test::mean_of(inc0) == Approx(0.02 * 1.0).margin(3 * 0.01 / 63.0));
  REQUIRE(test::mean_of(inc1) == Approx(0.02 * -2.0).margin(3 * 0.01 / 63.0));
  REQUIRE(test::std_of(inc0) == Approx(0.01).epsilon(0.05));
  REQUIRE(test::std_of(inc1) == Approx(0.01).epsilon(0.05));
}

TEST_CASE("simulator registry") {
  REQUIRE(make_simulator("lingauss")->id() == "lingauss");
  REQUIRE(make_simulator("diffdrive")->id() == "diffdrive");
  REQUIRE_THROWS_AS(make_simulator("hovercraft"), DomainError);
}

TEST_CASE("dataset serialization round trip") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "nfcal_test_dataset";
  fs::remove_all(dir);
  ensure_dir(dir);

  DiffDriveSim sim;
  EnvGrid env = make_terrain(TerrainKind::Rough, 16, 16, 0.1, 0.2, 12);
  NoiseSpec noisy;
  noisy.process_std = Vec::Constant(5, 0.01);

  std::vector<DatasetRecord> recs;
  {
    DatasetWriter w(dir, "dataset", "deadbeef");
    for (int e = 0; e < 3; ++e) {
      DatasetRecord rec;
      rec.episode = e;
      rec.traj = rollout(sim, zero_policy(2), sim.nominal_params(),
                         ResidualFidelity::zero(), env, 10, noisy, 50 + e);
      rec.psi = sim.nominal_params();
      rec.delta_s = Vec::Constant(5, 0.01);
      rec.delta_e = Mat::Constant(4, 4, -0.02);
      rec.anomalous = (e == 2);
      recs.push_back(rec);
      w.append(rec);
    }
    REQUIRE(w.count() == 3);
  }

  auto loaded = read_dataset(dir, "dataset");
  REQUIRE(loaded.size() == 3);
  for (int e = 0; e < 3; ++e) {
    // Blob storage is float32, so round-trip accuracy is ~1e-7 relative.
    REQUIRE((loaded[e].traj.states - recs[e].traj.states)
                .cwiseAbs()
                .maxCoeff() < 1e-5);
    REQUIRE((loaded[e].traj.actions - recs[e].traj.actions)
                .cwiseAbs()
                .maxCoeff() < 1e-6);
    REQUIRE((loaded[e].traj.env.heights - recs[e].traj.env.heights)
                .cwiseAbs()
                .maxCoeff() < 1e-6);
    REQUIRE(loaded[e].anomalous == recs[e].anomalous);
    REQUIRE(loaded[e].delta_e.rows() == 4);
  }
  REQUIRE_THROWS_AS(read_dataset(dir, "missing"), MissingArtifact);
  fs::remove_all(dir);
}

TEST_CASE("csv escaping follows the quoting rules") {
  REQUIRE(csv_escape("plain") == "plain");
  REQUIRE(csv_escape("a,b") == "\"a,b\"");
  REQUIRE(csv_escape("say \"hi\"") == "\"say \"\"hi\"\"\"");
  REQUIRE(csv_escape("line\nbreak") == "\"line\nbreak\"");
}
