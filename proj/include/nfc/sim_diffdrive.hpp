#pragma once

// Planar differential-drive robot on a height grid. Six calibration
// parameters cover inertia, per-wheel actuation and damping, and ground
// friction, so hardware faults such as a dead axle are points of the
// calibration space rather than separate models.

#include "nfc/sim.hpp"

#include <cmath>

namespace nfc {

class DiffDriveSim final : public Simulator {
 public:
  DiffDriveSim() {
    space_.names = {"body_mass",        "wheel_gain_left",
                    "wheel_gain_right", "wheel_damping_left",
                    "wheel_damping_right", "ground_friction"};
    space_.lower.resize(6);
    space_.upper.resize(6);
    space_.lower << 2.0, 0.0, 0.0, 0.0, 0.0, 0.05;
    space_.upper << 8.0, 20.0, 20.0, 5.0, 5.0, 1.0;
  }

  const std::string& id() const override { return id_; }
  int state_dim() const override { return 5; }  // x, y, heading, v, omega
  int action_dim() const override { return 2; }  // left/right wheel command
  double dt() const override { return 0.02; }
  int default_window() const override { return 50; }
  const ParamSpace& param_space() const override { return space_; }

  Vec nominal_params() const override {
    Vec p(6);
    p << 4.0, 10.0, 10.0, 1.0, 1.0, 0.3;
    return p;
  }

  Vec calibrated_step(const Vec& psi, const Vec& state, const Vec& action,
                      const EnvGrid& env) const override {
    const double mass = psi[0];
    const double gain_l = psi[1], gain_r = psi[2];
    const double damp_l = psi[3], damp_r = psi[4];
    const double mu = psi[5];

    const double x = state[0], y = state[1];
    double heading = wrap_angle(state[2]);
    const double v = state[3], omega = state[4];

    // Per-wheel ground speeds under rigid-body kinematics.
    const double v_l = v - 0.5 * kTrack * omega;
    const double v_r = v + 0.5 * kTrack * omega;
    const double f_l = gain_l * action[0] - damp_l * v_l;
    const double f_r = gain_r * action[1] - damp_r * v_r;

    // Terrain pitch along the heading decelerates the body going uphill.
    Eigen::Vector2d grad = env.gradient_at(x, y);
    const double slope = grad[0] * std::cos(heading) + grad[1] * std::sin(heading);
    const double a_slope = -kGravity * slope / std::sqrt(1.0 + slope * slope);

    const double inertia_z = kInertiaCoef * mass;
    const double v_dot = (f_l + f_r) / mass -
                         mu * kGravity * std::tanh(v / kSpeedEps) + a_slope;
    const double omega_dot =
        (f_r - f_l) * (0.5 * kTrack) / inertia_z - kRotDamp * omega;

    Vec next(5);
    next[0] = x + dt() * v * std::cos(heading);
    next[1] = y + dt() * v * std::sin(heading);
    next[2] = wrap_angle(heading + dt() * omega);
    next[3] = v + dt() * v_dot;
    next[4] = omega + dt() * omega_dot;
    return next;
  }

  // Wraps an angle into (-pi, pi].
  static double wrap_angle(double a) {
    double two_pi = 2.0 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    if (a <= -std::numbers::pi) a += two_pi;
    if (a > std::numbers::pi) a -= two_pi;
    return a;
  }

  static constexpr double kTrack = 0.4;        // wheel separation, m
  static constexpr double kGravity = 9.81;     // m/s^2
  static constexpr double kInertiaCoef = 0.15; // yaw inertia per kg of mass
  static constexpr double kRotDamp = 3.0;      // 1/s
  static constexpr double kSpeedEps = 0.1;     // friction smoothing, m/s

 private:
  ParamSpace space_;
  std::string id_ = "diffdrive";
};

}  // namespace nfc
