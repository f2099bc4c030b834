#pragma once

// Linear-Gaussian test simulator: s' = s + Phi(s, a) psi dt with identity
// basis. Its posterior under a Gaussian prior has a closed conjugate form,
// which makes it the reference system for validating inference code.

#include "nfc/sim.hpp"

namespace nfc {

class LinGaussSim final : public Simulator {
 public:
  explicit LinGaussSim(int dim = 3, double dt = 0.02) : dim_(dim), dt_(dt) {
    require(dim >= 1, "LinGaussSim: dim must be >= 1");
    require(dt > 0.0, "LinGaussSim: dt must be positive");
    space_.names.reserve(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i)
      space_.names.push_back("drift_" + std::to_string(i));
    space_.lower = Vec::Constant(dim, -6.0);
    space_.upper = Vec::Constant(dim, 6.0);
  }

  const std::string& id() const override { return id_; }
  int state_dim() const override { return dim_; }
  int action_dim() const override { return 1; }  // accepted, ignored
  double dt() const override { return dt_; }
  int default_window() const override { return 20; }
  const ParamSpace& param_space() const override { return space_; }
  Vec nominal_params() const override { return Vec::Zero(dim_); }

  Vec calibrated_step(const Vec& psi, const Vec& state, const Vec& /*action*/,
                      const EnvGrid& /*env*/) const override {
    return state + dt_ * psi;
  }

 private:
  int dim_;
  double dt_;
  ParamSpace space_;
  std::string id_ = "lingauss";
};

}  // namespace nfc
