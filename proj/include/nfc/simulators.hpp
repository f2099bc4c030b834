#pragma once

// Simulator registry.

#include "nfc/sim_diffdrive.hpp"
#include "nfc/sim_lingauss.hpp"

#include <memory>
#include <string>

namespace nfc {

inline std::unique_ptr<Simulator> make_simulator(const std::string& sim_id,
                                                 int lingauss_dim = 3) {
  if (sim_id == "lingauss") return std::make_unique<LinGaussSim>(lingauss_dim);
  if (sim_id == "diffdrive") return std::make_unique<DiffDriveSim>();
  throw DomainError("unknown simulator id: " + sim_id);
}

}  // namespace nfc
