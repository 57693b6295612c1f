#pragma once

// Detector description and event record types for the toy modular LArTPC.
// Lengths are meters unless a field name says otherwise; pitches are mm.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nupix/common.hpp"

namespace nupix {

enum class ClassLabel : int { NuE_CC = 0, NuMu_CC = 1, NC = 2 };

inline constexpr int kNumClasses = 3;
inline constexpr std::array<ClassLabel, 3> kAllClasses = {ClassLabel::NuE_CC, ClassLabel::NuMu_CC,
                                                          ClassLabel::NC};

inline std::string class_name(ClassLabel c) {
  switch (c) {
    case ClassLabel::NuE_CC: return "nue_cc";
    case ClassLabel::NuMu_CC: return "numu_cc";
    case ClassLabel::NC: return "nc";
  }
  throw DomainError("invalid class label");
}

inline ClassLabel class_from_name(const std::string& name) {
  if (name == "nue_cc") return ClassLabel::NuE_CC;
  if (name == "numu_cc") return ClassLabel::NuMu_CC;
  if (name == "nc") return ClassLabel::NC;
  throw ConfigError("unknown class name: '" + name + "' (expected nue_cc, numu_cc or nc)");
}

struct DetectorGeometry {
  double extent_x = 2.0;
  double extent_y = 2.0;
  double extent_z = 7.0;
  std::vector<double> anode_x = {-0.9, -0.3, 0.3, 0.9};
  std::vector<double> cathode_x = {-0.6, 0.0, 0.6};
  // Voxel pitch (dx, dy, dz) in mm; dx is the drift axis.
  std::array<double, 3> voxel_pitch_mm = {1.0, 5.0, 5.0};
  double pixel_pitch_mm = 50.0;
  int image_size = 512;

  void validate() const {
    if (extent_x <= 0 || extent_y <= 0 || extent_z <= 0)
      throw ConfigError("detector extents must be positive");
    for (double p : voxel_pitch_mm)
      if (p <= 0) throw ConfigError("voxel pitches must be positive");
    if (pixel_pitch_mm <= 0) throw ConfigError("pixel pitch must be positive");
    if (image_size <= 0) throw ConfigError("image size must be positive");
    if (anode_x.empty()) throw ConfigError("at least one anode plane is required");
    for (double a : anode_x)
      if (std::abs(a) >= extent_x / 2 + 1e-12 && std::abs(std::abs(a) - extent_x / 2) > 1e-9)
        throw ConfigError("anode plane outside detector: x=" + std::to_string(a));
    for (double c : cathode_x)
      if (std::abs(c) > extent_x / 2 + 1e-12)
        throw ConfigError("cathode plane outside detector: x=" + std::to_string(c));
    // The pixel grid must be commensurate with the voxel grid on every axis.
    for (double p : voxel_pitch_mm) {
      const double ratio = pixel_pitch_mm / p;
      if (std::abs(ratio - std::round(ratio)) > 1e-9)
        throw ConfigError("pixel pitch must be an integer multiple of each voxel pitch");
    }
  }

  bool contains(double x, double y, double z) const {
    return std::abs(x) <= extent_x / 2 && std::abs(y) <= extent_y / 2 && std::abs(z) <= extent_z / 2;
  }

  // Voxel grid dimensions (nx, ny, nz).
  std::array<std::int64_t, 3> voxel_counts() const {
    return {static_cast<std::int64_t>(std::round(extent_x * 1000.0 / voxel_pitch_mm[0])),
            static_cast<std::int64_t>(std::round(extent_y * 1000.0 / voxel_pitch_mm[1])),
            static_cast<std::int64_t>(std::round(extent_z * 1000.0 / voxel_pitch_mm[2]))};
  }
};

// Distance from x to the closest anode plane along the drift axis.
inline double nearest_anode_distance(double x, const DetectorGeometry& geom) {
  if (std::abs(x) > geom.extent_x / 2 + 1e-12)
    throw DomainError("x=" + std::to_string(x) + " outside detector drift extent");
  double best = std::numeric_limits<double>::infinity();
  for (double a : geom.anode_x) best = std::min(best, std::abs(x - a));
  return best;
}

struct EnergyDeposit {
  double x = 0, y = 0, z = 0;  // meters
  double energy = 0;           // GeV of visible energy
};

struct Event {
  ClassLabel truth_class = ClassLabel::NC;
  double neutrino_energy = 0;  // GeV, in (0, 10]
  std::array<double, 3> vertex = {0, 0, 0};
  std::vector<EnergyDeposit> deposits;
  std::int64_t event_id = 0;
  std::uint64_t seed = 0;

  double deposited_energy() const {
    double sum = 0;
    for (const auto& d : deposits) sum += d.energy;
    return sum;
  }

  void validate(const DetectorGeometry& geom, double max_visible_fraction = 1.0) const {
    if (!(neutrino_energy > 0) || neutrino_energy > 10.0 + 1e-12)
      throw DomainError("neutrino energy must lie in (0, 10] GeV");
    for (const auto& d : deposits) {
      if (d.energy < 0) throw DomainError("deposit energy must be nonnegative");
      if (!geom.contains(d.x, d.y, d.z)) throw DomainError("deposit outside detector");
    }
    if (deposited_energy() > max_visible_fraction * neutrino_energy + 1e-9)
      throw DomainError("deposited energy exceeds the visible-energy budget");
  }
};

// Gaussian diffusion widths, mm of smearing per meter of drift to the anode.
struct DiffusionModel {
  double sigma_transverse_per_m = 1.3;
  double sigma_longitudinal_per_m = 0.9;

  void validate() const {
    if (sigma_transverse_per_m < 0 || sigma_longitudinal_per_m < 0)
      throw ConfigError("diffusion coefficients must be nonnegative");
  }
};

}  // namespace nupix
