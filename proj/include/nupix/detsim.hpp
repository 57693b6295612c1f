#pragma once

// Toy event generator, drift-diffusion smearing, voxelization and dual-view
// pixel-map rendering. The generator replaces a full physics chain with three
// parameterized topologies: a long minimum-ionizing track plus vertex activity
// (numu_cc), an electromagnetic shower plus vertex activity (nue_cc), and
// hadronic-only activity (nc).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nupix/geometry.hpp"
#include "nupix/rng.hpp"

namespace nupix {

struct GeneratorConfig {
  // Fraction of the detector half-extent kept clear when sampling vertices.
  double vertex_margin_x = 0.3;   // meters from each x wall
  double vertex_margin_y = 0.3;   // meters from each y wall
  double vertex_z_lo = -3.0;      // vertex z range (beam enters at -z)
  double vertex_z_hi = 1.0;
  double max_visible_fraction = 1.0;   // Event invariant bound
  double visible_fraction_lo = 0.35;   // sampled visible energy fraction
  double visible_fraction_hi = 0.75;

  // Muon track primitive.
  double track_length_lo = 1.0;        // meters
  double track_length_hi = 5.0;
  double track_step = 0.005;           // deposit spacing along the track
  double track_scatter_mrad = 2.0;     // small-angle scatter per step
  double track_cos_theta_lo = 0.90;    // forward cone around +z

  // Electromagnetic shower primitive.
  double shower_rad_length = 0.14;     // meters, LAr-like
  double shower_depth_shape = 2.5;     // gamma-profile shape (radiation lengths)
  double shower_depth_scale = 1.6;     // gamma-profile scale
  double shower_max_depth_x0 = 12.0;
  double shower_radius_core = 0.02;    // meters, transverse sigma at the front
  double shower_radius_tail = 0.08;    // meters, transverse sigma at max depth
  int shower_deposits_base = 150;
  int shower_deposits_per_gev = 40;
  int shower_deposits_max = 600;

  // Hadronic vertex activity (all classes; the whole event for nc).
  int hadronic_fragments_lo = 2;
  int hadronic_fragments_hi = 5;
  double fragment_length_lo = 0.05;    // meters
  double fragment_length_hi = 0.35;
  double fragment_step = 0.01;
  int blob_deposits_lo = 10;
  int blob_deposits_hi = 30;
  double blob_sigma = 0.03;            // meters

  // Bookkeeping only: CC fraction of the underlying beam exposure.
  double charged_current_fraction = 0.74;
};

namespace detail {

struct Vec3 {
  double x, y, z;
};

inline Vec3 normalize(Vec3 v) {
  const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  return {v.x / n, v.y / n, v.z / n};
}

// Direction in a forward cone around +z: cos(theta) uniform in [cos_lo, 1].
inline Vec3 forward_direction(Rng& rng, double cos_lo) {
  const double ct = rng.uniform(cos_lo, 1.0);
  const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
  const double phi = rng.uniform(0.0, 6.283185307179586);
  return {st * std::cos(phi), st * std::sin(phi), ct};
}

inline Vec3 isotropic_direction(Rng& rng) {
  const double ct = rng.uniform(-1.0, 1.0);
  const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
  const double phi = rng.uniform(0.0, 6.283185307179586);
  return {st * std::cos(phi), st * std::sin(phi), ct};
}

// Scale the energies of deposits[first..] so they sum to exactly `total`.
inline void rescale_energy(std::vector<EnergyDeposit>& deposits, std::size_t first, double total) {
  double sum = 0;
  for (std::size_t i = first; i < deposits.size(); ++i) sum += deposits[i].energy;
  if (sum <= 0) return;
  const double k = total / sum;
  for (std::size_t i = first; i < deposits.size(); ++i) deposits[i].energy *= k;
}

inline void add_track(std::vector<EnergyDeposit>& out, Rng& rng, const GeneratorConfig& cfg,
                      const DetectorGeometry& geom, const std::array<double, 3>& vertex,
                      double energy) {
  const double half_x = geom.extent_x / 2, half_y = geom.extent_y / 2, half_z = geom.extent_z / 2;
  double length = 0;
  Vec3 dir{0, 0, 1};
  bool found = false;
  // Joint rejection on (length, direction) keeps the full track inside the
  // detector, so the deposit chain length equals the sampled track length.
  for (int attempt = 0; attempt < 100 && !found; ++attempt) {
    length = rng.uniform(cfg.track_length_lo, cfg.track_length_hi);
    dir = forward_direction(rng, cfg.track_cos_theta_lo);
    const double margin = 0.02;
    const double ex = vertex[0] + dir.x * length;
    const double ey = vertex[1] + dir.y * length;
    const double ez = vertex[2] + dir.z * length;
    found = std::abs(ex) < half_x - margin && std::abs(ey) < half_y - margin &&
            std::abs(ez) < half_z - margin;
  }
  if (!found) {
    length = cfg.track_length_lo;
    dir = {0, 0, 1};  // straight downstream always fits from the vertex box
  }

  const std::size_t first = out.size();
  Vec3 pos{vertex[0], vertex[1], vertex[2]};
  Vec3 d = dir;
  const double scatter = cfg.track_scatter_mrad * 1e-3;
  const int steps = std::max(1, static_cast<int>(std::floor(length / cfg.track_step)));
  for (int i = 0; i < steps; ++i) {
    pos = {pos.x + d.x * cfg.track_step, pos.y + d.y * cfg.track_step,
           pos.z + d.z * cfg.track_step};
    // Multiple-scattering wiggle; renormalized so the step size stays fixed.
    d = normalize({d.x + rng.gauss(0, scatter), d.y + rng.gauss(0, scatter),
                   d.z + rng.gauss(0, scatter)});
    if (!geom.contains(pos.x, pos.y, pos.z)) break;  // particle exits
    const double de = std::max(0.05, 1.0 + 0.1 * rng.gauss());
    out.push_back({pos.x, pos.y, pos.z, de});
  }
  rescale_energy(out, first, energy);
}

inline void add_shower(std::vector<EnergyDeposit>& out, Rng& rng, const GeneratorConfig& cfg,
                       const DetectorGeometry& geom, const std::array<double, 3>& vertex,
                       double energy, double nu_energy) {
  const std::size_t first = out.size();
  const Vec3 axis = forward_direction(rng, cfg.track_cos_theta_lo);
  // Orthonormal frame around the shower axis.
  const Vec3 ref = std::abs(axis.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
  Vec3 u = normalize({axis.y * ref.z - axis.z * ref.y, axis.z * ref.x - axis.x * ref.z,
                      axis.x * ref.y - axis.y * ref.x});
  Vec3 v = {axis.y * u.z - axis.z * u.y, axis.z * u.x - axis.x * u.z, axis.x * u.y - axis.y * u.x};

  const int n = std::min(cfg.shower_deposits_max,
                         cfg.shower_deposits_base +
                             static_cast<int>(cfg.shower_deposits_per_gev * nu_energy));
  for (int i = 0; i < n; ++i) {
    // Longitudinal profile ~ Gamma(shape, scale) in radiation lengths.
    double t = rng.gamma(cfg.shower_depth_shape, cfg.shower_depth_scale);
    t = std::min(t, cfg.shower_max_depth_x0);
    const double depth = t * cfg.shower_rad_length;
    const double frac = t / cfg.shower_max_depth_x0;
    const double sigma_r = cfg.shower_radius_core + (cfg.shower_radius_tail - cfg.shower_radius_core) * frac;
    const double r1 = rng.gauss(0, sigma_r);
    const double r2 = rng.gauss(0, sigma_r);
    const double px = vertex[0] + axis.x * depth + u.x * r1 + v.x * r2;
    const double py = vertex[1] + axis.y * depth + u.y * r1 + v.y * r2;
    const double pz = vertex[2] + axis.z * depth + u.z * r1 + v.z * r2;
    const double de = std::max(0.05, 1.0 + 0.3 * rng.gauss());
    if (geom.contains(px, py, pz)) out.push_back({px, py, pz, de});
  }
  rescale_energy(out, first, energy);
}

inline void add_hadronic(std::vector<EnergyDeposit>& out, Rng& rng, const GeneratorConfig& cfg,
                         const DetectorGeometry& geom, const std::array<double, 3>& vertex,
                         double energy) {
  const std::size_t first = out.size();
  const int nfrag =
      static_cast<int>(rng.uniform_int(cfg.hadronic_fragments_lo, cfg.hadronic_fragments_hi));
  for (int f = 0; f < nfrag; ++f) {
    Vec3 dir = isotropic_direction(rng);
    dir.z = dir.z * 0.7 + 0.3;  // mild forward bias
    dir = normalize(dir);
    const double length = rng.uniform(cfg.fragment_length_lo, cfg.fragment_length_hi);
    const int steps = std::max(1, static_cast<int>(std::floor(length / cfg.fragment_step)));
    for (int i = 1; i <= steps; ++i) {
      const double s = i * cfg.fragment_step;
      const double px = vertex[0] + dir.x * s;
      const double py = vertex[1] + dir.y * s;
      const double pz = vertex[2] + dir.z * s;
      if (!geom.contains(px, py, pz)) break;
      out.push_back({px, py, pz, std::max(0.05, 1.0 + 0.2 * rng.gauss())});
    }
  }
  const int nblob = static_cast<int>(rng.uniform_int(cfg.blob_deposits_lo, cfg.blob_deposits_hi));
  for (int i = 0; i < nblob; ++i) {
    const double px = vertex[0] + rng.gauss(0, cfg.blob_sigma);
    const double py = vertex[1] + rng.gauss(0, cfg.blob_sigma);
    const double pz = vertex[2] + rng.gauss(0, cfg.blob_sigma);
    if (geom.contains(px, py, pz)) out.push_back({px, py, pz, std::max(0.05, 1.0 + 0.2 * rng.gauss())});
  }
  if (out.size() == first) out.push_back({vertex[0], vertex[1], vertex[2], 1.0});
  rescale_energy(out, first, energy);
}

}  // namespace detail

// Deterministic per-event generation: identical (seed, class, config, geometry)
// always produces an identical Event.
inline Event sample_event(std::uint64_t seed, ClassLabel truth_class, const GeneratorConfig& cfg,
                          const DetectorGeometry& geom) {
  Rng rng(seed);
  Event ev;
  ev.truth_class = truth_class;
  ev.seed = seed;
  ev.neutrino_energy = 10.0 * (1.0 - rng.uniform());  // uniform in (0, 10]

  const double half_x = geom.extent_x / 2, half_y = geom.extent_y / 2;
  ev.vertex = {rng.uniform(-half_x + cfg.vertex_margin_x, half_x - cfg.vertex_margin_x),
               rng.uniform(-half_y + cfg.vertex_margin_y, half_y - cfg.vertex_margin_y),
               rng.uniform(cfg.vertex_z_lo, cfg.vertex_z_hi)};

  const double visible =
      ev.neutrino_energy * rng.uniform(cfg.visible_fraction_lo, cfg.visible_fraction_hi);

  switch (truth_class) {
    case ClassLabel::NuMu_CC: {
      const double track_frac = rng.uniform(0.6, 0.8);
      detail::add_track(ev.deposits, rng, cfg, geom, ev.vertex, visible * track_frac);
      detail::add_hadronic(ev.deposits, rng, cfg, geom, ev.vertex, visible * (1 - track_frac));
      break;
    }
    case ClassLabel::NuE_CC: {
      const double shower_frac = rng.uniform(0.6, 0.8);
      detail::add_shower(ev.deposits, rng, cfg, geom, ev.vertex, visible * shower_frac,
                         ev.neutrino_energy);
      detail::add_hadronic(ev.deposits, rng, cfg, geom, ev.vertex, visible * (1 - shower_frac));
      break;
    }
    case ClassLabel::NC: {
      detail::add_hadronic(ev.deposits, rng, cfg, geom, ev.vertex, visible);
      break;
    }
  }
  ev.validate(geom, cfg.max_visible_fraction);
  return ev;
}

// Sparse voxel grid: (ix, iy, iz) packed into one key, 21 bits per axis.
class VoxelGrid {
 public:
  static std::uint64_t pack(std::int64_t ix, std::int64_t iy, std::int64_t iz) {
    return (static_cast<std::uint64_t>(ix) << 42) | (static_cast<std::uint64_t>(iy) << 21) |
           static_cast<std::uint64_t>(iz);
  }
  static std::array<std::int64_t, 3> unpack(std::uint64_t key) {
    return {static_cast<std::int64_t>(key >> 42), static_cast<std::int64_t>((key >> 21) & 0x1fffff),
            static_cast<std::int64_t>(key & 0x1fffff)};
  }

  void add(std::int64_t ix, std::int64_t iy, std::int64_t iz, double energy) {
    if (energy > 0) cells_[pack(ix, iy, iz)] += energy;
  }

  double total_energy() const {
    double sum = 0;
    for (const auto& [k, e] : cells_) sum += e;
    return sum;
  }

  std::size_t size() const { return cells_.size(); }
  bool empty() const { return cells_.empty(); }
  const std::unordered_map<std::uint64_t, double>& cells() const { return cells_; }

 private:
  std::unordered_map<std::uint64_t, double> cells_;
};

namespace detail {

inline double gauss_cdf(double x, double mu, double sigma) {
  return 0.5 * std::erfc(-(x - mu) / (sigma * 1.4142135623730951));
}

// Per-axis weights of a Gaussian truncated at +-4 sigma, integrated over the
// voxel bins it overlaps. Weights sum to 1; bins outside [0, nbins) keep their
// weight but are dropped by the caller (clipping is deliberately lossy).
struct AxisSplat {
  std::vector<std::pair<std::int64_t, double>> bins;
};

inline AxisSplat splat_axis(double coord, double half_extent, double pitch_m, std::int64_t nbins,
                            double sigma_m) {
  AxisSplat out;
  const double shifted = coord + half_extent;
  if (sigma_m <= 0) {
    std::int64_t idx = static_cast<std::int64_t>(std::floor(shifted / pitch_m));
    idx = std::clamp<std::int64_t>(idx, 0, nbins - 1);  // boundary deposits land in the edge bin
    out.bins.push_back({idx, 1.0});
    return out;
  }
  const double lo = shifted - 4.0 * sigma_m;
  const double hi = shifted + 4.0 * sigma_m;
  const std::int64_t ilo = static_cast<std::int64_t>(std::floor(lo / pitch_m));
  const std::int64_t ihi = static_cast<std::int64_t>(std::floor(hi / pitch_m));
  const double norm = gauss_cdf(hi, shifted, sigma_m) - gauss_cdf(lo, shifted, sigma_m);
  for (std::int64_t i = ilo; i <= ihi; ++i) {
    const double a = std::max(lo, i * pitch_m);
    const double b = std::min(hi, (i + 1) * pitch_m);
    if (b <= a) continue;
    const double w = (gauss_cdf(b, shifted, sigma_m) - gauss_cdf(a, shifted, sigma_m)) / norm;
    if (w > 0) out.bins.push_back({i, w});
  }
  return out;
}

}  // namespace detail

// Distribute each deposit's energy over voxels with an analytic Gaussian splat
// whose widths grow linearly with the drift distance to the nearest anode.
// The drift axis x takes the longitudinal width; y and z the transverse width.
inline VoxelGrid smear_and_voxelize(const std::vector<EnergyDeposit>& deposits,
                                    const DiffusionModel& model, const DetectorGeometry& geom) {
  model.validate();
  const auto counts = geom.voxel_counts();
  VoxelGrid grid;
  for (const auto& dep : deposits) {
    const double drift = nearest_anode_distance(dep.x, geom);
    const double sigma_x = model.sigma_longitudinal_per_m * drift * 1e-3;  // mm/m * m -> mm -> m
    const double sigma_yz = model.sigma_transverse_per_m * drift * 1e-3;
    const auto sx = detail::splat_axis(dep.x, geom.extent_x / 2, geom.voxel_pitch_mm[0] * 1e-3,
                                       counts[0], sigma_x);
    const auto sy = detail::splat_axis(dep.y, geom.extent_y / 2, geom.voxel_pitch_mm[1] * 1e-3,
                                       counts[1], sigma_yz);
    const auto sz = detail::splat_axis(dep.z, geom.extent_z / 2, geom.voxel_pitch_mm[2] * 1e-3,
                                       counts[2], sigma_yz);
    for (const auto& [ix, wx] : sx.bins) {
      if (ix < 0 || ix >= counts[0]) continue;
      for (const auto& [iy, wy] : sy.bins) {
        if (iy < 0 || iy >= counts[1]) continue;
        const double wxy = wx * wy;
        for (const auto& [iz, wz] : sz.bins) {
          if (iz < 0 || iz >= counts[2]) continue;
          grid.add(ix, iy, iz, dep.energy * wxy * wz);
        }
      }
    }
  }
  return grid;
}

enum class View : std::uint8_t { XZ = 0, YZ = 1 };

inline std::string view_name(View v) { return v == View::XZ ? "xz" : "yz"; }

struct PixelMap {
  View view = View::XZ;
  int width = 0;
  int height = 0;
  std::vector<float> intensities;  // row-major, values in [0, 1]
  double raw_energy_total = 0;     // in-window energy before normalization

  float at(int row, int col) const { return intensities[static_cast<size_t>(row) * width + col]; }
};

struct NormSettings {
  double scale = 1.0;  // pixel energy mapped to intensity 1.0 (clipped above)
};

namespace detail {

// Axis pixel index shared by the voxel and pixel grids (both anchored at
// -extent/2). Uses the voxel center so commensurate grids map exactly.
inline std::int64_t voxel_to_pixel(std::int64_t voxel_idx, double voxel_pitch_mm,
                                   double pixel_pitch_mm) {
  const double center_mm = (static_cast<double>(voxel_idx) + 0.5) * voxel_pitch_mm;
  return static_cast<std::int64_t>(std::floor(center_mm / pixel_pitch_mm));
}

inline std::int64_t coord_to_pixel(double coord, double half_extent, double pixel_pitch_mm) {
  return static_cast<std::int64_t>(std::floor((coord + half_extent) * 1000.0 / pixel_pitch_mm));
}

}  // namespace detail

namespace detail {

// Unnormalized per-view pixel energy windows.
inline std::pair<std::vector<double>, std::vector<double>> render_raw(
    const VoxelGrid& grid, const std::array<double, 3>& vertex, const DetectorGeometry& geom) {
  if (grid.empty()) throw DomainError("cannot render an empty voxel grid");
  const int size = geom.image_size;
  const double pp = geom.pixel_pitch_mm;

  const std::int64_t vx = coord_to_pixel(vertex[0], geom.extent_x / 2, pp);
  const std::int64_t vy = coord_to_pixel(vertex[1], geom.extent_y / 2, pp);
  const std::int64_t vz = coord_to_pixel(vertex[2], geom.extent_z / 2, pp);
  const std::int64_t row0_xz = vx - size / 2;
  const std::int64_t row0_yz = vy - size / 2;
  const std::int64_t col0 = vz - size / 2;

  std::vector<double> raw_xz(static_cast<size_t>(size) * size, 0.0);
  std::vector<double> raw_yz(static_cast<size_t>(size) * size, 0.0);

  for (const auto& [key, energy] : grid.cells()) {
    const auto [ix, iy, iz] = VoxelGrid::unpack(key);
    const std::int64_t px = voxel_to_pixel(ix, geom.voxel_pitch_mm[0], pp);
    const std::int64_t py = voxel_to_pixel(iy, geom.voxel_pitch_mm[1], pp);
    const std::int64_t pz = voxel_to_pixel(iz, geom.voxel_pitch_mm[2], pp);
    const std::int64_t col = pz - col0;
    if (col >= 0 && col < size) {
      const std::int64_t row_x = px - row0_xz;
      if (row_x >= 0 && row_x < size) raw_xz[static_cast<size_t>(row_x) * size + col] += energy;
      const std::int64_t row_y = py - row0_yz;
      if (row_y >= 0 && row_y < size) raw_yz[static_cast<size_t>(row_y) * size + col] += energy;
    }
  }
  return {std::move(raw_xz), std::move(raw_yz)};
}

}  // namespace detail

// Project the voxel grid onto the XZ and YZ planes and crop an image_size
// window centered on the pixel containing the vertex. Rows run along x (XZ)
// or y (YZ); columns along z. Out-of-window energy is dropped; windows that
// extend past the detector are zero-padded.
inline std::pair<PixelMap, PixelMap> render_views(const VoxelGrid& grid,
                                                  const std::array<double, 3>& vertex,
                                                  const DetectorGeometry& geom,
                                                  const NormSettings& norm) {
  auto [raw_xz, raw_yz] = detail::render_raw(grid, vertex, geom);
  const int size = geom.image_size;
  auto finalize = [&](View view, const std::vector<double>& raw) {
    PixelMap map;
    map.view = view;
    map.width = size;
    map.height = size;
    map.intensities.resize(raw.size());
    double total = 0;
    for (size_t i = 0; i < raw.size(); ++i) {
      total += raw[i];
      map.intensities[i] = static_cast<float>(std::min(1.0, raw[i] / norm.scale));
    }
    map.raw_energy_total = total;
    return map;
  };
  return {finalize(View::XZ, raw_xz), finalize(View::YZ, raw_yz)};
}

// Nonzero unnormalized pixel energies of both views, for norm-scale calibration.
inline std::vector<double> raw_pixel_energies(const VoxelGrid& grid,
                                              const std::array<double, 3>& vertex,
                                              const DetectorGeometry& geom) {
  auto [raw_xz, raw_yz] = detail::render_raw(grid, vertex, geom);
  std::vector<double> out;
  for (double v : raw_xz)
    if (v > 0) out.push_back(v);
  for (double v : raw_yz)
    if (v > 0) out.push_back(v);
  return out;
}

}  // namespace nupix
