#pragma once

// On-disk dataset layout: one binary image file per view per event plus a
// line-delimited manifest. Image format "NPXM": magic, format version u8,
// view tag u8 (0 = XZ, 1 = YZ), width u32 LE, height u32 LE, then
// width*height float32 LE intensities, row-major. The manifest carries one
// key=value record per event; doubles are printed with 17 significant digits
// so a parse/format round trip is byte-identical.

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nupix/detsim.hpp"
#include "nupix/geometry.hpp"
#include "nupix/threading.hpp"

namespace nupix {

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline constexpr char kImageMagic[4] = {'N', 'P', 'X', 'M'};
inline constexpr std::uint8_t kImageFormatVersion = 1;

inline void write_pixelmap(const std::filesystem::path& path, const PixelMap& map) {
  std::string blob;
  blob.reserve(14 + map.intensities.size() * 4);
  blob.append(kImageMagic, 4);
  blob.push_back(static_cast<char>(kImageFormatVersion));
  blob.push_back(static_cast<char>(map.view));
  detail::put_u32le(blob, static_cast<std::uint32_t>(map.width));
  detail::put_u32le(blob, static_cast<std::uint32_t>(map.height));
  for (float v : map.intensities) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail::put_u32le(blob, bits);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw FormatError("short write: " + path.string());
}

inline PixelMap read_pixelmap(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  auto fail = [&](const std::string& what, std::size_t offset) {
    throw FormatError(path.string() + ": " + what + " at offset " + std::to_string(offset));
  };
  if (buf.size() < 14) fail("truncated header", buf.size());
  if (std::memcmp(buf.data(), kImageMagic, 4) != 0) fail("bad magic", 0);
  if (buf[4] != kImageFormatVersion) fail("unsupported format version", 4);
  if (buf[5] > 1) fail("bad view tag", 5);
  PixelMap map;
  map.view = static_cast<View>(buf[5]);
  map.width = static_cast<int>(detail::get_u32le(buf.data() + 6));
  map.height = static_cast<int>(detail::get_u32le(buf.data() + 10));
  if (map.width <= 0 || map.height <= 0 || map.width > (1 << 20) || map.height > (1 << 20))
    fail("bad dimensions", 6);
  const std::size_t expected = 14 + static_cast<std::size_t>(map.width) * map.height * 4;
  if (buf.size() != expected) fail("payload size mismatch", 14);
  map.intensities.resize(static_cast<std::size_t>(map.width) * map.height);
  for (std::size_t i = 0; i < map.intensities.size(); ++i) {
    const std::uint32_t bits = detail::get_u32le(buf.data() + 14 + i * 4);
    float v;
    std::memcpy(&v, &bits, 4);
    map.intensities[i] = v;
  }
  return map;
}

struct ManifestRecord {
  std::int64_t event_id = 0;
  ClassLabel truth_class = ClassLabel::NC;
  double neutrino_energy = 0;
  std::array<double, 3> vertex = {0, 0, 0};
  std::string xz_file;
  std::string yz_file;
  double norm_scale = 1.0;
  std::uint64_t seed = 0;
};

inline std::string manifest_line(const ManifestRecord& r) {
  std::string s;
  s += "event_id=" + std::to_string(r.event_id);
  s += " class=" + class_name(r.truth_class);
  s += " energy_gev=" + detail::fmt_double(r.neutrino_energy);
  s += " vertex=" + detail::fmt_double(r.vertex[0]) + "," + detail::fmt_double(r.vertex[1]) + "," +
       detail::fmt_double(r.vertex[2]);
  s += " xz=" + r.xz_file;
  s += " yz=" + r.yz_file;
  s += " norm_scale=" + detail::fmt_double(r.norm_scale);
  s += " seed=" + std::to_string(r.seed);
  return s;
}

inline ManifestRecord parse_manifest_line(const std::string& line, int line_no = 0) {
  ManifestRecord r;
  bool saw_id = false, saw_class = false;
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) {
    throw FormatError("manifest line " + std::to_string(line_no) + ": " + what);
  };
  while (pos < line.size()) {
    const std::size_t eq = line.find('=', pos);
    if (eq == std::string::npos) fail("expected key=value near '" + line.substr(pos) + "'");
    const std::string key = line.substr(pos, eq - pos);
    std::size_t end = line.find(' ', eq + 1);
    if (end == std::string::npos) end = line.size();
    const std::string value = line.substr(eq + 1, end - eq - 1);
    if (key == "event_id") {
      r.event_id = std::stoll(value);
      saw_id = true;
    } else if (key == "class") {
      r.truth_class = class_from_name(value);
      saw_class = true;
    } else if (key == "energy_gev") {
      r.neutrino_energy = std::stod(value);
    } else if (key == "vertex") {
      const std::size_t c1 = value.find(',');
      const std::size_t c2 = value.find(',', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos) fail("bad vertex triple");
      r.vertex = {std::stod(value.substr(0, c1)), std::stod(value.substr(c1 + 1, c2 - c1 - 1)),
                  std::stod(value.substr(c2 + 1))};
    } else if (key == "xz") {
      r.xz_file = value;
    } else if (key == "yz") {
      r.yz_file = value;
    } else if (key == "norm_scale") {
      r.norm_scale = std::stod(value);
    } else if (key == "seed") {
      r.seed = std::stoull(value);
    } else {
      fail("unknown key '" + key + "'");
    }
    pos = end + (end < line.size() ? 1 : 0);
  }
  if (!saw_id || !saw_class) fail("missing required keys");
  return r;
}

struct Dataset {
  std::filesystem::path dir;
  std::vector<ManifestRecord> records;
  double norm_scale = 1.0;

  PixelMap load_xz(std::size_t i) const { return read_pixelmap(dir / records[i].xz_file); }
  PixelMap load_yz(std::size_t i) const { return read_pixelmap(dir / records[i].yz_file); }
};

// View of selected events; shares the directory, so loads still work.
inline Dataset subset_dataset(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Dataset out;
  out.dir = ds.dir;
  out.norm_scale = ds.norm_scale;
  out.records.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.records.size())
      throw DomainError("subset index " + std::to_string(i) + " out of range for " +
                        std::to_string(ds.records.size()) + " records");
    out.records.push_back(ds.records[i]);
  }
  return out;
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.dir = dir;
  const auto manifest = dir / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) throw FormatError("cannot open manifest: " + manifest.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ds.records.push_back(parse_manifest_line(line, line_no));
  }
  if (!ds.records.empty()) ds.norm_scale = ds.records.front().norm_scale;
  return ds;
}

// Deterministic class sequence matching the requested priors exactly: at each
// index the class furthest below its running quota is chosen.
inline std::vector<ClassLabel> class_assignment(std::size_t n_events,
                                                const std::vector<ClassLabel>& classes,
                                                const std::vector<double>& priors) {
  if (classes.empty() || classes.size() != priors.size())
    throw ConfigError("classes and priors must be nonempty and the same length");
  double total = 0;
  for (double p : priors) {
    if (p < 0) throw ConfigError("priors must be nonnegative");
    total += p;
  }
  if (total <= 0) throw ConfigError("priors must not sum to zero");
  std::vector<double> frac(priors.size());
  for (std::size_t k = 0; k < priors.size(); ++k) frac[k] = priors[k] / total;
  std::vector<std::size_t> used(classes.size(), 0);
  std::vector<ClassLabel> out;
  out.reserve(n_events);
  for (std::size_t i = 0; i < n_events; ++i) {
    std::size_t best = 0;
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < classes.size(); ++k) {
      const double deficit = frac[k] * static_cast<double>(i + 1) - static_cast<double>(used[k]);
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = k;
      }
    }
    ++used[best];
    out.push_back(classes[best]);
  }
  return out;
}

// Nearest-rank percentile, q in [0, 100].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DomainError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  const std::size_t rank =
      std::min(n - 1, static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n))) -
                          (q > 0 ? 1 : 0));
  return values[rank];
}

struct DatasetConfig {
  std::uint64_t seed = 1;
  std::size_t n_events = 1000;
  std::vector<ClassLabel> classes = {ClassLabel::NuE_CC, ClassLabel::NuMu_CC, ClassLabel::NC};
  std::vector<double> priors = {1.0, 1.0, 1.0};
  DetectorGeometry geometry;
  GeneratorConfig generator;
  DiffusionModel diffusion;
  std::size_t calibration_events = 1000;  // events inspected to fix norm.scale
  double calibration_percentile = 99.5;
};

struct DatasetSummary {
  std::filesystem::path dir;
  std::size_t n_events = 0;
  double norm_scale = 1.0;
};

// Fix the dataset-wide intensity scale from the first calibration_events
// events: the 99.5th percentile of nonzero raw pixel energies.
inline double calibrate_norm_scale(const DatasetConfig& cfg,
                                   const std::vector<ClassLabel>& assignment, unsigned threads) {
  const std::size_t n = std::min(cfg.calibration_events, cfg.n_events);
  std::vector<std::vector<double>> per_event(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto ev = sample_event(mix_seed(cfg.seed, i), assignment[i], cfg.generator, cfg.geometry);
    const auto grid = smear_and_voxelize(ev.deposits, cfg.diffusion, cfg.geometry);
    if (!grid.empty()) per_event[i] = raw_pixel_energies(grid, ev.vertex, cfg.geometry);
  });
  std::vector<double> energies;
  for (auto& v : per_event) energies.insert(energies.end(), v.begin(), v.end());
  if (energies.empty()) return 1.0;
  return percentile(std::move(energies), cfg.calibration_percentile);
}

// Generate the full dataset in streaming fashion: every event is produced from
// its own (seed, index)-derived stream, so output is independent of thread
// count; image files are written per event and manifest lines in index order.
inline DatasetSummary generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& dir,
                                       unsigned threads = 1) {
  cfg.geometry.validate();
  const auto assignment = class_assignment(cfg.n_events, cfg.classes, cfg.priors);
  std::filesystem::create_directories(dir);

  const double scale = calibrate_norm_scale(cfg, assignment, threads);
  const NormSettings norm{scale};

  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw FormatError("cannot open manifest for writing");

  const std::size_t batch = std::max<std::size_t>(1, 256);
  std::vector<std::string> lines(batch);
  for (std::size_t start = 0; start < cfg.n_events; start += batch) {
    const std::size_t count = std::min(batch, cfg.n_events - start);
    parallel_for(count, threads, [&](std::size_t j) {
      const std::size_t i = start + j;
      const std::uint64_t ev_seed = mix_seed(cfg.seed, i);
      const auto ev = sample_event(ev_seed, assignment[i], cfg.generator, cfg.geometry);
      const auto grid = smear_and_voxelize(ev.deposits, cfg.diffusion, cfg.geometry);
      const auto [xz, yz] = render_views(grid, ev.vertex, cfg.geometry, norm);
      char base[32];
      std::snprintf(base, sizeof base, "ev%08lld", static_cast<long long>(i));
      ManifestRecord rec;
      rec.event_id = static_cast<std::int64_t>(i);
      rec.truth_class = ev.truth_class;
      rec.neutrino_energy = ev.neutrino_energy;
      rec.vertex = ev.vertex;
      rec.xz_file = std::string(base) + "_xz.npxm";
      rec.yz_file = std::string(base) + "_yz.npxm";
      rec.norm_scale = scale;
      rec.seed = ev_seed;
      write_pixelmap(dir / rec.xz_file, xz);
      write_pixelmap(dir / rec.yz_file, yz);
      lines[j] = manifest_line(rec);
    });
    for (std::size_t j = 0; j < count; ++j) manifest << lines[j] << "\n";
  }
  manifest.flush();
  if (!manifest) throw FormatError("manifest write failed");
  return {dir, cfg.n_events, scale};
}

// Convenience for tests: materialize events+maps, then write them out.
inline DatasetSummary write_dataset(
    const std::vector<std::pair<Event, std::pair<PixelMap, PixelMap>>>& events, double norm_scale,
    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw FormatError("cannot open manifest for writing");
  for (const auto& [ev, maps] : events) {
    char base[32];
    std::snprintf(base, sizeof base, "ev%08lld", static_cast<long long>(ev.event_id));
    ManifestRecord rec;
    rec.event_id = ev.event_id;
    rec.truth_class = ev.truth_class;
    rec.neutrino_energy = ev.neutrino_energy;
    rec.vertex = ev.vertex;
    rec.xz_file = std::string(base) + "_xz.npxm";
    rec.yz_file = std::string(base) + "_yz.npxm";
    rec.norm_scale = norm_scale;
    rec.seed = ev.seed;
    write_pixelmap(dir / rec.xz_file, maps.first);
    write_pixelmap(dir / rec.yz_file, maps.second);
    manifest << manifest_line(rec) << "\n";
  }
  return {dir, events.size(), norm_scale};
}

}  // namespace nupix
