#pragma once

// Classic (binarized) trabecular micro-structural parameters.

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bonegan/error.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::morphometry {

using volcore::DensityVolume;

inline constexpr double kDefaultThreshold = 225.0;  // mg/cm^3

struct Threshold {
  double t = kDefaultThreshold;

  void validate() const {
    if (!std::isfinite(t)) throw InvalidInput("threshold must be finite");
  }
  // Heaviside with H(0) = 1: a voxel exactly at the threshold is bone.
  bool is_bone(double v) const { return v >= t; }
};

// Seven reported parameters. TMD is absent when no voxel reaches the
// threshold; MIL/Tb.Sp/Tb.Th are absent when there is no bone at all.
struct ParamVector {
  double bmd = 0;                  // mg/cm^3
  double bmd_sd = 0;               // mg/cm^3
  double bvtv = 0;                 // ratio
  std::optional<double> tmd;       // mg/cm^3
  std::optional<double> mil;       // mm
  std::optional<double> tb_sp;     // mm
  std::optional<double> tb_th;     // um

  static constexpr std::array<const char*, 7> kNames = {"bmd", "bmd_sd", "bvtv", "tmd",
                                                        "mil", "tb_sp", "tb_th"};
  static constexpr std::array<const char*, 7> kUnits = {"mg/cm3", "mg/cm3", "1", "mg/cm3",
                                                        "mm", "mm", "um"};

  // Fixed column order: bmd, bmd_sd, bvtv, tmd, mil, tb_sp, tb_th.
  std::array<std::optional<double>, 7> as_array() const {
    return {bmd, bmd_sd, bvtv, tmd, mil, tb_sp, tb_th};
  }
};

inline int parameter_index(const std::string& name) {
  for (int i = 0; i < 7; ++i)
    if (name == ParamVector::kNames[i]) return i;
  throw InvalidInput("unknown micro-structural parameter '" + name + "'");
}

namespace detail {
inline void require_nonempty(const DensityVolume& v, std::size_t min_count = 1) {
  if (v.size() < min_count)
    throw InvalidInput("volume needs at least " + std::to_string(min_count) + " voxels");
}
}  // namespace detail

inline double bmd(const DensityVolume& v) {
  detail::require_nonempty(v);
  double sum = 0.0;
  for (float x : v.values()) sum += x;
  return sum / static_cast<double>(v.size());
}

// Sample standard deviation in the sum / sum-of-squares form. Data are
// shifted by the first voxel before accumulating, which leaves the value
// unchanged but removes cancellation for near-constant volumes.
inline double bmd_sd(const DensityVolume& v) {
  detail::require_nonempty(v, 2);
  const auto vals = v.values();
  const double shift = vals[0];
  double s1 = 0.0, s2 = 0.0;
  for (float x : vals) {
    const double d = x - shift;
    s1 += d;
    s2 += d * d;
  }
  const double n = static_cast<double>(vals.size());
  return std::sqrt(std::max(0.0, (s2 - s1 * s1 / n) / (n - 1.0)));
}

inline double bvtv(const DensityVolume& v, Threshold th = {}) {
  detail::require_nonempty(v);
  th.validate();
  std::size_t bone = 0;
  for (float x : v.values()) bone += th.is_bone(x);
  return static_cast<double>(bone) / static_cast<double>(v.size());
}

inline double tmd(const DensityVolume& v, Threshold th = {}) {
  detail::require_nonempty(v);
  th.validate();
  double sum = 0.0;
  std::size_t bone = 0;
  for (float x : v.values())
    if (th.is_bone(x)) {
      sum += x;
      ++bone;
    }
  if (bone == 0)
    throw UndefinedStatistic("empty segmentation: no voxel >= " + std::to_string(th.t) + " mg/cm3");
  return sum / static_cast<double>(bone);
}

// Integer step direction for line casting.
using Direction = std::array<int, 3>;

// Axis directions plus the four body diagonals; closed (up to sign) under
// the 16 axis-aligned transforms that keep z vertical.
inline std::vector<Direction> default_mil_directions() {
  return {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}, {1, 1, -1}, {1, -1, 1}, {-1, 1, 1}};
}

struct MilResult {
  double mean_mm = 0;
  std::vector<double> per_direction_mm;  // infinite where a direction saw no segment
  std::vector<std::size_t> segments;
};

// Mean intercept length. For each direction, every voxel lies on exactly one
// digital line (start where the previous step leaves the box), so the total
// test-line length is n * |d| * voxel size. A segment is a maximal run of bone
// voxels along a line; runs touching the boundary count.
inline MilResult mil_detail(const DensityVolume& v, Threshold th = {},
                            const std::vector<Direction>& directions = default_mil_directions()) {
  detail::require_nonempty(v);
  th.validate();
  if (directions.empty()) throw InvalidInput("MIL needs at least one direction");
  const auto& d = v.dims();
  const long nx = static_cast<long>(d.nx), ny = static_cast<long>(d.ny), nz = static_cast<long>(d.nz);
  std::vector<std::uint8_t> bone(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) bone[i] = th.is_bone(v.values()[i]);
  auto inside = [&](long x, long y, long z) {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  };

  MilResult r;
  std::size_t total_segments = 0;
  for (const auto& dir : directions) {
    if (dir[0] == 0 && dir[1] == 0 && dir[2] == 0) throw InvalidInput("MIL direction must be nonzero");
    std::size_t segs = 0;
    for (long z = 0; z < nz; ++z)
      for (long y = 0; y < ny; ++y)
        for (long x = 0; x < nx; ++x) {
          if (inside(x - dir[0], y - dir[1], z - dir[2])) continue;  // not a line start
          bool prev = false;
          for (long px = x, py = y, pz = z; inside(px, py, pz); px += dir[0], py += dir[1], pz += dir[2]) {
            const bool b = bone[static_cast<std::size_t>(px + nx * (py + ny * pz))];
            if (b && !prev) ++segs;
            prev = b;
          }
        }
    const double step = std::sqrt(static_cast<double>(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]));
    const double length_mm = static_cast<double>(v.size()) * step * v.voxel_size_mm();
    r.segments.push_back(segs);
    r.per_direction_mm.push_back(segs ? length_mm / static_cast<double>(segs)
                                      : std::numeric_limits<double>::infinity());
    total_segments += segs;
  }
  if (total_segments == 0) throw UndefinedStatistic("no structure: zero intersections in every direction");
  double sum = 0.0;
  for (double m : r.per_direction_mm) sum += m;
  r.mean_mm = sum / static_cast<double>(directions.size());
  return r;
}

inline double mil(const DensityVolume& v, Threshold th = {},
                  const std::vector<Direction>& directions = default_mil_directions()) {
  return mil_detail(v, th, directions).mean_mm;
}

struct PlateModel {
  double tb_th_um;
  double tb_sp_mm;
};

// Parallel-plate model: Tb.Th = MIL * BV/TV, Tb.Sp = MIL * (1 - BV/TV).
inline PlateModel plate_model(double mil_mm, double bvtv_ratio) {
  if (!(mil_mm >= 0.0) || !std::isfinite(mil_mm)) throw InvalidInput("MIL must be finite and >= 0");
  if (!(bvtv_ratio >= 0.0 && bvtv_ratio <= 1.0)) throw InvalidInput("BV/TV must lie in [0,1]");
  return {mil_mm * bvtv_ratio * 1000.0, mil_mm * (1.0 - bvtv_ratio)};
}

struct MorphometryOptions {
  Threshold threshold;
  std::vector<Direction> directions = default_mil_directions();
};

inline ParamVector compute_all(const DensityVolume& v, const MorphometryOptions& opts = {}) {
  detail::require_nonempty(v, 2);
  opts.threshold.validate();
  ParamVector p;
  p.bmd = bmd(v);
  p.bmd_sd = bmd_sd(v);
  std::size_t bone = 0;
  double bone_sum = 0.0;
  for (float x : v.values())
    if (opts.threshold.is_bone(x)) {
      ++bone;
      bone_sum += x;
    }
  p.bvtv = static_cast<double>(bone) / static_cast<double>(v.size());
  if (bone > 0) {
    p.tmd = bone_sum / static_cast<double>(bone);
    p.mil = mil(v, opts.threshold, opts.directions);
    const auto pm = plate_model(*p.mil, p.bvtv);
    p.tb_th = pm.tb_th_um;
    p.tb_sp = pm.tb_sp_mm;
  }
  return p;
}

inline ParamVector compute_all(const DensityVolume& v, Threshold th) {
  MorphometryOptions o;
  o.threshold = th;
  return compute_all(v, o);
}

// CSV export --------------------------------------------------------------

inline std::string format_value(const std::optional<double>& v) {
  if (!v) return "NA";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}

inline void write_csv_header(std::ostream& os, Threshold th, bool with_label = true) {
  os << "# threshold_mg_cm3=" << th.t << "\n";
  if (with_label) os << "file,";
  for (int i = 0; i < 7; ++i)
    os << ParamVector::kNames[i] << "[" << ParamVector::kUnits[i] << "]" << (i < 6 ? "," : "\n");
}

inline void write_csv_row(std::ostream& os, const ParamVector& p, const std::string& label = {},
                          bool with_label = true) {
  if (with_label) os << label << ",";
  const auto a = p.as_array();
  for (int i = 0; i < 7; ++i) os << format_value(a[i]) << (i < 6 ? "," : "\n");
}

}  // namespace bonegan::morphometry
