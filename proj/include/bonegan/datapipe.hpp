#pragma once

// Patch extraction, the 16-element axis-aligned augmentation group, corpus
// assembly and a rod-plate phantom generator.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bonegan/error.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::datapipe {

using json = nlohmann::json;
using volcore::CalibrationRange;
using volcore::DensityVolume;
using volcore::Dims;
using volcore::NormalizedPatch;

// ---------------------------------------------------------------------------
// Patch extraction

struct PatchSpec {
  std::size_t size = 32;
  std::size_t stride = 8;
  // Optional spongiosa mask with the volume's dims; nonzero = inside.
  std::optional<std::vector<std::uint8_t>> mask;

  void validate() const {
    if (size == 0) throw InvalidInput("patch size must be > 0");
    if (stride == 0) throw InvalidInput("patch stride must be > 0");
    if (stride > size) throw InvalidInput("patch stride must not exceed patch size");
  }
};

using Position = std::array<std::size_t, 3>;

inline std::size_t patches_along(std::size_t n, std::size_t size, std::size_t stride) {
  return n < size ? 0 : (n - size) / stride + 1;
}

// Grid positions, x fastest. Masked extraction keeps only patches lying
// completely inside the mask.
inline std::vector<Position> patch_positions(const DensityVolume& v, const PatchSpec& spec) {
  spec.validate();
  const Dims d = v.dims();
  for (int a = 0; a < 3; ++a)
    if (d[a] < spec.size)
      throw InvalidInput("volume " + volcore::to_string(d) + " smaller than patch size " + std::to_string(spec.size));
  if (spec.mask && spec.mask->size() != v.size()) throw InvalidInput("mask size does not match volume");
  std::vector<Position> out;
  const std::size_t s = spec.size;
  for (std::size_t z = 0; z + s <= d.nz; z += spec.stride)
    for (std::size_t y = 0; y + s <= d.ny; y += spec.stride)
      for (std::size_t x = 0; x + s <= d.nx; x += spec.stride) {
        if (spec.mask) {
          const auto& m = *spec.mask;
          bool inside = true;
          for (std::size_t k = z; k < z + s && inside; ++k)
            for (std::size_t j = y; j < y + s && inside; ++j)
              for (std::size_t i = x; i < x + s; ++i)
                if (!m[v.index(i, j, k)]) {
                  inside = false;
                  break;
                }
          if (!inside) continue;
        }
        out.push_back({x, y, z});
      }
  return out;
}

struct ExtractedPatch {
  DensityVolume patch;
  Position position;
};

inline std::vector<ExtractedPatch> extract_patches(const DensityVolume& v, const PatchSpec& spec) {
  std::vector<ExtractedPatch> out;
  for (const auto& p : patch_positions(v, spec)) out.push_back({volcore::crop_patch(v, p, spec.size), p});
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation group
//
// Element t = 8 f + 4 m + k acts on centred voxel coordinates by
//   M_t = Fz^f * Mx^m * Rz^k
// with Rz the 90 degree rotation (x, y, z) -> (-y, x, z), Mx the mirror
// x -> -x and Fz the flip z -> -z. The output satisfies out[M p] = in[p].
// Index 0 is the identity.

inline constexpr int kGroupOrder = 16;
using Matrix3 = std::array<std::array<int, 3>, 3>;

inline Matrix3 multiply(const Matrix3& a, const Matrix3& b) {
  Matrix3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Matrix3 transform_matrix(int t) {
  if (t < 0 || t >= kGroupOrder) throw InvalidInput("transform index must lie in [0,16)");
  const Matrix3 id{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  const Matrix3 rz{{{0, -1, 0}, {1, 0, 0}, {0, 0, 1}}};
  const Matrix3 mx{{{-1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  const Matrix3 fz{{{1, 0, 0}, {0, 1, 0}, {0, 0, -1}}};
  Matrix3 m = id;
  for (int i = 0; i < (t & 3); ++i) m = multiply(rz, m);
  if (t & 4) m = multiply(mx, m);
  if (t & 8) m = multiply(fz, m);
  return m;
}

// Index of a group element given its matrix; throws if not in the group.
inline int transform_index(const Matrix3& m) {
  for (int t = 0; t < kGroupOrder; ++t)
    if (transform_matrix(t) == m) return t;
  throw InvalidInput("matrix is not an element of the augmentation group");
}

// Index of "apply b, then a".
inline int compose(int a, int b) { return transform_index(multiply(transform_matrix(a), transform_matrix(b))); }

inline int inverse(int t) {
  for (int u = 0; u < kGroupOrder; ++u)
    if (compose(u, t) == 0) return u;
  throw InvalidInput("no inverse");  // unreachable for a group
}

inline std::vector<float> apply_transform(std::span<const float> in, std::size_t n, int t) {
  if (in.size() != n * n * n) throw InvalidInput("augmentation needs a cubic patch");
  const Matrix3 m = transform_matrix(t);
  const auto off = static_cast<long>(n) - 1;
  std::vector<float> out(in.size());
  // out[q] = in[M^T q] in doubled centred coordinates.
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < n; ++i) {
        const long q[3] = {2 * static_cast<long>(i) - off, 2 * static_cast<long>(j) - off,
                           2 * static_cast<long>(k) - off};
        long src[3];
        for (int r = 0; r < 3; ++r) src[r] = (m[0][r] * q[0] + m[1][r] * q[1] + m[2][r] * q[2] + off) / 2;
        out[(k * n + j) * n + i] = in[(static_cast<std::size_t>(src[2]) * n + static_cast<std::size_t>(src[1])) * n +
                                      static_cast<std::size_t>(src[0])];
      }
  return out;
}

inline DensityVolume apply_transform(const DensityVolume& v, int t) {
  if (!v.dims().is_cubic()) throw InvalidInput("augmentation needs a cubic volume, got " + volcore::to_string(v.dims()));
  return DensityVolume(v.dims(), v.voxel_size_um(), apply_transform(v.values(), v.dims().nx, t));
}

inline NormalizedPatch apply_transform(const NormalizedPatch& p, int t) {
  return NormalizedPatch(p.dims(), p.voxel_size_um(), apply_transform(p.values(), p.edge(), t)).with_provenance(
      p.provenance());
}

template <class Volume>
std::vector<Volume> augment16(const Volume& v) {
  std::vector<Volume> out;
  out.reserve(kGroupOrder);
  for (int t = 0; t < kGroupOrder; ++t) out.push_back(apply_transform(v, t));
  return out;
}

// ---------------------------------------------------------------------------
// Phantoms

using Vec3 = std::array<double, 3>;

struct PlateShape {
  Vec3 center{};
  Vec3 normal{0, 0, 1};
  double thickness = 2.0;  // voxels
  double radius = 0.0;     // in-plane disc radius in voxels; <= 0 means unbounded
  double density = 450.0;
};

struct RodShape {
  Vec3 center{};
  Vec3 direction{0, 0, 1};
  double radius = 1.0;       // voxels
  double half_length = 0.0;  // <= 0 means unbounded
  double density = 450.0;
};

struct PhantomSpec {
  Dims dims = volcore::cube(64);
  float voxel_size_um = 164.0f;
  int plates = 80;
  double plate_thickness_min = 1.0, plate_thickness_max = 1.8;
  double plate_radius_min = 6.0, plate_radius_max = 14.0;
  int rods = 400;
  double rod_radius_min = 0.6, rod_radius_max = 1.0;
  double rod_length_min = 14.0, rod_length_max = 40.0;
  double rod_tilt_deg = 25.0;  // sd of the rod angle from the vertical axis
  double bone_density_min = 420.0, bone_density_max = 650.0;
  double background_density = 40.0;
  double blur_sigma = 0.5;  // voxels
  double noise_sd = 30.0;
  std::uint64_t seed = 0;
  std::vector<PlateShape> fixed_plates;
  std::vector<RodShape> fixed_rods;
  CalibrationRange range;

  void validate() const {
    if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0) throw InvalidInput("phantom box must be nonempty");
    if (!(voxel_size_um > 0)) throw InvalidInput("voxel size must be > 0");
    if (plates < 0 || rods < 0) throw InvalidInput("structure counts must be >= 0");
    range.validate();
    auto in_range = [&](double v, const char* what) {
      if (!(v >= range.lo && v <= range.hi)) throw InvalidInput(std::string(what) + " outside calibration range");
    };
    in_range(bone_density_min, "bone_density_min");
    in_range(bone_density_max, "bone_density_max");
    in_range(background_density, "background_density");
    for (const auto& p : fixed_plates) in_range(p.density, "plate density");
    for (const auto& r : fixed_rods) in_range(r.density, "rod density");
    if (bone_density_min > bone_density_max) throw InvalidInput("bone density range is empty");
    if (plate_thickness_min > plate_thickness_max || plate_radius_min > plate_radius_max ||
        rod_radius_min > rod_radius_max || rod_length_min > rod_length_max)
      throw InvalidInput("phantom size ranges must have min <= max");
    if (plate_thickness_min <= 0 || rod_radius_min <= 0) throw InvalidInput("structure sizes must be > 0");
    if (blur_sigma < 0 || noise_sd < 0 || rod_tilt_deg < 0) throw InvalidInput("blur/noise/tilt must be >= 0");
  }
};

namespace detail {

inline Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (!(n > 0)) throw InvalidInput("zero direction vector");
  return {v[0] / n, v[1] / n, v[2] / n};
}

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

// Independent stream per (seed, kind, index) so structures do not shift when
// counts change.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint32_t kind, std::uint32_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), kind, index};
  return std::mt19937_64(seq);
}

inline Vec3 uniform_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v{n(rng), n(rng), n(rng)};
    if (dot(v, v) > 1e-12) return normalized(v);
  }
}

template <class Inside>
void paint(std::vector<float>& field, const Dims& d, Vec3 lo, Vec3 hi, double density, Inside&& inside) {
  auto clampi = [](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n)));
  };
  const std::size_t x0 = clampi(std::floor(lo[0]), d.nx), x1 = clampi(std::ceil(hi[0]) + 1, d.nx);
  const std::size_t y0 = clampi(std::floor(lo[1]), d.ny), y1 = clampi(std::ceil(hi[1]) + 1, d.ny);
  const std::size_t z0 = clampi(std::floor(lo[2]), d.nz), z1 = clampi(std::ceil(hi[2]) + 1, d.nz);
  const auto val = static_cast<float>(density);
  for (std::size_t z = z0; z < z1; ++z)
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) {
        const Vec3 p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        float& f = field[(z * d.ny + y) * d.nx + x];
        if (val > f && inside(p)) f = val;
      }
}

inline void paint_plate(std::vector<float>& field, const Dims& d, const PlateShape& s) {
  const Vec3 n = normalized(s.normal);
  const double half = s.thickness / 2.0;
  Vec3 lo{0, 0, 0}, hi{double(d.nx), double(d.ny), double(d.nz)};
  if (s.radius > 0) {
    const double ext = s.radius + half + 1.0;
    for (int a = 0; a < 3; ++a) lo[a] = s.center[a] - ext, hi[a] = s.center[a] + ext;
  }
  paint(field, d, lo, hi, s.density, [&](const Vec3& p) {
    const Vec3 r{p[0] - s.center[0], p[1] - s.center[1], p[2] - s.center[2]};
    const double h = dot(r, n);
    if (!(h >= -half && h < half)) return false;
    if (s.radius <= 0) return true;
    return dot(r, r) - h * h <= s.radius * s.radius;
  });
}

inline void paint_rod(std::vector<float>& field, const Dims& d, const RodShape& s) {
  const Vec3 u = normalized(s.direction);
  Vec3 lo{0, 0, 0}, hi{double(d.nx), double(d.ny), double(d.nz)};
  if (s.half_length > 0) {
    for (int a = 0; a < 3; ++a) {
      const double e = std::abs(u[a]) * s.half_length + s.radius + 1.0;
      lo[a] = s.center[a] - e;
      hi[a] = s.center[a] + e;
    }
  }
  paint(field, d, lo, hi, s.density, [&](const Vec3& p) {
    const Vec3 r{p[0] - s.center[0], p[1] - s.center[1], p[2] - s.center[2]};
    const double a = dot(r, u);
    if (s.half_length > 0 && std::abs(a) > s.half_length) return false;
    return dot(r, r) - a * a <= s.radius * s.radius;
  });
}

inline std::vector<float> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = static_cast<float>(w);
    sum += w;
  }
  for (auto& w : k) w = static_cast<float>(w / sum);
  return k;
}

// Separable blur with clamp-to-edge boundaries.
inline void blur(std::vector<float>& f, const Dims& d, double sigma) {
  if (sigma <= 0) return;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<float> tmp(f.size());
  const std::size_t n[3] = {d.nx, d.ny, d.nz};
  const std::size_t stride[3] = {1, d.nx, d.nx * d.ny};
  for (int axis = 0; axis < 3; ++axis) {
    const long len = static_cast<long>(n[axis]);
    for (std::size_t idx = 0; idx < f.size(); ++idx) {
      const long pos = static_cast<long>((idx / stride[axis]) % n[axis]);
      double acc = 0.0;
      for (int o = -r; o <= r; ++o) {
        const long q = std::clamp(pos + o, 0L, len - 1);
        acc += k[static_cast<std::size_t>(o + r)] * f[idx + static_cast<std::size_t>((q - pos) * static_cast<long>(stride[axis]))];
      }
      tmp[idx] = static_cast<float>(acc);
    }
    f.swap(tmp);
  }
}

}  // namespace detail

// Deterministic structures drawn from the spec (fixed shapes first).
inline std::vector<PlateShape> phantom_plates(const PhantomSpec& s) {
  std::vector<PlateShape> out = s.fixed_plates;
  for (int i = 0; i < s.plates; ++i) {
    auto rng = detail::substream(s.seed, 1, static_cast<std::uint32_t>(i));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PlateShape p;
    p.center = {u(rng) * s.dims.nx, u(rng) * s.dims.ny, u(rng) * s.dims.nz};
    p.normal = detail::uniform_direction(rng);
    p.thickness = s.plate_thickness_min + (s.plate_thickness_max - s.plate_thickness_min) * u(rng);
    p.radius = s.plate_radius_min + (s.plate_radius_max - s.plate_radius_min) * u(rng);
    p.density = s.bone_density_min + (s.bone_density_max - s.bone_density_min) * u(rng);
    out.push_back(p);
  }
  return out;
}

inline std::vector<RodShape> phantom_rods(const PhantomSpec& s) {
  std::vector<RodShape> out = s.fixed_rods;
  constexpr double kPi = 3.14159265358979323846;
  for (int i = 0; i < s.rods; ++i) {
    auto rng = detail::substream(s.seed, 2, static_cast<std::uint32_t>(i));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> tilt(0.0, s.rod_tilt_deg * kPi / 180.0);
    RodShape r;
    r.center = {u(rng) * s.dims.nx, u(rng) * s.dims.ny, u(rng) * s.dims.nz};
    const double theta = std::abs(tilt(rng)), phi = 2.0 * kPi * u(rng);
    r.direction = {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
    r.radius = s.rod_radius_min + (s.rod_radius_max - s.rod_radius_min) * u(rng);
    r.half_length = 0.5 * (s.rod_length_min + (s.rod_length_max - s.rod_length_min) * u(rng));
    r.density = s.bone_density_min + (s.bone_density_max - s.bone_density_min) * u(rng);
    out.push_back(r);
  }
  return out;
}

inline DensityVolume phantom_volume(const PhantomSpec& s) {
  s.validate();
  std::vector<float> f(s.dims.count(), static_cast<float>(s.background_density));
  for (const auto& p : phantom_plates(s)) detail::paint_plate(f, s.dims, p);
  for (const auto& r : phantom_rods(s)) detail::paint_rod(f, s.dims, r);
  detail::blur(f, s.dims, s.blur_sigma);
  if (s.noise_sd > 0) {
    auto rng = detail::substream(s.seed, 3, 0);
    std::normal_distribution<float> n(0.0f, static_cast<float>(s.noise_sd));
    for (auto& v : f) v += n(rng);
  }
  const auto lo = static_cast<float>(s.range.lo), hi = static_cast<float>(s.range.hi);
  for (auto& v : f) v = std::clamp(v, lo, hi);
  return DensityVolume(s.dims, s.voxel_size_um, std::move(f));
}

namespace detail {

inline json vec_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }
inline Vec3 vec_from(const json& j) {
  auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw ConfigError("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

}  // namespace detail

inline json to_json(const PhantomSpec& s) {
  json plates = json::array(), rods = json::array();
  for (const auto& p : s.fixed_plates)
    plates.push_back({{"center", detail::vec_json(p.center)},
                      {"normal", detail::vec_json(p.normal)},
                      {"thickness", p.thickness},
                      {"radius", p.radius},
                      {"density", p.density}});
  for (const auto& r : s.fixed_rods)
    rods.push_back({{"center", detail::vec_json(r.center)},
                    {"direction", detail::vec_json(r.direction)},
                    {"radius", r.radius},
                    {"half_length", r.half_length},
                    {"density", r.density}});
  return {{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
          {"voxel_size_um", s.voxel_size_um},
          {"plates", s.plates},
          {"plate_thickness", {s.plate_thickness_min, s.plate_thickness_max}},
          {"plate_radius", {s.plate_radius_min, s.plate_radius_max}},
          {"rods", s.rods},
          {"rod_radius", {s.rod_radius_min, s.rod_radius_max}},
          {"rod_length", {s.rod_length_min, s.rod_length_max}},
          {"rod_tilt_deg", s.rod_tilt_deg},
          {"bone_density", {s.bone_density_min, s.bone_density_max}},
          {"background_density", s.background_density},
          {"blur_sigma", s.blur_sigma},
          {"noise_sd", s.noise_sd},
          {"seed", s.seed},
          {"fixed_plates", plates},
          {"fixed_rods", rods},
          {"calibration", {s.range.lo, s.range.hi}}};
}

inline PhantomSpec phantom_spec_from_json(const json& j, PhantomSpec s = {}) {
  if (!j.is_object()) throw ConfigError("phantom spec must be a JSON object");
  auto pair = [](const json& v, double& a, double& b) {
    auto p = v.get<std::vector<double>>();
    if (p.size() != 2) throw ConfigError("expected [min, max]");
    a = p[0];
    b = p[1];
  };
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "dims") {
        auto d = v.get<std::vector<std::size_t>>();
        if (d.size() != 3) throw ConfigError("dims must have 3 entries");
        s.dims = {d[0], d[1], d[2]};
      } else if (key == "voxel_size_um") s.voxel_size_um = v.get<float>();
      else if (key == "plates") s.plates = v.get<int>();
      else if (key == "plate_thickness") pair(v, s.plate_thickness_min, s.plate_thickness_max);
      else if (key == "plate_radius") pair(v, s.plate_radius_min, s.plate_radius_max);
      else if (key == "rods") s.rods = v.get<int>();
      else if (key == "rod_radius") pair(v, s.rod_radius_min, s.rod_radius_max);
      else if (key == "rod_length") pair(v, s.rod_length_min, s.rod_length_max);
      else if (key == "rod_tilt_deg") s.rod_tilt_deg = v.get<double>();
      else if (key == "bone_density") pair(v, s.bone_density_min, s.bone_density_max);
      else if (key == "background_density") s.background_density = v.get<double>();
      else if (key == "blur_sigma") s.blur_sigma = v.get<double>();
      else if (key == "noise_sd") s.noise_sd = v.get<double>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else if (key == "calibration") pair(v, s.range.lo, s.range.hi);
      else if (key == "fixed_plates") {
        s.fixed_plates.clear();
        for (const auto& p : v) {
          PlateShape ps;
          for (const auto& [k, x] : p.items()) {
            if (k == "center") ps.center = detail::vec_from(x);
            else if (k == "normal") ps.normal = detail::vec_from(x);
            else if (k == "thickness") ps.thickness = x.get<double>();
            else if (k == "radius") ps.radius = x.get<double>();
            else if (k == "density") ps.density = x.get<double>();
            else throw ConfigError("unknown plate key '" + k + "'");
          }
          s.fixed_plates.push_back(ps);
        }
      } else if (key == "fixed_rods") {
        s.fixed_rods.clear();
        for (const auto& r : v) {
          RodShape rs;
          for (const auto& [k, x] : r.items()) {
            if (k == "center") rs.center = detail::vec_from(x);
            else if (k == "direction") rs.direction = detail::vec_from(x);
            else if (k == "radius") rs.radius = x.get<double>();
            else if (k == "half_length") rs.half_length = x.get<double>();
            else if (k == "density") rs.density = x.get<double>();
            else throw ConfigError("unknown rod key '" + k + "'");
          }
          s.fixed_rods.push_back(rs);
        }
      } else throw ConfigError("unknown phantom spec key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad phantom spec value: ") + e.what());
  }
  try {
    s.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Corpus

inline std::size_t corpus_size(std::size_t raw, bool augment) { return augment ? raw * kGroupOrder : raw; }

struct SourceVolume {
  std::string name;
  DensityVolume volume;
  std::optional<std::vector<std::uint8_t>> mask;
};

struct ManifestEntry {
  std::string file;
  std::size_t source = 0;
  Position position{};
  int transform = 0;
  double clamp_fraction = 0.0;
};

struct Manifest {
  std::size_t patch_size = 32;
  std::size_t stride = 8;
  bool masked = false;
  bool augment = true;
  CalibrationRange range;
  std::vector<std::string> sources;
  std::size_t raw_count = 0;
  std::vector<ManifestEntry> entries;

  std::size_t count() const { return entries.size(); }

  json to_json() const {
    json list = json::array();
    for (const auto& e : entries)
      list.push_back({{"file", e.file},
                      {"source", e.source},
                      {"position", {e.position[0], e.position[1], e.position[2]}},
                      {"transform", e.transform},
                      {"clamp_fraction", e.clamp_fraction}});
    return {{"format", "bonegan-corpus"},
            {"version", 1},
            {"patch_size", patch_size},
            {"stride", stride},
            {"masked", masked},
            {"augment", augment},
            {"calibration", {range.lo, range.hi}},
            {"sources", sources},
            {"raw_count", raw_count},
            {"count", entries.size()},
            {"patches", list}};
  }

  static Manifest from_json(const json& j) {
    try {
      if (j.at("format") != "bonegan-corpus" || j.at("version") != 1) throw FormatError("not a corpus manifest");
      Manifest m;
      m.patch_size = j.at("patch_size").get<std::size_t>();
      m.stride = j.at("stride").get<std::size_t>();
      m.masked = j.at("masked").get<bool>();
      m.augment = j.at("augment").get<bool>();
      auto cal = j.at("calibration").get<std::vector<double>>();
      if (cal.size() != 2) throw FormatError("bad calibration entry");
      m.range = {cal[0], cal[1]};
      m.sources = j.at("sources").get<std::vector<std::string>>();
      m.raw_count = j.at("raw_count").get<std::size_t>();
      for (const auto& e : j.at("patches")) {
        auto p = e.at("position").get<std::vector<std::size_t>>();
        if (p.size() != 3) throw FormatError("bad position entry");
        m.entries.push_back({e.at("file").get<std::string>(), e.at("source").get<std::size_t>(),
                             {p[0], p[1], p[2]}, e.at("transform").get<int>(), e.at("clamp_fraction").get<double>()});
      }
      if (m.entries.size() != j.at("count").get<std::size_t>()) throw FormatError("manifest count mismatch");
      return m;
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed corpus manifest: ") + e.what());
    }
  }
};

struct Corpus {
  Manifest manifest;
  std::vector<NormalizedPatch> patches;  // parallel to manifest.entries
};

inline std::string patch_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%07zu.svol", i);
  return buf;
}

// Extracts, optionally augments and normalizes patches in memory. Patch order:
// source, grid position, transform index.
inline Corpus assemble_corpus(const std::vector<SourceVolume>& volumes, const PatchSpec& spec, bool augment,
                              const CalibrationRange& range = {}) {
  if (volumes.empty()) throw InvalidInput("corpus needs at least one volume");
  Corpus c;
  c.manifest.patch_size = spec.size;
  c.manifest.stride = spec.stride;
  c.manifest.augment = augment;
  c.manifest.range = range;
  for (std::size_t s = 0; s < volumes.size(); ++s) {
    PatchSpec ps = spec;
    ps.mask = volumes[s].mask;
    c.manifest.masked = c.manifest.masked || ps.mask.has_value();
    c.manifest.sources.push_back(volumes[s].name);
    for (const auto& pos : patch_positions(volumes[s].volume, ps)) {
      ++c.manifest.raw_count;
      const auto crop = volcore::crop_patch(volumes[s].volume, pos, spec.size);
      const int n_t = augment ? kGroupOrder : 1;
      for (int t = 0; t < n_t; ++t) {
        auto r = volcore::normalize(t == 0 ? crop : apply_transform(crop, t), range,
                                    t == 0 ? volcore::Provenance::real : volcore::Provenance::augmented);
        c.manifest.entries.push_back({patch_file_name(c.patches.size()), s, pos, t, r.clamp_fraction});
        c.patches.push_back(std::move(r.patch));
      }
    }
  }
  return c;
}

inline void write_corpus(const Corpus& c, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir / "manifest.json")) throw IoError("duplicate output path: " + (dir / "manifest.json").string());
  fs::create_directories(dir);
  for (std::size_t i = 0; i < c.patches.size(); ++i) {
    const auto path = dir / c.manifest.entries[i].file;
    if (fs::exists(path)) throw IoError("duplicate output path: " + path.string());
    volcore::write_svol(c.patches[i], path, c.manifest.range);
  }
  const auto text = c.manifest.to_json().dump(1);
  volcore::detail::write_file_atomic(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline Manifest build_corpus(const std::vector<SourceVolume>& volumes, const PatchSpec& spec, bool augment,
                             const std::filesystem::path& dir, const CalibrationRange& range = {}) {
  auto c = assemble_corpus(volumes, spec, augment, range);
  write_corpus(c, dir);
  return c.manifest;
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  try {
    return Manifest::from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
}

// Re-derives every patch from its source volume according to the manifest.
inline Corpus rebuild_from_manifest(const Manifest& m, const std::vector<SourceVolume>& volumes) {
  if (volumes.size() != m.sources.size()) throw InvalidInput("source count does not match manifest");
  Corpus c;
  c.manifest = m;
  for (const auto& e : m.entries) {
    if (e.source >= volumes.size()) throw FormatError("manifest references unknown source");
    const auto crop = volcore::crop_patch(volumes[e.source].volume, e.position, m.patch_size);
    auto r = volcore::normalize(e.transform == 0 ? crop : apply_transform(crop, e.transform), m.range,
                                e.transform == 0 ? volcore::Provenance::real : volcore::Provenance::augmented);
    c.patches.push_back(std::move(r.patch));
  }
  return c;
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.manifest = read_manifest(dir);
  c.patches.reserve(c.manifest.count());
  for (const auto& e : c.manifest.entries) c.patches.push_back(volcore::read_normalized_svol(dir / e.file).patch);
  return c;
}

}  // namespace bonegan::datapipe
