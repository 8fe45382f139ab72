#pragma once

// Density volumes, normalized patches and the SVOL on-disk format.
//
// Voxel layout everywhere in this library is x fastest, then y, then z:
//   index(x, y, z) = x + nx * (y + ny * z)
// The same order is used for SVOL payloads and for the (z, y, x) trailing
// dimensions of tensors, so a patch tensor of shape [1, 1, s, s, s] is a
// plain reinterpretation of `values()`.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "bonegan/error.hpp"

namespace bonegan::volcore {

inline constexpr float kDefaultVoxelSizeUm = 164.0f;

struct Dims {
  std::size_t nx = 0, ny = 0, nz = 0;

  std::size_t count() const { return nx * ny * nz; }
  std::size_t operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  bool is_cubic() const { return nx == ny && ny == nz; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

inline Dims cube(std::size_t s) { return {s, s, s}; }

struct CalibrationRange {
  double lo = -350.0;  // mg/cm^3 mapped to -1
  double hi = 1100.0;  // mg/cm^3 mapped to +1

  void validate() const {
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi))
      throw InvalidInput("calibration range requires finite lo < hi (got " + std::to_string(lo) +
                         ", " + std::to_string(hi) + ")");
  }
  double to_normalized(double v) const { return 2.0 * (v - lo) / (hi - lo) - 1.0; }
  double to_density(double u) const { return lo + (u + 1.0) * 0.5 * (hi - lo); }
  // d(density)/d(normalized)
  double scale() const { return 0.5 * (hi - lo); }
};

namespace detail {

inline void check_dims(const Dims& d) {
  if (d.nx == 0 || d.ny == 0 || d.nz == 0)
    throw InvalidInput("volume dims must all be >= 1 (got " + to_string(d) + ")");
}

inline void check_size(const Dims& d, std::size_t n) {
  if (d.count() != n)
    throw InvalidInput("volume of dims " + to_string(d) + " needs " + std::to_string(d.count()) +
                       " values, got " + std::to_string(n));
}

}  // namespace detail

// Calibrated scalar grid in mg/cm^3 with isotropic voxels.
class DensityVolume {
 public:
  DensityVolume(Dims dims, float voxel_size_um, std::vector<float> values)
      : dims_(dims), voxel_size_um_(voxel_size_um), values_(std::move(values)) {
    detail::check_dims(dims_);
    detail::check_size(dims_, values_.size());
    if (!(voxel_size_um_ > 0.0f) || !std::isfinite(voxel_size_um_))
      throw InvalidInput("voxel size must be finite and > 0");
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (!std::isfinite(values_[i]))
        throw InvalidInput("non-finite density at voxel " + std::to_string(i));
  }

  static DensityVolume filled(Dims dims, float value, float voxel_size_um = kDefaultVoxelSizeUm) {
    detail::check_dims(dims);
    return DensityVolume(dims, voxel_size_um, std::vector<float>(dims.count(), value));
  }

  const Dims& dims() const { return dims_; }
  float voxel_size_um() const { return voxel_size_um_; }
  double voxel_size_mm() const { return voxel_size_um_ * 1e-3; }
  std::size_t size() const { return values_.size(); }
  std::span<const float> values() const { return values_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return values_[index(x, y, z)]; }

  friend bool operator==(const DensityVolume&, const DensityVolume&) = default;

 private:
  Dims dims_;
  float voxel_size_um_;
  std::vector<float> values_;
};

enum class Provenance : std::uint8_t { real, generated, augmented };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::real: return "real";
    case Provenance::generated: return "generated";
    case Provenance::augmented: return "augmented";
  }
  return "unknown";
}

// Values mapped to [-1, 1] through a CalibrationRange. Training and generation
// only accept cubic instances (see require_training_patch); whole volumes may
// be normalized before patch extraction, so the type itself allows any dims.
class NormalizedPatch {
 public:
  NormalizedPatch(Dims dims, float voxel_size_um, std::vector<float> values,
                  Provenance provenance = Provenance::real)
      : dims_(dims), voxel_size_um_(voxel_size_um), values_(std::move(values)), provenance_(provenance) {
    detail::check_dims(dims_);
    detail::check_size(dims_, values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) {
      const float v = values_[i];
      if (!(v >= -1.0f && v <= 1.0f))
        throw InvalidInput("normalized value outside [-1,1] at voxel " + std::to_string(i));
    }
  }

  const Dims& dims() const { return dims_; }
  float voxel_size_um() const { return voxel_size_um_; }
  Provenance provenance() const { return provenance_; }
  std::span<const float> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  std::size_t edge() const {
    if (!dims_.is_cubic()) throw InvalidInput("patch is not cubic: " + to_string(dims_));
    return dims_.nx;
  }
  NormalizedPatch with_provenance(Provenance p) const {
    NormalizedPatch out = *this;
    out.provenance_ = p;
    return out;
  }

  friend bool operator==(const NormalizedPatch&, const NormalizedPatch&) = default;

 private:
  Dims dims_;
  float voxel_size_um_;
  std::vector<float> values_;
  Provenance provenance_;
};

// Accepts cubic patches of edge 4, 8, 16, 32 (64 only when explicitly allowed).
inline void require_training_patch(const NormalizedPatch& p, bool allow_64 = false) {
  const std::size_t s = p.edge();
  if (s == 4 || s == 8 || s == 16 || s == 32 || (allow_64 && s == 64)) return;
  throw InvalidInput("patch edge " + std::to_string(s) + " is not a supported stage resolution");
}

struct NormalizeResult {
  NormalizedPatch patch;
  double clamp_fraction = 0.0;  // voxels outside [lo, hi] before clamping
};

inline NormalizeResult normalize(const DensityVolume& volume, const CalibrationRange& range = {},
                                 Provenance provenance = Provenance::real) {
  range.validate();
  std::vector<float> out(volume.size());
  std::size_t clamped = 0;
  const auto in = volume.values();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    if (v < range.lo || v > range.hi) ++clamped;
    out[i] = static_cast<float>(std::clamp(range.to_normalized(v), -1.0, 1.0));
  }
  return {NormalizedPatch(volume.dims(), volume.voxel_size_um(), std::move(out), provenance),
          static_cast<double>(clamped) / static_cast<double>(in.size())};
}

inline DensityVolume denormalize(const NormalizedPatch& patch, const CalibrationRange& range = {}) {
  range.validate();
  std::vector<float> out(patch.size());
  const auto in = patch.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<float>(range.to_density(in[i]));
  return DensityVolume(patch.dims(), patch.voxel_size_um(), std::move(out));
}

// Raw-value variant used on generator output, which is range-checked here.
inline DensityVolume denormalize(Dims dims, float voxel_size_um, std::span<const float> normalized,
                                 const CalibrationRange& range = {}) {
  return denormalize(NormalizedPatch(dims, voxel_size_um, {normalized.begin(), normalized.end()},
                                     Provenance::generated),
                     range);
}

inline DensityVolume crop_patch(const DensityVolume& volume, std::array<std::size_t, 3> origin,
                                std::size_t size) {
  static constexpr const char* kAxis[3] = {"x", "y", "z"};
  if (size == 0) throw InvalidInput("crop size must be > 0");
  for (int a = 0; a < 3; ++a) {
    if (origin[a] + size > volume.dims()[a])
      throw InvalidInput(std::string("crop out of bounds along ") + kAxis[a] + ": origin " +
                         std::to_string(origin[a]) + " + size " + std::to_string(size) + " > " +
                         std::to_string(volume.dims()[a]));
  }
  std::vector<float> out;
  out.reserve(size * size * size);
  for (std::size_t z = 0; z < size; ++z)
    for (std::size_t y = 0; y < size; ++y) {
      const float* row = volume.values().data() + volume.index(origin[0], origin[1] + y, origin[2] + z);
      out.insert(out.end(), row, row + size);
    }
  return DensityVolume(cube(size), volume.voxel_size_um(), std::move(out));
}

// ---------------------------------------------------------------------------
// SVOL
//
//   offset size  field
//   0      4     magic "SVOL"
//   4      2     version (u16, = 1)
//   6      2     dtype (u16): 1 = float32 density in mg/cm^3,
//                             2 = float32 normalized values in [-1, 1]
//   8      12    nx, ny, nz (u32 each)
//   20     4     voxel size in micrometers (float32)
//   24     8     calibration lo, hi in mg/cm^3 (float32 each)
//   32     4*n   values, x fastest, z slowest
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kSvolMagic = {'S', 'V', 'O', 'L'};
inline constexpr std::uint16_t kSvolVersion = 1;
inline constexpr std::size_t kSvolHeaderBytes = 32;

enum class SvolDtype : std::uint16_t { density = 1, normalized = 2 };

struct SvolHeader {
  std::uint16_t version = kSvolVersion;
  SvolDtype dtype = SvolDtype::density;
  Dims dims;
  float voxel_size_um = kDefaultVoxelSizeUm;
  float cal_lo = -350.0f;
  float cal_hi = 1100.0f;
};

namespace detail {

template <class T>
void put_le(std::vector<std::uint8_t>& buf, T v) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint32_t>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

template <class T>
T get_le(const std::uint8_t* p) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint32_t>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return std::bit_cast<T>(u);
}

inline std::vector<std::uint8_t> encode_svol(const SvolHeader& h, std::span<const float> values) {
  std::vector<std::uint8_t> buf;
  buf.reserve(kSvolHeaderBytes + 4 * values.size());
  buf.insert(buf.end(), kSvolMagic.begin(), kSvolMagic.end());
  put_le<std::uint16_t>(buf, h.version);
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(h.dtype));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(h.dims.nx));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(h.dims.ny));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(h.dims.nz));
  put_le<float>(buf, h.voxel_size_um);
  put_le<float>(buf, h.cal_lo);
  put_le<float>(buf, h.cal_hi);
  if constexpr (std::endian::native == std::endian::little) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    buf.insert(buf.end(), p, p + 4 * values.size());
  } else {
    for (float v : values) put_le<float>(buf, v);
  }
  return buf;
}

struct DecodedSvol {
  SvolHeader header;
  std::vector<float> values;
};

inline DecodedSvol decode_svol(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kSvolHeaderBytes)
    throw FormatError("SVOL truncated: header needs 32 bytes, got " + std::to_string(bytes.size()));
  if (!std::equal(kSvolMagic.begin(), kSvolMagic.end(), bytes.begin()))
    throw FormatError("not an SVOL file (bad magic)");
  const std::uint8_t* p = bytes.data();
  DecodedSvol out;
  auto& h = out.header;
  h.version = get_le<std::uint16_t>(p + 4);
  if (h.version != kSvolVersion)
    throw FormatError("unsupported SVOL version " + std::to_string(h.version));
  const auto dtype = get_le<std::uint16_t>(p + 6);
  if (dtype != 1 && dtype != 2) throw FormatError("unsupported SVOL dtype code " + std::to_string(dtype));
  h.dtype = static_cast<SvolDtype>(dtype);
  h.dims = {get_le<std::uint32_t>(p + 8), get_le<std::uint32_t>(p + 12), get_le<std::uint32_t>(p + 16)};
  h.voxel_size_um = get_le<float>(p + 20);
  h.cal_lo = get_le<float>(p + 24);
  h.cal_hi = get_le<float>(p + 28);
  if (h.dims.nx == 0 || h.dims.ny == 0 || h.dims.nz == 0)
    throw FormatError("SVOL header has zero dimension: " + to_string(h.dims));
  const std::size_t payload = bytes.size() - kSvolHeaderBytes;
  const std::size_t expected = 4 * h.dims.count();
  if (payload < expected)
    throw FormatError("SVOL truncated: dims " + to_string(h.dims) + " need " + std::to_string(expected) +
                      " payload bytes, found " + std::to_string(payload));
  if (payload > expected)
    throw FormatError("SVOL payload size disagrees with dims " + to_string(h.dims) + ": " +
                      std::to_string(payload) + " bytes, expected " + std::to_string(expected));
  out.values.resize(h.dims.count());
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.values.data(), p + kSvolHeaderBytes, expected);
  } else {
    for (std::size_t i = 0; i < out.values.size(); ++i)
      out.values[i] = get_le<float>(p + kSvolHeaderBytes + 4 * i);
  }
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Write to a sibling temp file and rename so readers never see partial files.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_svol(const DensityVolume& v, const CalibrationRange& range = {}) {
  SvolHeader h{kSvolVersion, SvolDtype::density, v.dims(), v.voxel_size_um(),
               static_cast<float>(range.lo), static_cast<float>(range.hi)};
  return detail::encode_svol(h, v.values());
}

inline std::vector<std::uint8_t> encode_svol(const NormalizedPatch& p, const CalibrationRange& range = {}) {
  SvolHeader h{kSvolVersion, SvolDtype::normalized, p.dims(), p.voxel_size_um(),
               static_cast<float>(range.lo), static_cast<float>(range.hi)};
  return detail::encode_svol(h, p.values());
}

inline void write_svol(const DensityVolume& v, const std::filesystem::path& path,
                       const CalibrationRange& range = {}) {
  detail::write_file_atomic(path, encode_svol(v, range));
}

inline void write_svol(const NormalizedPatch& p, const std::filesystem::path& path,
                       const CalibrationRange& range = {}) {
  detail::write_file_atomic(path, encode_svol(p, range));
}

inline SvolHeader read_svol_header(const std::filesystem::path& path) {
  try {
    return detail::decode_svol(detail::read_file(path)).header;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline DensityVolume decode_density(std::span<const std::uint8_t> bytes) {
  auto d = detail::decode_svol(bytes);
  if (d.header.dtype != SvolDtype::density)
    throw FormatError("SVOL holds normalized values; expected density (dtype 1)");
  return DensityVolume(d.header.dims, d.header.voxel_size_um, std::move(d.values));
}

inline DensityVolume read_svol(const std::filesystem::path& path) {
  try {
    return decode_density(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

struct NormalizedSvol {
  NormalizedPatch patch;
  CalibrationRange range;
};

inline NormalizedSvol read_normalized_svol(const std::filesystem::path& path,
                                           Provenance provenance = Provenance::real) {
  auto d = detail::decode_svol(detail::read_file(path));
  if (d.header.dtype != SvolDtype::normalized)
    throw FormatError(path.string() + ": expected normalized SVOL (dtype 2)");
  return {NormalizedPatch(d.header.dims, d.header.voxel_size_um, std::move(d.values), provenance),
          CalibrationRange{d.header.cal_lo, d.header.cal_hi}};
}

// Reads either dtype; normalized files are mapped back to density with the
// calibration range stored in their header.
inline DensityVolume read_any_as_density(const std::filesystem::path& path) {
  auto d = detail::decode_svol(detail::read_file(path));
  if (d.header.dtype == SvolDtype::density)
    return DensityVolume(d.header.dims, d.header.voxel_size_um, std::move(d.values));
  NormalizedPatch p(d.header.dims, d.header.voxel_size_um, std::move(d.values));
  return denormalize(p, CalibrationRange{d.header.cal_lo, d.header.cal_hi});
}

}  // namespace bonegan::volcore
