#pragma once

// Checkpoint container.
//
// A checkpoint is a single little-endian file:
//
//   offset  size  field
//   0       8     magic "BGCKPT01"
//   8       4     u32 format version (= 1)
//   12      8     u64 metadata length M
//   20      M     metadata, UTF-8 JSON (see Checkpoint::metadata())
//   20+M    4     u32 tensor count T
//   ...           T table-of-contents entries:
//                   u32 name length L, L bytes name,
//                   u8 dtype (1 = float32), u8 rank R, R x i64 dims,
//                   u64 offset into the data section, u64 byte length
//   ...           data section: raw float32 values of each tensor, row-major
//
// Tensor names are prefixed by role: "generator/", "critic/", "ema/" and
// "adam_g/" / "adam_d/" for optimizer moments ("<param>/exp_avg",
// "<param>/exp_avg_sq"). docs/checkpoint_format.md carries the same layout.

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bonegan/error.hpp"
#include "bonegan/genmodels.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::checkpoint {

using genmodels::Critic;
using genmodels::Generator;
using genmodels::NetworkConfig;
using genmodels::StageConfig;

inline constexpr std::array<char, 8> kMagic = {'B', 'G', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;

using TensorMap = std::map<std::string, torch::Tensor>;

struct Checkpoint {
  NetworkConfig network;
  StageConfig stage;
  int epoch = 0;
  std::string variant = "pwgan_gp";
  std::string config_hash;
  TensorMap generator;
  TensorMap critic;
  TensorMap ema;        // empty when no EMA shadow was kept
  TensorMap optimizer;  // Adam moments
  std::map<std::string, int64_t> optimizer_steps;
  nlohmann::json train_config = nlohmann::json::object();

  int64_t generator_params() const { return count(generator); }
  int64_t critic_params() const { return count(critic); }

  nlohmann::json metadata() const {
    return {{"format_version", kFormatVersion},
            {"stage", stage.stage},
            {"resolution", stage.resolution()},
            {"blend_alpha", stage.blend_alpha},
            {"epoch", epoch},
            {"variant", variant},
            {"config_hash", config_hash},
            {"network",
             {{"latent_dim", network.latent_dim},
              {"widths", network.widths},
              {"critic_sigmoid", network.critic_sigmoid}}},
            {"param_counts", {{"generator", generator_params()}, {"critic", critic_params()}}},
            {"has_ema", !ema.empty()},
            {"optimizer_steps", optimizer_steps},
            {"train_config", train_config}};
  }

 private:
  static int64_t count(const TensorMap& m) {
    int64_t n = 0;
    for (const auto& [_, t] : m) n += t.numel();
    return n;
  }
};

inline TensorMap state_of(const torch::nn::Module& m) {
  TensorMap out;
  for (const auto& item : m.named_parameters()) out[item.key()] = item.value().detach().clone().to(torch::kFloat);
  return out;
}

// Copies named values into the module; names and shapes must match exactly.
inline void load_state(torch::nn::Module& m, const TensorMap& state, const std::string& what) {
  torch::NoGradGuard ng;
  auto params = m.named_parameters();
  if (params.size() != state.size())
    throw FormatError(what + ": checkpoint holds " + std::to_string(state.size()) + " tensors, network expects " +
                      std::to_string(params.size()));
  for (auto& item : params) {
    auto it = state.find(item.key());
    if (it == state.end()) throw FormatError(what + ": missing tensor '" + item.key() + "'");
    if (it->second.sizes() != item.value().sizes())
      throw FormatError(what + ": shape mismatch for '" + item.key() + "'");
    item.value().copy_(it->second);
  }
}

inline Generator load_generator(const Checkpoint& ck, bool use_ema = true) {
  Generator g(ck.network, ck.stage.stage);
  const bool ema = use_ema && !ck.ema.empty();
  load_state(*g, ema ? ck.ema : ck.generator, ema ? "ema generator" : "generator");
  g->eval();
  return g;
}

inline Critic load_critic(const Checkpoint& ck) {
  Critic c(ck.network, ck.stage.stage);
  load_state(*c, ck.critic, "critic");
  c->eval();
  return c;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

struct Writer {
  std::vector<std::uint8_t> buf;
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    buf.insert(buf.end(), raw, raw + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
};

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw FormatError("checkpoint truncated at byte " + std::to_string(pos));
  }
  template <class T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Checkpoint& ck) {
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  auto add = [&](const std::string& prefix, const TensorMap& m) {
    for (const auto& [k, v] : m) tensors.emplace_back(prefix + k, v.detach().to(torch::kFloat).contiguous());
  };
  add("generator/", ck.generator);
  add("critic/", ck.critic);
  add("ema/", ck.ema);
  add("", ck.optimizer);

  detail::Writer w;
  w.put_bytes(kMagic.data(), kMagic.size());
  w.put<std::uint32_t>(kFormatVersion);
  const std::string meta = ck.metadata().dump();
  w.put<std::uint64_t>(meta.size());
  w.put_bytes(meta.data(), meta.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(1);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dim()));
    for (auto d : t.sizes()) w.put<std::int64_t>(d);
    const std::uint64_t nbytes = 4 * static_cast<std::uint64_t>(t.numel());
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(nbytes);
    offset += nbytes;
  }
  for (const auto& [name, t] : tensors) {
    const float* p = t.data_ptr<float>();
    if constexpr (std::endian::native == std::endian::little) {
      w.put_bytes(p, 4 * static_cast<std::size_t>(t.numel()));
    } else {
      for (int64_t i = 0; i < t.numel(); ++i) w.put<float>(p[i]);
    }
  }
  return std::move(w.buf);
}

inline Checkpoint decode(std::span<const std::uint8_t> bytes) {
  detail::Reader r{bytes};
  if (r.get_string(kMagic.size()) != std::string(kMagic.begin(), kMagic.end()))
    throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = r.get<std::uint64_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.get_string(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  struct Entry {
    std::string name;
    std::vector<int64_t> dims;
    std::uint64_t offset, nbytes;
  };
  const auto count = r.get<std::uint32_t>();
  std::vector<Entry> toc;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.get_string(r.get<std::uint32_t>());
    if (r.get<std::uint8_t>() != 1) throw FormatError("tensor '" + e.name + "' has unsupported dtype");
    const auto rank = r.get<std::uint8_t>();
    for (int d = 0; d < rank; ++d) e.dims.push_back(r.get<std::int64_t>());
    e.offset = r.get<std::uint64_t>();
    e.nbytes = r.get<std::uint64_t>();
    toc.push_back(std::move(e));
  }
  const std::size_t data_start = r.pos;

  Checkpoint ck;
  try {
    const auto& net = meta.at("network");
    ck.network.latent_dim = net.at("latent_dim").get<int>();
    ck.network.widths = net.at("widths").get<std::vector<int64_t>>();
    ck.network.critic_sigmoid = net.at("critic_sigmoid").get<bool>();
    ck.stage.stage = meta.at("stage").get<int>();
    ck.stage.blend_alpha = meta.at("blend_alpha").get<double>();
    ck.epoch = meta.at("epoch").get<int>();
    ck.variant = meta.at("variant").get<std::string>();
    ck.config_hash = meta.at("config_hash").get<std::string>();
    ck.optimizer_steps = meta.value("optimizer_steps", std::map<std::string, int64_t>{});
    ck.train_config = meta.value("train_config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  ck.network.validate();
  ck.stage.validate(ck.network);

  for (const auto& e : toc) {
    int64_t numel = 1;
    for (auto d : e.dims) numel *= d;
    if (e.nbytes != 4 * static_cast<std::uint64_t>(numel))
      throw FormatError("tensor '" + e.name + "' byte length disagrees with its shape");
    if (data_start + e.offset + e.nbytes > bytes.size())
      throw FormatError("checkpoint truncated inside tensor '" + e.name + "'");
    auto t = torch::empty(e.dims, torch::kFloat);
    std::memcpy(t.data_ptr<float>(), bytes.data() + data_start + e.offset, e.nbytes);
    if constexpr (std::endian::native == std::endian::big) {
      // stored little-endian
      auto* p = reinterpret_cast<std::uint8_t*>(t.data_ptr<float>());
      for (int64_t i = 0; i < numel; ++i) std::reverse(p + 4 * i, p + 4 * i + 4);
    }
    auto strip = [&](const std::string& prefix, TensorMap& into) {
      if (e.name.rfind(prefix, 0) != 0) return false;
      into[e.name.substr(prefix.size())] = t;
      return true;
    };
    if (!strip("generator/", ck.generator) && !strip("critic/", ck.critic) && !strip("ema/", ck.ema))
      ck.optimizer[e.name] = t;
  }
  return ck;
}

inline void save(const Checkpoint& ck, const std::filesystem::path& path) {
  volcore::detail::write_file_atomic(path, encode(ck));
}

inline Checkpoint load(const std::filesystem::path& path) {
  try {
    return decode(volcore::detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Generation

// G(z) for a batch of latents [B, latent_dim]; returns [B, 1, r, r, r].
inline torch::Tensor generate_batch(Generator& g, const torch::Tensor& z, double alpha = 1.0) {
  torch::NoGradGuard ng;
  return g->forward(z.to(g->parameters().front().scalar_type()), alpha);
}

inline volcore::NormalizedPatch to_patch(const torch::Tensor& volume, float voxel_size_um,
                                         volcore::Provenance provenance = volcore::Provenance::generated) {
  auto t = volume.detach().to(torch::kFloat).contiguous().view(-1);
  const int64_t r = volume.size(-1);
  std::vector<float> values(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  // tanh output can round to exactly +-1 but never beyond; clamp guards
  // against blend arithmetic overshooting by an ulp.
  for (float& v : values) v = std::clamp(v, -1.0f, 1.0f);
  return volcore::NormalizedPatch(volcore::cube(static_cast<std::size_t>(r)), voxel_size_um, std::move(values),
                                  provenance);
}

// Deterministic single-sample generation. `requested_stage`, when set, must
// match the checkpoint stage.
inline volcore::NormalizedPatch generate(const Checkpoint& ck, const genmodels::LatentVector& z, bool use_ema = true,
                                         std::optional<int> requested_stage = std::nullopt,
                                         float voxel_size_um = volcore::kDefaultVoxelSizeUm) {
  if (requested_stage && *requested_stage != ck.stage.stage)
    throw InvalidInput("checkpoint is at stage " + std::to_string(ck.stage.stage) + ", requested stage " +
                       std::to_string(*requested_stage));
  if (static_cast<int>(z.dim()) != ck.network.latent_dim)
    throw InvalidInput("latent dimension " + std::to_string(z.dim()) + " does not match checkpoint (" +
                       std::to_string(ck.network.latent_dim) + ")");
  auto g = load_generator(ck, use_ema);
  return to_patch(generate_batch(g, z.tensor(), ck.stage.blend_alpha)[0], voxel_size_um);
}

}  // namespace bonegan::checkpoint
