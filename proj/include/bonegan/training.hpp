#pragma once

// Progressive WGAN-GP training with gradient penalty, critic drift and a
// generator EMA shadow, plus the non-progressive baselines (wgan_gp, gan,
// wgan_clip) trained with identical hyperparameters.

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "bonegan/checkpoint.hpp"
#include "bonegan/error.hpp"
#include "bonegan/genmodels.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::training {

using genmodels::Critic;
using genmodels::Generator;
using json = nlohmann::json;

enum class Variant { pwgan_gp, wgan_gp, gan, wgan_clip };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::pwgan_gp: return "pwgan_gp";
    case Variant::wgan_gp: return "wgan_gp";
    case Variant::gan: return "gan";
    case Variant::wgan_clip: return "wgan_clip";
  }
  return "?";
}

// Accepts both snake_case and the CLI's dashed spelling.
inline Variant parse_variant(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "pwgan_gp") return Variant::pwgan_gp;
  if (s == "wgan_gp") return Variant::wgan_gp;
  if (s == "gan") return Variant::gan;
  if (s == "wgan_clip") return Variant::wgan_clip;
  throw InvalidInput("unknown variant '" + s + "' (pwgan_gp, wgan_gp, gan, wgan_clip)");
}

enum class ScheduleOrder { fade_then_stabilize, stabilize_then_fade };

inline std::string to_string(ScheduleOrder o) {
  return o == ScheduleOrder::fade_then_stabilize ? "fade_then_stabilize" : "stabilize_then_fade";
}

inline ScheduleOrder parse_order(const std::string& s) {
  if (s == "fade_then_stabilize") return ScheduleOrder::fade_then_stabilize;
  if (s == "stabilize_then_fade") return ScheduleOrder::stabilize_then_fade;
  throw InvalidInput("unknown schedule order '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 0.001;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  int batch_size = 16;
  int n_critic = 3;
  double gp_lambda = 10.0;
  double drift_epsilon = 0.001;
  int epochs_train_per_stage = 5;
  int epochs_blend_per_stage = 5;
  // Epochs at the 4^3 stage; unset means train + blend (fade first) or train.
  std::optional<int> first_stage_epochs;
  double ema_decay = 0.999;
  bool ema_warmup = true;  // ramp the decay up over the first generator updates
  int stages = 4;
  Variant variant = Variant::pwgan_gp;
  double clip_value = 0.01;
  std::uint64_t seed = 0;
  ScheduleOrder order = ScheduleOrder::fade_then_stabilize;
  genmodels::NetworkConfig network;
  int diversity_samples = 64;
  double collapse_ratio = 0.2;

  int final_stage() const { return stages - 1; }
  bool progressive() const { return variant == Variant::pwgan_gp; }
  int stage0_epochs() const {
    const int fallback = order == ScheduleOrder::fade_then_stabilize || stages == 1
                             ? epochs_train_per_stage + epochs_blend_per_stage
                             : epochs_train_per_stage;
    return first_stage_epochs.value_or(fallback);
  }

  void validate() const {
    network.validate();
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
      throw ConfigError("adam betas must lie in [0,1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (n_critic < 1) throw ConfigError("n_critic must be >= 1");
    if (!(gp_lambda >= 0) || !(drift_epsilon >= 0)) throw ConfigError("penalty weights must be >= 0");
    if (epochs_train_per_stage < 0 || epochs_blend_per_stage < 0 || stage0_epochs() < 0)
      throw ConfigError("epoch counts must be >= 0");
    if (!(ema_decay >= 0 && ema_decay <= 1)) throw ConfigError("ema_decay must lie in [0,1]");
    if (stages < 1 || stages > static_cast<int>(network.widths.size()))
      throw ConfigError("stages must lie in [1, " + std::to_string(network.widths.size()) + "]");
    if (!(clip_value > 0)) throw ConfigError("clip_value must be > 0");
    if (diversity_samples < 2) throw ConfigError("diversity_samples must be >= 2");
    if (!(collapse_ratio > 0)) throw ConfigError("collapse_ratio must be > 0");
  }

  // All variants share every hyperparameter; only the variant tag differs.
  TrainConfig with_variant(Variant v) const {
    TrainConfig c = *this;
    c.variant = v;
    c.network.critic_sigmoid = v == Variant::gan;
    return c;
  }
};

inline json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"batch_size", c.batch_size},
          {"n_critic", c.n_critic},
          {"gp_lambda", c.gp_lambda},
          {"drift_epsilon", c.drift_epsilon},
          {"epochs_train_per_stage", c.epochs_train_per_stage},
          {"epochs_blend_per_stage", c.epochs_blend_per_stage},
          {"first_stage_epochs", c.first_stage_epochs ? json(*c.first_stage_epochs) : json(nullptr)},
          {"ema_decay", c.ema_decay},
          {"ema_warmup", c.ema_warmup},
          {"stages", c.stages},
          {"variant", to_string(c.variant)},
          {"clip_value", c.clip_value},
          {"seed", c.seed},
          {"order", to_string(c.order)},
          {"latent_dim", c.network.latent_dim},
          {"widths", c.network.widths},
          {"diversity_samples", c.diversity_samples},
          {"collapse_ratio", c.collapse_ratio}};
}

// Overlays `j` onto `base`. Unknown keys are rejected.
inline TrainConfig train_config_from_json(const json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainConfig c = std::move(base);
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "n_critic") c.n_critic = v.get<int>();
      else if (key == "gp_lambda") c.gp_lambda = v.get<double>();
      else if (key == "drift_epsilon") c.drift_epsilon = v.get<double>();
      else if (key == "epochs_train_per_stage") c.epochs_train_per_stage = v.get<int>();
      else if (key == "epochs_blend_per_stage") c.epochs_blend_per_stage = v.get<int>();
      else if (key == "first_stage_epochs") c.first_stage_epochs = v.is_null() ? std::nullopt : std::optional<int>(v.get<int>());
      else if (key == "ema_decay") c.ema_decay = v.get<double>();
      else if (key == "ema_warmup") c.ema_warmup = v.get<bool>();
      else if (key == "stages") c.stages = v.get<int>();
      else if (key == "variant") c = c.with_variant(parse_variant(v.get<std::string>()));
      else if (key == "clip_value") c.clip_value = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "order") c.order = parse_order(v.get<std::string>());
      else if (key == "latent_dim") c.network.latent_dim = v.get<int>();
      else if (key == "widths") c.network.widths = v.get<std::vector<int64_t>>();
      else if (key == "diversity_samples") c.diversity_samples = v.get<int>();
      else if (key == "collapse_ratio") c.collapse_ratio = v.get<double>();
      else throw ConfigError("unknown training config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad training config value: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

// FNV-1a over the canonical (key-sorted) JSON text.
inline std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}
inline std::string config_hash(const TrainConfig& c) { return config_hash(to_json(c)); }

// ---------------------------------------------------------------------------
// Loss terms

struct WassersteinTerms {
  torch::Tensor critic_core;  // mean(d_fake) - mean(d_real)
  torch::Tensor gen_core;     // -mean(d_fake)
  torch::Tensor estimate;     // mean(d_real) - mean(d_fake)
};

inline WassersteinTerms wasserstein_losses(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  if (d_real.numel() == 0 || d_fake.numel() == 0) throw InvalidInput("empty critic batch");
  auto mr = d_real.mean(), mf = d_fake.mean();
  return {mf - mr, -mf, (mr - mf).detach()};
}

inline torch::Tensor drift_penalty(const torch::Tensor& d_real, double epsilon_drift) {
  if (d_real.numel() == 0) throw InvalidInput("empty critic batch");
  return epsilon_drift * d_real.pow(2).mean();
}

// lambda * mean((|grad critic(xhat)| - 1)^2) on per-sample interpolates.
template <class CriticFn>
torch::Tensor gradient_penalty(CriticFn&& critic, const torch::Tensor& real, const torch::Tensor& fake, double lambda,
                               torch::Generator& gen) {
  if (real.sizes() != fake.sizes()) throw InvalidInput("real and fake batches differ in shape");
  if (real.dim() < 1 || real.size(0) == 0) throw InvalidInput("empty batch");
  std::vector<int64_t> ushape(static_cast<std::size_t>(real.dim()), 1);
  ushape[0] = real.size(0);
  auto u = at::rand(ushape, gen, real.options().requires_grad(false));
  auto xhat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(true);
  auto out = critic(xhat);
  torch::Tensor grad;
  if (out.requires_grad()) {
    grad = torch::autograd::grad({out.sum()}, {xhat}, {}, true, true, true)[0];
  }
  if (!grad.defined()) grad = torch::zeros_like(xhat);
  auto norm = grad.flatten(1).norm(2, 1);
  return lambda * (norm - 1).pow(2).mean();
}

// Adversarial log-loss on post-sigmoid outputs.
struct AdversarialTerms {
  torch::Tensor critic_core;
  torch::Tensor gen_core;
};

inline AdversarialTerms baseline_losses(Variant v, const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  if (d_real.numel() == 0 || d_fake.numel() == 0) throw InvalidInput("empty critic batch");
  if (v != Variant::gan) {
    auto w = wasserstein_losses(d_real, d_fake);
    return {w.critic_core, w.gen_core};
  }
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  auto pr = d_real.clamp(lo, hi), pf = d_fake.clamp(lo, hi);
  return {-(torch::log(pr).mean() + torch::log1p(-pf).mean()), -torch::log(pf).mean()};
}

inline void clip_weights(torch::nn::Module& critic, double c) {
  torch::NoGradGuard ng;
  for (auto& p : critic.parameters()) p.clamp_(-c, c);
}

// shadow <- decay * shadow + (1 - decay) * live, matched by parameter name.
inline void ema_update(torch::nn::Module& shadow, const torch::nn::Module& live, double decay) {
  if (!(decay >= 0 && decay <= 1)) throw InvalidInput("ema decay must lie in [0,1]");
  torch::NoGradGuard ng;
  auto live_params = live.named_parameters();
  for (auto& item : shadow.named_parameters()) {
    auto* src = live_params.find(item.key());
    if (!src) throw InvalidInput("ema: live network lacks parameter " + item.key());
    if (src->sizes() != item.value().sizes()) throw InvalidInput("ema: shape mismatch for " + item.key());
    item.value().mul_(decay).add_(*src, 1.0 - decay);
  }
}

inline void ema_update(checkpoint::TensorMap& shadow, const checkpoint::TensorMap& live, double decay) {
  if (!(decay >= 0 && decay <= 1)) throw InvalidInput("ema decay must lie in [0,1]");
  for (auto& [name, t] : shadow) {
    auto it = live.find(name);
    if (it == live.end()) throw InvalidInput("ema: live weights lack " + name);
    if (it->second.sizes() != t.sizes()) throw InvalidInput("ema: shape mismatch for " + name);
    t = decay * t + (1.0 - decay) * it->second;
  }
}

// Effective decay after `updates` generator steps. Without the ramp, short runs
// leave the shadow dominated by its initial weights.
inline double ema_decay_at(double decay, int64_t updates, bool warmup = true) {
  if (!warmup) return decay;
  return std::min(decay, (1.0 + static_cast<double>(updates)) / (10.0 + static_cast<double>(updates)));
}

// Copies parameters present in `live` but missing from the shadow's last
// update (freshly grown layers) so the shadow starts from the live values.
inline void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src,
                            const std::vector<std::string>& names) {
  torch::NoGradGuard ng;
  auto s = src.named_parameters();
  auto d = dst.named_parameters();
  for (const auto& n : names) d[n].copy_(s[n]);
}

// Average-pools [B, 1, R, R, R] real patches to resolution r.
inline torch::Tensor pool_to_resolution(const torch::Tensor& x, int64_t r) {
  const int64_t in = x.size(-1);
  if (r <= 0 || in % r != 0) throw InvalidInput("cannot pool " + std::to_string(in) + " to " + std::to_string(r));
  if (in == r) return x;
  return torch::avg_pool3d(x, in / r);
}

// Mean pairwise L2 distance between flattened samples.
inline double mean_pairwise_l2(const torch::Tensor& x) {
  const int64_t n = x.size(0);
  if (n < 2) throw InvalidInput("pairwise statistic needs >= 2 samples");
  auto flat = x.detach().flatten(1).to(torch::kDouble);
  auto d = torch::cdist(flat, flat);
  return d.sum().item<double>() / static_cast<double>(n * (n - 1));
}

// ---------------------------------------------------------------------------
// Schedule

struct Phase {
  int stage = 0;
  int epochs = 0;
  bool fade = false;  // blend_alpha ramps 0 -> 1 over the phase
};

inline std::vector<Phase> schedule(const TrainConfig& c) {
  std::vector<Phase> out;
  if (!c.progressive()) {
    TrainConfig ref = c;
    ref.order = ScheduleOrder::fade_then_stabilize;
    int total = ref.stage0_epochs() + (c.stages - 1) * (c.epochs_train_per_stage + c.epochs_blend_per_stage);
    out.push_back({c.final_stage(), total, false});
    return out;
  }
  if (c.order == ScheduleOrder::fade_then_stabilize) {
    out.push_back({0, c.stage0_epochs(), false});
    for (int s = 1; s < c.stages; ++s) {
      out.push_back({s, c.epochs_blend_per_stage, true});
      out.push_back({s, c.epochs_train_per_stage, false});
    }
  } else {
    // Train at the current stage, then fade into the next; the final stage
    // spends its blending budget as further training.
    out.push_back({0, c.stage0_epochs(), false});
    for (int s = 1; s < c.stages; ++s) {
      if (s > 1) out.push_back({s - 1, c.epochs_train_per_stage, false});
      out.push_back({s, c.epochs_blend_per_stage, true});
    }
    if (c.stages > 1) out.push_back({c.final_stage(), c.epochs_train_per_stage + c.epochs_blend_per_stage, false});
  }
  std::erase_if(out, [](const Phase& p) { return p.epochs == 0 && !p.fade; });
  return out;
}

inline int total_epochs(const std::vector<Phase>& phases) {
  int n = 0;
  for (const auto& p : phases) n += p.epochs;
  return n;
}

// ---------------------------------------------------------------------------
// Metrics

struct IterationRecord {
  int64_t iteration = 0;
  int epoch = 0;
  int stage = 0;
  double alpha = 1.0;
  double critic_loss = 0.0;
  double wasserstein = 0.0;
  double gp = 0.0;
  double drift = 0.0;
  std::optional<double> gen_loss;   // set when a generator update followed
  int critic_updates_before_gen = 0;  // critic updates since the previous generator update
  double time_s = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  int stage = 0;
  double diversity = 0.0;       // generated mean pairwise L2
  double real_diversity = 0.0;  // same statistic on real patches
  double diversity_ratio = 0.0;
  bool collapse = false;
  double time_s = 0.0;
};

class MetricsLog {
 public:
  void append(IterationRecord r) {
    check_time(r.time_s);
    iterations_.push_back(std::move(r));
  }
  void append(EpochRecord r) {
    check_time(r.time_s);
    epochs_.push_back(r);
  }
  const std::vector<IterationRecord>& iterations() const { return iterations_; }
  const std::vector<EpochRecord>& epochs() const { return epochs_; }
  bool empty() const { return iterations_.empty() && epochs_.empty(); }

  int64_t generator_updates() const {
    return std::count_if(iterations_.begin(), iterations_.end(), [](const auto& r) { return r.gen_loss.has_value(); });
  }

  static json to_json(const IterationRecord& r) {
    json j = {{"type", "iteration"},       {"iteration", r.iteration}, {"epoch", r.epoch},
              {"stage", r.stage},          {"alpha", r.alpha},         {"critic_loss", r.critic_loss},
              {"wasserstein", r.wasserstein}, {"gp", r.gp},           {"drift", r.drift},
              {"time_s", r.time_s}};
    if (r.gen_loss) {
      j["gen_loss"] = *r.gen_loss;
      j["critic_updates_before_gen"] = r.critic_updates_before_gen;
    }
    return j;
  }
  static json to_json(const EpochRecord& r) {
    return {{"type", "epoch"},
            {"epoch", r.epoch},
            {"stage", r.stage},
            {"diversity", r.diversity},
            {"real_diversity", r.real_diversity},
            {"diversity_ratio", r.diversity_ratio},
            {"collapse", r.collapse},
            {"time_s", r.time_s}};
  }

  // Line-delimited JSON, records in time order.
  void write_jsonl(std::ostream& os) const {
    std::size_t e = 0;
    for (const auto& r : iterations_) {
      while (e < epochs_.size() && epochs_[e].time_s < r.time_s) os << to_json(epochs_[e++]).dump() << '\n';
      os << to_json(r).dump() << '\n';
    }
    while (e < epochs_.size()) os << to_json(epochs_[e++]).dump() << '\n';
  }

 private:
  void check_time(double t) {
    if (t < last_time_) throw InvalidInput("metrics timestamps must be monotone");
    last_time_ = t;
  }
  std::vector<IterationRecord> iterations_;
  std::vector<EpochRecord> epochs_;
  double last_time_ = 0.0;
};

// ---------------------------------------------------------------------------
// Data

struct TrainingData {
  torch::Tensor patches;  // [N, 1, R, R, R] float32 in [-1, 1]
  float voxel_size_um = 164.0f;
  volcore::CalibrationRange range;

  int64_t size() const { return patches.defined() ? patches.size(0) : 0; }
  int64_t resolution() const { return patches.size(-1); }

  void validate(const TrainConfig& c) const {
    if (size() == 0) throw InvalidInput("training dataset is empty");
    if (patches.dim() != 5 || patches.size(1) != 1 || patches.size(2) != patches.size(3) ||
        patches.size(3) != patches.size(4))
      throw InvalidInput("training patches must have shape [N,1,R,R,R]");
    if (resolution() < 32) throw InvalidInput("dataset resolution below 32^3");
    if (resolution() % genmodels::resolution_for(c.final_stage()) != 0)
      throw InvalidInput("dataset resolution not a multiple of the final stage resolution");
  }

  static TrainingData from_patches(const std::vector<volcore::NormalizedPatch>& ps,
                                   const volcore::CalibrationRange& range = {}) {
    if (ps.empty()) throw InvalidInput("training dataset is empty");
    const int64_t r = static_cast<int64_t>(ps.front().edge());
    auto t = torch::empty({static_cast<int64_t>(ps.size()), 1, r, r, r});
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (static_cast<int64_t>(ps[i].edge()) != r) throw InvalidInput("patches differ in size");
      auto v = ps[i].values();
      std::memcpy(t[static_cast<int64_t>(i)].data_ptr<float>(), v.data(), v.size() * sizeof(float));
    }
    return {t, ps.front().voxel_size_um(), range};
  }
};

// ---------------------------------------------------------------------------
// Optimizer state export

inline void export_adam(const torch::optim::Adam& opt, const torch::nn::Module& m, const std::string& prefix,
                        checkpoint::TensorMap& out, std::map<std::string, int64_t>& steps) {
  int64_t step = 0;
  for (const auto& item : m.named_parameters()) {
    auto it = opt.state().find(item.value().unsafeGetTensorImpl());
    if (it == opt.state().end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    out[prefix + "/" + item.key() + "/exp_avg"] = s.exp_avg().detach().clone();
    out[prefix + "/" + item.key() + "/exp_avg_sq"] = s.exp_avg_sq().detach().clone();
    step = std::max(step, s.step());
  }
  steps[prefix] = step;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;  // per-stage and final checkpoints
  std::function<void(const std::string&)> progress;     // human-readable progress lines
  torch::Device device = torch::kCPU;
};

struct TrainResult {
  std::vector<checkpoint::Checkpoint> checkpoints;  // one per completed stage, last = final
  MetricsLog log;
  double seconds = 0.0;
  const checkpoint::Checkpoint& final_checkpoint() const { return checkpoints.back(); }
};

// Fails with ConfigError when the critic cannot be differentiated twice.
inline void verify_second_order(Critic& critic, int64_t r, torch::Generator& gen) {
  try {
    auto x = torch::zeros({2, 1, r, r, r});
    auto gp = gradient_penalty([&](const torch::Tensor& t) { return critic->forward(t); }, x, x + 0.1, 1.0, gen);
    auto g = torch::autograd::grad({gp}, critic->parameters(), {}, false, false, true);
    (void)g;
  } catch (const c10::Error& e) {
    throw ConfigError(std::string("critic does not support second-order gradients: ") + e.what_without_backtrace());
  }
}

namespace detail {

inline torch::optim::Adam make_adam(const std::vector<torch::Tensor>& params, const TrainConfig& c) {
  return torch::optim::Adam(params,
                            torch::optim::AdamOptions(c.learning_rate).betas({c.adam_beta1, c.adam_beta2}).eps(1e-8));
}

inline std::vector<std::string> names_not_in(const torch::nn::Module& m, const std::vector<std::string>& known) {
  std::vector<std::string> out;
  for (const auto& item : m.named_parameters())
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) out.push_back(item.key());
  return out;
}

inline std::vector<std::string> names_of(const torch::nn::Module& m) {
  std::vector<std::string> out;
  for (const auto& item : m.named_parameters()) out.push_back(item.key());
  return out;
}

inline std::vector<torch::Tensor> params_named(const torch::nn::Module& m, const std::vector<std::string>& names) {
  auto all = m.named_parameters();
  std::vector<torch::Tensor> out;
  for (const auto& n : names) out.push_back(all[n]);
  return out;
}

}  // namespace detail

inline TrainResult train_progressive(const TrainingData& data, const TrainConfig& config,
                                     const TrainOptions& options = {}) {
  config.validate();
  data.validate(config);
  const auto t0 = std::chrono::steady_clock::now();
  auto now = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  auto say = [&](const std::string& s) {
    if (options.progress) options.progress(s);
  };

  const auto device = options.device;
  const auto phases = schedule(config);
  const std::string hash = config_hash(config);
  const json config_json = to_json(config);

  torch::manual_seed(config.seed);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed ^ 0x9e3779b97f4a7c15ull);
  std::mt19937_64 order_rng(config.seed);

  const int start_stage = phases.front().stage;
  Generator g(config.network, start_stage);
  Critic d(config.network, start_stage);
  Generator ema = genmodels::clone(g);
  g->to(device);
  d->to(device);
  ema->to(device);
  for (auto& p : ema->parameters()) p.requires_grad_(false);
  verify_second_order(d, g->resolution(), gen);

  auto opt_g = detail::make_adam(g->parameters(), config);
  auto opt_d = detail::make_adam(d->parameters(), config);

  TrainResult result;
  MetricsLog& log = result.log;
  const auto batch = static_cast<int64_t>(config.batch_size);
  const int64_t n = data.size();
  const int64_t steps_per_epoch = std::max<int64_t>(1, n / batch);
  const bool use_gp = config.variant == Variant::pwgan_gp || config.variant == Variant::wgan_gp;
  const bool use_drift = use_gp;

  int64_t iteration = 0;
  int epoch = 0;
  int critic_since_gen = 0;
  int64_t gen_updates = 0;
  torch::Tensor stage_data, real_div_set;
  int data_stage = -1;
  double real_div = 0.0;

  auto checkpoint_now = [&](double alpha) {
    checkpoint::Checkpoint ck;
    ck.network = config.network;
    ck.stage = {g->stage(), alpha};
    ck.epoch = epoch;
    ck.variant = to_string(config.variant);
    ck.config_hash = hash;
    ck.train_config = config_json;
    ck.generator = checkpoint::state_of(*g);
    ck.critic = checkpoint::state_of(*d);
    ck.ema = checkpoint::state_of(*ema);
    export_adam(opt_g, *g, "adam_g", ck.optimizer, ck.optimizer_steps);
    export_adam(opt_d, *d, "adam_d", ck.optimizer, ck.optimizer_steps);
    for (auto* m : {&ck.generator, &ck.critic, &ck.ema, &ck.optimizer})
      for (auto& [_, t] : *m) t = t.to(torch::kCPU);
    if (options.checkpoint_dir) {
      std::filesystem::create_directories(*options.checkpoint_dir);
      checkpoint::save(ck, *options.checkpoint_dir / ("stage" + std::to_string(ck.stage.stage) + ".bgck"));
    }
    result.checkpoints.push_back(std::move(ck));
  };

  for (std::size_t pi = 0; pi < phases.size(); ++pi) {
    const Phase& phase = phases[pi];
    if (phase.stage != g->stage()) {
      checkpoint_now(1.0);
      const auto g_known = detail::names_of(*g);
      const auto d_known = detail::names_of(*d);
      g->grow(phase.stage);
      d->grow(phase.stage);
      ema->grow(phase.stage);
      g->to(device);
      d->to(device);
      ema->to(device);
      const auto g_new = detail::names_not_in(*g, g_known);
      const auto d_new = detail::names_not_in(*d, d_known);
      copy_parameters(*ema, *g, g_new);
      for (auto& p : ema->parameters()) p.requires_grad_(false);
      opt_g.add_param_group(torch::optim::OptimizerParamGroup(detail::params_named(*g, g_new)));
      opt_d.add_param_group(torch::optim::OptimizerParamGroup(detail::params_named(*d, d_new)));
      say("grew to stage " + std::to_string(phase.stage) + " (" + std::to_string(g->resolution()) + "^3)");
    }
    if (data_stage != phase.stage) {
      torch::NoGradGuard ng;
      stage_data = pool_to_resolution(data.patches, g->resolution()).contiguous().to(device);
      std::mt19937_64 pick(config.seed + 17);
      std::vector<int64_t> idx(static_cast<std::size_t>(n));
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(static_cast<std::size_t>(std::min<int64_t>(n, config.diversity_samples)));
      real_div_set = stage_data.index_select(0, torch::tensor(idx).to(device));
      real_div = mean_pairwise_l2(real_div_set);
      data_stage = phase.stage;
    }

    const int64_t phase_iters = static_cast<int64_t>(phase.epochs) * steps_per_epoch;
    int64_t phase_iter = 0;
    for (int e = 0; e < phase.epochs; ++e) {
      std::vector<int64_t> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), order_rng);
      auto perm_t = torch::tensor(perm).to(device);
      double epoch_w = 0.0;
      for (int64_t step = 0; step < steps_per_epoch; ++step, ++phase_iter, ++iteration) {
        const double alpha =
            phase.fade ? std::min(1.0, static_cast<double>(phase_iter) / static_cast<double>(phase_iters)) : 1.0;
        auto idx = perm_t.slice(0, step * batch, std::min(n, (step + 1) * batch));
        auto real = stage_data.index_select(0, idx);
        const int64_t b = real.size(0);

        // critic update
        torch::Tensor fake;
        {
          torch::NoGradGuard ng;
          fake = g->forward(genmodels::sample_latent_batch(b, config.network.latent_dim, gen).to(device), alpha);
        }
        auto d_real = d->forward(real, alpha);
        auto d_fake = d->forward(fake, alpha);
        IterationRecord rec;
        rec.iteration = iteration;
        rec.epoch = epoch;
        rec.stage = g->stage();
        rec.alpha = alpha;
        torch::Tensor loss_d;
        if (config.variant == Variant::gan) {
          loss_d = baseline_losses(Variant::gan, d_real, d_fake).critic_core;
          rec.wasserstein = (d_real.mean() - d_fake.mean()).item<double>();
        } else {
          auto w = wasserstein_losses(d_real, d_fake);
          loss_d = w.critic_core;
          rec.wasserstein = w.estimate.item<double>();
        }
        if (use_gp) {
          auto gp = gradient_penalty([&](const torch::Tensor& x) { return d->forward(x, alpha); }, real, fake,
                                     config.gp_lambda, gen);
          rec.gp = gp.item<double>();
          loss_d = loss_d + gp;
        }
        if (use_drift) {
          auto dr = drift_penalty(d_real, config.drift_epsilon);
          rec.drift = dr.item<double>();
          loss_d = loss_d + dr;
        }
        opt_d.zero_grad();
        loss_d.backward();
        opt_d.step();
        if (config.variant == Variant::wgan_clip) clip_weights(*d, config.clip_value);
        rec.critic_loss = loss_d.item<double>();
        epoch_w += rec.wasserstein;
        ++critic_since_gen;

        // generator update after n_critic critic updates
        if (critic_since_gen == config.n_critic) {
          for (auto& p : d->parameters()) p.requires_grad_(false);
          auto z = genmodels::sample_latent_batch(batch, config.network.latent_dim, gen).to(device);
          auto score = d->forward(g->forward(z, alpha), alpha);
          torch::Tensor loss_g = config.variant == Variant::gan
                                     ? baseline_losses(Variant::gan, torch::ones_like(score), score).gen_core
                                     : -score.mean();
          opt_g.zero_grad();
          loss_g.backward();
          opt_g.step();
          for (auto& p : d->parameters()) p.requires_grad_(true);
          ema_update(*ema, *g, ema_decay_at(config.ema_decay, gen_updates++, config.ema_warmup));
          rec.gen_loss = loss_g.item<double>();
          rec.critic_updates_before_gen = critic_since_gen;
          critic_since_gen = 0;
        }
        rec.time_s = now();
        log.append(std::move(rec));
      }

      // diversity of EMA samples against the real statistic
      EpochRecord er;
      er.epoch = epoch;
      er.stage = g->stage();
      {
        torch::NoGradGuard ng;
        const double alpha = phase.fade ? 1.0 * phase_iter / std::max<int64_t>(1, phase_iters) : 1.0;
        auto z = genmodels::sample_latent_batch(config.diversity_samples, config.network.latent_dim, gen).to(device);
        er.diversity = mean_pairwise_l2(ema->forward(z, alpha));
      }
      er.real_diversity = real_div;
      er.diversity_ratio = real_div > 0 ? er.diversity / real_div : 0.0;
      er.collapse = er.diversity_ratio < config.collapse_ratio;
      er.time_s = now();
      log.append(er);
      char line[200];
      std::snprintf(line, sizeof line, "epoch %d/%d stage %d: W=%.4f diversity=%.3f%s (%.0fs)", epoch + 1,
                    total_epochs(phases), g->stage(), epoch_w / steps_per_epoch, er.diversity_ratio,
                    er.collapse ? " COLLAPSE" : "", er.time_s);
      say(line);
      ++epoch;
    }
  }
  checkpoint_now(1.0);
  if (options.checkpoint_dir) checkpoint::save(result.checkpoints.back(), *options.checkpoint_dir / "final.bgck");
  result.seconds = now();
  return result;
}

// Diversity check on a trained checkpoint: ratio of generated to real mean
// pairwise L2 at the checkpoint's resolution.
struct DiversityReport {
  double generated = 0.0;
  double real = 0.0;
  double ratio = 0.0;
  bool collapse = false;
};

inline DiversityReport diversity(const checkpoint::Checkpoint& ck, const TrainingData& data, int samples,
                                 std::uint64_t seed, double collapse_ratio = 0.2, bool use_ema = true) {
  auto g = checkpoint::load_generator(ck, use_ema);
  torch::NoGradGuard ng;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto fake = g->forward(genmodels::sample_latent_batch(samples, ck.network.latent_dim, gen), ck.stage.blend_alpha);
  std::mt19937_64 pick(seed);
  std::vector<int64_t> idx(static_cast<std::size_t>(data.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), pick);
  idx.resize(static_cast<std::size_t>(std::min<int64_t>(data.size(), samples)));
  auto real = pool_to_resolution(data.patches.index_select(0, torch::tensor(idx)), ck.stage.resolution());
  DiversityReport r;
  r.generated = mean_pairwise_l2(fake);
  r.real = mean_pairwise_l2(real);
  r.ratio = r.real > 0 ? r.generated / r.real : 0.0;
  r.collapse = r.ratio < collapse_ratio;
  return r;
}

}  // namespace bonegan::training
