#pragma once

// Progressive 3D generator and critic.
//
// Per stage s (resolution 4 * 2^s) with channel width w[s]:
//   generator  stage 0: latent -> dense(w0 * 4^3) -> conv3 ; stage s>0: up2 -> conv3 -> conv3
//              every conv / dense is followed by leaky ReLU(0.2) and pixel norm,
//              head: conv1 -> tanh
//   critic     from-volume: conv1(1 -> w[s]) ; stage s>0: conv3 -> conv3 -> avgpool2
//              stage 0: conv3 -> dense(w0 * 4^3 -> 1), no output activation
// Weights use the equalized learning-rate parameterization (N(0,1) storage,
// He scale applied at runtime).

#include <torch/torch.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "bonegan/error.hpp"

namespace bonegan::genmodels {

inline constexpr int kLatentDim = 32;
inline constexpr double kLeakySlope = 0.2;

struct NetworkConfig {
  int latent_dim = kLatentDim;
  // Coarse-to-fine channel widths; one entry per stage. A fifth entry enables
  // a 64^3 stage (experimental, no quality guarantees).
  std::vector<int64_t> widths = {48, 48, 32, 16};
  bool critic_sigmoid = false;  // adversarial-loss baseline only

  int max_stage() const { return static_cast<int>(widths.size()) - 1; }
  void validate() const {
    if (latent_dim < 1) throw InvalidInput("latent_dim must be >= 1");
    if (widths.empty() || widths.size() > 5) throw InvalidInput("need 1..5 stage widths");
    for (auto w : widths)
      if (w < 1) throw InvalidInput("channel widths must be >= 1");
  }
};

inline int64_t resolution_for(int stage) { return int64_t{4} << stage; }

struct StageConfig {
  int stage = 0;
  double blend_alpha = 1.0;

  int64_t resolution() const { return resolution_for(stage); }
  void validate(const NetworkConfig& net) const {
    if (stage < 0 || stage > net.max_stage())
      throw InvalidInput("invalid stage index " + std::to_string(stage) + " (max " +
                         std::to_string(net.max_stage()) + ")");
    if (!(blend_alpha >= 0.0 && blend_alpha <= 1.0)) throw InvalidInput("blend_alpha must lie in [0,1]");
  }
};

// ---------------------------------------------------------------------------
// Latent vectors

class LatentVector {
 public:
  explicit LatentVector(std::vector<double> z) : z_(std::move(z)) {
    if (z_.empty()) throw InvalidInput("latent vector must be nonempty");
    double n2 = 0.0;
    for (double v : z_) {
      if (!std::isfinite(v)) throw InvalidInput("latent vector has non-finite component");
      n2 += v * v;
    }
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
      throw InvalidInput("latent vector must have unit norm (got " + std::to_string(std::sqrt(n2)) + ")");
  }

  // Projects an arbitrary nonzero vector onto the unit sphere.
  static LatentVector normalized(std::vector<double> z) {
    double n2 = 0.0;
    for (double v : z) n2 += v * v;
    if (!(n2 > 0.0) || !std::isfinite(n2)) throw InvalidInput("cannot normalize zero/non-finite latent");
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : z) v *= inv;
    return LatentVector(std::move(z));
  }

  std::size_t dim() const { return z_.size(); }
  const std::vector<double>& values() const { return z_; }
  double operator[](std::size_t i) const { return z_[i]; }

  torch::Tensor tensor(torch::ScalarType dtype = torch::kFloat) const {
    return torch::tensor(z_, torch::kDouble).to(dtype).unsqueeze(0);
  }

  friend bool operator==(const LatentVector&, const LatentVector&) = default;

 private:
  std::vector<double> z_;
};

// Isotropic Gaussian draw normalized to unit length (uniform on the sphere).
inline LatentVector sample_latent(std::mt19937_64& rng, int dim = kLatentDim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    std::vector<double> z(static_cast<std::size_t>(dim));
    double n2 = 0.0;
    for (double& v : z) {
      v = normal(rng);
      n2 += v * v;
    }
    if (n2 > 1e-12) return LatentVector::normalized(std::move(z));
  }
}

inline torch::Tensor stack_latents(const std::vector<LatentVector>& zs, torch::ScalarType dtype = torch::kFloat) {
  std::vector<torch::Tensor> rows;
  rows.reserve(zs.size());
  for (const auto& z : zs) rows.push_back(z.tensor(dtype));
  return torch::cat(rows, 0);
}

// Batch of unit-norm latents from torch's generator (training path).
inline torch::Tensor sample_latent_batch(int64_t n, int dim, torch::Generator& gen) {
  auto z = at::normal(0.0, 1.0, {n, dim}, gen);
  return z / z.norm(2, 1, true).clamp_min(1e-12);
}

// ---------------------------------------------------------------------------
// Layers

// Divide each location's channel vector by its RMS. Channel dim is 1.
inline torch::Tensor pixel_norm(const torch::Tensor& x, double eps = 1e-8) {
  if (x.dim() < 2) throw InvalidInput("pixel_norm needs a channel dimension");
  return x * torch::rsqrt(x.pow(2).mean(1, true) + eps);
}

class EqConv3dImpl : public torch::nn::Cloneable<EqConv3dImpl> {
 public:
  EqConv3dImpl(int64_t in, int64_t out, int64_t kernel, double gain = std::sqrt(2.0))
      : in_(in), out_(out), kernel_(kernel),
        scale_(gain / std::sqrt(static_cast<double>(in * kernel * kernel * kernel))) {
    reset();
  }
  void reset() override {
    weight = register_parameter("weight", torch::randn({out_, in_, kernel_, kernel_, kernel_}));
    bias = register_parameter("bias", torch::zeros({out_}));
  }
  torch::Tensor forward(const torch::Tensor& x) {
    return torch::conv3d(x, weight * scale_, bias, 1, kernel_ / 2);
  }
  torch::Tensor weight, bias;

 private:
  int64_t in_, out_, kernel_;
  double scale_;
};
TORCH_MODULE(EqConv3d);

class EqLinearImpl : public torch::nn::Cloneable<EqLinearImpl> {
 public:
  EqLinearImpl(int64_t in, int64_t out, double gain = std::sqrt(2.0))
      : in_(in), out_(out), scale_(gain / std::sqrt(static_cast<double>(in))) {
    reset();
  }
  void reset() override {
    weight = register_parameter("weight", torch::randn({out_, in_}));
    bias = register_parameter("bias", torch::zeros({out_}));
  }
  torch::Tensor forward(const torch::Tensor& x) { return torch::linear(x, weight * scale_, bias); }
  torch::Tensor weight, bias;

 private:
  int64_t in_, out_;
  double scale_;
};
TORCH_MODULE(EqLinear);

inline torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, kLeakySlope); }
inline torch::Tensor upsample2(const torch::Tensor& x) {
  return x.repeat_interleave(2, 2).repeat_interleave(2, 3).repeat_interleave(2, 4);
}
inline torch::Tensor downsample2(const torch::Tensor& x) { return torch::avg_pool3d(x, 2); }

// ---------------------------------------------------------------------------
// Generator

class GeneratorImpl : public torch::nn::Cloneable<GeneratorImpl> {
 public:
  explicit GeneratorImpl(NetworkConfig cfg = {}, int stage = 0) : cfg_(std::move(cfg)), stage_(stage) {
    cfg_.validate();
    StageConfig{stage_, 1.0}.validate(cfg_);
    reset();
  }

  void reset() override {
    dense_ = nullptr;
    convs_.clear();
    heads_.clear();
    const auto& w = cfg_.widths;
    dense_ = register_module("dense", EqLinear(cfg_.latent_dim, w[0] * 64));
    add_stage_layers(0);
    for (int s = 1; s <= stage_; ++s) add_stage_layers(s);
  }

  int stage() const { return stage_; }
  int64_t resolution() const { return resolution_for(stage_); }
  const NetworkConfig& config() const { return cfg_; }

  // Appends the next stage. Existing parameters are untouched.
  void grow(int next_stage) {
    if (next_stage != stage_ + 1)
      throw InvalidInput("grow must move to stage " + std::to_string(stage_ + 1) + ", got " +
                         std::to_string(next_stage));
    if (next_stage > cfg_.max_stage())
      throw InvalidInput("no stage " + std::to_string(next_stage) + " (max " + std::to_string(cfg_.max_stage()) +
                         ")");
    stage_ = next_stage;
    add_stage_layers(stage_);
  }

  // z: [B, latent_dim] -> [B, 1, r, r, r] with r = resolution(), values in [-1, 1].
  torch::Tensor forward(const torch::Tensor& z, double alpha = 1.0) {
    TORCH_CHECK(z.dim() == 2 && z.size(1) == cfg_.latent_dim, "generator expects [B, latent_dim] input");
    auto h = pixel_norm(z);
    h = pixel_norm(lrelu(dense_->forward(h))).view({z.size(0), cfg_.widths[0], 4, 4, 4});
    h = block(0, h);
    for (int s = 1; s < stage_; ++s) h = block(s, h);
    if (stage_ == 0) return torch::tanh(heads_[0]->forward(h));
    auto fresh = torch::tanh(heads_[stage_]->forward(block(stage_, h)));
    if (alpha >= 1.0) return fresh;
    auto previous = upsample2(torch::tanh(heads_[stage_ - 1]->forward(h)));
    return alpha * fresh + (1.0 - alpha) * previous;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

 private:
  void add_stage_layers(int s) {
    const auto& w = cfg_.widths;
    const std::string tag = std::to_string(s);
    std::vector<EqConv3d> layers;
    if (s == 0) {
      layers.push_back(register_module("b0_conv0", EqConv3d(w[0], w[0], 3)));
    } else {
      layers.push_back(register_module("b" + tag + "_conv0", EqConv3d(w[s - 1], w[s], 3)));
      layers.push_back(register_module("b" + tag + "_conv1", EqConv3d(w[s], w[s], 3)));
    }
    convs_.push_back(std::move(layers));
    heads_.push_back(register_module("head" + tag, EqConv3d(w[s], 1, 1, 1.0)));
  }

  torch::Tensor block(int s, torch::Tensor h) {
    if (s > 0) h = upsample2(h);
    for (auto& c : convs_[static_cast<std::size_t>(s)]) h = pixel_norm(lrelu(c->forward(h)));
    return h;
  }

  NetworkConfig cfg_;
  int stage_;
  EqLinear dense_{nullptr};
  std::vector<std::vector<EqConv3d>> convs_;
  std::vector<EqConv3d> heads_;
};
TORCH_MODULE(Generator);

// ---------------------------------------------------------------------------
// Critic

class CriticImpl : public torch::nn::Cloneable<CriticImpl> {
 public:
  explicit CriticImpl(NetworkConfig cfg = {}, int stage = 0) : cfg_(std::move(cfg)), stage_(stage) {
    cfg_.validate();
    StageConfig{stage_, 1.0}.validate(cfg_);
    reset();
  }

  void reset() override {
    dense_ = nullptr;
    convs_.clear();
    from_.clear();
    dense_ = register_module("dense", EqLinear(cfg_.widths[0] * 64, 1, 1.0));
    add_stage_layers(0);
    for (int s = 1; s <= stage_; ++s) add_stage_layers(s);
  }

  int stage() const { return stage_; }
  int64_t resolution() const { return resolution_for(stage_); }
  const NetworkConfig& config() const { return cfg_; }

  void grow(int next_stage) {
    if (next_stage != stage_ + 1)
      throw InvalidInput("grow must move to stage " + std::to_string(stage_ + 1) + ", got " +
                         std::to_string(next_stage));
    if (next_stage > cfg_.max_stage())
      throw InvalidInput("no stage " + std::to_string(next_stage) + " (max " + std::to_string(cfg_.max_stage()) +
                         ")");
    stage_ = next_stage;
    add_stage_layers(stage_);
  }

  // x: [B, 1, r, r, r] -> [B]
  torch::Tensor forward(const torch::Tensor& x, double alpha = 1.0) {
    TORCH_CHECK(x.dim() == 5 && x.size(1) == 1 && x.size(2) == resolution(),
                "critic at stage ", stage_, " expects [B,1,", resolution(), "^3] input");
    auto h = block(stage_, lrelu(from_[stage_]->forward(x)));
    if (stage_ > 0 && alpha < 1.0) {
      auto skip = lrelu(from_[stage_ - 1]->forward(downsample2(x)));
      h = alpha * h + (1.0 - alpha) * skip;
    }
    for (int s = stage_ - 1; s >= 0; --s) h = block(s, h);
    auto out = dense_->forward(h.flatten(1)).squeeze(1);
    return cfg_.critic_sigmoid ? torch::sigmoid(out) : out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

 private:
  void add_stage_layers(int s) {
    const auto& w = cfg_.widths;
    const std::string tag = std::to_string(s);
    std::vector<EqConv3d> layers;
    if (s == 0) {
      layers.push_back(register_module("b0_conv0", EqConv3d(w[0], w[0], 3)));
    } else {
      layers.push_back(register_module("b" + tag + "_conv0", EqConv3d(w[s], w[s], 3)));
      layers.push_back(register_module("b" + tag + "_conv1", EqConv3d(w[s], w[s - 1], 3)));
    }
    convs_.push_back(std::move(layers));
    from_.push_back(register_module("from" + tag, EqConv3d(1, w[s], 1)));
  }

  torch::Tensor block(int s, torch::Tensor h) {
    for (auto& c : convs_[static_cast<std::size_t>(s)]) h = lrelu(c->forward(h));
    return s > 0 ? downsample2(h) : h;
  }

  NetworkConfig cfg_;
  int stage_;
  EqLinear dense_{nullptr};
  std::vector<std::vector<EqConv3d>> convs_;
  std::vector<EqConv3d> from_;
};
TORCH_MODULE(Critic);

inline Generator build_generator(const NetworkConfig& cfg, StageConfig stage) {
  stage.validate(cfg);
  return Generator(cfg, stage.stage);
}

inline Critic build_critic(const NetworkConfig& cfg, StageConfig stage) {
  stage.validate(cfg);
  return Critic(cfg, stage.stage);
}

// Deep copy with identical parameters.
inline Generator clone(const Generator& g) {
  return Generator(std::dynamic_pointer_cast<GeneratorImpl>(g->clone()));
}
inline Critic clone(const Critic& c) { return Critic(std::dynamic_pointer_cast<CriticImpl>(c->clone())); }

// Grows a copy; the input network is left unchanged.
inline Generator grow(const Generator& g, int next_stage) {
  auto out = clone(g);
  out->grow(next_stage);
  return out;
}
inline Critic grow(const Critic& c, int next_stage) {
  auto out = clone(c);
  out->grow(next_stage);
  return out;
}

}  // namespace bonegan::genmodels
