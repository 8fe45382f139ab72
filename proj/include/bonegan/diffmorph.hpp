#pragma once

// Differentiable (smooth) structural parameters and the style vector
//   P(x) = < a1 BMD, a2 BMD.SD, a3 BVTV*, a4 TMD* >
// built from torch operations so gradients reach the voxels, and through
// them the generator that produced the voxels.

#include <torch/torch.h>

#include <array>
#include <cmath>
#include <string>

#include "bonegan/error.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::diffmorph {

struct SmoothParams {
  double epsilon = 1e-4;  // softplus fuzziness
  double sigma = 10.0;    // mg/cm^3
  double t = 225.0;       // mg/cm^3
  std::array<double, 4> alphas = {1.0, 1.0, 1.0, 1.0};

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw InvalidInput("epsilon must be finite and > 0");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidInput("sigma must be finite and > 0");
    if (!std::isfinite(t)) throw InvalidInput("threshold must be finite");
    for (double a : alphas)
      if (!(a > 0.0) || !std::isfinite(a)) throw InvalidInput("alphas must be finite and > 0");
  }
};

// SP(a) = eps * ln(1 + exp(a/eps - 1)) + eps, evaluated as
// eps * (max(u,0) + log1p(exp(-|u|))) + eps with u = a/eps - 1.
inline double softplus_eps(double a, double epsilon) {
  const double u = a / epsilon - 1.0;
  return epsilon * (std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u)))) + epsilon;
}

inline double smooth_heaviside(double a, double t, double sigma) {
  return 1.0 / (1.0 + std::exp((t - a) / sigma));
}

inline torch::Tensor softplus_eps(const torch::Tensor& a, double epsilon) {
  const auto u = a / epsilon - 1.0;
  // logaddexp(u, 0) = ln(1 + e^u) without overflow and with a smooth gradient.
  return epsilon * torch::logaddexp(u, torch::zeros_like(u)) + epsilon;
}

inline torch::Tensor smooth_heaviside(const torch::Tensor& a, double t, double sigma) {
  return torch::sigmoid((a - t) / sigma);
}

namespace detail {
inline void require_nonempty(const torch::Tensor& x, int64_t min_count = 1) {
  if (!x.defined() || x.numel() < min_count)
    throw InvalidInput("smooth parameters need at least " + std::to_string(min_count) + " voxels");
}
}  // namespace detail

// All reductions below run over every element of `x` (densities, mg/cm^3).

inline torch::Tensor bmd(const torch::Tensor& x) {
  detail::require_nonempty(x);
  return x.mean();
}

// Sample standard deviation in the sum / sum-of-squares form.
inline torch::Tensor bmd_sd(const torch::Tensor& x) {
  detail::require_nonempty(x, 2);
  const double n = static_cast<double>(x.numel());
  const auto s1 = x.sum();
  const auto s2 = (x * x).sum();
  return torch::sqrt(torch::clamp_min((s2 - s1 * s1 / n) / (n - 1.0), 0.0));
}

inline torch::Tensor bvtv_star(const torch::Tensor& x, double t, double sigma) {
  detail::require_nonempty(x);
  return smooth_heaviside(x, t, sigma).mean();
}

inline torch::Tensor tmd_star(const torch::Tensor& x, double t, double sigma, double epsilon) {
  detail::require_nonempty(x);
  const auto h = smooth_heaviside(x, t, sigma);
  return (h * x).sum() / softplus_eps(h.sum(), epsilon);
}

// Returns a 1-D tensor of 4 components in the dtype of `x`.
inline torch::Tensor p_vector(const torch::Tensor& x, const SmoothParams& p = {}) {
  p.validate();
  detail::require_nonempty(x, 2);
  return torch::stack({p.alphas[0] * bmd(x), p.alphas[1] * bmd_sd(x),
                       p.alphas[2] * bvtv_star(x, p.t, p.sigma),
                       p.alphas[3] * tmd_star(x, p.t, p.sigma, p.epsilon)});
}

// P of a normalized ([-1,1]) tensor; the affine denormalization is part of
// the differentiable graph and runs in double precision.
inline torch::Tensor p_vector_normalized(const torch::Tensor& x_normalized, const SmoothParams& p = {},
                                         const volcore::CalibrationRange& range = {}) {
  range.validate();
  const auto dens = (x_normalized.to(torch::kDouble) + 1.0) * range.scale() + range.lo;
  return p_vector(dens, p);
}

// Batched variant: x has shape [B, ...]; returns [B, 4].
inline torch::Tensor p_vector_batch(const torch::Tensor& x, const SmoothParams& p = {}) {
  std::vector<torch::Tensor> rows;
  rows.reserve(static_cast<std::size_t>(x.size(0)));
  for (int64_t i = 0; i < x.size(0); ++i) rows.push_back(p_vector(x[i], p));
  return torch::stack(rows);
}

inline torch::Tensor to_tensor(const volcore::DensityVolume& v, torch::ScalarType dtype = torch::kDouble) {
  const auto& d = v.dims();
  return torch::from_blob(const_cast<float*>(v.values().data()),
                          {static_cast<int64_t>(d.nz), static_cast<int64_t>(d.ny), static_cast<int64_t>(d.nx)},
                          torch::kFloat)
      .to(dtype);
}

inline std::array<double, 4> p_vector(const volcore::DensityVolume& v, const SmoothParams& p = {}) {
  torch::NoGradGuard ng;
  const auto t = p_vector(to_tensor(v), p).contiguous();
  return {t[0].item<double>(), t[1].item<double>(), t[2].item<double>(), t[3].item<double>()};
}

// Alphas that scale each component by the inverse of its spread over a
// reference corpus (one row per sample of raw, unit-alpha components).
inline std::array<double, 4> alphas_from_spread(const std::vector<std::array<double, 4>>& raw) {
  if (raw.size() < 2) throw InvalidInput("need at least two samples to derive alphas");
  std::array<double, 4> out{};
  for (int c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (const auto& r : raw) mean += r[c];
    mean /= static_cast<double>(raw.size());
    double ss = 0.0;
    for (const auto& r : raw) ss += (r[c] - mean) * (r[c] - mean);
    const double sd = std::sqrt(ss / static_cast<double>(raw.size() - 1));
    if (!(sd > 0.0)) throw InvalidInput("component " + std::to_string(c) + " has zero spread");
    out[c] = 1.0 / sd;
  }
  return out;
}

}  // namespace bonegan::diffmorph
