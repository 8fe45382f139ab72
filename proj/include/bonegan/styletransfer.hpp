#pragma once

// Content-preserving latent optimization: find z' minimizing
//   mu * ||x_t - G(z')||^2 + ||w_t - P(G(z'))||^2
// plus treatment trajectories and two-parameter sweeps built on top of it.

#include <torch/torch.h>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bonegan/diffmorph.hpp"
#include "bonegan/error.hpp"
#include "bonegan/genmodels.hpp"
#include "bonegan/lbfgs.hpp"
#include "bonegan/morphometry.hpp"
#include "bonegan/volcore.hpp"

namespace bonegan::style {

using Vector = Eigen::VectorXd;
using Style4 = std::array<double, 4>;  // BMD, BMD.SD, BVTV*, TMD*

inline constexpr std::array<const char*, 4> kComponentNames = {"bmd", "bmd_sd", "bvtv", "tmd"};
inline constexpr double kDefaultMu = 1e-4;
inline const double kLiteralMu = std::exp(-4.0);

inline int component_index(const std::string& name) {
  for (int i = 0; i < 4; ++i)
    if (name == kComponentNames[static_cast<std::size_t>(i)]) return i;
  throw InvalidInput("unknown style component '" + name + "' (expected bmd, bmd_sd, bvtv or tmd)");
}

inline Style4 weighted(const Style4& raw, const Style4& alphas) {
  return {raw[0] * alphas[0], raw[1] * alphas[1], raw[2] * alphas[2], raw[3] * alphas[3]};
}

struct StyleTarget {
  torch::Tensor content;  // normalized values, shape [r, r, r], double
  Style4 w{};             // alpha-weighted target
  double mu = kDefaultMu;

  void validate() const {
    if (!content.defined() || content.dim() != 3) throw InvalidInput("content must be a 3-D volume");
    if (content.min().item<double>() < -1.0 || content.max().item<double>() > 1.0)
      throw InvalidInput("content values must lie in [-1, 1]");
    for (double v : w)
      if (!std::isfinite(v)) throw InvalidInput("target parameters must be finite");
    if (!(mu >= 0.0) || !std::isfinite(mu)) throw InvalidInput("mu must be finite and >= 0");
  }
};

inline torch::Tensor content_tensor(const volcore::NormalizedPatch& p) {
  const auto& d = p.dims();
  if (!d.is_cubic()) throw InvalidInput("content volume must be cubic");
  const auto r = static_cast<int64_t>(d.nx);
  std::vector<double> v(p.values().begin(), p.values().end());
  return torch::tensor(v, torch::kDouble).view({r, r, r});
}

struct ObjectiveValue {
  double value = 0;
  double content = 0;  // ||x_t - G(z)||^2
  double style = 0;    // ||w_t - P(G(z))||
};

// A frozen double-precision copy of a trained generator together with the
// smooth parameter settings used to compute P.
class StyleModel {
 public:
  StyleModel(const genmodels::Generator& g, diffmorph::SmoothParams smooth = {}, volcore::CalibrationRange range = {},
             float voxel_size_um = volcore::kDefaultVoxelSizeUm)
      : g_(genmodels::clone(g)), smooth_(smooth), range_(range), voxel_size_um_(voxel_size_um) {
    smooth_.validate();
    range_.validate();
    g_->to(dtype_);
    g_->eval();
    for (auto& p : g_->parameters()) p.set_requires_grad(false);
  }

  int latent_dim() const { return g_->config().latent_dim; }
  int64_t resolution() const { return g_->resolution(); }
  int stage() const { return g_->stage(); }
  const diffmorph::SmoothParams& smooth() const { return smooth_; }
  const Style4& alphas() const { return smooth_.alphas; }
  void set_alphas(const Style4& a) {
    auto s = smooth_;
    s.alphas = a;
    s.validate();
    smooth_ = s;
  }
  const volcore::CalibrationRange& range() const { return range_; }

  // Evaluation precision of the generator and objective. float32 (the training
  // precision) by default; float64 costs about twice as much per evaluation.
  torch::ScalarType precision() const { return dtype_; }
  void set_precision(torch::ScalarType dtype) {
    if (dtype != torch::kDouble && dtype != torch::kFloat) throw InvalidInput("precision must be float32 or float64");
    dtype_ = dtype;
    g_->to(dtype_);
  }

  // Unit alphas spread-normalized over n generated samples.
  Style4 calibrate_alphas(int n = 64, std::uint64_t seed = 0) {
    if (n < 2) throw InvalidInput("need at least two samples to calibrate alphas");
    std::mt19937_64 rng(seed);
    std::vector<Style4> raw;
    for (int i = 0; i < n; ++i) raw.push_back(raw_params(to_vector(genmodels::sample_latent(rng, latent_dim()))));
    const auto a = diffmorph::alphas_from_spread(raw);
    set_alphas(a);
    return a;
  }

  torch::Tensor volume(const Vector& z) {
    torch::NoGradGuard ng;
    return g_->forward(to_tensor(z))[0][0];
  }
  volcore::NormalizedPatch patch(const Vector& z) {
    auto v = volume(z).to(torch::kFloat).contiguous().view(-1);
    std::vector<float> vals(v.data_ptr<float>(), v.data_ptr<float>() + v.numel());
    for (float& x : vals) x = std::clamp(x, -1.0f, 1.0f);
    return volcore::NormalizedPatch(volcore::cube(static_cast<std::size_t>(resolution())), voxel_size_um_,
                                    std::move(vals), volcore::Provenance::generated);
  }

  // Alpha-weighted P(G(z)).
  Style4 params(const Vector& z) {
    torch::NoGradGuard ng;
    return to_style(diffmorph::p_vector_normalized(volume(z), smooth_, range_));
  }
  // Unit-alpha P(G(z)).
  Style4 raw_params(const Vector& z) {
    auto s = smooth_;
    s.alphas = {1, 1, 1, 1};
    torch::NoGradGuard ng;
    return to_style(diffmorph::p_vector_normalized(volume(z), s, range_));
  }
  morphometry::ParamVector classic_params(const Vector& z) {
    return morphometry::compute_all(volcore::denormalize(patch(z), range_), morphometry::Threshold{smooth_.t});
  }

  // Objective and, when grad is non-null, its exact gradient w.r.t. z.
  ObjectiveValue objective(const Vector& z, const StyleTarget& t, Vector* grad = nullptr) {
    if (t.content.size(0) != resolution())
      throw InvalidInput("stage mismatch: content is " + std::to_string(t.content.size(0)) + "^3, generator emits " +
                         std::to_string(resolution()) + "^3");
    auto zt = to_tensor(z).set_requires_grad(grad != nullptr);
    torch::Tensor content, residual;
    {
      std::optional<torch::NoGradGuard> ng;
      if (!grad) ng.emplace();
      auto x = g_->forward(zt)[0][0];
      content = (t.content.to(dtype_) - x).pow(2).sum();
      const auto w = torch::tensor(std::vector<double>(t.w.begin(), t.w.end()), dtype_);
      residual = (w - diffmorph::p_vector_normalized(x, smooth_, range_)).pow(2).sum();
    }
    auto total = t.mu * content + residual;
    if (grad) {
      total.backward();
      auto gz = zt.grad().to(torch::kDouble).contiguous();
      *grad = Eigen::Map<const Vector>(gz.data_ptr<double>(), gz.numel());
    }
    return {total.item<double>(), content.item<double>(), std::sqrt(residual.item<double>())};
  }

  static Vector to_vector(const genmodels::LatentVector& z) {
    return Eigen::Map<const Vector>(z.values().data(), static_cast<Eigen::Index>(z.dim()));
  }

 private:
  torch::Tensor to_tensor(const Vector& z) const {
    if (z.size() != latent_dim()) throw InvalidInput("latent dimension mismatch");
    return torch::from_blob(const_cast<double*>(z.data()), {1, z.size()}, torch::kDouble).to(dtype_, false, true);
  }
  static Style4 to_style(const torch::Tensor& p) {
    auto c = p.contiguous();
    return {c[0].item<double>(), c[1].item<double>(), c[2].item<double>(), c[3].item<double>()};
  }

  genmodels::Generator g_;
  diffmorph::SmoothParams smooth_;
  volcore::CalibrationRange range_;
  float voxel_size_um_;
  torch::ScalarType dtype_ = torch::kFloat;
};

// Optimization ---------------------------------------------------------------

struct OptimizeOptions {
  int starts = 4;
  std::uint64_t seed = 0;
  lbfgs::Options lbfgs;

  void validate() const {
    if (starts < 1) throw InvalidInput("need at least one start");
    lbfgs.validate();
  }
};

struct TraceRecord {
  int start = 0;
  int iteration = 0;
  double objective = 0;
  double style = 0;
  double content = 0;
  double best_so_far = 0;
};

struct StartSummary {
  lbfgs::Status status = lbfgs::Status::max_iterations;
  double best_objective = 0;
  int iterations = 0;
  int rejected_evaluations = 0;
};

struct OptimizeResult {
  genmodels::LatentVector z = genmodels::LatentVector::normalized({1.0});
  ObjectiveValue initial;           // at the first start
  ObjectiveValue unconstrained;     // best point before projection to the sphere
  ObjectiveValue final;             // after projection, re-evaluated
  std::vector<TraceRecord> trace;   // every start, concatenated
  std::vector<StartSummary> starts;
  double mu = kDefaultMu;
  bool success = false;

  nlohmann::json metadata() const {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& st : starts)
      s.push_back({{"status", lbfgs::to_string(st.status)},
                   {"best_objective", st.best_objective},
                   {"iterations", st.iterations},
                   {"rejected_evaluations", st.rejected_evaluations}});
    return {{"mu", mu},
            {"success", success},
            {"initial_objective", initial.value},
            {"initial_style_residual", initial.style},
            {"final_objective", final.value},
            {"final_style_residual", final.style},
            {"final_content_residual", final.content},
            {"unconstrained_objective", unconstrained.value},
            {"starts", s}};
  }
};

// Runs L-BFGS from each initial latent (z_t first when given, then random
// unit latents) and keeps the best. The winner is projected to the unit
// sphere and re-evaluated.
inline OptimizeResult optimize_latent(StyleModel& model, const StyleTarget& target,
                                      const std::vector<genmodels::LatentVector>& init,
                                      const OptimizeOptions& opts = {}) {
  target.validate();
  opts.validate();
  std::vector<Vector> starts;
  for (const auto& z : init) {
    if (static_cast<int>(z.dim()) != model.latent_dim()) throw InvalidInput("initial latent dimension mismatch");
    starts.push_back(StyleModel::to_vector(z));
  }
  std::mt19937_64 rng(opts.seed);
  while (static_cast<int>(starts.size()) < opts.starts)
    starts.push_back(StyleModel::to_vector(genmodels::sample_latent(rng, model.latent_dim())));

  OptimizeResult out;
  out.mu = target.mu;
  out.initial = model.objective(starts[0], target);
  double best = std::numeric_limits<double>::infinity();
  Vector best_z;
  lbfgs::Status best_status = lbfgs::Status::max_iterations;
  double running = std::numeric_limits<double>::infinity();

  for (std::size_t s = 0; s < starts.size(); ++s) {
    auto fn = [&](const Vector& z, Vector& g) { return model.objective(z, target, &g).value; };
    auto on_iter = [&](const lbfgs::Iteration& it, const Vector& z) {
      const auto v = model.objective(z, target);
      running = std::min(running, v.value);
      out.trace.push_back({static_cast<int>(s), it.iteration, v.value, v.style, v.content, running});
    };
    const auto r = lbfgs::minimize(fn, starts[s], opts.lbfgs, on_iter);
    running = std::min(running, r.f);
    out.starts.push_back({r.status, r.f, static_cast<int>(r.trace.size()) - 1, r.rejected_evaluations});
    if (r.f < best) {
      best = r.f;
      best_z = r.x;
      best_status = r.status;
    }
  }
  out.unconstrained = model.objective(best_z, target);
  std::vector<double> zv(best_z.data(), best_z.data() + best_z.size());
  out.z = genmodels::LatentVector::normalized(zv);
  out.final = model.objective(StyleModel::to_vector(out.z), target);
  // A line search stalling at the precision floor still leaves a usable best point;
  // non-finite evaluations on the winning start never count as success.
  out.success = std::isfinite(out.final.value) && best_status != lbfgs::Status::non_finite;
  return out;
}

// Treatments -----------------------------------------------------------------

struct Effect {
  double scale = 1.0;
  double offset = 0.0;
  double apply(double v) const { return v * scale + offset; }
  bool identity() const { return scale == 1.0 && offset == 0.0; }
};

struct TreatmentPoint {
  double months = 0;
  std::array<Effect, 4> effects;  // per style component
};

struct TreatmentPreset {
  std::string name;
  std::string citation;
  bool non_clinical = true;
  std::vector<TreatmentPoint> table;  // ascending months

  void validate() const {
    if (name.empty()) throw ConfigError("treatment preset needs a name");
    double prev = -1.0;
    for (const auto& p : table) {
      if (!(p.months >= 0.0) || !std::isfinite(p.months)) throw ConfigError(name + ": months must be finite and >= 0");
      if (!(p.months > prev)) throw ConfigError(name + ": months must be strictly increasing");
      prev = p.months;
      for (const auto& e : p.effects)
        if (!std::isfinite(e.scale) || !std::isfinite(e.offset)) throw ConfigError(name + ": effects must be finite");
      if (p.months == 0.0)
        for (const auto& e : p.effects)
          if (!e.identity()) throw ConfigError(name + ": effect at 0 months must be the identity");
    }
  }

  // Piecewise-linear in months from the identity at 0; held after the last entry.
  std::array<Effect, 4> effect_at(double months) const {
    if (!(months >= 0.0) || !std::isfinite(months)) throw InvalidInput("months must be finite and >= 0");
    TreatmentPoint lo{0.0, {}};
    for (const auto& p : table) {
      if (p.months == 0.0) continue;
      if (months <= p.months) {
        const double f = (months - lo.months) / (p.months - lo.months);
        std::array<Effect, 4> out;
        for (int c = 0; c < 4; ++c)
          out[c] = {lo.effects[c].scale + f * (p.effects[c].scale - lo.effects[c].scale),
                    lo.effects[c].offset + f * (p.effects[c].offset - lo.effects[c].offset)};
        return out;
      }
      lo = p;
    }
    return lo.effects;
  }
};

namespace detail {
inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* key : keys) ok = ok || k == key;
    if (!ok) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}
}  // namespace detail

inline std::vector<TreatmentPreset> presets_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"presets"}, "preset file");
  std::vector<TreatmentPreset> out;
  try {
    for (const auto& pj : j.at("presets")) {
      detail::reject_unknown(pj, {"name", "citation", "non_clinical", "table"}, "preset");
      TreatmentPreset p;
      p.name = pj.at("name").get<std::string>();
      p.citation = pj.value("citation", std::string{});
      p.non_clinical = pj.value("non_clinical", true);
      for (const auto& row : pj.at("table")) {
        detail::reject_unknown(row, {"months", "bmd", "bmd_sd", "bvtv", "tmd"}, "preset " + p.name + " table row");
        TreatmentPoint tp;
        tp.months = row.at("months").get<double>();
        for (int c = 0; c < 4; ++c) {
          const char* key = kComponentNames[static_cast<std::size_t>(c)];
          if (!row.contains(key)) continue;
          detail::reject_unknown(row[key], {"scale", "offset"}, "preset " + p.name + " effect");
          tp.effects[c].scale = row[key].value("scale", 1.0);
          tp.effects[c].offset = row[key].value("offset", 0.0);
        }
        p.table.push_back(tp);
      }
      p.validate();
      out.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed preset file: ") + e.what());
  }
  return out;
}

inline const TreatmentPreset& find_preset(const std::vector<TreatmentPreset>& presets, const std::string& name) {
  for (const auto& p : presets)
    if (p.name == name) return p;
  throw InvalidInput("unknown treatment preset '" + name + "'");
}

// Applies the preset trajectory to an unweighted (unit-alpha) style vector.
// BMD.SD is held unless the preset specifies an effect for it.
inline Style4 treatment_shift(const Style4& base, const TreatmentPreset& preset, double months) {
  const auto e = preset.effect_at(months);
  return {e[0].apply(base[0]), e[1].apply(base[1]), e[2].apply(base[2]), e[3].apply(base[3])};
}

// Parameter grids --------------------------------------------------------------

struct GridAxis {
  int component = 2;
  double step = 0.0;  // unweighted units per grid cell
};

struct GridCell {
  int row = 0, col = 0;
  Style4 target_raw{};
  bool ok = false;
  std::string status;
  std::optional<OptimizeResult> result;
  Style4 achieved_raw{};            // smooth, unit alpha
  morphometry::ParamVector classic;  // recomputed with the classic definitions
  double style_residual = 0;        // alpha-weighted ||w_t - P(G(z'))||
};

// rows x cols cells centered on the center latent's own parameters; the
// content volume stays G(center) for every cell.
inline std::vector<GridCell> parameter_grid(StyleModel& model, const genmodels::LatentVector& center, GridAxis row_axis,
                                            GridAxis col_axis, int rows, int cols, double mu = kDefaultMu,
                                            const OptimizeOptions& opts = {}) {
  if (rows < 1 || cols < 1) throw InvalidInput("grid needs at least one row and one column");
  for (const auto& a : {row_axis, col_axis})
    if (a.component < 0 || a.component > 3) throw InvalidInput("grid axis component out of range");
  const Vector zc = StyleModel::to_vector(center);
  StyleTarget base;
  base.content = model.volume(zc).clone();
  base.mu = mu;
  const Style4 center_raw = model.raw_params(zc);

  std::vector<GridCell> cells;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      GridCell cell;
      cell.row = r;
      cell.col = c;
      cell.target_raw = center_raw;
      cell.target_raw[row_axis.component] += (r - 0.5 * (rows - 1)) * row_axis.step;
      cell.target_raw[col_axis.component] += (c - 0.5 * (cols - 1)) * col_axis.step;
      try {
        StyleTarget t = base;
        t.w = weighted(cell.target_raw, model.alphas());
        auto res = optimize_latent(model, t, {center}, opts);
        const Vector z = StyleModel::to_vector(res.z);
        cell.achieved_raw = model.raw_params(z);
        cell.classic = model.classic_params(z);
        cell.style_residual = res.final.style;
        cell.ok = res.success;
        cell.status = res.success ? "ok" : lbfgs::to_string(res.starts.front().status);
        cell.result = std::move(res);
      } catch (const Error& e) {
        cell.ok = false;
        cell.status = e.what();
      }
      cells.push_back(std::move(cell));
    }
  return cells;
}

}  // namespace bonegan::style
