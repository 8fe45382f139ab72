// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero if any gate fails.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>

#include "bonegan/checkpoint.hpp"
#include "bonegan/datapipe.hpp"
#include "bonegan/diffmorph.hpp"
#include "bonegan/evalsuite.hpp"
#include "bonegan/genmodels.hpp"
#include "bonegan/morphometry.hpp"
#include "bonegan/stats.hpp"
#include "bonegan/styletransfer.hpp"
#include "bonegan/training.hpp"

using namespace bonegan;
using Clock = std::chrono::steady_clock;

namespace tol {
constexpr int kGradPatches = 50;
constexpr double kGradStep = 1e-3;
constexpr double kGradRelError = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kSigmaMargin = 5.0;
constexpr double kBvtvAbs = 1e-3;
constexpr double kTmdAbs = 1.0;
constexpr double kInvarianceRel = 1e-6;
constexpr int kInvariancePhantoms = 20;
constexpr double kPenaltyAbs = 1e-5;
constexpr double kDriftAbs = 1e-12;
constexpr int kToyPatches = 2000;
constexpr int kToyEpochs = 10;
constexpr double kToySeconds = 30 * 60;
constexpr int kBvtvSamples = 128;
constexpr double kBvtvRel = 0.25;
constexpr int kDiversitySamples = 64;
constexpr double kDiversityRatio = 0.2;
constexpr int kClipSeeds = 3;
constexpr int kStyleTrials = 20;
constexpr int kStyleStarts = 4;
constexpr double kStyleReduction = 0.9;
constexpr double kStylePassFraction = 0.8;
constexpr double kSelfTargetObjective = 1e-6;
constexpr double kFadeAbs = 1e-5;
constexpr int kFadeLatents = 10;
constexpr double kTukeyAbs = 1e-3;
constexpr double kPlanarExplained = 1e-9;
constexpr double kRoundTripAbs = 1e-4;
}  // namespace tol

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max(1e-12, std::abs(b)); }

// Worst relative error (L2 over voxels) between analytic and central-difference
// gradients of the four smooth components at one patch.
double gradient_error(torch::Tensor x, const diffmorph::SmoothParams& params, double step) {
  auto xr = x.clone().requires_grad_(true);
  auto p = diffmorph::p_vector_normalized(xr, params);
  auto fd = torch::zeros({4, x.numel()}, torch::kDouble);
  auto flat = x.view(-1);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + step;
    auto hi = diffmorph::p_vector_normalized(x, params);
    flat[i] = orig - step;
    auto lo = diffmorph::p_vector_normalized(x, params);
    flat[i] = orig;
    fd.select(1, i).copy_((hi - lo) / (2 * step));
  }
  double worst = 0.0;
  for (int c = 0; c < 4; ++c) {
    auto analytic = torch::autograd::grad({p[c]}, {xr}, {}, true)[0].view(-1);
    worst = std::max(worst, (analytic - fd[c]).norm().item<double>() / std::max(fd[c].norm().item<double>(), 1e-12));
  }
  return worst;
}

// 1. Analytic vs central-difference gradients on random normalized patches.
Outcome gradients() {
  diffmorph::SmoothParams params;
  params.alphas = {1.0 / 36.0, 1.0 / 23.0, 1.0 / 0.07, 1.0 / 40.0};
  torch::manual_seed(2024);
  const auto start = Clock::now();
  double worst = 0.0;
  for (int trial = 0; trial < tol::kGradPatches; ++trial)
    worst = std::max(worst, gradient_error(torch::rand({8, 8, 8}, torch::kDouble) * 2.0 - 1.0, params, tol::kGradStep));
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();

  // Not gated: patches packed into a narrow band where the smooth TMD has large
  // curvature. The step-1e-3 difference quotient itself is off there; shrinking
  // the step tenfold cuts the discrepancy a hundredfold.
  double band_coarse = 0.0, band_fine = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    auto x = ((torch::rand({8, 8, 8}, torch::kDouble) * 2.0 - 1.0) * 0.15 - 0.45).clamp(-1.0, 1.0);
    band_coarse = std::max(band_coarse, gradient_error(x.clone(), params, tol::kGradStep));
    band_fine = std::max(band_fine, gradient_error(x.clone(), params, tol::kGradStep / 10));
  }
  return {worst <= tol::kGradRelError && secs < tol::kGradSeconds,
          fmt("%d uniform patches, worst relative error %.2e (limit %.0e), %.1f s (limit %.0f s); narrow-band patches "
              "%.2e at step 1e-3, %.2e at step 1e-4 (reported)",
              tol::kGradPatches, worst, tol::kGradRelError, secs, tol::kGradSeconds, band_coarse, band_fine)};
}

// 2. Smooth and classic BV/TV and TMD agree away from the threshold.
Outcome smooth_classic() {
  const diffmorph::SmoothParams sp;
  const double t = sp.t, sigma = sp.sigma;
  double worst_b = 0.0, worst_t = 0.0;
  for (std::uint32_t seed = 0; seed < 20; ++seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double frac = 0.1 + 0.8 * u(rng);
    std::vector<float> v(16 * 16 * 16);
    for (auto& x : v) {
      const double lo = -300.0, hi = 1100.0;
      x = static_cast<float>(u(rng) < frac ? t + tol::kSigmaMargin * sigma + (hi - t - tol::kSigmaMargin * sigma) * u(rng)
                                           : lo + (t - tol::kSigmaMargin * sigma - lo) * u(rng));
    }
    volcore::DensityVolume vol(volcore::cube(16), 164.0f, v);
    auto x = diffmorph::to_tensor(vol);
    worst_b = std::max(worst_b, std::abs(diffmorph::bvtv_star(x, t, sigma).item<double>() - morphometry::bvtv(vol)));
    worst_t = std::max(worst_t, std::abs(diffmorph::tmd_star(x, t, sigma, sp.epsilon).item<double>() - morphometry::tmd(vol)));
  }
  return {worst_b < tol::kBvtvAbs && worst_t < tol::kTmdAbs,
          fmt("20 volumes, max |BVTV* - BV/TV| %.2e (limit %.0e), max |TMD* - TMD| %.3f mg/cm3 (limit %.0f)", worst_b,
              tol::kBvtvAbs, worst_t, tol::kTmdAbs)};
}

// 3. Single noiseless plate in a 32^3 box.
Outcome plate_phantom() {
  bool ok = true;
  std::string detail;
  for (int h : {2, 3, 5}) {
    datapipe::PhantomSpec s;
    s.dims = volcore::cube(32);
    s.plates = s.rods = 0;
    s.blur_sigma = s.noise_sd = 0;
    s.fixed_plates.push_back({{16, 16, 16}, {0, 0, 1}, static_cast<double>(h), 0.0, 600.0});
    const auto v = datapipe::phantom_volume(s);
    const double vox_um = v.voxel_size_um();
    const double extent_mm = 32 * vox_um / 1000.0;
    const double mil_normal = morphometry::mil(v, {}, {{0, 0, 1}});
    const auto p = morphometry::compute_all(v);
    const double th_normal = morphometry::plate_model(mil_normal, p.bvtv).tb_th_um;
    const bool pass = mil_normal == extent_mm && std::abs(th_normal - h * vox_um) <= vox_um;
    ok = ok && pass;
    detail += fmt("h=%d: MIL(normal) %.4f mm vs %.4f, Tb.Th %.1f um vs %.1f (7-direction Tb.Th %.1f); ", h, mil_normal,
                  extent_mm, th_normal, h * vox_um, p.tb_th.value_or(NAN));
  }
  return {ok, detail};
}

// 4. Augmentation group closure and invariance of the classic parameters.
Outcome augmentation() {
  using namespace datapipe;
  std::set<Matrix3> elems;
  bool closed = transform_matrix(0) == Matrix3{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> u(-400.0f, 1200.0f);
  const volcore::DensityVolume probe({7, 7, 7}, 164.0f, [&] {
    std::vector<float> w(343);
    for (auto& x : w) x = u(rng);
    return w;
  }());
  for (int a = 0; a < kGroupOrder; ++a) {
    elems.insert(transform_matrix(a));
    bool has_inverse = false;
    for (int b = 0; b < kGroupOrder; ++b) {
      const int c = compose(a, b);
      closed = closed && c >= 0 && c < kGroupOrder;
      closed = closed && apply_transform(apply_transform(probe, b), a) == apply_transform(probe, c);
      has_inverse = has_inverse || c == 0;
    }
    closed = closed && has_inverse && compose(a, 0) == a && compose(0, a) == a;
  }
  closed = closed && elems.size() == static_cast<std::size_t>(kGroupOrder);

  double worst = 0.0;
  for (int s = 0; s < tol::kInvariancePhantoms; ++s) {
    PhantomSpec spec;
    spec.dims = volcore::cube(32);
    spec.plates = 3;
    spec.rods = 10;
    spec.seed = 1000 + s;
    const auto v = phantom_volume(spec);
    const auto base = morphometry::compute_all(v).as_array();
    for (int t = 1; t < kGroupOrder; ++t) {
      const auto p = morphometry::compute_all(apply_transform(v, t)).as_array();
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (!base[i] || !p[i]) {
          if (base[i].has_value() != p[i].has_value()) worst = INFINITY;
          continue;
        }
        worst = std::max(worst, rel_error(*p[i], *base[i]));
      }
    }
  }
  return {closed && worst <= tol::kInvarianceRel,
          fmt("256-entry composition table %s, %zu distinct elements; %d phantoms x 15 transforms, worst relative "
              "change %.2e (limit %.0e)",
              closed ? "closed with identity and inverses" : "NOT closed", elems.size(), tol::kInvariancePhantoms, worst,
              tol::kInvarianceRel)};
}

// 5. Gradient penalty and drift on analytic critics.
Outcome penalty_oracles() {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  torch::manual_seed(5);
  auto real = torch::randn({16, 1, 8, 8, 8}), fake = torch::randn({16, 1, 8, 8, 8});
  auto constant = [](const torch::Tensor& x) { return torch::full({x.size(0)}, 3.0); };
  const double gp_const = training::gradient_penalty(constant, real, fake, 10.0, gen).item<double>();
  auto w = torch::randn({512});
  w /= w.norm();
  auto linear = [&](const torch::Tensor& x) { return x.flatten(1).matmul(w); };
  const double gp_lin = training::gradient_penalty(linear, real, fake, 10.0, gen).item<double>();
  const double drift = training::drift_penalty(torch::full({16}, 10.0, torch::kDouble), 0.001).item<double>();
  const bool ok = std::abs(gp_const - 10.0) <= tol::kPenaltyAbs && gp_lin <= tol::kPenaltyAbs &&
                  std::abs(drift - 0.1) <= tol::kDriftAbs;
  return {ok, fmt("constant critic %.7f (expect 10), unit linear critic %.2e (limit %.0e), drift %.15f (expect 0.1)",
                  gp_const, gp_lin, tol::kPenaltyAbs, drift)};
}

// 8. Fade-in identity for every growth step of the default network.
Outcome fade_in() {
  torch::manual_seed(8);
  genmodels::NetworkConfig cfg;
  std::mt19937_64 rng(88);
  std::vector<genmodels::LatentVector> zs;
  for (int i = 0; i < tol::kFadeLatents; ++i) zs.push_back(genmodels::sample_latent(rng, cfg.latent_dim));
  auto z = genmodels::stack_latents(zs);
  auto g = genmodels::build_generator(cfg, {0, 1.0});
  double worst = 0.0;
  torch::NoGradGuard ng;
  for (int s = 1; s <= cfg.max_stage(); ++s) {
    auto before = g->forward(z);
    auto grown = genmodels::grow(g, s);
    auto after = grown->forward(z, 0.0);
    worst = std::max(worst, (genmodels::downsample2(after) - before).abs().max().item<double>());
    g = grown;
  }
  return {worst <= tol::kFadeAbs, fmt("%d latents, %d growth steps, max deviation %.2e (limit %.0e)", tol::kFadeLatents,
                                      cfg.max_stage(), worst, tol::kFadeAbs)};
}

// 9. Studentized-range p-values, PCA on planar data, normalization round trip.
Outcome statistics() {
  // Reference p-values from an independent studentized-range implementation.
  const std::vector<std::vector<double>> g{{4.1, 5.3, 6.0, 4.8, 5.5}, {6.2, 7.1, 5.9, 6.8, 7.4, 6.5}, {5.0, 4.7, 5.6, 5.2}};
  const double ref[3] = {0.00289091, 0.99919248, 0.0042842};
  const auto r = stats::tukey_hsd(g);
  const double got[3] = {r.p_value(0, 1), r.p_value(0, 2), r.p_value(1, 2)};
  double tukey_err = 0.0;
  for (int i = 0; i < 3; ++i) tukey_err = std::max(tukey_err, std::abs(got[i] - ref[i]));
  const std::vector<std::vector<double>> g2{{12.0, 15.5, 11.2, 13.9, 14.4, 12.8, 13.1},
                                            {16.1, 17.3, 15.2, 18.0, 16.6},
                                            {11.5, 12.2, 10.9, 13.0, 12.4, 11.8},
                                            {14.0, 15.1, 13.6, 14.8}};
  // Same reference implementation: (0,1), (0,2), (0,3), (1,2), (1,3), (2,3).
  const double ref2[6] = {0.0002882717453, 0.1778877285, 0.3992673073, 7.86085335e-06, 0.02974486629, 0.01514276161};
  const auto r2 = stats::tukey_hsd(g2);
  int k = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) tukey_err = std::max(tukey_err, std::abs(r2.p_value(i, j) - ref2[k++]));

  std::mt19937 rng(9);
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd basis = Eigen::MatrixXd::Random(7, 2);
  Eigen::MatrixXd planar(300, 7);
  for (int i = 0; i < planar.rows(); ++i)
    planar.row(i) = (Eigen::VectorXd::LinSpaced(7, 10.0, 70.0) + basis * Eigen::Vector2d(n01(rng), 2.0 * n01(rng))).transpose();
  const double explained = evalsuite::pca_fit(planar, 2).cumulative();

  std::uniform_real_distribution<float> u(-1000.0f, 2000.0f);
  std::vector<float> vals(32 * 32 * 32);
  for (auto& v : vals) v = u(rng);
  const volcore::CalibrationRange range;
  for (auto& v : vals) v = std::clamp(v, static_cast<float>(range.lo), static_cast<float>(range.hi));
  const volcore::DensityVolume vol(volcore::cube(32), 164.0f, vals);
  const auto back = volcore::denormalize(volcore::normalize(vol, range).patch, range);
  double rt = 0.0;
  for (std::size_t i = 0; i < vals.size(); ++i) rt = std::max(rt, std::abs(double(back.values()[i]) - vals[i]));

  const bool ok = tukey_err <= tol::kTukeyAbs && std::abs(explained - 1.0) <= tol::kPlanarExplained && rt <= tol::kRoundTripAbs;
  return {ok, fmt("Tukey max |p - ref| %.1e (limit %.0e); planar PCA 2-component variance %.10f%%; round trip max "
                  "error %.2e mg/cm3 (limit %.0e)",
                  tukey_err, tol::kTukeyAbs, 100.0 * explained, rt, tol::kRoundTripAbs)};
}

// 10. Patch and corpus counts.
Outcome pipeline_counts() {
  using namespace datapipe;
  const auto n64 = extract_patches(volcore::DensityVolume::filled(volcore::cube(64), 300.0f), {}).size();
  std::vector<SourceVolume> vols;
  for (int i = 0; i < 3; ++i) {
    PhantomSpec s;
    s.dims = volcore::cube(40);
    s.plates = 5;
    s.rods = 20;
    s.seed = i;
    vols.push_back({"p" + std::to_string(i), phantom_volume(s), std::nullopt});
  }
  const auto plain = assemble_corpus(vols, {}, false);
  const auto aug = assemble_corpus(vols, {}, true);
  const bool exact = aug.patches.size() == plain.patches.size() * 16 && aug.manifest.count() == aug.patches.size() &&
                     aug.manifest.raw_count == plain.patches.size();
  const auto full_scale = corpus_size(7660, true);
  return {n64 == 125 && exact && full_scale == 122560,
          fmt("64^3 -> %zu patches (expect 125); corpus %zu -> %zu augmented (x16 %s); 7660 x 16 = %zu (expect 122560)",
              n64, plain.patches.size(), aug.patches.size(), exact ? "exact" : "MISMATCH", full_scale)};
}

// Toy phantom corpus: 16 volumes of 64^3 at stride 8 give 16 x 125 patches.
training::TrainingData toy_corpus() {
  std::vector<datapipe::SourceVolume> vols;
  for (int s = 0; s < 16; ++s) {
    datapipe::PhantomSpec sp;
    sp.seed = static_cast<std::uint64_t>(s);
    vols.push_back({"phantom" + std::to_string(s), datapipe::phantom_volume(sp), std::nullopt});
  }
  const auto corpus = datapipe::assemble_corpus(vols, {}, false);
  return training::TrainingData::from_patches(corpus.patches);
}

training::TrainConfig toy_config(training::Variant v, std::uint64_t seed) {
  training::TrainConfig c;
  c.stages = 3;
  c.first_stage_epochs = 2;
  c.epochs_blend_per_stage = 2;
  c.epochs_train_per_stage = 2;
  c.seed = seed;
  return c.with_variant(v);
}

double mean_bvtv(const torch::Tensor& x, float voxel_um, const volcore::CalibrationRange& range) {
  const auto r = static_cast<std::size_t>(x.size(-1));
  double sum = 0.0;
  for (int64_t i = 0; i < x.size(0); ++i) {
    auto t = x[i][0].contiguous().to(torch::kFloat);
    std::vector<float> v(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
    sum += morphometry::bvtv(volcore::denormalize(volcore::cube(r), voxel_um, v, range));
  }
  return sum / static_cast<double>(x.size(0));
}

struct ToyRun {
  Outcome outcome;
  std::optional<checkpoint::Checkpoint> checkpoint;
};

double generated_bvtv(const checkpoint::Checkpoint& ck, const training::TrainingData& data) {
  auto g = checkpoint::load_generator(ck, true);
  torch::NoGradGuard ng;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(123);
  auto x = g->forward(genmodels::sample_latent_batch(tol::kBvtvSamples, ck.network.latent_dim, gen));
  return mean_bvtv(x, data.voxel_size_um * static_cast<float>(data.resolution() / x.size(-1)), data.range);
}

// 6. Toy progressive training, BV/TV agreement and diversity; wgan-clip collapse reported.
ToyRun toy_training(const training::TrainingData& data, int clip_seeds, bool verbose) {
  training::TrainOptions opts;
  if (verbose) opts.progress = [](const std::string& s) { std::cout << "    " << s << std::endl; };
  const auto cfg = toy_config(training::Variant::pwgan_gp, 0);
  const auto epochs = training::total_epochs(training::schedule(cfg));
  const auto result = training::train_progressive(data, cfg, opts);
  const auto& ck = result.final_checkpoint();

  const double gen_bvtv = generated_bvtv(ck, data);
  const auto real = training::pool_to_resolution(data.patches, ck.stage.resolution());
  const double real_bvtv = mean_bvtv(real, data.voxel_size_um * static_cast<float>(data.resolution() / real.size(-1)), data.range);
  const double bvtv_rel = std::abs(gen_bvtv - real_bvtv) / real_bvtv;
  const auto dv = training::diversity(ck, data, tol::kDiversitySamples, 7);

  const bool ok = data.size() == tol::kToyPatches && epochs == tol::kToyEpochs && ck.stage.resolution() == 16 &&
                  result.seconds <= tol::kToySeconds && bvtv_rel <= tol::kBvtvRel && dv.ratio >= tol::kDiversityRatio;
  std::string detail = fmt("%lld patches, %d epochs to %lld^3 in %.0f s (limit %.0f); BV/TV generated %.4f vs corpus "
                           "%.4f, relative %.3f (limit %.2f); diversity ratio %.3f (limit %.1f)",
                           static_cast<long long>(data.size()), epochs, static_cast<long long>(ck.stage.resolution()),
                           result.seconds, tol::kToySeconds, gen_bvtv, real_bvtv, bvtv_rel, tol::kBvtvRel, dv.ratio,
                           tol::kDiversityRatio);

  if (clip_seeds > 0) {
    int collapsed = 0;
    std::string per_seed;
    for (int s = 0; s < clip_seeds; ++s) {
      const auto clip = training::train_progressive(data, toy_config(training::Variant::wgan_clip, s), opts);
      const auto cd = training::diversity(clip.final_checkpoint(), data, tol::kDiversitySamples, 7);
      bool flagged = cd.collapse;
      for (const auto& e : clip.log.epochs()) flagged = flagged || e.collapse;
      collapsed += flagged;
      per_seed += fmt("%sratio %.3f BV/TV %.3f%s", s ? ", " : "", cd.ratio, generated_bvtv(clip.final_checkpoint(), data),
                      flagged ? " (collapse)" : "");
    }
    detail += fmt("; wgan-clip collapse flagged in %d of %d seeds [%s] (reported, not gated)", collapsed,
                  clip_seeds, per_seed.c_str());
  } else {
    detail += "; wgan-clip clause not run";
  }
  return {{ok, detail}, ck};
}

// 7. Style transfer toward parameters of other generated samples, and the
// self-target started at its own optimum.
Outcome style_transfer(const checkpoint::Checkpoint& ck, const volcore::CalibrationRange& range, bool verbose) {
  auto g = checkpoint::load_generator(ck, true);
  style::StyleModel model(g, {}, range);
  model.calibrate_alphas(64, 17);
  std::mt19937_64 rng(4242);
  int reached = 0, self_iters = 0;
  double worst_self = 0.0;
  style::OptimizeOptions opts;
  opts.starts = tol::kStyleStarts;
  style::OptimizeOptions single = opts;
  single.starts = 1;
  const auto start = Clock::now();
  for (int trial = 0; trial < tol::kStyleTrials; ++trial) {
    const auto zc = genmodels::sample_latent(rng, model.latent_dim());
    const auto zo = genmodels::sample_latent(rng, model.latent_dim());
    const auto vc = style::StyleModel::to_vector(zc);
    style::StyleTarget t;
    t.content = model.volume(vc).clone();
    t.mu = style::kDefaultMu;
    t.w = model.params(style::StyleModel::to_vector(zo));
    opts.seed = 100 + static_cast<std::uint64_t>(trial);
    const auto r = style::optimize_latent(model, t, {zc}, opts);
    const double reduction = 1.0 - r.final.style / r.initial.style;
    reached += r.success && reduction >= tol::kStyleReduction;

    t.w = model.params(vc);
    const auto self = style::optimize_latent(model, t, {zc}, trial == 0 ? opts : single);
    worst_self = std::max(worst_self, self.final.value);
    self_iters = std::max(self_iters, self.starts.front().iterations);
    if (verbose)
      std::cout << fmt("    trial %2d: style %.4f -> %.4f (%.1f%% reduction), self-target %.2e", trial, r.initial.style,
                       r.final.style, 100.0 * reduction, self.final.value)
                << std::endl;
  }
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  const double frac = static_cast<double>(reached) / tol::kStyleTrials;
  return {frac >= tol::kStylePassFraction && worst_self < tol::kSelfTargetObjective && self_iters <= 5,
          fmt("%d of %d trials reduced the style residual by >= %.0f%% (need %.0f%%); self-target worst objective %.2e "
              "(limit %.0e) within %d iterations (limit 5); %.0f s",
              reached, tol::kStyleTrials, 100 * tol::kStyleReduction, 100 * tol::kStylePassFraction, worst_self,
              tol::kSelfTargetObjective, self_iters, secs)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  int clip_seeds = tol::kClipSeeds;
  std::string reuse, save;
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--clip-seeds", clip_seeds, "wgan-clip seeds for the reported collapse clause (0 skips it)")
      ->capture_default_str();
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--reuse-checkpoint", reuse, "Use this toy checkpoint for criterion 7 instead of training one");
  app.add_option("--save-checkpoint", save, "Write the toy checkpoint trained for criterion 6 here");
  app.add_flag("-v,--verbose", verbose, "Print training and per-trial progress");
  CLI11_PARSE(app, argc, argv);

  auto want = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  int failures = 0;
  auto report = [&](int n, const std::function<Outcome()>& f) {
    if (!want(n)) return;
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
  };

  report(1, gradients);
  report(2, smooth_classic);
  report(3, plate_phantom);
  report(4, augmentation);
  report(5, penalty_oracles);

  std::optional<checkpoint::Checkpoint> toy;
  std::optional<training::TrainingData> data;
  if (want(6) || want(7)) data = toy_corpus();
  if (!reuse.empty() && want(7)) toy = checkpoint::load(reuse);
  report(6, [&] {
    auto r = toy_training(*data, clip_seeds, verbose);
    if (r.checkpoint && !toy) toy = r.checkpoint;
    if (r.checkpoint && !save.empty()) checkpoint::save(*r.checkpoint, save);
    return r.outcome;
  });
  report(7, [&]() -> Outcome {
    if (!toy) return {false, "no trained toy generator (criterion 6 did not run or failed to train)"};
    return style_transfer(*toy, data->range, verbose);
  });

  report(8, fade_in);
  report(9, statistics);
  report(10, pipeline_counts);
  std::cout << (failures ? "acceptance: FAIL (" + std::to_string(failures) + " criteria)" : std::string("acceptance: PASS"))
            << std::endl;
  return failures ? 1 : 0;
}
