#include <gtest/gtest.h>

#include <sstream>

#include "bonegan/training.hpp"

using namespace bonegan;
using namespace bonegan::training;

namespace {

torch::Tensor batch_of(std::vector<float> v) { return torch::tensor(v); }

// Tiny random-phase corpus of smooth blobs at 32^3 for loop smoke tests.
TrainingData tiny_data(int64_t n) {
  torch::manual_seed(99);
  auto x = torch::randn({n, 1, 8, 8, 8});
  x = torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{32, 32, 32}).mode(torch::kTrilinear).align_corners(false));
  return {torch::tanh(x), 164.0f, {}};
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.stages = 2;
  c.first_stage_epochs = 1;
  c.epochs_blend_per_stage = 1;
  c.epochs_train_per_stage = 1;
  c.batch_size = 4;
  c.diversity_samples = 8;
  c.network.widths = {8, 8, 4, 4};
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Wasserstein, Examples) {
  auto a = wasserstein_losses(torch::ones({4}), torch::zeros({4}));
  EXPECT_DOUBLE_EQ(a.estimate.item<double>(), 1.0);
  EXPECT_DOUBLE_EQ(a.critic_core.item<double>(), -1.0);
  auto b = wasserstein_losses(batch_of({0.3f, 0.7f}), batch_of({0.3f, 0.7f}));
  EXPECT_DOUBLE_EQ(b.estimate.item<double>(), 0.0);
  auto c = wasserstein_losses(batch_of({2, 0}), batch_of({1}));
  EXPECT_DOUBLE_EQ(c.estimate.item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(c.gen_core.item<double>(), -1.0);
  EXPECT_THROW(wasserstein_losses(torch::zeros({0}), torch::ones({1})), InvalidInput);
}

TEST(GradientPenalty, AnalyticCritics) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  auto real = torch::randn({8, 1, 4, 4, 4}), fake = torch::randn({8, 1, 4, 4, 4});
  auto constant = [](const torch::Tensor& x) { return torch::zeros({x.size(0)}); };
  EXPECT_NEAR(gradient_penalty(constant, real, fake, 10.0, gen).item<double>(), 10.0, 1e-5);

  auto w = torch::randn({64});
  w /= w.norm();
  auto linear = [&](const torch::Tensor& x) { return x.flatten(1).matmul(w); };
  EXPECT_LE(gradient_penalty(linear, real, fake, 10.0, gen).item<double>(), 1e-5);

  auto twice = [](const torch::Tensor& x) { return 2.0 * x.flatten(1).select(1, 0); };
  EXPECT_NEAR(gradient_penalty(twice, real, fake, 10.0, gen).item<double>(), 10.0, 1e-5);
  EXPECT_THROW(gradient_penalty(constant, real, fake.narrow(0, 0, 4), 10.0, gen), InvalidInput);
}

TEST(GradientPenalty, IsDifferentiableInCriticWeights) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  Critic d(genmodels::NetworkConfig{32, {8, 8}}, 1);
  auto real = torch::rand({2, 1, 8, 8, 8}), fake = torch::rand({2, 1, 8, 8, 8});
  auto gp = gradient_penalty([&](const torch::Tensor& x) { return d->forward(x); }, real, fake, 10.0, gen);
  gp.backward();
  double total = 0;
  for (auto& p : d->parameters())
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  EXPECT_GT(total, 0.0);
  EXPECT_NO_THROW(verify_second_order(d, 8, gen));
}

TEST(Drift, Examples) {
  EXPECT_DOUBLE_EQ(drift_penalty(torch::zeros({5}), 0.001).item<double>(), 0.0);
  EXPECT_NEAR(drift_penalty(torch::full({5}, 10.0, torch::kDouble), 0.001).item<double>(), 0.1, 1e-15);
  EXPECT_NEAR(drift_penalty(batch_of({1, -1}), 0.001).item<double>(), 0.001, 1e-9);
}

TEST(Ema, Examples) {
  checkpoint::TensorMap shadow{{"w", torch::zeros({3})}}, live{{"w", torch::ones({3})}};
  auto s = shadow;
  ema_update(s, live, 0.999);
  EXPECT_NEAR(s["w"][0].item<float>(), 0.001f, 1e-7f);
  s = {{"w", torch::zeros({3})}};
  ema_update(s, live, 0.0);
  EXPECT_TRUE(torch::equal(s["w"], live["w"]));
  s = {{"w", torch::full({3}, 0.5)}};
  ema_update(s, live, 1.0);
  EXPECT_TRUE(torch::equal(s["w"], torch::full({3}, 0.5)));
  checkpoint::TensorMap bad{{"w", torch::ones({4})}};
  EXPECT_THROW(ema_update(s, bad, 0.5), InvalidInput);
}

TEST(Ema, ModuleDecayZeroCopiesLive) {
  torch::manual_seed(1);
  Generator a(genmodels::NetworkConfig{}, 1), b(genmodels::NetworkConfig{}, 1);
  ema_update(*b, *a, 0.0);
  for (const auto& item : a->named_parameters())
    EXPECT_TRUE(torch::equal(item.value(), b->named_parameters()[item.key()]));
  Generator c(genmodels::NetworkConfig{}, 2);
  EXPECT_THROW(ema_update(*c, *a, 0.5), InvalidInput);
}

TEST(Baselines, GanPerfectDiscriminationAndRange) {
  auto l = baseline_losses(Variant::gan, torch::ones({4}), torch::zeros({4}));
  EXPECT_NEAR(l.critic_core.item<double>(), 0.0, 1e-6);
  Critic d(genmodels::NetworkConfig{32, {8, 8}, true}, 1);
  auto out = d->forward(torch::randn({6, 1, 8, 8, 8}) * 50);
  EXPECT_GT(out.min().item<float>(), -1e-9f);
  EXPECT_LE(out.max().item<float>(), 1.0f);
  auto w = baseline_losses(Variant::wgan_clip, batch_of({2, 0}), batch_of({1}));
  EXPECT_DOUBLE_EQ(w.gen_core.item<double>(), -1.0);
}

TEST(Baselines, ClipPostcondition) {
  torch::manual_seed(3);
  Critic d(genmodels::NetworkConfig{}, 1);
  clip_weights(*d, 0.01);
  for (auto& p : d->parameters()) {
    EXPECT_LE(p.max().item<float>(), 0.01f);
    EXPECT_GE(p.min().item<float>(), -0.01f);
  }
}

TEST(Config, VariantsShareHyperparameters) {
  TrainConfig base;
  base.learning_rate = 0.002;
  for (auto v : {Variant::pwgan_gp, Variant::wgan_gp, Variant::gan, Variant::wgan_clip}) {
    auto c = base.with_variant(v);
    auto j = to_json(c), jb = to_json(base);
    j.erase("variant");
    jb.erase("variant");
    EXPECT_EQ(j, jb);
  }
  EXPECT_TRUE(base.with_variant(Variant::gan).network.critic_sigmoid);
  EXPECT_EQ(parse_variant("wgan-clip"), Variant::wgan_clip);
  EXPECT_THROW(parse_variant("dcgan"), InvalidInput);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c;
  c.seed = 77;
  c.first_stage_epochs = 2;
  c.order = ScheduleOrder::stabilize_then_fade;
  auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.seed = 78;
  EXPECT_NE(config_hash(back), config_hash(c));
  EXPECT_THROW(train_config_from_json({{"learning_rte", 0.1}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"n_critic", 0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"variant", "vae"}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"batch_size", "sixteen"}}), ConfigError);
}

TEST(Schedule, FullScaleArithmetic) {
  TrainConfig c;
  EXPECT_EQ(total_epochs(schedule(c)), 40);
  c.order = ScheduleOrder::stabilize_then_fade;
  EXPECT_EQ(total_epochs(schedule(c)), 40);
  c.order = ScheduleOrder::fade_then_stabilize;
  auto p = schedule(c);
  ASSERT_EQ(p.size(), 7u);
  EXPECT_FALSE(p[0].fade);
  EXPECT_TRUE(p[1].fade);
  EXPECT_EQ(p[1].stage, 1);
  EXPECT_FALSE(p[2].fade);
  EXPECT_EQ(p.back().stage, 3);
  auto flat = schedule(c.with_variant(Variant::wgan_gp));
  ASSERT_EQ(flat.size(), 1u);
  EXPECT_EQ(flat[0].stage, 3);
  EXPECT_EQ(flat[0].epochs, 40);
}

TEST(Schedule, ToyScaleTenEpochs) {
  TrainConfig c;
  c.stages = 3;
  c.first_stage_epochs = 2;
  c.epochs_train_per_stage = 2;
  c.epochs_blend_per_stage = 2;
  EXPECT_EQ(total_epochs(schedule(c)), 10);
  EXPECT_EQ(total_epochs(schedule(c.with_variant(Variant::wgan_clip))), 10);
  c.order = ScheduleOrder::stabilize_then_fade;
  auto p = schedule(c);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_GE(p[i].stage, p[i - 1].stage);
}

TEST(Pooling, TwoHalvingsEqualOneQuarter) {
  torch::manual_seed(4);
  auto x = torch::rand({3, 1, 32, 32, 32}) * 2 - 1;
  auto twice = pool_to_resolution(pool_to_resolution(x, 16), 8);
  auto once = pool_to_resolution(x, 8);
  EXPECT_LT((twice - once).abs().max().item<float>(), 1e-6f);
  EXPECT_TRUE(torch::equal(pool_to_resolution(x, 32), x));
  EXPECT_THROW(pool_to_resolution(x, 12), InvalidInput);
}

TEST(Diversity, PairwiseStatistic) {
  auto x = torch::zeros({3, 1, 2, 2, 2});
  x[1].fill_(1.0);
  // pairs: |0-1| = sqrt(8), |0-0| = 0, |1-0| = sqrt(8)
  EXPECT_NEAR(mean_pairwise_l2(x), 2.0 * std::sqrt(8.0) / 3.0, 1e-12);
}

TEST(Metrics, JsonlAndMonotoneTime) {
  MetricsLog log;
  IterationRecord r;
  r.time_s = 1.0;
  r.gen_loss = 0.5;
  r.critic_updates_before_gen = 3;
  log.append(r);
  EpochRecord e;
  e.time_s = 2.0;
  log.append(e);
  IterationRecord early;
  early.time_s = 0.5;
  EXPECT_THROW(log.append(early), InvalidInput);
  std::ostringstream os;
  log.write_jsonl(os);
  std::istringstream is(os.str());
  std::string line;
  int lines = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("type"));
    ++lines;
  }
  EXPECT_EQ(lines, 2);
}

TEST(Train, RejectsBadDatasets) {
  auto c = tiny_config();
  EXPECT_THROW(train_progressive(TrainingData{torch::zeros({0, 1, 32, 32, 32})}, c), InvalidInput);
  EXPECT_THROW(train_progressive(TrainingData{torch::zeros({4, 1, 16, 16, 16})}, c), InvalidInput);
}

TEST(Train, TinyProgressiveRun) {
  auto data = tiny_data(24);
  auto c = tiny_config();
  const auto dir = std::filesystem::temp_directory_path() / "bonegan_train_tiny";
  std::filesystem::remove_all(dir);
  auto r = train_progressive(data, c, {dir, nullptr, torch::kCPU});

  ASSERT_EQ(r.checkpoints.size(), 2u);
  EXPECT_EQ(r.checkpoints[0].stage.stage, 0);
  EXPECT_EQ(r.final_checkpoint().stage.stage, 1);
  EXPECT_EQ(r.final_checkpoint().epoch, 3);
  EXPECT_TRUE(std::filesystem::exists(dir / "final.bgck"));
  EXPECT_TRUE(std::filesystem::exists(dir / "stage0.bgck"));

  // 3 epochs x 6 critic steps; every generator step preceded by exactly n_critic critic steps
  EXPECT_EQ(r.log.iterations().size(), 18u);
  EXPECT_EQ(r.log.generator_updates(), 6);
  for (const auto& it : r.log.iterations())
    if (it.gen_loss) EXPECT_EQ(it.critic_updates_before_gen, 3);
  EXPECT_EQ(r.log.epochs().size(), 3u);

  // fade ramp during the blend epoch
  const auto& its = r.log.iterations();
  EXPECT_EQ(its[6].alpha, 0.0);
  EXPECT_GT(its[11].alpha, 0.5);
  EXPECT_LT(its[11].alpha, 1.0);
  EXPECT_EQ(its[12].alpha, 1.0);

  auto ck = checkpoint::load(dir / "final.bgck");
  EXPECT_EQ(ck.config_hash, config_hash(c));
  EXPECT_FALSE(ck.optimizer.empty());
  EXPECT_GT(ck.optimizer_steps.at("adam_d"), 0);
  std::mt19937_64 rng(1);
  auto patch = checkpoint::generate(ck, genmodels::sample_latent(rng));
  EXPECT_EQ(patch.edge(), 8u);
}

TEST(Train, DeterministicGivenSeed) {
  auto data = tiny_data(16);
  auto c = tiny_config();
  c.stages = 1;
  c.first_stage_epochs = 2;
  auto a = train_progressive(data, c);
  auto b = train_progressive(data, c);
  for (const auto& [k, v] : a.final_checkpoint().generator)
    EXPECT_TRUE(torch::equal(v, b.final_checkpoint().generator.at(k))) << k;
}

TEST(Train, BaselineVariantsRun) {
  auto data = tiny_data(16);
  for (auto v : {Variant::wgan_gp, Variant::gan, Variant::wgan_clip}) {
    auto c = tiny_config().with_variant(v);
    auto r = train_progressive(data, c);
    ASSERT_EQ(r.checkpoints.size(), 1u) << to_string(v);
    EXPECT_EQ(r.final_checkpoint().stage.stage, 1);
    EXPECT_EQ(r.final_checkpoint().variant, to_string(v));
    if (v == Variant::wgan_clip) {
      auto d = checkpoint::load_critic(r.final_checkpoint());
      for (auto& p : d->parameters()) EXPECT_LE(p.abs().max().item<float>(), 0.01f);
    }
    if (v == Variant::gan) EXPECT_TRUE(r.final_checkpoint().network.critic_sigmoid);
    for (const auto& it : r.log.iterations()) EXPECT_TRUE(std::isfinite(it.critic_loss));
  }
}

TEST(Ema, DecayWarmup) {
  EXPECT_DOUBLE_EQ(ema_decay_at(0.999, 0), 0.1);
  EXPECT_DOUBLE_EQ(ema_decay_at(0.999, 0, false), 0.999);
  EXPECT_DOUBLE_EQ(ema_decay_at(0.999, 1'000'000), 0.999);
  double prev = 0.0;
  for (int64_t t = 0; t < 20000; t += 97) {
    const double d = ema_decay_at(0.999, t);
    EXPECT_GE(d, prev);
    prev = d;
  }
  TrainConfig c;
  c.ema_warmup = false;
  EXPECT_FALSE(train_config_from_json(to_json(c)).ema_warmup);
}
