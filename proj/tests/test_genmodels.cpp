#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "bonegan/checkpoint.hpp"
#include "bonegan/genmodels.hpp"

using namespace bonegan;
using namespace bonegan::genmodels;

TEST(Latent, UnitNormAndDeterministic) {
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 123456789ull}) {
    std::mt19937_64 a(seed), b(seed);
    auto za = sample_latent(a), zb = sample_latent(b);
    EXPECT_EQ(za, zb);
    double n2 = 0;
    for (double v : za.values()) n2 += v * v;
    EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-6);
    EXPECT_EQ(za.dim(), 32u);
  }
  EXPECT_THROW(LatentVector(std::vector<double>(32, 1.0)), InvalidInput);
}

TEST(Latent, ComponentMeansNearZero) {
  std::mt19937_64 rng(2024);
  std::vector<double> mean(32, 0.0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto z = sample_latent(rng);
    for (int c = 0; c < 32; ++c) mean[c] += z[c] / n;
  }
  // per-component sd of the mean is 1/sqrt(32 n), about 0.0018
  for (double m : mean) EXPECT_LT(std::abs(m), 0.007);
}

TEST(PixelNorm, Examples) {
  auto c = torch::full({1, 1, 2, 2, 2}, -3.0);
  auto out = pixel_norm(c);
  EXPECT_NEAR(out.abs().max().item<float>(), 1.0f, 1e-6f);
  EXPECT_LT(out.max().item<float>(), 0.0f);
  auto z = pixel_norm(torch::zeros({2, 4, 3, 3, 3}));
  EXPECT_FALSE(torch::isnan(z).any().item<bool>());
  EXPECT_EQ(z.abs().sum().item<float>(), 0.0f);

  torch::manual_seed(1);
  auto r = pixel_norm(torch::randn({3, 16, 4, 4, 4}));
  auto rms = r.pow(2).mean(1).sqrt();
  EXPECT_LT((rms - 1.0).abs().max().item<float>(), 1e-3f);
  EXPECT_THROW(pixel_norm(torch::ones({4})), InvalidInput);
}

TEST(Networks, ParameterCountsAtFinalStage) {
  NetworkConfig cfg;
  auto g = build_generator(cfg, {3, 1.0});
  auto d = build_critic(cfg, {3, 1.0});
  EXPECT_GE(g->parameter_count(), 200000);
  EXPECT_LE(g->parameter_count(), 400000);
  EXPECT_GE(d->parameter_count(), 200000);
  EXPECT_LE(d->parameter_count(), 400000);
}

TEST(Networks, OutputShapesAndRange) {
  torch::manual_seed(3);
  NetworkConfig cfg;
  std::mt19937_64 rng(9);
  auto z = stack_latents({sample_latent(rng), sample_latent(rng)});
  for (int s = 0; s <= 3; ++s) {
    auto g = build_generator(cfg, {s, 1.0});
    auto d = build_critic(cfg, {s, 1.0});
    torch::NoGradGuard ng;
    auto x = g->forward(z);
    const int64_t r = resolution_for(s);
    EXPECT_EQ(x.sizes(), (std::vector<int64_t>{2, 1, r, r, r}));
    EXPECT_LE(x.max().item<float>(), 1.0f);
    EXPECT_GE(x.min().item<float>(), -1.0f);
    auto score = d->forward(x);
    EXPECT_EQ(score.sizes(), (std::vector<int64_t>{2}));
    EXPECT_TRUE(torch::isfinite(score).all().item<bool>());
    auto extreme = d->forward(torch::ones({1, 1, r, r, r}));
    EXPECT_TRUE(torch::isfinite(extreme).all().item<bool>());
  }
}

TEST(Networks, InvalidStage) {
  NetworkConfig cfg;
  EXPECT_THROW(build_generator(cfg, {4, 1.0}), InvalidInput);
  EXPECT_THROW(build_critic(cfg, {-1, 1.0}), InvalidInput);
  EXPECT_THROW(build_generator(cfg, {1, 1.5}), InvalidInput);
}

TEST(Grow, FadeInIdentityAtAlphaZero) {
  torch::manual_seed(4);
  NetworkConfig cfg;
  std::mt19937_64 rng(77);
  std::vector<LatentVector> zs;
  for (int i = 0; i < 10; ++i) zs.push_back(sample_latent(rng));
  auto z = stack_latents(zs);
  auto g = build_generator(cfg, {0, 1.0});
  for (int s = 1; s <= 3; ++s) {
    torch::NoGradGuard ng;
    auto before = g->forward(z);
    auto grown = grow(g, s);
    EXPECT_EQ(g->stage(), s - 1);  // input untouched
    auto after = grown->forward(z, 0.0);
    EXPECT_EQ(after.size(2), before.size(2) * 2);
    EXPECT_LT((downsample2(after) - before).abs().max().item<float>(), 1e-5f);
    // alpha = 1 is the pure new-layer path, which differs from the upsampled old output
    EXPECT_GT((grown->forward(z, 1.0) - after).abs().max().item<float>(), 1e-4f);
    g = grown;
  }
  EXPECT_THROW(grow(g, 4), InvalidInput);
  EXPECT_THROW(grow(build_generator(cfg, {0, 1.0}), 2), InvalidInput);
}

TEST(Grow, PreservesExistingWeightsBitExactly) {
  torch::manual_seed(5);
  auto g = build_generator({}, {1, 1.0});
  auto grown = grow(g, 2);
  auto old_params = g->named_parameters();
  auto new_params = grown->named_parameters();
  for (const auto& item : old_params) {
    ASSERT_TRUE(new_params.contains(item.key()));
    EXPECT_TRUE(torch::equal(item.value(), new_params[item.key()]));
  }
  EXPECT_GT(new_params.size(), old_params.size());
  auto d = build_critic({}, {1, 1.0});
  auto dg = grow(d, 2);
  for (const auto& item : d->named_parameters()) EXPECT_TRUE(torch::equal(item.value(), dg->named_parameters()[item.key()]));
}

TEST(Grow, CriticBlendAtAlphaZeroUsesDownsampledInput) {
  torch::manual_seed(6);
  auto d = build_critic({}, {1, 1.0});
  auto grown = grow(d, 2);
  torch::NoGradGuard ng;
  auto x = torch::rand({3, 1, 16, 16, 16}) * 2 - 1;
  EXPECT_LT((grown->forward(x, 0.0) - d->forward(downsample2(x))).abs().max().item<float>(), 1e-5f);
}

TEST(Generate, DeterministicAndBounded) {
  torch::manual_seed(8);
  checkpoint::Checkpoint ck;
  ck.stage = {2, 1.0};
  auto g = build_generator(ck.network, ck.stage);
  ck.generator = checkpoint::state_of(*g);
  ck.critic = checkpoint::state_of(*build_critic(ck.network, ck.stage));
  ck.ema = ck.generator;
  std::mt19937_64 rng(7);
  auto z1 = sample_latent(rng), z2 = sample_latent(rng);
  auto a = checkpoint::generate(ck, z1), b = checkpoint::generate(ck, z1);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.edge(), 16u);
  for (float v : a.values()) {
    EXPECT_LE(v, 1.0f);
    EXPECT_GE(v, -1.0f);
  }
  auto c = checkpoint::generate(ck, z2);
  double l2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) l2 += (a.values()[i] - c.values()[i]) * (a.values()[i] - c.values()[i]);
  EXPECT_GT(l2, 0.0);
  EXPECT_THROW(checkpoint::generate(ck, z1, true, 3), InvalidInput);
}

TEST(Checkpoint, FileRoundTrip) {
  torch::manual_seed(10);
  checkpoint::Checkpoint ck;
  ck.stage = {1, 0.25};
  ck.epoch = 7;
  ck.config_hash = "abc123";
  ck.generator = checkpoint::state_of(*build_generator(ck.network, ck.stage));
  ck.critic = checkpoint::state_of(*build_critic(ck.network, ck.stage));
  ck.ema = ck.generator;
  ck.optimizer["adam_g/dense.weight/exp_avg"] = torch::randn({3, 2});
  ck.optimizer_steps["adam_g"] = 12;
  const auto path = std::filesystem::temp_directory_path() / "bonegan_ck_roundtrip.bgck";
  checkpoint::save(ck, path);
  auto back = checkpoint::load(path);
  EXPECT_EQ(back.stage.stage, 1);
  EXPECT_EQ(back.stage.blend_alpha, 0.25);
  EXPECT_EQ(back.epoch, 7);
  EXPECT_EQ(back.config_hash, "abc123");
  EXPECT_EQ(back.generator_params(), ck.generator_params());
  EXPECT_EQ(back.optimizer_steps.at("adam_g"), 12);
  for (const auto& [k, v] : ck.generator) EXPECT_TRUE(torch::equal(v, back.generator.at(k)));
  EXPECT_TRUE(torch::equal(ck.optimizer.begin()->second, back.optimizer.at("adam_g/dense.weight/exp_avg")));
  EXPECT_EQ(back.metadata()["param_counts"]["critic"].get<int64_t>(), ck.critic_params());

  auto bytes = checkpoint::encode(ck);
  bytes.resize(bytes.size() - 10);
  EXPECT_THROW(checkpoint::decode(bytes), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(checkpoint::decode(bytes), FormatError);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  checkpoint::Checkpoint ck;
  ck.stage = {1, 1.0};
  ck.generator = checkpoint::state_of(*build_generator(ck.network, {2, 1.0}));
  EXPECT_THROW(checkpoint::load_generator(ck, false), FormatError);
}
