#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"

namespace unqa {
namespace {

using testing::check_input_gradient;
using testing::check_parameter_gradient;
using testing::random_vector;
using testing::tiny_model_config;

std::vector<double> values_of(const Var& v) { return {v.value().begin(), v.value().end()}; }

// Fixed random projection to a scalar, so every output element matters.
Var project(const Var& x, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = x.size();
  return sum(mul(reshape(x, {n}), constant({n}, random_vector(rng, n))));
}

Var random_input(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  return constant(shape, random_vector(rng, numel(shape), lo, hi));
}

// ---------------------------------------------------------------------------
// Spatial

TEST(SpatialStages, ToyBackboneSizes) {
  BackboneConfig cfg;
  Rng rng(1);
  SpatialBranch branch(cfg, rng);
  const auto sizes = branch.stage_sizes(384, 384);
  ASSERT_EQ(sizes.size(), 4u);
  const std::size_t expected[] = {96, 48, 24, 12};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(sizes[i].first, expected[i]);
    EXPECT_EQ(sizes[i].second, expected[i]);
  }
  GradContext ctx;
  const auto maps = branch.extract_stage_maps(ctx, constant({1, 1, 3, 384, 384}, std::vector<double>(3 * 384 * 384, 0.5)));
  ASSERT_EQ(maps.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(maps[i].stage_index, i + 1);
    EXPECT_EQ(maps[i].values.shape(), (Shape{1, cfg.channels[i], expected[i], expected[i]}));
  }
}

TEST(SpatialStages, FlattensBatchAndTimeAndRejectsSmallInputs) {
  BackboneConfig cfg;
  Rng rng(2);
  SpatialBranch branch(cfg, rng);
  GradContext ctx;
  Rng data(3);
  const auto maps = branch.extract_stage_maps(ctx, random_input(data, {2, 3, 3, 32, 32}));
  for (const auto& m : maps) EXPECT_EQ(m.values.dim(0), 6u);
  EXPECT_THROW(branch.extract_stage_maps(ctx, random_input(data, {1, 3, 16, 16})), Error);
}

TEST(SpatialStages, ZeroInputZeroBiasGivesZeroMaps) {
  Rng rng(4);
  SpatialBranch branch(BackboneConfig{}, rng);
  GradContext ctx;
  for (const auto& m : branch.extract_stage_maps(ctx, zeros({1, 3, 64, 64}))) {
    for (double v : m.values.value()) EXPECT_EQ(v, 0.0);
  }
}

TEST(PoolToFinal, IdentityBlockMeanAndConstant) {
  std::vector<double> counting(16 * 24 * 24);
  std::iota(counting.begin(), counting.end(), 0.0);
  const Var big = constant({1, 16, 24, 24}, counting);
  const Var out = pool_to_final_resolution(big, 12, 12);
  ASSERT_EQ(out.shape(), (Shape{1, 16, 12, 12}));
  for (std::size_t c = 0; c < 16; ++c) {
    for (std::size_t y = 0; y < 12; ++y) {
      for (std::size_t x = 0; x < 12; ++x) {
        auto at = [&](std::size_t yy, std::size_t xx) { return counting[(c * 24 + yy) * 24 + xx]; };
        const double block = (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4;
        ASSERT_NEAR(out[(c * 12 + y) * 12 + x], block, 1e-12);
      }
    }
  }
  Rng rng(5);
  const Var same = random_input(rng, {1, 16, 12, 12});
  EXPECT_EQ(values_of(pool_to_final_resolution(same, 12, 12)), values_of(same));
  const Var flat = constant({1, 2, 10, 7}, std::vector<double>(140, 3.25));
  const Var pooled = pool_to_final_resolution(flat, 3, 2);
  for (double v : pooled.value()) EXPECT_NEAR(v, 3.25, 1e-15);
  EXPECT_THROW(pool_to_final_resolution(same, 13, 12), Error);
}

TEST(PoolToFinal, Linearity) {
  Rng rng(6);
  for (int k = 0; k < 10; ++k) {
    const std::size_t h = 5 + rng.below(20), w = 5 + rng.below(20);
    const std::size_t th = 1 + rng.below(h), tw = 1 + rng.below(w);
    const Var a = random_input(rng, {1, 3, h, w}, -1, 1), b = random_input(rng, {1, 3, h, w}, -1, 1);
    const double alpha = rng.uniform(-2, 2);
    const Var lhs = pool_to_final_resolution(add(scale(a, alpha), b), th, tw);
    const Var rhs = add(scale(pool_to_final_resolution(a, th, tw), alpha), pool_to_final_resolution(b, th, tw));
    for (std::size_t i = 0; i < lhs.size(); ++i) ASSERT_NEAR(lhs[i], rhs[i], 1e-12);
  }
}

BackboneConfig fusion_config(bool zero_out) {
  BackboneConfig cfg;
  cfg.channels = {8, 16, 32, 64};
  cfg.heads = 4;
  cfg.embed_width = 16;
  cfg.zero_init_fusion_output = zero_out;
  return cfg;
}

TEST(Fusion, ShapeAndResidualIdentity) {
  Rng rng(7);
  SpatialBranch branch(fusion_config(true), rng);
  std::vector<Var> pooled;
  for (std::size_t c : {8u, 16u, 32u, 64u}) pooled.push_back(random_input(rng, {1, c, 12, 12}, -1, 1));
  GradContext ctx;
  const Var fused = branch.fuse_with_mhsa(ctx, pooled);
  EXPECT_EQ(fused.shape(), (Shape{1, 120, 12, 12}));
  const Var stacked = concat(pooled, 1);
  EXPECT_EQ(values_of(fused), values_of(stacked));

  Rng rng2(7);
  SpatialBranch live(fusion_config(false), rng2);
  const Var changed = live.fuse_with_mhsa(ctx, pooled);
  EXPECT_EQ(changed.shape(), (Shape{1, 120, 12, 12}));
  EXPECT_NE(values_of(changed), values_of(stacked));

  std::vector<Var> bad = pooled;
  bad[1] = random_input(rng, {1, 16, 6, 6});
  EXPECT_THROW(live.fuse_with_mhsa(ctx, bad), Error);
}

TEST(Fusion, TokenPermutationEquivariance) {
  Rng rng(8);
  BackboneConfig cfg;
  cfg.channels = {3, 5};
  cfg.strides = {2, 2};
  cfg.heads = 2;
  cfg.embed_width = 4;
  SpatialBranch branch(cfg, rng);
  const std::size_t c = 8, h = 2, w = 3, l = h * w;
  const Var x = random_input(rng, {1, c, h, w}, -1, 1);
  std::vector<std::size_t> perm(l);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<double> xp(c * l);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t t = 0; t < l; ++t) xp[ch * l + perm[t]] = x[ch * l + t];
  GradContext ctx;
  const Var a = branch.fuse_with_mhsa(ctx, {slice(x, 1, 0, 3), slice(x, 1, 3, 8)});
  const Var px = constant({1, c, h, w}, xp);
  const Var b = branch.fuse_with_mhsa(ctx, {slice(px, 1, 0, 3), slice(px, 1, 3, 8)});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t t = 0; t < l; ++t) EXPECT_NEAR(b[ch * l + perm[t]], a[ch * l + t], 1e-12);
}

TEST(MeanStdPool, Examples) {
  {
    const auto [mu, sigma] = global_mean_std_pool(constant({1, 2, 3, 3}, std::vector<double>(18, 3.0)));
    for (double v : mu.value()) EXPECT_DOUBLE_EQ(v, 3.0);
    for (double v : sigma.value()) EXPECT_NEAR(v, 0.0, 1e-4);  // sqrt(eps)
  }
  {
    const auto [mu, sigma] = global_mean_std_pool(constant({1, 1, 2, 2}, {1.0, 3.0, 3.0, 1.0}));
    EXPECT_DOUBLE_EQ(mu[0], 2.0);
    EXPECT_NEAR(sigma[0], 1.0, 1e-8);
  }
  EXPECT_THROW(global_mean_std_pool(constant({1, 1, 1, 2}, {1.0, NAN})), Error);
}

TEST(SpatialFeatureWidth, ShapeLaw) {
  EXPECT_EQ(BackboneConfig{}.feature_width(), 240u);
  BackboneConfig wide;
  wide.channels = {80, 160, 320, 640};
  wide.tapped_stages = {2, 3, 4};
  EXPECT_EQ(wide.fused_channels(), 1120u);
  EXPECT_EQ(wide.feature_width(), 2240u);

  Rng rng(9);
  for (int k = 0; k < 8; ++k) {
    BackboneConfig cfg;
    const std::size_t n = 2 + rng.below(3);
    cfg.channels.clear();
    cfg.strides.assign(n, 2);
    for (std::size_t i = 0; i < n; ++i) cfg.channels.push_back(1 + rng.below(6));
    cfg.heads = 1;
    cfg.embed_width = 1 + rng.below(5);
    Rng init(k);
    SpatialBranch branch(cfg, init);
    GradContext ctx;
    const SpatialFeature f = branch.spatial_feature(ctx, random_input(rng, {2, 3, 16, 16}));
    EXPECT_EQ(f.size(), 2 * std::accumulate(cfg.channels.begin(), cfg.channels.end(), std::size_t{0}));
    for (double s : f.sigma()) EXPECT_GE(s, 0.0);
  }
}

TEST(SpatialFeatureValue, ResidualOnlyPathIsStatisticsOfPooledMaps) {
  Rng rng(10);
  BackboneConfig cfg = fusion_config(true);
  SpatialBranch branch(cfg, rng);
  const Var gray = constant({1, 3, 96, 96}, std::vector<double>(3 * 96 * 96, 0.4));
  GradContext ctx;
  const SpatialFeature f = branch.spatial_feature(ctx, gray);
  ASSERT_EQ(f.size(), 240u);
  const auto maps = branch.extract_stage_maps(ctx, gray);
  std::size_t channel = 0;
  for (const auto& m : maps) {
    const Var p = pool_to_final_resolution(m.values, 3, 3);
    const std::size_t cs = p.dim(1);
    for (std::size_t c = 0; c < cs; ++c, ++channel) {
      double s = 0, s2 = 0;
      for (std::size_t i = 0; i < 9; ++i) s += p[c * 9 + i];
      const double mu = s / 9;
      for (std::size_t i = 0; i < 9; ++i) s2 += (p[c * 9 + i] - mu) * (p[c * 9 + i] - mu);
      EXPECT_NEAR(f.mu()[channel], mu, 1e-12);
      EXPECT_NEAR(f.sigma()[channel], std::sqrt(s2 / 9 + 1e-8), 1e-12);
    }
  }
}

TEST(SpatialFeatureValue, VideoFeatureIsMeanOverFrames) {
  Rng rng(11);
  SpatialBranch branch(tiny_model_config().backbone, rng);
  const Var frames = random_input(rng, {3, 3, 8, 8});
  GradContext ctx;
  const SpatialFeature all = branch.spatial_feature(ctx, frames);
  std::vector<double> mean(all.size(), 0.0);
  for (std::size_t t = 0; t < 3; ++t) {
    const SpatialFeature one = branch.spatial_feature(ctx, slice(frames, 0, t, t + 1));
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += one.values[i] / 3;
  }
  for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(all.values[i], mean[i], 1e-12);
  const Var batch = branch.batch_spatial_features(ctx, reshape(frames, {1, 3, 3, 8, 8}));
  for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(batch[i], mean[i], 1e-12);
}

TEST(SpatialGradient, InputPixels) {
  Rng rng(12);
  SpatialBranch branch(tiny_model_config().backbone, rng);
  const auto x0 = random_vector(rng, 3 * 8 * 8, 0.0, 1.0);
  const auto err = check_input_gradient(x0, {1, 3, 8, 8}, [&](const Var& x) {
    GradContext ctx;
    return project(branch.spatial_feature(ctx, x).values, 1);
  });
  EXPECT_LE(err.relative, 1e-3) << "worst element " << err.worst_element;
}

TEST(SpatialGradient, AllParameters) {
  Rng rng(13);
  SpatialBranch branch(tiny_model_config().backbone, rng);
  // Non-zero biases so no bias sits exactly at a symmetric point.
  for (auto& p : branch.params().all())
    if (p.name.find("bias") != std::string::npos)
      for (double& v : p.value) v = rng.uniform(-0.1, 0.1);
  const Var x = random_input(rng, {2, 3, 8, 8});
  std::vector<Parameter*> params;
  for (auto& p : branch.params().all()) params.push_back(&p);
  const auto err = check_parameter_gradient(params, {ParamGroup::spatial}, [&](GradContext& ctx) {
    return project(branch.spatial_feature(ctx, x).values, 2);
  });
  EXPECT_LE(err.relative, 1e-3) << "checked " << err.checked;
  EXPECT_GT(err.checked, 100u);
}

TEST(FusionGradient, MhsaBlock) {
  Rng rng(14);
  BackboneConfig cfg;
  cfg.channels = {3, 5};
  cfg.strides = {2, 2};
  cfg.heads = 2;
  cfg.embed_width = 4;
  SpatialBranch branch(cfg, rng);
  const auto x0 = random_vector(rng, 8 * 2 * 2, -1.0, 1.0);
  const auto err = check_input_gradient(x0, {1, 8, 2, 2}, [&](const Var& x) {
    GradContext ctx;
    return project(branch.fuse_with_mhsa(ctx, {slice(x, 1, 0, 3), slice(x, 1, 3, 8)}), 3);
  });
  EXPECT_LE(err.relative, 1e-3);
}

// ---------------------------------------------------------------------------
// Motion

std::vector<Image> random_chunk(Rng& rng, std::size_t t, std::size_t h, std::size_t w) {
  std::vector<Image> chunk;
  for (std::size_t i = 0; i < t; ++i) {
    Image f(3, h, w);
    for (float& v : f.data) v = static_cast<float>(rng.uniform());
    chunk.push_back(std::move(f));
  }
  return chunk;
}

TEST(Motion, DefaultExtractorWidthAndDeterminism) {
  const MotionExtractor m(MotionConfig{});
  Rng rng(15);
  const auto chunk = random_chunk(rng, 32, 224, 224);
  const MotionFeature a = m.extract_motion_feature(chunk, 3);
  EXPECT_EQ(a.values.size(), 256u);
  EXPECT_EQ(a.chunk_index, 3u);
  for (double v : a.values) EXPECT_TRUE(std::isfinite(v));
  const MotionExtractor again(MotionConfig{});
  EXPECT_EQ(again.extract_motion_feature(chunk, 3), a);
  EXPECT_EQ(again.checksum(), m.checksum());
}

TEST(Motion, StaticChunkUnchangedByShuffle) {
  const MotionExtractor m(tiny_model_config().motion);
  Rng rng(16);
  const auto one = random_chunk(rng, 1, 8, 8).front();
  std::vector<Image> chunk(5, one);
  std::vector<Image> shuffled = chunk;
  rng.shuffle(shuffled);
  EXPECT_EQ(m.extract_motion_feature(chunk).values, m.extract_motion_feature(shuffled).values);
}

TEST(Motion, TemporalOrderMatters) {
  const MotionExtractor m(tiny_model_config().motion);
  Rng rng(17);
  auto chunk = random_chunk(rng, 4, 8, 8);
  const auto a = m.extract_motion_feature(chunk).values;
  std::swap(chunk[0], chunk[3]);
  std::swap(chunk[1], chunk[2]);
  std::rotate(chunk.begin(), chunk.begin() + 1, chunk.end());
  EXPECT_NE(a, m.extract_motion_feature(chunk).values);
}

TEST(Motion, SingleFrameChunkRejected) {
  const MotionExtractor m(tiny_model_config().motion);
  Rng rng(18);
  EXPECT_THROW(m.extract_motion_feature(random_chunk(rng, 1, 8, 8)), Error);
}

TEST(MotionAggregate, Examples) {
  const MotionFeature v{{1.0, -2.0, 0.5}, 0};
  EXPECT_EQ(aggregate_chunks({v}).values, v.values);
  const MotionFeature neg{{-1.0, 2.0, -0.5}, 1};
  for (double x : aggregate_chunks({v, neg}).values) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(aggregate_chunks({{{1, 1, 1}, 0}, {{2, 2, 2}, 1}, {{3, 3, 3}, 2}}).values, (std::vector<double>{2, 2, 2}));
  EXPECT_THROW(aggregate_chunks({}), Error);
  EXPECT_THROW(aggregate_chunks({v, {{1.0}, 1}}), Error);
}

TEST(MotionAggregate, PermutationInvariant) {
  Rng rng(19);
  std::vector<MotionFeature> chunks;
  for (std::size_t i = 0; i < 6; ++i) chunks.push_back({random_vector(rng, 5), i});
  const auto a = aggregate_chunks(chunks).values;
  rng.shuffle(chunks);
  const auto b = aggregate_chunks(chunks).values;
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

// ---------------------------------------------------------------------------
// Audio

AudioConfig small_audio(std::size_t d, bool zero_attn = false) {
  AudioConfig a;
  a.embed_dim = d;
  a.conv_channels = {2, 3};
  a.heads = 2;
  a.max_segments = 64;
  a.zero_init_attention_output = zero_attn;
  return a;
}

MelConfig small_mel() {
  MelConfig m = tiny_model_config().mel;
  return m;
}

TEST(AudioFramewise, ShapesAndDeterminism) {
  Rng rng(20);
  AudioBranch branch(AudioConfig{}, MelConfig{}, rng);
  std::vector<double> seg = random_vector(rng, 15 * 48, -8, 0);
  std::vector<double> data;
  for (int i = 0; i < 10; ++i) data.insert(data.end(), seg.begin(), seg.end());
  GradContext ctx;
  const Var e = branch.framewise_embed(ctx, constant({10, 1, 15, 48}, data));
  ASSERT_EQ(e.shape(), (Shape{10, 64}));
  for (std::size_t r = 1; r < 10; ++r)
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(e[r * 64 + c], e[c]);
  EXPECT_THROW(branch.framewise_embed(ctx, zeros({0, 1, 15, 48})), Error);
  EXPECT_THROW(branch.framewise_embed(ctx, zeros({2, 1, 14, 48})), Error);
}

TEST(AudioTimeDependency, IdentityWithZeroOutputAndShapeLaw) {
  Rng rng(21);
  AudioBranch zero(small_audio(8, true), small_mel(), rng);
  AudioBranch live(small_audio(8), small_mel(), rng);
  GradContext ctx;
  for (std::size_t s : {1u, 5u, 37u}) {
    const Var e = random_input(rng, {s, 8}, -1, 1);
    EXPECT_EQ(values_of(zero.time_dependency(ctx, e)), values_of(e));
    EXPECT_EQ(live.time_dependency(ctx, e).shape(), (Shape{s, 8}));
  }
  EXPECT_THROW(live.time_dependency(ctx, zeros({65, 8})), Error);
  EXPECT_THROW(live.time_dependency(ctx, zeros({3, 7})), Error);
}

TEST(AudioTimeDependency, GradientSmallSequence) {
  Rng rng(22);
  AudioBranch branch(small_audio(8), small_mel(), rng);
  const auto x0 = random_vector(rng, 3 * 8);
  const auto err = check_input_gradient(x0, {3, 8}, [&](const Var& x) {
    GradContext ctx;
    return project(branch.time_dependency(ctx, x), 4);
  });
  EXPECT_LE(err.relative, 1e-3);
  std::vector<Parameter*> params;
  for (auto& p : branch.params().all())
    if (p.name.rfind("attn", 0) == 0 || p.name == "position") params.push_back(&p);
  const Var x = constant({3, 8}, x0);
  const auto perr = check_parameter_gradient(params, {ParamGroup::audio}, [&](GradContext& ctx) {
    return project(branch.time_dependency(ctx, x), 5);
  });
  EXPECT_LE(perr.relative, 1e-3);
}

TEST(AudioPool, ExamplesAndProbabilityVector) {
  Rng rng(23);
  AudioBranch branch(small_audio(2), small_mel(), rng);
  GradContext ctx;
  const PooledAudio same = branch.attention_pool(ctx, constant({3, 2}, {0.7, -0.2, 0.7, -0.2, 0.7, -0.2}));
  EXPECT_NEAR(same.feature[0], 0.7, 1e-12);
  EXPECT_NEAR(same.feature[1], -0.2, 1e-12);

  // Equal logits for [1,0] and [0,1]: the scoring weight must be symmetric.
  auto& w = branch.params().at("pool.weight").value;
  w = {0.3, 0.3};
  GradContext fresh;  // contexts cache bound values
  const PooledAudio half = branch.attention_pool(fresh, constant({2, 2}, {1, 0, 0, 1}));
  EXPECT_NEAR(half.feature[0], 0.5, 1e-12);
  EXPECT_NEAR(half.feature[1], 0.5, 1e-12);
  w = {1.2, -0.4};

  AudioBranch wide(small_audio(6), small_mel(), rng);
  for (int k = 0; k < 50; ++k) {
    const std::size_t s = 1 + rng.below(20);
    const Var e = random_input(rng, {s, 6}, -3, 3);
    const PooledAudio p = wide.attention_pool(ctx, e);
    double total = 0;
    for (double v : p.weights.value()) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    for (std::size_t c = 0; c < 6; ++c) {
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t r = 0; r < s; ++r) lo = std::min(lo, e[r * 6 + c]), hi = std::max(hi, e[r * 6 + c]);
      EXPECT_GE(p.feature[c], lo - 1e-12);
      EXPECT_LE(p.feature[c], hi + 1e-12);
    }
  }
}

TEST(AudioFeature, EndToEndDefaults) {
  Rng rng(24);
  AudioBranch branch(AudioConfig{}, MelConfig{}, rng);
  std::vector<double> silence(16000, 0.0), noise(16000);
  for (double& v : noise) v = rng.uniform(-1, 1);
  GradContext ctx;
  const AudioFeature a = branch.audio_feature(ctx, silence, 16000.0);
  const AudioFeature b = branch.audio_feature(ctx, noise, 16000.0);
  ASSERT_EQ(a.size(), 64u);
  ASSERT_EQ(b.size(), 64u);
  double dist = 0;
  for (std::size_t i = 0; i < 64; ++i) dist += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  EXPECT_GT(std::sqrt(dist), 1e-3);
  EXPECT_EQ(values_of(branch.audio_feature(ctx, noise, 16000.0).values), values_of(b.values));
  std::vector<double> longer(48000, 0.1);
  EXPECT_EQ(branch.audio_feature(ctx, longer, 16000.0).size(), 64u);
  EXPECT_THROW(branch.audio_feature(ctx, std::vector<double>(1600, 0.0), 16000.0), Error);  // no full segment
}

TEST(AudioGradient, EndToEndTinyConfig) {
  const ModelConfig mc = tiny_model_config();
  Rng rng(25);
  AudioBranch branch(mc.audio, mc.mel, rng);
  for (auto& p : branch.params().all())
    if (p.name.find("bias") != std::string::npos)
      for (double& v : p.value) v = rng.uniform(-0.1, 0.1);
  std::vector<double> wave(200);
  for (double& v : wave) v = rng.uniform(-0.5, 0.5);
  const MelSpectrogram mel = compute_mel_spectrogram(wave, mc.mel.sample_rate, mc.mel);
  ASSERT_GE(mel.segment_starts.size(), 2u);
  std::vector<Parameter*> params;
  for (auto& p : branch.params().all()) params.push_back(&p);
  const auto err = check_parameter_gradient(params, {ParamGroup::audio}, [&](GradContext& ctx) {
    return project(branch.audio_feature(ctx, mel).values, 6);
  });
  EXPECT_LE(err.relative, 1e-3);
  const Var segs = mel_segments_to_var(mel);
  const auto ierr = check_input_gradient(values_of(segs), segs.shape(), [&](const Var& x) {
    GradContext ctx;
    return project(branch.attention_pool(ctx, branch.time_dependency(ctx, branch.framewise_embed(ctx, x))).feature, 7);
  });
  EXPECT_LE(ierr.relative, 1e-3);
}

}  // namespace
}  // namespace unqa
