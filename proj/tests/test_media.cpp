#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <set>

#include "test_util.hpp"

namespace unqa {
namespace {

using testing::scratch_dir;

// Plain two-pass Spearman: average ranks, then Pearson.
double oracle_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, same = 0;
      for (double w : v) {
        less += w < v[i];
        same += w == v[i];
      }
      r[i] = less + (same + 1) / 2;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += ra[i] / n, mb += rb[i] / n;
  double c = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    c += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return c / std::sqrt(va * vb);
}

std::vector<double> latent(const Database& db) {
  std::vector<double> q;
  for (const auto& s : db.samples) q.push_back(*s.latent_quality);
  return q;
}

Image gradient_image(std::size_t h, std::size_t w, double a, double b, double c) {
  Image img(1, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) img.at(0, y, x) = static_cast<float>(a * y + b * x + c);
  return img;
}

TEST(Geometry, RescaleAndCropExamples) {
  EXPECT_EQ(rescaled_size(1080, 1920, 520), (Size2{520, 924}));
  EXPECT_EQ(rescaled_size(520, 520, 520), (Size2{520, 520}));
  EXPECT_EQ(rescaled_size(600, 400, 520), (Size2{780, 520}));
  const CropWindow w = center_crop_window({780, 520}, 384);
  EXPECT_EQ(w.top, 198u);
  EXPECT_EQ(w.left, 68u);

  const Image big(3, 1080, 1920, 0.5f);
  const Image out = preprocess_image(big);
  EXPECT_EQ(out.channels, 3u);
  EXPECT_EQ(out.height, 384u);
  EXPECT_EQ(out.width, 384u);
  EXPECT_THROW(preprocess_image(Image(3, 0, 5)), Error);
}

TEST(Geometry, SquareInputAtShortSideIsPlainCrop) {
  Rng rng(1);
  Image img(1, 520, 520);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  const Image out = preprocess_image(img);
  for (std::size_t y = 0; y < 384; ++y)
    for (std::size_t x = 0; x < 384; ++x) ASSERT_EQ(out.at(0, y, x), img.at(0, y + 68, x + 68));
}

TEST(Geometry, OutputSizeProperty) {
  Rng rng(4);
  for (int k = 0; k < 200; ++k) {
    const std::size_t h = 1 + rng.below(2000), w = 1 + rng.below(2000);
    const Size2 s = rescaled_size(h, w, 520);
    EXPECT_EQ(std::min(s.height, s.width), 520u);
    const double ratio = static_cast<double>(std::max(h, w)) / static_cast<double>(std::min(h, w));
    EXPECT_LE(std::fabs(static_cast<double>(std::max(s.height, s.width)) - 520.0 * ratio), 0.5 + 1e-9);
  }
  const Image out = preprocess_image(Image(1, 7, 13, 0.2f));
  EXPECT_EQ(out.height, 384u);
  EXPECT_EQ(out.width, 384u);
}

TEST(Geometry, CropOfResizeEqualsResizeThenCrop) {
  Rng rng(8);
  Image img(2, 30, 45);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  PreprocessConfig cfg{20, 16, 8};
  const Image direct = preprocess_image(img, cfg);
  const Size2 s = rescaled_size(30, 45, 20);
  const Image full = resize_bilinear(img, s.height, s.width);
  const CropWindow w = center_crop_window(s, 16);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) ASSERT_EQ(direct.at(c, y, x), full.at(c, y + w.top, x + w.left));
}

TEST(MotionClip, ShapesAndIdentity) {
  std::vector<Image> clip(8, Image(3, 100, 50, 0.3f));
  const auto out = preprocess_motion_clip(clip);
  ASSERT_EQ(out.size(), 8u);
  for (const auto& f : out) {
    EXPECT_EQ(f.height, 224u);
    EXPECT_EQ(f.width, 224u);
    EXPECT_EQ(f.channels, 3u);
  }
  Image one(3, 224, 224);
  one.at(1, 5, 7) = 0.9f;
  EXPECT_EQ(preprocess_motion_clip({one}).front(), one);
  EXPECT_THROW(preprocess_motion_clip({}), Error);
}

TEST(MotionClip, BilinearMatchesAnalyticResampler) {
  // Bilinear interpolation reproduces a linear ramp exactly at the clamped
  // half-pixel source coordinates.
  const double a = 0.1, b = 0.05, c = 0.2;
  const std::vector<std::pair<std::size_t, std::size_t>> inputs{{4, 4}, {100, 50}};
  for (auto [h, w] : inputs) {
    const Image img = gradient_image(h, w, a / h, b / w, c);
    const auto out = preprocess_motion_clip({img});
    const Image& r = out.front();
    for (std::size_t y = 0; y < 224; ++y) {
      for (std::size_t x = 0; x < 224; ++x) {
        const double sy = std::clamp((y + 0.5) * h / 224.0 - 0.5, 0.0, h - 1.0);
        const double sx = std::clamp((x + 0.5) * w / 224.0 - 0.5, 0.0, w - 1.0);
        const double expected = (a / h) * sy + (b / w) * sx + c;
        ASSERT_NEAR(r.at(0, y, x), expected, 1e-6);
      }
    }
  }
}

TEST(VideoSampling, KeyframesAndChunks) {
  FrameSequence v;
  v.frame_rate = 4.0;
  v.frames.assign(10, Image(1, 2, 2));
  EXPECT_EQ(keyframe_indices(v, {}), (std::vector<std::size_t>{0, 4, 8}));
  const auto chunks = chunk_ranges(v, {});
  ASSERT_EQ(chunks.size(), 3u);  // [0,4) [4,8) and the 2-frame tail [8,10)
  EXPECT_EQ(chunks.back(), (std::pair<std::size_t, std::size_t>{8, 10}));
  v.frames.resize(9);
  EXPECT_EQ(chunk_ranges(v, {}).size(), 2u);  // 1-frame tail dropped
  v.frames.resize(1);
  EXPECT_EQ(chunk_ranges(v, {}).size(), 1u);
}

// Naive short-time DFT and HTK triangular bank, written independently.
std::vector<double> oracle_mel(const std::vector<double>& x, double sr, const MelConfig& cfg, std::size_t& frames) {
  const auto win = static_cast<std::size_t>(std::llround(cfg.window_seconds * sr));
  const auto hop = static_cast<std::size_t>(std::llround(cfg.hop_seconds * sr));
  std::size_t n_fft = 1;
  while (n_fft < win) n_fft *= 2;
  frames = (x.size() - win) / hop + 1;
  const std::size_t bins = n_fft / 2 + 1;
  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double top = mel(sr / 2);
  std::vector<double> out(frames * cfg.n_bands);
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<double> p(bins);
    for (std::size_t k = 0; k < bins; ++k) {
      std::complex<double> acc = 0;
      for (std::size_t i = 0; i < win; ++i) {
        const double hann = 0.5 * (1 - std::cos(2 * std::numbers::pi * i / win));
        acc += x[f * hop + i] * hann * std::polar(1.0, -2 * std::numbers::pi * k * i / n_fft);
      }
      p[k] = std::norm(acc);
    }
    for (std::size_t m = 0; m < cfg.n_bands; ++m) {
      const double l = hz(top * m / (cfg.n_bands + 1)), c = hz(top * (m + 1) / (cfg.n_bands + 1)),
                   r = hz(top * (m + 2) / (cfg.n_bands + 1));
      double e = 0;
      for (std::size_t k = 0; k < bins; ++k) {
        const double fk = k * sr / n_fft;
        if (fk > l && fk <= c) e += p[k] * (fk - l) / (c - l);
        if (fk > c && fk < r) e += p[k] * (r - fk) / (r - c);
      }
      out[f * cfg.n_bands + m] = std::log10(std::max(e, cfg.log_floor));
    }
  }
  return out;
}

TEST(Mel, DefaultGridMatchesNaiveTransform) {
  Rng rng(12);
  std::vector<double> x(16000);
  for (double& v : x) v = rng.uniform(-0.5, 0.5);
  const MelConfig cfg;
  const MelSpectrogram mel = compute_mel_spectrogram(x, 16000.0, cfg);
  EXPECT_EQ(mel.n_frames, 99u);
  EXPECT_EQ(mel.n_bands, 48u);
  EXPECT_DOUBLE_EQ(mel.frame_hop, 0.01);
  std::size_t frames = 0;
  const auto ref = oracle_mel(x, 16000.0, cfg, frames);
  ASSERT_EQ(frames, 99u);
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(mel.values[i], ref[i], 1e-9) << i;
}

TEST(Mel, SilenceIsLogFloor) {
  const MelSpectrogram mel = compute_mel_spectrogram(std::vector<double>(8000, 0.0), 16000.0);
  for (double v : mel.values) EXPECT_EQ(v, -10.0);
}

TEST(Mel, SineAtBandCenterPeaksInThatBand) {
  const MelConfig cfg;
  const double top = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  for (std::size_t band : {10u, 20u, 35u}) {
    const double f0 = 700.0 * (std::pow(10.0, top * (band + 1) / 49.0 / 2595.0) - 1.0);
    std::vector<double> x(16000);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5 * std::sin(2 * std::numbers::pi * f0 * i / 16000.0);
    const MelSpectrogram mel = compute_mel_spectrogram(x, 16000.0, cfg);
    for (std::size_t f = 0; f < mel.n_frames; f += 10) {
      std::size_t best = 0;
      for (std::size_t b = 1; b < mel.n_bands; ++b)
        if (mel.at(f, b) > mel.at(f, best)) best = b;
      EXPECT_EQ(best, band) << "frame " << f;
    }
  }
}

TEST(Mel, FrameCountSegmentsAndErrors) {
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    const std::size_t n = 320 + rng.below(5000);
    std::vector<double> x(n);
    for (double& v : x) v = rng.uniform(-1, 1);
    const MelSpectrogram mel = compute_mel_spectrogram(x, 16000.0);
    EXPECT_EQ(mel.n_frames, (n - 320) / 160 + 1);
    for (double v : mel.values) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GE(v, -10.0);
    }
    for (std::size_t i = 1; i < mel.segment_starts.size(); ++i) {
      EXPECT_EQ(mel.segment_starts[i] - mel.segment_starts[i - 1], 8u);  // 15 wide, 50% overlap
    }
    if (!mel.segment_starts.empty()) EXPECT_LE(mel.segment_starts.back() + 15, mel.n_frames);
  }
  EXPECT_THROW(compute_mel_spectrogram(std::vector<double>(100, 0.0), 16000.0), Error);
  EXPECT_THROW(compute_mel_spectrogram(std::vector<double>(1000, 0.0), 0.0), Error);
}

TEST(Synthetic, ImageDatabaseRankRecovery) {
  DistortionConfig d;
  d.families = {"noise", "blur"};
  const Database db = generate_synthetic_database("syn_image", Modality::image, 100, d, 1);
  ASSERT_EQ(db.samples.size(), 100u);
  for (const auto& s : db.samples) {
    EXPECT_TRUE(db.spec.mos_range.contains(s.mos));
    ASSERT_TRUE(s.latent_quality);
    EXPECT_GE(*s.latent_quality, 0.0);
    EXPECT_LE(*s.latent_quality, 1.0);
    EXPECT_EQ(s.payload.content->image->height, 72u);
  }
  EXPECT_GE(oracle_spearman(latent(db), db.mos_values()), 0.95);
}

TEST(Synthetic, NoiselessMosIsMonotoneInLatent) {
  DistortionConfig d;
  d.families = {"noise"};
  d.mos_noise = 0.0;
  d.audio_seconds = 0.1;
  const Database db = generate_synthetic_database("syn_audio", Modality::audio, 10, d, 7);
  EXPECT_EQ(oracle_spearman(latent(db), db.mos_values()), 1.0);
  for (Modality m : kAllModalities) {
    const Database t = *testing::tiny_database("t", m, 30, 9, {0, 100});
    EXPECT_EQ(rank_with_ties(latent(t)), rank_with_ties(t.mos_values()));
  }
}

TEST(Synthetic, Deterministic) {
  for (Modality m : kAllModalities) {
    const auto a = testing::tiny_database("d", m, 12, 3);
    const auto b = testing::tiny_database("d", m, 12, 3);
    const auto c = testing::tiny_database("d", m, 12, 4);
    bool differs = false;
    for (std::size_t i = 0; i < 12; ++i) {
      EXPECT_EQ(a->samples[i].sample_id, b->samples[i].sample_id);
      EXPECT_EQ(a->samples[i].mos, b->samples[i].mos);
      EXPECT_EQ(*a->samples[i].payload.content, *b->samples[i].payload.content);
      differs |= a->samples[i].mos != c->samples[i].mos;
    }
    EXPECT_TRUE(differs);
  }
}

TEST(Synthetic, Errors) {
  DistortionConfig d;
  EXPECT_THROW(generate_synthetic_database("x", Modality::image, 20, d, 1), Error);  // no families
  d.families = {"clipping"};
  EXPECT_THROW(generate_synthetic_database("x", Modality::image, 20, d, 1), Error);
  d.families = {"noise"};
  EXPECT_THROW(generate_synthetic_database("x", Modality::image, 9, d, 1), Error);
  EXPECT_THROW(parse_modality("hologram"), Error);
}

TEST(Split, SizesFollowFloorRule) {
  EXPECT_EQ(split_sizes(100), (SplitSizes{70, 10, 20}));
  EXPECT_EQ(split_sizes(10), (SplitSizes{7, 1, 2}));
  EXPECT_EQ(split_sizes(101), (SplitSizes{71, 10, 20}));
}

TEST(Split, PartitionPropertyAcrossSeeds) {
  for (std::size_t n : {10u, 37u, 101u}) {
    const auto db = testing::tiny_database("p", Modality::image, n, n);
    std::set<std::vector<std::string>> distinct;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const DatabaseSplit s = split_database(*db, seed);
      const SplitSizes z = split_sizes(n);
      EXPECT_EQ(s.train.size(), z.train);
      EXPECT_EQ(s.val.size(), z.val);
      EXPECT_EQ(s.test.size(), z.test);
      std::set<std::string> all;
      for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
      EXPECT_EQ(all.size(), n);  // disjoint and covering
      for (const auto& smp : db->samples) EXPECT_TRUE(all.count(smp.sample_id));
      EXPECT_EQ(split_database(*db, seed).test, s.test);
      distinct.insert(s.test);
    }
    EXPECT_GT(distinct.size(), 15u);
  }
}

TEST(Split, TooSmallDatabase) {
  Database db = *testing::tiny_database("small", Modality::image, 10, 1);
  db.samples.pop_back();
  EXPECT_THROW(split_database(db, 1), Error);
}

Database three_image_database() {
  Database db;
  db.spec = {"man", Modality::image, {1.0, 5.0}, 3, 2};
  for (int i = 0; i < 3; ++i) {
    MediaSample s;
    s.database = "man";
    s.sample_id = "img,\"" + std::to_string(i) + "\"";  // exercises CSV quoting
    s.modality = Modality::image;
    s.mos = 1.5 + i;
    auto c = std::make_shared<MediaContent>();
    c->image = gradient_image(4, 6, 0.1, 0.05, 0.1 * i);
    s.payload.content = c;
    db.samples.push_back(std::move(s));
  }
  return db;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

void rewrite(const fs::path& p, const std::string& from, const std::string& to) {
  std::string s = slurp(p);
  const auto pos = s.find(from);
  ASSERT_NE(pos, std::string::npos);
  s.replace(pos, from.size(), to);
  std::ofstream(p) << s;
}

ErrorCode error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::io_error;
}

TEST(Manifest, RoundTripAndRegistry) {
  const auto dir = scratch_dir("manifest_rt");
  const fs::path path = write_database(three_image_database(), dir);
  DatabaseRegistry registry;
  const auto db = load_manifest(registry, path);
  EXPECT_EQ(registry.size(), 1u);
  ASSERT_EQ(db->samples.size(), 3u);
  EXPECT_EQ(db->spec.steps_per_epoch, 2u);
  EXPECT_EQ(db->samples[2].sample_id, "img,\"2\"");
  EXPECT_EQ(db->samples[1].mos, 2.5);
  const Image& img = *db->samples[0].payload.content->image;
  const Image ref = gradient_image(4, 6, 0.1, 0.05, 0.0);
  ASSERT_EQ(img.channels, 3u);  // grayscale PGM comes back replicated
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < ref.data.size(); ++i)
      EXPECT_NEAR(img.data[c * ref.data.size() + i], ref.data[i], 0.5 / 255.0 + 1e-7);
  EXPECT_EQ(error_of([&] { load_manifest(registry, path); }), ErrorCode::duplicate);
}

TEST(Manifest, SyntheticAudiovisualRoundTrip) {
  const auto dir = scratch_dir("manifest_av");
  const auto src = testing::tiny_database("av_db", Modality::av, 10, 2);
  ManifestOptions mo;
  mo.sample_rate = 2000.0;
  const Database back = load_manifest(write_database(*src, dir), mo);
  ASSERT_EQ(back.samples.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& a = *src->samples[i].payload.content;
    const auto& b = *back.samples[i].payload.content;
    EXPECT_EQ(b.video->frames.size(), a.video->frames.size());
    EXPECT_DOUBLE_EQ(b.video->frame_rate, a.video->frame_rate);
    ASSERT_EQ(b.audio->samples.size(), a.audio->samples.size());
    for (std::size_t k = 0; k < a.audio->samples.size(); ++k) EXPECT_NEAR(b.audio->samples[k], a.audio->samples[k], 1e-9);
    EXPECT_EQ(back.samples[i].mos, src->samples[i].mos);
  }
}

TEST(Manifest, Errors) {
  const auto dir = scratch_dir("manifest_err");
  const fs::path path = write_database(three_image_database(), dir);
  const std::string good = slurp(path);

  rewrite(path, ",2.5\n", ",6.0\n");
  EXPECT_EQ(error_of([&] { load_manifest(path); }), ErrorCode::out_of_range);

  std::ofstream(path) << good;
  rewrite(path, "\"img,\"\"1\"\"\"", "\"img,\"\"0\"\"\"");
  EXPECT_EQ(error_of([&] { load_manifest(path); }), ErrorCode::duplicate);

  std::ofstream(path) << good;
  fs::remove(dir / "media" / "img,\"2\".ppm");
  try {
    load_manifest(path);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::missing_file);
    EXPECT_NE(std::string(e.what()).find("img,\"2\""), std::string::npos);
  }
  EXPECT_EQ(error_of([&] { load_manifest(dir / "absent.csv"); }), ErrorCode::missing_file);
}

TEST(Registry, RejectsInvalidDatabases) {
  Database db = three_image_database();
  db.spec.mos_range = {5.0, 1.0};
  DatabaseRegistry r;
  EXPECT_EQ(error_of([&] { r.add(db); }), ErrorCode::out_of_range);
  db = three_image_database();
  db.samples[1].modality = Modality::audio;
  EXPECT_THROW(r.add(db), Error);
  EXPECT_EQ(r.size(), 0u);
}

TEST(Config, JsonRoundTripAndHash) {
  RunConfig c = testing::tiny_run_config();
  SyntheticSpec s;
  s.name = "inline";
  s.distortion.families = {"noise"};
  c.databases.push_back({"", s});
  c.databases.push_back({"some/manifest.csv", std::nullopt});
  const json j = c;
  const RunConfig back = j.get<RunConfig>();
  EXPECT_EQ(json(back).dump(), j.dump());
  EXPECT_EQ(config_hash(back), config_hash(c));

  RunConfig moved = c;
  moved.run_dir = "elsewhere";
  moved.evaluation.repeats = 3;
  EXPECT_EQ(config_hash(moved), config_hash(c));
  moved.seed = 6;
  EXPECT_NE(config_hash(moved), config_hash(c));

  const json partial = json::parse(R"({"seed": 3, "training": {"batch_size": 4}})");
  const RunConfig p = partial.get<RunConfig>();
  EXPECT_EQ(p.training.batch_size, 4u);
  EXPECT_EQ(p.training.step1.epochs, 20u);
  EXPECT_EQ(p.model.preprocess.crop, 384u);
}

TEST(Config, ExampleConfigsParse) {
  for (const auto& entry : fs::directory_iterator(fs::path(UNQA_SOURCE_DIR) / "examples" / "configs")) {
    if (entry.path().extension() != ".json") continue;
    const RunConfig c = load_run_config(entry.path().string());
    EXPECT_FALSE(c.databases.empty()) << entry.path();
  }
  EXPECT_EQ(error_of([] { load_run_config("/nonexistent/config.json"); }), ErrorCode::missing_file);
}

}  // namespace
}  // namespace unqa
