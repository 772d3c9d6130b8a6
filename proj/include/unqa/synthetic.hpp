#pragma once

// Desk-scale synthetic databases. Each sample draws a latent quality
// q ~ U[0, 1]; every configured distortion family is applied with severity
// (1 - q), and the MOS is a hidden per-database affine image of q plus
// Gaussian noise, clamped into the declared MOS range.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "unqa/config.hpp"
#include "unqa/core.hpp"
#include "unqa/media.hpp"

namespace unqa {

inline const std::set<std::string>& distortion_families(Modality m) {
  static const std::set<std::string> visual{"noise", "blur", "brightness"};
  static const std::set<std::string> moving{"noise", "blur", "brightness", "jitter"};
  static const std::set<std::string> audio{"noise", "clipping"};
  static const std::set<std::string> both{"noise", "blur", "brightness", "jitter", "clipping"};
  switch (m) {
    case Modality::image: return visual;
    case Modality::video: return moving;
    case Modality::audio: return audio;
    case Modality::av: return both;
  }
  return visual;
}

namespace detail {

/// Procedural test pattern evaluated at continuous coordinates, so moving
/// content can be rendered without resampling.
class Pattern {
 public:
  explicit Pattern(Rng& rng) {
    for (auto& b : base_) b = rng.uniform(0.3, 0.6);
    for (auto& w : waves_) {
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double period = rng.uniform(3.0, 24.0);
      w.kx = std::cos(angle) * 2.0 * std::numbers::pi / period;
      w.ky = std::sin(angle) * 2.0 * std::numbers::pi / period;
      w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (auto& a : w.amp) a = rng.uniform(0.03, 0.09);
    }
    for (auto& r : rects_) {
      r.y0 = rng.uniform(-0.1, 0.8);
      r.x0 = rng.uniform(-0.1, 0.8);
      r.h = rng.uniform(0.1, 0.4);
      r.w = rng.uniform(0.1, 0.4);
      for (auto& a : r.amp) a = rng.uniform(-0.2, 0.2);
    }
  }

  double operator()(std::size_t c, double y, double x, double height, double width) const {
    double v = base_[c];
    for (const auto& w : waves_) v += w.amp[c] * std::sin(w.kx * x + w.ky * y + w.phase);
    const double ny = y / height;
    const double nx = x / width;
    for (const auto& r : rects_) {
      if (ny >= r.y0 && ny < r.y0 + r.h && nx >= r.x0 && nx < r.x0 + r.w) v += r.amp[c];
    }
    return v;
  }

 private:
  struct Wave {
    double kx, ky, phase;
    double amp[3];
  };
  struct Rect {
    double y0, x0, h, w;
    double amp[3];
  };
  double base_[3];
  Wave waves_[4];
  Rect rects_[3];
};

inline void gaussian_blur(std::vector<double>& plane, std::size_t h, std::size_t w, double sigma) {
  if (sigma <= 1e-6) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    total += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  }
  for (double& k : kernel) k /= total;
  std::vector<double> tmp(plane.size());
  auto clampi = [](long v, long n) { return static_cast<std::size_t>(std::clamp(v, 0L, n - 1)); };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[static_cast<std::size_t>(i + radius)] * plane[y * w + clampi(static_cast<long>(x) + i, static_cast<long>(w))];
      }
      tmp[y * w + x] = acc;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[clampi(static_cast<long>(y) + i, static_cast<long>(h)) * w + x];
      }
      plane[y * w + x] = acc;
    }
  }
}

inline float quantize_u8(double v) {
  return static_cast<float>(std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
}

inline double quantize_pcm16(double v) { return std::round(std::clamp(v, -1.0, 1.0) * 32767.0) / 32767.0; }

inline bool uses(const std::vector<std::string>& families, const char* name) {
  return std::find(families.begin(), families.end(), name) != families.end();
}

inline Image render_frame(const Pattern& pattern, const DistortionConfig& config, double severity, double dy,
                          double dx, Rng& rng) {
  const std::size_t h = config.height, w = config.width;
  Image frame(3, h, w);
  std::vector<double> plane(h * w);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        plane[y * w + x] = pattern(c, static_cast<double>(y) + dy, static_cast<double>(x) + dx,
                                   static_cast<double>(h), static_cast<double>(w));
      }
    }
    if (uses(config.families, "blur")) gaussian_blur(plane, h, w, 2.0 * severity);
    if (uses(config.families, "brightness")) {
      for (double& v : plane) v += 0.35 * severity;
    }
    if (uses(config.families, "noise")) {
      for (double& v : plane) v += rng.normal(0.0, 0.15 * severity);
    }
    for (std::size_t i = 0; i < plane.size(); ++i) frame.data[c * h * w + i] = quantize_u8(plane[i]);
  }
  return frame;
}

inline Waveform render_audio(const DistortionConfig& config, double severity, Rng& rng) {
  const auto n = static_cast<std::size_t>(std::llround(config.audio_seconds * config.sample_rate));
  Waveform wave;
  wave.sample_rate = config.sample_rate;
  wave.samples.assign(n, 0.0);
  const double f0 = rng.uniform(120.0, 400.0);
  const double fm = rng.uniform(1.0, 4.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  double peak = 1e-12;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / config.sample_rate;
    double v = 0.0;
    for (int k = 1; k <= 4; ++k) v += std::sin(2.0 * std::numbers::pi * f0 * k * t + phase * k) / k;
    v *= 1.0 + 0.5 * std::sin(2.0 * std::numbers::pi * fm * t);
    wave.samples[i] = v;
    peak = std::max(peak, std::fabs(v));
  }
  for (double& v : wave.samples) v *= 0.5 / peak;
  if (uses(config.families, "clipping")) {
    const double threshold = 0.5 * (1.0 - 0.85 * severity);
    for (double& v : wave.samples) v = std::clamp(v, -threshold, threshold);
  }
  if (uses(config.families, "noise")) {
    for (double& v : wave.samples) v += rng.normal(0.0, 0.2 * severity);
  }
  for (double& v : wave.samples) v = quantize_pcm16(v);
  return wave;
}

inline std::size_t default_steps(std::size_t n_samples, std::size_t batch_size) {
  const std::size_t train = n_samples - n_samples / 10 - (2 * n_samples) / 10;
  return std::max<std::size_t>(1, (train + batch_size - 1) / batch_size);
}

}  // namespace detail

/// Builds a synthetic database. The modality is validated against the
/// configured distortion families.
inline Database generate_synthetic_database(const std::string& name, Modality modality, std::size_t n_samples,
                                            const DistortionConfig& distortion, std::uint64_t seed,
                                            MosRange mos_range = {1.0, 5.0}) {
  require(n_samples >= 10, ErrorCode::invalid_argument, "synthetic database needs at least 10 samples");
  require(!distortion.families.empty(), ErrorCode::invalid_argument, "distortion config names no families");
  require(mos_range.lo < mos_range.hi, ErrorCode::out_of_range, "mos_range lower bound must be below upper bound");
  const auto& allowed = distortion_families(modality);
  for (const auto& f : distortion.families) {
    require(allowed.count(f) != 0, ErrorCode::invalid_argument,
            "distortion family '" + f + "' not available for " + std::string(to_string(modality)));
  }
  if (has_visual(modality)) {
    require(distortion.height >= 1 && distortion.width >= 1, ErrorCode::invalid_argument, "frame size must be positive");
  }
  if (has_motion(modality)) {
    require(distortion.frame_rate > 0.0 && distortion.video_seconds > 0.0, ErrorCode::invalid_argument,
            "video duration and frame rate must be positive");
  }
  if (has_audio(modality)) {
    require(distortion.sample_rate > 0.0 && distortion.audio_seconds > 0.0, ErrorCode::invalid_argument,
            "audio duration and sample rate must be positive");
  }

  Rng db_rng(derive_seed(seed, 0xDB));
  const double width = mos_range.width();
  const double slope = width * db_rng.uniform(0.6, 0.8);
  const double offset = mos_range.lo + db_rng.uniform(0.1, 0.9) * (width - slope);
  const double mos_sigma = distortion.mos_noise * width;

  Database db;
  db.spec = DatabaseSpec{name, modality, mos_range, n_samples, detail::default_steps(n_samples, 8)};
  db.samples.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Rng rng(derive_seed(seed, 1000 + i));
    const double q = rng.uniform();
    const double severity = 1.0 - q;
    auto content = std::make_shared<MediaContent>();
    if (modality == Modality::image) {
      detail::Pattern pattern(rng);
      content->image = detail::render_frame(pattern, distortion, severity, 0.0, 0.0, rng);
    }
    if (has_motion(modality)) {
      detail::Pattern pattern(rng);
      const double vy = rng.uniform(-2.0, 2.0);
      const double vx = rng.uniform(-2.0, 2.0);
      const double jitter = detail::uses(distortion.families, "jitter") ? 4.0 * severity : 0.0;
      const auto n_frames = static_cast<std::size_t>(
          std::max<long long>(1, std::llround(distortion.video_seconds * distortion.frame_rate)));
      FrameSequence video;
      video.frame_rate = distortion.frame_rate;
      for (std::size_t f = 0; f < n_frames; ++f) {
        const double jy = jitter > 0.0 ? rng.uniform(-jitter, jitter) : 0.0;
        const double jx = jitter > 0.0 ? rng.uniform(-jitter, jitter) : 0.0;
        video.frames.push_back(detail::render_frame(pattern, distortion, severity,
                                                    vy * static_cast<double>(f) + jy,
                                                    vx * static_cast<double>(f) + jx, rng));
      }
      content->video = std::move(video);
    }
    if (has_audio(modality)) content->audio = detail::render_audio(distortion, severity, rng);

    double mos = slope * q + offset;
    if (mos_sigma > 0.0) mos += rng.normal(0.0, mos_sigma);
    mos = std::clamp(mos, mos_range.lo, mos_range.hi);

    char id[32];
    std::snprintf(id, sizeof(id), "_%05zu", i);
    MediaSample sample;
    sample.database = name;
    sample.sample_id = name + id;
    sample.modality = modality;
    sample.payload.content = std::move(content);
    sample.mos = mos;
    sample.latent_quality = q;
    db.samples.push_back(std::move(sample));
  }
  validate_database(db);
  return db;
}

inline Database generate_synthetic_database(const SyntheticSpec& spec) {
  return generate_synthetic_database(spec.name, spec.modality, spec.n_samples, spec.distortion, spec.seed,
                                     spec.mos_range);
}

/// Generates and registers in one step.
inline std::shared_ptr<const Database> generate_synthetic_database(DatabaseRegistry& registry,
                                                                   const SyntheticSpec& spec) {
  return registry.add(generate_synthetic_database(spec));
}

}  // namespace unqa
