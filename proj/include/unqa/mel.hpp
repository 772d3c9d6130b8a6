#pragma once

// Log-power mel spectrogram and its segmentation into overlapping windows.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <vector>

#include "unqa/config.hpp"
#include "unqa/core.hpp"

namespace unqa {

struct MelSpectrogram {
  std::size_t n_frames = 0;
  std::size_t n_bands = 0;
  std::vector<double> values;  // frames × bands, log10 power
  double frame_hop = 0.0;      // seconds
  std::size_t segment_width = 0;
  std::vector<std::size_t> segment_starts;

  double at(std::size_t frame, std::size_t band) const { return values[frame * n_bands + band]; }

  /// Segment `i` as a contiguous width × bands block.
  std::vector<double> segment(std::size_t i) const {
    const std::size_t start = segment_starts.at(i);
    return {values.begin() + static_cast<std::ptrdiff_t>(start * n_bands),
            values.begin() + static_cast<std::ptrdiff_t>((start + segment_width) * n_bands)};
  }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelGeometry {
  std::size_t window = 0;
  std::size_t hop = 0;
  std::size_t fft_size = 0;
};

inline MelGeometry mel_geometry(const MelConfig& config, double sample_rate) {
  require(sample_rate > 0.0, ErrorCode::invalid_argument, "sample rate must be positive");
  MelGeometry g;
  g.window = static_cast<std::size_t>(std::llround(config.window_seconds * sample_rate));
  g.hop = static_cast<std::size_t>(std::llround(config.hop_seconds * sample_rate));
  require(g.window >= 2 && g.hop >= 1, ErrorCode::invalid_argument, "mel window/hop too short");
  g.fft_size = std::bit_ceil(g.window);
  return g;
}

/// Band centre frequencies (Hz) of the triangular filters.
inline std::vector<double> mel_band_centers(const MelConfig& config, double sample_rate) {
  const double fmax = config.fmax > 0.0 ? config.fmax : sample_rate / 2.0;
  const double lo = hz_to_mel(config.fmin);
  const double hi = hz_to_mel(fmax);
  std::vector<double> centers(config.n_bands);
  for (std::size_t k = 0; k < config.n_bands; ++k) {
    centers[k] = mel_to_hz(lo + (hi - lo) * static_cast<double>(k + 1) / static_cast<double>(config.n_bands + 1));
  }
  return centers;
}

/// Triangular HTK-mel filterbank over the FFT bins: bands × (fft_size/2+1).
inline std::vector<double> mel_filterbank(const MelConfig& config, double sample_rate, std::size_t fft_size) {
  const double fmax = config.fmax > 0.0 ? config.fmax : sample_rate / 2.0;
  require(config.n_bands >= 1 && fmax > config.fmin, ErrorCode::invalid_argument, "bad mel band settings");
  const std::size_t bins = fft_size / 2 + 1;
  const double lo = hz_to_mel(config.fmin);
  const double hi = hz_to_mel(fmax);
  std::vector<double> edges(config.n_bands + 2);
  for (std::size_t k = 0; k < edges.size(); ++k) {
    edges[k] = mel_to_hz(lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(config.n_bands + 1));
  }
  std::vector<double> bank(config.n_bands * bins, 0.0);
  for (std::size_t b = 0; b < config.n_bands; ++b) {
    const double left = edges[b], center = edges[b + 1], right = edges[b + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(fft_size);
      double w = 0.0;
      if (f > left && f <= center) w = (f - left) / (center - left);
      else if (f > center && f < right) w = (right - f) / (right - center);
      bank[b * bins + k] = w;
    }
  }
  return bank;
}

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

inline std::size_t mel_frame_count(std::size_t n_samples, std::size_t window, std::size_t hop) {
  return n_samples < window ? 0 : (n_samples - window) / hop + 1;
}

inline std::vector<std::size_t> segment_starts(std::size_t n_frames, std::size_t width, double overlap) {
  require(width >= 1 && overlap >= 0.0 && overlap < 1.0, ErrorCode::invalid_argument, "bad segment settings");
  const auto hop = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(static_cast<double>(width) * (1.0 - overlap))));
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + width <= n_frames; s += hop) starts.push_back(s);
  return starts;
}

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline MelSpectrogram compute_mel_spectrogram(const std::vector<double>& waveform, double sample_rate,
                                              const MelConfig& config = {}) {
  require(sample_rate > 0.0, ErrorCode::invalid_argument, "sample rate must be positive");
  const MelGeometry g = mel_geometry(config, sample_rate);
  require(waveform.size() >= g.window, ErrorCode::invalid_argument,
          "waveform of " + std::to_string(waveform.size()) + " samples is shorter than one analysis window (" +
              std::to_string(g.window) + ")");
  const std::size_t bins = g.fft_size / 2 + 1;
  const auto window = hann_window(g.window);
  const auto bank = mel_filterbank(config, sample_rate, g.fft_size);

  MelSpectrogram mel;
  mel.n_frames = mel_frame_count(waveform.size(), g.window, g.hop);
  mel.n_bands = config.n_bands;
  mel.frame_hop = static_cast<double>(g.hop) / sample_rate;
  mel.values.assign(mel.n_frames * mel.n_bands, 0.0);

  double* in = fftw_alloc_real(g.fft_size);
  fftw_complex* out = fftw_alloc_complex(bins);
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(g.fft_size), in, out, FFTW_ESTIMATE);
  }
  std::vector<double> power(bins);
  const double floor_log = std::log10(config.log_floor);
  for (std::size_t f = 0; f < mel.n_frames; ++f) {
    std::fill_n(in, g.fft_size, 0.0);
    for (std::size_t i = 0; i < g.window; ++i) in[i] = waveform[f * g.hop + i] * window[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) power[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    for (std::size_t b = 0; b < mel.n_bands; ++b) {
      double energy = 0.0;
      const double* row = bank.data() + b * bins;
      for (std::size_t k = 0; k < bins; ++k) energy += row[k] * power[k];
      mel.values[f * mel.n_bands + b] =
          energy > config.log_floor ? std::log10(energy) : floor_log;
    }
  }
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);

  mel.segment_width = config.segment_width;
  mel.segment_starts = segment_starts(mel.n_frames, config.segment_width, config.segment_overlap);
  return mel;
}

}  // namespace unqa
