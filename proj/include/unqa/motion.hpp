#pragma once

// Frozen motion feature extractor: two temporal-spatial 3D convolution
// stages (zero temporal padding, GELU) followed by global mean/std pooling.
// Weights are drawn once from a fixed seed and never updated.

#include <cmath>
#include <vector>

#include "unqa/autograd.hpp"
#include "unqa/config.hpp"
#include "unqa/media.hpp"
#include "unqa/nn.hpp"
#include "unqa/preprocess.hpp"

namespace unqa {

struct MotionFeature {
  std::vector<double> values;
  std::size_t chunk_index = 0;

  bool operator==(const MotionFeature&) const = default;
};

/// Componentwise mean over chunks.
inline MotionFeature aggregate_chunks(const std::vector<MotionFeature>& chunks) {
  require(!chunks.empty(), ErrorCode::invalid_argument, "aggregate_chunks: no chunk features");
  MotionFeature out;
  out.values.assign(chunks.front().values.size(), 0.0);
  for (const auto& c : chunks) {
    require(c.values.size() == out.values.size(), ErrorCode::shape_mismatch,
            "aggregate_chunks: chunk features differ in length");
    for (std::size_t i = 0; i < c.values.size(); ++i) out.values[i] += c.values[i];
  }
  for (double& v : out.values) v /= static_cast<double>(chunks.size());
  return out;
}

class MotionExtractor {
 public:
  MotionExtractor() = default;

  explicit MotionExtractor(const MotionConfig& config) : config_(config), params_(ParamGroup::motion) {
    config_.validate();
    Rng rng(config_.seed);
    const std::size_t kt = config_.temporal_kernel;
    const std::size_t k1 = config_.spatial_kernel1, k2 = config_.spatial_kernel2;
    const std::size_t c1 = config_.hidden_channels, c2 = config_.out_dim / 2;
    init_normal(params_.add("conv1.weight", {c1, kt, 3, k1, k1}), rng, std::sqrt(2.0 / static_cast<double>(kt * 3 * k1 * k1)));
    params_.add("conv1.bias", {c1});
    init_normal(params_.add("conv2.weight", {c2, kt, c1, k2, k2}), rng, std::sqrt(2.0 / static_cast<double>(kt * c1 * k2 * k2)));
    params_.add("conv2.bias", {c2});
  }

  const MotionConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  std::size_t out_dim() const { return config_.out_dim; }

  /// F_m of one preprocessed chunk (>= 2 equal-size frames).
  MotionFeature extract_motion_feature(const std::vector<Image>& chunk, std::size_t chunk_index = 0) const {
    require(chunk.size() >= 2, ErrorCode::invalid_argument,
            "motion chunk needs at least 2 frames, got " + std::to_string(chunk.size()));
    const auto& f0 = chunk.front();
    for (const auto& f : chunk) {
      require(f.channels == 3 && f.height == f0.height && f.width == f0.width, ErrorCode::shape_mismatch,
              "motion chunk frames must share one 3-channel size");
    }
    std::vector<std::vector<double>> frames;
    for (const auto& f : chunk) frames.emplace_back(f.data.begin(), f.data.end());
    std::size_t h = f0.height, w = f0.width;
    auto stage1 = conv3d(frames, 3, h, w, params_.at("conv1.weight"), params_.at("conv1.bias"), config_.spatial_kernel1);
    auto stage2 = conv3d(stage1, config_.hidden_channels, h, w, params_.at("conv2.weight"), params_.at("conv2.bias"),
                         config_.spatial_kernel2);
    const std::size_t channels = config_.out_dim / 2;
    const std::size_t plane = h * w;
    MotionFeature out;
    out.chunk_index = chunk_index;
    out.values.assign(config_.out_dim, 0.0);
    const double count = static_cast<double>(stage2.size() * plane);
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (const auto& f : stage2) {
        for (std::size_t p = 0; p < plane; ++p) acc += f[c * plane + p];
      }
      const double mu = acc / count;
      double var = 0.0;
      for (const auto& f : stage2) {
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = f[c * plane + p] - mu;
          var += d * d;
        }
      }
      out.values[c] = mu;
      out.values[channels + c] = std::sqrt(var / count + kStdEpsilonMotion);
    }
    return out;
  }

  /// Video-level F_m: preprocess each non-overlapping chunk, extract, and
  /// average over chunks.
  MotionFeature video_feature(const FrameSequence& video, const PreprocessConfig& preprocess,
                              const VideoConfig& timing) const {
    std::vector<MotionFeature> features;
    std::size_t index = 0;
    for (const auto& [begin, end] : chunk_ranges(video, timing)) {
      std::vector<Image> raw(video.frames.begin() + static_cast<std::ptrdiff_t>(begin),
                             video.frames.begin() + static_cast<std::ptrdiff_t>(end));
      features.push_back(extract_motion_feature(preprocess_motion_clip(raw, preprocess), index++));
    }
    return aggregate_chunks(features);
  }

  std::uint64_t checksum() const { return params_.checksum(); }

 private:
  static constexpr double kStdEpsilonMotion = 1e-8;

  static double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

  // Temporal kernel kt with zero temporal padding (kt-1)/2, spatial kernel
  // k with stride k. Updates h, w to the output size.
  std::vector<std::vector<double>> conv3d(const std::vector<std::vector<double>>& frames, std::size_t cin,
                                          std::size_t& h, std::size_t& w, const Parameter& weight,
                                          const Parameter& bias, std::size_t k) const {
    require(h >= k && w >= k, ErrorCode::shape_mismatch, "motion chunk frames too small for the extractor");
    const std::size_t kt = config_.temporal_kernel;
    const std::size_t pad = (kt - 1) / 2;
    const std::size_t cout = weight.shape[0];
    detail::ConvDims d{1, cin, h, w, cout, k, k, (h - k) / k + 1, (w - k) / k + 1, k, 0};
    const std::size_t plane = d.oh * d.ow;
    const std::size_t kdim = cin * k * k;
    std::vector<std::vector<double>> cols(frames.size(), std::vector<double>(kdim * plane));
    for (std::size_t t = 0; t < frames.size(); ++t) detail::im2col(frames[t].data(), d, cols[t].data());
    // Re-pack the weight per temporal tap: [kt][cout, kdim].
    std::vector<std::vector<double>> taps(kt, std::vector<double>(cout * kdim));
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t dt = 0; dt < kt; ++dt) {
        std::copy_n(weight.value.begin() + static_cast<std::ptrdiff_t>((co * kt + dt) * kdim), kdim,
                    taps[dt].begin() + static_cast<std::ptrdiff_t>(co * kdim));
      }
    }
    std::vector<std::vector<double>> out(frames.size(), std::vector<double>(cout * plane));
    for (std::size_t t = 0; t < frames.size(); ++t) {
      auto& o = out[t];
      for (std::size_t co = 0; co < cout; ++co) std::fill_n(o.begin() + static_cast<std::ptrdiff_t>(co * plane), plane, bias.value[co]);
      for (std::size_t dt = 0; dt < kt; ++dt) {
        const long src = static_cast<long>(t + dt) - static_cast<long>(pad);
        if (src < 0 || src >= static_cast<long>(frames.size())) continue;
        detail::gemm_nn(taps[dt].data(), cols[static_cast<std::size_t>(src)].data(), o.data(), cout, kdim, plane);
      }
      for (double& v : o) v = gelu_value(v);
    }
    h = d.oh;
    w = d.ow;
    return out;
  }

  MotionConfig config_;
  ParameterSet params_{ParamGroup::motion};
};

}  // namespace unqa
