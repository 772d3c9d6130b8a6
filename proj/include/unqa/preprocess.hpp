#pragma once

// Geometric preprocessing for the spatial and motion branches, plus the
// temporal sampling rules that turn a video into key frames and chunks.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "unqa/config.hpp"
#include "unqa/core.hpp"
#include "unqa/media.hpp"

namespace unqa {

struct Size2 {
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const Size2&) const = default;
};

/// Size after scaling the shortest side to `short_side`, keeping the aspect
/// ratio; the other side is rounded to the nearest integer.
inline Size2 rescaled_size(std::size_t height, std::size_t width, std::size_t short_side) {
  require(height >= 1 && width >= 1, ErrorCode::invalid_argument, "frame must be at least 1x1");
  if (height <= width) {
    const double scaled = static_cast<double>(width) * static_cast<double>(short_side) / static_cast<double>(height);
    return {short_side, static_cast<std::size_t>(std::llround(scaled))};
  }
  const double scaled = static_cast<double>(height) * static_cast<double>(short_side) / static_cast<double>(width);
  return {static_cast<std::size_t>(std::llround(scaled)), short_side};
}

struct CropWindow {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

inline CropWindow center_crop_window(Size2 size, std::size_t crop) {
  require(size.height >= crop && size.width >= crop, ErrorCode::invalid_argument,
          "crop " + std::to_string(crop) + " larger than rescaled frame " + std::to_string(size.height) + "x" +
              std::to_string(size.width));
  return {(size.height - crop) / 2, (size.width - crop) / 2, crop, crop};
}

namespace detail {

struct Tap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel-centre mapping with edge clamping.
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out, std::size_t first, std::size_t count) {
  std::vector<Tap> taps(count);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t k = 0; k < count; ++k) {
    double src = (static_cast<double>(first + k) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[k] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of `image` to out_h × out_w, producing only `window`
/// of the resized grid (the whole grid when the window is empty).
inline Image resize_bilinear(const Image& image, std::size_t out_h, std::size_t out_w, CropWindow window = {}) {
  require(image.height >= 1 && image.width >= 1, ErrorCode::invalid_argument, "frame must be at least 1x1");
  require(out_h >= 1 && out_w >= 1, ErrorCode::invalid_argument, "resize target must be at least 1x1");
  if (window.height == 0) window = {0, 0, out_h, out_w};
  const auto rows = detail::bilinear_taps(image.height, out_h, window.top, window.height);
  const auto cols = detail::bilinear_taps(image.width, out_w, window.left, window.width);
  Image out(image.channels, window.height, window.width);
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t y = 0; y < window.height; ++y) {
      const auto& r = rows[y];
      const float* top = image.data.data() + (c * image.height + r.i0) * image.width;
      const float* bottom = image.data.data() + (c * image.height + r.i1) * image.width;
      float* dst = out.data.data() + (c * window.height + y) * window.width;
      for (std::size_t x = 0; x < window.width; ++x) {
        const auto& t = cols[x];
        const double upper = top[t.i0] + (top[t.i1] - static_cast<double>(top[t.i0])) * t.frac;
        const double lower = bottom[t.i0] + (bottom[t.i1] - static_cast<double>(bottom[t.i0])) * t.frac;
        dst[x] = static_cast<float>(upper + (lower - upper) * r.frac);
      }
    }
  }
  return out;
}

/// Shortest side to `short_side`, then centre crop `crop`×`crop`.
/// Equivalent to resizing the full frame and cropping, but only the crop
/// window is interpolated.
inline Image preprocess_image(const Image& frame, const PreprocessConfig& config = {}) {
  require(frame.height >= 1 && frame.width >= 1, ErrorCode::invalid_argument, "frame must be at least 1x1");
  const Size2 size = rescaled_size(frame.height, frame.width, config.short_side);
  const CropWindow window = center_crop_window(size, config.crop);
  return resize_bilinear(frame, size.height, size.width, window);
}

/// Every frame to motion_size × motion_size without cropping.
inline std::vector<Image> preprocess_motion_clip(const std::vector<Image>& frames, const PreprocessConfig& config = {}) {
  require(!frames.empty(), ErrorCode::invalid_argument, "motion clip must contain at least one frame");
  std::vector<Image> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    if (f.height == config.motion_size && f.width == config.motion_size) {
      out.push_back(f);
    } else {
      out.push_back(resize_bilinear(f, config.motion_size, config.motion_size));
    }
  }
  return out;
}

/// Frame indices fed to the spatial branch: one every 1/keyframe_rate seconds.
inline std::vector<std::size_t> keyframe_indices(const FrameSequence& video, const VideoConfig& config) {
  require(!video.frames.empty() && video.frame_rate > 0.0, ErrorCode::invalid_argument,
          "video needs at least one frame and a positive frame rate");
  require(config.keyframe_rate > 0.0, ErrorCode::invalid_argument, "keyframe_rate must be positive");
  std::vector<std::size_t> indices;
  for (std::size_t k = 0;; ++k) {
    const auto idx = static_cast<std::size_t>(
        std::floor(static_cast<double>(k) * video.frame_rate / config.keyframe_rate + 1e-9));
    if (idx >= video.frames.size()) break;
    if (indices.empty() || indices.back() != idx) indices.push_back(idx);
  }
  return indices;
}

/// Non-overlapping chunks of chunk_seconds; a trailing chunk shorter than two
/// frames is dropped unless it is the only one.
inline std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(const FrameSequence& video,
                                                                     const VideoConfig& config) {
  require(!video.frames.empty() && video.frame_rate > 0.0, ErrorCode::invalid_argument,
          "video needs at least one frame and a positive frame rate");
  const auto per_chunk = static_cast<std::size_t>(
      std::max<long long>(1, std::llround(config.chunk_seconds * video.frame_rate)));
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t begin = 0; begin < video.frames.size(); begin += per_chunk) {
    const std::size_t end = std::min(begin + per_chunk, video.frames.size());
    if (end - begin < 2 && !ranges.empty()) break;
    ranges.emplace_back(begin, end);
  }
  return ranges;
}

}  // namespace unqa
