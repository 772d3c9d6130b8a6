#pragma once

// Spatial feature extraction: multi-stage backbone maps, adaptive pooling to
// the final stage resolution, channel concatenation, a single MHSA fusion
// block with 1x1-conv bottleneck and residual, and mean/std statistics.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unqa/autograd.hpp"
#include "unqa/config.hpp"
#include "unqa/media.hpp"
#include "unqa/nn.hpp"

namespace unqa {

struct StageMap {
  std::size_t stage_index = 0;  // 1-based
  Var values;                   // [B*T, C_i, H_i, W_i]
};

/// Per-item spatial feature: [mu, sigma], each of the fused channel width.
struct SpatialFeature {
  Var values;

  std::size_t size() const { return values.size(); }
  std::span<const double> mu() const { return values.value().subspan(0, values.size() / 2); }
  std::span<const double> sigma() const { return values.value().subspan(values.size() / 2); }
};

inline constexpr double kStdEpsilon = 1e-8;

/// Per-channel spatial mean and population standard deviation
/// sqrt(var + eps) of [N, C, H, W]; each result is [N, C].
inline std::pair<Var, Var> global_mean_std_pool(const Var& fused) {
  require(fused.rank() == 4, ErrorCode::shape_mismatch, "global_mean_std_pool: expected [N,C,H,W]");
  for (double v : fused.value()) {
    require(std::isfinite(v), ErrorCode::invalid_argument, "global_mean_std_pool: non-finite input");
  }
  const std::size_t n = fused.dim(0), c = fused.dim(1), hw = fused.dim(2) * fused.dim(3);
  const Var flat = reshape(fused, {n, c, hw});
  const Var mu = mean_last(flat);
  const Var centered = sub_last(flat, mu);
  const Var var = mean_last(square(centered));
  const Var sigma = sqrt(add_scalar(var, kStdEpsilon));
  return {reshape(mu, {n, c}), reshape(sigma, {n, c})};
}

/// Adaptive average pooling of one stage map to the final stage resolution.
inline Var pool_to_final_resolution(const Var& stage_map, std::size_t height, std::size_t width) {
  require(stage_map.rank() == 4, ErrorCode::shape_mismatch, "pool_to_final_resolution: expected [N,C,H,W]");
  require(stage_map.dim(2) >= height && stage_map.dim(3) >= width, ErrorCode::shape_mismatch,
          "pool_to_final_resolution: target " + std::to_string(height) + "x" + std::to_string(width) +
              " larger than map " + shape_string(stage_map.shape()));
  if (stage_map.dim(2) == height && stage_map.dim(3) == width) return stage_map;
  return adaptive_avg_pool2d(stage_map, height, width);
}

/// Multi-head self-attention over token rows x[L, d]. `prefix` names the
/// q/k/v/output projections in `params`.
inline Var multi_head_attention(GradContext& ctx, ParameterSet& params, const std::string& prefix, const Var& x,
                                std::size_t heads) {
  const std::size_t d = x.dim(1);
  const std::size_t dh = d / heads;
  const Var q = linear(x, ctx.bind(params, prefix + ".q.weight"), ctx.bind(params, prefix + ".q.bias"));
  const Var k = linear(x, ctx.bind(params, prefix + ".k.weight"), ctx.bind(params, prefix + ".k.bias"));
  const Var v = linear(x, ctx.bind(params, prefix + ".v.weight"), ctx.bind(params, prefix + ".v.bias"));
  std::vector<Var> outputs;
  outputs.reserve(heads);
  const double temperature = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    const Var kh = heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
    const Var vh = heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
    const Var attn = softmax_rows(scale(matmul(qh, transpose(kh)), temperature));
    outputs.push_back(matmul(attn, vh));
  }
  const Var merged = heads == 1 ? outputs.front() : concat(outputs, 1);
  return linear(merged, ctx.bind(params, prefix + ".o.weight"), ctx.bind(params, prefix + ".o.bias"));
}

inline void declare_attention(ParameterSet& params, const std::string& prefix, std::size_t d, Rng& rng) {
  for (const char* name : {".q", ".k", ".v", ".o"}) {
    init_fan_in(params.add(prefix + name + ".weight", {d, d}), rng, d);
    params.add(prefix + name + ".bias", {d});
  }
}

class SpatialBranch {
 public:
  SpatialBranch() = default;

  SpatialBranch(const BackboneConfig& config, Rng& rng) : config_(config), params_(ParamGroup::spatial) {
    config_.validate();
    std::size_t in_channels = 3;
    for (std::size_t i = 0; i < config_.n_stages(); ++i) {
      const std::size_t k = config_.kernel(i);
      const std::size_t fan_in = in_channels * k * k;
      init_normal(params_.add(stage_name(i) + ".weight", {config_.channels[i], in_channels, k, k}), rng,
                  std::sqrt(2.0 / static_cast<double>(fan_in)));
      params_.add(stage_name(i) + ".bias", {config_.channels[i]});
      in_channels = config_.channels[i];
    }
    const std::size_t c = config_.fused_channels();
    const std::size_t d = config_.embed_width;
    init_fan_in(params_.add("fuse.in.weight", {d, c}), rng, c);
    params_.add("fuse.in.bias", {d});
    declare_attention(params_, "fuse.attn", d, rng);
    Parameter& out_w = params_.add("fuse.out.weight", {c, d});
    if (!config_.zero_init_fusion_output) init_fan_in(out_w, rng, d);
    params_.add("fuse.out.bias", {c});
  }

  const BackboneConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Spatial extents of every stage for an H×W input.
  std::vector<std::pair<std::size_t, std::size_t>> stage_sizes(std::size_t height, std::size_t width) const {
    std::vector<std::pair<std::size_t, std::size_t>> sizes;
    for (std::size_t i = 0; i < config_.n_stages(); ++i) {
      const std::size_t k = config_.kernel(i), s = config_.strides[i];
      require(height >= k && width >= k, ErrorCode::shape_mismatch,
              "input " + std::to_string(height) + "x" + std::to_string(width) + " too small for stage " +
                  std::to_string(i + 1) + " (kernel " + std::to_string(k) + ")");
      height = (height - k) / s + 1;
      width = (width - k) / s + 1;
      sizes.emplace_back(height, width);
    }
    return sizes;
  }

  /// frames: [B*T, 3, H, W] (or [B, T, 3, H, W], flattened here).
  std::vector<StageMap> extract_stage_maps(GradContext& ctx, Var frames) {
    if (frames.rank() == 5) {
      const auto& s = frames.shape();
      frames = reshape(frames, {s[0] * s[1], s[2], s[3], s[4]});
    }
    require(frames.rank() == 4 && frames.dim(1) == 3, ErrorCode::shape_mismatch,
            "extract_stage_maps: expected [B*T,3,H,W], got " + shape_string(frames.shape()));
    (void)stage_sizes(frames.dim(2), frames.dim(3));
    std::vector<StageMap> maps;
    Var x = frames;
    for (std::size_t i = 0; i < config_.n_stages(); ++i) {
      x = gelu(conv2d(x, ctx.bind(params_, stage_name(i) + ".weight"), ctx.bind(params_, stage_name(i) + ".bias"),
                      {config_.strides[i], 0}));
      maps.push_back({i + 1, x});
    }
    return maps;
  }

  /// concat -> 1x1 conv -> MHSA over the H*W tokens -> 1x1 conv -> residual.
  Var fuse_with_mhsa(GradContext& ctx, const std::vector<Var>& pooled) {
    require(!pooled.empty(), ErrorCode::invalid_argument, "fuse_with_mhsa: no maps");
    const std::size_t n = pooled.front().dim(0), h = pooled.front().dim(2), w = pooled.front().dim(3);
    for (const auto& m : pooled) {
      require(m.rank() == 4 && m.dim(0) == n && m.dim(2) == h && m.dim(3) == w, ErrorCode::shape_mismatch,
              "fuse_with_mhsa: mismatched map sizes " + shape_string(m.shape()) + " vs " +
                  shape_string(pooled.front().shape()));
    }
    const Var stacked = pooled.size() == 1 ? pooled.front() : concat(pooled, 1);
    const std::size_t c = stacked.dim(1);
    require(c == config_.fused_channels(), ErrorCode::shape_mismatch,
            "fuse_with_mhsa: " + std::to_string(c) + " channels, configured " + std::to_string(config_.fused_channels()));
    const Var w_in = ctx.bind(params_, "fuse.in.weight");
    const Var b_in = ctx.bind(params_, "fuse.in.bias");
    const Var w_out = ctx.bind(params_, "fuse.out.weight");
    const Var b_out = ctx.bind(params_, "fuse.out.bias");
    std::vector<Var> frames;
    frames.reserve(n);
    for (std::size_t f = 0; f < n; ++f) {
      const Var one = n == 1 ? stacked : slice(stacked, 0, f, f + 1);
      const Var tokens = transpose(reshape(one, {c, h * w}));  // [L, C]
      const Var embedded = linear(tokens, w_in, b_in);
      const Var attended = multi_head_attention(ctx, params_, "fuse.attn", embedded, config_.heads);
      const Var fused = add(tokens, linear(attended, w_out, b_out));
      frames.push_back(reshape(transpose(fused), {1, c, h, w}));
    }
    return n == 1 ? frames.front() : concat(frames, 0);
  }

  /// F_s for every frame: [B*T, 2*sum(C_i)].
  Var frame_features(GradContext& ctx, const Var& frames) {
    const auto maps = extract_stage_maps(ctx, frames);
    const Var& last = maps.back().values;
    const std::size_t h = last.dim(2), w = last.dim(3);
    std::vector<Var> pooled;
    for (std::size_t t : config_.taps()) pooled.push_back(pool_to_final_resolution(maps[t - 1].values, h, w));
    const auto [mu, sigma] = global_mean_std_pool(fuse_with_mhsa(ctx, pooled));
    return concat({mu, sigma}, 1);
  }

  /// Spatial feature of one media item from its T frames, averaged over T.
  SpatialFeature spatial_feature(GradContext& ctx, const Var& frames) {
    const Var per_frame = frame_features(ctx, frames);
    return {per_frame.dim(0) == 1 ? reshape(per_frame, {per_frame.dim(1)}) : mean_axis0(per_frame)};
  }

  /// [B, T, 3, H, W] -> [B, 2*sum(C_i)], averaging over T.
  Var batch_spatial_features(GradContext& ctx, const Var& batch) {
    require(batch.rank() == 5, ErrorCode::shape_mismatch, "batch_spatial_features: expected [B,T,C,H,W]");
    const std::size_t b = batch.dim(0), t = batch.dim(1);
    const Var per_frame = frame_features(ctx, batch);
    const std::size_t d = per_frame.dim(1);
    const Var grouped = reshape(per_frame, {b, t, d});
    std::vector<Var> items;
    for (std::size_t i = 0; i < b; ++i) {
      items.push_back(reshape(mean_axis0(reshape(slice(grouped, 0, i, i + 1), {t, d})), {1, d}));
    }
    return b == 1 ? items.front() : concat(items, 0);
  }

 private:
  static std::string stage_name(std::size_t i) { return "stage" + std::to_string(i + 1); }

  BackboneConfig config_;
  ParameterSet params_{ParamGroup::spatial};
};

/// Stacks preprocessed frames into a constant [T, 3, H, W] input.
inline Var frames_to_var(std::span<const Image> frames) {
  require(!frames.empty(), ErrorCode::invalid_argument, "no frames");
  const auto& f0 = frames.front();
  std::vector<double> data;
  data.reserve(frames.size() * f0.data.size());
  for (const auto& f : frames) {
    require(f.channels == f0.channels && f.height == f0.height && f.width == f0.width, ErrorCode::shape_mismatch,
            "frames differ in size");
    data.insert(data.end(), f.data.begin(), f.data.end());
  }
  return constant({frames.size(), f0.channels, f0.height, f0.width}, std::move(data));
}

}  // namespace unqa
