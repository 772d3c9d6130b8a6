#pragma once

// Audio branch: framewise CNN over mel segments, one self-attention block
// over the segment sequence, and attention pooling to F_a.

#include <string>
#include <vector>

#include "unqa/autograd.hpp"
#include "unqa/config.hpp"
#include "unqa/mel.hpp"
#include "unqa/nn.hpp"
#include "unqa/spatial.hpp"

namespace unqa {

struct AudioFeature {
  Var values;  // [D_a]

  std::size_t size() const { return values.size(); }
};

/// F_a plus the pooling weights that produced it.
struct PooledAudio {
  Var feature;  // [D_a]
  Var weights;  // [S]
};

/// Mel segments stacked as a constant [S, 1, width, bands] tensor.
inline Var mel_segments_to_var(const MelSpectrogram& mel) {
  require(!mel.segment_starts.empty(), ErrorCode::invalid_argument,
          "mel spectrogram of " + std::to_string(mel.n_frames) + " frames admits no segment of width " +
              std::to_string(mel.segment_width));
  std::vector<double> data;
  data.reserve(mel.segment_starts.size() * mel.segment_width * mel.n_bands);
  for (std::size_t i = 0; i < mel.segment_starts.size(); ++i) {
    const auto seg = mel.segment(i);
    data.insert(data.end(), seg.begin(), seg.end());
  }
  return constant({mel.segment_starts.size(), 1, mel.segment_width, mel.n_bands}, std::move(data));
}

class AudioBranch {
 public:
  AudioBranch() = default;

  AudioBranch(const AudioConfig& config, const MelConfig& mel, Rng& rng)
      : config_(config), mel_(mel), params_(ParamGroup::audio) {
    config_.validate();
    const std::size_t c1 = config_.conv_channels[0], c2 = config_.conv_channels[1];
    require(mel_.segment_width >= 4 && mel_.n_bands >= 4, ErrorCode::invalid_argument,
            "audio: segments must be at least 4x4 for two pooling stages");
    init_normal(params_.add("conv1.weight", {c1, 1, 3, 3}), rng, std::sqrt(2.0 / 9.0));
    params_.add("conv1.bias", {c1});
    init_normal(params_.add("conv2.weight", {c2, c1, 3, 3}), rng, std::sqrt(2.0 / static_cast<double>(9 * c1)));
    params_.add("conv2.bias", {c2});
    const std::size_t flat = flattened_width();
    const std::size_t d = config_.embed_dim;
    init_fan_in(params_.add("project.weight", {d, flat}), rng, flat);
    params_.add("project.bias", {d});
    init_normal(params_.add("position", {config_.max_segments, d}), rng, 0.02);
    declare_attention(params_, "attn", d, rng);
    if (config_.zero_init_attention_output) {
      std::fill(params_.at("attn.o.weight").value.begin(), params_.at("attn.o.weight").value.end(), 0.0);
    }
    init_fan_in(params_.add("pool.weight", {1, d}), rng, d);
    params_.add("pool.bias", {1});
  }

  const AudioConfig& config() const { return config_; }
  const MelConfig& mel_config() const { return mel_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Width of one segment after two conv+pool stages, flattened.
  std::size_t flattened_width() const {
    const std::size_t h = (mel_.segment_width / 2) / 2;
    const std::size_t w = (mel_.n_bands / 2) / 2;
    return config_.conv_channels[1] * h * w;
  }

  /// segments [S, 1, width, bands] -> [S, D_a].
  Var framewise_embed(GradContext& ctx, const Var& segments) {
    require(segments.rank() == 4 && segments.dim(0) >= 1, ErrorCode::invalid_argument,
            "framewise_embed: expected a non-empty [S,1,width,bands] segment stack");
    require(segments.dim(1) == 1 && segments.dim(2) == mel_.segment_width && segments.dim(3) == mel_.n_bands,
            ErrorCode::shape_mismatch,
            "framewise_embed: segment shape " + shape_string(segments.shape()) + " does not match the mel config");
    const std::size_t s = segments.dim(0);
    Var x = scale(add_scalar(segments, config_.input_shift), 1.0 / config_.input_scale);
    x = avg_pool2d(gelu(conv2d(x, ctx.bind(params_, "conv1.weight"), ctx.bind(params_, "conv1.bias"), {1, 1})), 2);
    x = avg_pool2d(gelu(conv2d(x, ctx.bind(params_, "conv2.weight"), ctx.bind(params_, "conv2.bias"), {1, 1})), 2);
    x = reshape(x, {s, flattened_width()});
    return linear(x, ctx.bind(params_, "project.weight"), ctx.bind(params_, "project.bias"));
  }

  /// e + MHSA(e + P[0:S]); a zero output projection makes this the identity.
  Var time_dependency(GradContext& ctx, const Var& embeddings) {
    require(embeddings.rank() == 2 && embeddings.dim(1) == config_.embed_dim, ErrorCode::shape_mismatch,
            "time_dependency: expected [S," + std::to_string(config_.embed_dim) + "], got " +
                shape_string(embeddings.shape()));
    const std::size_t s = embeddings.dim(0);
    require(s >= 1 && s <= config_.max_segments, ErrorCode::out_of_range,
            "time_dependency: " + std::to_string(s) + " segments, positional table holds " +
                std::to_string(config_.max_segments));
    const Var position = slice(ctx.bind(params_, "position"), 0, 0, s);
    const Var attended = multi_head_attention(ctx, params_, "attn", add(embeddings, position), config_.heads);
    return add(embeddings, attended);
  }

  /// Softmax-weighted mean of the rows.
  PooledAudio attention_pool(GradContext& ctx, const Var& embeddings) {
    require(embeddings.rank() == 2 && embeddings.dim(0) >= 1, ErrorCode::shape_mismatch,
            "attention_pool: expected [S,D]");
    const std::size_t s = embeddings.dim(0);
    const Var scores = linear(embeddings, ctx.bind(params_, "pool.weight"), ctx.bind(params_, "pool.bias"));
    const Var weights = softmax_rows(reshape(scores, {1, s}));
    const Var pooled = matmul(weights, embeddings);
    return {reshape(pooled, {embeddings.dim(1)}), reshape(weights, {s})};
  }

  AudioFeature audio_feature(GradContext& ctx, const MelSpectrogram& mel) {
    const Var segments = mel_segments_to_var(mel);
    return {attention_pool(ctx, time_dependency(ctx, framewise_embed(ctx, segments))).feature};
  }

  AudioFeature audio_feature(GradContext& ctx, const std::vector<double>& waveform, double sample_rate) {
    return audio_feature(ctx, compute_mel_spectrogram(waveform, sample_rate, mel_));
  }

 private:
  AudioConfig config_;
  MelConfig mel_;
  ParameterSet params_{ParamGroup::audio};
};

}  // namespace unqa
