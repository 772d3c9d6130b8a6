#pragma once

// Declarative run configuration. Every knob has a default; a JSON run
// config only needs to name what it changes.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unqa/core.hpp"
#include "unqa/media.hpp"

namespace unqa {

using json = nlohmann::json;

NLOHMANN_JSON_SERIALIZE_ENUM(Modality, {{Modality::audio, "audio"},
                                        {Modality::image, "image"},
                                        {Modality::video, "video"},
                                        {Modality::av, "av"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MosRange, lo, hi)

struct PreprocessConfig {
  std::size_t short_side = 520;
  std::size_t crop = 384;
  std::size_t motion_size = 224;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PreprocessConfig, short_side, crop, motion_size)

struct MelConfig {
  double sample_rate = 16000.0;
  double window_seconds = 0.020;
  double hop_seconds = 0.010;
  std::size_t n_bands = 48;
  double log_floor = 1e-10;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 selects the Nyquist frequency
  std::size_t segment_width = 15;
  double segment_overlap = 0.5;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MelConfig, sample_rate, window_seconds, hop_seconds,
                                                n_bands, log_floor, fmin, fmax, segment_width,
                                                segment_overlap)

struct VideoConfig {
  double keyframe_rate = 1.0;  // spatial-branch frames per second of video
  double chunk_seconds = 1.0;  // motion-branch chunk length, non-overlapping
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VideoConfig, keyframe_rate, chunk_seconds)

struct BackboneConfig {
  std::vector<std::size_t> channels{8, 16, 32, 64};
  std::vector<std::size_t> strides{4, 2, 2, 2};
  std::vector<std::size_t> kernels{};         // empty: kernel equals stride
  std::vector<std::size_t> tapped_stages{};   // 1-based; empty: all stages
  std::size_t heads = 4;
  std::size_t embed_width = 32;
  bool zero_init_fusion_output = false;

  std::size_t n_stages() const { return channels.size(); }
  std::size_t kernel(std::size_t i) const { return kernels.empty() ? strides.at(i) : kernels.at(i); }

  std::vector<std::size_t> taps() const {
    if (!tapped_stages.empty()) return tapped_stages;
    std::vector<std::size_t> all;
    for (std::size_t i = 1; i <= channels.size(); ++i) all.push_back(i);
    return all;
  }

  /// Channel width of the fused map, i.e. the length of each statistic.
  std::size_t fused_channels() const {
    std::size_t total = 0;
    for (std::size_t i : taps()) total += channels.at(i - 1);
    return total;
  }

  std::size_t feature_width() const { return 2 * fused_channels(); }

  void validate() const {
    require(channels.size() >= 2, ErrorCode::invalid_argument, "backbone needs at least 2 stages");
    require(strides.size() == channels.size(), ErrorCode::invalid_argument,
            "backbone: one stride per stage required");
    require(kernels.empty() || kernels.size() == channels.size(), ErrorCode::invalid_argument,
            "backbone: one kernel size per stage required");
    for (std::size_t i = 0; i < channels.size(); ++i) {
      require(channels[i] >= 1 && strides[i] >= 1 && kernel(i) >= 1, ErrorCode::invalid_argument,
              "backbone: channel counts, strides and kernels must be positive");
    }
    for (std::size_t t : taps()) {
      require(t >= 1 && t <= channels.size(), ErrorCode::invalid_argument, "backbone: tapped stage out of range");
    }
    require(heads >= 1 && embed_width >= 1 && embed_width % heads == 0, ErrorCode::invalid_argument,
            "backbone: head count must divide the attention embedding width");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackboneConfig, channels, strides, kernels,
                                                tapped_stages, heads, embed_width,
                                                zero_init_fusion_output)

struct MotionConfig {
  std::size_t out_dim = 256;
  std::size_t hidden_channels = 16;
  std::size_t spatial_kernel1 = 8;
  std::size_t spatial_kernel2 = 4;
  std::size_t temporal_kernel = 3;
  std::uint64_t seed = 7177;

  void validate() const {
    require(out_dim >= 2 && out_dim % 2 == 0, ErrorCode::invalid_argument,
            "motion: out_dim must be even (mean and std halves)");
    require(hidden_channels >= 1 && spatial_kernel1 >= 1 && spatial_kernel2 >= 1 && temporal_kernel % 2 == 1,
            ErrorCode::invalid_argument, "motion: kernels must be positive, temporal kernel odd");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MotionConfig, out_dim, hidden_channels, spatial_kernel1,
                                                spatial_kernel2, temporal_kernel, seed)

struct AudioConfig {
  std::size_t embed_dim = 64;
  std::vector<std::size_t> conv_channels{8, 16};
  std::size_t heads = 4;
  std::size_t max_segments = 512;
  double input_shift = 5.0;  // log10-mel values are mapped by (x + shift) / scale
  double input_scale = 5.0;
  bool zero_init_attention_output = false;

  void validate() const {
    require(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0, ErrorCode::invalid_argument,
            "audio: head count must divide embed_dim");
    require(conv_channels.size() == 2, ErrorCode::invalid_argument, "audio: two conv stages expected");
    require(max_segments >= 1 && input_scale > 0.0, ErrorCode::invalid_argument, "audio: bad settings");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AudioConfig, embed_dim, conv_channels, heads, max_segments,
                                                input_shift, input_scale, zero_init_attention_output)

struct HeadConfig {
  double hidden_ratio = 0.5;
  // Step-1 heads start with their output bias at the centre of the
  // database's declared MOS range.
  bool center_output_bias = true;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HeadConfig, hidden_ratio, center_output_bias)

struct ModelConfig {
  PreprocessConfig preprocess;
  MelConfig mel;
  VideoConfig video;
  BackboneConfig backbone;
  MotionConfig motion;
  AudioConfig audio;
  HeadConfig head;
  std::uint64_t init_seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, preprocess, mel, video, backbone, motion, audio,
                                                head, init_seed)

enum class Strategy { unqa, wts, lrs };
NLOHMANN_JSON_SERIALIZE_ENUM(Strategy, {{Strategy::unqa, "unqa"}, {Strategy::wts, "wts"}, {Strategy::lrs, "lrs"}})

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::unqa: return "unqa";
    case Strategy::wts: return "wts";
    case Strategy::lrs: return "lrs";
  }
  return "unknown";
}

struct PhaseSettings {
  std::size_t epochs = 10;
  double learning_rate = 1e-5;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhaseSettings, epochs, learning_rate)

struct TrainingConfig {
  Strategy strategy = Strategy::unqa;
  std::size_t batch_size = 8;
  std::size_t audio_repeat_factor = 4;
  bool audio_repeat_auto = false;
  bool use_declared_steps = false;
  double soft_rank_temperature = 0.1;
  PhaseSettings step1{20, 1e-5};
  PhaseSettings step2{10, 1e-5};
  PhaseSettings step3{10, 1e-5};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainingConfig, strategy, batch_size, audio_repeat_factor,
                                                audio_repeat_auto, use_declared_steps,
                                                soft_rank_temperature, step1, step2, step3)

struct EvalConfig {
  std::size_t repeats = 10;
  bool fit_logistic = false;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, repeats, fit_logistic)

/// Synthetic distortion settings. Severity of every family is a strictly
/// decreasing function of the latent quality.
struct DistortionConfig {
  std::vector<std::string> families;
  double mos_noise = 0.02;  // Gaussian sigma as a fraction of the MOS range width
  std::size_t height = 72;
  std::size_t width = 96;
  double video_seconds = 2.0;
  double frame_rate = 4.0;
  double audio_seconds = 1.0;
  double sample_rate = 16000.0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DistortionConfig, families, mos_noise, height, width,
                                                video_seconds, frame_rate, audio_seconds, sample_rate)

struct SyntheticSpec {
  std::string name;
  Modality modality = Modality::image;
  std::size_t n_samples = 100;
  DistortionConfig distortion;
  MosRange mos_range{1.0, 5.0};
  std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticSpec, name, modality, n_samples, distortion,
                                                mos_range, seed)

/// Either a manifest path or an inline synthetic generator.
struct DatabaseSource {
  std::string manifest;
  std::optional<SyntheticSpec> synthetic;
};

inline void to_json(json& j, const DatabaseSource& s) {
  j = json::object();
  if (!s.manifest.empty()) j["manifest"] = s.manifest;
  if (s.synthetic) j["synthetic"] = *s.synthetic;
}

inline void from_json(const json& j, DatabaseSource& s) {
  if (j.is_string()) {
    s.manifest = j.get<std::string>();
    return;
  }
  if (j.contains("manifest")) s.manifest = j.at("manifest").get<std::string>();
  if (j.contains("synthetic")) s.synthetic = j.at("synthetic").get<SyntheticSpec>();
  require(!s.manifest.empty() || s.synthetic, ErrorCode::parse_error,
          "database entry needs 'manifest' or 'synthetic'");
}

struct RunConfig {
  std::string run_dir = "run";
  std::string data_dir = "data";
  std::uint64_t seed = 1;
  std::vector<DatabaseSource> databases;
  std::vector<DatabaseSource> held_out;
  ModelConfig model;
  TrainingConfig training;
  EvalConfig evaluation;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, run_dir, data_dir, seed, databases, held_out, model,
                                                training, evaluation)

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::missing_file, "config file '" + path + "' not found");
  try {
    json j = json::parse(in);
    return j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, "config '" + path + "': " + e.what());
  }
}

/// Digest of everything that determines trained parameters (not paths,
/// not evaluation settings).
inline std::string config_hash(const ModelConfig& model, const TrainingConfig& training, std::uint64_t seed) {
  json j;
  j["model"] = model;
  j["training"] = training;
  j["seed"] = seed;
  Fnv1a hash;
  hash.update(j.dump());
  return hex64(hash.digest());
}

inline std::string config_hash(const RunConfig& config) {
  return config_hash(config.model, config.training, config.seed);
}

}  // namespace unqa
