#pragma once

// Feature composition, regression heads, the full model state, its forward
// pass, head merging and checkpoint archives.

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "unqa/audio.hpp"
#include "unqa/config.hpp"
#include "unqa/manifest.hpp"
#include "unqa/mel.hpp"
#include "unqa/motion.hpp"
#include "unqa/nn.hpp"
#include "unqa/preprocess.hpp"
#include "unqa/spatial.hpp"

namespace unqa {

// ---------------------------------------------------------------------------
// Composition

struct ComposedFeature {
  Modality modality = Modality::image;
  Var values;  // [width]

  std::size_t size() const { return values.size(); }
};

/// Concatenates the branch features a modality needs, in the order spatial,
/// motion, audio. Missing or extraneous constituents are errors.
inline ComposedFeature compose_features(Modality modality, const std::optional<Var>& f_s,
                                        const std::optional<Var>& f_m, const std::optional<Var>& f_a) {
  const std::string m(to_string(modality));
  auto check = [&](const std::optional<Var>& f, bool needed, const char* what) {
    if (needed) {
      require(f.has_value() && f->defined(), ErrorCode::invalid_argument,
              std::string(what) + " feature required for " + m);
    } else {
      require(!f.has_value(), ErrorCode::invalid_argument, std::string(what) + " feature not accepted for " + m);
    }
  };
  check(f_s, has_visual(modality), "spatial");
  check(f_m, has_motion(modality), "motion");
  check(f_a, has_audio(modality), "audio");
  std::vector<Var> parts;
  for (const auto* f : {&f_s, &f_m, &f_a}) {
    if (f->has_value()) parts.push_back(reshape(**f, {(*f)->size()}));
  }
  return {modality, parts.size() == 1 ? parts.front() : concat(parts, 0)};
}

// ---------------------------------------------------------------------------
// Heads

enum class HeadKind { database_specific, modality_specific };

struct RegressionHead {
  HeadKind kind = HeadKind::modality_specific;
  std::string database;  // database-specific heads only
  Modality modality = Modality::image;
  std::size_t input_width = 0;
  std::size_t hidden = 0;
  ParameterSet params{ParamGroup::head};

  std::string key() const {
    return kind == HeadKind::database_specific ? "db:" + database : "modality:" + std::string(to_string(modality));
  }
};

inline std::size_t head_hidden_width(std::size_t input_width, const HeadConfig& config) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(
                                      std::llround(static_cast<double>(input_width) * config.hidden_ratio)));
}

/// Two affine layers with a GELU in between. `rng == nullptr` leaves every
/// parameter at zero.
inline RegressionHead make_head(HeadKind kind, const std::string& database, Modality modality,
                                std::size_t input_width, const HeadConfig& config, Rng* rng) {
  RegressionHead head;
  head.kind = kind;
  head.database = database;
  head.modality = modality;
  head.input_width = input_width;
  head.hidden = head_hidden_width(input_width, config);
  Parameter& w1 = head.params.add("fc1.weight", {head.hidden, input_width});
  head.params.add("fc1.bias", {head.hidden});
  Parameter& w2 = head.params.add("fc2.weight", {1, head.hidden});
  head.params.add("fc2.bias", {1});
  if (rng) {
    init_fan_in(w1, *rng, input_width);
    init_fan_in(w2, *rng, head.hidden);
  }
  return head;
}

/// Scalar quality score, shape [1].
inline Var regress(GradContext& ctx, RegressionHead& head, const ComposedFeature& feature) {
  require(feature.modality == head.modality, ErrorCode::invalid_argument,
          "head '" + head.key() + "' serves " + std::string(to_string(head.modality)) + ", feature is " +
              std::string(to_string(feature.modality)));
  require(feature.size() == head.input_width, ErrorCode::shape_mismatch,
          "head '" + head.key() + "' expects width " + std::to_string(head.input_width) + ", feature has " +
              std::to_string(feature.size()));
  const Var x = reshape(feature.values, {1, head.input_width});
  const Var h = gelu(linear(x, ctx.bind(head.params, "fc1.weight"), ctx.bind(head.params, "fc1.bias")));
  return reshape(linear(h, ctx.bind(head.params, "fc2.weight"), ctx.bind(head.params, "fc2.bias")), {1});
}

// ---------------------------------------------------------------------------
// Prepared inputs

/// Everything a forward pass needs that does not depend on trainable
/// parameters: preprocessed key frames, the frozen motion feature and the
/// mel spectrogram.
struct PreparedSample {
  std::string database;
  std::string sample_id;
  Modality modality = Modality::image;
  std::vector<Image> keyframes;
  std::optional<std::vector<double>> motion;
  std::optional<MelSpectrogram> mel;
};

enum class Phase { step1, step2, step3 };
NLOHMANN_JSON_SERIALIZE_ENUM(Phase, {{Phase::step1, "step1"}, {Phase::step2, "step2"}, {Phase::step3, "step3"}})

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::step1: return "step1";
    case Phase::step2: return "step2";
    case Phase::step3: return "step3";
  }
  return "unknown";
}

/// How often each branch contributed to a forward pass.
struct BranchCalls {
  std::size_t spatial = 0;
  std::size_t motion = 0;
  std::size_t audio = 0;
};

class ModelState {
 public:
  ModelState() = default;

  explicit ModelState(const ModelConfig& config)
      : config_(config), motion_(config.motion) {
    Rng spatial_rng(derive_seed(config.init_seed, 1));
    Rng audio_rng(derive_seed(config.init_seed, 2));
    spatial_ = SpatialBranch(config.backbone, spatial_rng);
    audio_ = AudioBranch(config.audio, config.mel, audio_rng);
  }

  // Copies carry parameters and heads; call counters start from zero.
  ModelState(const ModelState& other)
      : config_(other.config_), spatial_(other.spatial_), motion_(other.motion_), audio_(other.audio_),
        heads_(other.heads_), phase_(other.phase_) {}
  ModelState& operator=(const ModelState& other) {
    if (this != &other) {
      config_ = other.config_;
      spatial_ = other.spatial_;
      motion_ = other.motion_;
      audio_ = other.audio_;
      heads_ = other.heads_;
      phase_ = other.phase_;
      reset_calls();
    }
    return *this;
  }

  const ModelConfig& config() const { return config_; }
  SpatialBranch& spatial() { return spatial_; }
  const SpatialBranch& spatial() const { return spatial_; }
  const MotionExtractor& motion() const { return motion_; }
  AudioBranch& audio() { return audio_; }
  const AudioBranch& audio() const { return audio_; }

  Phase phase() const { return phase_; }
  void set_phase(Phase p) { phase_ = p; }

  std::vector<RegressionHead>& heads() { return heads_; }
  const std::vector<RegressionHead>& heads() const { return heads_; }

  std::size_t feature_width(Modality m) const {
    std::size_t w = 0;
    if (has_visual(m)) w += config_.backbone.feature_width();
    if (has_motion(m)) w += config_.motion.out_dim;
    if (has_audio(m)) w += config_.audio.embed_dim;
    return w;
  }

  /// Installs one freshly initialized head per database (step 1).
  void install_database_heads(const std::vector<std::pair<std::string, Modality>>& databases) {
    heads_.clear();
    for (const auto& [name, modality] : databases) {
      Fnv1a tag;
      tag.update(name);
      Rng rng(derive_seed(config_.init_seed, tag.digest()));
      heads_.push_back(make_head(HeadKind::database_specific, name, modality, feature_width(modality), config_.head, &rng));
    }
    phase_ = Phase::step1;
  }

  /// Installs four freshly initialized modality heads.
  void install_modality_heads() {
    heads_.clear();
    for (Modality m : kAllModalities) heads_.push_back(fresh_modality_head(m));
  }

  RegressionHead fresh_modality_head(Modality m) const {
    Rng rng(derive_seed(config_.init_seed, 0x4EAD0000ULL + static_cast<std::uint64_t>(m)));
    return make_head(HeadKind::modality_specific, "", m, feature_width(m), config_.head, &rng);
  }

  /// Head serving a sample under the current phase.
  RegressionHead& head_for(const std::string& database, Modality modality) {
    for (auto& h : heads_) {
      if (phase_ == Phase::step1 && h.kind == HeadKind::database_specific && h.database == database) return h;
      if (phase_ != Phase::step1 && h.kind == HeadKind::modality_specific && h.modality == modality) return h;
    }
    if (phase_ == Phase::step1) {
      throw Error(ErrorCode::invalid_argument, "database '" + database + "' has no head in step1");
    }
    throw Error(ErrorCode::invalid_argument, "no head for modality " + std::string(to_string(modality)));
  }

  // -- preparation -----------------------------------------------------------

  PreparedSample prepare(const MediaSample& sample) const {
    require(static_cast<bool>(sample.payload.content), ErrorCode::invalid_argument,
            "sample '" + sample.sample_id + "' has no decoded media");
    const MediaContent& c = *sample.payload.content;
    validate_content(sample, c);
    PreparedSample p;
    p.database = sample.database;
    p.sample_id = sample.sample_id;
    p.modality = sample.modality;
    if (sample.modality == Modality::image) p.keyframes.push_back(preprocess_image(*c.image, config_.preprocess));
    if (has_motion(sample.modality)) {
      for (std::size_t idx : keyframe_indices(*c.video, config_.video)) {
        p.keyframes.push_back(preprocess_image(c.video->frames[idx], config_.preprocess));
      }
      p.motion = motion_.video_feature(*c.video, config_.preprocess, config_.video).values;
    }
    if (has_audio(sample.modality)) {
      const Waveform wave = resample(*c.audio, config_.mel.sample_rate);
      p.mel = compute_mel_spectrogram(wave.samples, wave.sample_rate, config_.mel);
      require(!p.mel->segment_starts.empty(), ErrorCode::invalid_argument,
              "sample '" + sample.sample_id + "': audio too short for one mel segment");
    }
    return p;
  }

  // -- forward ---------------------------------------------------------------

  /// Runs exactly the branches the modality needs and composes their output.
  ComposedFeature compose(GradContext& ctx, const PreparedSample& p) {
    std::optional<Var> f_s, f_m, f_a;
    if (has_visual(p.modality)) {
      ++calls_spatial_;
      f_s = spatial_.spatial_feature(ctx, frames_to_var(p.keyframes)).values;
    }
    if (has_motion(p.modality)) {
      ++calls_motion_;
      f_m = constant({p.motion->size()}, *p.motion);
    }
    if (has_audio(p.modality)) {
      ++calls_audio_;
      f_a = audio_.audio_feature(ctx, *p.mel).values;
    }
    return compose_features(p.modality, f_s, f_m, f_a);
  }

  Var forward(GradContext& ctx, const PreparedSample& p) {
    RegressionHead& head = head_for(p.database, p.modality);
    return regress(ctx, head, compose(ctx, p));
  }

  double score(const PreparedSample& p) {
    GradContext ctx = GradContext::inference();
    return forward(ctx, p).item();
  }

  BranchCalls calls() const { return {calls_spatial_.load(), calls_motion_.load(), calls_audio_.load()}; }
  void reset_calls() {
    calls_spatial_ = 0;
    calls_motion_ = 0;
    calls_audio_ = 0;
  }

  // -- checksums -------------------------------------------------------------

  std::uint64_t spatial_checksum() const { return spatial_.params().checksum(); }
  std::uint64_t audio_checksum() const { return audio_.params().checksum(); }
  std::uint64_t motion_checksum() const { return motion_.checksum(); }
  std::uint64_t head_checksum() const {
    Fnv1a hash;
    for (const auto& h : heads_) {
      hash.update(h.key());
      h.params.update_digest(hash);
    }
    return hash.digest();
  }

  /// Parameters that may change under the given trainable groups.
  std::vector<Parameter*> parameters(const std::vector<ParamGroup>& groups) {
    std::vector<Parameter*> out;
    auto want = [&](ParamGroup g) { return std::find(groups.begin(), groups.end(), g) != groups.end(); };
    if (want(ParamGroup::spatial)) {
      for (auto& p : spatial_.params().all()) out.push_back(&p);
    }
    if (want(ParamGroup::audio)) {
      for (auto& p : audio_.params().all()) out.push_back(&p);
    }
    if (want(ParamGroup::head)) {
      for (auto& h : heads_) {
        for (auto& p : h.params.all()) out.push_back(&p);
      }
    }
    return out;
  }

 private:
  ModelConfig config_;
  SpatialBranch spatial_;
  MotionExtractor motion_;
  AudioBranch audio_;
  std::vector<RegressionHead> heads_;
  Phase phase_ = Phase::step1;
  std::atomic<std::size_t> calls_spatial_{0};
  std::atomic<std::size_t> calls_motion_{0};
  std::atomic<std::size_t> calls_audio_{0};
};

/// Replaces the M database-specific heads by four modality heads, each the
/// parameter mean of its modality's database heads. A modality without any
/// database gets a fresh random head.
inline void merge_heads(ModelState& state) {
  require(state.phase() == Phase::step1, ErrorCode::invalid_argument, "merge_heads: model is not in step1");
  std::vector<RegressionHead> merged;
  for (Modality m : kAllModalities) {
    std::vector<const RegressionHead*> group;
    for (const auto& h : state.heads()) {
      if (h.kind == HeadKind::database_specific && h.modality == m) group.push_back(&h);
    }
    if (group.empty()) {
      warn("merge_heads: no database for modality " + std::string(to_string(m)) + "; using a fresh head");
      merged.push_back(state.fresh_modality_head(m));
      continue;
    }
    RegressionHead head = make_head(HeadKind::modality_specific, "", m, group.front()->input_width,
                                    state.config().head, nullptr);
    for (auto& p : head.params.all()) {
      for (const auto* src : group) {
        const auto& v = src->params.at(p.name).value;
        for (std::size_t i = 0; i < v.size(); ++i) p.value[i] += v[i];
      }
      for (double& v : p.value) v /= static_cast<double>(group.size());
    }
    merged.push_back(std::move(head));
  }
  state.heads() = std::move(merged);
  state.set_phase(Phase::step2);
}

// ---------------------------------------------------------------------------
// Prepared-sample cache

class PreparedCache {
 public:
  const PreparedSample& get(const ModelState& state, const MediaSample& sample) {
    std::lock_guard lock(mutex_);
    const std::string key = sample.database + "/" + sample.sample_id;
    auto it = items_.find(key);
    if (it == items_.end()) it = items_.emplace(key, std::make_unique<PreparedSample>(state.prepare(sample))).first;
    return *it->second;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::unique_ptr<PreparedSample>> items_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  std::string config_hash;
  // Training databases and their sample ids, used by overlap checks.
  std::map<std::string, std::vector<std::string>> training_samples;
};

inline constexpr char kCheckpointMagic[8] = {'U', 'N', 'Q', 'A', 'C', 'K', 'P', 'T'};

namespace detail {

inline json head_header(const RegressionHead& h) {
  return json{{"kind", h.kind == HeadKind::database_specific ? "database" : "modality"},
              {"database", h.database},
              {"modality", std::string(to_string(h.modality))},
              {"input_width", h.input_width},
              {"hidden", h.hidden}};
}

}  // namespace detail

inline void save_checkpoint(const ModelState& state, const CheckpointMeta& meta, const std::filesystem::path& path) {
  json header;
  header["phase"] = state.phase();
  header["config_hash"] = meta.config_hash;
  header["model"] = state.config();
  header["training_samples"] = meta.training_samples;
  json blocks = json::array();
  std::vector<const std::vector<double>*> payload;
  std::size_t offset = 0;
  auto add_set = [&](const std::string& prefix, const ParameterSet& set) {
    for (const auto& p : set.all()) {
      blocks.push_back({{"name", prefix + p.name}, {"shape", p.shape}, {"offset", offset}});
      offset += p.value.size();
      payload.push_back(&p.value);
    }
  };
  add_set("spatial/", state.spatial().params());
  add_set("motion/", state.motion().params());
  add_set("audio/", state.audio().params());
  json heads = json::array();
  for (const auto& h : state.heads()) {
    heads.push_back(detail::head_header(h));
    add_set("head/" + h.key() + "/", h.params);
  }
  header["heads"] = heads;
  header["blocks"] = blocks;
  header["n_values"] = offset;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    require(out.good(), ErrorCode::io_error, "cannot write checkpoint '" + path.string() + "'");
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* v : payload) {
      out.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(double)));
    }
    require(out.good(), ErrorCode::io_error, "failed writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  ModelState state;
  CheckpointMeta meta;
};

/// Reads a checkpoint. When `expected_hash` is given it must equal the
/// archived config hash.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        const std::optional<std::string>& expected_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::missing_file, "checkpoint '" + path.string() + "' not found");
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  require(in.good() && std::memcmp(magic, kCheckpointMagic, sizeof(magic)) == 0, ErrorCode::parse_error,
          "'" + path.string() + "' is not a checkpoint archive");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.good(), ErrorCode::parse_error, "checkpoint '" + path.string() + "' is truncated");

  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, "checkpoint header: " + std::string(e.what()));
  }
  LoadedCheckpoint out;
  out.meta.config_hash = header.at("config_hash").get<std::string>();
  out.meta.training_samples = header.at("training_samples").get<std::map<std::string, std::vector<std::string>>>();
  if (expected_hash) {
    require(*expected_hash == out.meta.config_hash, ErrorCode::config_mismatch,
            "checkpoint '" + path.string() + "' was written under config " + out.meta.config_hash +
                ", current config is " + *expected_hash);
  }
  out.state = ModelState(header.at("model").get<ModelConfig>());
  ModelState& state = out.state;
  for (const auto& h : header.at("heads")) {
    const bool db = h.at("kind").get<std::string>() == "database";
    state.heads().push_back(make_head(db ? HeadKind::database_specific : HeadKind::modality_specific,
                                      h.at("database").get<std::string>(),
                                      parse_modality(h.at("modality").get<std::string>()),
                                      h.at("input_width").get<std::size_t>(), state.config().head, nullptr));
  }
  state.set_phase(header.at("phase").get<Phase>());

  const auto n_values = header.at("n_values").get<std::size_t>();
  std::vector<double> values(n_values);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n_values * sizeof(double)));
  require(in.gcount() == static_cast<std::streamsize>(n_values * sizeof(double)), ErrorCode::parse_error,
          "checkpoint '" + path.string() + "' payload is truncated");

  std::map<std::string, Parameter*> targets;
  auto collect = [&](const std::string& prefix, ParameterSet& set) {
    for (auto& p : set.all()) targets[prefix + p.name] = &p;
  };
  collect("spatial/", state.spatial().params());
  collect("audio/", state.audio().params());
  for (auto& h : state.heads()) collect("head/" + h.key() + "/", h.params);
  std::size_t assigned = 0;
  for (const auto& b : header.at("blocks")) {
    const auto name = b.at("name").get<std::string>();
    const auto shape = b.at("shape").get<Shape>();
    const auto offset = b.at("offset").get<std::size_t>();
    require(offset + numel(shape) <= n_values, ErrorCode::parse_error, "checkpoint block '" + name + "' out of range");
    if (name.rfind("motion/", 0) == 0) {
      // Frozen extractor: regenerated from its seed, archived values must agree.
      const auto& p = state.motion().params().at(name.substr(7));
      require(p.shape == shape && std::equal(p.value.begin(), p.value.end(), values.begin() + static_cast<std::ptrdiff_t>(offset)),
              ErrorCode::config_mismatch, "checkpoint motion block '" + name + "' differs from the frozen extractor");
      ++assigned;
      continue;
    }
    auto it = targets.find(name);
    require(it != targets.end(), ErrorCode::parse_error, "checkpoint block '" + name + "' has no matching parameter");
    require(it->second->shape == shape, ErrorCode::shape_mismatch,
            "checkpoint block '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                shape_string(it->second->shape));
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), numel(shape), it->second->value.begin());
    ++assigned;
  }
  require(assigned == targets.size() + state.motion().params().all().size(), ErrorCode::parse_error,
          "checkpoint '" + path.string() + "' does not cover every parameter");
  return out;
}

/// FNV-1a of the archive bytes.
inline std::string checkpoint_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::missing_file, "checkpoint '" + path.string() + "' not found");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Fnv1a hash;
  hash.update(bytes.data(), bytes.size());
  return hex64(hash.digest());
}

}  // namespace unqa
