#pragma once

// Media and database types shared by every stage of the pipeline.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unqa/core.hpp"

namespace unqa {

enum class Modality { audio, image, video, av };

inline constexpr Modality kAllModalities[] = {Modality::audio, Modality::image, Modality::video,
                                              Modality::av};

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::audio: return "audio";
    case Modality::image: return "image";
    case Modality::video: return "video";
    case Modality::av: return "av";
  }
  return "unknown";
}

inline Modality parse_modality(std::string_view text) {
  if (text == "audio") return Modality::audio;
  if (text == "image") return Modality::image;
  if (text == "video") return Modality::video;
  if (text == "av" || text == "a/v" || text == "audio-visual") return Modality::av;
  throw Error(ErrorCode::invalid_argument, "unknown modality '" + std::string(text) + "'");
}

inline bool has_visual(Modality m) { return m != Modality::audio; }
inline bool has_motion(Modality m) { return m == Modality::video || m == Modality::av; }
inline bool has_audio(Modality m) { return m == Modality::audio || m == Modality::av; }

/// Planar C×H×W image with values in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  bool operator==(const Image&) const = default;
};

struct FrameSequence {
  std::vector<Image> frames;
  double frame_rate = 0.0;

  double duration() const { return frame_rate > 0.0 ? static_cast<double>(frames.size()) / frame_rate : 0.0; }
  bool operator==(const FrameSequence&) const = default;
};

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 0.0;

  bool operator==(const Waveform&) const = default;
};

/// Decoded media of one sample. Which members are engaged follows the
/// modality: image -> image, video -> video, audio -> audio, av -> video+audio.
struct MediaContent {
  std::optional<Image> image;
  std::optional<FrameSequence> video;
  std::optional<Waveform> audio;

  bool operator==(const MediaContent&) const = default;
};

/// Where a sample's media lives. `content` is filled for in-memory
/// samples (synthetic databases) and by ingestion once files are decoded.
struct Payload {
  std::string media_path;
  std::string audio_path;
  std::shared_ptr<const MediaContent> content;
};

struct MosRange {
  double lo = 1.0;
  double hi = 5.0;

  double width() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
  bool operator==(const MosRange&) const = default;
};

struct DatabaseSpec {
  std::string name;
  Modality modality = Modality::image;
  MosRange mos_range;
  std::size_t n_samples = 0;
  std::size_t steps_per_epoch = 1;
};

struct MediaSample {
  std::string database;
  std::string sample_id;
  Modality modality = Modality::image;
  Payload payload;
  double mos = 0.0;
  std::optional<double> latent_quality;
};

struct Database {
  DatabaseSpec spec;
  std::vector<MediaSample> samples;

  const MediaSample& sample(const std::string& id) const {
    auto it = std::find_if(samples.begin(), samples.end(),
                           [&](const MediaSample& s) { return s.sample_id == id; });
    require(it != samples.end(), ErrorCode::invalid_argument,
            "sample '" + id + "' not in database '" + spec.name + "'");
    return *it;
  }

  std::vector<double> mos_values() const {
    std::vector<double> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.mos);
    return out;
  }
};

inline void validate_content(const MediaSample& s, const MediaContent& c) {
  const std::string who = "sample '" + s.sample_id + "'";
  switch (s.modality) {
    case Modality::image:
      require(c.image && c.image->height >= 1 && c.image->width >= 1, ErrorCode::invalid_argument,
              who + ": image payload missing");
      break;
    case Modality::video:
    case Modality::av:
      require(c.video && !c.video->frames.empty(), ErrorCode::invalid_argument,
              who + ": video payload needs at least one frame");
      require(c.video->frame_rate > 0.0, ErrorCode::invalid_argument, who + ": frame rate must be positive");
      if (s.modality == Modality::av) {
        require(c.audio.has_value(), ErrorCode::invalid_argument, who + ": A/V payload needs a waveform");
      }
      break;
    case Modality::audio:
      require(c.audio.has_value(), ErrorCode::invalid_argument, who + ": waveform missing");
      break;
  }
  if (c.audio) {
    require(c.audio->sample_rate > 0.0, ErrorCode::invalid_argument, who + ": sample rate must be positive");
  }
}

/// Checks every DatabaseSpec / MediaSample invariant.
inline void validate_database(const Database& db) {
  const auto& spec = db.spec;
  require(!spec.name.empty(), ErrorCode::invalid_argument, "database name must not be empty");
  require(spec.mos_range.lo < spec.mos_range.hi, ErrorCode::out_of_range,
          "database '" + spec.name + "': mos_range lower bound must be below upper bound");
  require(spec.n_samples == db.samples.size() && spec.n_samples > 0, ErrorCode::invalid_argument,
          "database '" + spec.name + "': n_samples does not match the sample list");
  require(spec.steps_per_epoch >= 1, ErrorCode::invalid_argument,
          "database '" + spec.name + "': steps_per_epoch must be positive");
  std::set<std::string> ids;
  for (const auto& s : db.samples) {
    require(ids.insert(s.sample_id).second, ErrorCode::duplicate,
            "database '" + spec.name + "': duplicate sample_id '" + s.sample_id + "'");
    require(s.modality == spec.modality, ErrorCode::invalid_argument,
            "sample '" + s.sample_id + "': modality differs from database '" + spec.name + "'");
    require(s.database == spec.name, ErrorCode::invalid_argument,
            "sample '" + s.sample_id + "': database tag differs from '" + spec.name + "'");
    require(spec.mos_range.contains(s.mos), ErrorCode::out_of_range,
            "sample '" + s.sample_id + "': MOS " + std::to_string(s.mos) + " outside [" +
                std::to_string(spec.mos_range.lo) + ", " + std::to_string(spec.mos_range.hi) + "]");
    if (s.payload.content) validate_content(s, *s.payload.content);
  }
}

/// Registered databases. Registration is serialized; registered databases
/// are immutable and shared.
class DatabaseRegistry {
 public:
  std::shared_ptr<const Database> add(Database db) {
    validate_database(db);
    std::lock_guard lock(mutex_);
    require(databases_.find(db.spec.name) == databases_.end(), ErrorCode::duplicate,
            "database '" + db.spec.name + "' already registered");
    auto shared = std::make_shared<const Database>(std::move(db));
    databases_.emplace(shared->spec.name, shared);
    order_.push_back(shared->spec.name);
    return shared;
  }

  std::shared_ptr<const Database> get(const std::string& name) const {
    std::lock_guard lock(mutex_);
    auto it = databases_.find(name);
    require(it != databases_.end(), ErrorCode::invalid_argument, "database '" + name + "' is not registered");
    return it->second;
  }

  bool contains(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return databases_.count(name) != 0;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return databases_.size();
  }

  /// Registration order.
  std::vector<std::shared_ptr<const Database>> all() const {
    std::lock_guard lock(mutex_);
    std::vector<std::shared_ptr<const Database>> out;
    for (const auto& name : order_) out.push_back(databases_.at(name));
    return out;
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const Database>> databases_;
  std::vector<std::string> order_;
};

}  // namespace unqa
