#pragma once

// On-disk database format.
//
//   <dir>/manifest.csv   sample_id,modality,media_path,audio_path,mos
//   <dir>/manifest.json  {"name", "modality", "mos_range": [lo, hi], "steps_per_epoch"}
//
// Media paths are relative to the manifest directory. Images are binary
// PPM/PGM; videos are directories holding meta.json ({"frame_rate"}) and
// frame_NNNNN.ppm files; audio is RIFF WAV (PCM16 or float32).

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unqa/config.hpp"
#include "unqa/core.hpp"
#include "unqa/media.hpp"

namespace unqa {

namespace fs = std::filesystem;

// Images ---------------------------------------------------------------------

inline void write_ppm(const fs::path& path, const Image& image) {
  require(image.channels == 3 || image.channels == 1, ErrorCode::invalid_argument,
          "PPM output needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::io_error, "cannot write '" + path.string() + "'");
  out << (image.channels == 3 ? "P6" : "P5") << "\n" << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> row(image.width * image.channels);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(c, y, x)), 0.0, 1.0);
        row[x * image.channels + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

/// Reads binary PPM (P6) or PGM (P5); grayscale is replicated to 3 channels.
inline Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::missing_file, "cannot open image '" + path.string() + "'");
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(ch))) {
        t += ch;
        break;
      }
    }
    while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) t += ch;
    return t;
  };
  const std::string magic = token();
  require(magic == "P6" || magic == "P5", ErrorCode::parse_error, "'" + path.string() + "' is not a binary PPM/PGM");
  std::size_t width = 0, height = 0, maxval = 0;
  try {
    width = std::stoul(token());
    height = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw Error(ErrorCode::parse_error, "'" + path.string() + "': bad PPM header");
  }
  require(width >= 1 && height >= 1 && maxval >= 1 && maxval <= 65535, ErrorCode::parse_error,
          "'" + path.string() + "': bad PPM header");
  const std::size_t channels = magic == "P6" ? 3 : 1;
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(width * height * channels * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  require(static_cast<std::size_t>(in.gcount()) == raw.size(), ErrorCode::parse_error,
          "'" + path.string() + "': truncated pixel data");
  Image image(3, height, width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src_c = channels == 3 ? c : 0;
        const std::size_t idx = ((y * width + x) * channels + src_c) * bytes;
        const unsigned v = bytes == 2 ? (raw[idx] << 8) | raw[idx + 1] : raw[idx];
        image.at(c, y, x) = static_cast<float>(v / static_cast<double>(maxval));
      }
    }
  }
  return image;
}

// Audio ----------------------------------------------------------------------

inline void write_wav(const fs::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::io_error, "cannot write '" + path.string() + "'");
  const auto rate = static_cast<std::uint32_t>(std::lround(wave.sample_rate));
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  auto u32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  auto u16 = [&](std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
  };
  out.write("RIFF", 4);
  u32(36 + data_bytes);
  out.write("WAVEfmt ", 8);
  u32(16);
  u16(1);
  u16(1);
  u32(rate);
  u32(rate * 2);
  u16(2);
  u16(16);
  out.write("data", 4);
  u32(data_bytes);
  for (double v : wave.samples) {
    const auto s = static_cast<std::int16_t>(std::lround(std::clamp(v, -1.0, 1.0) * 32767.0));
    u16(static_cast<std::uint16_t>(s));
  }
}

/// Reads PCM16 / float32 WAV and mixes down to mono.
inline Waveform read_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::missing_file, "cannot open audio '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto u32 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(bytes[at] | (bytes[at + 1] << 8) | (bytes[at + 2] << 16) |
                                      (static_cast<std::uint32_t>(bytes[at + 3]) << 24));
  };
  auto u16 = [&](std::size_t at) { return static_cast<std::uint16_t>(bytes[at] | (bytes[at + 1] << 8)); };
  require(bytes.size() >= 12 && std::memcmp(bytes.data(), "RIFF", 4) == 0 &&
              std::memcmp(bytes.data() + 8, "WAVE", 4) == 0,
          ErrorCode::parse_error, "'" + path.string() + "' is not a RIFF/WAVE file");
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t data_at = 0, data_size = 0;
  for (std::size_t at = 12; at + 8 <= bytes.size();) {
    const std::uint32_t size = u32(at + 4);
    if (std::memcmp(bytes.data() + at, "fmt ", 4) == 0 && at + 8 + 16 <= bytes.size()) {
      format = u16(at + 8);
      channels = u16(at + 10);
      rate = u32(at + 12);
      bits = u16(at + 22);
    } else if (std::memcmp(bytes.data() + at, "data", 4) == 0) {
      data_at = at + 8;
      data_size = std::min<std::size_t>(size, bytes.size() - data_at);
    }
    at += 8 + size + (size & 1);
  }
  require(channels >= 1 && rate > 0 && data_at > 0, ErrorCode::parse_error,
          "'" + path.string() + "': missing fmt or data chunk");
  require((format == 1 && bits == 16) || (format == 3 && bits == 32), ErrorCode::parse_error,
          "'" + path.string() + "': only PCM16 and float32 WAV are supported");
  const std::size_t frame_bytes = channels * (bits / 8);
  const std::size_t frames = data_size / frame_bytes;
  Waveform wave;
  wave.sample_rate = rate;
  wave.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t at = data_at + f * frame_bytes + c * (bits / 8);
      if (format == 1) {
        acc += static_cast<std::int16_t>(u16(at)) / 32767.0;
      } else {
        float v;
        const std::uint32_t raw = u32(at);
        std::memcpy(&v, &raw, 4);
        acc += v;
      }
    }
    wave.samples[f] = acc / channels;
  }
  return wave;
}

/// Linear-interpolation resampling.
inline Waveform resample(const Waveform& wave, double target_rate) {
  require(wave.sample_rate > 0.0 && target_rate > 0.0, ErrorCode::invalid_argument, "sample rates must be positive");
  if (wave.sample_rate == target_rate || wave.samples.empty()) return wave;
  const double ratio = wave.sample_rate / target_rate;
  const auto n = static_cast<std::size_t>(std::floor(static_cast<double>(wave.samples.size() - 1) / ratio)) + 1;
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double src = static_cast<double>(i) * ratio;
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = std::min(i0 + 1, wave.samples.size() - 1);
    const double frac = src - static_cast<double>(i0);
    out.samples[i] = wave.samples[i0] + (wave.samples[i1] - wave.samples[i0]) * frac;
  }
  return out;
}

// Video ----------------------------------------------------------------------

inline void write_video_dir(const fs::path& dir, const FrameSequence& video) {
  fs::create_directories(dir);
  json meta{{"frame_rate", video.frame_rate}, {"frames", video.frames.size()}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
  for (std::size_t f = 0; f < video.frames.size(); ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05zu.ppm", f);
    write_ppm(dir / name, video.frames[f]);
  }
}

inline FrameSequence read_video_dir(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::missing_file, "video directory '" + dir.string() + "' not found");
  std::ifstream meta_in(dir / "meta.json");
  require(meta_in.good(), ErrorCode::missing_file, "'" + (dir / "meta.json").string() + "' not found");
  FrameSequence video;
  try {
    video.frame_rate = json::parse(meta_in).at("frame_rate").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, "'" + (dir / "meta.json").string() + "': " + e.what());
  }
  std::vector<fs::path> frames;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".ppm" || entry.path().extension() == ".pgm") frames.push_back(entry.path());
  }
  std::sort(frames.begin(), frames.end());
  for (const auto& f : frames) video.frames.push_back(read_ppm(f));
  return video;
}

// Manifest -------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field += ch;
    }
  }
  fields.push_back(field);
  return fields;
}

inline std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char ch : value) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string format_mos(double mos) {
  std::ostringstream os;
  os.precision(17);
  os << mos;
  return os.str();
}

}  // namespace detail

inline fs::path sidecar_path(const fs::path& manifest) {
  fs::path p = manifest;
  return p.replace_extension(".json");
}

struct ManifestOptions {
  double sample_rate = 16000.0;  // audio is resampled to this rate on ingestion
  bool decode = true;
};

/// Parses a manifest and its sidecar, validating media locators and decoding
/// the media. MOS values are kept on their native scale.
inline Database load_manifest(const fs::path& path, const ManifestOptions& options = {}) {
  std::ifstream csv(path);
  require(csv.good(), ErrorCode::missing_file, "manifest '" + path.string() + "' not found");
  const fs::path side = sidecar_path(path);
  std::ifstream side_in(side);
  require(side_in.good(), ErrorCode::missing_file, "manifest sidecar '" + side.string() + "' not found");

  Database db;
  try {
    const json meta = json::parse(side_in);
    db.spec.name = meta.at("name").get<std::string>();
    db.spec.modality = parse_modality(meta.at("modality").get<std::string>());
    const json& range = meta.at("mos_range");
    if (range.is_array()) {
      require(range.size() == 2, ErrorCode::parse_error, "mos_range must hold two values");
      db.spec.mos_range = {range[0].get<double>(), range[1].get<double>()};
    } else {
      db.spec.mos_range = range.get<MosRange>();
    }
    db.spec.steps_per_epoch = meta.value("steps_per_epoch", std::size_t{1});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, "sidecar '" + side.string() + "': " + e.what());
  }
  require(db.spec.mos_range.lo < db.spec.mos_range.hi, ErrorCode::out_of_range,
          "database '" + db.spec.name + "': mos_range lower bound must be below upper bound");

  std::string line;
  require(static_cast<bool>(std::getline(csv, line)), ErrorCode::parse_error, "manifest '" + path.string() + "' is empty");
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> expected{"sample_id", "modality", "media_path", "audio_path", "mos"};
  require(header == expected, ErrorCode::parse_error,
          "manifest '" + path.string() + "': header must be sample_id,modality,media_path,audio_path,mos");

  const fs::path root = path.parent_path();
  std::set<std::string> ids;
  std::size_t line_no = 1;
  while (std::getline(csv, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    require(f.size() == 5, ErrorCode::parse_error,
            "manifest '" + path.string() + "' line " + std::to_string(line_no) + ": expected 5 fields");
    MediaSample s;
    s.database = db.spec.name;
    s.sample_id = f[0];
    require(!s.sample_id.empty(), ErrorCode::parse_error, "line " + std::to_string(line_no) + ": empty sample_id");
    require(ids.insert(s.sample_id).second, ErrorCode::duplicate,
            "manifest '" + path.string() + "': duplicate sample_id '" + s.sample_id + "'");
    s.modality = parse_modality(f[1]);
    require(s.modality == db.spec.modality, ErrorCode::invalid_argument,
            "sample '" + s.sample_id + "': modality " + f[1] + " differs from database modality");
    try {
      std::size_t used = 0;
      s.mos = std::stod(f[4], &used);
      require(used == f[4].size(), ErrorCode::parse_error, "");
    } catch (const std::exception&) {
      throw Error(ErrorCode::parse_error, "sample '" + s.sample_id + "': MOS '" + f[4] + "' is not a number");
    }
    require(db.spec.mos_range.contains(s.mos), ErrorCode::out_of_range,
            "sample '" + s.sample_id + "': MOS " + f[4] + " outside declared range [" +
                detail::format_mos(db.spec.mos_range.lo) + ", " + detail::format_mos(db.spec.mos_range.hi) + "]");
    s.payload.media_path = f[2];
    s.payload.audio_path = f[3];
    if (has_audio(s.modality) && s.payload.audio_path.empty() && s.modality == Modality::audio) {
      s.payload.audio_path = s.payload.media_path;
    }
    require(has_audio(s.modality) || s.payload.audio_path.empty(), ErrorCode::parse_error,
            "sample '" + s.sample_id + "': audio_path must be empty for " + f[1]);
    if (has_visual(s.modality)) {
      require(!s.payload.media_path.empty() && fs::exists(root / s.payload.media_path), ErrorCode::missing_file,
              "sample '" + s.sample_id + "': media file '" + (root / s.payload.media_path).string() + "' not found");
    }
    if (has_audio(s.modality)) {
      require(!s.payload.audio_path.empty() && fs::exists(root / s.payload.audio_path), ErrorCode::missing_file,
              "sample '" + s.sample_id + "': audio file '" + (root / s.payload.audio_path).string() + "' not found");
    }
    if (options.decode) {
      auto content = std::make_shared<MediaContent>();
      if (s.modality == Modality::image) content->image = read_ppm(root / s.payload.media_path);
      if (has_motion(s.modality)) content->video = read_video_dir(root / s.payload.media_path);
      if (has_audio(s.modality)) content->audio = resample(read_wav(root / s.payload.audio_path), options.sample_rate);
      validate_content(s, *content);
      s.payload.content = std::move(content);
    }
    db.samples.push_back(std::move(s));
  }
  db.spec.n_samples = db.samples.size();
  validate_database(db);
  return db;
}

/// Loads and registers.
inline std::shared_ptr<const Database> load_manifest(DatabaseRegistry& registry, const fs::path& path,
                                                     const ManifestOptions& options = {}) {
  return registry.add(load_manifest(path, options));
}

/// Serializes an in-memory database into the manifest format; returns the
/// manifest path.
inline fs::path write_database(const Database& db, const fs::path& dir) {
  fs::create_directories(dir / "media");
  const fs::path manifest = dir / "manifest.csv";
  std::ofstream csv(manifest);
  require(csv.good(), ErrorCode::io_error, "cannot write '" + manifest.string() + "'");
  csv << "sample_id,modality,media_path,audio_path,mos\n";
  for (const auto& s : db.samples) {
    require(static_cast<bool>(s.payload.content), ErrorCode::invalid_argument,
            "sample '" + s.sample_id + "' has no in-memory media to write");
    const auto& c = *s.payload.content;
    std::string media, audio;
    if (c.image) {
      media = "media/" + s.sample_id + ".ppm";
      write_ppm(dir / media, *c.image);
    }
    if (c.video) {
      media = "media/" + s.sample_id;
      write_video_dir(dir / media, *c.video);
    }
    if (c.audio) {
      audio = "media/" + s.sample_id + ".wav";
      write_wav(dir / audio, *c.audio);
      if (s.modality == Modality::audio) media = audio;
    }
    csv << detail::csv_field(s.sample_id) << "," << to_string(s.modality) << "," << detail::csv_field(media) << ","
        << detail::csv_field(audio) << "," << detail::format_mos(s.mos) << "\n";
  }
  json meta{{"name", db.spec.name},
            {"modality", std::string(to_string(db.spec.modality))},
            {"mos_range", {db.spec.mos_range.lo, db.spec.mos_range.hi}},
            {"steps_per_epoch", db.spec.steps_per_epoch}};
  std::ofstream(sidecar_path(manifest)) << meta.dump(2) << "\n";
  return manifest;
}

}  // namespace unqa
