#pragma once

// Frame preprocessing, manifest ingestion and the on-disk clip archive.

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gaitdis/core/container.hpp"
#include "gaitdis/core/error.hpp"
#include "gaitdis/core/image_io.hpp"

namespace gaitdis {

inline constexpr int kFrameH = 64;
inline constexpr int kFrameW = 32;
inline constexpr int kFrameC = 3;
inline constexpr int kFrameSize = kFrameH * kFrameW * kFrameC;

/// One network input frame: 64 (H) x 32 (W) x 3, interleaved HWC, values in [0,1].
class FrameTensor {
 public:
  FrameTensor() : values_(kFrameSize, 0.0f) {}
  explicit FrameTensor(std::vector<float> values) : values_(std::move(values)) {
    if (values_.size() != static_cast<std::size_t>(kFrameSize))
      throw ShapeError("frame tensor must hold 64x32x3 values");
  }

  float& at(int y, int x, int ch) { return values_[(y * kFrameW + x) * kFrameC + ch]; }
  float at(int y, int x, int ch) const { return values_[(y * kFrameW + x) * kFrameC + ch]; }
  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

  bool in_unit_range() const {
    return std::all_of(values_.begin(), values_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  }
  friend bool operator==(const FrameTensor&, const FrameTensor&) = default;

 private:
  std::vector<float> values_;
};

/// Person bounding box in pixel-edge coordinates (pixel i spans [i, i+1)).
struct Box {
  double center_x = 0;
  double center_y = 0;
  double height = 0;
};

struct RawFrame {
  Image8 rgb;               // 3 channels
  std::vector<float> mask;  // height * width, row-major, in [0,1]
  Box box;
};

struct Clip {
  std::vector<FrameTensor> frames;
  std::string subject_id;
  std::string condition_id;
  double view_deg = 0;
  std::string source_id;
  int video_index = 0;

  std::size_t size() const { return frames.size(); }
  friend bool operator==(const Clip&, const Clip&) = default;
};

struct ManifestEntry {
  std::string source_id;
  std::filesystem::path frames_dir;
  std::filesystem::path masks_dir;
  std::string subject;
  std::string condition;
  double view = 0;
  int video_index = 0;
  std::filesystem::path boxes;  // optional JSON list of [cx, cy, h] per frame
};

struct Manifest {
  std::vector<ManifestEntry> entries;
};

// ---------------------------------------------------------------------------
// Preprocessing

namespace detail {

/// Reads the masked, normalized product at integer pixel (y, x); callers
/// guarantee bounds.
inline float masked_pixel(const RawFrame& raw, int y, int x, int ch) {
  const std::size_t idx = static_cast<std::size_t>(y) * raw.rgb.width + x;
  return raw.mask[idx] * (static_cast<float>(raw.rgb.at(y, x, ch)) / 255.0f);
}

}  // namespace detail

/// Crops a 1:2 (width:height) window centred on the box, multiplies the soft
/// mask into the [0,1]-normalized RGB, and bilinearly resizes to 64x32
/// (half-pixel centres, align_corners=false). Sample points that fall outside
/// the image read as zero; the interpolation taps of the others clamp to the
/// pixels whose centres lie inside both the crop and the image.
inline FrameTensor preprocess_frame(const RawFrame& raw) {
  const int H = raw.rgb.height, W = raw.rgb.width;
  if (!(raw.box.height > 0) || !std::isfinite(raw.box.height))
    throw InvalidBox("box height must be positive");
  if (raw.rgb.channels != 3 || static_cast<std::size_t>(H) * W * 3 != raw.rgb.pixels.size())
    throw IngestionError("rgb image is not HxWx3");
  if (raw.mask.size() != static_cast<std::size_t>(H) * W)
    throw IngestionError("mask and rgb dimensions differ");
  for (float m : raw.mask)
    if (!(m >= 0.0f && m <= 1.0f)) throw IngestionError("mask value outside [0,1]");

  const double crop_h = raw.box.height;
  const double crop_w = crop_h / 2.0;
  const double x0 = raw.box.center_x - crop_w / 2.0;
  const double y0 = raw.box.center_y - crop_h / 2.0;
  if (x0 >= W || y0 >= H || x0 + crop_w <= 0 || y0 + crop_h <= 0)
    throw InvalidBox("box lies entirely outside the image");

  // Tap ranges: pixel j is in the crop when its centre j + 0.5 is. A crop too
  // thin to hold any centre uses the pixel under the box centre.
  auto taps = [](double lo, double len, double centre, int n) {
    double a = std::max(0.0, std::ceil(lo - 0.5)), b = std::min(n - 1.0, std::ceil(lo + len - 0.5) - 1);
    if (b < a) a = b = std::clamp(std::floor(centre), 0.0, n - 1.0);
    return std::pair{a, b};
  };
  const auto [ylo, yhi] = taps(y0, crop_h, raw.box.center_y, H);
  const auto [xlo, xhi] = taps(x0, crop_w, raw.box.center_x, W);

  FrameTensor out;
  for (int oy = 0; oy < kFrameH; ++oy) {
    const double py = y0 + (oy + 0.5) * crop_h / kFrameH;  // continuous position
    if (py < 0 || py >= H) continue;
    const double u = std::clamp(py - 0.5, ylo, yhi);
    const int i0 = static_cast<int>(std::floor(u));
    const int i1 = std::min(i0 + 1, H - 1);
    const double fy = u - i0;
    for (int ox = 0; ox < kFrameW; ++ox) {
      const double px = x0 + (ox + 0.5) * crop_w / kFrameW;
      if (px < 0 || px >= W) continue;
      const double v = std::clamp(px - 0.5, xlo, xhi);
      const int j0 = static_cast<int>(std::floor(v));
      const int j1 = std::min(j0 + 1, W - 1);
      const double fx = v - j0;
      for (int ch = 0; ch < kFrameC; ++ch) {
        const double top = (1 - fx) * detail::masked_pixel(raw, i0, j0, ch) + fx * detail::masked_pixel(raw, i0, j1, ch);
        const double bot = (1 - fx) * detail::masked_pixel(raw, i1, j0, ch) + fx * detail::masked_pixel(raw, i1, j1, ch);
        out.at(oy, ox, ch) = static_cast<float>(std::clamp((1 - fy) * top + fy * bot, 0.0, 1.0));
      }
    }
  }
  return out;
}

/// Box from the mask: bounding extent of pixels with probability >= 0.5.
inline Box box_from_mask(std::span<const float> mask, int width, int height) {
  int top = height, bottom = -1, left = width, right = -1;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (mask[static_cast<std::size_t>(y) * width + x] >= 0.5f) {
        top = std::min(top, y);
        bottom = std::max(bottom, y);
        left = std::min(left, x);
        right = std::max(right, x);
      }
  if (bottom < 0) throw InvalidBox("mask has no foreground pixel");
  return Box{(left + right + 1) / 2.0, (top + bottom + 1) / 2.0, static_cast<double>(bottom - top + 1)};
}

// ---------------------------------------------------------------------------
// Manifest

inline Manifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_array()) throw IngestionError("manifest must be a JSON list");
  Manifest m;
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  auto label = [](const nlohmann::json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  for (const auto& e : j) {
    for (const char* key : {"source_id", "frames_dir", "masks_dir", "subject", "condition", "view"})
      if (!e.contains(key)) throw IngestionError(std::string("manifest entry missing key '") + key + "'");
    ManifestEntry entry;
    entry.source_id = e.at("source_id").get<std::string>();
    entry.frames_dir = resolve(e.at("frames_dir").get<std::string>());
    entry.masks_dir = resolve(e.at("masks_dir").get<std::string>());
    entry.subject = label(e.at("subject"));
    entry.condition = label(e.at("condition"));
    entry.view = e.at("view").get<double>();
    entry.video_index = e.value("video_index", 0);
    if (e.contains("boxes")) entry.boxes = resolve(e.at("boxes").get<std::string>());
    m.entries.push_back(std::move(entry));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_manifest(j, path.parent_path());
}

struct IngestIssue {
  std::string source_id;
  std::string message;
};

struct IngestResult {
  std::vector<Clip> clips;
  std::vector<IngestIssue> issues;
};

namespace detail {

inline std::vector<std::filesystem::path> sorted_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IngestionError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

inline Clip ingest_entry(const ManifestEntry& entry) {
  const auto frames = sorted_pngs(entry.frames_dir);
  if (frames.empty()) throw IngestionError("no frames in " + entry.frames_dir.string());
  std::vector<Box> boxes;
  if (!entry.boxes.empty()) {
    const auto j = nlohmann::json::parse(read_file_bytes(entry.boxes));
    for (const auto& b : j) boxes.push_back(Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>()});
    if (boxes.size() != frames.size()) throw IngestionError("box count differs from frame count");
  }
  Clip clip;
  clip.source_id = entry.source_id;
  clip.subject_id = entry.subject;
  clip.condition_id = entry.condition;
  clip.view_deg = entry.view;
  clip.video_index = entry.video_index;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    RawFrame raw;
    raw.rgb = read_png(frames[t], 3);
    const auto mask_path = entry.masks_dir / frames[t].filename();
    const Image8 mask = read_png(mask_path, 1);
    if (mask.width != raw.rgb.width || mask.height != raw.rgb.height)
      throw IngestionError("mask and rgb dimensions differ for " + frames[t].filename().string());
    raw.mask.resize(mask.pixels.size());
    std::transform(mask.pixels.begin(), mask.pixels.end(), raw.mask.begin(),
                   [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
    raw.box = boxes.empty() ? box_from_mask(raw.mask, mask.width, mask.height) : boxes[t];
    clip.frames.push_back(preprocess_frame(raw));
  }
  return clip;
}

}  // namespace detail

/// One clip per manifest entry, in manifest order. Unreadable entries are
/// reported in `issues` and skipped. Duplicate source ids are a hard error.
/// With threads > 1 entries are processed concurrently; the result does not
/// depend on the thread count.
inline IngestResult ingest(const Manifest& manifest, int threads = 1) {
  std::set<std::string> seen;
  for (const auto& e : manifest.entries)
    if (!seen.insert(e.source_id).second) throw IngestionError("duplicate source_id '" + e.source_id + "'");

  const std::size_t n = manifest.entries.size();
  std::vector<std::optional<Clip>> slots(n);
  std::vector<std::string> errors(n);
  auto work = [&](std::size_t i) {
    try {
      slots[i] = detail::ingest_entry(manifest.entries[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::future<void>> jobs;
    std::atomic<std::size_t> next{0};
    for (int t = 0; t < threads; ++t)
      jobs.push_back(std::async(std::launch::async, [&] {
        for (std::size_t i = next++; i < n; i = next++) work(i);
      }));
    for (auto& j : jobs) j.get();
  }

  IngestResult result;
  for (std::size_t i = 0; i < n; ++i) {
    if (slots[i])
      result.clips.push_back(std::move(*slots[i]));
    else
      result.issues.push_back({manifest.entries[i].source_id, errors[i]});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Clip archive: <dir>/<file>.clip per clip plus <dir>/index.json.

inline constexpr int kClipSchema = 1;
inline constexpr int kArchiveIndexSchema = 1;

inline std::string clip_file_name(const std::string& source_id) {
  std::string safe = source_id;
  for (char& ch : safe)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  if (safe != source_id || safe.empty() || safe[0] == '.') safe += "-" + hex64(fnv1a64(source_id)).substr(0, 8);
  return safe + ".clip";
}

inline nlohmann::json clip_labels(const Clip& c) {
  return {{"source_id", c.source_id},  {"subject", c.subject_id},       {"condition", c.condition_id},
          {"view", c.view_deg},        {"video_index", c.video_index}, {"n_frames", c.frames.size()}};
}

inline std::string encode_clip(const Clip& clip) {
  if (clip.frames.empty()) throw InvalidInput("clip '" + clip.source_id + "' has no frames");
  nlohmann::json header = clip_labels(clip);
  header["kind"] = "clip";
  header["schema"] = kClipSchema;
  header["frame_shape"] = {kFrameH, kFrameW, kFrameC};
  std::vector<float> payload;
  payload.reserve(clip.frames.size() * kFrameSize);
  for (const auto& f : clip.frames) payload.insert(payload.end(), f.values().begin(), f.values().end());
  return encode_container(std::move(header), payload);
}

inline Clip decode_clip(std::string_view bytes) {
  const FloatContainer c = decode_container(bytes, "clip", kClipSchema);
  const auto& h = c.header;
  Clip clip;
  try {
    clip.source_id = h.at("source_id").get<std::string>();
    clip.subject_id = h.at("subject").get<std::string>();
    clip.condition_id = h.at("condition").get<std::string>();
    clip.view_deg = h.at("view").get<double>();
    clip.video_index = h.at("video_index").get<int>();
    const auto n = h.at("n_frames").get<std::size_t>();
    if (h.at("frame_shape") != nlohmann::json{kFrameH, kFrameW, kFrameC}) throw ShapeError("clip frame shape");
    if (c.payload.size() != n * kFrameSize) throw CorruptionError("clip payload does not match n_frames");
    for (std::size_t t = 0; t < n; ++t)
      clip.frames.emplace_back(std::vector<float>(c.payload.begin() + t * kFrameSize,
                                                  c.payload.begin() + (t + 1) * kFrameSize));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("clip header: ") + e.what());
  }
  return clip;
}

inline void persist(std::span<const Clip> clips, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = {{"kind", "clip_archive"}, {"schema", kArchiveIndexSchema}, {"clips", nlohmann::json::array()}};
  std::set<std::string> seen;
  for (const auto& clip : clips) {
    if (!seen.insert(clip.source_id).second) throw IngestionError("duplicate source_id '" + clip.source_id + "'");
    const std::string file = clip_file_name(clip.source_id);
    write_file_bytes(dir / file, encode_clip(clip));
    nlohmann::json rec = clip_labels(clip);
    rec["file"] = file;
    index["clips"].push_back(std::move(rec));
  }
  write_file_bytes(dir / "index.json", index.dump(2));
}

inline nlohmann::json load_archive_index(const std::filesystem::path& dir) {
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(read_file_bytes(dir / "index.json"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("archive index unreadable: " + std::string(e.what()));
  }
  if (index.value("kind", "") != "clip_archive") throw VersionError("not a clip archive index");
  if (index.value("schema", -1) != kArchiveIndexSchema)
    throw VersionError("archive index schema " + std::to_string(index.value("schema", -1)) + ", expected " +
                       std::to_string(kArchiveIndexSchema));
  return index;
}

/// Loads every clip of an archive in index order. Any damaged file fails the
/// whole load.
inline std::vector<Clip> load(const std::filesystem::path& dir) {
  const auto index = load_archive_index(dir);
  std::vector<Clip> clips;
  for (const auto& rec : index.at("clips")) {
    Clip clip = decode_clip(read_file_bytes(dir / rec.at("file").get<std::string>()));
    if (clip.source_id != rec.at("source_id").get<std::string>())
      throw CorruptionError("index entry does not match clip file " + rec.at("file").get<std::string>());
    clips.push_back(std::move(clip));
  }
  return clips;
}

}  // namespace gaitdis
