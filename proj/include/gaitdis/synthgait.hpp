#pragma once

// Procedural walking figures with known identity / appearance / gait factors.
//
// The figure is a 2-D rig with eight joints (neck, hip, two knees, two feet,
// two hands) plus a head disc. Limbs are filled capsules. Joint angles follow
// sinusoids of the gait phase. Rendering happens at 4x resolution and is
// box-filtered down to 64x32, so every covered output pixel is strictly
// positive in all channels.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gaitdis/clip_store.hpp"
#include "gaitdis/core/error.hpp"
#include "gaitdis/core/linalg.hpp"

namespace gaitdis {

struct IdentityFactors {
  double limb_length_ratio = 0.5;  // hip-to-foot length / body height
  double torso_width = 0.18;       // torso thickness / body height
  double height_ratio = 0.8;       // body height / frame height
};

struct AppearanceFactors {
  double hue = 0.0;  // [0, 1)
  int texture_id = 0;  // 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 checker
  double brightness = 0.8;  // (0, 1]
};

struct GaitFactors {
  double phase_offset = 0.0;  // [0, 2*pi)
  double cadence = 0.06;      // gait cycles per frame
  double amplitude = 0.45;    // hip swing, radians
};

struct FactorSpec {
  IdentityFactors identity;
  AppearanceFactors appearance;
  GaitFactors gait;
  double view_deg = 90.0;  // 90 = side view, 0 = walking toward the camera
  double speed = 0.0;      // relative scale growth over the clip when approaching
  int n_frames = 40;
};

inline constexpr int kMinSynthFrames = 20;

struct LabeledClip {
  Clip clip;
  FactorSpec factors;
  std::vector<double> per_frame_phase;
};

inline void validate(const FactorSpec& s) {
  const auto& id = s.identity;
  if (!(id.limb_length_ratio > 0) || !(id.torso_width > 0) || !(id.height_ratio > 0))
    throw InvalidInput("synthgait: degenerate geometry (non-positive limb, torso or height)");
  if (id.limb_length_ratio >= 0.8) throw InvalidInput("synthgait: limb_length_ratio leaves no torso");
  if (id.height_ratio > 0.97) throw InvalidInput("synthgait: height_ratio does not fit the frame");
  if (!(s.gait.cadence > 0)) throw InvalidInput("synthgait: cadence must be positive");
  if (s.gait.amplitude < 0) throw InvalidInput("synthgait: amplitude must be non-negative");
  if (s.n_frames < kMinSynthFrames) throw InvalidInput("synthgait: n_frames must be at least 20");
  if (s.appearance.texture_id < 0 || s.appearance.texture_id > 3) throw InvalidInput("synthgait: texture_id in 0..3");
  if (!(s.appearance.brightness > 0) || s.appearance.brightness > 1)
    throw InvalidInput("synthgait: brightness in (0, 1]");
  if (s.speed < 0) throw InvalidInput("synthgait: speed must be non-negative");
}

inline double gait_phase(const GaitFactors& g, int t) {
  const double two_pi = 2 * std::numbers::pi;
  double p = std::fmod(g.phase_offset + two_pi * g.cadence * t, two_pi);
  return p < 0 ? p + two_pi : p;
}

namespace detail {

inline constexpr int kSuper = 4;
inline constexpr int kHiH = kFrameH * kSuper;
inline constexpr int kHiW = kFrameW * kSuper;

struct Pt {
  double x, y;
};

struct Capsule {
  Pt a, b;
  double radius;
  int material;  // 0 upper garment, 1 lower garment, 2 skin
};

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline double seg_dist2(Pt p, Pt a, Pt b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double u = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  u = std::clamp(u, 0.0, 1.0);
  const double ex = a.x + u * dx - p.x, ey = a.y + u * dy - p.y;
  return ex * ex + ey * ey;
}

/// Shapes in draw order (back to front), in high-resolution pixel units.
inline std::vector<Capsule> pose_figure(const FactorSpec& s, double phase, double scale) {
  const auto& id = s.identity;
  const double amp = s.gait.amplitude;
  const double view = s.view_deg * std::numbers::pi / 180.0;
  const double sag = std::sin(view), lat = std::cos(view);

  const double body = id.height_ratio * kHiH * scale;  // body height in hi-res pixels
  const double base_y = kHiH - 2.0 * kSuper;           // feet line
  const double cx = kHiW / 2.0;
  auto at = [&](double lateral, double sagittal, double vertical) {
    return Pt{cx + body * (lateral * lat + sagittal * sag), base_y + body * vertical};
  };

  const double leg = id.limb_length_ratio;
  const double bob = 0.02 * amp * std::cos(2 * phase);
  const double hip_v = -leg + bob;
  const double neck_v = -0.86 + bob;
  const double arm = 0.7 * leg;
  const double leg_r = 0.035, arm_r = 0.026;
  const double torso_r = id.torso_width / 2.0;

  auto leg_shapes = [&](double side, double ph, std::vector<Capsule>& out) {
    const double hip_a = amp * std::sin(ph);
    const double knee_flex = 1.2 * amp * std::max(0.0, std::sin(ph + std::numbers::pi / 2));
    const double lat_off = side * 0.05;
    const Pt hip = at(lat_off, 0, hip_v);
    const Pt knee = at(lat_off, 0.5 * leg * std::sin(hip_a), hip_v + 0.5 * leg * std::cos(hip_a));
    const double shin_a = hip_a - knee_flex;
    const Pt foot = at(lat_off, 0.5 * leg * (std::sin(hip_a) + std::sin(shin_a)),
                       hip_v + 0.5 * leg * (std::cos(hip_a) + std::cos(shin_a)));
    out.push_back({hip, knee, leg_r * body, 1});
    out.push_back({knee, foot, leg_r * body, 1});
  };
  auto arm_shape = [&](double side, double ph, std::vector<Capsule>& out) {
    const double a = -0.8 * amp * std::sin(ph);
    const double lat_off = side * (torso_r + 0.03);
    out.push_back({at(lat_off, 0, neck_v), at(lat_off, arm * std::sin(a), neck_v + arm * std::cos(a)), arm_r * body, 0});
  };

  std::vector<Capsule> shapes;
  arm_shape(+1, phase + std::numbers::pi, shapes);
  leg_shapes(+1, phase + std::numbers::pi, shapes);
  shapes.push_back({at(0, 0, hip_v), at(0, 0, neck_v), torso_r * body, 0});
  const Pt head = at(0, 0, neck_v - 0.07);
  shapes.push_back({head, head, 0.07 * body, 2});
  leg_shapes(-1, phase, shapes);
  arm_shape(-1, phase, shapes);
  return shapes;
}

struct Palette {
  std::array<std::array<double, 3>, 3> base;  // upper, lower, skin
  int texture = 0;
  int period = 8;  // stripe period in hi-res pixels
  int offset = 0;
};

inline Palette make_palette(const AppearanceFactors& a, std::uint64_t seed) {
  Palette p;
  p.base[0] = hsv_to_rgb(a.hue, 0.7, a.brightness);
  p.base[1] = hsv_to_rgb(a.hue + 0.5, 0.6, 0.8 * a.brightness);
  p.base[2] = {0.92, 0.76, 0.62};
  p.texture = a.texture_id;
  p.period = 6 + static_cast<int>(seed % 3) * 2;
  p.offset = static_cast<int>((seed / 3) % 16);
  return p;
}

inline double texture_gain(const Palette& p, int material, int y, int x) {
  if (material == 2 || p.texture == 0) return 1.0;
  const bool sy = ((y + p.offset) / p.period) % 2 == 1;
  const bool sx = ((x + p.offset) / p.period) % 2 == 1;
  const bool dark = p.texture == 1 ? sy : p.texture == 2 ? sx : (sx != sy);
  return dark ? 0.6 : 1.0;
}

inline FrameTensor render(const std::vector<Capsule>& shapes, const Palette& pal) {
  // Material index per hi-res pixel, -1 = background.
  std::vector<int> mat(static_cast<std::size_t>(kHiH) * kHiW, -1);
  for (const auto& c : shapes) {
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(c.a.x, c.b.x) - c.radius)));
    const int x1 = std::min(kHiW - 1, static_cast<int>(std::ceil(std::max(c.a.x, c.b.x) + c.radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(c.a.y, c.b.y) - c.radius)));
    const int y1 = std::min(kHiH - 1, static_cast<int>(std::ceil(std::max(c.a.y, c.b.y) + c.radius)));
    const double r2 = c.radius * c.radius;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (seg_dist2({x + 0.5, y + 0.5}, c.a, c.b) <= r2) mat[static_cast<std::size_t>(y) * kHiW + x] = c.material;
  }
  FrameTensor f;
  constexpr double inv = 1.0 / (kSuper * kSuper);
  for (int oy = 0; oy < kFrameH; ++oy)
    for (int ox = 0; ox < kFrameW; ++ox) {
      std::array<double, 3> acc{0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const int y = oy * kSuper + sy, x = ox * kSuper + sx;
          const int m = mat[static_cast<std::size_t>(y) * kHiW + x];
          if (m < 0) continue;
          const double g = texture_gain(pal, m, y, x);
          for (int ch = 0; ch < 3; ++ch) acc[ch] += pal.base[m][ch] * g;
        }
      for (int ch = 0; ch < 3; ++ch) f.at(oy, ox, ch) = static_cast<float>(std::min(1.0, acc[ch] * inv));
    }
  return f;
}

}  // namespace detail

/// Renders one clip. Pure function of (spec, seed): the seed only picks the
/// garment texture period and offset.
inline LabeledClip generate(const FactorSpec& spec, std::uint64_t seed) {
  validate(spec);
  LabeledClip out;
  out.factors = spec;
  const auto pal = detail::make_palette(spec.appearance, seed);
  const double approach = std::abs(std::cos(spec.view_deg * std::numbers::pi / 180.0)) * spec.speed;
  for (int t = 0; t < spec.n_frames; ++t) {
    const double phase = gait_phase(spec.gait, t);
    // Approaching figures grow linearly and reach their nominal size at the last frame.
    const double scale = (1.0 + approach * t / std::max(1, spec.n_frames - 1)) / (1.0 + approach);
    out.per_frame_phase.push_back(phase);
    out.clip.frames.push_back(detail::render(detail::pose_figure(spec, phase, scale), pal));
  }
  out.clip.view_deg = spec.view_deg;
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetOptions {
  int n_frames = 40;
  std::vector<double> views{90.0};
  int first_subject = 1;
  /// Levels per identity axis; the grid holds levels^3 distinct subjects.
  int identity_levels = 4;
};

struct SynthDataset {
  std::vector<LabeledClip> clips;
  Manifest manifest;  // filled by write_dataset when media are written
  double min_identity_separation = 0;
};

/// Identity factors of grid cell (i, j, k) at normalized coordinates, plus
/// the physical ranges they map to.
struct IdentityGrid {
  int levels = 4;
  static constexpr std::array<double, 2> limb{0.42, 0.57};
  static constexpr std::array<double, 2> torso{0.12, 0.27};
  static constexpr std::array<double, 2> height{0.60, 0.93};
  static constexpr double kJitter = 0.15;  // in level units

  std::size_t capacity() const { return static_cast<std::size_t>(levels) * levels * levels; }
  /// Every pair of distinct cells is at least this far apart in level units.
  double min_separation() const { return 1.0 - 2 * kJitter; }

  static double map(std::array<double, 2> range, double u, int levels) {
    return range[0] + (range[1] - range[0]) * u / std::max(1, levels - 1);
  }
  IdentityFactors factors(std::array<double, 3> u) const {
    return {map(limb, u[0], levels), map(torso, u[1], levels), map(height, u[2], levels)};
  }
  /// Normalized (level-unit) coordinates of an identity.
  std::array<double, 3> coords(const IdentityFactors& f) const {
    auto inv = [&](std::array<double, 2> r, double v) { return (v - r[0]) / (r[1] - r[0]) * std::max(1, levels - 1); };
    return {inv(limb, f.limb_length_ratio), inv(torso, f.torso_width), inv(height, f.height_ratio)};
  }
};

inline std::string synth_source_id(int subject, int condition, int clip) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "s%03d_c%d_v%d", subject, condition, clip);
  return buf;
}

/// Subjects draw distinct identity-grid cells (jittered) and their own
/// cadence/amplitude; every condition redraws appearance; every clip draws its
/// own starting phase. Clip seeds are seed ^ clip_index.
inline SynthDataset make_dataset(int n_subjects, int conditions_per_subject, int clips_per_condition,
                                 std::uint64_t seed, const DatasetOptions& opt = {}) {
  if (n_subjects < 1 || conditions_per_subject < 1 || clips_per_condition < 1)
    throw InvalidInput("make_dataset: all counts must be at least 1");
  if (opt.views.empty()) throw InvalidInput("make_dataset: no views");
  IdentityGrid grid{opt.identity_levels};
  if (static_cast<std::size_t>(n_subjects) > grid.capacity())
    throw CapacityError("make_dataset: " + std::to_string(n_subjects) + " subjects exceed the " +
                        std::to_string(grid.capacity()) + "-cell identity grid");

  Rng rng(seed);
  std::vector<int> cells(grid.capacity());
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  std::shuffle(cells.begin(), cells.end(), rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-IdentityGrid::kJitter, IdentityGrid::kJitter);

  SynthDataset ds;
  ds.min_identity_separation = grid.min_separation();
  std::uint64_t clip_index = 0;
  for (int s = 0; s < n_subjects; ++s) {
    const int cell = cells[s];
    const int L = grid.levels;
    const std::array<double, 3> u{cell % L + jitter(rng), (cell / L) % L + jitter(rng), cell / (L * L) + jitter(rng)};
    const IdentityFactors identity = grid.factors(u);
    GaitFactors gait;
    gait.cadence = 0.045 + 0.04 * unit(rng);
    gait.amplitude = 0.3 + 0.3 * unit(rng);
    for (int c = 0; c < conditions_per_subject; ++c) {
      AppearanceFactors look;
      look.hue = unit(rng);
      look.texture_id = static_cast<int>(unit(rng) * 4) % 4;
      look.brightness = 0.5 + 0.5 * unit(rng);
      for (int k = 0; k < clips_per_condition; ++k) {
        FactorSpec spec;
        spec.identity = identity;
        spec.appearance = look;
        spec.gait = gait;
        spec.gait.phase_offset = 2 * std::numbers::pi * unit(rng);
        spec.view_deg = opt.views[(c * clips_per_condition + k) % opt.views.size()];
        spec.speed = std::abs(std::cos(spec.view_deg * std::numbers::pi / 180.0)) > 1e-9 ? 0.3 : 0.0;
        spec.n_frames = opt.n_frames;
        LabeledClip lc = generate(spec, seed ^ clip_index++);
        const int subject_label = opt.first_subject + s;
        lc.clip.subject_id = std::to_string(subject_label);
        lc.clip.condition_id = "c" + std::to_string(c);
        lc.clip.video_index = k + 1;
        lc.clip.source_id = synth_source_id(subject_label, c, k + 1);
        ds.clips.push_back(std::move(lc));
      }
    }
  }
  return ds;
}

inline nlohmann::json factors_json(const LabeledClip& c) {
  const auto& f = c.factors;
  return {{"source_id", c.clip.source_id},
          {"subject", c.clip.subject_id},
          {"condition", c.clip.condition_id},
          {"identity",
           {{"limb_length_ratio", f.identity.limb_length_ratio},
            {"torso_width", f.identity.torso_width},
            {"height_ratio", f.identity.height_ratio}}},
          {"appearance",
           {{"hue", f.appearance.hue}, {"texture_id", f.appearance.texture_id}, {"brightness", f.appearance.brightness}}},
          {"gait",
           {{"phase_offset", f.gait.phase_offset}, {"cadence", f.gait.cadence}, {"amplitude", f.gait.amplitude}}},
          {"view_deg", f.view_deg},
          {"speed", f.speed},
          {"n_frames", f.n_frames},
          {"per_frame_phase", c.per_frame_phase}};
}

/// Writes <dir>/archive (clip archive), <dir>/factors.json and
/// <dir>/manifest.json. The manifest points at 8-bit PNG frames and masks
/// under <dir>/media, so it can be re-ingested.
inline void write_dataset(SynthDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<Clip> clips;
  nlohmann::json factors = {{"min_identity_separation", ds.min_identity_separation}, {"clips", nlohmann::json::array()}};
  nlohmann::json manifest = nlohmann::json::array();
  ds.manifest.entries.clear();
  for (const auto& lc : ds.clips) {
    clips.push_back(lc.clip);
    factors["clips"].push_back(factors_json(lc));
    const fs::path frames_dir = fs::path("media") / lc.clip.source_id / "frames";
    const fs::path masks_dir = fs::path("media") / lc.clip.source_id / "masks";
    fs::create_directories(dir / frames_dir);
    fs::create_directories(dir / masks_dir);
    nlohmann::json boxes = nlohmann::json::array();
    for (std::size_t t = 0; t < lc.clip.frames.size(); ++t) {
      const auto& fr = lc.clip.frames[t];
      Image8 rgb{kFrameW, kFrameH, 3, std::vector<std::uint8_t>(kFrameSize)};
      Image8 mask{kFrameW, kFrameH, 1, std::vector<std::uint8_t>(kFrameH * kFrameW)};
      for (int y = 0; y < kFrameH; ++y)
        for (int x = 0; x < kFrameW; ++x) {
          bool on = false;
          for (int ch = 0; ch < 3; ++ch) {
            const float v = fr.at(y, x, ch);
            rgb.at(y, x, ch) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            on = on || v > 0;
          }
          mask.at(y, x, 0) = on ? 255 : 0;
        }
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.png", t);
      write_png(dir / frames_dir / name, rgb);
      write_png(dir / masks_dir / name, mask);
      boxes.push_back({kFrameW / 2.0, kFrameH / 2.0, static_cast<double>(kFrameH)});
    }
    const fs::path boxes_path = fs::path("media") / lc.clip.source_id / "boxes.json";
    write_file_bytes(dir / boxes_path, boxes.dump());
    manifest.push_back({{"source_id", lc.clip.source_id},
                        {"frames_dir", frames_dir.string()},
                        {"masks_dir", masks_dir.string()},
                        {"subject", lc.clip.subject_id},
                        {"condition", lc.clip.condition_id},
                        {"view", lc.clip.view_deg},
                        {"video_index", lc.clip.video_index},
                        {"boxes", boxes_path.string()}});
  }
  persist(clips, dir / "archive");
  write_file_bytes(dir / "factors.json", factors.dump(2));
  write_file_bytes(dir / "manifest.json", manifest.dump(2));
  ds.manifest = parse_manifest(manifest, dir);
}

}  // namespace gaitdis
