#pragma once

// Run configuration, report layout and the end-to-end commands the CLI
// exposes. Every command reads a RunConfig plus a small JSON argument object,
// so a run can be replayed from its run.json alone.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gaitdis/clip_store.hpp"
#include "gaitdis/core/container.hpp"
#include "gaitdis/core/image_io.hpp"
#include "gaitdis/engine.hpp"
#include "gaitdis/evalkit.hpp"
#include "gaitdis/nets.hpp"
#include "gaitdis/synthgait.hpp"

#ifndef GAITDIS_VERSION
#define GAITDIS_VERSION "0.0.0"
#endif

namespace gaitdis {

inline constexpr const char* kVersion = GAITDIS_VERSION;
inline constexpr const char* kReportDirEnv = "GAITDIS_REPORT_DIR";

/// Config errors carrying one message per violated field.
class ConfigViolations : public ConfigError {
 public:
  explicit ConfigViolations(std::vector<std::string> fields)
      : ConfigError("invalid run config: " + join_lines(fields)), fields_(std::move(fields)) {}
  const std::vector<std::string>& fields() const { return fields_; }

 private:
  std::vector<std::string> fields_;
};

struct RunPaths {
  std::string dataset = "data";
  std::string archive = "data/archive";
  std::string checkpoints = "checkpoints";
  std::string reports = "reports";
};

struct SynthSettings {
  int subjects = 24;
  int conditions = 2;
  int clips = 2;
  int frames = 40;
  std::vector<double> views{90.0};
};

struct RunConfig {
  RunPaths paths;
  TrainConfig train;
  SynthSettings synth;
  std::string protocol;         // path to a protocol JSON file
  std::optional<double> alpha;  // unset: the protocol's, else 0.5
  std::uint64_t seed = 0;       // generation and training
  int threads = 1;
  bool deterministic = false;
};

inline std::vector<std::string> violations(const RunConfig& c) {
  std::vector<std::string> v;
  if (c.alpha && !(*c.alpha >= 0 && *c.alpha <= 1)) v.push_back("alpha: must lie in [0, 1]");
  if (c.threads < 1) v.push_back("threads: must be at least 1");
  const std::vector<std::pair<const char*, std::string>> paths = {{"paths.dataset", c.paths.dataset},
                                                                   {"paths.archive", c.paths.archive},
                                                                   {"paths.checkpoints", c.paths.checkpoints},
                                                                   {"paths.reports", c.paths.reports}};
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (paths[i].second.empty()) v.push_back(std::string(paths[i].first) + ": must not be empty");
    for (std::size_t k = 0; k < i; ++k)
      if (!paths[i].second.empty() && std::filesystem::path(paths[i].second).lexically_normal() ==
                                          std::filesystem::path(paths[k].second).lexically_normal())
        v.push_back(std::string(paths[i].first) + ": same as " + paths[k].first);
  }
  if (c.synth.subjects < 1) v.push_back("synth.subjects: must be at least 1");
  if (c.synth.conditions < 1) v.push_back("synth.conditions: must be at least 1");
  if (c.synth.clips < 1) v.push_back("synth.clips: must be at least 1");
  if (c.synth.frames < kMinSynthFrames) v.push_back("synth.frames: must be at least " + std::to_string(kMinSynthFrames));
  if (c.synth.views.empty()) v.push_back("synth.views: must not be empty");
  for (auto& e : violations(c.train)) v.push_back("train." + e);
  return v;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json train = to_json(c.train);
  train.erase("seed");  // the run seed drives training
  return {{"paths",
           {{"dataset", c.paths.dataset},
            {"archive", c.paths.archive},
            {"checkpoints", c.paths.checkpoints},
            {"reports", c.paths.reports}}},
          {"train", train},
          {"synth",
           {{"subjects", c.synth.subjects},
            {"conditions", c.synth.conditions},
            {"clips", c.synth.clips},
            {"frames", c.synth.frames},
            {"views", c.synth.views}}},
          {"protocol", c.protocol},
          {"alpha", c.alpha ? nlohmann::json(*c.alpha) : nlohmann::json(nullptr)},
          {"seed", c.seed},
          {"threads", c.threads},
          {"deterministic", c.deterministic}};
}

/// Reads the fields present in `j` over `base`; every problem is collected
/// before anything is thrown.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  std::vector<std::string> errs;
  if (!j.is_object()) throw ConfigViolations({"config: must be a JSON object"});
  auto get = [&](const nlohmann::json& obj, const std::string& pre, const char* key, auto& dst) {
    if (!obj.contains(key)) return;
    try {
      obj.at(key).get_to(dst);
    } catch (const nlohmann::json::exception&) {
      errs.push_back(pre + key + ": wrong type (" + std::string(obj.at(key).type_name()) + ")");
    }
  };
  auto section = [&](const char* name, const std::set<std::string>& known) -> const nlohmann::json* {
    if (!j.contains(name)) return nullptr;
    const auto& s = j.at(name);
    if (!s.is_object()) {
      errs.push_back(std::string(name) + ": must be an object");
      return nullptr;
    }
    for (auto it = s.begin(); it != s.end(); ++it)
      if (!known.count(it.key())) errs.push_back(std::string(name) + "." + it.key() + ": unknown field");
    return &s;
  };
  static const std::set<std::string> known = {"paths", "train", "synth", "protocol", "alpha",
                                              "seed", "threads", "deterministic"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) errs.push_back(it.key() + ": unknown field");

  if (auto* p = section("paths", {"dataset", "archive", "checkpoints", "reports"})) {
    get(*p, "paths.", "dataset", base.paths.dataset);
    get(*p, "paths.", "archive", base.paths.archive);
    get(*p, "paths.", "checkpoints", base.paths.checkpoints);
    get(*p, "paths.", "reports", base.paths.reports);
  }
  if (auto* s = section("synth", {"subjects", "conditions", "clips", "frames", "views"})) {
    get(*s, "synth.", "subjects", base.synth.subjects);
    get(*s, "synth.", "conditions", base.synth.conditions);
    get(*s, "synth.", "clips", base.synth.clips);
    get(*s, "synth.", "frames", base.synth.frames);
    get(*s, "synth.", "views", base.synth.views);
  }
  if (j.contains("train")) {
    nlohmann::json t = j.at("train");
    if (t.is_object() && t.contains("seed")) {
      errs.push_back("train.seed: set the top-level seed instead");
      t.erase("seed");
    }
    base.train = parse_train_config(t, base.train, errs, "train.");
  }
  get(j, "", "protocol", base.protocol);
  if (j.contains("alpha") && !j.at("alpha").is_null()) {
    double a = 0;
    get(j, "", "alpha", a);
    base.alpha = a;
  }
  get(j, "", "seed", base.seed);
  get(j, "", "threads", base.threads);
  get(j, "", "deterministic", base.deterministic);
  for (auto& e : violations(base))
    if (std::find(errs.begin(), errs.end(), e) == errs.end()) errs.push_back(e);
  if (!errs.empty()) throw ConfigViolations(errs);
  base.train.seed = base.seed;
  return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigViolations({path.string() + ": " + e.what()});
  }
  return run_config_from_json(j);
}

/// FNV-1a over the canonical JSON form of the resolved config.
inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

/// Flag, then the environment variable, then the config.
inline std::filesystem::path resolve_report_dir(const std::optional<std::string>& flag, const RunConfig& c) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv(kReportDirEnv); env && *env) return env;
  return c.paths.reports;
}

inline int worker_count(const RunConfig& c) { return c.deterministic ? 1 : c.threads; }

/// Effective fusion weight: the run's, else the protocol's, else 0.5.
inline double effective_alpha(const RunConfig& c, const ProtocolSpec& p) {
  if (c.alpha) return *c.alpha;
  if (p.alpha) return *p.alpha;
  return 0.5;
}

// ---------------------------------------------------------------------------
// Report directory

class Report {
 public:
  explicit Report(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  void text(const std::string& name, const std::string& body) const { write_file_bytes(path(name), body); }
  void json(const std::string& name, const nlohmann::json& j) const { text(name, j.dump(2) + "\n"); }

 private:
  std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Shared steps

inline std::filesystem::path checkpoint_path(const RunConfig& c) {
  return std::filesystem::path(c.paths.checkpoints) / "model.ckpt";
}

inline LoadedCheckpoint<float> load_model(const RunConfig& c) {
  const NetConfig expected = c.train.net_config();
  return load_checkpoint<float>(checkpoint_path(c), &expected);
}

inline ProtocolSpec require_protocol(const RunConfig& c) {
  if (c.protocol.empty()) throw ConfigViolations({"protocol: required by this command"});
  return load_protocol(c.protocol);
}

template <typename Labeled>
std::vector<Labeled> only_subjects(std::span<const Labeled> items, const SubjectSet& s) {
  std::vector<Labeled> out;
  for (const auto& it : items)
    if (s.contains(it.subject_id)) out.push_back(it);
  return out;
}

/// Gallery and probe clips of the protocol's test split.
struct EvalClips {
  std::vector<Clip> gallery, probe;
};

inline EvalClips eval_clips(const ProtocolSpec& p, const std::vector<Clip>& clips) {
  const ProtocolSplit s = split<Clip>(p, clips);
  return {pick<Clip>(clips, s.gallery), pick<Clip>(clips, s.probe)};
}

struct EvalRecords {
  std::vector<SignatureRecord> gallery, probe;
};

/// Signatures from a file when `signatures` is set, otherwise extracted from
/// the archive with the trained model.
inline EvalRecords eval_records(const RunConfig& c, const ProtocolSpec& p, const std::string& signatures) {
  std::vector<SignatureRecord> recs;
  if (!signatures.empty()) {
    recs = decode_signatures(read_file_bytes(signatures));
  } else {
    const auto clips = load(c.paths.archive);
    const auto model = load_model(c);
    const ProtocolSplit s = split<Clip>(p, clips);
    std::vector<int> idx = s.gallery;
    idx.insert(idx.end(), s.probe.begin(), s.probe.end());
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    const auto used = pick<Clip>(clips, idx);
    recs = extract_all<float>(used, model.net, worker_count(c));
  }
  const ProtocolSplit s = split<SignatureRecord>(p, recs);
  return {pick<SignatureRecord>(recs, s.gallery), pick<SignatureRecord>(recs, s.probe)};
}

// ---------------------------------------------------------------------------
// Commands

inline nlohmann::json cmd_synth(const RunConfig& c, const Report& report) {
  DatasetOptions opt;
  opt.n_frames = c.synth.frames;
  opt.views = c.synth.views;
  SynthDataset ds = make_dataset(c.synth.subjects, c.synth.conditions, c.synth.clips, c.seed, opt);
  write_dataset(ds, c.paths.dataset);
  const auto default_archive = std::filesystem::path(c.paths.dataset) / "archive";
  if (std::filesystem::path(c.paths.archive).lexically_normal() != default_archive.lexically_normal()) {
    std::vector<Clip> clips;
    for (const auto& lc : ds.clips) clips.push_back(lc.clip);
    persist(clips, c.paths.archive);
  }
  nlohmann::json j = {{"clips", ds.clips.size()},
                      {"subjects", c.synth.subjects},
                      {"min_identity_separation", ds.min_identity_separation},
                      {"dataset", c.paths.dataset},
                      {"archive", c.paths.archive}};
  report.json("synth.json", j);
  return j;
}

inline nlohmann::json cmd_ingest(const RunConfig& c, const nlohmann::json& args, const Report& report) {
  const std::string manifest =
      args.value("manifest", (std::filesystem::path(c.paths.dataset) / "manifest.json").string());
  const IngestResult r = ingest(load_manifest(manifest), worker_count(c));
  if (r.clips.empty()) throw IngestionError("no clip could be ingested from " + manifest);
  persist(r.clips, c.paths.archive);
  nlohmann::json issues = nlohmann::json::array();
  for (const auto& i : r.issues) issues.push_back({{"source_id", i.source_id}, {"message", i.message}});
  nlohmann::json j = {{"clips", r.clips.size()}, {"archive", c.paths.archive}, {"issues", issues}};
  report.json("ingest.json", j);
  return j;
}

inline nlohmann::json cmd_train(const RunConfig& c, const Report& report) {
  auto clips = load(c.paths.archive);
  if (!c.protocol.empty()) {
    const ProtocolSpec p = load_protocol(c.protocol);
    if (p.train_subjects.empty()) throw ProtocolError(p.name + ": no training subjects");
    clips = only_subjects<Clip>(clips, p.train_subjects);
  }
  if (clips.empty()) throw InvalidInput("no training clips in " + c.paths.archive);
  Trainer<float> trainer(c.train, SubjectIndex::of(clips));
  std::ofstream log(report.path("train_log.csv"));
  log << kTrainLogHeader << '\n';
  LossReport last;
  const auto t0 = std::chrono::steady_clock::now();
  train(trainer, clips, [&](const LossReport& r) {
    log << train_log_row(r) << '\n';
    if ((r.iteration + 1) % 50 == 0) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "iter " << r.iteration + 1 << " loss " << r.total << " (" << s << " s)\n";
    }
    last = r;
  });
  log.close();
  std::filesystem::create_directories(c.paths.checkpoints);
  save_checkpoint(checkpoint_path(c), trainer.net(), trainer.iteration(),
                  {{"labels", trainer.labels().ids()}, {"train", to_json(c.train)}, {"config_hash", config_hash(c)}});
  nlohmann::json j = {{"iterations", trainer.iteration()},
                      {"subjects", trainer.labels().size()},
                      {"clips", clips.size()},
                      {"final_total_loss", last.total},
                      {"checkpoint", checkpoint_path(c).string()}};
  report.json("train.json", j);
  return j;
}

inline nlohmann::json cmd_extract(const RunConfig& c, const nlohmann::json& args, const Report& report) {
  auto clips = load(c.paths.archive);
  if (!c.protocol.empty()) clips = only_subjects<Clip>(clips, load_protocol(c.protocol).test_subjects);
  const auto model = load_model(c);
  const auto recs = extract_all<float>(clips, model.net, worker_count(c));
  const std::string out = args.value("out", report.path("signatures.bin").string());
  write_file_bytes(out, encode_signatures(recs));
  nlohmann::json j = {{"signatures", recs.size()}, {"file", out}};
  report.json("extract.json", j);
  return j;
}

inline nlohmann::json cmd_eval(const RunConfig& c, const nlohmann::json& args, const Report& report) {
  const ProtocolSpec p = require_protocol(c);
  const double alpha = effective_alpha(c, p);
  check_alpha(alpha);
  const EvalRecords recs = eval_records(c, p, args.value("signatures", std::string()));
  const ChannelScores cs = raw_scores(recs.gallery, recs.probe);
  const EvalResult fused = evaluate(p, cs, Channel::kFused, alpha);
  const EvalResult sta = evaluate(p, cs, Channel::kStatic, alpha);
  const EvalResult dyn = evaluate(p, cs, Channel::kDynamic, alpha);
  nlohmann::json j = {{"protocol", p.name},
                      {"alpha", alpha},
                      {"rank1", fused.rank.accuracy},
                      {"fused", to_json(fused)},
                      {"static", to_json(sta)},
                      {"dynamic", to_json(dyn)}};
  report.json("metrics.json", j);
  report.text("scores_fused.csv", score_matrix_csv(channel_matrix(cs, Channel::kFused, alpha)));
  report.text("scores_static.csv", score_matrix_csv(channel_matrix(cs, Channel::kStatic, alpha)));
  report.text("scores_dynamic.csv", score_matrix_csv(channel_matrix(cs, Channel::kDynamic, alpha)));
  std::string table = metric_header_csv("channel", p) + "\n";
  for (const auto* r : {&sta, &dyn, &fused}) {
    std::string row = metric_row_csv(0, *r);
    table += r->channel + row.substr(row.find(',')) + "\n";
  }
  report.text("metrics.csv", table);
  return j;
}

inline nlohmann::json cmd_sweep_alpha(const RunConfig& c, const nlohmann::json& args, const Report& report) {
  const ProtocolSpec p = require_protocol(c);
  std::vector<double> alphas = args.contains("alphas") ? args.at("alphas").get<std::vector<double>>()
                                                       : alpha_grid(args.value("steps", 10));
  for (double a : alphas) check_alpha(a);
  const EvalRecords recs = eval_records(c, p, args.value("signatures", std::string()));
  const ChannelScores cs = raw_scores(recs.gallery, recs.probe);
  const auto rows = alpha_sweep(p, cs, alphas);
  std::string table = metric_header_csv("alpha", p) + "\n";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : rows) {
    table += metric_row_csv(r.alpha, r.result) + "\n";
    list.push_back({{"alpha", r.alpha}, {"result", to_json(r.result)}});
  }
  nlohmann::json j = {{"protocol", p.name},
                      {"rows", list},
                      {"static", to_json(evaluate(p, cs, Channel::kStatic, 0.0))},
                      {"dynamic", to_json(evaluate(p, cs, Channel::kDynamic, 1.0))}};
  report.text("alpha_sweep.csv", table);
  report.json("alpha_sweep.json", j);
  return j;
}

inline nlohmann::json cmd_sweep_duration(const RunConfig& c, const nlohmann::json& args, const Report& report) {
  const ProtocolSpec p = require_protocol(c);
  const double alpha = effective_alpha(c, p);
  std::vector<double> fractions = args.contains("fractions") ? args.at("fractions").get<std::vector<double>>()
                                                             : std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5,
                                                                                   0.6, 0.7, 0.8, 0.9, 1.0};
  const auto ec = eval_clips(p, load(c.paths.archive));
  const auto model = load_model(c);
  const auto rows = duration_sweep<float>(p, ec.gallery, ec.probe, model.net, fractions, alpha);
  std::string table = "fraction,min_frames,max_frames,mean_frames," + metric_header_csv("alpha", p) + "\n";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : rows) {
    std::ostringstream os;
    os << std::setprecision(17) << r.fraction << ',' << r.min_frames << ',' << r.max_frames << ',' << r.mean_frames
       << ',' << metric_row_csv(alpha, r.result);
    table += os.str() + "\n";
    list.push_back({{"fraction", r.fraction},
                    {"min_frames", r.min_frames},
                    {"max_frames", r.max_frames},
                    {"mean_frames", r.mean_frames},
                    {"result", to_json(r.result)}});
  }
  nlohmann::json j = {{"protocol", p.name}, {"alpha", alpha}, {"rows", list}};
  report.text("duration_sweep.csv", table);
  report.json("duration_sweep.json", j);
  return j;
}

// ---------------------------------------------------------------------------
// Decoder visualisation

inline constexpr int kGridSeparator = 2;
inline constexpr std::uint8_t kSeparatorLevel = 128;

/// Row-major grid of frames with kGridSeparator-pixel gaps.
inline Image8 frame_grid(const std::vector<std::vector<FrameTensor>>& cells) {
  const int rows = static_cast<int>(cells.size());
  const int cols = rows ? static_cast<int>(cells[0].size()) : 0;
  if (rows == 0 || cols == 0) throw InvalidInput("empty image grid");
  Image8 img;
  img.width = cols * kFrameW + (cols - 1) * kGridSeparator;
  img.height = rows * kFrameH + (rows - 1) * kGridSeparator;
  img.channels = 3;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, kSeparatorLevel);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(cells[r].size()) != cols) throw InvalidInput("ragged image grid");
    for (int q = 0; q < cols; ++q) {
      const int y0 = r * (kFrameH + kGridSeparator), x0 = q * (kFrameW + kGridSeparator);
      for (int y = 0; y < kFrameH; ++y)
        for (int x = 0; x < kFrameW; ++x)
          for (int ch = 0; ch < 3; ++ch) {
            const float v = std::clamp(cells[r][q].at(y, x, ch), 0.0f, 1.0f);
            img.pixels[(static_cast<std::size_t>(y0 + y) * img.width + x0 + x) * 3 + ch] =
                static_cast<std::uint8_t>(std::lround(v * 255.0f));
          }
    }
  }
  return img;
}

/// Features with everything outside [offset, offset + width) zeroed.
inline MatX<float> keep_slice(const MatX<float>& f, int offset, int width) {
  MatX<float> z = MatX<float>::Zero(f.rows(), f.cols());
  z.middleCols(offset, width) = f.middleCols(offset, width);
  return z;
}

inline std::vector<FrameTensor> decode_frames(const GaitNet<float>& net, const MatX<float>& z) {
  const Tensor<float> out = net.decoder.forward(z, Mode::kEval);
  std::vector<FrameTensor> frames;
  for (int i = 0; i < out.n(); ++i) frames.push_back(get_frame(out, i));
  return frames;
}

inline MatX<float> encode_frames(const GaitNet<float>& net, std::span<const FrameTensor> frames) {
  return net.encoder.forward(frames_tensor<float>(frames), Mode::kEval);
}

inline double frame_mse(const FrameTensor& a, const FrameTensor& b) {
  double s = 0;
  for (int i = 0; i < kFrameSize; ++i) {
    const double d = static_cast<double>(a.values()[i]) - b.values()[i];
    s += d * d;
  }
  return s / kFrameSize;
}

inline nlohmann::json cmd_decode_viz(const RunConfig& c, const nlohmann::json& args, const Report& report) {
  const auto clips = load(c.paths.archive);
  auto find = [&](const std::string& id) -> const Clip& {
    for (const auto& cl : clips)
      if (cl.source_id == id) return cl;
    throw InvalidInput("clip '" + id + "' is not in " + c.paths.archive);
  };
  if (!args.contains("clip_a") || !args.contains("clip_b")) throw ConfigViolations({"clip_a and clip_b are required"});
  const Clip& a = find(args.at("clip_a").get<std::string>());
  const Clip& b = find(args.at("clip_b").get<std::string>());
  const int limit = args.value("frames", 8);
  if (limit < 1) throw ConfigViolations({"frames: must be at least 1"});
  const auto model = load_model(c);
  const auto& net = model.net;
  auto head = [&](const Clip& cl) {
    return std::vector<FrameTensor>(cl.frames.begin(), cl.frames.begin() + std::min<std::size_t>(limit, cl.size()));
  };
  const auto fa = head(a), fb = head(b);
  const MatX<float> za = encode_frames(net, fa), zb = encode_frames(net, fb);

  // Per-feature decodes and the full reconstruction, one row per frame of a.
  const auto app = decode_frames(net, keep_slice(za, kAppearanceOffset, kAppearanceDim));
  const auto can = decode_frames(net, keep_slice(za, kCanonicalOffset, kCanonicalDim));
  const auto pos = decode_frames(net, keep_slice(za, kPoseOffset, kPoseDim));
  const auto full = decode_frames(net, za);
  std::vector<std::vector<FrameTensor>> features;
  double mse = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    features.push_back({fa[i], app[i], can[i], pos[i], full[i]});
    mse += frame_mse(fa[i], full[i]);
  }
  mse /= static_cast<double>(fa.size());

  // Cross grid: appearance and canonical from frame i of a, pose from frame j of b.
  MatX<float> zc(static_cast<Eigen::Index>(fa.size() * fb.size()), kFeatureDim);
  for (std::size_t i = 0; i < fa.size(); ++i)
    for (std::size_t k = 0; k < fb.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(i * fb.size() + k);
      zc.row(row) = za.row(static_cast<Eigen::Index>(i));
      zc.row(row).segment(kPoseOffset, kPoseDim) = zb.row(static_cast<Eigen::Index>(k)).segment(kPoseOffset, kPoseDim);
    }
  const auto cross_frames = decode_frames(net, zc);
  std::vector<std::vector<FrameTensor>> cross(fa.size());
  for (std::size_t i = 0; i < fa.size(); ++i)
    cross[i].assign(cross_frames.begin() + static_cast<std::ptrdiff_t>(i * fb.size()),
                    cross_frames.begin() + static_cast<std::ptrdiff_t>((i + 1) * fb.size()));

  const auto zero = decode_frames(net, MatX<float>::Zero(1, kFeatureDim));

  const std::filesystem::path out = args.value("out", report.path("decode_viz").string());
  std::filesystem::create_directories(out);
  write_png(out / "features.png", frame_grid(features));
  write_png(out / "cross.png", frame_grid(cross));
  write_png(out / "zero.png", frame_grid({{zero[0]}}));
  nlohmann::json j = {{"clip_a", a.source_id},
                      {"clip_b", b.source_id},
                      {"features_grid", {{"rows", fa.size()}, {"cols", 5}}},
                      {"features_columns", {"input", "appearance", "canonical", "pose", "full"}},
                      {"cross_grid", {{"rows", fa.size()}, {"cols", fb.size()}}},
                      {"reconstruction_mse", mse},
                      {"dir", out.string()}};
  report.json("decode_viz.json", j);
  return j;
}

// ---------------------------------------------------------------------------
// Dispatch

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth", "ingest", "train", "extract", "eval",
                                                 "sweep-alpha", "sweep-duration", "decode-viz"};
  return names;
}

inline nlohmann::json run_command(const std::string& cmd, const RunConfig& c, const nlohmann::json& args,
                                  const Report& report) {
  if (cmd == "synth") return cmd_synth(c, report);
  if (cmd == "ingest") return cmd_ingest(c, args, report);
  if (cmd == "train") return cmd_train(c, report);
  if (cmd == "extract") return cmd_extract(c, args, report);
  if (cmd == "eval") return cmd_eval(c, args, report);
  if (cmd == "sweep-alpha") return cmd_sweep_alpha(c, args, report);
  if (cmd == "sweep-duration") return cmd_sweep_duration(c, args, report);
  if (cmd == "decode-viz") return cmd_decode_viz(c, args, report);
  throw InvalidInput("unknown command '" + cmd + "'");
}

/// Everything needed to re-execute a run.
inline nlohmann::json run_record(const std::string& cmd, const nlohmann::json& args, const RunConfig& c,
                                 const std::vector<std::string>& argv) {
  return {{"command", cmd},
          {"args", args.is_null() ? nlohmann::json::object() : args},
          {"config", to_json(c)},
          {"config_hash", config_hash(c)},
          {"version", kVersion},
          {"seed", c.seed},
          {"deterministic", c.deterministic},
          {"argv", argv}};
}

inline nlohmann::json error_record(const std::string& cmd, const std::exception& e) {
  nlohmann::json j = {{"command", cmd}, {"message", e.what()}};
  if (const auto* g = dynamic_cast<const Error*>(&e)) j["kind"] = g->kind();
  else j["kind"] = "internal";
  if (const auto* v = dynamic_cast<const ConfigViolations*>(&e)) j["violations"] = v->fields();
  return j;
}

}  // namespace gaitdis
