#pragma once

// Batch composition, the joint training step, signature extraction and fused
// cosine matching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gaitdis/clip_store.hpp"
#include "gaitdis/core/container.hpp"
#include "gaitdis/core/error.hpp"
#include "gaitdis/core/linalg.hpp"
#include "gaitdis/losses.hpp"
#include "gaitdis/nets.hpp"

namespace gaitdis {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double lr = 1e-4;
  double momentum_beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-3;
  double lr_decay_factor = 0.9;
  int lr_decay_every = 500;
  int clip_len = 20;
  int clips_per_batch = 16;
  LossWeights weights;
  IdLoss id_loss = IdLoss::kIncAvg;
  bool large_model = false;
  bool compact = true;  // narrow convolution widths
  std::uint64_t seed = 0;
  long max_iterations = 1000;

  NetConfig net_config() const { return compact ? NetConfig::compact(large_model) : NetConfig::full(large_model); }
};

inline std::string id_loss_name(IdLoss k) {
  switch (k) {
    case IdLoss::kSingle: return "single";
    case IdLoss::kAvg: return "avg";
    default: return "inc_avg";
  }
}

/// Every violated field, one message each.
inline std::vector<std::string> violations(const TrainConfig& c) {
  std::vector<std::string> v;
  if (!(c.lr > 0) || !std::isfinite(c.lr)) v.push_back("lr: must be a positive finite number");
  if (!(c.momentum_beta1 >= 0 && c.momentum_beta1 < 1)) v.push_back("momentum_beta1: must lie in [0, 1)");
  if (!(c.beta2 >= 0 && c.beta2 < 1)) v.push_back("beta2: must lie in [0, 1)");
  if (!(c.adam_eps > 0)) v.push_back("adam_eps: must be positive");
  if (!(c.weight_decay >= 0)) v.push_back("weight_decay: must be non-negative");
  if (!(c.lr_decay_factor > 0 && c.lr_decay_factor <= 1)) v.push_back("lr_decay_factor: must lie in (0, 1]");
  if (c.lr_decay_every < 1) v.push_back("lr_decay_every: must be at least 1");
  if (c.clip_len < 1) v.push_back("clip_len: must be at least 1");
  if (c.clips_per_batch < 2 || c.clips_per_batch % 2 != 0) v.push_back("clips_per_batch: must be even and at least 2");
  if (!(c.weights.lambda_r >= 0)) v.push_back("weights.lambda_r: must be non-negative");
  if (!(c.weights.lambda_d >= 0)) v.push_back("weights.lambda_d: must be non-negative");
  if (!(c.weights.lambda_s >= 0)) v.push_back("weights.lambda_s: must be non-negative");
  if (c.max_iterations < 0) v.push_back("max_iterations: must be non-negative");
  return v;
}

inline std::string join_lines(const std::vector<std::string>& v, const char* sep = "; ") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

inline void validate(const TrainConfig& c) {
  if (auto v = violations(c); !v.empty()) throw ConfigError("invalid training config: " + join_lines(v));
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"momentum_beta1", c.momentum_beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_every", c.lr_decay_every},
          {"clip_len", c.clip_len},
          {"clips_per_batch", c.clips_per_batch},
          {"weights", {{"lambda_r", c.weights.lambda_r}, {"lambda_d", c.weights.lambda_d}, {"lambda_s", c.weights.lambda_s}}},
          {"id_loss", id_loss_name(c.id_loss)},
          {"large_model", c.large_model},
          {"compact", c.compact},
          {"seed", c.seed},
          {"max_iterations", c.max_iterations}};
}

/// Reads the keys present in `j` over `base`. Type errors and unknown keys are
/// collected with the range violations and reported together.
/// Reads the fields present in `j` over `base`, appending one message per
/// violated field to `errs` (prefixed with `prefix`).
inline TrainConfig parse_train_config(const nlohmann::json& j, TrainConfig base, std::vector<std::string>& errs,
                                      const std::string& prefix = "") {
  if (!j.is_object()) {
    errs.push_back(prefix.empty() ? "training config must be a JSON object" : prefix + ": must be an object");
    return base;
  }
  const std::size_t first = errs.size();
  auto get = [&](const nlohmann::json& obj, const std::string& pre, const char* key, auto& dst) {
    if (!obj.contains(key)) return;
    try {
      obj.at(key).get_to(dst);
    } catch (const nlohmann::json::exception&) {
      errs.push_back(pre + key + ": wrong type (" + std::string(obj.at(key).type_name()) + ")");
    }
  };
  static const std::set<std::string> known = {"lr", "momentum_beta1", "beta2", "adam_eps", "weight_decay",
                                              "lr_decay_factor", "lr_decay_every", "clip_len", "clips_per_batch",
                                              "weights", "id_loss", "large_model", "compact", "seed",
                                              "max_iterations"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) errs.push_back(prefix + it.key() + ": unknown field");
  get(j, prefix, "lr", base.lr);
  get(j, prefix, "momentum_beta1", base.momentum_beta1);
  get(j, prefix, "beta2", base.beta2);
  get(j, prefix, "adam_eps", base.adam_eps);
  get(j, prefix, "weight_decay", base.weight_decay);
  get(j, prefix, "lr_decay_factor", base.lr_decay_factor);
  get(j, prefix, "lr_decay_every", base.lr_decay_every);
  get(j, prefix, "clip_len", base.clip_len);
  get(j, prefix, "clips_per_batch", base.clips_per_batch);
  get(j, prefix, "large_model", base.large_model);
  get(j, prefix, "compact", base.compact);
  get(j, prefix, "seed", base.seed);
  get(j, prefix, "max_iterations", base.max_iterations);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    if (!w.is_object()) {
      errs.push_back(prefix + "weights: must be an object");
    } else {
      get(w, prefix + "weights.", "lambda_r", base.weights.lambda_r);
      get(w, prefix + "weights.", "lambda_d", base.weights.lambda_d);
      get(w, prefix + "weights.", "lambda_s", base.weights.lambda_s);
    }
  }
  if (j.contains("id_loss")) {
    const auto s = j.at("id_loss").is_string() ? j.at("id_loss").get<std::string>() : "";
    if (s == "single") base.id_loss = IdLoss::kSingle;
    else if (s == "avg") base.id_loss = IdLoss::kAvg;
    else if (s == "inc_avg") base.id_loss = IdLoss::kIncAvg;
    else errs.push_back(prefix + "id_loss: expected one of single, avg, inc_avg");
  }
  for (auto& e : violations(base)) {
    const std::string msg = prefix + e;
    if (std::find(errs.begin() + static_cast<std::ptrdiff_t>(first), errs.end(), msg) == errs.end()) errs.push_back(msg);
  }
  return base;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  std::vector<std::string> errs;
  base = parse_train_config(j, base, errs);
  if (!errs.empty()) throw ConfigError("invalid training config: " + join_lines(errs));
  return base;
}

/// lr * factor^floor(iteration / every)
inline double learning_rate(const TrainConfig& c, long iteration) {
  return c.lr * std::pow(c.lr_decay_factor, static_cast<double>(iteration / c.lr_decay_every));
}

// ---------------------------------------------------------------------------
// Subject labels

/// Dense classifier indices for training subjects. Numeric ids sort
/// numerically, everything else lexicographically after them.
class SubjectIndex {
 public:
  SubjectIndex() = default;
  explicit SubjectIndex(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end(), less);
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    ids_ = std::move(ids);
    for (std::size_t i = 0; i < ids_.size(); ++i) index_[ids_[i]] = static_cast<int>(i);
  }
  static SubjectIndex of(std::span<const Clip> clips) {
    std::vector<std::string> ids;
    for (const auto& c : clips) ids.push_back(c.subject_id);
    return SubjectIndex(std::move(ids));
  }

  int size() const { return static_cast<int>(ids_.size()); }
  const std::vector<std::string>& ids() const { return ids_; }
  int at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw InvalidInput("subject '" + id + "' is not a training subject");
    return it->second;
  }

  static bool less(const std::string& a, const std::string& b) {
    auto numeric = [](const std::string& s) {
      return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char ch) { return std::isdigit(ch); });
    };
    const bool na = numeric(a), nb = numeric(b);
    if (na != nb) return na;
    if (na && a.size() != b.size()) return a.size() < b.size();
    return a < b;
  }

 private:
  std::vector<std::string> ids_;
  std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Batches

struct BatchItem {
  int clip = 0;   // index into the training clip list
  int start = 0;  // first frame of the window
  int t1 = 0;     // cross-reconstruction frames, relative to the window
  int t2 = 0;
  int label = 0;
};

struct BatchPairing {
  std::vector<BatchItem> items;
  /// Ordered (i, j) item pairs of one subject under different conditions.
  std::vector<std::pair<int, int>> pairs;
};

/// Draws clips_per_batch / 2 subjects (without replacement while enough are
/// eligible), two distinct conditions per subject and one clip per condition.
inline BatchPairing compose_batch(std::span<const Clip> clips, const SubjectIndex& labels, const TrainConfig& cfg,
                                  Rng& rng) {
  validate(cfg);
  // subject -> condition -> eligible clip indices
  std::map<std::string, std::map<std::string, std::vector<int>>> groups;
  std::size_t short_clips = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (static_cast<int>(clips[i].size()) < cfg.clip_len) {
      ++short_clips;
      continue;
    }
    groups[clips[i].subject_id][clips[i].condition_id].push_back(static_cast<int>(i));
  }
  std::vector<std::string> eligible;
  for (const auto& [subject, conds] : groups)
    if (conds.size() >= 2) eligible.push_back(subject);
  std::sort(eligible.begin(), eligible.end(), SubjectIndex::less);
  if (eligible.empty()) {
    std::set<std::string> all;
    for (const auto& c : clips) all.insert(c.subject_id);
    throw ConfigError("no subject has clips of at least " + std::to_string(cfg.clip_len) +
                      " frames in two or more conditions (" + std::to_string(all.size()) + " subjects, " +
                      std::to_string(clips.size()) + " clips, " + std::to_string(short_clips) +
                      " shorter than clip_len)");
  }

  const int want = cfg.clips_per_batch / 2;
  std::vector<std::string> chosen;
  while (static_cast<int>(chosen.size()) < want) {
    std::vector<std::string> order = eligible;
    std::shuffle(order.begin(), order.end(), rng);
    for (const auto& s : order) {
      if (static_cast<int>(chosen.size()) == want) break;
      chosen.push_back(s);
    }
  }

  BatchPairing b;
  auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
  for (const auto& s : chosen) {
    const auto& conds = groups.at(s);
    std::vector<const std::vector<int>*> lists;
    for (const auto& [cond, idx] : conds) lists.push_back(&idx);
    const int c1 = pick(static_cast<int>(lists.size()));
    int c2 = pick(static_cast<int>(lists.size()) - 1);
    if (c2 >= c1) ++c2;
    const int base = static_cast<int>(b.items.size());
    for (int c : {c1, c2}) {
      BatchItem it;
      it.clip = (*lists[c])[pick(static_cast<int>(lists[c]->size()))];
      it.start = pick(static_cast<int>(clips[it.clip].size()) - cfg.clip_len + 1);
      it.t1 = pick(cfg.clip_len);
      it.t2 = pick(cfg.clip_len);
      it.label = labels.at(s);
      b.items.push_back(it);
    }
    b.pairs.push_back({base, base + 1});
    b.pairs.push_back({base + 1, base});
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0;
};

template <typename T>
struct AdamSlot {
  AlignedVector<T> m, v;
};

/// One Adam update with coupled L2 decay: g <- g + wd * w. `step` is 1-based.
template <typename T>
void adam_update(std::span<T> w, std::span<const T> g, AdamSlot<T>& s, const AdamSettings& a, double lr, long step) {
  if (s.m.size() != w.size()) {
    s.m.assign(w.size(), T(0));
    s.v.assign(w.size(), T(0));
  }
  const double bc1 = 1 - std::pow(a.beta1, static_cast<double>(step));
  const double bc2 = 1 - std::pow(a.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g[i]) + a.weight_decay * static_cast<double>(w[i]);
    const double m = a.beta1 * static_cast<double>(s.m[i]) + (1 - a.beta1) * gi;
    const double v = a.beta2 * static_cast<double>(s.v[i]) + (1 - a.beta2) * gi * gi;
    s.m[i] = static_cast<T>(m);
    s.v[i] = static_cast<T>(v);
    w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * (m / bc1) / (std::sqrt(v / bc2) + a.eps));
  }
}

template <typename T>
class Adam {
 public:
  explicit Adam(AdamSettings s = {}) : settings_(s) {}

  void step(GaitNet<T>& net, double lr) {
    ++t_;
    std::size_t k = 0;
    net.visit_params([&](Param<T>& p) {
      if (slots_.size() <= k) slots_.emplace_back();
      adam_update<T>(p.value, p.grad, slots_[k++], settings_, lr, t_);
    });
  }
  long steps() const { return t_; }

 private:
  AdamSettings settings_;
  std::vector<AdamSlot<T>> slots_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Frames <-> tensors

template <typename T>
void put_frame(Tensor<T>& x, int i, const FrameTensor& f) {
  for (int ch = 0; ch < kFrameC; ++ch)
    for (int y = 0; y < kFrameH; ++y)
      for (int xx = 0; xx < kFrameW; ++xx) x(i, ch, y, xx) = static_cast<T>(f.at(y, xx, ch));
}

template <typename T>
FrameTensor get_frame(const Tensor<T>& x, int i) {
  FrameTensor f;
  for (int ch = 0; ch < kFrameC; ++ch)
    for (int y = 0; y < kFrameH; ++y)
      for (int xx = 0; xx < kFrameW; ++xx) f.at(y, xx, ch) = static_cast<float>(x(i, ch, y, xx));
  return f;
}

template <typename T>
Tensor<T> frames_tensor(std::span<const FrameTensor> frames) {
  Tensor<T> x(static_cast<int>(frames.size()), kFrameC, kFrameH, kFrameW);
  for (std::size_t i = 0; i < frames.size(); ++i) put_frame(x, static_cast<int>(i), frames[i]);
  return x;
}

// ---------------------------------------------------------------------------
// Training

struct LossReport {
  long iteration = 0;
  double lr = 0;
  LossComponents<double> components;
  double total = 0;
  int truncated_pairs = 0;
};

inline const char* kTrainLogHeader = "iteration,lr,identity,xrecon,pose_sim,cano_cons,total";

inline std::string train_log_row(const LossReport& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.iteration << ',' << r.lr << ',' << r.components.identity << ','
     << r.components.xrecon << ',' << r.components.pose_sim << ',' << r.components.cano_cons << ',' << r.total;
  return os.str();
}

template <typename T>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, SubjectIndex labels) : Trainer(cfg, std::move(labels), cfg.net_config()) {}

  /// Explicit architecture, bypassing the config's width presets.
  Trainer(const TrainConfig& cfg, SubjectIndex labels, const NetConfig& arch)
      : cfg_((validate(cfg), cfg)), labels_(std::move(labels)), net_(arch, labels_.size()),
        adam_(AdamSettings{cfg.momentum_beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay}), rng_(cfg.seed) {
    net_.init(cfg.seed);
  }

  const TrainConfig& config() const { return cfg_; }
  const SubjectIndex& labels() const { return labels_; }
  GaitNet<T>& net() { return net_; }
  const GaitNet<T>& net() const { return net_; }
  long iteration() const { return iteration_; }
  Rng& rng() { return rng_; }

  /// Samples a batch with the trainer's generator and applies one update.
  LossReport train_step(std::span<const Clip> clips) {
    const BatchPairing b = compose_batch(clips, labels_, cfg_, rng_);
    return step(clips, b);
  }

  /// Forward + backward on `batch`, then one Adam update.
  LossReport step(std::span<const Clip> clips, const BatchPairing& batch) {
    LossReport r = evaluate(clips, batch, true);
    const double lr = learning_rate(cfg_, iteration_);
    adam_.step(net_, lr);
    r.iteration = iteration_++;
    r.lr = lr;
    return r;
  }

  /// Loss (and, when `backprop`, parameter gradients) of one batch. Batch-norm
  /// running statistics advance only when `backprop` is set.
  LossReport evaluate(std::span<const Clip> clips, const BatchPairing& batch, bool backprop) {
    const int B = static_cast<int>(batch.items.size());
    const int L = cfg_.clip_len;
    if (B == 0) throw InvalidInput("empty batch");
    if (backprop) net_.zero_grad();

    Tensor<T> x(B * L, kFrameC, kFrameH, kFrameW);
    for (int b = 0; b < B; ++b) {
      const auto& it = batch.items[b];
      const Clip& c = clips[it.clip];
      if (it.start < 0 || it.start + L > static_cast<int>(c.size()))
        throw InvalidInput("batch window outside clip " + c.source_id);
      for (int t = 0; t < L; ++t) put_frame(x, b * L + t, c.frames[it.start + t]);
    }

    EncoderTape<T> etape;
    const MatX<T> F = net_.encoder.forward(x, Mode::kTrain, &etape);
    MatX<T> dF = MatX<T>::Zero(F.rows(), F.cols());
    const auto& w = cfg_.weights;
    LossReport rep;

    // Cross reconstruction: two decodes per clip, (t1 -> t2) and (t2 -> t1).
    DecoderTape<T> dtape;
    {
      MatX<T> z(2 * B, kFeatureDim);
      Tensor<T> target(2 * B, kFrameC, kFrameH, kFrameW);
      std::vector<std::pair<int, int>> src_tgt;
      for (int b = 0; b < B; ++b) {
        const auto& it = batch.items[b];
        for (auto [s, g] : {std::pair{it.t1, it.t2}, std::pair{it.t2, it.t1}}) {
          const int m = static_cast<int>(src_tgt.size());
          const VecX<T> fs = F.row(b * L + s).transpose(), fg = F.row(b * L + g).transpose();
          z.row(m) = cross_decoder_input<T>(fs, fg).transpose();
          std::copy(x.item(b * L + g), x.item(b * L + g) + x.per_item(), target.item(m));
          src_tgt.push_back({b * L + s, b * L + g});
        }
      }
      const Tensor<T> out = net_.decoder.forward(z, Mode::kTrain, backprop ? &dtape : nullptr);
      const double count = static_cast<double>(out.size());
      double sq = 0;
      Tensor<T> dout(out.n(), out.c(), out.h(), out.w());
      const T scale = static_cast<T>(2.0 * w.lambda_r / count);
      for (std::size_t i = 0; i < out.size(); ++i) {
        const T d = out.data()[i] - target.data()[i];
        sq += static_cast<double>(d) * d;
        dout.data()[i] = scale * d;
      }
      rep.components.xrecon = sq / count;
      if (backprop) {
        const MatX<T> dz = net_.decoder.backward(dtape, dout);
        const bool src_a = kCrossReconConvention == CrossReconConvention::kSourceAppearance;
        for (int m = 0; m < 2 * B; ++m) {
          const auto [s, g] = src_tgt[m];
          dF.row(src_a ? s : g).segment(kAppearanceOffset, kAppearanceDim) += dz.row(m).segment(kAppearanceOffset, kAppearanceDim);
          dF.row(s).segment(kCanonicalOffset, kCanonicalDim) += dz.row(m).segment(kCanonicalOffset, kCanonicalDim);
          dF.row(src_a ? g : s).segment(kPoseOffset, kPoseDim) += dz.row(m).segment(kPoseOffset, kPoseDim);
        }
      }
    }

    auto canon = [&](int b) -> MatX<T> { return F.block(b * L, kCanonicalOffset, L, kCanonicalDim); };
    auto pose = [&](int b) -> MatX<T> { return F.block(b * L, kPoseOffset, L, kPoseDim); };

    // Identity loss on the LSTM outputs.
    {
      std::vector<MatX<T>> xs(L, MatX<T>(B, kPoseDim));
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < L; ++t) xs[t].row(b) = F.block(b * L + t, kPoseOffset, 1, kPoseDim);
      LstmTape<T> ltape;
      const auto hs = net_.lstm.forward(xs, backprop ? &ltape : nullptr);
      const int H = net_.lstm.hidden();
      std::vector<MatX<T>> dhs(L, MatX<T>::Zero(B, H));
      LinearGrad<T> dcls(net_.cls_dg);
      double total = 0;
      for (int b = 0; b < B; ++b) {
        MatX<T> h(L, H);
        for (int t = 0; t < L; ++t) h.row(t) = hs[t].row(b);
        IdGrad<T> g;
        total += identity_loss<T>(cfg_.id_loss, h, batch.items[b].label, net_.cls_dg, backprop ? &g : nullptr);
        if (backprop) {
          for (int t = 0; t < L; ++t) dhs[t].row(b) = g.d_h.row(t) / static_cast<T>(B);
          dcls.d_weight += g.d_cls.d_weight / static_cast<T>(B);
          dcls.d_bias += g.d_cls.d_bias / static_cast<T>(B);
        }
      }
      rep.components.identity = total / B;
      if (backprop) {
        dcls.add_to(net_.cls_dg);
        const auto dxs = net_.lstm.backward(ltape, dhs);
        for (int b = 0; b < B; ++b)
          for (int t = 0; t < L; ++t) dF.block(b * L + t, kPoseOffset, 1, kPoseDim) += dxs[t].row(b);
      }
    }

    // Pose similarity and canonical consistency over cross-condition pairs.
    if (!batch.pairs.empty()) {
      const T inv = T(1) / static_cast<T>(batch.pairs.size());
      double ps = 0, cc = 0;
      LinearGrad<T> dcls(net_.cls_sg);
      for (const auto& [i, j] : batch.pairs) {
        const MatX<T> pi = pose(i), pj = pose(j);
        PoseSimGrad<T> pg;
        ps += pose_sim_loss<T>(pi, pj, backprop ? &pg : nullptr);
        const MatX<T> ci = canon(i), cj = canon(j);
        CanoConsGrad<T> cg;
        const auto res = cano_cons_loss<T>(ci, cj, batch.items[i].label, net_.cls_sg, backprop ? &cg : nullptr);
        cc += res.value;
        rep.truncated_pairs += res.truncated;
        if (backprop) {
          const T ld = static_cast<T>(w.lambda_d) * inv, ls = static_cast<T>(w.lambda_s) * inv;
          dF.block(i * L, kPoseOffset, L, kPoseDim) += ld * pg.d_seq1;
          dF.block(j * L, kPoseOffset, L, kPoseDim) += ld * pg.d_seq2;
          dF.block(i * L, kCanonicalOffset, L, kCanonicalDim) += ls * cg.d_seq1;
          dF.block(j * L, kCanonicalOffset, L, kCanonicalDim) += ls * cg.d_seq2;
          dcls.d_weight += ls * cg.d_cls.d_weight;
          dcls.d_bias += ls * cg.d_cls.d_bias;
        }
      }
      rep.components.pose_sim = ps * inv;
      rep.components.cano_cons = cc * inv;
      if (backprop) dcls.add_to(net_.cls_sg);
    }

    const auto& c = rep.components;
    for (auto [name, v] : {std::pair{"identity", c.identity}, std::pair{"xrecon", c.xrecon},
                           std::pair{"pose_sim", c.pose_sim}, std::pair{"cano_cons", c.cano_cons}})
      if (!std::isfinite(v)) throw NonFiniteLoss(name);
    rep.total = total_loss(c, w);

    if (backprop) {
      net_.encoder.backward(etape, dF);
      net_.encoder.update_running(etape);
      net_.decoder.update_running(dtape);
    }
    return rep;
  }

 private:
  TrainConfig cfg_;
  SubjectIndex labels_;
  GaitNet<T> net_;
  Adam<T> adam_;
  Rng rng_;
  long iteration_ = 0;
};

/// Runs max_iterations steps, calling `on_step` after each.
template <typename T>
void train(Trainer<T>& trainer, std::span<const Clip> clips, const std::function<void(const LossReport&)>& on_step = {}) {
  while (trainer.iteration() < trainer.config().max_iterations) {
    const LossReport r = trainer.train_step(clips);
    if (on_step) on_step(r);
  }
}

// ---------------------------------------------------------------------------
// Signatures

struct GaitSignature {
  VecX<float> f_sta;  // kCanonicalDim
  VecX<float> f_dyn;  // LSTM hidden size
  int n_frames_used = 0;
};

struct SignatureRecord {
  std::string source_id;
  std::string subject_id;
  std::string condition_id;
  double view_deg = 0;
  int video_index = 0;
  GaitSignature sig;
};

namespace detail {

/// Mean of the first k rows. Sums in extended precision so that duplicated
/// rows and constant columns average back to the original values exactly.
template <typename T>
VecX<float> prefix_mean(const MatX<T>& rows, int k) {
  VecX<float> out(rows.cols());
  for (Eigen::Index c = 0; c < rows.cols(); ++c) {
    long double acc = 0;
    for (int r = 0; r < k; ++r) acc += static_cast<long double>(rows(r, c));
    out[c] = static_cast<float>(acc / k);
  }
  return out;
}

}  // namespace detail

/// Per-frame features of a whole clip in evaluation mode. Frames are encoded
/// one at a time so each frame's features do not depend on its neighbours.
struct ClipFeatures {
  MatX<float> features;  // n x 320
  MatX<float> lstm_out;  // n x H
};

template <typename T>
ClipFeatures clip_features(const Clip& clip, const GaitNet<T>& net) {
  const int n = static_cast<int>(clip.size());
  if (n == 0) throw InvalidInput("cannot extract a signature from an empty clip '" + clip.source_id + "'");
  MatX<T> feats(n, kFeatureDim);
  for (int t = 0; t < n; ++t) {
    Tensor<T> x(1, kFrameC, kFrameH, kFrameW);
    put_frame(x, 0, clip.frames[t]);
    feats.row(t) = net.encoder.forward(x, Mode::kEval).row(0);
  }
  std::vector<MatX<T>> xs(n);
  for (int t = 0; t < n; ++t) xs[t] = feats.block(t, kPoseOffset, 1, kPoseDim);
  const auto hs = net.lstm.forward(xs);
  MatX<T> h(n, net.lstm.hidden());
  for (int t = 0; t < n; ++t) h.row(t) = hs[t].row(0);
  return {feats.template cast<float>(), h.template cast<float>()};
}

/// Signature from the first k frames of already-computed clip features. The
/// LSTM is causal, so its first k outputs equal a run over the k-frame clip.
inline GaitSignature signature_from(const ClipFeatures& f, int k) {
  if (k < 1 || k > f.features.rows()) throw InvalidInput("signature prefix outside clip");
  const MatX<float> canon = f.features.block(0, kCanonicalOffset, k, kCanonicalDim);
  return {detail::prefix_mean<float>(canon, k), detail::prefix_mean<float>(f.lstm_out, k), k};
}

template <typename T>
GaitSignature extract_signature(const Clip& clip, const GaitNet<T>& net) {
  const ClipFeatures f = clip_features(clip, net);
  return signature_from(f, static_cast<int>(f.features.rows()));
}

/// Frames kept for a leading fraction of an n-frame clip: max(1, floor(frac*n)).
inline int prefix_frames(double fraction, int n) {
  if (!(fraction > 0 && fraction <= 1)) throw InvalidInput("duration fraction must lie in (0, 1]");
  return std::max(1, static_cast<int>(std::floor(fraction * n)));
}

inline SignatureRecord make_record(const Clip& c, GaitSignature sig) {
  return {c.source_id, c.subject_id, c.condition_id, c.view_deg, c.video_index, std::move(sig)};
}

/// Signatures for many clips; fans out over `threads` workers, results in
/// input order.
template <typename T>
std::vector<SignatureRecord> extract_all(std::span<const Clip> clips, const GaitNet<T>& net, int threads = 1) {
  std::vector<SignatureRecord> out(clips.size());
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) out[i] = make_record(clips[i], extract_signature(clips[i], net));
  };
  if (threads <= 1 || clips.size() < 2) {
    work(0, clips.size());
    return out;
  }
  std::vector<std::future<void>> jobs;
  const std::size_t per = (clips.size() + threads - 1) / threads;
  for (std::size_t lo = 0; lo < clips.size(); lo += per)
    jobs.push_back(std::async(std::launch::async, work, lo, std::min(clips.size(), lo + per)));
  for (auto& j : jobs) j.get();
  return out;
}

// ---------------------------------------------------------------------------
// Matching

/// Cosine similarity in double precision. Zero vectors have no direction.
inline double cosine(const VecX<float>& a, const VecX<float>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  const Eigen::VectorXd da = a.cast<double>(), db = b.cast<double>();
  const double na = da.norm(), nb = db.norm();
  if (na == 0 || nb == 0) throw UndefinedCosine("cosine of a zero-norm feature vector");
  return da.dot(db) / (na * nb);
}

/// Affine map of a score population onto [0, 1]. A constant population maps
/// to 0.5.
struct MinMax {
  double lo = 0, hi = 1;

  static MinMax fit(const Eigen::MatrixXd& m) {
    if (m.size() == 0) throw InvalidInput("min-max over an empty matrix");
    return {m.minCoeff(), m.maxCoeff()};
  }
  bool constant() const { return !(hi > lo); }
  double operator()(double x) const { return constant() ? 0.5 : (x - lo) / (hi - lo); }
};

struct FusionNormalizer {
  MinMax sta, dyn;
};

inline void check_alpha(double alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw InvalidInput("alpha must lie in [0, 1]");
}

/// (1 - alpha) * mm_sta(cos_sta) + alpha * mm_dyn(cos_dyn)
inline double fuse(double sta_norm, double dyn_norm, double alpha) { return (1 - alpha) * sta_norm + alpha * dyn_norm; }

inline double match_score(const GaitSignature& g, const GaitSignature& p, double alpha, const FusionNormalizer& n) {
  check_alpha(alpha);
  return fuse(n.sta(cosine(g.f_sta, p.f_sta)), n.dyn(cosine(g.f_dyn, p.f_dyn)), alpha);
}

// ---------------------------------------------------------------------------
// Signature export

inline constexpr int kSignatureSchema = 1;

inline std::string encode_signatures(std::span<const SignatureRecord> recs) {
  nlohmann::json header = {{"kind", "signatures"}, {"schema", kSignatureSchema}, {"records", nlohmann::json::array()}};
  std::vector<float> payload;
  for (const auto& r : recs) {
    header["records"].push_back({{"source_id", r.source_id},
                                 {"subject", r.subject_id},
                                 {"condition", r.condition_id},
                                 {"view", r.view_deg},
                                 {"video_index", r.video_index},
                                 {"n_frames_used", r.sig.n_frames_used},
                                 {"offset", payload.size()},
                                 {"sta_dim", r.sig.f_sta.size()},
                                 {"dyn_dim", r.sig.f_dyn.size()}});
    payload.insert(payload.end(), r.sig.f_sta.data(), r.sig.f_sta.data() + r.sig.f_sta.size());
    payload.insert(payload.end(), r.sig.f_dyn.data(), r.sig.f_dyn.data() + r.sig.f_dyn.size());
  }
  return encode_container(std::move(header), payload);
}

inline std::vector<SignatureRecord> decode_signatures(std::string_view bytes) {
  const FloatContainer c = decode_container(bytes, "signatures", kSignatureSchema);
  std::vector<SignatureRecord> out;
  try {
    for (const auto& j : c.header.at("records")) {
      SignatureRecord r;
      r.source_id = j.at("source_id").get<std::string>();
      r.subject_id = j.at("subject").get<std::string>();
      r.condition_id = j.at("condition").get<std::string>();
      r.view_deg = j.at("view").get<double>();
      r.video_index = j.at("video_index").get<int>();
      r.sig.n_frames_used = j.at("n_frames_used").get<int>();
      const auto off = j.at("offset").get<std::size_t>();
      const auto ns = j.at("sta_dim").get<std::size_t>(), nd = j.at("dyn_dim").get<std::size_t>();
      if (off + ns + nd > c.payload.size()) throw CorruptionError("signature record exceeds payload");
      r.sig.f_sta = Eigen::Map<const VecX<float>>(c.payload.data() + off, static_cast<Eigen::Index>(ns));
      r.sig.f_dyn = Eigen::Map<const VecX<float>>(c.payload.data() + off + ns, static_cast<Eigen::Index>(nd));
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("signature header: ") + e.what());
  }
  return out;
}

}  // namespace gaitdis
