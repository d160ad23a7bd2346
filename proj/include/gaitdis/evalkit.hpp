#pragma once

// Gallery/probe protocols and identification / verification metrics.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gaitdis/core/container.hpp"
#include "gaitdis/core/error.hpp"
#include "gaitdis/engine.hpp"

namespace gaitdis {

// ---------------------------------------------------------------------------
// Protocol specs

/// Explicit subject ids and/or inclusive integer ranges.
struct SubjectSet {
  std::set<std::string> ids;
  std::vector<std::pair<long, long>> ranges;

  static std::optional<long> as_number(const std::string& s) {
    if (s.empty() || s.size() > 18 || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
      return std::nullopt;
    return std::stol(s);
  }
  bool contains(const std::string& id) const {
    if (ids.count(id)) return true;
    if (auto n = as_number(id))
      for (auto [a, b] : ranges)
        if (*n >= a && *n <= b) return true;
    return false;
  }
  bool empty() const { return ids.empty() && ranges.empty(); }

  /// First subject found in both sets, if any.
  std::optional<std::string> overlap(const SubjectSet& o) const {
    for (const auto& id : ids)
      if (o.contains(id)) return id;
    for (const auto& id : o.ids)
      if (contains(id)) return id;
    for (auto [a, b] : ranges)
      for (auto [c, d] : o.ranges)
        if (std::max(a, c) <= std::min(b, d)) return std::to_string(std::max(a, c));
    return std::nullopt;
  }
};

/// Clause over clip labels; an empty list matches anything.
struct Selector {
  std::vector<std::string> conditions;
  std::vector<double> views;
  std::vector<int> video_indices;

  template <typename Labeled>
  bool matches(const Labeled& c) const {
    auto in = [](const auto& list, const auto& v) { return list.empty() || std::find(list.begin(), list.end(), v) != list.end(); };
    return in(conditions, c.condition_id) && in(views, c.view_deg) && in(video_indices, c.video_index);
  }
};

enum class Aggregation { kMax, kMean };

struct ProtocolSpec {
  std::string name;
  SubjectSet train_subjects;
  SubjectSet test_subjects;
  std::vector<Selector> gallery;  // OR of clauses
  std::vector<Selector> probe;
  std::string metric = "rank1";  // or "tar_at_far"
  std::vector<double> far_points{0.01, 0.05};
  Aggregation aggregation = Aggregation::kMax;
  /// Report rank-1 per (gallery view, probe view) cell and their mean.
  bool per_view = false;
  bool exclude_same_view = false;
  std::optional<double> alpha;
  bool best_effort = false;
};

namespace detail {

inline SubjectSet subject_set_from(const nlohmann::json& j, const std::string& field) {
  SubjectSet s;
  auto add_item = [&](const nlohmann::json& v) {
    if (v.is_string()) s.ids.insert(v.get<std::string>());
    else if (v.is_number_integer()) s.ids.insert(std::to_string(v.get<long>()));
    else if (v.is_object() && v.contains("range")) {
      const auto& r = v.at("range");
      if (!r.is_array() || r.size() != 2 || !r[0].is_number_integer() || !r[1].is_number_integer() ||
          r[0].get<long>() > r[1].get<long>())
        throw ProtocolError(field + ": range must be [first, last] with first <= last");
      s.ranges.push_back({r[0].get<long>(), r[1].get<long>()});
    } else {
      throw ProtocolError(field + ": entries must be ids or {\"range\": [a, b]}");
    }
  };
  if (j.is_array()) for (const auto& v : j) add_item(v);
  else add_item(j);
  return s;
}

inline std::vector<Selector> selectors_from(const nlohmann::json& j, const std::string& field) {
  std::vector<Selector> out;
  const nlohmann::json list = j.is_array() ? j : nlohmann::json::array({j});
  for (const auto& c : list) {
    if (!c.is_object()) throw ProtocolError(field + ": clauses must be objects");
    Selector s;
    try {
      for (auto it = c.begin(); it != c.end(); ++it) {
        if (it.key() == "conditions") s.conditions = it.value().get<std::vector<std::string>>();
        else if (it.key() == "views") s.views = it.value().get<std::vector<double>>();
        else if (it.key() == "video_indices") s.video_indices = it.value().get<std::vector<int>>();
        else throw ProtocolError(field + ": unknown clause key '" + it.key() + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(field + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ProtocolError(field + ": needs at least one clause");
  return out;
}

inline nlohmann::json subject_set_json(const SubjectSet& s) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& id : s.ids) a.push_back(id);
  for (auto [x, y] : s.ranges) a.push_back({{"range", {x, y}}});
  return a;
}

inline nlohmann::json selectors_json(const std::vector<Selector>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& s : v) {
    nlohmann::json c = nlohmann::json::object();
    if (!s.conditions.empty()) c["conditions"] = s.conditions;
    if (!s.views.empty()) c["views"] = s.views;
    if (!s.video_indices.empty()) c["video_indices"] = s.video_indices;
    a.push_back(c);
  }
  return a;
}

}  // namespace detail

inline void validate(const ProtocolSpec& p) {
  if (p.test_subjects.empty()) throw ProtocolError(p.name + ": empty test subject set");
  if (auto s = p.train_subjects.overlap(p.test_subjects))
    throw ProtocolError(p.name + ": subject " + *s + " is in both the training and the test set");
  if (p.metric != "rank1" && p.metric != "tar_at_far") throw ProtocolError(p.name + ": metric must be rank1 or tar_at_far");
  for (double f : p.far_points)
    if (!(f > 0 && f < 1)) throw ProtocolError(p.name + ": far_points must lie in (0, 1)");
  if (p.alpha && !(*p.alpha >= 0 && *p.alpha <= 1)) throw ProtocolError(p.name + ": alpha must lie in [0, 1]");
  if (p.gallery.empty() || p.probe.empty()) throw ProtocolError(p.name + ": gallery and probe selectors are required");
}

inline ProtocolSpec protocol_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ProtocolError("protocol spec must be a JSON object");
  static const std::set<std::string> known = {"name", "train_subjects", "test_subjects", "gallery", "probe",
                                              "metric", "far_points", "aggregation", "per_view",
                                              "exclude_same_view", "alpha", "best_effort", "notes"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ProtocolError("protocol spec: unknown field '" + it.key() + "'");
  ProtocolSpec p;
  try {
    p.name = j.value("name", std::string("unnamed"));
    if (j.contains("train_subjects")) p.train_subjects = detail::subject_set_from(j.at("train_subjects"), "train_subjects");
    if (!j.contains("test_subjects")) throw ProtocolError(p.name + ": test_subjects is required");
    p.test_subjects = detail::subject_set_from(j.at("test_subjects"), "test_subjects");
    if (!j.contains("gallery") || !j.contains("probe")) throw ProtocolError(p.name + ": gallery and probe are required");
    p.gallery = detail::selectors_from(j.at("gallery"), "gallery");
    p.probe = detail::selectors_from(j.at("probe"), "probe");
    p.metric = j.value("metric", p.metric);
    if (j.contains("far_points")) p.far_points = j.at("far_points").get<std::vector<double>>();
    const auto agg = j.value("aggregation", std::string("max"));
    if (agg == "max") p.aggregation = Aggregation::kMax;
    else if (agg == "mean") p.aggregation = Aggregation::kMean;
    else throw ProtocolError(p.name + ": aggregation must be max or mean");
    p.per_view = j.value("per_view", false);
    p.exclude_same_view = j.value("exclude_same_view", false);
    if (j.contains("alpha")) p.alpha = j.at("alpha").get<double>();
    p.best_effort = j.value("best_effort", false);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("protocol spec: ") + e.what());
  }
  validate(p);
  return p;
}

inline ProtocolSpec load_protocol(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  try {
    return protocol_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw ProtocolError(path.string() + ": " + e.what());
  }
}

inline nlohmann::json to_json(const ProtocolSpec& p) {
  nlohmann::json j = {{"name", p.name},
                      {"train_subjects", detail::subject_set_json(p.train_subjects)},
                      {"test_subjects", detail::subject_set_json(p.test_subjects)},
                      {"gallery", detail::selectors_json(p.gallery)},
                      {"probe", detail::selectors_json(p.probe)},
                      {"metric", p.metric},
                      {"far_points", p.far_points},
                      {"aggregation", p.aggregation == Aggregation::kMax ? "max" : "mean"},
                      {"per_view", p.per_view},
                      {"exclude_same_view", p.exclude_same_view},
                      {"best_effort", p.best_effort}};
  if (p.alpha) j["alpha"] = *p.alpha;
  return j;
}

struct ProtocolSplit {
  std::vector<int> train, gallery, probe;
};

/// Partitions labelled items (clips or signature records).
template <typename Labeled>
ProtocolSplit split(const ProtocolSpec& p, std::span<const Labeled> items) {
  validate(p);
  auto any = [](const std::vector<Selector>& sel, const Labeled& c) {
    return std::any_of(sel.begin(), sel.end(), [&](const Selector& s) { return s.matches(c); });
  };
  ProtocolSplit s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& c = items[i];
    if (p.train_subjects.contains(c.subject_id)) s.train.push_back(static_cast<int>(i));
    if (!p.test_subjects.contains(c.subject_id)) continue;
    if (any(p.gallery, c)) s.gallery.push_back(static_cast<int>(i));
    if (any(p.probe, c)) s.probe.push_back(static_cast<int>(i));
  }
  if (s.gallery.empty()) throw ProtocolError(p.name + ": gallery selection is empty under the test subjects");
  if (s.probe.empty()) throw ProtocolError(p.name + ": probe selection is empty under the test subjects");
  return s;
}

template <typename Labeled>
std::vector<Labeled> pick(std::span<const Labeled> items, const std::vector<int>& idx) {
  std::vector<Labeled> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Score matrices

enum class Channel { kStatic, kDynamic, kFused };

inline const char* channel_name(Channel c) {
  switch (c) {
    case Channel::kStatic: return "static";
    case Channel::kDynamic: return "dynamic";
    default: return "fused";
  }
}

struct ScoreMatrix {
  Eigen::MatrixXd scores;  // gallery x probe
  std::vector<std::string> gallery_labels, probe_labels;
  std::vector<double> gallery_views, probe_views;
  std::vector<std::string> gallery_ids, probe_ids;  // source ids, may be empty
  Channel channel = Channel::kFused;
  double alpha = 0.5;

  int n_gallery() const { return static_cast<int>(scores.rows()); }
  int n_probe() const { return static_cast<int>(scores.cols()); }

  void check() const {
    if (scores.rows() != static_cast<Eigen::Index>(gallery_labels.size()) ||
        scores.cols() != static_cast<Eigen::Index>(probe_labels.size()))
      throw ShapeError("score matrix labels do not match its dimensions");
    if (scores.size() == 0) throw InvalidInput("empty score matrix");
    if (!scores.allFinite()) throw InvalidInput("score matrix has non-finite entries");
  }
};

struct Exclusion {
  std::string source_id;
  std::string side;     // gallery / probe
  std::string channel;  // static / dynamic
};

/// Raw cosine matrices of both channels after removing signatures with a
/// zero-norm feature, plus the min-max normalizers fitted on them.
struct ChannelScores {
  Eigen::MatrixXd sta, dyn;
  std::vector<SignatureRecord> gallery, probe;  // survivors, in input order
  std::vector<Exclusion> excluded;
  FusionNormalizer norm;
  std::vector<std::string> warnings;
};

inline ChannelScores raw_scores(std::span<const SignatureRecord> gallery, std::span<const SignatureRecord> probe) {
  if (gallery.empty() || probe.empty()) throw InvalidInput("score matrix needs a non-empty gallery and probe");
  ChannelScores cs;
  auto keep = [&](std::span<const SignatureRecord> in, const char* side, std::vector<SignatureRecord>& out) {
    for (const auto& r : in) {
      bool ok = true;
      if (r.sig.f_sta.size() == 0 || r.sig.f_sta.squaredNorm() == 0) {
        cs.excluded.push_back({r.source_id, side, "static"});
        ok = false;
      }
      if (r.sig.f_dyn.size() == 0 || r.sig.f_dyn.squaredNorm() == 0) {
        cs.excluded.push_back({r.source_id, side, "dynamic"});
        ok = false;
      }
      if (ok) out.push_back(r);
    }
  };
  keep(gallery, "gallery", cs.gallery);
  keep(probe, "probe", cs.probe);
  if (cs.gallery.empty() || cs.probe.empty())
    throw UndefinedCosine("every " + std::string(cs.gallery.empty() ? "gallery" : "probe") +
                          " signature has a zero-norm feature");
  const auto G = static_cast<Eigen::Index>(cs.gallery.size()), P = static_cast<Eigen::Index>(cs.probe.size());
  cs.sta.resize(G, P);
  cs.dyn.resize(G, P);
  for (Eigen::Index i = 0; i < G; ++i)
    for (Eigen::Index j = 0; j < P; ++j) {
      cs.sta(i, j) = cosine(cs.gallery[i].sig.f_sta, cs.probe[j].sig.f_sta);
      cs.dyn(i, j) = cosine(cs.gallery[i].sig.f_dyn, cs.probe[j].sig.f_dyn);
    }
  cs.norm = {MinMax::fit(cs.sta), MinMax::fit(cs.dyn)};
  if (cs.norm.sta.constant()) cs.warnings.push_back("static score matrix is constant; normalized to 0.5");
  if (cs.norm.dyn.constant()) cs.warnings.push_back("dynamic score matrix is constant; normalized to 0.5");
  return cs;
}

inline ScoreMatrix labelled_matrix(const ChannelScores& cs, Channel ch, double alpha) {
  ScoreMatrix m;
  m.channel = ch;
  m.alpha = alpha;
  for (const auto& r : cs.gallery) {
    m.gallery_labels.push_back(r.subject_id);
    m.gallery_views.push_back(r.view_deg);
    m.gallery_ids.push_back(r.source_id);
  }
  for (const auto& r : cs.probe) {
    m.probe_labels.push_back(r.subject_id);
    m.probe_views.push_back(r.view_deg);
    m.probe_ids.push_back(r.source_id);
  }
  return m;
}

/// Min-max normalized scores of one channel, or their fusion.
inline ScoreMatrix channel_matrix(const ChannelScores& cs, Channel ch, double alpha = 0.5) {
  check_alpha(alpha);
  ScoreMatrix m = labelled_matrix(cs, ch, alpha);
  m.scores.resize(cs.sta.rows(), cs.sta.cols());
  for (Eigen::Index i = 0; i < cs.sta.rows(); ++i)
    for (Eigen::Index j = 0; j < cs.sta.cols(); ++j) {
      const double s = cs.norm.sta(cs.sta(i, j)), d = cs.norm.dyn(cs.dyn(i, j));
      m.scores(i, j) = ch == Channel::kStatic ? s : ch == Channel::kDynamic ? d : fuse(s, d, alpha);
    }
  return m;
}

/// Entry (i, j) = match_score(g_i, p_j, alpha) with normalizers fitted on this
/// gallery x probe population.
inline ScoreMatrix build_score_matrix(std::span<const SignatureRecord> gallery, std::span<const SignatureRecord> probe,
                                      double alpha, std::vector<Exclusion>* excluded = nullptr) {
  const ChannelScores cs = raw_scores(gallery, probe);
  if (excluded) *excluded = cs.excluded;
  return channel_matrix(cs, Channel::kFused, alpha);
}

// ---------------------------------------------------------------------------
// Identification

struct RankResult {
  double accuracy = 0;
  int ties = 0;
  int n_probes = 0;
};

namespace detail {

struct SubjectScore {
  std::string subject;
  double score;
  int order;  // tie-break key: smaller wins
};

/// Gallery subjects with their aggregated score for probe column j.
inline std::vector<SubjectScore> subject_scores(const ScoreMatrix& m, int j, Aggregation agg) {
  std::map<std::string, std::size_t> slot;
  std::vector<SubjectScore> out;
  std::vector<int> counts;
  for (int i = 0; i < m.n_gallery(); ++i) {
    const double s = m.scores(i, j);
    auto [it, fresh] = slot.try_emplace(m.gallery_labels[i], out.size());
    if (fresh) {
      out.push_back({m.gallery_labels[i], s, i});
      counts.push_back(1);
      continue;
    }
    auto& e = out[it->second];
    ++counts[it->second];
    if (agg == Aggregation::kMax) {
      if (s > e.score) e.score = s, e.order = i;
    } else {
      e.score += s;
    }
  }
  if (agg == Aggregation::kMean)
    for (std::size_t k = 0; k < out.size(); ++k) out[k].score /= counts[k];
  return out;
}

inline bool ahead(const SubjectScore& a, const SubjectScore& b) {
  return a.score > b.score || (a.score == b.score && a.order < b.order);
}

inline void require_probe_subjects(const ScoreMatrix& m) {
  std::set<std::string> g(m.gallery_labels.begin(), m.gallery_labels.end());
  for (const auto& p : m.probe_labels)
    if (!g.count(p)) throw ProtocolError("probe subject '" + p + "' has no gallery entry");
}

}  // namespace detail

/// Fraction of probes whose best gallery subject is correct. Each subject
/// scores the max (or mean) over its gallery clips; equal scores go to the
/// subject reached at the smaller gallery index, and such ties are counted.
inline RankResult rank1(const ScoreMatrix& m, Aggregation agg = Aggregation::kMax) {
  m.check();
  detail::require_probe_subjects(m);
  RankResult r;
  r.n_probes = m.n_probe();
  int hits = 0;
  for (int j = 0; j < m.n_probe(); ++j) {
    const auto subs = detail::subject_scores(m, j, agg);
    const auto best = std::min_element(subs.begin(), subs.end(), detail::ahead);
    const auto top = std::count_if(subs.begin(), subs.end(), [&](const auto& s) { return s.score == best->score; });
    if (top > 1) ++r.ties;
    if (best->subject == m.probe_labels[j]) ++hits;
  }
  r.accuracy = static_cast<double>(hits) / m.n_probe();
  return r;
}

/// cmc[k-1] = fraction of probes whose true subject is among the top k.
inline std::vector<double> cmc(const ScoreMatrix& m, int max_rank, Aggregation agg = Aggregation::kMax) {
  if (max_rank < 1) throw InvalidInput("cmc: max_rank must be at least 1");
  m.check();
  detail::require_probe_subjects(m);
  std::vector<double> curve(max_rank, 0.0);
  for (int j = 0; j < m.n_probe(); ++j) {
    const auto subs = detail::subject_scores(m, j, agg);
    const auto truth = std::find_if(subs.begin(), subs.end(), [&](const auto& s) { return s.subject == m.probe_labels[j]; });
    const auto rank = 1 + std::count_if(subs.begin(), subs.end(), [&](const auto& s) { return detail::ahead(s, *truth); });
    for (auto k = rank; k <= max_rank; ++k) curve[k - 1] += 1;
  }
  for (auto& v : curve) v /= m.n_probe();
  return curve;
}

// ---------------------------------------------------------------------------
// Verification

struct VerificationPoint {
  double far_target = 0;
  double threshold = 0;  // +inf when nothing may be accepted
  double far = 0;        // achieved
  double tar = 0;
};

/// Genuine = same-subject entries, impostor = the rest. For each target the
/// threshold is the smallest candidate (any score, or +inf) whose empirical
/// FAR = #impostor >= t / #impostor does not exceed the target; TAR is the
/// fraction of genuine scores >= t.
inline std::vector<VerificationPoint> verification(const ScoreMatrix& m, std::span<const double> far_points) {
  m.check();
  std::vector<double> gen, imp;
  for (int i = 0; i < m.n_gallery(); ++i)
    for (int j = 0; j < m.n_probe(); ++j)
      (m.gallery_labels[i] == m.probe_labels[j] ? gen : imp).push_back(m.scores(i, j));
  if (imp.empty()) throw UndefinedFar("no impostor pairs; FAR is undefined");
  if (gen.empty()) throw InvalidInput("no genuine pairs; TAR is undefined");
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());
  std::vector<double> cand(gen);
  cand.insert(cand.end(), imp.begin(), imp.end());
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  cand.push_back(std::numeric_limits<double>::infinity());

  auto at_least = [](const std::vector<double>& sorted, double t) {
    return static_cast<double>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
  };
  std::vector<VerificationPoint> out;
  for (double target : far_points) {
    if (!(target >= 0 && target <= 1)) throw InvalidInput("FAR target must lie in [0, 1]");
    // FAR is non-increasing in the threshold: binary search for the first
    // candidate that satisfies the target.
    std::size_t lo = 0, hi = cand.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (at_least(imp, cand[mid]) / imp.size() <= target) hi = mid;
      else lo = mid + 1;
    }
    const double t = cand[lo];
    out.push_back({target, t, at_least(imp, t) / imp.size(), at_least(gen, t) / gen.size()});
  }
  return out;
}

inline std::vector<double> tar_at_far(const ScoreMatrix& m, std::span<const double> far_points) {
  std::vector<double> out;
  for (const auto& p : verification(m, far_points)) out.push_back(p.tar);
  return out;
}

// ---------------------------------------------------------------------------
// Protocol evaluation

struct ViewCell {
  double gallery_view = 0, probe_view = 0;
  double rank1 = 0;
};

struct EvalResult {
  std::string protocol;
  std::string channel;
  double alpha = 0.5;
  int n_gallery = 0, n_probe = 0;
  RankResult rank;
  std::vector<double> cmc;
  std::vector<VerificationPoint> verification;
  std::optional<std::string> verification_error;
  std::vector<ViewCell> per_view;
  std::optional<double> per_view_mean;
  std::vector<Exclusion> excluded;
  std::vector<std::string> warnings;
};

inline constexpr int kCmcRanks = 5;

/// Submatrix restricted to one gallery view and one probe view.
inline std::optional<ScoreMatrix> view_slice(const ScoreMatrix& m, double gv, double pv) {
  std::vector<int> gi, pj;
  for (int i = 0; i < m.n_gallery(); ++i)
    if (m.gallery_views[i] == gv) gi.push_back(i);
  for (int j = 0; j < m.n_probe(); ++j)
    if (m.probe_views[j] == pv) pj.push_back(j);
  if (gi.empty() || pj.empty()) return std::nullopt;
  ScoreMatrix s;
  s.channel = m.channel;
  s.alpha = m.alpha;
  s.scores.resize(static_cast<Eigen::Index>(gi.size()), static_cast<Eigen::Index>(pj.size()));
  for (std::size_t a = 0; a < gi.size(); ++a) {
    s.gallery_labels.push_back(m.gallery_labels[gi[a]]);
    s.gallery_views.push_back(gv);
    for (std::size_t b = 0; b < pj.size(); ++b) s.scores(a, b) = m.scores(gi[a], pj[b]);
  }
  for (int j : pj) {
    s.probe_labels.push_back(m.probe_labels[j]);
    s.probe_views.push_back(pv);
  }
  return s;
}

inline EvalResult metrics_of(const ProtocolSpec& p, const ScoreMatrix& m) {
  EvalResult r;
  r.protocol = p.name;
  r.channel = channel_name(m.channel);
  r.alpha = m.alpha;
  r.n_gallery = m.n_gallery();
  r.n_probe = m.n_probe();
  r.rank = rank1(m, p.aggregation);
  r.cmc = cmc(m, kCmcRanks, p.aggregation);
  try {
    r.verification = verification(m, p.far_points);
  } catch (const Error& e) {
    if (p.metric == "tar_at_far") throw;
    r.verification_error = e.what();
  }
  if (p.per_view) {
    std::set<double> gviews(m.gallery_views.begin(), m.gallery_views.end());
    std::set<double> pviews(m.probe_views.begin(), m.probe_views.end());
    double sum = 0;
    for (double pv : pviews)
      for (double gv : gviews) {
        if (p.exclude_same_view && gv == pv) continue;
        auto s = view_slice(m, gv, pv);
        if (!s) continue;
        std::set<std::string> have(s->gallery_labels.begin(), s->gallery_labels.end());
        if (!std::all_of(s->probe_labels.begin(), s->probe_labels.end(), [&](const auto& l) { return have.count(l) > 0; })) {
          r.warnings.push_back("view cell " + std::to_string(gv) + "/" + std::to_string(pv) +
                               " skipped: a probe subject is missing from that gallery view");
          continue;
        }
        r.per_view.push_back({gv, pv, rank1(*s, p.aggregation).accuracy});
        sum += r.per_view.back().rank1;
      }
    if (!r.per_view.empty()) r.per_view_mean = sum / r.per_view.size();
  }
  return r;
}

inline EvalResult evaluate(const ProtocolSpec& p, const ChannelScores& cs, Channel ch, double alpha) {
  EvalResult r = metrics_of(p, channel_matrix(cs, ch, alpha));
  r.excluded = cs.excluded;
  r.warnings.insert(r.warnings.begin(), cs.warnings.begin(), cs.warnings.end());
  return r;
}

inline EvalResult evaluate(const ProtocolSpec& p, std::span<const SignatureRecord> gallery,
                           std::span<const SignatureRecord> probe, double alpha) {
  return evaluate(p, raw_scores(gallery, probe), Channel::kFused, alpha);
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j = {{"protocol", r.protocol},
                      {"channel", r.channel},
                      {"alpha", r.alpha},
                      {"n_gallery", r.n_gallery},
                      {"n_probe", r.n_probe},
                      {"rank1", r.rank.accuracy},
                      {"rank1_ties", r.rank.ties},
                      {"cmc", r.cmc}};
  nlohmann::json tar = nlohmann::json::array();
  for (const auto& v : r.verification)
    tar.push_back({{"far_target", v.far_target},
                   {"threshold", std::isfinite(v.threshold) ? nlohmann::json(v.threshold) : nlohmann::json("inf")},
                   {"far", v.far},
                   {"tar", v.tar}});
  j["tar_at_far"] = tar;
  if (r.verification_error) j["tar_at_far_error"] = *r.verification_error;
  if (!r.per_view.empty()) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.per_view) cells.push_back({{"gallery_view", c.gallery_view}, {"probe_view", c.probe_view}, {"rank1", c.rank1}});
    j["per_view"] = cells;
    j["per_view_mean_rank1"] = *r.per_view_mean;
  }
  nlohmann::json ex = nlohmann::json::array();
  for (const auto& e : r.excluded) ex.push_back({{"source_id", e.source_id}, {"side", e.side}, {"channel", e.channel}});
  j["excluded"] = ex;
  j["warnings"] = r.warnings;
  return j;
}

// ---------------------------------------------------------------------------
// Sweeps

struct AlphaRow {
  double alpha = 0;
  EvalResult result;
};

inline std::vector<AlphaRow> alpha_sweep(const ProtocolSpec& p, const ChannelScores& cs, std::span<const double> alphas) {
  std::vector<AlphaRow> rows;
  for (double a : alphas) rows.push_back({a, evaluate(p, cs, Channel::kFused, a)});
  return rows;
}

/// `steps` + 1 evenly spaced values from 0 to 1 inclusive.
inline std::vector<double> alpha_grid(int steps) {
  if (steps < 1) throw InvalidInput("alpha grid needs at least one step");
  std::vector<double> g;
  for (int i = 0; i <= steps; ++i) g.push_back(static_cast<double>(i) / steps);
  return g;
}

struct DurationRow {
  double fraction = 0;
  int min_frames = 0, max_frames = 0;
  double mean_frames = 0;
  EvalResult result;
};

/// Gallery clips use their whole length; probe signatures come from leading
/// fractions of each probe clip.
inline std::vector<DurationRow> duration_sweep(const ProtocolSpec& p, std::span<const SignatureRecord> gallery,
                                               std::span<const Clip> probe_clips,
                                               std::span<const ClipFeatures> probe_features,
                                               std::span<const double> fractions, double alpha) {
  if (probe_clips.size() != probe_features.size()) throw ShapeError("duration sweep: features do not match clips");
  std::vector<DurationRow> rows;
  for (double f : fractions) {
    DurationRow row;
    row.fraction = f;
    row.min_frames = std::numeric_limits<int>::max();
    std::vector<SignatureRecord> probes;
    for (std::size_t i = 0; i < probe_clips.size(); ++i) {
      const int n = static_cast<int>(probe_features[i].features.rows());
      const int k = prefix_frames(f, n);
      probes.push_back(make_record(probe_clips[i], signature_from(probe_features[i], k)));
      row.min_frames = std::min(row.min_frames, k);
      row.max_frames = std::max(row.max_frames, k);
      row.mean_frames += k;
    }
    row.mean_frames /= static_cast<double>(probes.size());
    row.result = evaluate(p, gallery, probes, alpha);
    rows.push_back(std::move(row));
  }
  return rows;
}

template <typename T>
std::vector<DurationRow> duration_sweep(const ProtocolSpec& p, std::span<const Clip> gallery_clips,
                                        std::span<const Clip> probe_clips, const GaitNet<T>& net,
                                        std::span<const double> fractions, double alpha) {
  const auto gallery = extract_all(gallery_clips, net);
  std::vector<ClipFeatures> feats;
  for (const auto& c : probe_clips) feats.push_back(clip_features(c, net));
  return duration_sweep(p, gallery, probe_clips, feats, fractions, alpha);
}

// ---------------------------------------------------------------------------
// Tabular output

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char c : s) o += c == '"' ? std::string("\"\"") : std::string(1, c);
  return o + "\"";
}

inline std::string score_matrix_csv(const ScoreMatrix& m) {
  std::ostringstream os;
  os << std::setprecision(17) << "gallery";
  for (int j = 0; j < m.n_probe(); ++j) os << ',' << csv_escape(m.probe_ids.empty() ? m.probe_labels[j] : m.probe_ids[j]);
  os << '\n';
  for (int i = 0; i < m.n_gallery(); ++i) {
    os << csv_escape(m.gallery_ids.empty() ? m.gallery_labels[i] : m.gallery_ids[i]);
    for (int j = 0; j < m.n_probe(); ++j) os << ',' << m.scores(i, j);
    os << '\n';
  }
  return os.str();
}

inline std::string metric_row_csv(double key, const EvalResult& r) {
  std::ostringstream os;
  os << std::setprecision(17) << key << ',' << r.rank.accuracy << ',' << r.rank.ties;
  for (const auto& v : r.verification) os << ',' << v.tar;
  return os.str();
}

inline std::string metric_header_csv(const std::string& key, const ProtocolSpec& p) {
  std::string h = key + ",rank1,ties";
  for (double f : p.far_points) {
    std::ostringstream os;
    os << f;
    h += ",tar_at_far_" + os.str();
  }
  return h;
}

}  // namespace gaitdis
