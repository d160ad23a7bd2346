#include <gtest/gtest.h>

#include "support.hpp"

using namespace gaitdis;
using namespace gtest_support;

namespace {

// ---------------------------------------------------------------------------
// Exhaustive oracles over a plain labelled matrix.

struct Plain {
  std::vector<std::vector<double>> s;  // [gallery][probe]
  std::vector<std::string> g, p;
};

ScoreMatrix to_matrix(const Plain& x) {
  ScoreMatrix m;
  m.scores.resize(static_cast<Eigen::Index>(x.g.size()), static_cast<Eigen::Index>(x.p.size()));
  for (std::size_t i = 0; i < x.g.size(); ++i)
    for (std::size_t j = 0; j < x.p.size(); ++j) m.scores(i, j) = x.s[i][j];
  m.gallery_labels = x.g;
  m.probe_labels = x.p;
  m.gallery_views.assign(x.g.size(), 0);
  m.probe_views.assign(x.p.size(), 0);
  return m;
}

// Greedy extraction: repeatedly take the subject of the highest remaining
// entry (first index on ties), skipping subjects already ranked.
std::vector<std::string> oracle_ranking(const Plain& x, std::size_t j) {
  std::vector<std::string> order;
  while (true) {
    int best = -1;
    for (std::size_t i = 0; i < x.g.size(); ++i) {
      if (std::find(order.begin(), order.end(), x.g[i]) != order.end()) continue;
      if (best < 0 || x.s[i][j] > x.s[best][j]) best = static_cast<int>(i);
    }
    if (best < 0) return order;
    order.push_back(x.g[best]);
  }
}

double oracle_rank1(const Plain& x, int* ties) {
  int hits = 0;
  *ties = 0;
  for (std::size_t j = 0; j < x.p.size(); ++j) {
    const auto order = oracle_ranking(x, j);
    hits += order[0] == x.p[j];
    // Tie when another subject also reaches the overall maximum.
    double top = -1e300;
    for (std::size_t i = 0; i < x.g.size(); ++i) top = std::max(top, x.s[i][j]);
    std::set<std::string> at_top;
    for (std::size_t i = 0; i < x.g.size(); ++i)
      if (x.s[i][j] == top) at_top.insert(x.g[i]);
    *ties += at_top.size() > 1;
  }
  return static_cast<double>(hits) / static_cast<double>(x.p.size());
}

std::vector<double> oracle_cmc(const Plain& x, int max_rank) {
  std::vector<double> c(max_rank, 0);
  for (std::size_t j = 0; j < x.p.size(); ++j) {
    const auto order = oracle_ranking(x, j);
    for (int k = 1; k <= max_rank; ++k)
      for (int r = 0; r < k && r < static_cast<int>(order.size()); ++r)
        if (order[r] == x.p[j]) {
          c[k - 1] += 1;
          break;
        }
  }
  for (auto& v : c) v /= static_cast<double>(x.p.size());
  return c;
}

double oracle_tar(const Plain& x, double target) {
  std::vector<double> gen, imp, cand;
  for (std::size_t i = 0; i < x.g.size(); ++i)
    for (std::size_t j = 0; j < x.p.size(); ++j) {
      (x.g[i] == x.p[j] ? gen : imp).push_back(x.s[i][j]);
      cand.push_back(x.s[i][j]);
    }
  cand.push_back(std::numeric_limits<double>::infinity());
  double best_t = std::numeric_limits<double>::infinity();
  for (double t : cand) {
    int fa = 0;
    for (double v : imp) fa += v >= t;
    if (static_cast<double>(fa) / static_cast<double>(imp.size()) <= target) best_t = std::min(best_t, t);
  }
  int acc = 0;
  for (double v : gen) acc += v >= best_t;
  return static_cast<double>(acc) / static_cast<double>(gen.size());
}

// Random matrix with coarse scores (so ties happen), every probe subject in
// the gallery, and at least one genuine and one impostor pair.
Plain random_plain(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 6), subj(0, 3), level(0, 9);
  while (true) {
    Plain x;
    const int G = dim(rng), P = dim(rng);
    for (int i = 0; i < G; ++i) x.g.push_back("s" + std::to_string(subj(rng)));
    for (int j = 0; j < P; ++j) x.p.push_back(x.g[std::uniform_int_distribution<int>(0, G - 1)(rng)]);
    x.s.assign(G, std::vector<double>(P));
    for (auto& r : x.s)
      for (auto& v : r) v = level(rng) / 10.0;
    bool gen = false, imp = false;
    for (int i = 0; i < G; ++i)
      for (int j = 0; j < P; ++j) (x.g[i] == x.p[j] ? gen : imp) = true;
    if (gen && imp) return x;
  }
}

SignatureRecord record(const std::string& id, const std::string& subject, std::vector<float> sta,
                       std::vector<float> dyn, double view = 90, const std::string& cond = "c0") {
  SignatureRecord r;
  r.source_id = id;
  r.subject_id = subject;
  r.condition_id = cond;
  r.view_deg = view;
  r.video_index = 1;
  r.sig.f_sta = Eigen::Map<VecX<float>>(sta.data(), static_cast<Eigen::Index>(sta.size()));
  r.sig.f_dyn = Eigen::Map<VecX<float>>(dyn.data(), static_cast<Eigen::Index>(dyn.size()));
  r.sig.n_frames_used = 1;
  return r;
}

std::vector<SignatureRecord> random_records(std::mt19937_64& rng, int n, int subjects, const char* prefix) {
  std::normal_distribution<float> g(0, 1);
  std::vector<SignatureRecord> out;
  for (int i = 0; i < n; ++i) {
    std::vector<float> a(8), b(6);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    out.push_back(record(prefix + std::to_string(i), std::to_string(i % subjects), a, b));
  }
  return out;
}

ProtocolSpec open_protocol() {
  ProtocolSpec p;
  p.name = "test";
  p.test_subjects.ranges = {{0, 1000}};
  p.gallery = {Selector{}};
  p.probe = {Selector{}};
  return p;
}

double plain_cos(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += double(a[i]) * b[i], aa += double(a[i]) * a[i], bb += double(b[i]) * b[i];
  return ab / std::sqrt(aa * bb);
}

}  // namespace

// ---------------------------------------------------------------------------
// Score matrices

TEST(ScoreMatrix, SingleEntryIsHalf) {
  const std::vector<SignatureRecord> g = {record("g", "1", {1, 2}, {3, 4})}, p = {record("p", "1", {2, 1}, {1, 0})};
  const auto m = build_score_matrix(g, p, 0.5);
  EXPECT_EQ(m.scores(0, 0), 0.5);
  EXPECT_EQ(raw_scores(g, p).warnings.size(), 2u);
}

TEST(ScoreMatrix, SelfSimilarityDiagonalIsRowMaximum) {
  std::mt19937_64 rng(3);
  const auto recs = random_records(rng, 6, 6, "r");
  for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
    const auto m = build_score_matrix(recs, recs, alpha);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(m.scores(i, i), m.scores.row(i).maxCoeff()) << alpha;
  }
}

TEST(ScoreMatrix, ThreeByThreeHandComputed) {
  const std::vector<std::vector<float>> gs = {{1, 0, 0}, {1, 1, 0}, {0, 1, 2}}, gd = {{1, 0}, {1, 1}, {0, 2}};
  const std::vector<std::vector<float>> ps = {{0, 0, 1}, {1, 2, 0}, {2, 1, 1}}, pd = {{2, 1}, {0, 1}, {1, -1}};
  std::vector<SignatureRecord> g, p;
  for (int i = 0; i < 3; ++i) {
    g.push_back(record("g" + std::to_string(i), std::to_string(i), gs[i], gd[i]));
    p.push_back(record("p" + std::to_string(i), std::to_string(i), ps[i], pd[i]));
  }
  double smin = 1e9, smax = -1e9, dmin = 1e9, dmax = -1e9;
  double s[3][3], d[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      s[i][j] = plain_cos(gs[i], ps[j]);
      d[i][j] = plain_cos(gd[i], pd[j]);
      smin = std::min(smin, s[i][j]), smax = std::max(smax, s[i][j]);
      dmin = std::min(dmin, d[i][j]), dmax = std::max(dmax, d[i][j]);
    }
  const auto m = build_score_matrix(g, p, 0.5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      EXPECT_NEAR(m.scores(i, j), 0.5 * (s[i][j] - smin) / (smax - smin) + 0.5 * (d[i][j] - dmin) / (dmax - dmin), 1e-9);
}

TEST(ScoreMatrix, ZeroNormSignaturesAreExcludedAndReported) {
  std::mt19937_64 rng(4);
  // Two gallery clips per subject, so every probe subject survives g1's removal.
  auto g = random_records(rng, 6, 3, "g");
  auto p = random_records(rng, 3, 3, "p");
  g[1].sig.f_dyn.setZero();
  p[2].sig.f_sta.setZero();
  std::vector<Exclusion> ex;
  const auto m = build_score_matrix(g, p, 0.5, &ex);
  EXPECT_EQ(m.n_gallery(), 5);
  EXPECT_EQ(m.n_probe(), 2);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].source_id, "g1");
  EXPECT_EQ(ex[0].channel, "dynamic");
  EXPECT_EQ(ex[1].source_id, "p2");
  EXPECT_EQ(ex[1].side, "probe");
  auto all_zero = g;
  for (auto& r : all_zero) r.sig.f_sta.setZero();
  EXPECT_THROW(build_score_matrix(all_zero, p, 0.5), UndefinedCosine);
  const auto res = evaluate(open_protocol(), raw_scores(g, p), Channel::kFused, 0.5);
  EXPECT_EQ(to_json(res).at("excluded").size(), 2u);
}

TEST(ScoreMatrix, ChannelScaleInvariance) {
  std::mt19937_64 rng(5);
  const auto g = random_records(rng, 5, 5, "g"), p = random_records(rng, 4, 5, "p");
  auto g2 = g, p2 = p;
  for (auto& r : g2) r.sig.f_dyn *= 3.5f, r.sig.f_sta *= 0.25f;
  for (auto& r : p2) r.sig.f_dyn *= 0.5f;
  for (double alpha : {0.0, 1.0}) {
    const auto a = build_score_matrix(g, p, alpha), b = build_score_matrix(g2, p2, alpha);
    for (int j = 0; j < 4; ++j) {
      Eigen::Index ia, ib;
      a.scores.col(j).maxCoeff(&ia);
      b.scores.col(j).maxCoeff(&ib);
      EXPECT_EQ(ia, ib);
    }
    EXPECT_LT((a.scores - b.scores).cwiseAbs().maxCoeff(), 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Metric oracles

TEST(MetricOracle, FiftyRandomMatrices) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const Plain x = random_plain(rng);
    const ScoreMatrix m = to_matrix(x);
    int ties = 0;
    const double r1 = oracle_rank1(x, &ties);
    const auto got = rank1(m);
    EXPECT_EQ(got.accuracy, r1) << trial;
    EXPECT_EQ(got.ties, ties) << trial;
    EXPECT_EQ(cmc(m, 4), oracle_cmc(x, 4)) << trial;
    const std::vector<double> fars = {0.0, 0.01, 0.05, 0.2, 0.5, 1.0};
    const auto tars = tar_at_far(m, fars);
    for (std::size_t k = 0; k < fars.size(); ++k) EXPECT_EQ(tars[k], oracle_tar(x, fars[k])) << trial << " far " << fars[k];
  }
}

TEST(MetricOracle, RandomFiveByEightIdentification) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    Plain x;
    for (int i = 0; i < 5; ++i) x.g.push_back(std::to_string(i));
    for (int j = 0; j < 8; ++j) x.p.push_back(std::to_string(j % 5));
    x.s.assign(5, std::vector<double>(8));
    for (auto& r : x.s)
      for (auto& v : r) v = u(rng);
    int ties = 0;
    EXPECT_EQ(rank1(to_matrix(x)).accuracy, oracle_rank1(x, &ties));
  }
}

TEST(MetricOracle, MonotoneTransformsPreserveMetrics) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.5, 3);
  const std::vector<double> fars = {0.01, 0.05, 0.25};
  for (int trial = 0; trial < 20; ++trial) {
    const Plain x = random_plain(rng);
    const double a = u(rng), b = u(rng), c = u(rng) - 1.5;
    Plain y = x;
    for (auto& r : y.s)
      for (auto& v : r) {
        switch (trial % 4) {
          case 0: v = a * v + c; break;
          case 1: v = std::exp(b * v) + c; break;
          case 2: v = std::pow(v + 0.1, a); break;
          default: v = std::atan(b * (v - 0.5)); break;
        }
      }
    const auto mx = to_matrix(x), my = to_matrix(y);
    EXPECT_EQ(rank1(mx).accuracy, rank1(my).accuracy) << trial;
    EXPECT_EQ(rank1(mx).ties, rank1(my).ties) << trial;
    EXPECT_EQ(cmc(mx, 5), cmc(my, 5)) << trial;
    EXPECT_EQ(tar_at_far(mx, fars), tar_at_far(my, fars)) << trial;
  }
}

// ---------------------------------------------------------------------------
// Identification

TEST(Rank1, IdentityAndAdversarialMatrices) {
  Plain x;
  x.g = {"a", "b", "c"};
  x.p = {"a", "b", "c"};
  x.s = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  EXPECT_EQ(rank1(to_matrix(x)).accuracy, 1.0);
  x.s = {{0, 1, 1}, {1, 0, 1}, {1, 1, 0}};
  x.s[1][0] = 2;  // probe a prefers b
  x.s[2][1] = 2;  // probe b prefers c
  x.s[0][2] = 2;  // probe c prefers a
  EXPECT_EQ(rank1(to_matrix(x)).accuracy, 0.0);
}

TEST(Rank1, TiesGoToTheSmallerGalleryIndexAndAreCounted) {
  Plain x;
  x.g = {"b", "a"};
  x.p = {"a"};
  x.s = {{0.7}, {0.7}};
  const auto r = rank1(to_matrix(x));
  EXPECT_EQ(r.accuracy, 0.0);
  EXPECT_EQ(r.ties, 1);
}

TEST(Rank1, MissingProbeSubjectIsAProtocolErrorNamingIt) {
  Plain x;
  x.g = {"a"};
  x.p = {"a", "zed"};
  x.s = {{1, 0}};
  try {
    rank1(to_matrix(x));
    FAIL();
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("zed"), std::string::npos);
  }
}

TEST(Rank1, MeanAggregationSwitch) {
  Plain x;
  x.g = {"a", "a", "b"};
  x.p = {"a"};
  x.s = {{0.9}, {0.1}, {0.6}};
  EXPECT_EQ(rank1(to_matrix(x), Aggregation::kMax).accuracy, 1.0);
  EXPECT_EQ(rank1(to_matrix(x), Aggregation::kMean).accuracy, 0.0);
}

TEST(Cmc, MonotoneAndEndsAtOne) {
  std::mt19937_64 rng(3);
  const Plain x = random_plain(rng);
  const auto c = cmc(to_matrix(x), 6);
  for (std::size_t k = 1; k < c.size(); ++k) EXPECT_GE(c[k], c[k - 1]);
  EXPECT_EQ(c.back(), 1.0);
}

// ---------------------------------------------------------------------------
// Verification

TEST(Verification, PerfectlySeparated) {
  Plain x;
  x.g = {"a", "b", "c", "d"};
  x.p = {"a", "b", "c", "d"};
  x.s.assign(4, std::vector<double>(4, 0.1));
  for (int i = 0; i < 4; ++i) x.s[i][i] = 0.9;
  for (double t : tar_at_far(to_matrix(x), std::vector<double>{0.0, 0.01, 0.05, 0.5})) EXPECT_EQ(t, 1.0);
}

TEST(Verification, FullyInvertedLargeImpostorSet) {
  Plain x;
  for (int i = 0; i < 20; ++i) x.g.push_back(std::to_string(i)), x.p.push_back(std::to_string(i));
  x.s.assign(20, std::vector<double>(20));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.5, 1);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j) x.s[i][j] = i == j ? 0.1 : u(rng);
  EXPECT_EQ(tar_at_far(to_matrix(x), std::vector<double>{0.01})[0], 0.0);
}

TEST(Verification, ThirtyPairHandList) {
  // 10 genuine and 20 impostor pairs as a 30-column, 1-row matrix.
  Plain x;
  x.g = {"g"};
  const std::vector<double> gen = {0.95, 0.9, 0.85, 0.8, 0.7, 0.65, 0.6, 0.5, 0.4, 0.3};
  const std::vector<double> imp = {0.92, 0.75, 0.7, 0.6, 0.55, 0.5, 0.45, 0.4, 0.35, 0.3,
                                   0.3,  0.25, 0.2, 0.2, 0.15, 0.1, 0.1,  0.05, 0.02, 0.01};
  x.s.assign(1, {});
  for (double v : gen) x.p.push_back("g"), x.s[0].push_back(v);
  for (double v : imp) x.p.push_back("i"), x.s[0].push_back(v);
  const auto m = to_matrix(x);
  const std::vector<double> fars = {0.01, 0.05, 0.1, 0.25, 0.5};
  const auto got = verification(m, fars);
  for (std::size_t k = 0; k < fars.size(); ++k) EXPECT_EQ(got[k].tar, oracle_tar(x, fars[k])) << fars[k];
  // By hand: FAR <= 5% admits one impostor (0.92). The smallest score above
  // the next impostor (0.75) is the genuine 0.8, so TAR = 4/10.
  EXPECT_EQ(got[1].threshold, 0.8);
  EXPECT_EQ(got[1].tar, 0.4);
  // FAR <= 1% allows none: t = 0.95 (the smallest score above every impostor).
  EXPECT_EQ(got[0].threshold, 0.95);
  EXPECT_EQ(got[0].tar, 0.1);
  EXPECT_LE(got[3].far, 0.25);
}

TEST(Verification, NoImpostorsIsUndefinedFar) {
  Plain x;
  x.g = {"a"};
  x.p = {"a", "a"};
  x.s = {{0.3, 0.4}};
  EXPECT_THROW(tar_at_far(to_matrix(x), std::vector<double>{0.01}), UndefinedFar);
  x.p = {"b", "c"};
  EXPECT_THROW(tar_at_far(to_matrix(x), std::vector<double>{0.01}), InvalidInput);
}

// ---------------------------------------------------------------------------
// Protocols

TEST(Protocol, JsonParsingAndValidation) {
  const auto j = nlohmann::json::parse(R"({
    "name": "p", "train_subjects": [{"range": [1, 10]}, "x"], "test_subjects": [{"range": [11, 20]}, 25],
    "gallery": {"conditions": ["nm"], "video_indices": [1, 2]},
    "probe": [{"conditions": ["bg"]}, {"conditions": ["cl"], "views": [90]}],
    "far_points": [0.01], "per_view": true, "exclude_same_view": true, "alpha": 0.25, "notes": "x"})");
  const auto p = protocol_from_json(j);
  EXPECT_TRUE(p.train_subjects.contains("7"));
  EXPECT_TRUE(p.train_subjects.contains("x"));
  EXPECT_TRUE(p.test_subjects.contains("25"));
  EXPECT_FALSE(p.test_subjects.contains("7"));
  EXPECT_EQ(p.probe.size(), 2u);
  EXPECT_EQ(*p.alpha, 0.25);
  EXPECT_EQ(protocol_from_json(to_json(p)).name, "p");
  EXPECT_EQ(to_json(protocol_from_json(to_json(p))), to_json(p));

  auto overlap = j;
  overlap["test_subjects"] = nlohmann::json::array({5});
  EXPECT_THROW(protocol_from_json(overlap), ProtocolError);
  auto unknown = j;
  unknown["galery"] = 1;
  EXPECT_THROW(protocol_from_json(unknown), ProtocolError);
  auto bad_far = j;
  bad_far["far_points"] = {1.5};
  EXPECT_THROW(protocol_from_json(bad_far), ProtocolError);
}

TEST(Protocol, SplitIsDisjointAndReproducible) {
  const auto ds = make_dataset(6, 2, 2, 1, {.n_frames = 20});
  const auto clips = clips_of(ds);
  ProtocolSpec p;
  p.name = "s";
  p.train_subjects.ranges = {{1, 4}};
  p.test_subjects.ranges = {{5, 6}};
  p.gallery = {Selector{{"c0"}, {}, {}}};
  p.probe = {Selector{{"c1"}, {}, {}}};
  const auto a = split<Clip>(p, clips), b = split<Clip>(p, clips);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.gallery, b.gallery);
  EXPECT_EQ(a.train.size(), 16u);
  EXPECT_EQ(a.gallery.size(), 4u);
  EXPECT_EQ(a.probe.size(), 4u);
  std::set<std::string> train_subj, test_subj;
  for (int i : a.train) train_subj.insert(clips[i].subject_id);
  for (int i : a.gallery) test_subj.insert(clips[i].subject_id);
  for (int i : a.probe) {
    test_subj.insert(clips[i].subject_id);
    EXPECT_EQ(clips[i].condition_id, "c1");
  }
  for (const auto& s : test_subj) EXPECT_FALSE(train_subj.count(s));
  p.test_subjects.ranges = {{7, 9}};
  EXPECT_THROW(split<Clip>(p, clips), ProtocolError);
}

TEST(Protocol, PerViewCellsExcludeIdenticalViews) {
  std::mt19937_64 rng(8);
  auto g = random_records(rng, 4, 2, "g"), pr = random_records(rng, 4, 2, "p");
  for (int i = 0; i < 4; ++i) g[i].view_deg = pr[i].view_deg = i < 2 ? 0 : 90;
  auto p = open_protocol();
  p.per_view = true;
  p.exclude_same_view = true;
  const auto r = evaluate(p, g, pr, 0.5);
  ASSERT_EQ(r.per_view.size(), 2u);
  for (const auto& c : r.per_view) EXPECT_NE(c.gallery_view, c.probe_view);
  ASSERT_TRUE(r.per_view_mean);
  EXPECT_EQ(*r.per_view_mean, 0.5 * (r.per_view[0].rank1 + r.per_view[1].rank1));
}

// ---------------------------------------------------------------------------
// Sweeps

TEST(AlphaSweep, EndpointsMatchSingleChannelsBitExactly) {
  std::mt19937_64 rng(11);
  const auto g = random_records(rng, 6, 3, "g"), p = random_records(rng, 9, 3, "p");
  const auto cs = raw_scores(g, p);
  const auto spec = open_protocol();
  const auto rows = alpha_sweep(spec, cs, alpha_grid(10));
  ASSERT_EQ(rows.size(), 11u);
  const auto sta = channel_matrix(cs, Channel::kStatic), dyn = channel_matrix(cs, Channel::kDynamic);
  EXPECT_EQ(channel_matrix(cs, Channel::kFused, 0.0).scores, sta.scores);
  EXPECT_EQ(channel_matrix(cs, Channel::kFused, 1.0).scores, dyn.scores);
  auto strip = [](nlohmann::json j) {
    j.erase("channel");
    j.erase("alpha");
    return j;
  };
  EXPECT_EQ(strip(to_json(rows.front().result)), strip(to_json(metrics_of(spec, sta))));
  EXPECT_EQ(strip(to_json(rows.back().result)), strip(to_json(metrics_of(spec, dyn))));
  EXPECT_EQ(alpha_sweep(spec, cs, std::vector<double>{0, 1}).size(), 2u);
}

TEST(DurationSweep, ClampAndFullFraction) {
  std::mt19937_64 rng(12);
  std::normal_distribution<float> n(0, 1);
  const auto gallery = random_records(rng, 4, 4, "g");
  std::vector<Clip> probe_clips;
  std::vector<ClipFeatures> feats;
  for (int i = 0; i < 4; ++i) {
    Clip c;
    c.source_id = "p" + std::to_string(i);
    c.subject_id = std::to_string(i);
    c.condition_id = "c1";
    c.view_deg = 90;
    c.video_index = 1;
    probe_clips.push_back(c);
    ClipFeatures f;
    const int frames = 5 + i;
    f.features.resize(frames, kFeatureDim);
    f.lstm_out.resize(frames, 6);
    for (Eigen::Index k = 0; k < f.features.size(); ++k) f.features.data()[k] = n(rng);
    for (Eigen::Index k = 0; k < f.lstm_out.size(); ++k) f.lstm_out.data()[k] = n(rng);
    feats.push_back(f);
  }
  // Gallery dimensions must agree with the probes.
  std::vector<SignatureRecord> g = gallery;
  for (auto& r : g) {
    r.sig.f_sta = VecX<float>::NullaryExpr(kCanonicalDim, [&] { return n(rng); });
    r.sig.f_dyn = VecX<float>::NullaryExpr(6, [&] { return n(rng); });
  }
  const auto spec = open_protocol();
  const auto rows = duration_sweep(spec, g, probe_clips, feats, std::vector<double>{0.01, 0.5, 1.0}, 0.5);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].min_frames, 1);
  EXPECT_EQ(rows[0].max_frames, 1);
  EXPECT_EQ(rows[1].min_frames, 2);
  EXPECT_EQ(rows[1].max_frames, 4);
  EXPECT_EQ(rows[2].max_frames, 8);
  std::vector<SignatureRecord> full;
  for (std::size_t i = 0; i < 4; ++i)
    full.push_back(make_record(probe_clips[i], signature_from(feats[i], static_cast<int>(feats[i].features.rows()))));
  EXPECT_EQ(to_json(rows[2].result), to_json(evaluate(spec, g, full, 0.5)));
  for (std::size_t k = 1; k < rows.size(); ++k) EXPECT_GE(rows[k].mean_frames, rows[k - 1].mean_frames);
}

TEST(Csv, ScoreMatrixAndMetricRows) {
  Plain x;
  x.g = {"a,1", "b"};
  x.p = {"a,1"};
  x.s = {{0.5}, {0.25}};
  const auto csv = score_matrix_csv(to_matrix(x));
  EXPECT_EQ(csv, "gallery,\"a,1\"\n\"a,1\",0.5\nb,0.25\n");
  const auto spec = open_protocol();
  EXPECT_EQ(metric_header_csv("alpha", spec), "alpha,rank1,ties,tar_at_far_0.01,tar_at_far_0.05");
}
