#pragma once

// Training objectives. Each loss returns its value and, when a gradient sink
// is supplied, the gradient w.r.t. its inputs and any classifier it uses.
// Losses never mutate their arguments.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gaitdis/core/error.hpp"
#include "gaitdis/core/linalg.hpp"
#include "gaitdis/layers.hpp"
#include "gaitdis/nets.hpp"

namespace gaitdis {

/// Which features build the cross-reconstruction decoder input.
///   kSourceAppearance: D(f_a^{t1}, f_c^{t1}, f_p^{t2}) -> x^{t2}
///   kTargetAppearance: D(f_a^{t2}, f_c^{t1}, f_p^{t1}) -> x^{t2}
enum class CrossReconConvention { kSourceAppearance, kTargetAppearance };
inline constexpr CrossReconConvention kCrossReconConvention = CrossReconConvention::kSourceAppearance;

struct LossWeights {
  double lambda_r = 1.0;
  double lambda_d = 1.0;
  double lambda_s = 1.0;
};

template <typename T>
struct LinearGrad {
  MatX<T> d_weight;
  VecX<T> d_bias;

  LinearGrad() = default;
  explicit LinearGrad(const Linear<T>& l) : d_weight(MatX<T>::Zero(l.out, l.in)), d_bias(VecX<T>::Zero(l.out)) {}

  void add_to(Linear<T>& l) const {
    l.weight.gmat(l.out, l.in) += d_weight;
    for (int i = 0; i < l.out; ++i) l.bias.grad[i] += d_bias[i];
  }
};

namespace detail {

template <typename T>
MatX<T> logits_of(const Linear<T>& cls, const MatX<T>& x) {
  return cls.forward(x);
}

/// Per-row -log softmax(logits)[label] and d/dlogits.
template <typename T>
VecX<T> nll_rows(const MatX<T>& logits, int label, MatX<T>* dlogits) {
  if (label < 0 || label >= logits.cols()) throw InvalidInput("subject label outside classifier range");
  VecX<T> out(logits.rows());
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T m = logits.row(r).maxCoeff();
    const auto shifted = (logits.row(r).array() - m);
    const T lse = std::log(shifted.exp().sum());
    out[r] = lse - shifted(label);
    if (dlogits) {
      dlogits->row(r) = (shifted - lse).exp().matrix();
      (*dlogits)(r, label) -= T(1);
    }
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cross reconstruction

/// Decoder input for reconstructing the target frame from a source frame.
template <typename T>
VecX<T> cross_decoder_input(const VecX<T>& f_src, const VecX<T>& f_tgt,
                            CrossReconConvention conv = kCrossReconConvention) {
  VecX<T> z(kFeatureDim);
  const VecX<T>& a = conv == CrossReconConvention::kSourceAppearance ? f_src : f_tgt;
  const VecX<T>& p = conv == CrossReconConvention::kSourceAppearance ? f_tgt : f_src;
  z.segment(kAppearanceOffset, kAppearanceDim) = a.segment(kAppearanceOffset, kAppearanceDim);
  z.segment(kCanonicalOffset, kCanonicalDim) = f_src.segment(kCanonicalOffset, kCanonicalDim);
  z.segment(kPoseOffset, kPoseDim) = p.segment(kPoseOffset, kPoseDim);
  return z;
}

/// Mean squared error and (optionally) its gradient w.r.t. pred.
template <typename T>
T mse(const VecX<T>& pred, const VecX<T>& target, VecX<T>* d_pred = nullptr) {
  if (pred.size() != target.size() || pred.size() == 0) throw ShapeError("mse: size mismatch");
  const VecX<T> diff = pred - target;
  if (d_pred) *d_pred = diff * (T(2) / static_cast<T>(diff.size()));
  return diff.squaredNorm() / static_cast<T>(diff.size());
}

template <typename T>
struct FrameSample {
  std::string clip_id;
  int t = 0;
  VecX<T> features;  // 320
  VecX<T> pixels;    // target frame, any fixed layout the decoder produces
};

/// Symmetric cross reconstruction: the mean of the (a -> b) and (b -> a)
/// reconstruction errors. `decode` maps a 320-vector to a pixel vector.
template <typename T, typename Decode>
T cross_recon_loss(const FrameSample<T>& a, const FrameSample<T>& b, Decode&& decode,
                   CrossReconConvention conv = kCrossReconConvention) {
  if (a.clip_id != b.clip_id) throw PairingError("cross reconstruction needs two frames of the same clip");
  const T ab = mse<T>(decode(cross_decoder_input<T>(a.features, b.features, conv)), b.pixels);
  const T ba = mse<T>(decode(cross_decoder_input<T>(b.features, a.features, conv)), a.pixels);
  return (ab + ba) / T(2);
}

// ---------------------------------------------------------------------------
// Pose similarity

template <typename T>
struct PoseSimGrad {
  MatX<T> d_seq1, d_seq2;
};

/// ||mean(seq1) - mean(seq2)||^2; rows are per-frame pose features.
template <typename T>
T pose_sim_loss(const MatX<T>& seq1, const MatX<T>& seq2, PoseSimGrad<T>* grad = nullptr) {
  if (seq1.rows() == 0 || seq2.rows() == 0) throw InvalidInput("pose_sim_loss: empty sequence");
  if (seq1.cols() != seq2.cols()) throw ShapeError("pose_sim_loss: width mismatch");
  const VecX<T> diff = seq1.colwise().mean().transpose() - seq2.colwise().mean().transpose();
  if (grad) {
    grad->d_seq1 = (T(2) / static_cast<T>(seq1.rows()) * diff).transpose().replicate(seq1.rows(), 1);
    grad->d_seq2 = (T(-2) / static_cast<T>(seq2.rows()) * diff).transpose().replicate(seq2.rows(), 1);
  }
  return diff.squaredNorm();
}

// ---------------------------------------------------------------------------
// Canonical consistency

template <typename T>
struct CanoConsResult {
  T value = 0;
  T within = 0;    // consistency across frames of the first video
  T across = 0;    // consistency across the two videos, frame by frame
  T identity = 0;  // classification of the first video's frames
  bool truncated = false;
};

template <typename T>
struct CanoConsGrad {
  MatX<T> d_seq1, d_seq2;
  LinearGrad<T> d_cls;
};

/// seq1 / seq2: per-frame canonical features of two videos of one subject
/// under different conditions (n1 x d, n2 x d).
///   within   = 1/n1^2 * sum_{i != j} ||c1_i - c1_j||^2
///   across   = 1/m    * sum_{i < m} ||c1_i - c2_i||^2,  m = min(n1, n2)
///   identity = 1/n1   * sum_i -log C_sg(c1_i)[subject]
template <typename T>
CanoConsResult<T> cano_cons_loss(const MatX<T>& seq1, const MatX<T>& seq2, int subject, const Linear<T>& cls,
                                 CanoConsGrad<T>* grad = nullptr) {
  const auto n1 = seq1.rows(), n2 = seq2.rows();
  if (n1 == 0 || n2 == 0) throw InvalidInput("cano_cons_loss: empty sequence");
  if (seq1.cols() != seq2.cols()) throw ShapeError("cano_cons_loss: width mismatch");
  const auto m = std::min(n1, n2);
  const T nn = static_cast<T>(n1);
  CanoConsResult<T> r;
  r.truncated = n2 < n1;

  const VecX<T> sum = seq1.colwise().sum().transpose();
  T pair_sum = 0;
  for (Eigen::Index i = 0; i < n1; ++i)
    for (Eigen::Index j = 0; j < n1; ++j)
      if (i != j) pair_sum += (seq1.row(i) - seq1.row(j)).squaredNorm();
  r.within = pair_sum / (nn * nn);
  const MatX<T> diff = seq1.topRows(m) - seq2.topRows(m);
  r.across = diff.squaredNorm() / static_cast<T>(m);

  MatX<T> dlogits;
  const VecX<T> nll = detail::nll_rows<T>(detail::logits_of(cls, seq1), subject, grad ? &dlogits : nullptr);
  r.identity = nll.sum() / nn;
  r.value = r.within + r.across + r.identity;

  if (grad) {
    grad->d_seq1 = (T(4) / (nn * nn)) * (nn * seq1 - sum.transpose().replicate(n1, 1));
    grad->d_seq1.topRows(m) += (T(2) / static_cast<T>(m)) * diff;
    grad->d_seq2 = MatX<T>::Zero(n2, seq2.cols());
    grad->d_seq2.topRows(m) = (T(-2) / static_cast<T>(m)) * diff;
    dlogits /= nn;
    grad->d_cls.d_weight = dlogits.transpose() * seq1;
    grad->d_cls.d_bias = dlogits.colwise().sum().transpose();
    grad->d_seq1 += dlogits * cls.weight.mat(cls.out, cls.in);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Identity losses over LSTM outputs

/// f_dyn-gait at step t (1-based): the mean of the first t LSTM outputs.
template <typename T>
VecX<T> dyn_gait(const MatX<T>& h_seq, int t) {
  if (t < 1 || t > h_seq.rows()) throw InvalidInput("dyn_gait: step outside sequence");
  VecX<T> acc = VecX<T>::Zero(h_seq.cols());
  for (int s = 0; s < t; ++s) acc += h_seq.row(s).transpose();
  return acc / static_cast<T>(t);
}

enum class IdLoss { kSingle, kAvg, kIncAvg };

template <typename T>
struct IdGrad {
  MatX<T> d_h;
  LinearGrad<T> d_cls;
};

/// kSingle:  -log C_dg(h^n)[k]
/// kAvg:     -log C_dg(f_dyn^n)[k]
/// kIncAvg:  sum_t w_t * -log C_dg(f_dyn^t)[k] / sum_t w_t,  w_t = t^2
template <typename T>
T identity_loss(IdLoss kind, const MatX<T>& h_seq, int subject, const Linear<T>& cls, IdGrad<T>* grad = nullptr) {
  const int n = static_cast<int>(h_seq.rows());
  if (n == 0) throw InvalidInput("identity loss: empty sequence");
  if (h_seq.cols() != cls.in) throw ShapeError("identity loss: feature width does not match classifier");

  // Rows that feed the classifier and their weights.
  MatX<T> feats;
  AlignedVector<T> weights;
  if (kind == IdLoss::kIncAvg) {
    feats.resize(n, h_seq.cols());
    VecX<T> acc = VecX<T>::Zero(h_seq.cols());
    T wsum = 0;
    for (int t = 1; t <= n; ++t) {
      acc += h_seq.row(t - 1).transpose();
      feats.row(t - 1) = (acc / static_cast<T>(t)).transpose();
      weights.push_back(static_cast<T>(t) * static_cast<T>(t));
      wsum += weights.back();
    }
    for (auto& w : weights) w /= wsum;
  } else if (kind == IdLoss::kAvg) {
    feats = dyn_gait<T>(h_seq, n).transpose();
    weights = {T(1)};
  } else {
    feats = h_seq.bottomRows(1);
    weights = {T(1)};
  }

  MatX<T> dlogits;
  const VecX<T> nll = detail::nll_rows<T>(detail::logits_of(cls, feats), subject, grad ? &dlogits : nullptr);
  T loss = 0;
  for (int r = 0; r < nll.size(); ++r) loss += weights[r] * nll[r];
  if (!grad) return loss;

  for (int r = 0; r < dlogits.rows(); ++r) dlogits.row(r) *= weights[r];
  grad->d_cls.d_weight = dlogits.transpose() * feats;
  grad->d_cls.d_bias = dlogits.colwise().sum().transpose();
  const MatX<T> dfeats = dlogits * cls.weight.mat(cls.out, cls.in);
  grad->d_h = MatX<T>::Zero(n, h_seq.cols());
  if (kind == IdLoss::kIncAvg) {
    // feats_t = (1/t) sum_{s<=t} h_s  =>  dh_s = sum_{t>=s} dfeats_t / t
    VecX<T> carry = VecX<T>::Zero(h_seq.cols());
    for (int t = n; t >= 1; --t) {
      carry += dfeats.row(t - 1).transpose() / static_cast<T>(t);
      grad->d_h.row(t - 1) = carry.transpose();
    }
  } else if (kind == IdLoss::kAvg) {
    grad->d_h.rowwise() = dfeats.row(0) / static_cast<T>(n);
  } else {
    grad->d_h.row(n - 1) = dfeats.row(0);
  }
  return loss;
}

template <typename T>
T id_single_loss(const MatX<T>& h, int subject, const Linear<T>& cls, IdGrad<T>* g = nullptr) {
  return identity_loss(IdLoss::kSingle, h, subject, cls, g);
}
template <typename T>
T id_avg_loss(const MatX<T>& h, int subject, const Linear<T>& cls, IdGrad<T>* g = nullptr) {
  return identity_loss(IdLoss::kAvg, h, subject, cls, g);
}
template <typename T>
T id_inc_avg_loss(const MatX<T>& h, int subject, const Linear<T>& cls, IdGrad<T>* g = nullptr) {
  return identity_loss(IdLoss::kIncAvg, h, subject, cls, g);
}

// ---------------------------------------------------------------------------

template <typename T>
struct LossComponents {
  T identity = 0;
  T xrecon = 0;
  T pose_sim = 0;
  T cano_cons = 0;
};

template <typename T>
T total_loss(const LossComponents<T>& c, const LossWeights& w) {
  return c.identity + static_cast<T>(w.lambda_r) * c.xrecon + static_cast<T>(w.lambda_d) * c.pose_sim +
         static_cast<T>(w.lambda_s) * c.cano_cons;
}

}  // namespace gaitdis
