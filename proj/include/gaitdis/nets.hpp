#pragma once

// Encoder / decoder / LSTM aggregator / identity classifiers.
//
// Encoder (per frame, input 3x64x32):
//   Conv1 3x3/1 -> MaxPool 3x3/2 -> Conv2 3x3/1 -> MaxPool 3x3/2 ->
//   Conv3 3x3/2 -> [Conv4 3x3/2, large model only] -> MaxPool 3x3/2 -> FC 320
// every convolution followed by batch norm and leaky ReLU (0.2). The FC
// output is split as [f_a(128) | f_c(128) | f_p(64)].
//
// Decoder: FC -> d0x4x2 (BN, leaky ReLU) and four 3x3/2 transposed
// convolutions to d1, d2, d3 and 3 channels (BN + leaky ReLU between, sigmoid
// at the end), producing 3x64x32.

#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gaitdis/core/container.hpp"
#include "gaitdis/core/linalg.hpp"
#include "gaitdis/core/tensor.hpp"
#include "gaitdis/layers.hpp"

namespace gaitdis {

inline constexpr int kAppearanceDim = 128;
inline constexpr int kCanonicalDim = 128;
inline constexpr int kPoseDim = 64;
inline constexpr int kFeatureDim = kAppearanceDim + kCanonicalDim + kPoseDim;  // 320
inline constexpr int kAppearanceOffset = 0;
inline constexpr int kCanonicalOffset = kAppearanceDim;
inline constexpr int kPoseOffset = kAppearanceDim + kCanonicalDim;

enum class Mode { kTrain, kEval };

struct NetConfig {
  std::array<int, 4> enc_channels{64, 256, 512, 512};
  std::array<int, 4> dec_channels{512, 256, 128, 64};
  int lstm_hidden = 256;
  int lstm_layers = 3;
  bool large_model = false;

  /// Full convolution widths.
  static NetConfig full(bool large = false) {
    NetConfig c;
    c.large_model = large;
    return c;
  }

  /// Same topology and feature sizes with narrower convolution stacks, for
  /// single-core desk-scale training.
  static NetConfig compact(bool large = false) {
    NetConfig c;
    c.enc_channels = {16, 32, 64, 64};
    c.dec_channels = {64, 32, 16, 16};
    c.large_model = large;
    return c;
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"enc_channels", c.enc_channels},
       {"dec_channels", c.dec_channels},
       {"lstm_hidden", c.lstm_hidden},
       {"lstm_layers", c.lstm_layers},
       {"large_model", c.large_model}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  c.enc_channels = j.at("enc_channels").get<std::array<int, 4>>();
  c.dec_channels = j.at("dec_channels").get<std::array<int, 4>>();
  c.lstm_hidden = j.at("lstm_hidden").get<int>();
  c.lstm_layers = j.at("lstm_layers").get<int>();
  c.large_model = j.at("large_model").get<bool>();
}

/// Convolution (or transposed convolution) + batch norm + leaky ReLU.
template <typename T, typename ConvT>
struct ConvBlock {
  ConvT conv;
  BatchNorm2d<T> bn;

  struct Tape {
    Tensor<T> x, conv_out, bn_out;
    typename BatchNorm2d<T>::Cache bn_cache;
  };

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape* tape) const {
    Tensor<T> c = conv.forward(x);
    typename BatchNorm2d<T>::Cache cache;
    Tensor<T> b = bn.forward(c, mode == Mode::kTrain, &cache);
    Tensor<T> y = b;
    leaky_relu_inplace(y);
    if (tape) *tape = Tape{x, std::move(c), std::move(b), std::move(cache)};
    return y;
  }

  Tensor<T> backward(const Tape& tape, Tensor<T> dy) {
    leaky_relu_backward_inplace(tape.bn_out, dy);
    Tensor<T> dc = bn.backward(tape.conv_out, tape.bn_cache, dy);
    return conv.backward(tape.x, dc);
  }

  void update_running(const Tape& tape) {
    if (tape.bn_cache.training) bn.update_running(tape.conv_out, tape.bn_cache);
  }
};

using LayerShape = std::pair<std::string, std::array<int, 4>>;

template <typename T>
struct EncoderTape {
  std::vector<typename ConvBlock<T, Conv2d<T>>::Tape> blocks;
  std::vector<Tensor<T>> pool_in;
  std::vector<std::vector<int>> pool_argmax;
  MatX<T> fc_in;
  std::vector<LayerShape> shapes;
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  explicit Encoder(const NetConfig& cfg) {
    const auto& c = cfg.enc_channels;
    blocks_.push_back({Conv2d<T>("enc.conv1", 3, c[0], 1), BatchNorm2d<T>("enc.bn1", c[0])});
    blocks_.push_back({Conv2d<T>("enc.conv2", c[0], c[1], 1), BatchNorm2d<T>("enc.bn2", c[1])});
    blocks_.push_back({Conv2d<T>("enc.conv3", c[1], c[2], 2), BatchNorm2d<T>("enc.bn3", c[2])});
    if (cfg.large_model) blocks_.push_back({Conv2d<T>("enc.conv4", c[2], c[3], 2), BatchNorm2d<T>("enc.bn4", c[3])});
    int h = kFrameH_, w = kFrameW_;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      h = blocks_[i].conv.out_h(h);
      w = blocks_[i].conv.out_w(w);
      if (pools_after(i)) h = pool_.out_h(h), w = pool_.out_w(w);
    }
    h = pool_.out_h(h);
    w = pool_.out_w(w);
    fc_in_shape_ = {blocks_.back().conv.out_ch, h, w};
    fc_ = Linear<T>("enc.fc", fc_in_shape_[0] * h * w, kFeatureDim);
  }

  /// frames: N x 3 x 64 x 32. Returns N x 320 features.
  MatX<T> forward(const Tensor<T>& x, Mode mode, EncoderTape<T>* tape = nullptr) const {
    if (x.c() != 3 || x.h() != kFrameH_ || x.w() != kFrameW_)
      throw ShapeError("encoder input must be Nx3x64x32, got " + x.shape_str());
    if (tape) *tape = EncoderTape<T>{};
    Tensor<T> a = x;
    int layer = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      typename ConvBlock<T, Conv2d<T>>::Tape bt;
      a = blocks_[i].forward(a, mode, tape ? &bt : nullptr);
      check(a, layer++);
      if (tape) {
        tape->shapes.push_back({"conv" + std::to_string(i + 1), a.shape()});
        tape->blocks.push_back(std::move(bt));
      }
      if (pools_after(i) || i + 1 == blocks_.size()) {
        std::vector<int> arg;
        Tensor<T> p = pool_.forward(a, tape ? &arg : nullptr);
        if (tape) {
          tape->pool_in.push_back(std::move(a));
          tape->pool_argmax.push_back(std::move(arg));
          tape->shapes.push_back({"maxpool" + std::to_string(tape->pool_in.size()), p.shape()});
        }
        a = std::move(p);
      }
    }
    MatX<T> flat = ConstMatMap<T>(a.data(), a.n(), static_cast<int>(a.per_item()));
    MatX<T> out = fc_.forward(flat);
    if (!out.allFinite()) throw NumericFault("encoder", layer);
    if (tape) {
      tape->fc_in = std::move(flat);
      tape->shapes.push_back({"fc", {static_cast<int>(out.rows()), kFeatureDim, 1, 1}});
    }
    return out;
  }

  /// Backpropagates d(features); returns d(frames).
  Tensor<T> backward(const EncoderTape<T>& tape, const MatX<T>& dfeat) {
    MatX<T> dflat = fc_.backward(tape.fc_in, dfeat);
    const int n = static_cast<int>(dflat.rows());
    Tensor<T> d(n, fc_in_shape_[0], fc_in_shape_[1], fc_in_shape_[2]);
    std::copy(dflat.data(), dflat.data() + dflat.size(), d.data());
    int pool_idx = static_cast<int>(tape.pool_in.size()) - 1;
    for (int i = static_cast<int>(blocks_.size()) - 1; i >= 0; --i) {
      if (pools_after(i) || i + 1 == static_cast<int>(blocks_.size())) {
        d = pool_.backward(tape.pool_in[pool_idx], tape.pool_argmax[pool_idx], d);
        --pool_idx;
      }
      d = blocks_[i].backward(tape.blocks[i], std::move(d));
    }
    return d;
  }

  void update_running(const EncoderTape<T>& tape) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].update_running(tape.blocks[i]);
  }

  template <typename F>
  void visit_params(F&& f) {
    for (auto& b : blocks_) {
      f(b.conv.weight);
      f(b.bn.gamma);
      f(b.bn.beta);
    }
    f(fc_.weight);
    f(fc_.bias);
  }

  template <typename F>
  void visit_buffers(F&& f) {
    for (auto& b : blocks_) {
      f(b.bn.running_mean);
      f(b.bn.running_var);
    }
  }

  void init(Rng& rng) {
    const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
    for (auto& b : blocks_) fill_normal(b.conv.weight.value, gain / std::sqrt(b.conv.in_ch * 9.0), rng);
    fill_normal(fc_.weight.value, 1.0 / std::sqrt(static_cast<double>(fc_.in)), rng);
  }

  std::size_t num_blocks() const { return blocks_.size(); }
  Linear<T>& fc() { return fc_; }

 private:
  static constexpr int kFrameH_ = 64, kFrameW_ = 32;
  // Conv1 and Conv2 are each followed by their own max pool; the final pool
  // follows the last convolution (Conv3 or Conv4).
  static bool pools_after(std::size_t block) { return block < 2; }
  void check(const Tensor<T>& t, int layer) const {
    if (!t.all_finite()) throw NumericFault("encoder", layer);
  }

  std::vector<ConvBlock<T, Conv2d<T>>> blocks_;
  MaxPool2d<T> pool_;
  std::array<int, 3> fc_in_shape_{};
  Linear<T> fc_;
};

template <typename T>
struct DecoderTape {
  MatX<T> z;
  Tensor<T> fc_out, bn0_out;
  typename BatchNorm2d<T>::Cache bn0_cache;
  std::vector<typename ConvBlock<T, ConvTranspose2d<T>>::Tape> blocks;
  Tensor<T> final_in;
  Tensor<T> out;
  std::vector<LayerShape> shapes;
};

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  explicit Decoder(const NetConfig& cfg) : d0_(cfg.dec_channels[0]) {
    const auto& d = cfg.dec_channels;
    fc_ = Linear<T>("dec.fc", kFeatureDim, d[0] * 4 * 2);
    bn0_ = BatchNorm2d<T>("dec.bn0", d[0]);
    for (int i = 0; i < 3; ++i)
      blocks_.push_back({ConvTranspose2d<T>("dec.tconv" + std::to_string(i + 1), d[i], d[i + 1]),
                         BatchNorm2d<T>("dec.bn" + std::to_string(i + 1), d[i + 1])});
    final_ = ConvTranspose2d<T>("dec.tconv4", d[3], 3, true);
  }

  /// z: N x 320. Returns N x 3 x 64 x 32 in (0, 1).
  Tensor<T> forward(const MatX<T>& z, Mode mode, DecoderTape<T>* tape = nullptr) const {
    if (z.cols() != kFeatureDim) throw ShapeError("decoder input must have 320 columns");
    const int n = static_cast<int>(z.rows());
    MatX<T> f = fc_.forward(z);
    Tensor<T> a(n, d0_, 4, 2);
    std::copy(f.data(), f.data() + f.size(), a.data());
    typename BatchNorm2d<T>::Cache c0;
    Tensor<T> b0 = bn0_.forward(a, mode == Mode::kTrain, &c0);
    Tensor<T> h = b0;
    leaky_relu_inplace(h);
    check(h, 0);
    if (tape) {
      *tape = DecoderTape<T>{};
      tape->z = z;
      tape->shapes.push_back({"fc", h.shape()});
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      typename ConvBlock<T, ConvTranspose2d<T>>::Tape bt;
      h = blocks_[i].forward(h, mode, tape ? &bt : nullptr);
      check(h, static_cast<int>(i) + 1);
      if (tape) {
        tape->shapes.push_back({"tconv" + std::to_string(i + 1), h.shape()});
        tape->blocks.push_back(std::move(bt));
      }
    }
    Tensor<T> out = final_.forward(h);
    for (auto& v : out.vec()) v = sigmoid(v);
    check(out, 4);
    if (tape) {
      tape->fc_out = std::move(a);
      tape->bn0_out = std::move(b0);
      tape->bn0_cache = std::move(c0);
      tape->final_in = std::move(h);
      tape->out = out;
      tape->shapes.push_back({"tconv4", out.shape()});
    }
    return out;
  }

  /// Backpropagates d(output); returns d(z).
  MatX<T> backward(const DecoderTape<T>& tape, const Tensor<T>& dout) {
    Tensor<T> d = dout;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const T s = tape.out.data()[i];
      d.data()[i] *= s * (T(1) - s);
    }
    d = final_.backward(tape.final_in, d);
    for (int i = static_cast<int>(blocks_.size()) - 1; i >= 0; --i) d = blocks_[i].backward(tape.blocks[i], std::move(d));
    leaky_relu_backward_inplace(tape.bn0_out, d);
    d = bn0_.backward(tape.fc_out, tape.bn0_cache, d);
    MatX<T> df = ConstMatMap<T>(d.data(), d.n(), static_cast<int>(d.per_item()));
    return fc_.backward(tape.z, df);
  }

  void update_running(const DecoderTape<T>& tape) {
    if (tape.bn0_cache.training) bn0_.update_running(tape.fc_out, tape.bn0_cache);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].update_running(tape.blocks[i]);
  }

  template <typename F>
  void visit_params(F&& f) {
    f(fc_.weight);
    f(fc_.bias);
    f(bn0_.gamma);
    f(bn0_.beta);
    for (auto& b : blocks_) {
      f(b.conv.weight);
      f(b.bn.gamma);
      f(b.bn.beta);
    }
    f(final_.weight);
    f(final_.bias);
  }

  template <typename F>
  void visit_buffers(F&& f) {
    f(bn0_.running_mean);
    f(bn0_.running_var);
    for (auto& b : blocks_) {
      f(b.bn.running_mean);
      f(b.bn.running_var);
    }
  }

  void init(Rng& rng) {
    const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
    fill_normal(fc_.weight.value, gain / std::sqrt(static_cast<double>(kFeatureDim)), rng);
    // A stride-2 transposed 3x3 kernel feeds each output from ~in_ch*9/4 taps.
    for (auto& b : blocks_) fill_normal(b.conv.weight.value, gain / std::sqrt(b.conv.in_ch * 9.0 / 4.0), rng);
    fill_normal(final_.weight.value, 1.0 / std::sqrt(final_.in_ch * 9.0 / 4.0), rng);
  }

 private:
  void check(const Tensor<T>& t, int layer) const {
    if (!t.all_finite()) throw NumericFault("decoder", layer);
  }

  int d0_ = 0;
  Linear<T> fc_;
  BatchNorm2d<T> bn0_;
  std::vector<ConvBlock<T, ConvTranspose2d<T>>> blocks_;
  ConvTranspose2d<T> final_;
};

// ---------------------------------------------------------------------------
// Stacked LSTM. Gate order in the 4H rows: input, forget, cell, output.

template <typename T>
struct LstmLayer {
  Param<T> w_ih;  // 4H x in
  Param<T> w_hh;  // 4H x H
  Param<T> bias;  // 4H
  int in = 0, hidden = 0;
};

template <typename T>
struct LstmTape {
  struct Step {
    MatX<T> x, h_prev, c_prev, i, f, g, o, c, tanh_c;
  };
  std::vector<std::vector<Step>> layers;  // [layer][t]
};

template <typename T>
class Lstm {
 public:
  Lstm() = default;
  Lstm(int input, int hidden, int num_layers) : hidden_(hidden) {
    for (int l = 0; l < num_layers; ++l) {
      const int in = l == 0 ? input : hidden;
      const std::string p = "lstm.l" + std::to_string(l);
      layers_.push_back({Param<T>(p + ".w_ih", {4 * hidden, in}), Param<T>(p + ".w_hh", {4 * hidden, hidden}),
                         Param<T>(p + ".bias", {4 * hidden}), in, hidden});
    }
  }

  int hidden() const { return hidden_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }

  /// xs[t]: B x input for t = 0..n-1. Returns top-layer outputs h^t (B x H).
  /// State starts at zero for every sequence.
  std::vector<MatX<T>> forward(const std::vector<MatX<T>>& xs, LstmTape<T>* tape = nullptr) const {
    if (xs.empty()) throw InvalidInput("lstm: empty sequence");
    if (tape) tape->layers.assign(layers_.size(), {});
    std::vector<MatX<T>> seq = xs;
    const int H = hidden_;
    const auto B = seq.front().rows();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      if (seq.front().cols() != L.in) throw ShapeError("lstm: input width mismatch");
      const auto wih = L.w_ih.mat(4 * H, L.in);
      const auto whh = L.w_hh.mat(4 * H, H);
      const ConstMatMap<T> b(L.bias.value.data(), 1, 4 * H);
      MatX<T> h = MatX<T>::Zero(B, H), c = MatX<T>::Zero(B, H);
      for (std::size_t t = 0; t < seq.size(); ++t) {
        MatX<T> gates = seq[t] * wih.transpose() + h * whh.transpose();
        gates.rowwise() += b.row(0);
        typename LstmTape<T>::Step s;
        s.i = gates.leftCols(H).unaryExpr([](T v) { return sigmoid(v); });
        s.f = gates.middleCols(H, H).unaryExpr([](T v) { return sigmoid(v); });
        s.g = gates.middleCols(2 * H, H).array().tanh().matrix();
        s.o = gates.rightCols(H).unaryExpr([](T v) { return sigmoid(v); });
        MatX<T> c_new = (s.f.array() * c.array() + s.i.array() * s.g.array()).matrix();
        s.tanh_c = c_new.array().tanh().matrix();
        MatX<T> h_new = (s.o.array() * s.tanh_c.array()).matrix();
        if (!h_new.allFinite()) throw NumericFault("lstm", static_cast<int>(l));
        if (tape) {
          s.x = seq[t];
          s.h_prev = h;
          s.c_prev = c;
          s.c = c_new;
          tape->layers[l].push_back(std::move(s));
        }
        h = h_new;
        c = std::move(c_new);
        seq[t] = std::move(h_new);
      }
    }
    return seq;
  }

  /// dhs[t]: gradient w.r.t. top-layer h^t. Returns gradients w.r.t. xs.
  std::vector<MatX<T>> backward(const LstmTape<T>& tape, const std::vector<MatX<T>>& dhs) {
    std::vector<MatX<T>> dseq = dhs;
    const int H = hidden_;
    for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
      auto& L = layers_[l];
      const auto& steps = tape.layers[l];
      const auto wih = L.w_ih.mat(4 * H, L.in);
      const auto whh = L.w_hh.mat(4 * H, H);
      auto gwih = L.w_ih.gmat(4 * H, L.in);
      auto gwhh = L.w_hh.gmat(4 * H, H);
      MatMap<T> gb(L.bias.grad.data(), 1, 4 * H);
      const auto B = steps.front().x.rows();
      MatX<T> dh_next = MatX<T>::Zero(B, H), dc_next = MatX<T>::Zero(B, H);
      std::vector<MatX<T>> dx(steps.size());
      for (int t = static_cast<int>(steps.size()) - 1; t >= 0; --t) {
        const auto& s = steps[t];
        MatX<T> dh = dseq[t] + dh_next;
        auto tc = s.tanh_c.array();
        MatX<T> dc = (dh.array() * s.o.array() * (T(1) - tc * tc) + dc_next.array()).matrix();
        MatX<T> dgates(B, 4 * H);
        dgates.leftCols(H) = (dc.array() * s.g.array() * s.i.array() * (T(1) - s.i.array())).matrix();
        dgates.middleCols(H, H) = (dc.array() * s.c_prev.array() * s.f.array() * (T(1) - s.f.array())).matrix();
        dgates.middleCols(2 * H, H) = (dc.array() * s.i.array() * (T(1) - s.g.array() * s.g.array())).matrix();
        dgates.rightCols(H) = (dh.array() * s.tanh_c.array() * s.o.array() * (T(1) - s.o.array())).matrix();
        gwih.noalias() += dgates.transpose() * s.x;
        gwhh.noalias() += dgates.transpose() * s.h_prev;
        gb += dgates.colwise().sum();
        dx[t] = dgates * wih;
        dh_next = dgates * whh;
        dc_next = (dc.array() * s.f.array()).matrix();
      }
      dseq = std::move(dx);
    }
    return dseq;
  }

  template <typename F>
  void visit_params(F&& f) {
    for (auto& L : layers_) {
      f(L.w_ih);
      f(L.w_hh);
      f(L.bias);
    }
  }

  /// Input weights N(0, 1/in); recurrent blocks orthogonal; forget-gate bias 1.
  void init(Rng& rng) {
    const int H = hidden_;
    for (auto& L : layers_) {
      fill_normal(L.w_ih.value, 1.0 / std::sqrt(static_cast<double>(L.in)), rng);
      auto whh = L.w_hh.mat(4 * H, H);
      for (int gate = 0; gate < 4; ++gate) whh.middleRows(gate * H, H) = random_orthogonal<T>(H, rng);
      std::fill(L.bias.value.begin(), L.bias.value.end(), T(0));
      std::fill(L.bias.value.begin() + H, L.bias.value.begin() + 2 * H, T(1));
    }
  }

 private:
  int hidden_ = 0;
  std::vector<LstmLayer<T>> layers_;
};

// ---------------------------------------------------------------------------

/// Softmax of one logit row (numerically stable).
template <typename T>
VecX<T> softmax(const Eigen::Ref<const VecX<T>>& logits) {
  const T m = logits.maxCoeff();
  VecX<T> e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

/// C_sg / C_dg: linear map followed by softmax.
template <typename T>
VecX<T> classify(const Linear<T>& cls, const Eigen::Ref<const VecX<T>>& x) {
  if (x.size() != cls.in)
    throw ShapeError(cls.weight.name + ": input width " + std::to_string(x.size()) + ", expected " +
                     std::to_string(cls.in));
  MatX<T> row = x.transpose();
  MatX<T> logits = cls.forward(row);
  return softmax<T>(logits.row(0).transpose());
}

/// Everything trained jointly.
template <typename T>
struct GaitNet {
  NetConfig config;
  int n_subjects = 0;
  Encoder<T> encoder;
  Decoder<T> decoder;
  Lstm<T> lstm;
  Linear<T> cls_sg;
  Linear<T> cls_dg;

  GaitNet() = default;
  GaitNet(const NetConfig& cfg, int subjects)
      : config(cfg), n_subjects(subjects), encoder(cfg), decoder(cfg),
        lstm(kPoseDim, cfg.lstm_hidden, cfg.lstm_layers), cls_sg("cls_sg", kCanonicalDim, subjects),
        cls_dg("cls_dg", cfg.lstm_hidden, subjects) {
    if (subjects < 1) throw ConfigError("classifier needs at least one subject");
  }

  void init(std::uint64_t seed) {
    Rng rng(seed);
    encoder.init(rng);
    decoder.init(rng);
    lstm.init(rng);
    fill_normal(cls_sg.weight.value, 1.0 / std::sqrt(static_cast<double>(cls_sg.in)), rng);
    fill_normal(cls_dg.weight.value, 1.0 / std::sqrt(static_cast<double>(cls_dg.in)), rng);
  }

  template <typename F>
  void visit_params(F&& f) {
    encoder.visit_params(f);
    decoder.visit_params(f);
    lstm.visit_params(f);
    f(cls_sg.weight);
    f(cls_sg.bias);
    f(cls_dg.weight);
    f(cls_dg.bias);
  }

  template <typename F>
  void visit_buffers(F&& f) {
    encoder.visit_buffers(f);
    decoder.visit_buffers(f);
  }

  std::size_t param_count() {
    std::size_t n = 0;
    visit_params([&](Param<T>& p) { n += p.size(); });
    return n;
  }

  void zero_grad() {
    visit_params([](Param<T>& p) { p.zero_grad(); });
  }
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointSchema = 1;

template <typename T>
std::string encode_checkpoint(GaitNet<T>& net, long iteration, const nlohmann::json& extra = {}) {
  nlohmann::json header = {{"kind", "checkpoint"},
                           {"schema", kCheckpointSchema},
                           {"architecture", net.config},
                           {"n_subjects", net.n_subjects},
                           {"iteration", iteration},
                           {"arrays", nlohmann::json::array()}};
  if (!extra.is_null()) header["extra"] = extra;
  std::vector<float> payload;
  auto add = [&](const std::string& name, const AlignedVector<T>& v) {
    header["arrays"].push_back({{"name", name}, {"offset", payload.size()}, {"count", v.size()}});
    for (T x : v) payload.push_back(static_cast<float>(x));
  };
  net.visit_params([&](Param<T>& p) { add(p.name, p.value); });
  net.visit_buffers([&](Buffer<T>& b) { add(b.name, b.value); });
  return encode_container(std::move(header), payload);
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, GaitNet<T>& net, long iteration,
                     const nlohmann::json& extra = {}) {
  write_file_bytes(path, encode_checkpoint(net, iteration, extra));
}

template <typename T>
struct LoadedCheckpoint {
  GaitNet<T> net;
  long iteration = 0;
  nlohmann::json header;
};

/// Rebuilds the network described by the header. When `expected` is given the
/// stored architecture must match it exactly.
template <typename T>
LoadedCheckpoint<T> decode_checkpoint(std::string_view bytes, const NetConfig* expected = nullptr) {
  const FloatContainer c = decode_container(bytes, "checkpoint", kCheckpointSchema);
  NetConfig cfg;
  int subjects = 0;
  try {
    cfg = c.header.at("architecture").get<NetConfig>();
    subjects = c.header.at("n_subjects").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint header: ") + e.what());
  }
  if (expected && !(*expected == cfg)) throw VersionError("checkpoint architecture does not match the requested one");
  LoadedCheckpoint<T> out{GaitNet<T>(cfg, subjects), c.header.value("iteration", 0L), c.header};
  std::map<std::string, std::pair<std::size_t, std::size_t>> arrays;
  for (const auto& a : c.header.at("arrays"))
    arrays[a.at("name").get<std::string>()] = {a.at("offset").get<std::size_t>(), a.at("count").get<std::size_t>()};
  auto fetch = [&](const std::string& name, AlignedVector<T>& dst) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw VersionError("checkpoint lacks array '" + name + "'");
    const auto [off, count] = it->second;
    if (count != dst.size() || off + count > c.payload.size())
      throw VersionError("checkpoint array '" + name + "' has the wrong size");
    for (std::size_t i = 0; i < count; ++i) dst[i] = static_cast<T>(c.payload[off + i]);
    arrays.erase(it);
  };
  out.net.visit_params([&](Param<T>& p) { fetch(p.name, p.value); });
  out.net.visit_buffers([&](Buffer<T>& b) { fetch(b.name, b.value); });
  if (!arrays.empty()) throw VersionError("checkpoint has unexpected array '" + arrays.begin()->first + "'");
  return out;
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const NetConfig* expected = nullptr) {
  return decode_checkpoint<T>(read_file_bytes(path), expected);
}

}  // namespace gaitdis
