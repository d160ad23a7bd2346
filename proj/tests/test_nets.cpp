#include <gtest/gtest.h>

#include "support.hpp"

using namespace gaitdis;
using namespace gtest_support;

namespace {

template <typename Module>
double check_module_params(Module& m, const std::function<double()>& loss, int per_param, std::uint64_t seed,
                           const Pattern& pattern = {}) {
  double worst = 0;
  std::vector<Param<double>*> params;
  m.visit_params([&](Param<double>& p) { params.push_back(&p); });
  int wanted = 0, checked_total = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    int checked = 0;
    worst = std::max(worst, fd_max_error(params[k]->value, params[k]->grad, loss, per_param, seed + k, pattern, &checked));
    wanted += std::min<int>(per_param, static_cast<int>(params[k]->size()));
    checked_total += checked;
  }
  // Batch-norm scale/shift entries move a whole channel and often cross a
  // kink; the rest of the module must still be covered.
  EXPECT_GE(2 * checked_total, wanted);
  return worst;
}

template <typename Module>
void randomize(Module& m, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  m.visit_params([&](Param<double>& p) { fill_normal(p.value, scale, rng); });
}

std::vector<std::string> shape_strings(const std::vector<LayerShape>& v) {
  std::vector<std::string> out;
  for (const auto& s : v)
    out.push_back(s.first + ":" + std::to_string(s.second[1]) + "x" + std::to_string(s.second[2]) + "x" +
                  std::to_string(s.second[3]));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shapes

TEST(Shapes, EncoderLayersMatchTheArchitectureTable) {
  Encoder<float> enc(NetConfig::full());
  EncoderTape<float> tape;
  const auto f = enc.forward(random_tensor<float>(2, 3, 64, 32, 1), Mode::kTrain, &tape);
  EXPECT_EQ(f.rows(), 2);
  EXPECT_EQ(f.cols(), 320);
  const std::vector<std::string> want = {"conv1:64x64x32",   "maxpool1:64x32x16", "conv2:256x32x16", "maxpool2:256x16x8",
                                         "conv3:512x8x4",    "maxpool3:512x4x2",  "fc:320x1x1"};
  EXPECT_EQ(shape_strings(tape.shapes), want);
}

TEST(Shapes, LargeEncoderAddsConv4) {
  Encoder<float> enc(NetConfig::full(true));
  EncoderTape<float> tape;
  enc.forward(random_tensor<float>(1, 3, 64, 32, 1), Mode::kTrain, &tape);
  const std::vector<std::string> want = {"conv1:64x64x32", "maxpool1:64x32x16", "conv2:256x32x16", "maxpool2:256x16x8",
                                         "conv3:512x8x4",  "conv4:512x4x2",     "maxpool3:512x2x1", "fc:320x1x1"};
  EXPECT_EQ(shape_strings(tape.shapes), want);
  EXPECT_EQ(Encoder<float>(NetConfig::full(false)).num_blocks(), 3u);
  EXPECT_EQ(enc.num_blocks(), 4u);
}

TEST(Shapes, DecoderLayersMatchTheArchitectureTable) {
  Decoder<float> dec(NetConfig::full());
  DecoderTape<float> tape;
  const auto out = dec.forward(random_mat<float>(2, 320, 3), Mode::kTrain, &tape);
  EXPECT_EQ(out.shape(), (std::array<int, 4>{2, 3, 64, 32}));
  const std::vector<std::string> want = {"fc:512x4x2", "tconv1:256x8x4", "tconv2:128x16x8", "tconv3:64x32x16",
                                         "tconv4:3x64x32"};
  EXPECT_EQ(shape_strings(tape.shapes), want);
}

TEST(Shapes, FeatureSplitAndRoundTrip) {
  EXPECT_EQ(kAppearanceDim, 128);
  EXPECT_EQ(kCanonicalDim, 128);
  EXPECT_EQ(kPoseDim, 64);
  EXPECT_EQ(kFeatureDim, 320);
  EXPECT_EQ(kAppearanceOffset, 0);
  EXPECT_EQ(kCanonicalOffset, 128);
  EXPECT_EQ(kPoseOffset, 256);
  GaitNet<float> net(NetConfig::compact(), 4);
  net.init(1);
  const auto x = random_tensor<float>(3, 3, 64, 32, 2, 0, 1);
  const auto y = net.decoder.forward(net.encoder.forward(x, Mode::kEval), Mode::kEval);
  EXPECT_TRUE(x.same_shape(y));
}

TEST(Shapes, LstmAndClassifierWidths) {
  GaitNet<float> net(NetConfig::full(), 11);
  EXPECT_EQ(net.lstm.num_layers(), 3);
  EXPECT_EQ(net.lstm.hidden(), 256);
  EXPECT_EQ(net.cls_sg.in, 128);
  EXPECT_EQ(net.cls_sg.out, 11);
  EXPECT_EQ(net.cls_dg.in, 256);
  EXPECT_EQ(net.cls_dg.out, 11);
}

TEST(Shapes, WrongInputShapesAreRejected) {
  GaitNet<float> net(NetConfig::compact(), 2);
  EXPECT_THROW(net.encoder.forward(Tensor<float>(1, 3, 32, 32), Mode::kEval), ShapeError);
  EXPECT_THROW(net.decoder.forward(MatX<float>::Zero(1, 300), Mode::kEval), ShapeError);
  EXPECT_THROW(classify<float>(net.cls_sg, VecX<float>::Zero(64)), ShapeError);
  EXPECT_THROW(net.lstm.forward({}), InvalidInput);
  EXPECT_THROW(net.lstm.forward({MatX<float>::Zero(1, 10)}), ShapeError);
  EXPECT_THROW(GaitNet<float>(NetConfig::compact(), 0), ConfigError);
}

TEST(ParamCount, RecordedConstants) {
  // Recorded from this implementation; any architectural change shows up here.
  EXPECT_EQ(GaitNet<float>(NetConfig::full(false), 74).param_count(), 6916183u);
  EXPECT_EQ(GaitNet<float>(NetConfig::full(true), 74).param_count(), 8293463u);
  EXPECT_EQ(GaitNet<float>(NetConfig::compact(false), 16).param_count(), 1763747u);
}

TEST(ParamCount, DependsOnlyOnFlagAndSubjects) {
  auto count = [](bool large, int k) { return GaitNet<float>(NetConfig::full(large), k).param_count(); };
  EXPECT_EQ(count(false, 10), count(false, 10));
  // Each subject adds one row to both classifiers: 128 + 256 weights, 2 biases.
  EXPECT_EQ(count(false, 11) - count(false, 10), 128u + 256u + 2u);
  EXPECT_GT(count(true, 10), count(false, 10));
}

// ---------------------------------------------------------------------------
// Forward behaviour

TEST(Forward, ZeroFrameWithZeroBiasesIsFinite) {
  GaitNet<float> net(NetConfig::compact(), 3);
  net.init(5);
  const auto f = net.encoder.forward(Tensor<float>(4, 3, 64, 32), Mode::kTrain);
  EXPECT_TRUE(f.allFinite());
}

TEST(Forward, NonFiniteInputRaisesNumericFaultWithLayer) {
  GaitNet<float> net(NetConfig::compact(), 3);
  net.init(5);
  Tensor<float> x(1, 3, 64, 32);
  x(0, 1, 10, 10) = std::numeric_limits<float>::quiet_NaN();
  try {
    net.encoder.forward(x, Mode::kEval);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_EQ(e.layer(), 0);
  }
}

TEST(Forward, DecoderOutputsAreStrictlyInsideUnitInterval) {
  GaitNet<float> net(NetConfig::compact(), 3);
  net.init(8);
  const auto out = net.decoder.forward(random_mat<float>(5, 320, 9), Mode::kEval);
  for (float v : out.vec()) {
    ASSERT_GT(v, 0.0f);
    ASSERT_LT(v, 1.0f);
  }
}

TEST(Forward, EvalModeIsDeterministicAndBatchIndependent) {
  GaitNet<double> net(tiny_config(), 3);
  net.init(2);
  const auto x = random_tensor<double>(3, 3, 64, 32, 4, 0, 1);
  const auto a = net.encoder.forward(x, Mode::kEval), b = net.encoder.forward(x, Mode::kEval);
  EXPECT_EQ(a, b);
  Tensor<double> one(1, 3, 64, 32);
  std::copy(x.item(1), x.item(1) + x.per_item(), one.data());
  const auto c = net.encoder.forward(one, Mode::kEval);
  EXPECT_LT((c.row(0) - a.row(1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, LstmIsCausal) {
  Lstm<double> lstm(4, 6, 3);
  Rng rng(3);
  lstm.init(rng);
  std::vector<MatX<double>> xs;
  for (int t = 0; t < 6; ++t) xs.push_back(random_mat<double>(2, 4, 10 + t));
  const auto h = lstm.forward(xs);
  ASSERT_EQ(h.size(), 6u);
  for (int k = 0; k < 6; ++k) {
    auto ys = xs;
    ys[k](0, 1) += 0.5;
    const auto g = lstm.forward(ys);
    for (int t = 0; t < k; ++t) ASSERT_EQ(g[t], h[t]) << k << "," << t;
    EXPECT_NE(g[k], h[k]);
  }
  EXPECT_EQ(lstm.forward({xs[0]}).size(), 1u);
}

TEST(Classifier, ZeroInputZeroWeightsIsUniform) {
  Linear<double> cls("c", 5, 7);
  const auto p = classify<double>(cls, VecX<double>::Zero(5));
  for (int k = 0; k < 7; ++k) EXPECT_NEAR(p[k], 1.0 / 7, 1e-15);
}

TEST(Classifier, SoftmaxSumsToOneAndArgmaxMatchesLogits) {
  Linear<double> cls("c", 6, 9);
  Rng rng(4);
  fill_normal(cls.weight.value, 2.0, rng);
  fill_normal(cls.bias.value, 1.0, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const VecX<double> x = random_mat<double>(6, 1, 100 + trial, 3.0);
    const auto p = classify<double>(cls, x);
    EXPECT_NEAR(p.sum(), 1.0, 1e-6);
    EXPECT_TRUE((p.array() > 0).all());
    // Independent dense product.
    int best = 0;
    double best_v = -1e300;
    for (int k = 0; k < 9; ++k) {
      double z = cls.bias.value[k];
      for (int i = 0; i < 6; ++i) z += cls.weight.value[k * 6 + i] * x[i];
      if (z > best_v) best_v = z, best = k;
    }
    Eigen::Index arg;
    p.maxCoeff(&arg);
    EXPECT_EQ(arg, best);
  }
}

// ---------------------------------------------------------------------------
// Gradient checks (64-bit)

TEST(Gradients, Conv2dStride1And2) {
  for (int stride : {1, 2}) {
    Conv2d<double> conv("c", 2, 3, stride, true);
    Rng rng(stride);
    fill_normal(conv.weight.value, 0.5, rng);
    fill_normal(conv.bias.value, 0.5, rng);
    auto x = random_tensor<double>(2, 2, 7, 6, 3);
    const auto r = random_tensor<double>(2, 3, conv.out_h(7), conv.out_w(6), 4);
    auto loss = [&] { return dot(conv.forward(x), r); };
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    const auto dx = conv.backward(x, r);
    EXPECT_LT(fd_max_error(conv.weight.value, conv.weight.grad, loss, 30, 1), kFdTolerance);
    EXPECT_LT(fd_max_error(conv.bias.value, conv.bias.grad, loss, 3, 2), kFdTolerance);
    EXPECT_LT(fd_max_error(x.vec(), dx.vec(), loss, 30, 3), kFdTolerance);
  }
}

TEST(Gradients, ConvTranspose2d) {
  ConvTranspose2d<double> conv("t", 3, 2, true);
  Rng rng(9);
  fill_normal(conv.weight.value, 0.5, rng);
  fill_normal(conv.bias.value, 0.5, rng);
  auto x = random_tensor<double>(2, 3, 4, 3, 5);
  const auto r = random_tensor<double>(2, 2, 8, 6, 6);
  auto loss = [&] { return dot(conv.forward(x), r); };
  conv.weight.zero_grad();
  conv.bias.zero_grad();
  const auto dx = conv.backward(x, r);
  EXPECT_LT(fd_max_error(conv.weight.value, conv.weight.grad, loss, 40, 1), kFdTolerance);
  EXPECT_LT(fd_max_error(conv.bias.value, conv.bias.grad, loss, 2, 2), kFdTolerance);
  EXPECT_LT(fd_max_error(x.vec(), dx.vec(), loss, 40, 3), kFdTolerance);
}

TEST(Gradients, BatchNormTrainingMode) {
  BatchNorm2d<double> bn("b", 3);
  Rng rng(2);
  fill_normal(bn.gamma.value, 1.0, rng);
  fill_normal(bn.beta.value, 1.0, rng);
  auto x = random_tensor<double>(4, 3, 3, 2, 7);
  const auto r = random_tensor<double>(4, 3, 3, 2, 8);
  auto loss = [&] { return dot(bn.forward(x, true), r); };
  typename BatchNorm2d<double>::Cache cache;
  bn.forward(x, true, &cache);
  bn.gamma.zero_grad();
  bn.beta.zero_grad();
  const auto dx = bn.backward(x, cache, r);
  EXPECT_LT(fd_max_error(bn.gamma.value, bn.gamma.grad, loss, 3, 1), kFdTolerance);
  EXPECT_LT(fd_max_error(bn.beta.value, bn.beta.grad, loss, 3, 2), kFdTolerance);
  EXPECT_LT(fd_max_error(x.vec(), dx.vec(), loss, 72, 3), kFdTolerance);
}

TEST(Gradients, BatchNormEvalModeUsesRunningStatistics) {
  BatchNorm2d<double> bn("b", 2);
  auto x = random_tensor<double>(5, 2, 2, 2, 1, 2, 4);
  typename BatchNorm2d<double>::Cache cache;
  bn.forward(x, true, &cache);
  bn.update_running(x, cache);
  // Running mean moves 10% of the way from 0 towards the batch mean.
  double mean0 = 0;
  for (int i = 0; i < 5; ++i)
    for (int y = 0; y < 2; ++y)
      for (int xx = 0; xx < 2; ++xx) mean0 += x(i, 0, y, xx);
  EXPECT_NEAR(bn.running_mean.value[0], 0.1 * mean0 / 20, 1e-12);
  // Eval output of one item does not depend on the rest of the batch.
  Tensor<double> one(1, 2, 2, 2);
  std::copy(x.item(0), x.item(0) + x.per_item(), one.data());
  const auto a = bn.forward(x, false), b = bn.forward(one, false);
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Gradients, MaxPool) {
  MaxPool2d<double> pool;
  auto x = random_tensor<double>(2, 2, 7, 5, 11);
  const auto r = random_tensor<double>(2, 2, pool.out_h(7), pool.out_w(5), 12);
  std::vector<int> arg;
  pool.forward(x, &arg);
  const auto dx = pool.backward(x, arg, r);
  auto loss = [&] { return dot(pool.forward(x), r); };
  EXPECT_LT(fd_max_error(x.vec(), dx.vec(), loss, 70, 1), kFdTolerance);
}

TEST(Gradients, Linear) {
  Linear<double> fc("l", 4, 3);
  Rng rng(1);
  fill_normal(fc.weight.value, 1.0, rng);
  fill_normal(fc.bias.value, 1.0, rng);
  MatX<double> x = random_mat<double>(5, 4, 2);
  const MatX<double> r = random_mat<double>(5, 3, 3);
  auto loss = [&] { return (fc.forward(x).array() * r.array()).sum(); };
  MatX<double> dx = fc.backward(x, r);
  std::vector<double> xv(x.data(), x.data() + x.size()), dxv(dx.data(), dx.data() + dx.size());
  EXPECT_LT(fd_max_error(fc.weight.value, fc.weight.grad, loss, 12, 1), kFdTolerance);
  EXPECT_LT(fd_max_error(fc.bias.value, fc.bias.grad, loss, 3, 2), kFdTolerance);
  auto loss_x = [&] {
    MatX<double> xx = Eigen::Map<MatX<double>>(xv.data(), 5, 4);
    return (fc.forward(xx).array() * r.array()).sum();
  };
  EXPECT_LT(fd_max_error(xv, dxv, loss_x, 20, 3), kFdTolerance);
}

TEST(Gradients, EncoderFullPath) {
  for (bool large : {false, true}) {
    Encoder<double> enc(tiny_config(large));
    Rng rng(7);
    enc.init(rng);
    randomize(enc, 17, 0.4);
    auto x = random_tensor<double>(3, 3, 64, 32, 21, 0, 1);
    const MatX<double> r = random_mat<double>(3, 320, 22);
    auto loss = [&] { return (enc.forward(x, Mode::kTrain).array() * r.array()).sum(); };
    EncoderTape<double> tape;
    enc.forward(x, Mode::kTrain, &tape);
    enc.visit_params([](Param<double>& p) { p.zero_grad(); });
    const auto dx = enc.backward(tape, r);
    const Pattern pattern = [&] { return encoder_pattern(enc, x); };
    EXPECT_LT(check_module_params(enc, loss, 10, 100, pattern), kFdTolerance) << "large=" << large;
    int checked = 0;
    EXPECT_LT(fd_max_error(x.vec(), dx.vec(), loss, 20, 5, pattern, &checked), kFdTolerance) << "large=" << large;
    EXPECT_GE(checked, 10);
  }
}

TEST(Gradients, DecoderFullPath) {
  Decoder<double> dec(tiny_config());
  Rng rng(8);
  dec.init(rng);
  randomize(dec, 18, 0.4);
  MatX<double> z = random_mat<double>(3, 320, 31);
  const auto r = random_tensor<double>(3, 3, 64, 32, 32);
  auto loss = [&] { return dot(dec.forward(z, Mode::kTrain), r); };
  DecoderTape<double> tape;
  dec.forward(z, Mode::kTrain, &tape);
  dec.visit_params([](Param<double>& p) { p.zero_grad(); });
  const MatX<double> dz = dec.backward(tape, r);
  EXPECT_LT(check_module_params(dec, loss, 10, 200, [&] { return decoder_pattern(dec, z); }), kFdTolerance);
  std::vector<double> zv(z.data(), z.data() + z.size()), dzv(dz.data(), dz.data() + dz.size());
  auto z_now = [&] { return MatX<double>(Eigen::Map<MatX<double>>(zv.data(), 3, 320)); };
  auto loss_z = [&] { return dot(dec.forward(z_now(), Mode::kTrain), r); };
  int checked = 0;
  EXPECT_LT(fd_max_error(zv, dzv, loss_z, 30, 6, [&] { return decoder_pattern(dec, z_now()); }, &checked), kFdTolerance);
  EXPECT_GE(checked, 15);
}

TEST(Gradients, LstmFiveSteps) {
  Lstm<double> lstm(4, 6, 3);
  Rng rng(9);
  lstm.init(rng);
  std::vector<MatX<double>> xs, rs;
  for (int t = 0; t < 5; ++t) {
    xs.push_back(random_mat<double>(2, 4, 40 + t));
    rs.push_back(random_mat<double>(2, 6, 50 + t));
  }
  auto loss = [&] {
    const auto h = lstm.forward(xs);
    double s = 0;
    for (int t = 0; t < 5; ++t) s += (h[t].array() * rs[t].array()).sum();
    return s;
  };
  LstmTape<double> tape;
  lstm.forward(xs, &tape);
  lstm.visit_params([](Param<double>& p) { p.zero_grad(); });
  const auto dxs = lstm.backward(tape, rs);
  EXPECT_LT(check_module_params(lstm, loss, 15, 300), kFdTolerance);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> xv(xs[t].data(), xs[t].data() + xs[t].size());
    std::vector<double> dv(dxs[t].data(), dxs[t].data() + dxs[t].size());
    auto loss_x = [&] {
      xs[t] = Eigen::Map<MatX<double>>(xv.data(), 2, 4);
      return loss();
    };
    EXPECT_LT(fd_max_error(xv, dv, loss_x, 8, 60 + t), kFdTolerance) << t;
    xs[t] = Eigen::Map<MatX<double>>(xv.data(), 2, 4);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, BitExactRoundTrip) {
  GaitNet<float> net(tiny_config(true), 5);
  net.init(77);
  // Advance the running statistics so buffers are non-trivial.
  EncoderTape<float> tape;
  net.encoder.forward(random_tensor<float>(2, 3, 64, 32, 1, 0, 1), Mode::kTrain, &tape);
  net.encoder.update_running(tape);
  const std::string bytes = encode_checkpoint(net, 123, {{"labels", {"a", "b"}}});
  auto loaded = decode_checkpoint<float>(bytes);
  EXPECT_EQ(loaded.iteration, 123);
  EXPECT_EQ(loaded.net.config, net.config);
  EXPECT_EQ(loaded.net.n_subjects, 5);
  std::vector<AlignedVector<float>> a, b;
  net.visit_params([&](Param<float>& p) { a.push_back(p.value); });
  net.visit_buffers([&](Buffer<float>& p) { a.push_back(p.value); });
  loaded.net.visit_params([&](Param<float>& p) { b.push_back(p.value); });
  loaded.net.visit_buffers([&](Buffer<float>& p) { b.push_back(p.value); });
  EXPECT_EQ(a, b);
  EXPECT_EQ(encode_checkpoint(loaded.net, 123, {{"labels", {"a", "b"}}}), bytes);
}

TEST(Checkpoint, ArchitectureMismatchIsVersionError) {
  GaitNet<float> net(tiny_config(false), 3);
  const std::string bytes = encode_checkpoint(net, 0);
  const NetConfig other = tiny_config(true);
  EXPECT_THROW(decode_checkpoint<float>(bytes, &other), VersionError);
  const NetConfig same = tiny_config(false);
  EXPECT_NO_THROW(decode_checkpoint<float>(bytes, &same));

  FloatContainer c = decode_container(bytes, "checkpoint", kCheckpointSchema);
  c.header["arrays"].erase(0);
  EXPECT_THROW(decode_checkpoint<float>(encode_container(c.header, c.payload)), VersionError);
  c.header["schema"] = 2;
  EXPECT_THROW(decode_checkpoint<float>(encode_container(c.header, c.payload)), VersionError);
}

TEST(Checkpoint, TruncatedFileIsCorruption) {
  GaitNet<float> net(tiny_config(false), 3);
  const std::string bytes = encode_checkpoint(net, 0);
  EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, bytes.size() - 4)), CorruptionError);
}
