#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "gaitdis/gaitdis.hpp"

namespace gtest_support {

using namespace gaitdis;

inline constexpr double kFdStep = 1e-3;
inline constexpr double kFdTolerance = 1e-3;

/// |a - n| / max(|a|, |n|), with a floor so that two values that are both
/// numerically zero compare equal.
inline double rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
  return std::abs(analytic - numeric) / scale;
}

/// Piecewise-linear state of a network at the current parameters: one entry
/// per leaky-ReLU sign and per max-pool winner.
using Pattern = std::function<std::vector<int>()>;

/// Central differences on `count` random entries of `values`; returns the
/// largest relative error against `grad`. With `pattern`, an entry whose
/// stencil [v - h, v + h] changes the pattern is not differentiable there and
/// is replaced by another draw; `checked` receives the number actually
/// compared.
inline double fd_max_error(std::span<double> values, std::span<const double> grad,
                           const std::function<double()>& loss, int count, std::uint64_t seed,
                           const Pattern& pattern = {}, int* checked = nullptr) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  const bool exhaustive = values.size() <= static_cast<std::size_t>(count);
  const std::vector<int> base = pattern ? pattern() : std::vector<int>{};
  double worst = 0;
  int done = 0;
  const int attempts = exhaustive ? static_cast<int>(values.size()) : 20 * count;
  for (int s = 0; s < attempts && done < count; ++s) {
    const std::size_t i = exhaustive ? static_cast<std::size_t>(s) : pick(rng);
    const double keep = values[i];
    values[i] = keep + kFdStep;
    const double up = loss();
    const bool smooth_up = !pattern || pattern() == base;
    values[i] = keep - kFdStep;
    const double down = loss();
    const bool smooth_down = !pattern || pattern() == base;
    values[i] = keep;
    if (!smooth_up || !smooth_down) continue;
    worst = std::max(worst, rel_error(grad[i], (up - down) / (2 * kFdStep)));
    ++done;
  }
  if (checked) *checked = done;
  return worst;
}

template <typename T>
void append_signs(std::vector<int>& out, const Tensor<T>& pre) {
  for (const T v : pre.vec()) out.push_back(v > 0);
}

template <typename T>
std::vector<int> encoder_pattern(const Encoder<T>& enc, const Tensor<T>& x) {
  EncoderTape<T> tape;
  enc.forward(x, Mode::kTrain, &tape);
  std::vector<int> out;
  for (const auto& b : tape.blocks) append_signs(out, b.bn_out);
  for (const auto& a : tape.pool_argmax) out.insert(out.end(), a.begin(), a.end());
  return out;
}

template <typename T>
std::vector<int> decoder_pattern(const Decoder<T>& dec, const MatX<T>& z) {
  DecoderTape<T> tape;
  dec.forward(z, Mode::kTrain, &tape);
  std::vector<int> out;
  append_signs(out, tape.bn0_out);
  for (const auto& b : tape.blocks) append_signs(out, b.bn_out);
  return out;
}

/// Narrow network for double-precision gradient checks.
inline NetConfig tiny_config(bool large = false) {
  NetConfig c;
  c.enc_channels = {4, 5, 6, 6};
  c.dec_channels = {6, 5, 4, 4};
  c.lstm_hidden = 6;
  c.lstm_layers = 2;
  c.large_model = large;
  return c;
}

template <typename T>
Tensor<T> random_tensor(int n, int c, int h, int w, std::uint64_t seed, double lo = -1, double hi = 1) {
  Tensor<T> t(n, c, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.vec()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
MatX<T> random_mat(int r, int c, std::uint64_t seed, double scale = 1) {
  MatX<T> m(r, c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, scale);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(d(rng));
  return m;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data()[i]) * b.data()[i];
  return s;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("gaitdis_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline std::vector<Clip> clips_of(const SynthDataset& ds) {
  std::vector<Clip> out;
  for (const auto& c : ds.clips) out.push_back(c.clip);
  return out;
}

}  // namespace gtest_support
