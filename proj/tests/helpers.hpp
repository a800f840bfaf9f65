#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "fedned/data.hpp"
#include "fedned/nn.hpp"

namespace testutil {

using fedned::nn::Matrix;
using fedned::nn::ModelParams;

inline Matrix random_matrix(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Glorot weights plus small random biases, so ReLU kinks sit away from zero.
inline ModelParams random_model(const std::vector<int>& sizes, double dropout, std::uint64_t seed) {
  auto m = ModelParams::glorot_uniform(fedned::nn::Architecture::mlp(sizes, dropout), seed);
  std::mt19937_64 rng(seed ^ 0x5555);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& l : m.layers)
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = u(rng);
  return m;
}

inline std::vector<double> simplex(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(static_cast<std::size_t>(n));
  double s = 0.0;
  for (auto& x : p) s += (x = e(rng));
  for (auto& x : p) x /= s;
  return p;
}

// Reference dense forward pass written out by hand, dropout off.
inline std::vector<double> reference_probs(const ModelParams& m, const std::vector<double>& x,
                                           const std::vector<std::vector<double>>& masks = {}) {
  std::vector<double> a = x;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    std::vector<double> z(static_cast<std::size_t>(L.weight.rows()));
    for (Eigen::Index o = 0; o < L.weight.rows(); ++o) {
      double s = L.bias(o);
      for (Eigen::Index i = 0; i < L.weight.cols(); ++i) s += L.weight(o, i) * a[static_cast<std::size_t>(i)];
      z[static_cast<std::size_t>(o)] = s;
    }
    if (l + 1 < m.layers.size()) {
      for (std::size_t j = 0; j < z.size(); ++j) {
        z[j] = z[j] > 0.0 ? z[j] : 0.0;
        if (!masks.empty()) z[j] *= masks[l][j];
      }
    } else {
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double s = 0.0;
      for (double& v : z) s += (v = std::exp(v - mx));
      for (double& v : z) v /= s;
    }
    a = std::move(z);
  }
  return a;
}

inline double fraction_correct(const ModelParams& m, const fedned::data::LabeledDataset& d, bool use_true = true) {
  const Matrix p = fedned::nn::predict_proba(m, d.features);
  std::size_t ok = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    Eigen::Index best;
    p.row(r).maxCoeff(&best);
    const auto& y = use_true ? d.true_labels : d.labels;
    ok += static_cast<int>(best) == y[static_cast<std::size_t>(r)];
  }
  return static_cast<double>(ok) / static_cast<double>(d.size());
}

}  // namespace testutil
