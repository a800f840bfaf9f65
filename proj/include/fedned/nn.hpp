#pragma once

// Dense MLP engine: ReLU hidden layers with inverted dropout, softmax output,
// cross-entropy and KL losses, SGD and Adam.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fedned/random.hpp"

namespace fedned::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Layer sizes [input, hidden..., classes] plus one dropout rate per hidden layer.
struct Architecture {
  std::vector<int> layer_sizes;
  std::vector<double> hidden_dropout;

  /// Uniform dropout rate on every hidden layer.
  static Architecture mlp(std::vector<int> sizes, double dropout_rate);

  int input_size() const { return layer_sizes.front(); }
  int class_count() const { return layer_sizes.back(); }
  std::size_t layer_count() const { return layer_sizes.size() - 1; }

  /// Throws ConfigError on fewer than two sizes, non-positive sizes or rates outside [0,1).
  void validate() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  friend bool operator==(const DenseLayer& a, const DenseLayer& b) {
    return a.weight == b.weight && a.bias == b.bias;
  }
};

struct ModelParams {
  Architecture architecture;
  std::vector<DenseLayer> layers;

  static ModelParams zeros(const Architecture& arch);
  /// Uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  static ModelParams glorot_uniform(const Architecture& arch, std::uint64_t seed);

  std::size_t parameter_count() const;
  bool congruent_with(const ModelParams& other) const { return architecture == other.architecture; }
  bool all_finite() const;

  /// Row-major weights then bias, layer by layer.
  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> values);

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Partial derivatives, shape-congruent with the owning ModelParams.
struct GradientBundle {
  std::vector<DenseLayer> layers;

  static GradientBundle zeros_like(const ModelParams& model);
  bool congruent_with(const ModelParams& model) const;
  bool all_finite() const;
  std::vector<double> flatten() const;
  GradientBundle& operator+=(const GradientBundle& other);
  GradientBundle& operator*=(double s);
};

struct Prediction {
  std::vector<double> probs;
};

/// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> v);
/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

/// KL(p || q) with q clamped to >= 1e-12 before the log. Throws ArgumentError on negative
/// entries, size mismatch, or arguments off the simplex by more than 1e-6.
double kl_divergence(std::span<const double> p, std::span<const double> q);

inline constexpr double kKlClamp = 1e-12;

/// Single-sample forward pass. With dropout_active, hidden units are dropped at the
/// configured rate and survivors scaled by 1/(1-rate).
Prediction forward(const ModelParams& model, std::span<const double> x, bool dropout_active,
                   RandomStream& rng);

/// Batched forward returning class probabilities (rows = samples). A null rng disables dropout.
Matrix predict_proba(const ModelParams& model, const Matrix& inputs, RandomStream* dropout_rng = nullptr);

/// Activations and dropout masks retained for backprop.
struct ForwardTrace {
  std::vector<Matrix> activations;  // activations[0] = inputs, then each post-ReLU(-dropout) hidden layer
  std::vector<Matrix> masks;        // per hidden layer: 0 or 1/(1-rate); empty when dropout off
  std::vector<Matrix> pre_activations;
  Matrix logits;
};

ForwardTrace forward_trace(const ModelParams& model, const Matrix& inputs, RandomStream* dropout_rng);

/// Backpropagates dLoss/dlogits (rows = samples) through a recorded trace.
GradientBundle backward(const ModelParams& model, const ForwardTrace& trace, const Matrix& logit_grad);

struct LossAndGrad {
  double loss = 0.0;
  GradientBundle grad;
};

/// Mean negative log-likelihood over the batch. Throws ArgumentError on an empty batch or a
/// label outside [0, C).
LossAndGrad cross_entropy_loss_and_grad(const ModelParams& model, const Matrix& inputs,
                                        std::span<const int> labels,
                                        RandomStream* dropout_rng = nullptr);

/// w' = w - lr * g.
ModelParams sgd_step(const ModelParams& model, const GradientBundle& grad, double lr);

struct AdamState {
  GradientBundle first_moment;
  GradientBundle second_moment;
  std::int64_t step = 0;

  bool fresh() const { return step == 0; }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamResult {
  ModelParams model;
  AdamState state;
};

/// Bias-corrected Adam update. A default-constructed state is treated as fresh.
AdamResult adam_step(const AdamState& state, const ModelParams& model, const GradientBundle& grad,
                     double lr, const AdamConfig& config = {});

/// sum_k weights[k] * models[k]. Throws ConfigError on architecture mismatch or size mismatch.
ModelParams linear_combination(std::span<const ModelParams> models, std::span<const double> weights);

/// Central finite differences of `loss` around `model` for every parameter.
std::vector<double> finite_difference_gradient(const ModelParams& model,
                                               const std::function<double(const ModelParams&)>& loss,
                                               double epsilon = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6);

/// Argmax with ties broken toward the lowest index.
int argmax(std::span<const double> v);

}  // namespace fedned::nn
