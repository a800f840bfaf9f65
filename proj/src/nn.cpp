#include "fedned/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fedned/errors.hpp"

namespace fedned::nn {

namespace {

template <typename Layers>
std::size_t count_params(const Layers& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

template <typename Layers>
bool layers_finite(const Layers& layers) {
  for (const auto& l : layers)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

template <typename Layers>
std::vector<double> flatten_layers(const Layers& layers) {
  std::vector<double> out;
  out.reserve(count_params(layers));
  for (const auto& l : layers) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return out;
}

std::vector<DenseLayer> zero_layers(const Architecture& arch) {
  std::vector<DenseLayer> layers;
  layers.reserve(arch.layer_count());
  for (std::size_t i = 0; i < arch.layer_count(); ++i) {
    const int in = arch.layer_sizes[i];
    const int out = arch.layer_sizes[i + 1];
    layers.push_back({Matrix::Zero(out, in), Vector::Zero(out)});
  }
  return layers;
}

bool same_shape(const std::vector<DenseLayer>& a, const std::vector<DenseLayer>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].weight.rows() != b[i].weight.rows() || a[i].weight.cols() != b[i].weight.cols() ||
        a[i].bias.size() != b[i].bias.size())
      return false;
  }
  return true;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, RandomStream& rng) {
  Matrix mask(rows, cols);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) mask(r, c) = unit(rng) < rate ? 0.0 : keep_scale;
  return mask;
}

}  // namespace

Architecture Architecture::mlp(std::vector<int> sizes, double dropout_rate) {
  Architecture arch;
  arch.layer_sizes = std::move(sizes);
  const std::size_t hidden = arch.layer_sizes.size() >= 2 ? arch.layer_sizes.size() - 2 : 0;
  arch.hidden_dropout.assign(hidden, dropout_rate);
  return arch;
}

void Architecture::validate() const {
  if (layer_sizes.size() < 2) throw ConfigError("architecture needs at least input and output sizes");
  for (int s : layer_sizes)
    if (s <= 0) throw ConfigError("architecture layer sizes must be positive");
  if (hidden_dropout.size() != layer_sizes.size() - 2)
    throw ConfigError("architecture needs one dropout rate per hidden layer");
  for (double r : hidden_dropout)
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
}

ModelParams ModelParams::zeros(const Architecture& arch) {
  arch.validate();
  return {arch, zero_layers(arch)};
}

ModelParams ModelParams::glorot_uniform(const Architecture& arch, std::uint64_t seed) {
  ModelParams m = zeros(arch);
  RandomStream rng = make_stream(seed);
  for (auto& layer : m.layers) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
  }
  return m;
}

std::size_t ModelParams::parameter_count() const { return count_params(layers); }
bool ModelParams::all_finite() const { return layers_finite(layers); }
std::vector<double> ModelParams::flatten() const { return flatten_layers(layers); }

void ModelParams::assign_flat(std::span<const double> values) {
  if (values.size() != parameter_count()) throw ConfigError("flat parameter vector has wrong length");
  std::size_t at = 0;
  for (auto& l : layers) {
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), l.weight.size(), l.weight.data());
    at += static_cast<std::size_t>(l.weight.size());
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), l.bias.size(), l.bias.data());
    at += static_cast<std::size_t>(l.bias.size());
  }
}

GradientBundle GradientBundle::zeros_like(const ModelParams& model) {
  return {zero_layers(model.architecture)};
}

bool GradientBundle::congruent_with(const ModelParams& model) const { return same_shape(layers, model.layers); }
bool GradientBundle::all_finite() const { return layers_finite(layers); }
std::vector<double> GradientBundle::flatten() const { return flatten_layers(layers); }

GradientBundle& GradientBundle::operator+=(const GradientBundle& other) {
  if (!same_shape(layers, other.layers)) throw ConfigError("gradient shape mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += other.layers[i].weight;
    layers[i].bias += other.layers[i].bias;
  }
  return *this;
}

GradientBundle& GradientBundle::operator*=(double s) {
  for (auto& l : layers) {
    l.weight *= s;
    l.bias *= s;
  }
  return *this;
}

std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& o : out) o /= sum;
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ArgumentError("kl_divergence: size mismatch");
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0 || q[i] < 0.0) throw ArgumentError("kl_divergence: negative probability");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    throw ArgumentError("kl_divergence: argument not on the probability simplex");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kKlClamp)));
  }
  return std::max(kl, 0.0);
}

ForwardTrace forward_trace(const ModelParams& model, const Matrix& inputs, RandomStream* dropout_rng) {
  if (inputs.cols() != model.architecture.input_size())
    throw ConfigError("forward: input dimension " + std::to_string(inputs.cols()) + " != model input size " +
                      std::to_string(model.architecture.input_size()));
  ForwardTrace trace;
  trace.activations.reserve(model.layers.size());
  trace.activations.push_back(inputs);
  const std::size_t hidden = model.layers.size() - 1;
  for (std::size_t i = 0; i < hidden; ++i) {
    const auto& layer = model.layers[i];
    Matrix pre = trace.activations.back() * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    Matrix act = pre.cwiseMax(0.0);
    const double rate = model.architecture.hidden_dropout[i];
    if (dropout_rng != nullptr && rate > 0.0) {
      Matrix mask = dropout_mask(act.rows(), act.cols(), rate, *dropout_rng);
      act.array() *= mask.array();
      trace.masks.push_back(std::move(mask));
    } else {
      trace.masks.emplace_back();
    }
    trace.pre_activations.push_back(std::move(pre));
    trace.activations.push_back(std::move(act));
  }
  const auto& out = model.layers.back();
  trace.logits = trace.activations.back() * out.weight.transpose();
  trace.logits.rowwise() += out.bias.transpose();
  return trace;
}

GradientBundle backward(const ModelParams& model, const ForwardTrace& trace, const Matrix& logit_grad) {
  GradientBundle grad = GradientBundle::zeros_like(model);
  Matrix delta = logit_grad;
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const Matrix& input = trace.activations[li];
    grad.layers[li].weight = delta.transpose() * input;
    grad.layers[li].bias = delta.colwise().sum().transpose();
    if (li == 0) break;
    Matrix upstream = delta * model.layers[li].weight;
    const Matrix& mask = trace.masks[li - 1];
    if (mask.size() != 0) upstream.array() *= mask.array();
    upstream.array() *= (trace.pre_activations[li - 1].array() > 0.0).cast<double>();
    delta = std::move(upstream);
  }
  return grad;
}

Matrix predict_proba(const ModelParams& model, const Matrix& inputs, RandomStream* dropout_rng) {
  return softmax_rows(forward_trace(model, inputs, dropout_rng).logits);
}

Prediction forward(const ModelParams& model, std::span<const double> x, bool dropout_active, RandomStream& rng) {
  if (static_cast<int>(x.size()) != model.architecture.input_size())
    throw ConfigError("forward: input dimension " + std::to_string(x.size()) + " != model input size " +
                      std::to_string(model.architecture.input_size()));
  Matrix row(1, static_cast<Eigen::Index>(x.size()));
  std::copy(x.begin(), x.end(), row.data());
  Matrix probs = predict_proba(model, row, dropout_active ? &rng : nullptr);
  return {std::vector<double>(probs.data(), probs.data() + probs.size())};
}

LossAndGrad cross_entropy_loss_and_grad(const ModelParams& model, const Matrix& inputs,
                                        std::span<const int> labels, RandomStream* dropout_rng) {
  if (inputs.rows() == 0 || labels.empty()) throw ArgumentError("cross_entropy: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != inputs.rows())
    throw ArgumentError("cross_entropy: label count does not match batch size");
  const int classes = model.architecture.class_count();
  ForwardTrace trace = forward_trace(model, inputs, dropout_rng);
  const auto n = static_cast<double>(labels.size());
  Matrix grad_logits(trace.logits.rows(), trace.logits.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < trace.logits.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= classes) throw ArgumentError("cross_entropy: label out of range");
    auto z = trace.logits.row(r);
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    loss += lse - z(y);
    grad_logits.row(r) = (z.array() - lse).exp().matrix();
    grad_logits(r, y) -= 1.0;
  }
  grad_logits /= n;
  return {loss / n, backward(model, trace, grad_logits)};
}

ModelParams sgd_step(const ModelParams& model, const GradientBundle& grad, double lr) {
  if (!grad.congruent_with(model)) throw ConfigError("sgd_step: gradient shape mismatch");
  ModelParams out = model;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    out.layers[i].weight -= lr * grad.layers[i].weight;
    out.layers[i].bias -= lr * grad.layers[i].bias;
  }
  return out;
}

AdamResult adam_step(const AdamState& state, const ModelParams& model, const GradientBundle& grad, double lr,
                     const AdamConfig& config) {
  if (!grad.congruent_with(model)) throw ConfigError("adam_step: gradient shape mismatch");
  AdamState next = state;
  if (next.fresh() && next.first_moment.layers.empty()) {
    next.first_moment = GradientBundle::zeros_like(model);
    next.second_moment = GradientBundle::zeros_like(model);
  }
  if (!next.first_moment.congruent_with(model) || !next.second_moment.congruent_with(model))
    throw ConfigError("adam_step: optimizer state shape mismatch");
  next.step += 1;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(next.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(next.step));

  ModelParams out = model;
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config.epsilon);
  };
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    update(out.layers[i].weight, next.first_moment.layers[i].weight, next.second_moment.layers[i].weight,
           grad.layers[i].weight);
    update(out.layers[i].bias, next.first_moment.layers[i].bias, next.second_moment.layers[i].bias,
           grad.layers[i].bias);
  }
  return {std::move(out), std::move(next)};
}

ModelParams linear_combination(std::span<const ModelParams> models, std::span<const double> weights) {
  if (models.empty()) throw ConfigError("linear_combination: no models");
  if (models.size() != weights.size()) throw ConfigError("linear_combination: weight count mismatch");
  ModelParams out = ModelParams::zeros(models.front().architecture);
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (!models[k].congruent_with(out)) throw ConfigError("linear_combination: architecture mismatch");
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
      out.layers[i].weight += weights[k] * models[k].layers[i].weight;
      out.layers[i].bias += weights[k] * models[k].layers[i].bias;
    }
  }
  return out;
}

std::vector<double> finite_difference_gradient(const ModelParams& model,
                                               const std::function<double(const ModelParams&)>& loss,
                                               double epsilon) {
  std::vector<double> flat = model.flatten();
  std::vector<double> grad(flat.size());
  ModelParams probe = model;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double saved = flat[i];
    flat[i] = saved + epsilon;
    probe.assign_flat(flat);
    const double up = loss(probe);
    flat[i] = saved - epsilon;
    probe.assign_flat(flat);
    const double down = loss(probe);
    flat[i] = saved;
    grad[i] = (up - down) / (2.0 * epsilon);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

int argmax(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

}  // namespace fedned::nn
