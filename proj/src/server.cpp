#include "fedned/server.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedned/errors.hpp"
#include "fedned/parallel.hpp"

namespace fedned::server {

nn::Matrix mc_dropout_predict_batch(const nn::ModelParams& model, const nn::Matrix& inputs, int passes,
                                    std::uint64_t seed) {
  if (passes < 1) throw ArgumentError("mc_dropout_predict: passes must be >= 1");
  RandomStream rng = make_stream(seed);
  nn::Matrix mean = nn::Matrix::Zero(inputs.rows(), model.architecture.class_count());
  for (int p = 0; p < passes; ++p) mean += nn::predict_proba(model, inputs, &rng);
  return mean / static_cast<double>(passes);
}

nn::Prediction mc_dropout_predict(const nn::ModelParams& model, std::span<const double> x, int passes,
                                  std::uint64_t seed) {
  if (static_cast<int>(x.size()) != model.architecture.input_size())
    throw ConfigError("mc_dropout_predict: input dimension mismatch");
  nn::Matrix row(1, static_cast<Eigen::Index>(x.size()));
  std::copy(x.begin(), x.end(), row.data());
  const nn::Matrix probs = mc_dropout_predict_batch(model, row, passes, seed);
  return {std::vector<double>(probs.data(), probs.data() + probs.size())};
}

double mean_class_entropy(const nn::Matrix& probs) {
  if (probs.size() == 0) throw ArgumentError("mean_class_entropy: empty probability matrix");
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    if (p > 0.0) total -= p * std::log(p);
  }
  return total / static_cast<double>(probs.size());
}

double model_uncertainty(const nn::ModelParams& model, const data::PublicDataset& public_set, int passes,
                         std::uint64_t seed) {
  if (public_set.size() == 0) throw ArgumentError("model_uncertainty: empty public set");
  return mean_class_entropy(mc_dropout_predict_batch(model, public_set.features, passes, seed));
}

bool UncertaintyReport::is_en(int id) const {
  return std::find(en_ids.begin(), en_ids.end(), id) != en_ids.end();
}

std::optional<double> UncertaintyReport::uncertainty_of(int id) const {
  for (const auto& e : entries)
    if (e.model_id == id) return e.uncertainty;
  return std::nullopt;
}

UncertaintyReport identify(std::span<const IdentifiedModel> models, const data::PublicDataset& public_set,
                           double threshold, int passes, std::uint64_t seed, unsigned threads) {
  if (models.empty()) throw ArgumentError("identify: no models to score");
  UncertaintyReport report;
  report.threshold = threshold;
  report.entries.resize(models.size());
  parallel_for(models.size(), threads, [&](std::size_t i) {
    const auto id = models[i].id;
    report.entries[i] = {id, model_uncertainty(*models[i].model, public_set, passes,
                                               derive_seed(seed, {static_cast<std::uint64_t>(id)}))};
  });
  for (const auto& e : report.entries) (e.uncertainty > threshold ? report.en_ids : report.mn_ids).push_back(e.model_id);
  return report;
}

AggregationStrategy AggregationStrategy::fixed(std::vector<double> w) {
  AggregationStrategy s{Kind::fixed_weights, std::move(w)};
  s.validate();
  return s;
}

void AggregationStrategy::validate() const {
  if (kind != Kind::fixed_weights) return;
  if (weights.empty()) throw ConfigError("fixed_weights strategy needs a weight vector");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("fixed_weights entries must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("fixed_weights must sum to 1 within 1e-9");
}

std::string to_string(AggregationStrategy::Kind kind) {
  switch (kind) {
    case AggregationStrategy::Kind::fedavg_all: return "fedavg_all";
    case AggregationStrategy::Kind::mn_only: return "mn_only";
    case AggregationStrategy::Kind::fixed_weights: return "fixed_weights";
  }
  return "unknown";
}

namespace {

AggregationResult combine(std::vector<const nn::ModelParams*> models, std::vector<std::pair<int, double>> weights) {
  double total = 0.0;
  for (const auto& [id, w] : weights) total += w;
  if (!(total > 0.0)) throw ConfigError("aggregate: aggregation weights sum to zero");
  std::vector<double> normalized;
  normalized.reserve(weights.size());
  for (auto& [id, w] : weights) {
    w /= total;
    normalized.push_back(w);
  }
  AggregationResult out;
  out.model = nn::ModelParams::zeros(models.front()->architecture);
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (!models[k]->congruent_with(out.model)) throw ConfigError("aggregate: architecture mismatch");
    for (std::size_t i = 0; i < out.model.layers.size(); ++i) {
      out.model.layers[i].weight += normalized[k] * models[k]->layers[i].weight;
      out.model.layers[i].bias += normalized[k] * models[k]->layers[i].bias;
    }
  }
  out.weights = std::move(weights);
  return out;
}

}  // namespace

AggregationResult aggregate(std::span<const client::ClientUpload> uploads, const UncertaintyReport& report,
                            const AggregationStrategy& strategy, const AggregationContext& context) {
  strategy.validate();
  std::vector<const nn::ModelParams*> models;
  std::vector<std::pair<int, double>> weights;

  switch (strategy.kind) {
    case AggregationStrategy::Kind::fedavg_all:
      if (uploads.empty()) throw ArgumentError("aggregate: no uploads");
      for (const auto& u : uploads) {
        models.push_back(&u.supervised_model);
        weights.emplace_back(u.client_id, static_cast<double>(u.sample_count));
      }
      return combine(std::move(models), std::move(weights));

    case AggregationStrategy::Kind::fixed_weights:
      if (uploads.empty()) throw ArgumentError("aggregate: no uploads");
      for (const auto& u : uploads) {
        if (u.client_id < 0 || static_cast<std::size_t>(u.client_id) >= strategy.weights.size())
          throw ConfigError("aggregate: no fixed weight for client " + std::to_string(u.client_id));
        models.push_back(&u.supervised_model);
        weights.emplace_back(u.client_id, strategy.weights[static_cast<std::size_t>(u.client_id)]);
      }
      return combine(std::move(models), std::move(weights));

    case AggregationStrategy::Kind::mn_only:
      break;
  }

  for (const auto& u : uploads) {
    if (report.is_en(u.client_id)) continue;
    models.push_back(&u.supervised_model);
    weights.emplace_back(u.client_id, static_cast<double>(u.sample_count));
  }
  std::vector<int> promoted;
  std::vector<UncertaintyEntry> pseudo_scores;
  for (const auto& u : uploads) {
    if (!u.pseudo_model) continue;
    if (context.public_set == nullptr) throw ConfigError("aggregate: pseudo-model promotion needs a public set");
    const double score = model_uncertainty(*u.pseudo_model, *context.public_set, context.mc_passes,
                                           derive_seed(context.seed, {static_cast<std::uint64_t>(u.client_id)}));
    pseudo_scores.push_back({u.client_id, score});
    if (score <= report.threshold) {
      models.push_back(&*u.pseudo_model);
      weights.emplace_back(u.client_id, static_cast<double>(u.sample_count));
      promoted.push_back(u.client_id);
    }
  }

  AggregationResult out;
  if (models.empty()) {
    if (context.previous_global == nullptr)
      throw ConfigError("aggregate: empty MN pool and no previous global model to fall back on");
    out.model = *context.previous_global;
    out.degenerate = true;
  } else {
    out = combine(std::move(models), std::move(weights));
  }
  out.promoted_ids = std::move(promoted);
  out.pseudo_scores = std::move(pseudo_scores);
  return out;
}

nn::Matrix negative_distillation_target(const nn::ModelParams& teacher, const data::PublicDataset& public_set) {
  nn::Matrix reciprocal = nn::predict_proba(teacher, public_set.features);
  reciprocal = reciprocal.cwiseMax(kReciprocalClamp).cwiseInverse();
  return nn::softmax_rows(reciprocal);
}

nn::LossAndGrad negative_distillation_loss_and_grad(const nn::ModelParams& student,
                                                    std::span<const nn::Matrix> targets,
                                                    const data::PublicDataset& public_set) {
  if (targets.empty()) throw ArgumentError("negative distillation: no teacher targets");
  const nn::ForwardTrace trace = nn::forward_trace(student, public_set.features, nullptr);
  const nn::Matrix probs = nn::softmax_rows(trace.logits);     // f(x; s)
  const nn::Matrix soft = nn::softmax_rows(probs);             // sigma(f(x; s))
  const nn::Matrix log_soft = soft.array().log().matrix();
  const double scale = 1.0 / (static_cast<double>(targets.size()) * static_cast<double>(public_set.size()));

  double loss = 0.0;
  nn::Matrix grad_probs = nn::Matrix::Zero(probs.rows(), probs.cols());
  for (const auto& target : targets) {
    if (target.rows() != probs.rows() || target.cols() != probs.cols())
      throw ConfigError("negative distillation: target shape mismatch");
    const nn::Matrix log_ratio = log_soft - target.cwiseMax(nn::kKlClamp).array().log().matrix();
    loss += soft.cwiseProduct(log_ratio).sum();
    // d KL / d u_j = a_j (r_j - sum_c a_c r_c), r = log(a / t)
    const Eigen::VectorXd expected = soft.cwiseProduct(log_ratio).rowwise().sum();
    grad_probs += (soft.array() * (log_ratio.colwise() - expected).array()).matrix();
  }
  // back through f = softmax(z)
  const Eigen::VectorXd inner = probs.cwiseProduct(grad_probs).rowwise().sum();
  nn::Matrix grad_logits = (probs.array() * (grad_probs.colwise() - inner).array()).matrix();
  grad_logits *= scale;
  return {loss * scale, nn::backward(student, trace, grad_logits)};
}

nn::ModelParams negative_distill(const nn::ModelParams& student, std::span<const nn::ModelParams> en_models,
                                 const data::PublicDataset& public_set, int steps, double lr) {
  if (steps < 0) throw ArgumentError("negative_distill: steps must be >= 0");
  for (const auto& t : en_models)
    if (!t.congruent_with(student)) throw ConfigError("negative_distill: teacher architecture differs from student");
  if (en_models.empty() || steps == 0) return student;
  if (public_set.size() == 0) throw ArgumentError("negative_distill: empty public set");

  std::vector<nn::Matrix> targets;
  targets.reserve(en_models.size());
  for (const auto& t : en_models) targets.push_back(negative_distillation_target(t, public_set));

  nn::ModelParams model = student;
  nn::AdamState state;
  for (int s = 0; s < steps; ++s) {
    const auto step = negative_distillation_loss_and_grad(model, targets, public_set);
    auto next = nn::adam_step(state, model, step.grad, lr);
    model = std::move(next.model);
    state = std::move(next.state);
  }
  return model;
}

Evaluation evaluate(const nn::ModelParams& model, const data::LabeledDataset& test) {
  if (test.empty()) throw ArgumentError("evaluate: empty test set");
  const nn::ForwardTrace trace = nn::forward_trace(model, test.features, nullptr);
  std::size_t correct = 0;
  double loss = 0.0;
  for (Eigen::Index r = 0; r < trace.logits.rows(); ++r) {
    const auto z = trace.logits.row(r);
    const int y = test.labels[static_cast<std::size_t>(r)];
    int best = 0;
    for (Eigen::Index c = 1; c < z.size(); ++c)
      if (z(c) > z(best)) best = static_cast<int>(c);
    correct += best == y ? 1 : 0;
    const double mx = z.maxCoeff();
    loss += mx + std::log((z.array() - mx).exp().sum()) - z(y);
  }
  const auto n = static_cast<double>(test.size());
  return {static_cast<double>(correct) / n, loss / n};
}

}  // namespace fedned::server
