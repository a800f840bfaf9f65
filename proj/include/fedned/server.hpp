#pragma once

// Server side: MC-dropout uncertainty scoring, EN/MN identification, sample-weighted
// aggregation and negative distillation over the public set.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedned/client.hpp"
#include "fedned/data.hpp"
#include "fedned/nn.hpp"

namespace fedned::server {

/// Reciprocal floor for teacher probabilities before inversion.
inline constexpr double kReciprocalClamp = 1e-6;

/// Mean of `passes` dropout-active forward passes.
nn::Prediction mc_dropout_predict(const nn::ModelParams& model, std::span<const double> x, int passes,
                                  std::uint64_t seed);
/// Batched variant: row r is the MC-averaged prediction for inputs row r.
nn::Matrix mc_dropout_predict_batch(const nn::ModelParams& model, const nn::Matrix& inputs, int passes,
                                    std::uint64_t seed);

/// Class- and sample-averaged entropy of the MC-dropout predictive distribution,
/// -1/(C |D_U|) sum_c sum_x p ln p, with 0 ln 0 = 0. Lies in [0, ln(C)/C].
double model_uncertainty(const nn::ModelParams& model, const data::PublicDataset& public_set, int passes,
                         std::uint64_t seed);

/// Entropy score of a fixed probability matrix (rows = samples); the scoring half of model_uncertainty.
double mean_class_entropy(const nn::Matrix& probs);

struct UncertaintyEntry {
  int model_id = 0;
  double uncertainty = 0.0;
};

struct UncertaintyReport {
  std::vector<UncertaintyEntry> entries;
  double threshold = 0.0;
  std::vector<int> mn_ids;  // U <= threshold
  std::vector<int> en_ids;  // U > threshold

  bool is_en(int id) const;
  std::optional<double> uncertainty_of(int id) const;
};

struct IdentifiedModel {
  int id = 0;
  const nn::ModelParams* model = nullptr;
};

/// Scores every model (MC stream derived from seed and model id) and splits at `threshold`.
/// `threads` > 1 scores models concurrently; results do not depend on it.
UncertaintyReport identify(std::span<const IdentifiedModel> models, const data::PublicDataset& public_set,
                           double threshold, int passes, std::uint64_t seed, unsigned threads = 1);

struct AggregationStrategy {
  enum class Kind { fedavg_all, mn_only, fixed_weights };
  Kind kind = Kind::fedavg_all;
  /// fixed_weights only: one weight per client id, summing to 1.
  std::vector<double> weights;

  static AggregationStrategy fedavg_all() { return {Kind::fedavg_all, {}}; }
  static AggregationStrategy mn_only() { return {Kind::mn_only, {}}; }
  static AggregationStrategy fixed(std::vector<double> w);

  void validate() const;
};

std::string to_string(AggregationStrategy::Kind kind);

/// Inputs mn_only needs beyond the uploads and the report.
struct AggregationContext {
  const nn::ModelParams* previous_global = nullptr;
  const data::PublicDataset* public_set = nullptr;
  int mc_passes = 10;
  std::uint64_t seed = 0;
};

struct AggregationResult {
  nn::ModelParams model;
  /// (model id, weight) pairs actually applied; pseudo-models appear with their client id.
  std::vector<std::pair<int, double>> weights;
  std::vector<int> promoted_ids;
  std::vector<UncertaintyEntry> pseudo_scores;
  bool degenerate = false;
};

/// mn_only: sample-weighted mean of MN supervised models plus every pseudo-model whose own
/// uncertainty is <= the report threshold. Empty pool -> previous global, degenerate = true.
/// fedavg_all: sample-weighted mean of all supervised models.
/// fixed_weights: strategy weights over the supervised models present, renormalised.
AggregationResult aggregate(std::span<const client::ClientUpload> uploads, const UncertaintyReport& report,
                            const AggregationStrategy& strategy, const AggregationContext& context = {});

/// Teacher target sigma(1 / max(f(x; w), 1e-6)) per public sample (rows), teacher dropout off.
nn::Matrix negative_distillation_target(const nn::ModelParams& teacher, const data::PublicDataset& public_set);

/// L_nd = 1/(|N| |D_U|) sum_k sum_x KL[sigma(f(x; s)), target_k(x)] and its gradient in the student.
nn::LossAndGrad negative_distillation_loss_and_grad(const nn::ModelParams& student,
                                                    std::span<const nn::Matrix> targets,
                                                    const data::PublicDataset& public_set);

/// `steps` full-batch Adam steps on L_nd over the public set; teachers fixed.
nn::ModelParams negative_distill(const nn::ModelParams& student, std::span<const nn::ModelParams> en_models,
                                 const data::PublicDataset& public_set, int steps, double lr);

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

/// Dropout-off top-1 accuracy (ties to the lowest class) and mean cross-entropy.
Evaluation evaluate(const nn::ModelParams& model, const data::LabeledDataset& test);

}  // namespace fedned::server
