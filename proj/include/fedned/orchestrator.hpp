#pragma once

// Round loop: client sampling, warm-up gating, identification, aggregation, negative
// distillation, flag distribution and the three experiment presets.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedned/client.hpp"
#include "fedned/data.hpp"
#include "fedned/nn.hpp"
#include "fedned/server.hpp"

namespace fedned::orchestrator {

struct AblationSwitches {
  bool identification = true;
  bool negative_distillation = true;
  bool local_pseudo_labeling = true;

  friend bool operator==(const AblationSwitches&, const AblationSwitches&) = default;
};

enum class DataSource { blobs, idx, cache };
enum class PublicSource { shifted, in_domain };

struct DataConfig {
  DataSource source = DataSource::blobs;
  int classes = 10;
  int dim = 16;
  int per_class = 500;
  double separation = 3.0;
  double test_fraction = 0.2;
  int public_size = 128;
  PublicSource public_source = PublicSource::shifted;
  double public_shift = 1.5;
  std::string idx_images;
  std::string idx_labels;
  std::string cache_stem;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int clients = 20;
  int rounds = 50;
  int warmup_rounds = 10;
  double participation = 0.5;
  double lambda = 0.12;
  int mc_passes = 10;
  int local_epochs = 5;
  int batch_size = 32;
  double client_lr = 0.05;
  int distill_steps = 10;
  double distill_lr = 0.05;
  std::vector<int> hidden_layers{64, 64};
  double dropout = 0.5;
  DataConfig data;
  double dirichlet_alpha = 1.0;
  int min_samples_per_client = 10;
  data::NoiseSpec noise{0.1, 0.1, std::nullopt};
  server::AggregationStrategy strategy = server::AggregationStrategy::fedavg_all();
  AblationSwitches ablation;
  /// Independent worlds (seeds seed, seed+1, ...) averaged by the presets.
  int repeats = 1;

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
  int sampled_per_round() const;
};

/// Noise ratios above this count as ground-truth extremely noisy for detection metrics.
inline constexpr double kExtremeNoiseRatio = 0.9;

struct World {
  nn::Architecture architecture;
  std::vector<client::ClientState> clients;
  std::vector<double> noise_ratios;
  data::LabeledDataset test;
  data::PublicDataset public_set;
  std::vector<std::string> warnings;

  bool truly_noisy(int client_id) const {
    return noise_ratios[static_cast<std::size_t>(client_id)] > kExtremeNoiseRatio;
  }
};

World build_world(const ExperimentConfig& config);

/// Per-client noise ratios exactly as build_world draws them.
std::vector<double> client_noise_ratios(const ExperimentConfig& config);

struct ClientScore {
  int client_id = 0;
  double uncertainty = 0.0;
  bool identified_en = false;
  bool truly_noisy = false;
};

struct RoundReport {
  int round = 0;
  std::vector<int> sampled_ids;
  std::vector<int> mn_ids;
  std::vector<int> en_ids;
  std::vector<ClientScore> scores;
  std::vector<int> pseudo_uploads;
  std::vector<int> promoted_ids;
  std::vector<server::UncertaintyEntry> pseudo_scores;
  bool distilled = false;
  bool degenerate = false;
  double test_accuracy = 0.0;
  double test_loss = 0.0;
  double wall_seconds = 0.0;
};

struct RoundOutcome {
  nn::ModelParams global_model;
  RoundReport report;
  /// The aggregate before distillation (s^{t+1}).
  nn::ModelParams aggregate;
};

struct RuntimeOptions {
  unsigned threads = 1;

  /// threads from FEDNED_THREADS, default 1.
  static RuntimeOptions from_environment();
};

/// One round of the protocol. Updates the sampled clients' EN flags in `world`.
RoundOutcome run_round(World& world, const nn::ModelParams& global_model, const ExperimentConfig& config, int round,
                       const RuntimeOptions& runtime = {});

nn::ModelParams initial_global_model(const World& world, const ExperimentConfig& config);

/// Sampled ids for a round, sorted ascending.
std::vector<int> sample_clients(const ExperimentConfig& config, int round);

struct ExperimentResult {
  std::vector<RoundReport> reports;
  nn::ModelParams final_model;
};

ExperimentResult run_experiment_detailed(const ExperimentConfig& config, const RuntimeOptions& runtime = {});
std::vector<RoundReport> run_experiment(const ExperimentConfig& config, const RuntimeOptions& runtime = {});

/// Mean of the top-10 round accuracies (all rounds if fewer than ten).
double final_accuracy(const std::vector<RoundReport>& reports);

struct SweepRow {
  double weight = 0.0;
  double accuracy = 0.0;
  std::vector<double> weights_used;
};

/// {0, 1/(2K), 1/K, 2/K, 4/K}.
std::vector<double> default_weight_grid(int clients);

/// fixed_weights runs: target gets weight w, the other clients share 1-w equally.
/// Runs with identification off and full participation.
std::vector<SweepRow> preset_weight_sweep(const ExperimentConfig& config, int target_client,
                                          const std::vector<double>& weight_grid, const RuntimeOptions& runtime = {});

struct AblationRow {
  AblationSwitches switches;
  double accuracy = 0.0;
  std::vector<double> per_repeat;
  std::string note;
};

/// The five Id./ND/LPL combinations of the ablation grid.
std::vector<AblationSwitches> ablation_grid();
std::vector<AblationRow> preset_ablation(const ExperimentConfig& base, const RuntimeOptions& runtime = {});

struct EnCountRow {
  int count = 0;
  double fedned_accuracy = 0.0;
  double fedavg_accuracy = 0.0;
};

/// For each count, that many clients (ids 0..count-1) at noise 0.99, the rest clean.
std::vector<EnCountRow> preset_en_count_sweep(const ExperimentConfig& base, const std::vector<int>& counts,
                                              const RuntimeOptions& runtime = {});

/// Fixed noise vector with the first `noisy` clients at `ratio` and the rest clean.
std::vector<double> fixed_noise_profile(int clients, int noisy, double ratio = 0.99);

struct DetectionStats {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  std::size_t true_negative = 0;
  std::size_t separated_rounds = 0;
  std::size_t rounds_with_both = 0;

  double precision() const;
  double recall() const;
};

/// EN-detection counts against ground truth over rounds [first_round, last_round].
DetectionStats detection_stats(const std::vector<RoundReport>& reports, int first_round, int last_round);

}  // namespace fedned::orchestrator
