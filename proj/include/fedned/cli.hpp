#pragma once

// Command-line front end: strict JSON configs, dotted overrides, run / preset /
// inspect-uncertainty verbs and their CSV + JSON artifacts.

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedned/orchestrator.hpp"

namespace fedned::cli {

inline constexpr const char* kToolVersion = "0.1.0";

/// Bad config document or override: unknown key, wrong type, violated constraint.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CliConfig {
  orchestrator::ExperimentConfig experiment;
  /// weight-sweep targets; empty picks the first extremely noisy and the first clean client.
  std::vector<int> sweep_clients;
  /// weight-sweep grid; empty means {0, 1/2K, 1/K, 2/K, 4/K}.
  std::vector<double> weight_grid;
  std::vector<int> en_counts{1, 3, 5, 7, 9};
};

nlohmann::ordered_json to_json(const CliConfig& config);

/// Strict: every key must exist in the schema and carry the right type. Runs validate().
CliConfig config_from_json(const nlohmann::ordered_json& doc);

/// `path.to.key=value`; value parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::ordered_json& doc, const std::string& assignment);

/// Defaults <- file (if any) <- overrides <- seed. Throws SchemaError.
CliConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed = std::nullopt);

std::string metrics_csv(const std::vector<orchestrator::RoundReport>& reports);
std::string uncertainty_csv(const std::vector<orchestrator::RoundReport>& reports);
std::string sweep_csv(const std::vector<orchestrator::SweepRow>& rows);
std::string ablation_csv(const std::vector<orchestrator::AblationRow>& rows);
std::string en_count_csv(const std::vector<orchestrator::EnCountRow>& rows);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t mn_count = 0;
  std::size_t en_count = 0;
};

struct UncertaintySummary {
  std::vector<HistogramBin> bins;
  /// (max MN U, min EN U) over post-warm-up rounds when the two groups do not overlap.
  std::optional<std::pair<double, double>> gap;
  double max_mn = 0.0;
  double min_en = 0.0;
};

/// Histogram over all rounds of supervised-model U, split by ground truth
/// (noise ratio above 0.9 is EN); range [0, ln(C)/C].
UncertaintySummary summarize_uncertainty_log(const std::string& csv_text, int classes, int bins, int first_gap_round);

/// Exit codes: 0 ok, 1 runtime failure, 2 usage or schema error.
int cmd_run(const CliConfig& config, const std::filesystem::path& out_dir, const orchestrator::RuntimeOptions& runtime);
int cmd_preset(const std::string& name, const CliConfig& config, const std::filesystem::path& out_dir,
               const orchestrator::RuntimeOptions& runtime);
int cmd_inspect_uncertainty(const std::filesystem::path& run_dir, int bins);

std::vector<std::string> preset_names();

int run_app(int argc, char** argv);

}  // namespace fedned::cli
