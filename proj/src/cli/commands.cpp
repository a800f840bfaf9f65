#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "fedned/cli.hpp"
#include "fedned/errors.hpp"

namespace fedned::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using orchestrator::RoundReport;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Empty field when there is nothing to average.
std::string mean_field(const std::vector<double>& v) {
  if (v.empty()) return "";
  double s = 0.0;
  for (double x : v) s += x;
  return fmt::format("{:.8f}", s / static_cast<double>(v.size()));
}

struct Manifest {
  ordered_json doc;
  fs::path path;

  Manifest(const std::string& command, const CliConfig& config, const fs::path& dir,
           const orchestrator::RuntimeOptions& runtime)
      : path(dir / "manifest.json") {
    doc["tool"] = "fedned";
    doc["version"] = kToolVersion;
    doc["command"] = command;
    doc["seed"] = config.experiment.seed;
    doc["threads"] = runtime.threads;
    doc["started_utc"] = utc_now();
    doc["finished_utc"] = nullptr;
    doc["artifacts"] = ordered_json::array({"config.json"});
    doc["config"] = to_json(config);
    flush();
  }
  void add(const std::string& artifact) { doc["artifacts"].push_back(artifact); }
  void finish() {
    doc["finished_utc"] = utc_now();
    flush();
  }
  void flush() const { write_text(path, doc.dump(2) + "\n"); }
};

void prepare_dir(const fs::path& dir, const CliConfig& config) {
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(config).dump(2) + "\n");
}

}  // namespace

std::string metrics_csv(const std::vector<RoundReport>& reports) {
  std::string out = "round,test_acc,test_loss,n_sampled,n_en,mean_U_mn,mean_U_en,promoted_pseudo,degenerate\n";
  for (const auto& r : reports) {
    std::vector<double> mn, en;
    for (const auto& s : r.scores) (s.identified_en ? en : mn).push_back(s.uncertainty);
    out += fmt::format("{},{:.6f},{:.6f},{},{},{},{},{},{}\n", r.round, r.test_accuracy, r.test_loss, r.sampled_ids.size(),
                       r.en_ids.size(), mean_field(mn), mean_field(en), r.promoted_ids.size(), r.degenerate ? 1 : 0);
  }
  return out;
}

std::string uncertainty_csv(const std::vector<RoundReport>& reports) {
  std::string out = "round,client_id,model,uncertainty,flagged,truly_noisy\n";
  for (const auto& r : reports) {
    for (const auto& s : r.scores)
      out += fmt::format("{},{},supervised,{:.8f},{},{}\n", r.round, s.client_id, s.uncertainty, s.identified_en ? 1 : 0,
                         s.truly_noisy ? 1 : 0);
    for (const auto& p : r.pseudo_scores) {
      const bool promoted = std::find(r.promoted_ids.begin(), r.promoted_ids.end(), p.model_id) != r.promoted_ids.end();
      const bool noisy = std::any_of(r.scores.begin(), r.scores.end(),
                                     [&](const auto& s) { return s.client_id == p.model_id && s.truly_noisy; });
      out += fmt::format("{},{},pseudo,{:.8f},{},{}\n", r.round, p.model_id, p.uncertainty, promoted ? 0 : 1, noisy ? 1 : 0);
    }
  }
  return out;
}

std::string sweep_csv(const std::vector<orchestrator::SweepRow>& rows) {
  std::string out = "weight,accuracy\n";
  for (const auto& r : rows) out += fmt::format("{:.6f},{:.6f}\n", r.weight, r.accuracy);
  return out;
}

std::string ablation_csv(const std::vector<orchestrator::AblationRow>& rows) {
  std::string out = "identification,negative_distillation,local_pseudo_labeling,accuracy,note\n";
  for (const auto& r : rows) {
    std::string note = r.note;
    if (!note.empty()) {
      std::string quoted = "\"";
      for (char ch : note) quoted += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      note = quoted + "\"";
    }
    out += fmt::format("{},{},{},{},{}\n", r.switches.identification ? 1 : 0, r.switches.negative_distillation ? 1 : 0,
                       r.switches.local_pseudo_labeling ? 1 : 0,
                       r.per_repeat.empty() ? std::string() : fmt::format("{:.6f}", r.accuracy), note);
  }
  return out;
}

std::string en_count_csv(const std::vector<orchestrator::EnCountRow>& rows) {
  std::string out = "en_count,fedned_acc,fedavg_acc\n";
  for (const auto& r : rows) out += fmt::format("{},{:.6f},{:.6f}\n", r.count, r.fedned_accuracy, r.fedavg_accuracy);
  return out;
}

UncertaintySummary summarize_uncertainty_log(const std::string& csv_text, int classes, int bins, int first_gap_round) {
  if (bins < 1) throw ArgumentError("histogram needs at least one bin");
  struct Row {
    int round;
    double u;
    bool noisy;
  };
  std::vector<Row> rows;
  std::istringstream in(csv_text);
  std::string line;
  std::getline(in, line);
  if (line.rfind("round,client_id,model,uncertainty", 0) != 0) throw FormatError("uncertainty log: unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw FormatError("uncertainty log: malformed row '" + line + "'");
    if (f[2] != "supervised") continue;
    rows.push_back({std::stoi(f[0]), std::stod(f[3]), f[5] == "1"});
  }

  double hi = std::log(static_cast<double>(classes)) / static_cast<double>(classes);
  for (const auto& r : rows) hi = std::max(hi, r.u);
  UncertaintySummary out;
  const double width = hi / bins;
  for (int b = 0; b < bins; ++b) out.bins.push_back({b * width, b + 1 == bins ? hi : (b + 1) * width, 0, 0});
  out.max_mn = -std::numeric_limits<double>::infinity();
  out.min_en = std::numeric_limits<double>::infinity();
  for (const auto& r : rows) {
    const int b = std::clamp(static_cast<int>(r.u / width), 0, bins - 1);
    (r.noisy ? out.bins[static_cast<std::size_t>(b)].en_count : out.bins[static_cast<std::size_t>(b)].mn_count)++;
    if (r.round < first_gap_round) continue;
    if (r.noisy) out.min_en = std::min(out.min_en, r.u);
    else out.max_mn = std::max(out.max_mn, r.u);
  }
  if (std::isfinite(out.max_mn) && std::isfinite(out.min_en) && out.max_mn < out.min_en)
    out.gap = std::make_pair(out.max_mn, out.min_en);
  return out;
}

std::vector<std::string> preset_names() { return {"weight-sweep", "ablation", "en-count"}; }

int cmd_run(const CliConfig& config, const fs::path& out_dir, const orchestrator::RuntimeOptions& runtime) {
  prepare_dir(out_dir, config);
  Manifest manifest("run", config, out_dir, runtime);
  const auto reports = orchestrator::run_experiment(config.experiment, runtime);
  write_text(out_dir / "metrics.csv", metrics_csv(reports));
  write_text(out_dir / "uncertainty.csv", uncertainty_csv(reports));
  manifest.add("metrics.csv");
  manifest.add("uncertainty.csv");
  manifest.finish();

  std::size_t degenerate = 0;
  for (const auto& r : reports) degenerate += r.degenerate ? 1 : 0;
  std::cout << fmt::format("rounds {}  final accuracy (top-10 mean) {:.4f}  degenerate rounds {}\n", reports.size(),
                           orchestrator::final_accuracy(reports), degenerate);
  std::cout << "wrote " << (out_dir / "metrics.csv").string() << "\n";
  return 0;
}

int cmd_preset(const std::string& name, const CliConfig& config, const fs::path& out_dir,
               const orchestrator::RuntimeOptions& runtime) {
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    std::cerr << "error: unknown preset '" << name << "'; valid presets: weight-sweep, ablation, en-count\n";
    return 2;
  }
  prepare_dir(out_dir, config);
  Manifest manifest("preset " + name, config, out_dir, runtime);
  const auto& exp = config.experiment;

  if (name == "weight-sweep") {
    std::vector<int> targets = config.sweep_clients;
    const auto ratios = orchestrator::client_noise_ratios(exp);
    if (targets.empty()) {
      auto noisy = std::find_if(ratios.begin(), ratios.end(), [](double r) { return r > orchestrator::kExtremeNoiseRatio; });
      auto clean = std::min_element(ratios.begin(), ratios.end());
      if (noisy != ratios.end()) targets.push_back(static_cast<int>(noisy - ratios.begin()));
      targets.push_back(static_cast<int>(clean - ratios.begin()));
    }
    const auto grid = config.weight_grid.empty() ? orchestrator::default_weight_grid(exp.clients) : config.weight_grid;
    for (int k : targets) {
      const auto rows = orchestrator::preset_weight_sweep(exp, k, grid, runtime);
      const std::string file = fmt::format("weight_sweep_client{}.csv", k);
      write_text(out_dir / file, sweep_csv(rows));
      manifest.add(file);
      const auto best = std::max_element(rows.begin(), rows.end(),
                                         [](const auto& a, const auto& b) { return a.accuracy < b.accuracy; });
      std::cout << fmt::format("client {} (noise {:.2f}): argmax weight {:.4f} accuracy {:.4f}\n", k,
                               ratios[static_cast<std::size_t>(k)], best->weight, best->accuracy);
      for (const auto& r : rows) std::cout << fmt::format("  w={:.4f}  acc={:.4f}\n", r.weight, r.accuracy);
    }
  } else if (name == "ablation") {
    const auto rows = orchestrator::preset_ablation(exp, runtime);
    write_text(out_dir / "ablation.csv", ablation_csv(rows));
    manifest.add("ablation.csv");
    std::cout << "Id  ND  LPL  accuracy\n";
    for (const auto& r : rows) {
      const auto flag = [](bool b) { return b ? "on " : "off"; };
      std::cout << fmt::format("{} {} {}  {}\n", flag(r.switches.identification), flag(r.switches.negative_distillation),
                               flag(r.switches.local_pseudo_labeling),
                               r.per_repeat.empty() ? r.note : fmt::format("{:.4f}", r.accuracy));
    }
  } else {
    const auto rows = orchestrator::preset_en_count_sweep(exp, config.en_counts, runtime);
    write_text(out_dir / "en_count.csv", en_count_csv(rows));
    manifest.add("en_count.csv");
    std::cout << "EN clients  FedNed  FedAvg\n";
    for (const auto& r : rows) std::cout << fmt::format("{:>10}  {:.4f}  {:.4f}\n", r.count, r.fedned_accuracy, r.fedavg_accuracy);
    if (rows.size() >= 2)
      std::cout << fmt::format("drop first->last: FedNed {:.4f}  FedAvg {:.4f}\n",
                               rows.front().fedned_accuracy - rows.back().fedned_accuracy,
                               rows.front().fedavg_accuracy - rows.back().fedavg_accuracy);
  }
  manifest.finish();
  return 0;
}

int cmd_inspect_uncertainty(const fs::path& run_dir, int bins) {
  const fs::path log = run_dir / "uncertainty.csv";
  std::ifstream in(log, std::ios::binary);
  if (!in) {
    std::cerr << "error: no uncertainty log at " << log.string() << "\n";
    return 1;
  }
  std::stringstream buf;
  buf << in.rdbuf();

  int classes = 10;
  int warmup = 0;
  if (std::ifstream cfg(run_dir / "config.json"); cfg) {
    std::stringstream cbuf;
    cbuf << cfg.rdbuf();
    const CliConfig config = config_from_json(ordered_json::parse(cbuf.str()));
    classes = config.experiment.data.classes;
    warmup = config.experiment.warmup_rounds;
  }

  const auto summary = summarize_uncertainty_log(buf.str(), classes, bins, warmup + 1);
  std::string csv = "bin_lo,bin_hi,mn_count,en_count\n";
  for (const auto& b : summary.bins) csv += fmt::format("{:.8f},{:.8f},{},{}\n", b.lo, b.hi, b.mn_count, b.en_count);
  write_text(run_dir / "uncertainty_histogram.csv", csv);

  std::cout << "wrote " << (run_dir / "uncertainty_histogram.csv").string() << "\n";
  if (summary.gap)
    std::cout << fmt::format("MN/EN gap after warm-up: ({:.6f}, {:.6f})\n", summary.gap->first, summary.gap->second);
  else if (std::isfinite(summary.max_mn) && std::isfinite(summary.min_en))
    std::cout << fmt::format("MN/EN gap after warm-up: none (max MN {:.6f} >= min EN {:.6f})\n", summary.max_mn,
                             summary.min_en);
  else
    std::cout << "MN/EN gap after warm-up: undefined (one group has no post-warm-up scores)\n";
  return 0;
}

}  // namespace fedned::cli
