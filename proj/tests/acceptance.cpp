// One line per acceptance criterion. Exit status is nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "fedned/cli.hpp"
#include "fedned/errors.hpp"
#include "fedned/nn.hpp"
#include "fedned/orchestrator.hpp"
#include "fedned/server.hpp"

using namespace fedned;
using namespace fedned::orchestrator;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::cout << fmt::format("[{}] {}. {}: {} ({:.1f}s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail, secs) << std::flush;
}

fs::path config_dir() {
  if (const char* env = std::getenv("FEDNED_CONFIG_DIR")) return env;
#ifdef FEDNED_CONFIG_DIR
  return FEDNED_CONFIG_DIR;
#else
  return "configs";
#endif
}

cli::CliConfig desk(const std::string& name) { return cli::load_config(config_dir() / (name + ".json"), {}); }

nn::Matrix gaussian(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  nn::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

nn::ModelParams random_model(const std::vector<int>& sizes, std::uint64_t seed) {
  auto m = nn::ModelParams::glorot_uniform(nn::Architecture::mlp(sizes, 0.5), seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& l : m.layers)
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = u(rng);
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome equation_oracles() {
  const int C = 10;
  auto zero = nn::ModelParams::zeros(nn::Architecture::mlp({16, 64, 64, C}, 0.5));
  std::mt19937_64 rng(1);
  const nn::Matrix x = gaussian(32, 16, rng);
  std::vector<int> y(32);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % C);
  const double ce_err = std::abs(nn::cross_entropy_loss_and_grad(zero, x, y).loss - std::log(10.0));

  const double u_err = std::abs(server::model_uncertainty(zero, {x}, 10, 0) - std::log(10.0) / 10.0);

  const std::vector<double> p{1.0, 0.0}, q{0.5, 0.5};
  const double kl_err = std::abs(nn::kl_divergence(p, q) - std::log(2.0));

  const auto w1 = random_model({16, 64, 64, C}, 2), w2 = random_model({16, 64, 64, C}, 3);
  std::vector<client::ClientUpload> ups(2);
  ups[0] = {0, w1, std::nullopt, 3};
  ups[1] = {1, w2, std::nullopt, 1};
  server::UncertaintyReport rep;
  rep.threshold = 1.0;
  rep.mn_ids = {0, 1};
  const auto agg = server::aggregate(ups, rep, server::AggregationStrategy::mn_only()).model.flatten();
  const auto a = w1.flatten(), b = w2.flatten();
  bool bitwise = true;
  for (std::size_t i = 0; i < a.size(); ++i) bitwise = bitwise && agg[i] == 0.75 * a[i] + 0.25 * b[i];

  return {ce_err < 1e-9 && u_err < 1e-9 && kl_err < 1e-9 && bitwise,
          fmt::format("|CE-lnC|={:.1e} |U-lnC/C|={:.1e} |KL-ln2|={:.1e} aggregate bitwise={}", ce_err, u_err, kl_err,
                      bitwise)};
}

Outcome gradient_checks() {
  const int trials = 25;
  double ce_worst = 0.0, nd_worst = 0.0;
  std::size_t params = 0;
  for (int t = 0; t < trials; ++t) {
    std::mt19937_64 rng(100 + static_cast<std::uint64_t>(t));
    const auto m = random_model({6, 12, 10, 5}, 200 + static_cast<std::uint64_t>(t));
    params = m.parameter_count();
    const nn::Matrix x = gaussian(8, 6, rng);
    std::vector<int> y(8);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>((i + static_cast<std::size_t>(t)) % 5);

    const auto ce = nn::cross_entropy_loss_and_grad(m, x, y).grad.flatten();
    const auto ce_fd =
        nn::finite_difference_gradient(m, [&](const nn::ModelParams& s) { return nn::cross_entropy_loss_and_grad(s, x, y).loss; });
    ce_worst = std::max(ce_worst, nn::max_relative_error(ce, ce_fd));

    const data::PublicDataset pub{x};
    const std::vector<nn::Matrix> targets{server::negative_distillation_target(random_model({6, 12, 10, 5}, 300 + t), pub),
                                          server::negative_distillation_target(random_model({6, 12, 10, 5}, 400 + t), pub)};
    const auto nd = server::negative_distillation_loss_and_grad(m, targets, pub).grad.flatten();
    const auto nd_fd = nn::finite_difference_gradient(
        m, [&](const nn::ModelParams& s) { return server::negative_distillation_loss_and_grad(s, targets, pub).loss; });
    nd_worst = std::max(nd_worst, nn::max_relative_error(nd, nd_fd));
  }
  return {ce_worst < 1e-4 && nd_worst < 1e-4 && params <= 1000,
          fmt::format("{} trials on {} params, worst relative error CE {:.2e} L_nd {:.2e}", trials, params, ce_worst,
                      nd_worst)};
}

std::vector<double> sweep_accuracy(const ExperimentConfig& exp, int target, const std::vector<double>& grid) {
  std::vector<double> acc;
  for (const auto& r : preset_weight_sweep(exp, target, grid)) acc.push_back(r.accuracy);
  return acc;
}

std::string points(const std::vector<double>& v) {
  std::string s;
  for (double a : v) s += fmt::format("{}{:.2f}", s.empty() ? "" : " ", 100.0 * a);
  return s;
}

Outcome weight_sweep_shape() {
  const auto cfg = desk("weight_sweep");
  const auto& exp = cfg.experiment;
  const auto ratios = client_noise_ratios(exp);
  int noisy = -1, clean = -1;
  for (int k : cfg.sweep_clients) {
    if (noisy < 0 && ratios[static_cast<std::size_t>(k)] > kExtremeNoiseRatio) noisy = k;
    if (clean < 0 && ratios[static_cast<std::size_t>(k)] == 0.0) clean = k;
  }
  for (int k = 0; k < exp.clients; ++k) {
    if (noisy < 0 && ratios[static_cast<std::size_t>(k)] > kExtremeNoiseRatio) noisy = k;
    if (clean < 0 && ratios[static_cast<std::size_t>(k)] == 0.0) clean = k;
  }
  if (noisy < 0 || clean < 0) return {false, "config needs one 0.99-noise client and one clean client"};
  const auto grid = default_weight_grid(exp.clients);
  const auto n = sweep_accuracy(exp, noisy, grid);
  const auto c = sweep_accuracy(exp, clean, grid);

  bool max_at_zero = true;
  for (std::size_t i = 1; i < n.size(); ++i) max_at_zero = max_at_zero && n[i] <= n[0];
  int inversions = 0;
  bool small = true;
  for (std::size_t i = 1; i < n.size(); ++i)
    if (n[i] > n[i - 1]) {
      ++inversions;
      small = small && n[i] - n[i - 1] <= 0.01;
    }
  const bool monotone = inversions == 0 || (inversions == 1 && small);
  double tv = 0.0;
  for (std::size_t i = 1; i < c.size(); ++i) tv += std::abs(c[i] - c[i - 1]);

  return {max_at_zero && monotone && tv < 0.05,
          fmt::format("noisy client {}: [{}] argmax at 0={} inversions={}; clean client {}: [{}] TV={:.2f} points "
                      "({} seeds)",
                      noisy, points(n), max_at_zero, inversions, clean, points(c), 100.0 * tv, exp.repeats)};
}

Outcome identification_quality() {
  const auto cfg = desk("identification");
  const auto& exp = cfg.experiment;
  const auto reports = run_experiment(exp);
  const auto s = detection_stats(reports, exp.warmup_rounds + 1, exp.rounds);
  const double sep = s.rounds_with_both == 0 ? 0.0 : static_cast<double>(s.separated_rounds) / s.rounds_with_both;
  return {s.precision() >= 0.95 && s.recall() >= 0.95 && sep >= 0.8,
          fmt::format("rounds {}-{}: precision {:.3f} recall {:.3f} (TP {} FP {} FN {}), separated {}/{} rounds",
                      exp.warmup_rounds + 1, exp.rounds, s.precision(), s.recall(), s.true_positive, s.false_positive,
                      s.false_negative, s.separated_rounds, s.rounds_with_both)};
}

Outcome ablation_ordering() {
  const auto cfg = desk("ablation");
  const auto rows = preset_ablation(cfg.experiment);
  auto acc = [&](AblationSwitches sw) {
    for (const auto& r : rows)
      if (r.switches == sw) return r.accuracy;
    throw std::runtime_error("ablation row missing");
  };
  const double fedavg = acc({false, false, false}), id = acc({true, false, false}), nd = acc({true, true, false}),
               lpl = acc({true, false, true}), all = acc({true, true, true});
  const bool ok = id - fedavg >= 0.01 && id <= nd && id <= all;
  return {ok, fmt::format("FedAvg {:.2f} < Id {:.2f} (gap {:.2f}); Id+ND {:.2f}; Id+LPL {:.2f}; all-on {:.2f} "
                          "({} seeds)",
                          100 * fedavg, 100 * id, 100 * (id - fedavg), 100 * nd, 100 * lpl, 100 * all,
                          cfg.experiment.repeats)};
}

Outcome en_count_robustness() {
  const auto cfg = desk("en_count");
  const auto rows = preset_en_count_sweep(cfg.experiment, cfg.en_counts);
  const double ned_drop = rows.front().fedned_accuracy - rows.back().fedned_accuracy;
  const double avg_drop = rows.front().fedavg_accuracy - rows.back().fedavg_accuracy;
  std::string table;
  for (const auto& r : rows)
    table += fmt::format("{}{}:{:.2f}/{:.2f}", table.empty() ? "" : " ", r.count, 100 * r.fedned_accuracy, 100 * r.fedavg_accuracy);
  return {avg_drop > 0.0 && ned_drop <= 0.5 * avg_drop,
          fmt::format("count:FedNed/FedAvg [{}]; drop FedNed {:.2f} vs FedAvg {:.2f} points ({} seeds)", table,
                      100 * ned_drop, 100 * avg_drop, cfg.experiment.repeats)};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "fedned_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> compared;
  bool same = true;
  auto twice = [&](const std::string& label, const std::function<int(const fs::path&, unsigned)>& run,
                   const std::vector<std::string>& files) {
    run(root / (label + "_1"), 1);
    run(root / (label + "_4"), 4);
    for (const auto& f : files) {
      const auto a = slurp(root / (label + "_1") / f), b = slurp(root / (label + "_4") / f);
      same = same && !a.empty() && a == b;
      compared.push_back(label + "/" + f);
    }
  };
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  try {
    auto ident = desk("identification");
    ident.experiment.rounds = 20;
    twice("run", [&](const fs::path& d, unsigned th) { return cli::cmd_run(ident, d, {th}); },
          {"metrics.csv", "uncertainty.csv"});
    auto abl = desk("ablation");
    abl.experiment.rounds = 15;
    abl.experiment.repeats = 1;
    twice("ablation", [&](const fs::path& d, unsigned th) { return cli::cmd_preset("ablation", abl, d, {th}); },
          {"ablation.csv"});
  } catch (...) {
    std::cout.rdbuf(old);
    throw;
  }
  std::cout.rdbuf(old);
  fs::remove_all(root);
  std::string list;
  for (const auto& c : compared) list += (list.empty() ? "" : ", ") + c;
  return {same, fmt::format("threads 1 vs 4, byte-identical: {} [{}]", same, list)};
}

Outcome reductions() {
  auto c = desk("identification").experiment;
  c.rounds = 12;
  c.warmup_rounds = 4;

  // identification off vs a hand-rolled FedAvg loop
  auto off = c;
  off.ablation = {false, false, false};
  off.strategy = server::AggregationStrategy::fedavg_all();
  const auto result = run_experiment_detailed(off);
  World world = build_world(off);
  nn::ModelParams global = initial_global_model(world, off);
  for (int t = 1; t <= off.rounds; ++t) {
    std::vector<nn::ModelParams> models;
    std::vector<double> w;
    double total = 0.0;
    for (int k : sample_clients(off, t)) {
      const auto& cl = world.clients[static_cast<std::size_t>(k)];
      models.push_back(client::train_supervised(
          cl, global, derive_seed(derive_seed(off.seed, {static_cast<std::uint64_t>(t), stream::kClient, static_cast<std::uint64_t>(k)}), {0})));
      w.push_back(static_cast<double>(cl.local_data.size()));
      total += w.back();
    }
    for (double& x : w) x /= total;
    global = nn::linear_combination(models, w);
  }
  const bool fedavg = result.final_model == global;

  // no teachers
  const auto s = random_model({16, 64, 64, 10}, 5);
  const std::vector<nn::ModelParams> none;
  const bool identity = server::negative_distill(s, none, world.public_set, 10, 0.05) == s;

  // warm-up rounds: the global model is the sample-weighted mean of the MN uploads. A threshold
  // near the entropy ceiling keeps the early MN pools non-empty.
  c.lambda = 0.21;
  World w2 = build_world(c);
  nn::ModelParams g = initial_global_model(w2, c);
  bool pure = true;
  int fallbacks = 0;
  for (int t = 1; t <= c.warmup_rounds; ++t) {
    std::vector<client::ClientUpload> ups;
    for (int k : sample_clients(c, t))
      ups.push_back(client::run_client_round(w2.clients[static_cast<std::size_t>(k)], g, false,
                                             derive_seed(c.seed, {static_cast<std::uint64_t>(t), stream::kClient, static_cast<std::uint64_t>(k)})));
    const auto out = run_round(w2, g, c, t);
    std::vector<nn::ModelParams> models;
    std::vector<double> w;
    double total = 0.0;
    for (const auto& u : ups) {
      const bool mn = std::find(out.report.mn_ids.begin(), out.report.mn_ids.end(), u.client_id) != out.report.mn_ids.end();
      if (!mn && !out.report.mn_ids.empty()) continue;
      models.push_back(u.supervised_model);
      w.push_back(static_cast<double>(u.sample_count));
      total += w.back();
    }
    fallbacks += out.report.mn_ids.empty() ? 1 : 0;
    for (double& x : w) x /= total;
    pure = pure && !out.report.distilled && out.report.pseudo_uploads.empty() &&
           out.global_model == nn::linear_combination(models, w);
    g = out.global_model;
  }
  return {fedavg && identity && pure,
          fmt::format("Id off == FedAvg bitwise: {}; ND with no teachers is identity: {}; warm-up aggregate pure over "
                      "{} rounds: {} ({} with an empty MN pool)",
                      fedavg, identity, c.warmup_rounds, pure, fallbacks)};
}

}  // namespace

// Optional arguments pick criteria by number; none runs all eight.
int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"equation oracles", equation_oracles},     {"gradient checks", gradient_checks},
      {"weight sweep shape", weight_sweep_shape}, {"identification quality", identification_quality},
      {"ablation ordering", ablation_ordering},   {"EN-count robustness", en_count_robustness},
      {"determinism", determinism},               {"reductions", reductions},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  if (selected.empty())
    for (int i = 1; i <= 8; ++i) selected.push_back(i);

  std::cout << "configs from " << config_dir().string() << "\n";
  for (int id : selected) {
    if (id < 1 || id > 8) {
      std::cerr << "no criterion " << id << "\n";
      return 2;
    }
    report(id, criteria[static_cast<std::size_t>(id) - 1].first, criteria[static_cast<std::size_t>(id) - 1].second);
  }
  std::cout << fmt::format("{} of {} criteria passed\n", selected.size() - static_cast<std::size_t>(failures), selected.size());
  return failures == 0 ? 0 : 1;
}
