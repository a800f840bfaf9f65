#include "fedned/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <string>

#include "fedned/errors.hpp"
#include "fedned/parallel.hpp"

namespace fedned::orchestrator {

namespace {

std::uint64_t round_key(int round) { return static_cast<std::uint64_t>(round); }

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

ExperimentConfig with_seed(const ExperimentConfig& base, int repeat) {
  ExperimentConfig cfg = base;
  cfg.seed = base.seed + static_cast<std::uint64_t>(repeat);
  return cfg;
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (clients < 2) fail("clients must be >= 2");
  if (rounds < 1) fail("rounds must be >= 1");
  if (warmup_rounds < 0 || warmup_rounds >= rounds) fail("warmup_rounds must satisfy 0 <= warmup_rounds < rounds");
  if (!(participation > 0.0 && participation <= 1.0)) fail("participation must lie in (0, 1]");
  if (!(lambda >= 0.0)) fail("lambda must be >= 0");
  if (mc_passes < 1) fail("mc_passes must be >= 1");
  if (local_epochs < 1) fail("local_epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(client_lr >= 0.0)) fail("client_lr must be >= 0");
  if (distill_steps < 0) fail("distill_steps must be >= 0");
  if (!(distill_lr >= 0.0)) fail("distill_lr must be >= 0");
  for (int h : hidden_layers)
    if (h < 1) fail("hidden_layers entries must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(dirichlet_alpha > 0.0)) fail("dirichlet_alpha must be > 0");
  if (min_samples_per_client < 1) fail("min_samples_per_client must be >= 1");
  if (!(noise.beta_a > 0.0 && noise.beta_b > 0.0)) fail("noise.beta_a and noise.beta_b must be > 0");
  if (noise.fixed_ratios) {
    if (static_cast<int>(noise.fixed_ratios->size()) != clients) fail("noise.fixed_ratios must have one entry per client");
    for (double r : *noise.fixed_ratios)
      if (!(r >= 0.0 && r <= 1.0)) fail("noise.fixed_ratios entries must lie in [0, 1]");
  }
  if (data.source == DataSource::blobs) {
    if (data.classes < 2) fail("data.classes must be >= 2");
    if (data.dim < 1) fail("data.dim must be >= 1");
    if (data.per_class < 1) fail("data.per_class must be >= 1");
  }
  if (data.source == DataSource::idx && (data.idx_images.empty() || data.idx_labels.empty()))
    fail("data.idx_images and data.idx_labels are required for source idx");
  if (data.source == DataSource::cache && data.cache_stem.empty()) fail("data.cache_stem is required for source cache");
  if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) fail("data.test_fraction must lie in (0, 1)");
  if (data.public_size < 1) fail("data.public_size must be >= 1");
  if (strategy.kind == server::AggregationStrategy::Kind::mn_only)
    fail("strategy mn_only is selected by the identification switch, not configured directly");
  if (strategy.kind == server::AggregationStrategy::Kind::fixed_weights) {
    if (static_cast<int>(strategy.weights.size()) != clients) fail("fixed_weights must have one entry per client");
    strategy.validate();
  }
  if (ablation.negative_distillation && !ablation.identification)
    fail("ablation: negative_distillation requires identification");
  if (ablation.local_pseudo_labeling && !ablation.identification)
    fail("ablation: local_pseudo_labeling requires identification");
  if (repeats < 1) fail("repeats must be >= 1");
  const int sampled = sampled_per_round();
  if (sampled < 1 || sampled > clients) fail("participation yields an invalid number of sampled clients");
}

int ExperimentConfig::sampled_per_round() const {
  return static_cast<int>(std::ceil(participation * static_cast<double>(clients) - 1e-9));
}

RuntimeOptions RuntimeOptions::from_environment() {
  RuntimeOptions opts;
  if (const char* env = std::getenv("FEDNED_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) opts.threads = static_cast<unsigned>(v);
  }
  return opts;
}

std::vector<double> client_noise_ratios(const ExperimentConfig& config) {
  return data::sample_noise_ratios(config.noise, config.clients, derive_seed(config.seed, {stream::kNoise}));
}

World build_world(const ExperimentConfig& config) {
  config.validate();
  const std::uint64_t seed = config.seed;

  data::LabeledDataset base;
  switch (config.data.source) {
    case DataSource::blobs:
      base = data::synthesize_blobs(config.data.classes, config.data.per_class, config.data.dim, config.data.separation,
                                    derive_seed(seed, {stream::kData}));
      break;
    case DataSource::idx:
      base = data::load_idx(config.data.idx_images, config.data.idx_labels);
      break;
    case DataSource::cache:
      base = data::read_cache(config.data.cache_stem);
      break;
  }

  const bool in_domain = config.data.public_source == PublicSource::in_domain || config.data.source != DataSource::blobs;
  data::WorldSplit split =
      data::split_world(base, in_domain ? config.data.public_size : 0, config.data.test_fraction, derive_seed(seed, {stream::kSplit}));

  World world;
  if (config.data.public_source == PublicSource::in_domain) {
    world.public_set = std::move(split.public_set);
  } else if (config.data.source == DataSource::blobs) {
    world.public_set = data::synthesize_shifted_public(base.class_count, config.data.public_size, base.dim(),
                                                       config.data.separation, config.data.public_shift,
                                                       derive_seed(seed, {stream::kData}), derive_seed(seed, {stream::kPublic}));
  } else {
    // No generative model for file sources: displace the held-out samples by one common offset.
    world.public_set = std::move(split.public_set);
    RandomStream rng = make_stream(derive_seed(seed, {stream::kPublic}));
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::RowVectorXd offset(base.dim());
    for (Eigen::Index j = 0; j < offset.size(); ++j) offset(j) = normal(rng);
    offset *= config.data.public_shift / offset.norm();
    world.public_set.features.rowwise() += offset;
  }

  std::vector<int> sizes{base.dim()};
  sizes.insert(sizes.end(), config.hidden_layers.begin(), config.hidden_layers.end());
  sizes.push_back(base.class_count);
  world.architecture = nn::Architecture::mlp(std::move(sizes), config.dropout);
  world.architecture.validate();

  const data::PartitionSpec partition{config.dirichlet_alpha, config.clients, config.min_samples_per_client};
  auto parts = data::partition_dirichlet(split.train, partition, derive_seed(seed, {stream::kPartition}));
  world.noise_ratios = client_noise_ratios(config);
  world.test = std::move(split.test);

  for (int k = 0; k < config.clients; ++k) {
    auto noisy = data::inject_label_noise(parts[static_cast<std::size_t>(k)], world.noise_ratios[static_cast<std::size_t>(k)],
                                          derive_seed(seed, {stream::kNoise, static_cast<std::uint64_t>(k)}));
    if (noisy.warning) world.warnings.push_back("client " + std::to_string(k) + ": " + *noisy.warning);
    client::ClientState state;
    state.client_id = k;
    state.local_data = std::move(noisy.data);
    state.local_epochs = config.local_epochs;
    state.batch_size = config.batch_size;
    state.lr = config.client_lr;
    world.clients.push_back(std::move(state));
  }
  return world;
}

nn::ModelParams initial_global_model(const World& world, const ExperimentConfig& config) {
  return nn::ModelParams::glorot_uniform(world.architecture, derive_seed(config.seed, {stream::kInit}));
}

std::vector<int> sample_clients(const ExperimentConfig& config, int round) {
  std::vector<int> ids(static_cast<std::size_t>(config.clients));
  std::iota(ids.begin(), ids.end(), 0);
  RandomStream rng = make_stream(derive_seed(config.seed, {round_key(round), stream::kSampling}));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(config.sampled_per_round()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

RoundOutcome run_round(World& world, const nn::ModelParams& global_model, const ExperimentConfig& config, int round,
                       const RuntimeOptions& runtime) {
  if (round < 1) throw ArgumentError("run_round: rounds are numbered from 1");
  const auto started = std::chrono::steady_clock::now();
  const bool past_warmup = round > config.warmup_rounds;
  const auto& switches = config.ablation;

  RoundReport report;
  report.round = round;
  report.sampled_ids = sample_clients(config, round);

  std::vector<client::ClientUpload> uploads(report.sampled_ids.size());
  parallel_for(uploads.size(), runtime.threads, [&](std::size_t i) {
    const int k = report.sampled_ids[i];
    uploads[i] = client::run_client_round(world.clients[static_cast<std::size_t>(k)], global_model, past_warmup,
                                          derive_seed(config.seed, {round_key(round), stream::kClient, static_cast<std::uint64_t>(k)}));
  });
  for (const auto& u : uploads)
    if (u.pseudo_model) report.pseudo_uploads.push_back(u.client_id);

  RoundOutcome out;
  if (switches.identification) {
    std::vector<server::IdentifiedModel> scored;
    scored.reserve(uploads.size());
    for (const auto& u : uploads) scored.push_back({u.client_id, &u.supervised_model});
    const server::UncertaintyReport ident =
        server::identify(scored, world.public_set, config.lambda, config.mc_passes,
                         derive_seed(config.seed, {round_key(round), stream::kUncertainty}), runtime.threads);
    report.mn_ids = ident.mn_ids;
    report.en_ids = ident.en_ids;
    for (const auto& e : ident.entries)
      report.scores.push_back({e.model_id, e.uncertainty, ident.is_en(e.model_id), world.truly_noisy(e.model_id)});

    const server::AggregationContext ctx{&global_model, &world.public_set, config.mc_passes,
                                         derive_seed(config.seed, {round_key(round), stream::kPseudo})};
    server::AggregationResult agg = server::aggregate(uploads, ident, server::AggregationStrategy::mn_only(), ctx);
    report.promoted_ids = agg.promoted_ids;
    report.pseudo_scores = agg.pseudo_scores;
    report.degenerate = agg.degenerate;
    if (agg.degenerate && !past_warmup) {
      // Early models from a random start all score near the entropy ceiling; keeping the
      // initial weights would stall the loop, so warm-up falls back to plain FedAvg.
      agg = server::aggregate(uploads, ident, server::AggregationStrategy::fedavg_all());
    }
    out.aggregate = agg.model;

    std::vector<nn::ModelParams> teachers;
    if (past_warmup && switches.negative_distillation && !agg.degenerate) {
      for (const auto& u : uploads)
        if (ident.is_en(u.client_id)) teachers.push_back(u.supervised_model);
    }
    if (!teachers.empty() && config.distill_steps > 0) {
      out.global_model = server::negative_distill(agg.model, teachers, world.public_set, config.distill_steps, config.distill_lr);
      report.distilled = true;
    } else {
      out.global_model = std::move(agg.model);
    }
    for (int k : report.sampled_ids)
      world.clients[static_cast<std::size_t>(k)].flagged_en = switches.local_pseudo_labeling && ident.is_en(k);
  } else {
    server::AggregationResult agg = server::aggregate(uploads, server::UncertaintyReport{}, config.strategy);
    out.aggregate = agg.model;
    out.global_model = std::move(agg.model);
    for (int k : report.sampled_ids) world.clients[static_cast<std::size_t>(k)].flagged_en = false;
  }

  const server::Evaluation eval = server::evaluate(out.global_model, world.test);
  report.test_accuracy = eval.accuracy;
  report.test_loss = eval.mean_loss;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  out.report = std::move(report);
  return out;
}

ExperimentResult run_experiment_detailed(const ExperimentConfig& config, const RuntimeOptions& runtime) {
  World world = build_world(config);
  ExperimentResult result;
  result.final_model = initial_global_model(world, config);
  result.reports.reserve(static_cast<std::size_t>(config.rounds));
  for (int t = 1; t <= config.rounds; ++t) {
    RoundOutcome outcome = run_round(world, result.final_model, config, t, runtime);
    result.final_model = std::move(outcome.global_model);
    result.reports.push_back(std::move(outcome.report));
  }
  return result;
}

std::vector<RoundReport> run_experiment(const ExperimentConfig& config, const RuntimeOptions& runtime) {
  return run_experiment_detailed(config, runtime).reports;
}

double final_accuracy(const std::vector<RoundReport>& reports) {
  std::vector<double> acc;
  acc.reserve(reports.size());
  for (const auto& r : reports) acc.push_back(r.test_accuracy);
  std::sort(acc.begin(), acc.end(), std::greater<>());
  if (acc.size() > 10) acc.resize(10);
  return mean(acc);
}

std::vector<double> default_weight_grid(int clients) {
  const double k = static_cast<double>(clients);
  return {0.0, 1.0 / (2.0 * k), 1.0 / k, 2.0 / k, 4.0 / k};
}

std::vector<SweepRow> preset_weight_sweep(const ExperimentConfig& config, int target_client,
                                          const std::vector<double>& weight_grid, const RuntimeOptions& runtime) {
  if (target_client < 0 || target_client >= config.clients) throw ConfigError("weight sweep: target client out of range");
  std::vector<SweepRow> rows;
  for (double w : weight_grid) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("weight sweep: grid weights must lie in [0, 1]");
    std::vector<double> weights(static_cast<std::size_t>(config.clients), (1.0 - w) / static_cast<double>(config.clients - 1));
    weights[static_cast<std::size_t>(target_client)] = w;
    ExperimentConfig cfg = config;
    cfg.participation = 1.0;
    cfg.ablation = {false, false, false};
    cfg.strategy = server::AggregationStrategy{server::AggregationStrategy::Kind::fixed_weights, weights};
    // (1-w)/(K-1) summed K-1 times may drift by an ulp; renormalise so validation holds.
    const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-12) {
      for (double& x : cfg.strategy.weights) x /= sum;
    }
    std::vector<double> acc;
    for (int r = 0; r < config.repeats; ++r) acc.push_back(final_accuracy(run_experiment(with_seed(cfg, r), runtime)));
    rows.push_back({w, mean(acc), cfg.strategy.weights});
  }
  return rows;
}

std::vector<AblationSwitches> ablation_grid() {
  return {{false, false, false}, {true, false, false}, {true, true, false}, {true, false, true}, {true, true, true}};
}

std::vector<AblationRow> preset_ablation(const ExperimentConfig& base, const RuntimeOptions& runtime) {
  std::vector<AblationRow> rows;
  for (const auto& sw : ablation_grid()) {
    AblationRow row;
    row.switches = sw;
    if ((sw.negative_distillation || sw.local_pseudo_labeling) && !sw.identification) {
      row.note = "skipped: ND and LPL require identification";
      rows.push_back(row);
      continue;
    }
    ExperimentConfig cfg = base;
    cfg.ablation = sw;
    if (!sw.identification) cfg.strategy = server::AggregationStrategy::fedavg_all();
    for (int r = 0; r < base.repeats; ++r) row.per_repeat.push_back(final_accuracy(run_experiment(with_seed(cfg, r), runtime)));
    row.accuracy = mean(row.per_repeat);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<double> fixed_noise_profile(int clients, int noisy, double ratio) {
  std::vector<double> ratios(static_cast<std::size_t>(clients), 0.0);
  for (int k = 0; k < noisy && k < clients; ++k) ratios[static_cast<std::size_t>(k)] = ratio;
  return ratios;
}

std::vector<EnCountRow> preset_en_count_sweep(const ExperimentConfig& base, const std::vector<int>& counts,
                                              const RuntimeOptions& runtime) {
  std::vector<EnCountRow> rows;
  for (int count : counts) {
    if (count < 0 || count >= base.clients) throw ConfigError("en-count sweep: counts must lie in [0, clients)");
    ExperimentConfig cfg = base;
    cfg.noise.fixed_ratios = fixed_noise_profile(base.clients, count);
    ExperimentConfig fedned = cfg;
    fedned.ablation = {true, true, true};
    ExperimentConfig fedavg = cfg;
    fedavg.ablation = {false, false, false};
    fedavg.strategy = server::AggregationStrategy::fedavg_all();
    std::vector<double> ned, avg;
    for (int r = 0; r < base.repeats; ++r) {
      ned.push_back(final_accuracy(run_experiment(with_seed(fedned, r), runtime)));
      avg.push_back(final_accuracy(run_experiment(with_seed(fedavg, r), runtime)));
    }
    rows.push_back({count, mean(ned), mean(avg)});
  }
  return rows;
}

double DetectionStats::precision() const {
  const auto flagged = true_positive + false_positive;
  return flagged == 0 ? 1.0 : static_cast<double>(true_positive) / static_cast<double>(flagged);
}

double DetectionStats::recall() const {
  const auto actual = true_positive + false_negative;
  return actual == 0 ? 1.0 : static_cast<double>(true_positive) / static_cast<double>(actual);
}

DetectionStats detection_stats(const std::vector<RoundReport>& reports, int first_round, int last_round) {
  DetectionStats stats;
  for (const auto& r : reports) {
    if (r.round < first_round || r.round > last_round) continue;
    double max_clean = -1.0, min_noisy = 2.0;
    bool has_clean = false, has_noisy = false;
    for (const auto& s : r.scores) {
      if (s.truly_noisy) {
        has_noisy = true;
        min_noisy = std::min(min_noisy, s.uncertainty);
        (s.identified_en ? stats.true_positive : stats.false_negative)++;
      } else {
        has_clean = true;
        max_clean = std::max(max_clean, s.uncertainty);
        (s.identified_en ? stats.false_positive : stats.true_negative)++;
      }
    }
    if (has_clean && has_noisy) {
      ++stats.rounds_with_both;
      if (min_noisy > max_clean) ++stats.separated_rounds;
    }
  }
  return stats;
}

}  // namespace fedned::orchestrator
