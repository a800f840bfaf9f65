#include <doctest.h>

#include <clocale>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedned/cli.hpp"

using namespace fedned;
using namespace fedned::cli;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fedned_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int app(std::vector<std::string> args) {
  args.insert(args.begin(), "fedned");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_app(static_cast<int>(argv.size()), argv.data());
}

// Small enough to run in well under a second.
std::vector<std::string> tiny_overrides() {
  return {"--set", "clients=4",       "--set", "rounds=3",         "--set", "warmup_rounds=1",
          "--set", "mc_passes=3",     "--set", "local_epochs=1",   "--set", "hidden_layers=[8]",
          "--set", "data.classes=3",  "--set", "data.dim=3",       "--set", "data.per_class=30",
          "--set", "data.public_size=12", "--set", "distill_steps=1", "--set", "noise.fixed_ratios=[0.99,0,0,0]",
          "--set", "lambda=0.05",       "--set", "presets.en_counts=[1,2]"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("config round trip through JSON") {
  CliConfig c;
  c.experiment.seed = 42;
  c.experiment.lambda = 0.17;
  c.experiment.hidden_layers = {32, 16};
  c.experiment.noise.fixed_ratios = std::vector<double>(20, 0.0);
  c.experiment.data.public_source = orchestrator::PublicSource::in_domain;
  c.experiment.ablation = {true, false, true};
  c.weight_grid = {0.0, 0.5};
  const auto doc = to_json(c);
  const auto back = config_from_json(doc);
  CHECK(to_json(back) == doc);
  CHECK(back.experiment.seed == 42);
  CHECK(back.experiment.lambda == 0.17);
  CHECK(back.experiment.hidden_layers == std::vector<int>{32, 16});
  CHECK(back.experiment.noise.fixed_ratios->size() == 20);
  CHECK(back.weight_grid == std::vector<double>{0.0, 0.5});

  // a partial document takes defaults for everything else
  const auto partial = config_from_json(ordered_json::parse(R"({"rounds": 30, "data": {"dim": 8}})"));
  CHECK(partial.experiment.rounds == 30);
  CHECK(partial.experiment.data.dim == 8);
  CHECK(partial.experiment.clients == CliConfig{}.experiment.clients);
}

TEST_CASE("schema errors") {
  auto rejects = [](const char* text, const char* fragment) {
    try {
      config_from_json(ordered_json::parse(text));
      FAIL("accepted " << text);
    } catch (const SchemaError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
  };
  rejects(R"({"data": {"foo": 1}})", "data.foo");
  rejects(R"({"bogus": true})", "bogus");
  rejects(R"({"rounds": "many"})", "rounds");
  rejects(R"({"rounds": 2.5})", "rounds");
  rejects(R"({"lambda": [1]})", "lambda");
  rejects(R"({"ablation": {"identification": 1}})", "identification");
  rejects(R"({"strategy": {"kind": "median"}})", "strategy.kind");
  rejects(R"({"data": {"source": "csv"}})", "data.source");
  rejects(R"({"warmup_rounds": 60})", "warmup_rounds");
  rejects(R"({"presets": {"en_counts": [25]}})", "en_counts");
}

TEST_CASE("dotted overrides") {
  ordered_json doc = ordered_json::object();
  apply_override(doc, "data.separation=4.5");
  apply_override(doc, "hidden_layers=[32]");
  apply_override(doc, "strategy.kind=fedavg_all");
  apply_override(doc, "seed=9");
  CHECK(doc["data"]["separation"] == 4.5);
  CHECK(doc["strategy"]["kind"] == "fedavg_all");
  const auto c = config_from_json(doc);
  CHECK(c.experiment.data.separation == 4.5);
  CHECK(c.experiment.hidden_layers == std::vector<int>{32});
  CHECK(c.experiment.seed == 9);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), SchemaError);
  CHECK_THROWS_AS(apply_override(doc, "seed.x=1"), SchemaError);
  CHECK_THROWS_AS(apply_override(doc, "data..dim=1"), SchemaError);

  const auto dir = scratch_dir("load");
  std::ofstream(dir / "c.json") << R"({"rounds": 12, "seed": 3})";
  const auto loaded = load_config(dir / "c.json", {"rounds=14"}, 5);
  CHECK(loaded.experiment.rounds == 14);
  CHECK(loaded.experiment.seed == 5);
  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK_THROWS_AS(load_config(dir / "bad.json", {}), SchemaError);
  CHECK_THROWS_AS(load_config(dir / "missing.json", {}), SchemaError);
}

TEST_CASE("CSV formatting") {
  orchestrator::RoundReport r;
  r.round = 3;
  r.sampled_ids = {0, 1, 2};
  r.en_ids = {2};
  r.test_accuracy = 0.5;
  r.test_loss = 1.25;
  r.scores = {{0, 0.01, false, false}, {1, 0.03, false, false}, {2, 0.2, true, true}};
  r.pseudo_scores = {{2, 0.05}};
  r.promoted_ids = {2};
  CHECK(metrics_csv({r}) ==
        "round,test_acc,test_loss,n_sampled,n_en,mean_U_mn,mean_U_en,promoted_pseudo,degenerate\n"
        "3,0.500000,1.250000,3,1,0.02000000,0.20000000,1,0\n");
  CHECK(uncertainty_csv({r}) ==
        "round,client_id,model,uncertainty,flagged,truly_noisy\n"
        "3,0,supervised,0.01000000,0,0\n"
        "3,1,supervised,0.03000000,0,0\n"
        "3,2,supervised,0.20000000,1,1\n"
        "3,2,pseudo,0.05000000,0,1\n");

  r.scores.clear();
  r.degenerate = true;
  CHECK(metrics_csv({r}).find("\n3,0.500000,1.250000,3,1,,,1,1\n") != std::string::npos);

  orchestrator::AblationRow skipped;
  skipped.switches = {false, true, false};
  skipped.note = "needs \"Id\", sorry";
  orchestrator::AblationRow ran;
  ran.switches = {true, false, false};
  ran.per_repeat = {0.5, 0.7};
  ran.accuracy = 0.6;
  CHECK(ablation_csv({ran, skipped}) ==
        "identification,negative_distillation,local_pseudo_labeling,accuracy,note\n"
        "1,0,0,0.600000,\n"
        "0,1,0,,\"needs \"\"Id\"\", sorry\"\n");
  CHECK(sweep_csv({{0.05, 0.8125, {}}}) == "weight,accuracy\n0.050000,0.812500\n");
  CHECK(en_count_csv({{3, 0.9, 0.7}}) == "en_count,fedned_acc,fedavg_acc\n3,0.900000,0.700000\n");
}

TEST_CASE("CSV output ignores the process locale") {
  const char* names[] = {"de_DE.UTF-8", "fr_FR.UTF-8", "de_DE"};
  const char* applied = nullptr;
  for (const char* n : names)
    if ((applied = std::setlocale(LC_ALL, n))) break;
  if (!applied) return;
  try {
    std::locale::global(std::locale(applied));
  } catch (const std::runtime_error&) {
  }
  const auto text = sweep_csv({{0.5, 0.25, {}}});
  std::setlocale(LC_ALL, "C");
  std::locale::global(std::locale::classic());
  CHECK(text == "weight,accuracy\n0.500000,0.250000\n");
}

TEST_CASE("histogram of an uncertainty log") {
  const std::string log =
      "round,client_id,model,uncertainty,flagged,truly_noisy\n"
      "1,0,supervised,0.20000000,1,0\n"
      "2,0,supervised,0.01000000,0,0\n"
      "2,1,supervised,0.22000000,1,1\n"
      "2,1,pseudo,0.02000000,0,1\n"
      "3,0,supervised,0.03000000,0,0\n"
      "3,1,supervised,0.21000000,1,1\n";
  const auto s = summarize_uncertainty_log(log, 10, 20, 2);
  REQUIRE(s.bins.size() == 20);
  std::size_t mn = 0, en = 0;
  for (const auto& b : s.bins) {
    mn += b.mn_count;
    en += b.en_count;
  }
  CHECK(mn == 3);  // pseudo rows are not counted
  CHECK(en == 2);
  CHECK(s.bins.front().lo == 0.0);
  CHECK(s.bins.back().hi == doctest::Approx(std::log(10.0) / 10.0));
  REQUIRE(s.gap.has_value());
  CHECK(s.gap->first == doctest::Approx(0.03));
  CHECK(s.gap->second == doctest::Approx(0.21));
  // a later MN score above the lowest EN score closes the gap
  CHECK_FALSE(summarize_uncertainty_log(log + "4,0,supervised,0.21500000,1,0\n", 10, 20, 2).gap.has_value());
  CHECK_THROWS(summarize_uncertainty_log("a,b\n", 10, 20, 1));
  CHECK_THROWS(summarize_uncertainty_log(log, 10, 0, 1));
}

TEST_CASE("run writes reproducible artifacts") {
  const auto dir = scratch_dir("run");
  const auto args = concat({"run", "--seed", "4", "--out", (dir / "a").string()}, tiny_overrides());
  REQUIRE(app(args) == 0);
  for (const char* f : {"metrics.csv", "uncertainty.csv", "config.json", "manifest.json"})
    CHECK(fs::exists(dir / "a" / f));
  const auto manifest = ordered_json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(manifest["command"] == "run");
  CHECK(manifest["seed"] == 4);
  CHECK_FALSE(manifest["finished_utc"].is_null());
  CHECK(manifest["artifacts"].size() == 3);

  // rerunning from the written config reproduces the metrics byte for byte
  REQUIRE(app({"run", "--config", (dir / "a" / "config.json").string(), "--out", (dir / "b").string()}) == 0);
  CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
  CHECK(slurp(dir / "a" / "uncertainty.csv") == slurp(dir / "b" / "uncertainty.csv"));

  REQUIRE(app({"inspect-uncertainty", (dir / "a").string(), "--bins", "5"}) == 0);
  const auto hist = slurp(dir / "a" / "uncertainty_histogram.csv");
  CHECK(hist.rfind("bin_lo,bin_hi,mn_count,en_count\n", 0) == 0);
  CHECK(std::count(hist.begin(), hist.end(), '\n') == 6);
}

TEST_CASE("preset writes one CSV per sweep target") {
  const auto dir = scratch_dir("preset");
  REQUIRE(app(concat({"preset", "weight-sweep", "--out", dir.string(), "--set", "rounds=2"}, tiny_overrides())) == 0);
  CHECK(fs::exists(dir / "weight_sweep_client0.csv"));
  CHECK(fs::exists(dir / "weight_sweep_client1.csv"));
  const auto csv = slurp(dir / "weight_sweep_client0.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("exit codes") {
  const auto dir = scratch_dir("codes");
  CHECK(app({"run", "--out", dir.string(), "--set", "data.foo=1"}) == 2);
  CHECK(app({"run", "--out", dir.string(), "--set", "rounds=0"}) == 2);
  CHECK(app({"preset", "nonesuch", "--out", dir.string()}) == 2);
  CHECK(app({"frobnicate"}) == 2);
  CHECK(app({"run", "--config", (dir / "missing.json").string()}) == 2);
  CHECK(app({"inspect-uncertainty", (dir / "empty").string()}) == 1);
  CHECK(preset_names() == std::vector<std::string>{"weight-sweep", "ablation", "en-count"});
}
