#include <fstream>
#include <limits>
#include <sstream>

#include "fedned/cli.hpp"
#include "fedned/errors.hpp"

namespace fedned::cli {

using nlohmann::ordered_json;
using orchestrator::DataSource;
using orchestrator::PublicSource;
using Kind = server::AggregationStrategy::Kind;

namespace {

std::string source_name(DataSource s) {
  switch (s) {
    case DataSource::blobs: return "blobs";
    case DataSource::idx: return "idx";
    case DataSource::cache: return "cache";
  }
  return "blobs";
}

std::string public_name(PublicSource s) { return s == PublicSource::shifted ? "shifted" : "in_domain"; }

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

// Every key in `doc` must appear in `schema`; objects recurse. Value types are checked on read.
void check_keys(const ordered_json& doc, const ordered_json& schema, const std::string& prefix) {
  if (!doc.is_object()) throw SchemaError("config: '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = join(prefix, it.key());
    if (!schema.contains(it.key())) throw SchemaError("config: unknown key '" + path + "'");
    const auto& expected = schema.at(it.key());
    if (expected.is_object()) check_keys(it.value(), expected, path);
  }
}

class Reader {
 public:
  explicit Reader(const ordered_json& doc) : doc_(doc) {}

  const ordered_json* find(const std::string& path) const {
    const ordered_json* node = &doc_;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(key)) return nullptr;
      node = &node->at(key);
      if (dot == std::string::npos) return node;
      start = dot + 1;
    }
  }

  void read(const std::string& path, int& out) const {
    if (const auto* v = find(path)) {
      if (!v->is_number_integer()) throw SchemaError("config: '" + path + "' must be an integer");
      const auto x = v->get<long long>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        throw SchemaError("config: '" + path + "' is out of range");
      out = static_cast<int>(x);
    }
  }
  void read(const std::string& path, std::uint64_t& out) const {
    if (const auto* v = find(path)) {
      if (!v->is_number_unsigned()) throw SchemaError("config: '" + path + "' must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& path, double& out) const {
    if (const auto* v = find(path)) {
      if (!v->is_number()) throw SchemaError("config: '" + path + "' must be a number");
      out = v->get<double>();
    }
  }
  void read(const std::string& path, bool& out) const {
    if (const auto* v = find(path)) {
      if (!v->is_boolean()) throw SchemaError("config: '" + path + "' must be true or false");
      out = v->get<bool>();
    }
  }
  void read(const std::string& path, std::string& out) const {
    if (const auto* v = find(path)) {
      if (!v->is_string()) throw SchemaError("config: '" + path + "' must be a string");
      out = v->get<std::string>();
    }
  }
  template <class T>
  void read(const std::string& path, std::vector<T>& out) const {
    if (const auto* v = find(path)) {
      if (!v->is_array()) throw SchemaError("config: '" + path + "' must be an array");
      std::vector<T> items;
      for (std::size_t i = 0; i < v->size(); ++i) {
        const auto& e = (*v)[i];
        const std::string where = path + "[" + std::to_string(i) + "]";
        if constexpr (std::is_same_v<T, int>) {
          if (!e.is_number_integer()) throw SchemaError("config: '" + where + "' must be an integer");
        } else {
          if (!e.is_number()) throw SchemaError("config: '" + where + "' must be a number");
        }
        items.push_back(e.get<T>());
      }
      out = std::move(items);
    }
  }
  void read(const std::string& path, std::optional<std::vector<double>>& out) const {
    if (const auto* v = find(path)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      std::vector<double> items;
      read(path, items);
      out = std::move(items);
    }
  }

 private:
  const ordered_json& doc_;
};

}  // namespace

ordered_json to_json(const CliConfig& config) {
  const auto& c = config.experiment;
  ordered_json j;
  j["seed"] = c.seed;
  j["clients"] = c.clients;
  j["rounds"] = c.rounds;
  j["warmup_rounds"] = c.warmup_rounds;
  j["participation"] = c.participation;
  j["lambda"] = c.lambda;
  j["mc_passes"] = c.mc_passes;
  j["local_epochs"] = c.local_epochs;
  j["batch_size"] = c.batch_size;
  j["client_lr"] = c.client_lr;
  j["distill_steps"] = c.distill_steps;
  j["distill_lr"] = c.distill_lr;
  j["hidden_layers"] = c.hidden_layers;
  j["dropout"] = c.dropout;
  j["dirichlet_alpha"] = c.dirichlet_alpha;
  j["min_samples_per_client"] = c.min_samples_per_client;
  j["repeats"] = c.repeats;

  auto& d = j["data"];
  d["source"] = source_name(c.data.source);
  d["classes"] = c.data.classes;
  d["dim"] = c.data.dim;
  d["per_class"] = c.data.per_class;
  d["separation"] = c.data.separation;
  d["test_fraction"] = c.data.test_fraction;
  d["public_size"] = c.data.public_size;
  d["public_source"] = public_name(c.data.public_source);
  d["public_shift"] = c.data.public_shift;
  d["idx_images"] = c.data.idx_images;
  d["idx_labels"] = c.data.idx_labels;
  d["cache_stem"] = c.data.cache_stem;

  auto& n = j["noise"];
  n["beta_a"] = c.noise.beta_a;
  n["beta_b"] = c.noise.beta_b;
  n["fixed_ratios"] = c.noise.fixed_ratios ? ordered_json(*c.noise.fixed_ratios) : ordered_json(nullptr);

  auto& s = j["strategy"];
  s["kind"] = server::to_string(c.strategy.kind);
  s["weights"] = c.strategy.weights;

  auto& a = j["ablation"];
  a["identification"] = c.ablation.identification;
  a["negative_distillation"] = c.ablation.negative_distillation;
  a["local_pseudo_labeling"] = c.ablation.local_pseudo_labeling;

  auto& p = j["presets"];
  p["sweep_clients"] = config.sweep_clients;
  p["weight_grid"] = config.weight_grid;
  p["en_counts"] = config.en_counts;
  return j;
}

CliConfig config_from_json(const ordered_json& doc) {
  check_keys(doc, to_json(CliConfig{}), "");
  const Reader r(doc);
  CliConfig out;
  auto& c = out.experiment;
  r.read("seed", c.seed);
  r.read("clients", c.clients);
  r.read("rounds", c.rounds);
  r.read("warmup_rounds", c.warmup_rounds);
  r.read("participation", c.participation);
  r.read("lambda", c.lambda);
  r.read("mc_passes", c.mc_passes);
  r.read("local_epochs", c.local_epochs);
  r.read("batch_size", c.batch_size);
  r.read("client_lr", c.client_lr);
  r.read("distill_steps", c.distill_steps);
  r.read("distill_lr", c.distill_lr);
  r.read("hidden_layers", c.hidden_layers);
  r.read("dropout", c.dropout);
  r.read("dirichlet_alpha", c.dirichlet_alpha);
  r.read("min_samples_per_client", c.min_samples_per_client);
  r.read("repeats", c.repeats);

  std::string source = source_name(c.data.source);
  r.read("data.source", source);
  if (source == "blobs") c.data.source = DataSource::blobs;
  else if (source == "idx") c.data.source = DataSource::idx;
  else if (source == "cache") c.data.source = DataSource::cache;
  else throw SchemaError("config: 'data.source' must be one of blobs, idx, cache");
  r.read("data.classes", c.data.classes);
  r.read("data.dim", c.data.dim);
  r.read("data.per_class", c.data.per_class);
  r.read("data.separation", c.data.separation);
  r.read("data.test_fraction", c.data.test_fraction);
  r.read("data.public_size", c.data.public_size);
  std::string pub = public_name(c.data.public_source);
  r.read("data.public_source", pub);
  if (pub == "shifted") c.data.public_source = PublicSource::shifted;
  else if (pub == "in_domain") c.data.public_source = PublicSource::in_domain;
  else throw SchemaError("config: 'data.public_source' must be shifted or in_domain");
  r.read("data.public_shift", c.data.public_shift);
  r.read("data.idx_images", c.data.idx_images);
  r.read("data.idx_labels", c.data.idx_labels);
  r.read("data.cache_stem", c.data.cache_stem);

  r.read("noise.beta_a", c.noise.beta_a);
  r.read("noise.beta_b", c.noise.beta_b);
  r.read("noise.fixed_ratios", c.noise.fixed_ratios);

  std::string kind = server::to_string(c.strategy.kind);
  r.read("strategy.kind", kind);
  if (kind == "fedavg_all") c.strategy.kind = Kind::fedavg_all;
  else if (kind == "fixed_weights") c.strategy.kind = Kind::fixed_weights;
  else if (kind == "mn_only") throw SchemaError("config: 'strategy.kind' mn_only is implied by ablation.identification");
  else throw SchemaError("config: 'strategy.kind' must be fedavg_all or fixed_weights");
  r.read("strategy.weights", c.strategy.weights);

  r.read("ablation.identification", c.ablation.identification);
  r.read("ablation.negative_distillation", c.ablation.negative_distillation);
  r.read("ablation.local_pseudo_labeling", c.ablation.local_pseudo_labeling);

  r.read("presets.sweep_clients", out.sweep_clients);
  r.read("presets.weight_grid", out.weight_grid);
  r.read("presets.en_counts", out.en_counts);

  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  for (int k : out.sweep_clients)
    if (k < 0 || k >= c.clients) throw SchemaError("config: 'presets.sweep_clients' entries must lie in [0, clients)");
  for (double w : out.weight_grid)
    if (!(w >= 0.0 && w <= 1.0)) throw SchemaError("config: 'presets.weight_grid' entries must lie in [0, 1]");
  for (int n : out.en_counts)
    if (n < 0 || n >= c.clients) throw SchemaError("config: 'presets.en_counts' entries must lie in [0, clients)");
  return out;
}

void apply_override(ordered_json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw SchemaError("--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  ordered_json value;
  try {
    value = ordered_json::parse(text);
  } catch (const ordered_json::parse_error&) {
    value = text;
  }

  ordered_json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw SchemaError("--set: malformed key '" + path + "'");
    if (!node->is_object()) throw SchemaError("--set: '" + path.substr(0, start ? start - 1 : 0) + "' is not an object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = ordered_json::object();
    start = dot + 1;
  }
}

CliConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed) {
  ordered_json doc = ordered_json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw SchemaError("config: cannot read " + path->string());
    std::stringstream buf;
    buf << in.rdbuf();
    try {
      doc = ordered_json::parse(buf.str());
    } catch (const ordered_json::parse_error& e) {
      throw SchemaError("config: " + path->string() + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  return config_from_json(doc);
}

}  // namespace fedned::cli
