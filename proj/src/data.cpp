#include "fedned/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include <json.hpp>

#include "fedned/errors.hpp"

namespace fedned::data {

namespace {

double sample_log_gamma(double shape, RandomStream& rng) {
  // Gamma(a) = Gamma(a + 1) * U^(1/a) keeps tiny shapes representable in log space.
  if (shape >= 1.0) {
    std::gamma_distribution<double> g(shape, 1.0);
    return std::log(g(rng));
  }
  std::gamma_distribution<double> g(shape + 1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  while (u <= 0.0) u = unit(rng);
  return std::log(g(rng)) + std::log(u) / shape;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw FormatError(path.string() + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

template <typename T>
void put_le(std::ofstream& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::uint64_t bits = 0;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<std::uint8_t>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= std::uint64_t{bytes[offset + i]} << (8 * i);
  T value;
  std::memcpy(&value, &bits, sizeof(T));
  return value;
}

}  // namespace

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.class_count = class_count;
  out.features.resize(static_cast<Eigen::Index>(indices.size()), features.cols());
  out.labels.reserve(indices.size());
  out.true_labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = static_cast<Eigen::Index>(indices[i]);
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(src);
    out.labels.push_back(labels[indices[i]]);
    out.true_labels.push_back(true_labels[indices[i]]);
  }
  return out;
}

std::vector<int> LabeledDataset::present_classes() const {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

std::size_t LabeledDataset::corrupted_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) n += labels[i] != true_labels[i] ? 1 : 0;
  return n;
}

void LabeledDataset::validate() const {
  if (labels.size() != true_labels.size() || static_cast<Eigen::Index>(labels.size()) != features.rows())
    throw ConfigError("dataset: features, labels and true_labels differ in length");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= class_count || true_labels[i] < 0 || true_labels[i] >= class_count)
      throw ConfigError("dataset: label outside [0, class_count)");
}

nn::Matrix blob_means(int classes, int dim, double separation, std::uint64_t seed) {
  nn::Matrix means = nn::Matrix::Zero(classes, dim);
  if (classes <= dim) {
    const double scale = separation / std::sqrt(2.0);
    for (int c = 0; c < classes; ++c) means(c, c) = scale;
    return means;
  }
  RandomStream rng = make_stream(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Radius grows until rejection sampling finds a valid layout.
  double radius = separation;
  for (int attempt = 0;; ++attempt) {
    bool ok = true;
    for (int c = 0; c < classes && ok; ++c) {
      for (int tries = 0; tries < 1000; ++tries) {
        for (int j = 0; j < dim; ++j) means(c, j) = normal(rng);
        means.row(c) *= radius / means.row(c).norm();
        bool far = true;
        for (int o = 0; o < c && far; ++o) far = (means.row(c) - means.row(o)).norm() >= separation;
        if (far) break;
        if (tries == 999) ok = false;
      }
    }
    if (ok) return means;
    radius *= 1.25;
    (void)attempt;
  }
}

LabeledDataset synthesize_blobs(int classes, int per_class, int dim, double separation, std::uint64_t seed) {
  if (classes < 2 || per_class < 1 || dim < 1) throw ConfigError("synthesize_blobs: need classes >= 2, per_class >= 1");
  const nn::Matrix means = blob_means(classes, dim, separation, derive_seed(seed, {stream::kData}));
  RandomStream rng = make_stream(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset out;
  out.class_count = classes;
  out.features.resize(static_cast<Eigen::Index>(classes) * per_class, dim);
  Eigen::Index row = 0;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i, ++row) {
      for (int j = 0; j < dim; ++j) out.features(row, j) = means(c, j) + normal(rng);
      out.labels.push_back(c);
      out.true_labels.push_back(c);
    }
  }
  return out;
}

PublicDataset synthesize_shifted_public(int classes, int count, int dim, double separation, double shift,
                                        std::uint64_t base_seed, std::uint64_t seed) {
  if (count < 1) throw ConfigError("public set needs at least one sample");
  nn::Matrix means = blob_means(classes, dim, separation, derive_seed(base_seed, {stream::kData}));
  RandomStream rng = make_stream(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int c = 0; c < classes; ++c) {
    Eigen::RowVectorXd offset(dim);
    for (int j = 0; j < dim; ++j) offset(j) = normal(rng);
    means.row(c) += shift * offset / offset.norm();
  }
  std::uniform_int_distribution<int> pick(0, classes - 1);
  PublicDataset out;
  out.features.resize(count, dim);
  for (int i = 0; i < count; ++i) {
    const int c = pick(rng);
    for (int j = 0; j < dim; ++j) out.features(i, j) = means(c, j) + normal(rng);
  }
  return out;
}

LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  if (images.empty()) throw FormatError(images_path.string() + ": empty file");
  if (labels.empty()) throw FormatError(labels_path.string() + ": empty file");
  if (read_be32(images, 0, images_path) != 0x00000803u)
    throw FormatError(images_path.string() + ": bad IDX magic (expected 0x00000803)");
  if (read_be32(labels, 0, labels_path) != 0x00000801u)
    throw FormatError(labels_path.string() + ": bad IDX magic (expected 0x00000801)");

  const std::size_t n = read_be32(images, 4, images_path);
  const std::size_t rows = read_be32(images, 8, images_path);
  const std::size_t cols = read_be32(images, 12, images_path);
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + n * pixels) throw FormatError(images_path.string() + ": truncated image data");
  const std::size_t n_labels = read_be32(labels, 4, labels_path);
  if (labels.size() < 8 + n_labels) throw FormatError(labels_path.string() + ": truncated label data");
  if (n_labels != n)
    throw FormatError(labels_path.string() + ": label count " + std::to_string(n_labels) + " does not match " +
                      std::to_string(n) + " images");

  LabeledDataset out;
  out.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < pixels; ++p)
      out.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = images[16 + i * pixels + p] / 255.0;
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[8 + i];
    out.labels.push_back(y);
    out.true_labels.push_back(y);
    max_label = std::max(max_label, y);
  }
  out.class_count = std::max(2, max_label + 1);
  return out;
}

void write_cache(const LabeledDataset& data, const std::filesystem::path& stem) {
  data.validate();
  auto bin_path = stem;
  bin_path += ".bin";
  auto json_path = stem;
  json_path += ".json";
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw FormatError(bin_path.string() + ": cannot write");
  for (Eigen::Index r = 0; r < data.features.rows(); ++r)
    for (Eigen::Index c = 0; c < data.features.cols(); ++c) put_le(bin, static_cast<float>(data.features(r, c)));
  for (int y : data.labels) put_le(bin, static_cast<std::uint16_t>(y));
  for (int y : data.true_labels) put_le(bin, static_cast<std::uint16_t>(y));

  const std::size_t n = data.size();
  const std::size_t d = static_cast<std::size_t>(data.dim());
  nlohmann::ordered_json desc;
  desc["format"] = "fedned-cache-v1";
  desc["samples"] = n;
  desc["dim"] = d;
  desc["class_count"] = data.class_count;
  desc["features_offset"] = 0;
  desc["labels_offset"] = n * d * 4;
  desc["true_labels_offset"] = n * d * 4 + n * 2;
  std::ofstream js(json_path);
  if (!js) throw FormatError(json_path.string() + ": cannot write");
  js << desc.dump(2) << '\n';
}

LabeledDataset read_cache(const std::filesystem::path& stem) {
  auto bin_path = stem;
  bin_path += ".bin";
  auto json_path = stem;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw FormatError(json_path.string() + ": cannot open file");
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  if (desc.value("format", "") != "fedned-cache-v1") throw FormatError(json_path.string() + ": unknown cache format");
  const auto n = desc.at("samples").get<std::size_t>();
  const auto d = desc.at("dim").get<std::size_t>();
  const auto bytes = read_file(bin_path);
  if (bytes.size() != n * d * 4 + n * 4) throw FormatError(bin_path.string() + ": size does not match descriptor");

  LabeledDataset out;
  out.class_count = desc.at("class_count").get<int>();
  out.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n * d; ++i) out.features.data()[i] = get_le<float>(bytes, i * 4);
  const std::size_t lo = n * d * 4;
  for (std::size_t i = 0; i < n; ++i) out.labels.push_back(get_le<std::uint16_t>(bytes, lo + i * 2));
  for (std::size_t i = 0; i < n; ++i) out.true_labels.push_back(get_le<std::uint16_t>(bytes, lo + n * 2 + i * 2));
  out.validate();
  return out;
}

std::vector<double> sample_dirichlet(double alpha, int k, RandomStream& rng) {
  std::vector<double> logs(static_cast<std::size_t>(k));
  for (double& l : logs) l = sample_log_gamma(alpha, rng);
  const double mx = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  for (double& l : logs) {
    l = std::exp(l - mx);
    sum += l;
  }
  for (double& l : logs) l /= sum;
  return logs;
}

double sample_beta(double a, double b, RandomStream& rng) {
  const double lx = sample_log_gamma(a, rng);
  const double ly = sample_log_gamma(b, rng);
  // x / (x + y) = 1 / (1 + exp(ly - lx))
  return 1.0 / (1.0 + std::exp(ly - lx));
}

std::vector<std::vector<std::size_t>> partition_dirichlet_indices(const LabeledDataset& data,
                                                                  const PartitionSpec& spec, std::uint64_t seed) {
  if (data.empty()) throw ConfigError("partition_dirichlet: empty dataset");
  if (spec.client_count < 2) throw ConfigError("partition_dirichlet: need at least 2 clients");
  if (!(spec.dirichlet_alpha > 0.0)) throw ConfigError("partition_dirichlet: alpha must be positive");
  const auto k = static_cast<std::size_t>(spec.client_count);
  if (static_cast<std::size_t>(std::max(spec.min_samples_per_client, 0)) * k > data.size())
    throw ConfigError("partition_dirichlet: " + std::to_string(k) + " clients x " +
                      std::to_string(spec.min_samples_per_client) + " minimum samples exceeds " +
                      std::to_string(data.size()) + " available");

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.class_count));
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  RandomStream rng = make_stream(seed);
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::vector<std::vector<std::size_t>> parts(k);
    for (auto members : by_class) {
      if (members.empty()) continue;
      std::shuffle(members.begin(), members.end(), rng);
      const auto props = sample_dirichlet(spec.dirichlet_alpha, spec.client_count, rng);
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < k; ++c) {
        cum += props[c];
        std::size_t end = c + 1 == k ? members.size()
                                     : std::min(members.size(), static_cast<std::size_t>(std::llround(cum * static_cast<double>(members.size()))));
        end = std::max(end, start);
        parts[c].insert(parts[c].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                        members.begin() + static_cast<std::ptrdiff_t>(end));
        start = end;
      }
    }
    const bool ok = std::all_of(parts.begin(), parts.end(), [&](const auto& p) {
      return p.size() >= static_cast<std::size_t>(spec.min_samples_per_client);
    });
    if (ok) {
      for (auto& p : parts) std::sort(p.begin(), p.end());
      return parts;
    }
  }
  throw ConfigError("partition_dirichlet: no draw satisfied min_samples_per_client within 100 attempts");
}

std::vector<LabeledDataset> partition_dirichlet(const LabeledDataset& data, const PartitionSpec& spec,
                                                std::uint64_t seed) {
  std::vector<LabeledDataset> out;
  for (const auto& idx : partition_dirichlet_indices(data, spec, seed)) out.push_back(data.subset(idx));
  return out;
}

std::vector<double> sample_noise_ratios(const NoiseSpec& spec, int client_count, std::uint64_t seed) {
  if (client_count < 1) throw ConfigError("sample_noise_ratios: need at least one client");
  if (spec.fixed_ratios) {
    if (static_cast<int>(spec.fixed_ratios->size()) != client_count)
      throw ConfigError("noise.fixed_ratios must have one entry per client");
    for (double r : *spec.fixed_ratios)
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("noise.fixed_ratios entries must lie in [0, 1]");
    return *spec.fixed_ratios;
  }
  if (!(spec.beta_a > 0.0) || !(spec.beta_b > 0.0)) throw ConfigError("noise Beta parameters must be positive");
  RandomStream rng = make_stream(seed);
  std::vector<double> out(static_cast<std::size_t>(client_count));
  for (double& r : out) r = std::clamp(sample_beta(spec.beta_a, spec.beta_b, rng), 0.0, 1.0);
  return out;
}

NoiseInjection inject_label_noise(const LabeledDataset& data, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ArgumentError("inject_label_noise: ratio must lie in [0, 1]");
  NoiseInjection out{data, 0, std::nullopt};
  const auto target = static_cast<std::size_t>(std::nearbyint(ratio * static_cast<double>(data.size())));
  if (target == 0) return out;
  const std::vector<int> present = data.present_classes();
  if (present.size() < 2) {
    out.warning = "only one class present; labels left unchanged";
    return out;
  }
  RandomStream rng = make_stream(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<std::size_t> pick(0, present.size() - 2);
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t idx = order[i];
    const int current = out.data.labels[idx];
    std::size_t slot = pick(rng);
    // skip over the current class so the draw is uniform over the others
    const auto pos = static_cast<std::size_t>(std::lower_bound(present.begin(), present.end(), current) - present.begin());
    if (slot >= pos) ++slot;
    out.data.labels[idx] = present[slot];
  }
  out.corrupted = target;
  return out;
}

WorldSplit split_world(const LabeledDataset& base, int public_size, double test_fraction, std::uint64_t seed) {
  if (public_size < 0 || !(test_fraction >= 0.0 && test_fraction < 1.0))
    throw ConfigError("split_world: public_size must be >= 0 and test_fraction in [0, 1)");
  const std::size_t n = base.size();
  const auto n_test = static_cast<std::size_t>(std::nearbyint(test_fraction * static_cast<double>(n)));
  const auto n_public = static_cast<std::size_t>(public_size);
  if (n_public + n_test >= n)
    throw ConfigError("split_world: public (" + std::to_string(n_public) + ") + test (" + std::to_string(n_test) +
                      ") leaves no training data out of " + std::to_string(n));
  RandomStream rng = make_stream(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  auto take = [&](std::size_t from, std::size_t count) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                 order.begin() + static_cast<std::ptrdiff_t>(from + count));
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  WorldSplit out;
  const auto public_idx = take(0, n_public);
  out.public_set.features = base.subset(public_idx).features;
  out.test = base.subset(take(n_public, n_test));
  out.train = base.subset(take(n_public + n_test, n - n_public - n_test));
  return out;
}

}  // namespace fedned::data
