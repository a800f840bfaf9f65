#pragma once

// Federated data world: base datasets, Dirichlet partitioning, Beta noise ratios,
// class-restricted label noise and the train/test/public split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedned/nn.hpp"

namespace fedned::data {

struct LabeledDataset {
  nn::Matrix features;          // N x d
  std::vector<int> labels;      // observed, possibly corrupted
  std::vector<int> true_labels; // pre-corruption ground truth
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  int dim() const { return static_cast<int>(features.cols()); }
  bool empty() const { return labels.empty(); }

  LabeledDataset subset(std::span<const std::size_t> indices) const;
  /// Sorted distinct values of `labels`.
  std::vector<int> present_classes() const;
  std::size_t corrupted_count() const;
  /// Throws ConfigError if lengths disagree or labels leave [0, C).
  void validate() const;
};

/// Unlabeled server-side data.
struct PublicDataset {
  nn::Matrix features;  // M x d

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
};

struct PartitionSpec {
  double dirichlet_alpha = 1.0;
  int client_count = 2;
  int min_samples_per_client = 1;
};

struct NoiseSpec {
  double beta_a = 0.1;
  double beta_b = 0.1;
  std::optional<std::vector<double>> fixed_ratios;
};

/// Class means with pairwise distance >= separation. For classes <= dim they sit on scaled
/// coordinate axes (distance exactly separation); otherwise random directions, rejection-sampled.
nn::Matrix blob_means(int classes, int dim, double separation, std::uint64_t seed);

/// Unit-covariance Gaussian clusters around blob_means, class-major order.
LabeledDataset synthesize_blobs(int classes, int per_class, int dim, double separation, std::uint64_t seed);

/// Unlabeled samples from the same cluster layout with every mean displaced by a random
/// offset of norm `shift`: related to, but not drawn from, the client distribution.
PublicDataset synthesize_shifted_public(int classes, int count, int dim, double separation, double shift,
                                        std::uint64_t base_seed, std::uint64_t seed);

/// MNIST-style IDX files: images magic 0x00000803, labels 0x00000801, big-endian dims.
/// Pixels scaled to [0,1]. Class count is max label + 1.
LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Flat cache: `<stem>.bin` (little-endian f32 features, u16 labels, u16 true labels) plus a
/// `<stem>.json` descriptor.
void write_cache(const LabeledDataset& data, const std::filesystem::path& stem);
LabeledDataset read_cache(const std::filesystem::path& stem);

/// Per-client index lists. Each class is split over clients by a Dirichlet(alpha * 1_K) draw;
/// the whole draw is repeated (up to 100 attempts) until every client holds
/// min_samples_per_client samples.
std::vector<std::vector<std::size_t>> partition_dirichlet_indices(const LabeledDataset& data,
                                                                  const PartitionSpec& spec, std::uint64_t seed);
std::vector<LabeledDataset> partition_dirichlet(const LabeledDataset& data, const PartitionSpec& spec,
                                                std::uint64_t seed);

/// K i.i.d. Beta(a, b) draws, or fixed_ratios verbatim.
std::vector<double> sample_noise_ratios(const NoiseSpec& spec, int client_count, std::uint64_t seed);

struct NoiseInjection {
  LabeledDataset data;
  std::size_t corrupted = 0;
  std::optional<std::string> warning;
};

/// Replaces exactly round(ratio * N) labels (chosen without replacement) with a uniform draw
/// over the other classes present in `data`.
NoiseInjection inject_label_noise(const LabeledDataset& data, double ratio, std::uint64_t seed);

struct WorldSplit {
  LabeledDataset train;
  LabeledDataset test;
  PublicDataset public_set;
};

/// Disjoint train / test / public split of `base`; public samples lose their labels.
/// Test size is round(test_fraction * N). With public_size == 0 the public set is empty.
WorldSplit split_world(const LabeledDataset& base, int public_size, double test_fraction, std::uint64_t seed);

/// Draws from a Dirichlet(alpha) over `k` components; log-space so tiny alphas stay finite.
std::vector<double> sample_dirichlet(double alpha, int k, RandomStream& rng);
/// Beta(a, b) via two log-gamma draws.
double sample_beta(double a, double b, RandomStream& rng);

}  // namespace fedned::data
