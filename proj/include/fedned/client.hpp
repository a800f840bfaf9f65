#pragma once

// Simulated client: supervised local SGD, plus a pseudo-labelled second model for clients
// the server flagged as extremely noisy.

#include <cstdint>
#include <optional>

#include "fedned/data.hpp"
#include "fedned/nn.hpp"

namespace fedned::client {

struct ClientState {
  int client_id = 0;
  data::LabeledDataset local_data;
  /// Membership in N^t of the most recent round this client was sampled in.
  bool flagged_en = false;
  int local_epochs = 5;
  int batch_size = 32;
  double lr = 0.05;

  void validate() const;
};

struct ClientUpload {
  int client_id = 0;
  nn::ModelParams supervised_model;
  std::optional<nn::ModelParams> pseudo_model;
  std::size_t sample_count = 0;
};

/// E epochs of shuffled mini-batch SGD with dropout, starting from `global_model`.
nn::ModelParams train_supervised(const ClientState& state, const nn::ModelParams& global_model, std::uint64_t seed);

/// Labels replaced by the argmax of the dropout-off prediction (ties to the lowest class).
data::LabeledDataset assign_pseudo_labels(const nn::ModelParams& global_model, const data::LabeledDataset& data);

/// Same schedule as train_supervised over pseudo-labels fixed once from `global_model`.
/// Throws ProtocolError if the client is not flagged.
nn::ModelParams train_pseudo(const ClientState& state, const nn::ModelParams& global_model, std::uint64_t seed);

ClientUpload run_client_round(const ClientState& state, const nn::ModelParams& global_model, bool past_warmup,
                              std::uint64_t seed);

/// Mini-batch SGD over an arbitrary labelled set; shared by both training paths.
nn::ModelParams train_sgd(const data::LabeledDataset& data, const nn::ModelParams& start, int epochs, int batch_size,
                          double lr, std::uint64_t seed);

}  // namespace fedned::client
