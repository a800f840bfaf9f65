#include "fedned/client.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "fedned/errors.hpp"

namespace fedned::client {

void ClientState::validate() const {
  if (local_epochs < 1) throw ConfigError("client " + std::to_string(client_id) + ": local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("client " + std::to_string(client_id) + ": batch_size must be >= 1");
  if (local_data.empty()) throw ConfigError("client " + std::to_string(client_id) + ": empty local dataset");
}

nn::ModelParams train_sgd(const data::LabeledDataset& data, const nn::ModelParams& start, int epochs, int batch_size,
                          double lr, std::uint64_t seed) {
  nn::ModelParams model = start;
  if (lr == 0.0) return model;
  RandomStream shuffle_rng = make_stream(derive_seed(seed, {0}));
  RandomStream dropout_rng = make_stream(derive_seed(seed, {1}));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(batch_size);
  nn::Matrix batch;
  std::vector<int> labels;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start_at = 0; start_at < order.size(); start_at += bs) {
      const std::size_t n = std::min(bs, order.size() - start_at);
      batch.resize(static_cast<Eigen::Index>(n), data.features.cols());
      labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t src = order[start_at + i];
        batch.row(static_cast<Eigen::Index>(i)) = data.features.row(static_cast<Eigen::Index>(src));
        labels[i] = data.labels[src];
      }
      const auto step = nn::cross_entropy_loss_and_grad(model, batch, labels, &dropout_rng);
      model = nn::sgd_step(model, step.grad, lr);
    }
  }
  return model;
}

nn::ModelParams train_supervised(const ClientState& state, const nn::ModelParams& global_model, std::uint64_t seed) {
  state.validate();
  return train_sgd(state.local_data, global_model, state.local_epochs, state.batch_size, state.lr, seed);
}

data::LabeledDataset assign_pseudo_labels(const nn::ModelParams& global_model, const data::LabeledDataset& data) {
  data::LabeledDataset out = data;
  if (data.empty()) return out;
  const nn::Matrix probs = nn::predict_proba(global_model, data.features);
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const auto row = probs.row(r);
    out.labels[static_cast<std::size_t>(r)] = nn::argmax(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  return out;
}

nn::ModelParams train_pseudo(const ClientState& state, const nn::ModelParams& global_model, std::uint64_t seed) {
  if (!state.flagged_en)
    throw ProtocolError("train_pseudo: client " + std::to_string(state.client_id) + " is not flagged as extremely noisy");
  state.validate();
  const data::LabeledDataset pseudo = assign_pseudo_labels(global_model, state.local_data);
  return train_sgd(pseudo, global_model, state.local_epochs, state.batch_size, state.lr, seed);
}

ClientUpload run_client_round(const ClientState& state, const nn::ModelParams& global_model, bool past_warmup,
                              std::uint64_t seed) {
  ClientUpload upload;
  upload.client_id = state.client_id;
  upload.sample_count = state.local_data.size();
  upload.supervised_model = train_supervised(state, global_model, derive_seed(seed, {0}));
  if (state.flagged_en && past_warmup)
    upload.pseudo_model = train_pseudo(state, global_model, derive_seed(seed, {stream::kPseudo}));
  return upload;
}

}  // namespace fedned::client
