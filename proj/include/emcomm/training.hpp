// Oracle pretraining, population-based iterated learning, the LazImpa
// baseline and downstream outcome prediction from frozen messages.
#pragma once

#include "emcomm/agents.hpp"
#include "emcomm/optim.hpp"

#include <functional>
#include <string>
#include <vector>

namespace emcomm {

struct TrainingConfig {
  std::size_t epochs = 400;
  std::size_t batch_size = 64;
  double sender_lr = 1e-3;
  double receiver_lr = 3e-3;
  std::size_t population_size = 3;
  std::size_t reset_interval = 40;
  double temperature_start = 2.0;
  double temperature_end = 0.5;
  std::size_t soft_warmup = 30;
  double entropy_coeff = 0.03;
  double entropy_floor_fraction = 0.1;
  double grad_clip = 1.0;
  std::size_t oracle_epochs = 100;
  double oracle_lr = 1e-3;
  std::size_t pairs_per_train_scene = 2;
  bool iterated_learning = true;  // false: never reset receivers
  double lazimpa_lambda = 0.01;

  void validate() const;
};

/// Linear anneal: start at epoch 0, end at the final epoch.
double temperature_at(const TrainingConfig& cfg, std::size_t epoch);
/// Receivers are reset at the start of epochs reset_interval, 2*reset_interval, ... < epochs.
bool is_reset_epoch(const TrainingConfig& cfg, std::size_t epoch);
/// Completed resets once `epochs_done` epochs have run (the generation counter).
std::size_t resets_completed(const TrainingConfig& cfg, std::size_t epochs_done);

/// Everything a training loop reads about the task.
struct TaskContext {
  const Dataset* data = nullptr;
  const FeatureBank* bank = nullptr;
  DatasetSplit split;
  std::vector<std::size_t> properties;  // compared properties (grid indices)
};

struct PairBatch {
  std::vector<std::size_t> a, b;
  std::vector<double> targets;  // row-major [pairs, labels], 1 = A higher
  std::size_t labels = 0;
  std::size_t size() const { return a.size(); }
};

PairBatch make_batch(std::span<const ComparisonPair> pairs);

struct Accuracy {
  std::vector<double> per_property;
  double both = 0.0;  // all labels right
  std::size_t pairs = 0;
};

/// Decision rule: logit > 0 means A higher.
Accuracy score_logits(const Tensor& logits, const PairBatch& batch);
/// Average of accuracies (per-property and both) weighted equally.
Accuracy mean_accuracy(const std::vector<Accuracy>& parts);

struct OracleResult {
  Oracle oracle;
  std::vector<double> epoch_loss;
  Accuracy train;
  Accuracy holdout;
};

OracleResult pretrain_oracle(const TrainingConfig& cfg, const TaskContext& ctx, std::size_t hidden, Rng& rng);

struct EntropyTerm {
  Tensor loss;                        // scalar, zero when no head is active
  std::vector<double> hard_entropy;   // per head, nats
  std::vector<bool> active;
};

/// Per-head anti-collapse term. The gate uses the entropy of the batch's
/// argmax symbol frequencies; the differentiable value is -coeff times the
/// entropy of the batch-mean softmax for every gated head.
/// logits: one [B, K*V] tensor per agent.
EntropyTerm entropy_regularizer(const std::vector<Tensor>& logits, std::size_t positions, std::size_t vocab,
                                double coeff, double floor_fraction);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::vector<double> train_acc;
  double train_both = 0.0;
  std::vector<double> head_entropy;
  std::vector<bool> regularizer_active;
  double temperature = 0.0;
  std::size_t resets = 0;
};

struct Instability {
  bool occurred = false;
  std::string kind;  // "nan" or "collapse"
  std::size_t epoch = 0;
  std::string op;
};

struct GameResult {
  std::vector<EpochLog> logs;
  std::vector<Receiver> receivers;
  Instability instability;
  std::size_t resets = 0;
};

GameResult train_iterated_learning(const TrainingConfig& cfg, const TaskContext& ctx, SenderGroup& sender, Rng& rng);

/// Lazy speaker (always-on entropy penalty) + impatient listener (one head per
/// message prefix, loss summed over prefixes). Single receiver, no resets.
GameResult train_lazimpa_baseline(const TrainingConfig& cfg, const TaskContext& ctx, SenderGroup& sender, Rng& rng);

/// Zeroes message positions >= prefix in every agent's block.
Tensor prefix_mask_input(const Tensor& bundle, std::size_t n_agents, std::size_t positions, std::size_t vocab,
                         std::size_t prefix);

/// Eval-mode messages for every scene in the dataset, row = scene id.
struct MessageMatrix {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Tensor gather(std::span<const std::size_t> ids, std::span<const double> mask = {}) const;
};

MessageMatrix harvest_messages(const SenderGroup& sender, const FeatureBank& bank);

/// Accuracy of each receiver on `pairs`, averaged over receivers. `mask`
/// multiplies each scene's message (empty = unmasked).
Accuracy evaluate_receivers(const std::vector<Receiver>& receivers, const MessageMatrix& msgs,
                            std::span<const ComparisonPair> pairs, std::span<const double> mask = {});

struct FitOptions {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double lr = 3e-3;
  double grad_clip = 1.0;
};

struct ReceiverFit {
  Receiver receiver;
  std::vector<double> epoch_loss;
  Accuracy holdout;
};

/// Trains a fresh receiver against frozen messages. `sample_epoch` draws one
/// epoch of training pairs.
ReceiverFit fit_receiver(const MessageMatrix& msgs, std::size_t outputs,
                         const std::function<std::vector<ComparisonPair>(Rng&)>& sample_epoch,
                         std::span<const ComparisonPair> holdout_pairs, const FitOptions& opt, Rng& rng);

/// Discrete: every position constant over the dataset. Continuous: every
/// message dimension has standard deviation below 1e-3.
bool messages_collapsed(const MessageMatrix& msgs, const SenderConfig& cfg);

struct DownstreamResult {
  double train_acc = 0.0;
  double holdout_acc = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  double threshold = 0.0;
};

/// Median-split labels over all scenes (top half = 1, exactly balanced), then
/// a width -> 64 -> 1 MLP trained on train-split scenes, scored on the test split.
DownstreamResult train_downstream_predictor(const MessageMatrix& msgs, std::span<const double> outcomes,
                                            const DatasetSplit& split, std::size_t epochs, Rng& rng);

}  // namespace emcomm
