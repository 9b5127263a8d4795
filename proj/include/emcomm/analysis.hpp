// Post-training analyses on frozen senders: position zeroing, cross-property
// transfer, single-message regression, bandwidth correlation and block
// selectivity. Exact tabular fixtures live here too so the pipeline can be
// checked by enumeration.
#pragma once

#include "emcomm/metrics.hpp"
#include "emcomm/training.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace emcomm {

/// Maps receiver input [n, 2*width] to logits [n, labels].
using Comparator = std::function<Tensor(const Tensor&)>;

std::vector<Comparator> comparators(const std::vector<Receiver>& receivers);

/// Mean accuracy of the comparators on `pairs` with messages multiplied by `mask`.
Accuracy evaluate_comparators(const std::vector<Comparator>& cs, const MessageMatrix& msgs,
                              std::span<const ComparisonPair> pairs, std::span<const double> mask = {});

/// 1 everywhere except the V dims of each listed position (global index
/// agent*K + k), which are 0.
std::vector<double> position_mask(const SenderConfig& cfg, std::span<const std::size_t> zeroed);
/// 1 everywhere except agent `agent`'s K*V block.
std::vector<double> block_mask(const SenderConfig& cfg, std::size_t agent);

struct InterventionResult {
  std::vector<std::size_t> positions;
  std::vector<double> baseline;     // per property
  std::vector<double> intervened;   // per property
  std::vector<double> drop;         // baseline - intervened
  double baseline_both = 0.0;
  double intervened_both = 0.0;
};

/// Baseline and intervened runs share the exact pair list.
InterventionResult position_zero_intervention(const std::vector<Comparator>& cs, const MessageMatrix& msgs,
                                              const SenderConfig& cfg, std::span<const std::size_t> positions,
                                              std::span<const ComparisonPair> pairs);

struct RelevanceSummary {
  double relevant_drop = 0.0;    // mean over positions of the drop on the argmax-MI property
  double irrelevant_drop = 0.0;  // mean over positions of the mean drop on the other properties
  std::vector<InterventionResult> per_position;
  std::vector<std::size_t> relevant_property;
};

/// Zeroes each position in turn; relevance comes from the MI matrix.
RelevanceSummary relevance_drops(const std::vector<Comparator>& cs, const MessageMatrix& msgs, const SenderConfig& cfg,
                                 const MIMatrix& mi, std::span<const ComparisonPair> pairs);

struct TransferResult {
  std::string task;
  double holdout_acc = 0.0;
  std::vector<double> epoch_loss;
  std::uint64_t sender_checksum_before = 0;
  std::uint64_t sender_checksum_after = 0;
};

/// Fresh receiver on "property prop_a of A above property prop_b of B",
/// trained on train-split pairs, scored on every tie-free ordered test pair.
TransferResult cross_property_transfer(const MessageMatrix& msgs, const Dataset& data, const DatasetSplit& split,
                                       std::size_t prop_a, std::size_t prop_b, const FitOptions& opt, Rng& rng);
/// Same, harvesting messages from a frozen sender and recording checksums.
TransferResult cross_property_transfer(SenderGroup& sender, const FeatureBank& bank, const Dataset& data,
                                       const DatasetSplit& split, std::size_t prop_a, std::size_t prop_b,
                                       const FitOptions& opt, Rng& rng);

struct RegressionResult {
  double train_acc = 0.0;
  double holdout_acc = 0.0;
  double chance = 0.0;
};

/// B-way classifier (K*V -> 64 -> B) on one agent's frozen message.
RegressionResult single_message_regression(const MessageMatrix& msgs, const SenderConfig& cfg, std::size_t agent,
                                           const Dataset& data, const DatasetSplit& split, std::size_t attribute,
                                           std::size_t epochs, Rng& rng);

struct CorrelationResult {
  double r = 0.0;
  bool degenerate = false;
};

/// Pearson r between per-property MI totals (summed over positions) and
/// per-property oracle accuracy.
CorrelationResult bandwidth_correlation(const MIMatrix& mi, std::span<const double> oracle_acc);

struct SelectivityResult {
  double selectivity = 0.0;
  bool degenerate = false;
  std::size_t blocks_used = 0;
  std::vector<std::vector<double>> block_drops;  // [block][property], clamped at 0
};

/// Zeroes each agent's K*V block. Per block: targeted = largest property
/// drop, non-targeted = mean of the rest; score = t / (t + n). Blocks with
/// no drop at all are skipped.
SelectivityResult continuous_selectivity(const std::vector<Comparator>& cs, const MessageMatrix& msgs,
                                         const SenderConfig& cfg, std::span<const ComparisonPair> pairs);
/// The same score from precomputed per-block property drops.
SelectivityResult selectivity_from_drops(const std::vector<std::vector<double>>& drops);

// ---- exact fixtures -------------------------------------------------------------

/// One scene per cell of a B x B grid over two properties, no features.
Dataset grid_fixture(std::size_t bins = 5);

/// Perfect positional code: one agent, position j carries the bin of property j.
MessageMatrix positional_messages(const Dataset& data, std::size_t vocab);
/// Holistic code: one position carrying the cell index (vocab B^2).
MessageMatrix holistic_messages(const Dataset& data);
SenderConfig positional_fixture_config(std::size_t properties, std::size_t vocab);

/// Lookup-table comparator fitted by enumeration. For each label it keeps the
/// position whose (symbol_A, symbol_B) table best explains the training pairs;
/// unseen keys (including zeroed positions) produce logit 0.
class TabularReceiver {
 public:
  TabularReceiver(const SenderConfig& cfg, const MessageMatrix& msgs, std::span<const ComparisonPair> train_pairs);
  Tensor operator()(const Tensor& input) const;
  std::size_t chosen_position(std::size_t label) const { return chosen_.at(label); }

 private:
  std::optional<std::size_t> decode(std::span<const double> row, std::size_t position) const;
  SenderConfig cfg_;
  std::size_t labels_ = 0;
  std::vector<std::size_t> chosen_;
  std::vector<std::vector<double>> table_;  // per label: (V+1)^2 entries, +1 / -1 / 0
};

}  // namespace emcomm
