// Protocol harvesting and compositionality metrics over discrete messages.
// All information quantities are plug-in estimates in nats.
#pragma once

#include "emcomm/agents.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace emcomm {

inline constexpr double kRatioEps = 1e-8;

struct ProtocolTable {
  std::size_t vocab = 0;
  std::size_t bins = 0;
  std::size_t agents = 1;
  std::size_t positions = 0;  // per agent
  std::vector<std::string> attribute_names;
  std::vector<std::vector<std::size_t>> symbols;     // rows x (agents*positions)
  std::vector<std::vector<std::size_t>> attributes;  // rows x P

  std::size_t rows() const { return symbols.size(); }
  std::size_t message_length() const { return agents * positions; }
  std::size_t attribute_count() const { return attribute_names.size(); }
  void validate() const;

  /// Comment line with vocab/bins/agents/positions, then header `m0..,attr..`.
  void write_csv(const std::filesystem::path& path) const;
  static ProtocolTable read_csv(const std::filesystem::path& path);
};

/// Eval-mode (argmax, noise-free) symbols for the given scenes.
ProtocolTable harvest_protocol(const SenderGroup& sender, const FeatureBank& bank, const Dataset& data,
                               std::span<const std::size_t> ids);

/// Plug-in MI between two discrete columns; zero-count cells contribute 0.
double mutual_information(std::span<const std::size_t> x, std::span<const std::size_t> y);
double discrete_mi(const ProtocolTable& t, std::size_t position, std::size_t attribute);

using MIMatrix = std::vector<std::vector<double>>;  // [position][attribute]
MIMatrix mi_matrix(const ProtocolTable& t);

/// Mean over all positions of (max_j MI - second_j MI) / (max_j MI + eps).
double posdis(const ProtocolTable& t);
/// The same gap ratio over symbol-occurrence counts c_s = #{k : m_k = s},
/// averaged over the symbols whose largest MI is nonzero.
double bosdis(const ProtocolTable& t);

struct TopSimResult {
  double value = 0.0;
  bool degenerate = false;
  std::size_t pairs = 0;
};

/// Spearman correlation (average ranks) between Manhattan attribute distance
/// and Hamming message distance over unordered row pairs. Above `max_rows`
/// rows a seeded subsample of rows is used.
TopSimResult topsim(const ProtocolTable& t, std::uint64_t seed = 0, std::size_t max_rows = 2000);

/// Average ranks (1-based) with ties sharing their mean rank.
std::vector<double> average_ranks(std::span<const double> v);
/// Pearson correlation; `degenerate` is set and 0 returned for zero variance.
double pearson(std::span<const double> x, std::span<const double> y, bool* degenerate = nullptr);
double spearman(std::span<const double> x, std::span<const double> y, bool* degenerate = nullptr);

/// Gap ratio over an agent's per-attribute MI totals (summed over its positions).
double specialization_ratio(const ProtocolTable& t, std::size_t agent);

/// Fraction of values strictly above the threshold.
double compositional_rate(std::span<const double> posdis_values, double threshold = 0.4);

struct MetricReport {
  double posdis = 0.0;
  double bosdis = 0.0;
  double topsim = 0.0;
  bool topsim_degenerate = false;
  MIMatrix mi;
  std::vector<double> specialization;
  bool compositional = false;

  /// Flat `key=value` lines, doubles printed with 17 significant digits.
  std::string serialize() const;
  static MetricReport parse(const std::string& text);
};

MetricReport compute_report(const ProtocolTable& t, double threshold = 0.4, std::uint64_t topsim_seed = 0);

}  // namespace emcomm
