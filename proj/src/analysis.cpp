#include "emcomm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace emcomm {

std::vector<Comparator> comparators(const std::vector<Receiver>& receivers) {
  std::vector<Comparator> out;
  for (const Receiver& r : receivers) out.push_back([&r](const Tensor& x) { return r.forward(x); });
  return out;
}

Accuracy evaluate_comparators(const std::vector<Comparator>& cs, const MessageMatrix& msgs,
                              std::span<const ComparisonPair> pairs, std::span<const double> mask) {
  if (cs.empty()) throw std::invalid_argument("evaluate_comparators: no comparators");
  PairBatch batch = make_batch(pairs);
  Tensor x = pair_input(msgs.gather(batch.a, mask), msgs.gather(batch.b, mask));
  std::vector<Accuracy> parts;
  for (const auto& c : cs) parts.push_back(score_logits(c(x), batch));
  return mean_accuracy(parts);
}

std::vector<double> position_mask(const SenderConfig& cfg, std::span<const std::size_t> zeroed) {
  std::vector<double> m(cfg.bundle_width(), 1.0);
  for (std::size_t p : zeroed) {
    if (p >= cfg.n_agents * cfg.positions) throw std::out_of_range("position_mask: position out of range");
    std::fill(m.begin() + static_cast<long>(p * cfg.vocab), m.begin() + static_cast<long>((p + 1) * cfg.vocab), 0.0);
  }
  return m;
}

std::vector<double> block_mask(const SenderConfig& cfg, std::size_t agent) {
  if (agent >= cfg.n_agents) throw std::out_of_range("block_mask: agent out of range");
  std::vector<double> m(cfg.bundle_width(), 1.0);
  const std::size_t w = cfg.agent_width();
  std::fill(m.begin() + static_cast<long>(agent * w), m.begin() + static_cast<long>((agent + 1) * w), 0.0);
  return m;
}

InterventionResult position_zero_intervention(const std::vector<Comparator>& cs, const MessageMatrix& msgs,
                                              const SenderConfig& cfg, std::span<const std::size_t> positions,
                                              std::span<const ComparisonPair> pairs) {
  InterventionResult r;
  r.positions.assign(positions.begin(), positions.end());
  Accuracy base = evaluate_comparators(cs, msgs, pairs);
  Accuracy hit = evaluate_comparators(cs, msgs, pairs, position_mask(cfg, positions));
  r.baseline = base.per_property;
  r.intervened = hit.per_property;
  for (std::size_t j = 0; j < r.baseline.size(); ++j) r.drop.push_back(r.baseline[j] - r.intervened[j]);
  r.baseline_both = base.both;
  r.intervened_both = hit.both;
  return r;
}

RelevanceSummary relevance_drops(const std::vector<Comparator>& cs, const MessageMatrix& msgs, const SenderConfig& cfg,
                                 const MIMatrix& mi, std::span<const ComparisonPair> pairs) {
  const std::size_t L = cfg.n_agents * cfg.positions;
  if (mi.size() != L) throw std::invalid_argument("relevance_drops: MI matrix does not match the message layout");
  RelevanceSummary s;
  for (std::size_t p = 0; p < L; ++p) {
    const std::size_t pos[] = {p};
    auto r = position_zero_intervention(cs, msgs, cfg, pos, pairs);
    const auto rel = static_cast<std::size_t>(std::max_element(mi[p].begin(), mi[p].end()) - mi[p].begin());
    double other = 0.0;
    for (std::size_t j = 0; j < r.drop.size(); ++j)
      if (j != rel) other += r.drop[j];
    s.relevant_drop += r.drop[rel];
    s.irrelevant_drop += r.drop.size() > 1 ? other / static_cast<double>(r.drop.size() - 1) : 0.0;
    s.relevant_property.push_back(rel);
    s.per_position.push_back(std::move(r));
  }
  s.relevant_drop /= static_cast<double>(L);
  s.irrelevant_drop /= static_cast<double>(L);
  return s;
}

namespace {

std::vector<ComparisonPair> all_cross_pairs(const Dataset& data, std::span<const std::size_t> pool, std::size_t pa,
                                            std::size_t pb) {
  std::vector<ComparisonPair> out;
  for (std::size_t a : pool)
    for (std::size_t b : pool) {
      const std::size_t x = data.scenes[a].bins[pa], y = data.scenes[b].bins[pb];
      if (a == b || x == y) continue;
      out.push_back({a, b, {x > y ? Order::kAHigher : Order::kBHigher}});
    }
  return out;
}

}  // namespace

TransferResult cross_property_transfer(const MessageMatrix& msgs, const Dataset& data, const DatasetSplit& split,
                                       std::size_t prop_a, std::size_t prop_b, const FitOptions& opt, Rng& rng) {
  TransferResult t;
  t.task = data.grid.properties.at(prop_a).name + "(A)>" + data.grid.properties.at(prop_b).name + "(B)";
  const std::size_t n_pairs = 2 * split.train_ids.size();
  auto sample = [&](Rng& r) { return make_cross_property_pairs(data, split.train_ids, prop_a, prop_b, n_pairs, r); };
  auto holdout = all_cross_pairs(data, split.test_ids, prop_a, prop_b);
  ReceiverFit fit = fit_receiver(msgs, 1, sample, holdout, opt, rng);
  t.holdout_acc = fit.holdout.both;
  t.epoch_loss = std::move(fit.epoch_loss);
  return t;
}

TransferResult cross_property_transfer(SenderGroup& sender, const FeatureBank& bank, const Dataset& data,
                                       const DatasetSplit& split, std::size_t prop_a, std::size_t prop_b,
                                       const FitOptions& opt, Rng& rng) {
  const std::uint64_t before = checksum(sender.parameters());
  TransferResult t = cross_property_transfer(harvest_messages(sender, bank), data, split, prop_a, prop_b, opt, rng);
  t.sender_checksum_before = before;
  t.sender_checksum_after = checksum(sender.parameters());
  return t;
}

RegressionResult single_message_regression(const MessageMatrix& msgs, const SenderConfig& cfg, std::size_t agent,
                                           const Dataset& data, const DatasetSplit& split, std::size_t attribute,
                                           std::size_t epochs, Rng& rng) {
  if (agent >= cfg.n_agents) throw std::out_of_range("single_message_regression: agent out of range");
  if (msgs.width != cfg.bundle_width()) throw std::invalid_argument("single_message_regression: width mismatch");
  const std::size_t w = cfg.agent_width(), B = data.grid.bins();
  auto features = [&](std::span<const std::size_t> ids) {
    std::vector<double> out;
    for (std::size_t id : ids)
      for (std::size_t j = 0; j < w; ++j) out.push_back(msgs.values[id * msgs.width + agent * w + j]);
    return Tensor::from({ids.size(), w}, std::move(out));
  };
  auto labels = [&](std::span<const std::size_t> ids) {
    std::vector<std::size_t> y;
    for (std::size_t id : ids) y.push_back(data.scenes.at(id).bins.at(attribute));
    return y;
  };

  const std::uint64_t base = rng();
  Rng init = derive_rng(base, "regression-init");
  Rng order = derive_rng(base, "regression-order");
  Parameter w1 = make_linear_weight("reg.w1", w, 64, init);
  Parameter b1 = make_linear_bias("reg.b1", w, 64, init);
  Parameter w2 = make_linear_weight("reg.w2", 64, B, init);
  Parameter b2 = make_linear_bias("reg.b2", 64, B, init);
  ParamRefs params{&w1, &b1, &w2, &b2};
  auto state = OptimizerState::for_params(params, 1e-3);
  auto forward = [&](const Tensor& x) {
    return add_row(matmul(relu(add_row(matmul(x, w1.tensor), b1.tensor)), w2.tensor), b2.tensor);
  };
  auto accuracy = [&](std::span<const std::size_t> ids) {
    if (ids.empty()) return 0.0;
    Tensor out = forward(features(ids));
    auto y = labels(ids);
    std::size_t right = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double* row = out.values().data() + i * B;
      right += static_cast<std::size_t>(std::max_element(row, row + B) - row) == y[i] ? 1 : 0;
    }
    return static_cast<double>(right) / static_cast<double>(ids.size());
  };

  std::vector<std::size_t> train = split.train_ids;
  constexpr std::size_t kBatch = 64;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(train.begin(), train.end(), order);
    for (std::size_t lo = 0; lo < train.size(); lo += kBatch) {
      std::span<const std::size_t> ids(train.data() + lo, std::min(kBatch, train.size() - lo));
      forward_backward(softmax_cross_entropy(forward(features(ids)), labels(ids)), params);
      clip_gradients(params, 1.0);
      optimizer_step(state, params);
    }
  }
  return {accuracy(split.train_ids), accuracy(split.test_ids), 1.0 / static_cast<double>(B)};
}

CorrelationResult bandwidth_correlation(const MIMatrix& mi, std::span<const double> oracle_acc) {
  if (mi.empty()) throw std::invalid_argument("bandwidth_correlation: empty MI matrix");
  const std::size_t P = mi[0].size();
  if (P < 3) throw std::invalid_argument("bandwidth_correlation: needs at least three properties");
  if (oracle_acc.size() != P) throw std::invalid_argument("bandwidth_correlation: accuracy count mismatch");
  std::vector<double> totals(P, 0.0);
  for (const auto& row : mi)
    for (std::size_t j = 0; j < P; ++j) totals[j] += row.at(j);
  CorrelationResult r;
  r.r = pearson(totals, oracle_acc, &r.degenerate);
  return r;
}

SelectivityResult selectivity_from_drops(const std::vector<std::vector<double>>& drops) {
  SelectivityResult s;
  double total = 0.0;
  for (const auto& raw : drops) {
    std::vector<double> d;
    for (double x : raw) d.push_back(std::max(0.0, x));
    s.block_drops.push_back(d);
    if (d.size() < 2) throw std::invalid_argument("selectivity: needs at least two properties");
    const auto top = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    double rest = 0.0;
    for (std::size_t j = 0; j < d.size(); ++j)
      if (j != top) rest += d[j];
    rest /= static_cast<double>(d.size() - 1);
    if (d[top] + rest <= 0.0) continue;
    total += d[top] / (d[top] + rest);
    ++s.blocks_used;
  }
  s.degenerate = s.blocks_used == 0;
  s.selectivity = s.degenerate ? 0.0 : total / static_cast<double>(s.blocks_used);
  return s;
}

SelectivityResult continuous_selectivity(const std::vector<Comparator>& cs, const MessageMatrix& msgs,
                                         const SenderConfig& cfg, std::span<const ComparisonPair> pairs) {
  Accuracy base = evaluate_comparators(cs, msgs, pairs);
  std::vector<std::vector<double>> drops;
  for (std::size_t a = 0; a < cfg.n_agents; ++a) {
    Accuracy hit = evaluate_comparators(cs, msgs, pairs, block_mask(cfg, a));
    std::vector<double> d;
    for (std::size_t j = 0; j < base.per_property.size(); ++j) d.push_back(base.per_property[j] - hit.per_property[j]);
    drops.push_back(std::move(d));
  }
  return selectivity_from_drops(drops);
}

// ---- fixtures -------------------------------------------------------------------

Dataset grid_fixture(std::size_t bins) {
  Dataset d;
  d.domain = "fixture";
  std::vector<double> v(bins);
  std::iota(v.begin(), v.end(), 0.0);
  d.grid.properties = {{"attr0", v}, {"attr1", v}};
  d.frames = 1;
  d.dims = 1;
  for (std::size_t c = 0; c < bins * bins; ++c) {
    Scene s;
    s.id = c;
    s.frames = 1;
    s.dims = 1;
    s.features = {0.0};
    s.bins = d.grid.cell_bins(c);
    for (std::size_t p = 0; p < 2; ++p) s.values.push_back(v[s.bins[p]]);
    d.scenes.push_back(std::move(s));
  }
  return d;
}

MessageMatrix positional_messages(const Dataset& data, std::size_t vocab) {
  const std::size_t P = data.grid.property_count();
  MessageMatrix m{data.scenes.size(), P * vocab, {}};
  m.values.assign(m.rows * m.width, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t b = data.scenes[i].bins[p];
      if (b >= vocab) throw std::invalid_argument("positional_messages: vocab smaller than bin count");
      m.values[i * m.width + p * vocab + b] = 1.0;
    }
  return m;
}

MessageMatrix holistic_messages(const Dataset& data) {
  const std::size_t cells = data.grid.cell_count();
  MessageMatrix m{data.scenes.size(), cells, std::vector<double>(data.scenes.size() * cells, 0.0)};
  for (std::size_t i = 0; i < m.rows; ++i) m.values[i * cells + data.cell_of(data.scenes[i])] = 1.0;
  return m;
}

SenderConfig positional_fixture_config(std::size_t properties, std::size_t vocab) {
  SenderConfig c;
  c.n_agents = 1;
  c.positions = properties;
  c.vocab = vocab;
  return c;
}

TabularReceiver::TabularReceiver(const SenderConfig& cfg, const MessageMatrix& msgs,
                                 std::span<const ComparisonPair> train_pairs)
    : cfg_(cfg) {
  if (msgs.width != cfg.bundle_width()) throw std::invalid_argument("TabularReceiver: width mismatch");
  if (train_pairs.empty()) throw std::invalid_argument("TabularReceiver: no training pairs");
  labels_ = train_pairs[0].labels.size();
  const std::size_t L = cfg.n_agents * cfg.positions, V1 = cfg.vocab + 1;
  for (std::size_t j = 0; j < labels_; ++j) {
    std::size_t best_pos = 0;
    double best_score = -1.0;
    std::vector<double> best_table;
    for (std::size_t p = 0; p < L; ++p) {
      std::vector<double> up(V1 * V1, 0.0), down(V1 * V1, 0.0);
      for (const auto& pr : train_pairs) {
        auto sa = decode(std::span(msgs.values).subspan(pr.a * msgs.width, msgs.width), p);
        auto sb = decode(std::span(msgs.values).subspan(pr.b * msgs.width, msgs.width), p);
        const std::size_t key = sa.value_or(cfg.vocab) * V1 + sb.value_or(cfg.vocab);
        (pr.labels[j] == Order::kAHigher ? up : down)[key] += 1.0;
      }
      double score = 0.0;
      std::vector<double> table(V1 * V1, 0.0);
      for (std::size_t k = 0; k < table.size(); ++k) {
        score += std::max(up[k], down[k]);
        table[k] = up[k] > down[k] ? 1.0 : (down[k] > up[k] ? -1.0 : 0.0);
      }
      if (score > best_score) {
        best_score = score;
        best_pos = p;
        best_table = std::move(table);
      }
    }
    chosen_.push_back(best_pos);
    table_.push_back(std::move(best_table));
  }
}

std::optional<std::size_t> TabularReceiver::decode(std::span<const double> row, std::size_t position) const {
  const auto seg = row.subspan(position * cfg_.vocab, cfg_.vocab);
  const auto it = std::max_element(seg.begin(), seg.end());
  if (*it <= 0.0) return std::nullopt;
  return static_cast<std::size_t>(it - seg.begin());
}

Tensor TabularReceiver::operator()(const Tensor& input) const {
  const std::size_t W = cfg_.bundle_width(), V1 = cfg_.vocab + 1;
  if (input.rank() != 2 || input.dim(1) != 2 * W) throw std::invalid_argument("TabularReceiver: width mismatch");
  const std::size_t n = input.dim(0);
  std::vector<double> out(n * labels_, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = input.values().subspan(i * 2 * W, 2 * W);
    for (std::size_t j = 0; j < labels_; ++j) {
      auto sa = decode(row.subspan(0, W), chosen_[j]);
      auto sb = decode(row.subspan(W, W), chosen_[j]);
      // A zeroed position carries no symbol: abstain with logit 0.
      if (!sa || !sb) continue;
      out[i * labels_ + j] = table_[j][*sa * V1 + *sb];
    }
  }
  return Tensor::from({n, labels_}, std::move(out));
}

}  // namespace emcomm
