#include "emcomm/analysis.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace emcomm;

namespace {

struct Fixture {
  Dataset data = grid_fixture(5);
  MessageMatrix msgs = positional_messages(data, 5);
  SenderConfig cfg = positional_fixture_config(2, 5);
  std::vector<std::size_t> all_ids;
  std::vector<ComparisonPair> pairs;

  Fixture() {
    all_ids.resize(data.scenes.size());
    std::iota(all_ids.begin(), all_ids.end(), 0);
    pairs = all_comparison_pairs(data, all_ids, all_properties(data));
  }
};

MIMatrix positional_mi() {
  const double l = std::log(5.0);
  return {{l, 0.0}, {0.0, l}};
}

}  // namespace

TEST_CASE("tabular receiver solves the positional fixture") {
  Fixture f;
  TabularReceiver r(f.cfg, f.msgs, f.pairs);
  CHECK(r.chosen_position(0) == 0);
  CHECK(r.chosen_position(1) == 1);
  std::vector<Comparator> cs{r};
  Accuracy acc = evaluate_comparators(cs, f.msgs, f.pairs);
  CHECK(acc.both == 1.0);
}

TEST_CASE("position zeroing hits only the encoded property") {
  Fixture f;
  std::vector<Comparator> cs{TabularReceiver(f.cfg, f.msgs, f.pairs)};
  std::vector<std::size_t> pos{0};
  InterventionResult one = position_zero_intervention(cs, f.msgs, f.cfg, pos, f.pairs);
  CHECK(one.baseline == std::vector<double>{1.0, 1.0});
  CHECK(one.drop[0] > 0.0);
  CHECK(one.drop[1] == 0.0);

  RelevanceSummary rel = relevance_drops(cs, f.msgs, f.cfg, positional_mi(), f.pairs);
  CHECK(rel.relevant_property == std::vector<std::size_t>{0, 1});
  CHECK(rel.relevant_drop > 0.0);
  CHECK(rel.irrelevant_drop == 0.0);

  std::vector<std::size_t> both_pos{0, 1};
  InterventionResult all = position_zero_intervention(cs, f.msgs, f.cfg, both_pos, f.pairs);
  for (double a : all.intervened) CHECK(std::abs(a - 0.5) <= 0.1);
}

TEST_CASE("masks") {
  SenderConfig cfg;
  cfg.n_agents = 2;
  cfg.positions = 2;
  cfg.vocab = 3;
  std::vector<std::size_t> z{1, 2};
  auto m = position_mask(cfg, z);
  CHECK(m == std::vector<double>{1, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 1});
  auto b = block_mask(cfg, 1);
  CHECK(b == std::vector<double>{1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0});
  std::vector<std::size_t> out_of_range{4};
  CHECK_THROWS(position_mask(cfg, out_of_range));
  CHECK_THROWS(block_mask(cfg, 2));
}

TEST_CASE("cross-property transfer on the positional fixture") {
  Fixture f;
  Rng split_rng(9);
  DatasetSplit split = latin_square_split(f.data, split_rng);
  FitOptions opt;
  opt.epochs = 300;
  Rng rng(3);
  TransferResult t = cross_property_transfer(f.msgs, f.data, split, 0, 1, opt, rng);
  MESSAGE("transfer holdout=" << t.holdout_acc);
  CHECK(t.holdout_acc >= 0.99);
  CHECK(t.task == "attr0(A)>attr1(B)");
  CHECK(t.epoch_loss.size() == opt.epochs);
  CHECK(t.epoch_loss.back() < t.epoch_loss.front());
}

TEST_CASE("single-message regression on the positional fixture") {
  Fixture f;
  Rng split_rng(9);
  DatasetSplit split = latin_square_split(f.data, split_rng);
  Rng rng(4);
  RegressionResult r = single_message_regression(f.msgs, f.cfg, 0, f.data, split, 1, 300, rng);
  CHECK(r.chance == doctest::Approx(0.2));
  CHECK(r.train_acc >= 0.99);
  CHECK(r.holdout_acc >= 0.99);

  // The holistic code has no position for a single attribute to hide in, but
  // one agent still sees the whole cell.
  MessageMatrix h = holistic_messages(f.data);
  CHECK(h.width == 25);
  SenderConfig hc = positional_fixture_config(1, 25);
  Rng rng2(4);
  RegressionResult rh = single_message_regression(h, hc, 0, f.data, split, 0, 300, rng2);
  CHECK(rh.train_acc >= 0.99);
  // Unseen cells carry symbols the classifier never trained on.
  CHECK(rh.holdout_acc <= 0.5);
}

TEST_CASE("bandwidth correlation") {
  // Per-property MI totals 1.0, 0.2, 0.6.
  MIMatrix mi{{1.0, 0.0, 0.1}, {0.0, 0.2, 0.5}};
  std::vector<double> up{0.9, 0.5, 0.7}, down{0.5, 0.9, 0.7}, flat{0.7, 0.7, 0.7};
  CHECK(bandwidth_correlation(mi, up).r == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bandwidth_correlation(mi, down).r == doctest::Approx(-1.0).epsilon(1e-12));
  CorrelationResult d = bandwidth_correlation(mi, flat);
  CHECK(d.degenerate);
  CHECK(d.r == 0.0);
  CHECK_THROWS(bandwidth_correlation(MIMatrix{{1.0, 0.0}}, std::vector<double>{0.9, 0.6}));
}

TEST_CASE("selectivity from block drops") {
  SelectivityResult s = selectivity_from_drops({{0.4, 0.0}, {0.0, 0.3}});
  CHECK(s.selectivity == doctest::Approx(1.0));
  CHECK(s.blocks_used == 2);
  SelectivityResult even = selectivity_from_drops({{0.2, 0.2}, {0.1, 0.1}});
  CHECK(even.selectivity == doctest::Approx(0.5));
  SelectivityResult skip = selectivity_from_drops({{0.3, 0.1}, {0.0, 0.0}});
  CHECK(skip.blocks_used == 1);
  CHECK(skip.selectivity == doctest::Approx(0.75));
  SelectivityResult none = selectivity_from_drops({{0.0, 0.0}});
  CHECK(none.degenerate);
}

TEST_CASE("continuous selectivity on a split fixture") {
  // Two one-position agents, agent a carries attribute a.
  Fixture f;
  SenderConfig cfg;
  cfg.n_agents = 2;
  cfg.positions = 1;
  cfg.vocab = 5;
  std::vector<Comparator> cs{TabularReceiver(cfg, f.msgs, f.pairs)};
  SelectivityResult s = continuous_selectivity(cs, f.msgs, cfg, f.pairs);
  CHECK(s.blocks_used == 2);
  CHECK(s.selectivity == doctest::Approx(1.0));
}
