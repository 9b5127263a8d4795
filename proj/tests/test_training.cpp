#include "emcomm/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace emcomm;

namespace {

struct SmallGame {
  ExperimentConfig cfg;
  PreparedTask task;
  TaskContext ctx;
};

SmallGame small_game(std::size_t epochs, std::uint64_t seed) {
  SmallGame g;
  g.cfg.training.epochs = epochs;
  g.cfg.training.reset_interval = 10;
  g.cfg.training.soft_warmup = 5;
  g.task = prepare_task(g.cfg, seed);
  g.ctx.data = &g.task.data;
  g.ctx.bank = &g.task.bank;
  g.ctx.split = g.task.split;
  g.ctx.properties = all_properties(g.task.data);
  return g;
}

SenderGroup make_sender(const SmallGame& g, std::uint64_t seed) {
  Rng a = derive_rng(seed, "assignment"), s = derive_rng(seed, "sender");
  auto assignment = build_frame_assignment(g.cfg.sender.n_agents, g.task.data.frames, g.cfg.assignment, a);
  return SenderGroup(g.cfg.sender, assignment, g.task.bank.width, s);
}

// One row per scene, one block of V logits per head; the chosen symbol gets 5.
Tensor head_logits(const std::vector<std::vector<std::size_t>>& heads, std::size_t vocab) {
  const std::size_t B = heads[0].size(), W = heads.size() * vocab;
  std::vector<double> v(B * W, 0.0);
  for (std::size_t k = 0; k < heads.size(); ++k)
    for (std::size_t i = 0; i < B; ++i) v[i * W + k * vocab + heads[k][i]] = 5.0;
  return Tensor::from({B, W}, v, true);
}

}  // namespace

TEST_CASE("temperature schedule and reset calendar") {
  TrainingConfig cfg;
  CHECK(temperature_at(cfg, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(temperature_at(cfg, cfg.epochs - 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(temperature_at(cfg, (cfg.epochs - 1) / 2) < 2.0);
  for (std::size_t e = 1; e < cfg.epochs; ++e) CHECK(temperature_at(cfg, e) < temperature_at(cfg, e - 1));

  std::size_t resets = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) resets += is_reset_epoch(cfg, e);
  CHECK(resets == 9);
  CHECK_FALSE(is_reset_epoch(cfg, 0));
  CHECK(is_reset_epoch(cfg, 40));
  CHECK_FALSE(is_reset_epoch(cfg, 400));
  CHECK(resets_completed(cfg, 400) == 9);
  CHECK(resets_completed(cfg, 40) == 0);
  CHECK(resets_completed(cfg, 41) == 1);

  TrainingConfig bad = cfg;
  bad.reset_interval = 0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.temperature_end = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("entropy regularizer gates on the floor") {
  const double floor = 0.1 * std::log(5.0);
  CHECK(floor == doctest::Approx(0.1609).epsilon(1e-3));

  // Head 0 constant (entropy 0), head 1 uniform over symbols.
  std::vector<std::size_t> s0(20, 3), s1(20);
  for (std::size_t i = 0; i < 20; ++i) s1[i] = i % 5;
  Tensor both = head_logits({s0, s1}, 5);
  EntropyTerm t = entropy_regularizer({both}, 2, 5, 0.03, 0.1);
  REQUIRE(t.hard_entropy.size() == 2);
  CHECK(t.hard_entropy[0] == doctest::Approx(0.0));
  CHECK(t.hard_entropy[1] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(t.active[0]);
  CHECK_FALSE(t.active[1]);

  // Minimizing the term raises the collapsed head's entropy: the gradient on
  // the dominant logit is positive (descent lowers it).
  t.loss.backward();
  CHECK(t.loss.item() < 0.0);
  const auto g = both.grad();
  CHECK(g[3] > 0.0);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t v = 5; v < 10; ++v) CHECK(g[i * 10 + v] == 0.0);

  EntropyTerm none = entropy_regularizer({head_logits({s1, s1}, 5)}, 2, 5, 0.03, 0.1);
  CHECK(none.loss.item() == 0.0);
  CHECK_FALSE(none.loss.requires_grad());
}

TEST_CASE("short iterated learning run learns and is reproducible") {
  SmallGame g = small_game(20, 4);
  SenderGroup s1 = make_sender(g, 4), s2 = make_sender(g, 4);
  Rng r1 = derive_rng(4, "train"), r2 = derive_rng(4, "train");
  GameResult a = train_iterated_learning(g.cfg.training, g.ctx, s1, r1);
  GameResult b = train_iterated_learning(g.cfg.training, g.ctx, s2, r2);
  REQUIRE(a.logs.size() == 20);
  CHECK(a.resets == 1);
  CHECK(a.receivers.size() == 3);
  CHECK_FALSE(a.instability.occurred);
  for (std::size_t e = 0; e < 20; ++e) CHECK(a.logs[e].train_loss == b.logs[e].train_loss);
  CHECK(checksum(s1.parameters()) == checksum(s2.parameters()));

  MessageMatrix msgs = harvest_messages(s1, g.task.bank);
  CHECK(msgs.rows == g.task.data.scenes.size());
  CHECK(msgs.width == g.cfg.sender.bundle_width());
  auto pairs = all_comparison_pairs(g.task.data, g.task.split.test_ids, g.ctx.properties);
  Accuracy acc = evaluate_receivers(a.receivers, msgs, pairs);
  MESSAGE("20-epoch holdout both=" << acc.both);
  CHECK(acc.both > 0.55);
  CHECK_FALSE(messages_collapsed(msgs, g.cfg.sender));
}

TEST_CASE("lazimpa baseline trains prefix heads") {
  SmallGame g = small_game(10, 2);
  g.cfg.training.iterated_learning = false;
  SenderGroup s = make_sender(g, 2);
  Rng r = derive_rng(2, "train");
  GameResult res = train_lazimpa_baseline(g.cfg.training, g.ctx, s, r);
  REQUIRE(res.receivers.size() == 1);
  CHECK(res.receivers[0].config().prefix_heads == g.cfg.sender.positions);
  CHECK(res.resets == 0);
  CHECK(res.logs.size() == 10);

  Tensor bundle = Tensor::from({1, 20}, std::vector<double>(20, 1.0));
  Tensor m = prefix_mask_input(bundle, 2, 2, 5, 1);
  for (std::size_t j = 0; j < 20; ++j) CHECK(m[j] == ((j % 10) < 5 ? 1.0 : 0.0));
  CHECK_THROWS(prefix_mask_input(bundle, 2, 3, 5, 1));
}

TEST_CASE("collapse detection") {
  SenderConfig cfg;
  cfg.n_agents = 1;
  cfg.positions = 1;
  MessageMatrix m;
  m.rows = 3;
  m.width = 5;
  m.values = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0};
  CHECK(messages_collapsed(m, cfg));
  m.values[5] = 0;
  m.values[6] = 1;
  CHECK_FALSE(messages_collapsed(m, cfg));
  cfg.channel = ChannelMode::kContinuous;
  m.values = std::vector<double>(15, 0.2);
  CHECK(messages_collapsed(m, cfg));
  m.values[0] = 0.9;
  CHECK_FALSE(messages_collapsed(m, cfg));
}

TEST_CASE("downstream labels are a balanced median split") {
  MessageMatrix m;
  m.rows = 11;
  m.width = 1;
  std::vector<double> outcomes;
  for (std::size_t i = 0; i < 11; ++i) {
    m.values.push_back(static_cast<double>(i) / 10.0);
    outcomes.push_back(static_cast<double>(i));
  }
  DatasetSplit split;
  split.train_ids = {0, 1, 2, 3, 7, 8, 9, 10};
  split.test_ids = {4, 5, 6};
  Rng rng(1);
  DownstreamResult r = train_downstream_predictor(m, outcomes, split, 300, rng);
  CHECK(r.positives == 6);
  CHECK(r.negatives == 5);
  CHECK(r.threshold == 5.0);
  CHECK(r.train_acc >= 0.99);
  CHECK_THROWS(train_downstream_predictor(m, std::vector<double>(3, 0.0), split, 1, rng));
}

TEST_CASE("pair batches and scoring") {
  std::vector<ComparisonPair> pairs{{0, 1, {Order::kAHigher, Order::kBHigher}}, {2, 3, {Order::kBHigher, Order::kBHigher}}};
  PairBatch b = make_batch(pairs);
  CHECK(b.labels == 2);
  CHECK(b.targets == std::vector<double>{1, 0, 0, 0});
  Accuracy a = score_logits(Tensor::from({2, 2}, {1.0, -1.0, 2.0, -3.0}), b);
  CHECK(a.per_property == std::vector<double>{0.5, 1.0});
  CHECK(a.both == 0.5);
  Accuracy m = mean_accuracy({a, Accuracy{{1.0, 1.0}, 1.0, 2}});
  CHECK(m.both == 0.75);
}
