#include "emcomm/agents.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

using namespace emcomm;
namespace fs = std::filesystem;

namespace {

FeatureBank random_bank(std::size_t scenes, std::size_t frames, std::size_t width, Rng& rng) {
  FeatureBank b;
  b.frames = frames;
  b.width = width;
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t s = 0; s < scenes; ++s) {
    std::vector<double> v(frames * width);
    for (auto& x : v) x = n(rng);
    b.per_scene.push_back(v);
  }
  return b;
}

std::vector<double> values_of(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST_CASE("frame assignment partitions frames") {
  Rng rng(3);
  auto seq = build_frame_assignment(4, 8, AssignmentMode::kSequential, rng);
  REQUIRE(seq.frames.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(seq.frames[i] == std::vector<std::size_t>{2 * i, 2 * i + 1});

  auto uneven = build_frame_assignment(3, 8, AssignmentMode::kSequential, rng);
  CHECK(uneven.frames[0].size() == 3);
  CHECK(uneven.frames[1].size() == 3);
  CHECK(uneven.frames[2].size() == 2);

  auto rnd = build_frame_assignment(2, 4, AssignmentMode::kRandom, rng);
  std::set<std::size_t> seen;
  for (const auto& f : rnd.frames) {
    CHECK(f.size() == 2);
    seen.insert(f.begin(), f.end());
  }
  CHECK(seen.size() == 4);

  auto full = build_frame_assignment(3, 4, AssignmentMode::kFull, rng);
  for (const auto& f : full.frames) CHECK(f.size() == 4);

  CHECK_THROWS_AS(build_frame_assignment(5, 4, AssignmentMode::kSequential, rng), std::invalid_argument);
  CHECK_THROWS_AS(build_frame_assignment(0, 4, AssignmentMode::kSequential, rng), std::invalid_argument);
  CHECK_THROWS(parse_assignment("diagonal"));
}

TEST_CASE("agents only see their own frames") {
  Rng rng(5);
  FeatureBank bank = random_bank(6, 4, 7, rng);
  SenderConfig cfg;
  cfg.n_agents = 2;
  cfg.hidden = 16;
  SenderGroup g(cfg, build_frame_assignment(2, 4, AssignmentMode::kSequential, rng), 7, rng);
  std::vector<std::size_t> ids(6);
  std::iota(ids.begin(), ids.end(), 0);

  Tensor h = g.encode(bank, ids, 0);
  CHECK(h.shape() == Shape{6, kSceneRepr});
  auto before = g.logits(bank, ids);
  CHECK(before[0].shape() == Shape{6, cfg.agent_width()});

  // Frames 2,3 belong to agent 1 only.
  for (std::size_t s = 0; s < 6; ++s)
    for (std::size_t k = 2 * 7; k < 4 * 7; ++k) bank.per_scene[s][k] += 3.0;
  auto after = g.logits(bank, ids);
  CHECK(values_of(before[0]) == values_of(after[0]));
  CHECK(values_of(before[1]) != values_of(after[1]));
}

TEST_CASE("eval emission is deterministic one-hot") {
  Rng rng(7);
  FeatureBank bank = random_bank(5, 4, 6, rng);
  SenderConfig cfg;
  cfg.hidden = 8;
  SenderGroup g(cfg, build_frame_assignment(2, 4, AssignmentMode::kSequential, rng), 6, rng);
  std::vector<std::size_t> ids{0, 1, 2, 3, 4};
  Rng r1(1), r2(99);
  Emission a = g.emit(bank, ids, 1.0, SampleMode::kEval, r1);
  Emission b = g.emit(bank, ids, 1.0, SampleMode::kEval, r2);
  CHECK(a.bundle.shape() == Shape{5, cfg.bundle_width()});
  CHECK(values_of(a.bundle) == values_of(b.bundle));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t blk = 0; blk < cfg.n_agents * cfg.positions; ++blk) {
      double s = 0.0;
      for (std::size_t v = 0; v < cfg.vocab; ++v) {
        const double x = a.bundle[i * cfg.bundle_width() + blk * cfg.vocab + v];
        CHECK((x == 0.0 || x == 1.0));
        s += x;
      }
      CHECK(s == 1.0);
    }
  auto sym = g.symbols(bank, ids);
  REQUIRE(sym.size() == 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < sym[i].size(); ++k) CHECK(a.bundle[i * cfg.bundle_width() + k * cfg.vocab + sym[i][k]] == 1.0);
}

TEST_CASE("continuous channel is bounded") {
  Tensor z = Tensor::from({1, 3}, {0.0, 50.0, -50.0});
  Tensor c = continuous_channel(z);
  CHECK(c[0] == 0.0);
  CHECK(c[1] <= 1.0);
  CHECK(c[2] >= -1.0);
  Rng rng(2);
  Tensor big = Tensor::from({2, 2}, {3.0, -0.5, 0.25, -9.0});
  for (double v : continuous_channel(big).values()) CHECK((v > -1.0 && v < 1.0));
  CHECK(parse_channel("continuous") == ChannelMode::kContinuous);
}

TEST_CASE("receiver shapes and reinitialization") {
  Rng rng(11);
  ReceiverConfig cfg;
  cfg.input_width = 20;
  cfg.outputs = 2;
  Receiver r(cfg, rng);
  Tensor x = Tensor::from({3, 20}, std::vector<double>(60, 0.5));
  Tensor p = r.predict(x);
  CHECK(p.shape() == Shape{3, 2});
  for (double v : p.values()) CHECK((v > 0.0 && v < 1.0));
  CHECK_THROWS_AS(r.forward(Tensor::from({3, 19}, std::vector<double>(57, 0.0))), std::invalid_argument);

  const auto before = checksum(r.parameters());
  r.reinitialize(rng);
  CHECK(checksum(r.parameters()) != before);

  Tensor a = Tensor::from({1, 2}, {1.0, 2.0}), b = Tensor::from({1, 3}, {3.0, 4.0, 5.0});
  CHECK(values_of(pair_input(a, b)) == std::vector<double>{1, 2, 3, 4, 5});

  ReceiverConfig multi = cfg;
  multi.prefix_heads = 3;
  Receiver m(multi, rng);
  CHECK(m.forward_head(x, 0).shape() == Shape{3, 2});
  CHECK(values_of(m.forward_head(x, 2)) == values_of(m.forward(x)));
  multi.prefix_heads = 0;
  CHECK_THROWS(Receiver(multi, rng));
}

TEST_CASE("sender encoders copy from the oracle") {
  Rng rng(13);
  Oracle o(6, 8, 2, rng);
  SenderConfig cfg;
  cfg.hidden = 8;
  SenderGroup g(cfg, build_frame_assignment(2, 4, AssignmentMode::kSequential, rng), 6, rng);
  g.copy_encoders_from(o.encoder());
  for (std::size_t i = 0; i < 2; ++i) {
    auto src = o.encoder().parameters();
    auto dst = g.agent(i).encoder().parameters();
    REQUIRE(src.size() == dst.size());
    for (std::size_t j = 0; j < src.size(); ++j) CHECK(values_of(src[j]->tensor) == values_of(dst[j]->tensor));
  }
  SenderConfig wide = cfg;
  wide.hidden = 16;
  SenderGroup w(wide, build_frame_assignment(2, 4, AssignmentMode::kSequential, rng), 6, rng);
  CHECK_THROWS_AS(w.copy_encoders_from(o.encoder()), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(17);
  SenderConfig cfg;
  cfg.hidden = 8;
  SenderGroup g(cfg, build_frame_assignment(2, 4, AssignmentMode::kSequential, rng), 6, rng);
  fs::path dir = fs::temp_directory_path() / "emcomm_test_ckpt";
  fs::remove_all(dir);
  save_checkpoint(dir, {{"kind", "sender"}, {"agents", "2"}}, g.parameters());

  Rng other(18);
  SenderGroup h(cfg, build_frame_assignment(2, 4, AssignmentMode::kSequential, other), 6, other);
  CHECK(checksum(h.parameters()) != checksum(g.parameters()));
  KeyValues kv = load_checkpoint(dir, h.parameters());
  CHECK(kv.at("kind") == "sender");
  CHECK(checksum(h.parameters()) == checksum(g.parameters()));

  SenderConfig three = cfg;
  three.n_agents = 3;
  SenderGroup t(three, build_frame_assignment(3, 4, AssignmentMode::kSequential, other), 6, other);
  CHECK_THROWS(load_checkpoint(dir, t.parameters()));
  CHECK_THROWS(load_checkpoint(dir / "missing", h.parameters()));
}

TEST_CASE("frozen encoder is fixed and deterministic") {
  Rng a(21), b(21);
  FrozenRandomEncoder e1(2, a), e2(2, b);
  CHECK(checksum(e1.parameters()) == checksum(e2.parameters()));
  for (auto* p : e1.parameters()) CHECK_FALSE(p->trainable);
  std::vector<double> rows{0.1, -0.2, 0.3, 0.4};
  auto out = e1.encode(rows, 2);
  CHECK(out.size() == 2 * kFrozenWidth);
  CHECK(out == e2.encode(rows, 2));
  CHECK_THROWS(e1.encode(rows, 3));
}
