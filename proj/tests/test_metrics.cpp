#include "emcomm/metrics.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace emcomm;
namespace fs = std::filesystem;

namespace {

// Full 5x5 attribute grid; the symbol row is a function of the two attributes.
ProtocolTable grid_table(std::size_t agents, std::size_t positions,
                         const std::function<std::vector<std::size_t>(std::size_t, std::size_t)>& msg) {
  ProtocolTable t;
  t.vocab = 5;
  t.bins = 5;
  t.agents = agents;
  t.positions = positions;
  t.attribute_names = {"stiffness", "damping"};
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      t.symbols.push_back(msg(a, b));
      t.attributes.push_back({a, b});
    }
  return t;
}

}  // namespace

TEST_CASE("metrics agree with brute-force oracles on random tables") {
  Rng rng(20240601);
  for (int i = 0; i < 200; ++i) {
    ProtocolTable t = oracle::random_table(rng);
    for (std::size_t k = 0; k < t.message_length(); ++k)
      for (std::size_t j = 0; j < t.attribute_count(); ++j)
        CHECK(std::abs(discrete_mi(t, k, j) - oracle::mi(oracle::column(t.symbols, k), oracle::column(t.attributes, j))) <= 1e-12);
    CHECK(std::abs(posdis(t) - oracle::posdis(t)) <= 1e-12);
    CHECK(std::abs(bosdis(t) - oracle::bosdis(t)) <= 1e-12);
  }
}

TEST_CASE("topsim agrees with the brute-force oracle") {
  Rng rng(77);
  for (int i = 0; i < 50; ++i) {
    ProtocolTable t = oracle::random_table(rng, 40);
    TopSimResult r = topsim(t);
    CHECK(std::abs(r.value - oracle::topsim(t)) <= 1e-9);
    CHECK(r.pairs == t.rows() * (t.rows() - 1) / 2);
  }
}

TEST_CASE("reference protocols") {
  SUBCASE("perfect positional code") {
    ProtocolTable t = grid_table(1, 2, [](std::size_t a, std::size_t b) { return std::vector<std::size_t>{a, b}; });
    CHECK(posdis(t) >= 0.999);
    CHECK(discrete_mi(t, 0, 0) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK(discrete_mi(t, 0, 1) == doctest::Approx(0.0));
    CHECK(topsim(t).value > 0.5);
    // Shared symbol inventory: bag-of-symbols counts cannot tell the positions apart.
    CHECK(bosdis(t) < posdis(t));
  }
  SUBCASE("constant messages") {
    ProtocolTable t = grid_table(1, 2, [](std::size_t, std::size_t) { return std::vector<std::size_t>{1, 1}; });
    CHECK(posdis(t) == 0.0);
    CHECK(bosdis(t) == 0.0);
    TopSimResult r = topsim(t);
    CHECK(r.degenerate);
    CHECK(r.value == 0.0);
  }
  SUBCASE("holistic bijection") {
    // Invertible mod 5, yet each symbol is independent of each single attribute.
    ProtocolTable t = grid_table(1, 2, [](std::size_t a, std::size_t b) {
      return std::vector<std::size_t>{(a + b) % 5, (a + 2 * b) % 5};
    });
    std::vector<std::size_t> msg, cell;
    for (std::size_t i = 0; i < t.rows(); ++i) {
      msg.push_back(t.symbols[i][0] * 5 + t.symbols[i][1]);
      cell.push_back(t.attributes[i][0] * 5 + t.attributes[i][1]);
    }
    CHECK(mutual_information(msg, cell) == doctest::Approx(std::log(25.0)).epsilon(1e-12));
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(discrete_mi(t, k, j)) <= 1e-12);
    CHECK(posdis(t) <= 1e-6);
  }
  SUBCASE("split agents are specialized") {
    ProtocolTable t = grid_table(2, 1, [](std::size_t a, std::size_t b) { return std::vector<std::size_t>{a, b}; });
    CHECK(specialization_ratio(t, 0) >= 0.999);
    CHECK(specialization_ratio(t, 1) >= 0.999);
    CHECK_THROWS(specialization_ratio(t, 2));
    MetricReport r = compute_report(t);
    CHECK(r.compositional);
    CHECK(r.specialization.size() == 2);
    CHECK(r.mi.size() == 2);
  }
}

TEST_CASE("mutual information edge cases") {
  std::vector<std::size_t> x{0, 1, 2, 3, 4}, c(5, 2);
  CHECK(mutual_information(x, x) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(mutual_information(x, c) == 0.0);
  CHECK(mutual_information(std::vector<std::size_t>{}, std::vector<std::size_t>{}) == 0.0);
  CHECK_THROWS(mutual_information(x, std::vector<std::size_t>{1, 2}));
}

TEST_CASE("ranks and correlations") {
  std::vector<double> v{3.0, 1.0, 3.0, 2.0};
  CHECK(average_ranks(v) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
  bool deg = false;
  std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6, 8}, flat{1, 1, 1, 1};
  CHECK(pearson(a, b, &deg) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_FALSE(deg);
  CHECK(spearman(a, flat, &deg) == 0.0);
  CHECK(deg);
}

TEST_CASE("compositional rate is strict") {
  std::vector<double> p{0.1, 0.4, 0.41, 0.9};
  CHECK(compositional_rate(p) == 0.5);
  CHECK(compositional_rate(p, 0.3) == 0.75);
  CHECK(compositional_rate(std::vector<double>{}) == 0.0);
}

TEST_CASE("protocol table and report round trip") {
  Rng rng(5);
  ProtocolTable t = oracle::random_table(rng, 30);
  fs::path p = fs::temp_directory_path() / "emcomm_test_protocol.csv";
  t.write_csv(p);
  ProtocolTable u = ProtocolTable::read_csv(p);
  CHECK(u.symbols == t.symbols);
  CHECK(u.attributes == t.attributes);
  CHECK(u.attribute_names == t.attribute_names);
  CHECK(u.vocab == t.vocab);
  CHECK(u.positions == t.positions);

  MetricReport r = compute_report(t, 0.4, 3);
  MetricReport s = MetricReport::parse(r.serialize());
  CHECK(s.posdis == r.posdis);
  CHECK(s.bosdis == r.bosdis);
  CHECK(s.topsim == r.topsim);
  CHECK(s.mi == r.mi);
  CHECK(s.serialize() == r.serialize());

  ProtocolTable bad = t;
  bad.symbols[0][0] = 7;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("topsim subsampling is seeded") {
  Rng rng(8);
  ProtocolTable t = oracle::random_table(rng, 200);
  while (t.rows() < 120) t = oracle::random_table(rng, 200);
  TopSimResult a = topsim(t, 4, 60), b = topsim(t, 4, 60);
  CHECK(a.value == b.value);
  CHECK(a.pairs == 60 * 59 / 2);
}
