// Acceptance run: one PASS/FAIL line per criterion. Trained criteria read the
// sweep store, running whatever (config, seed) pairs are missing first.
#include "emcomm/harness.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace emcomm;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kMetricTol = 1e-12;
constexpr double kTopSimTol = 1e-9;
constexpr double kMiTol = 1e-9;
constexpr double kMomentumTol = 1e-12;
constexpr double kOdeTol = 1e-6;
constexpr double kHoldoutMin = 0.88;
constexpr double kOracleMin = 0.93;
constexpr double kSeedSeconds = 300.0;
constexpr double kSweepSeconds = 3000.0;
constexpr double kScalingGap = 0.20;
constexpr double kHolisticMax = 0.2;
constexpr double kDropRatio = 3.0;
constexpr double kLazImpaMax = 0.20;
constexpr std::size_t kPairedWins = 7;
constexpr double kChanceBand = 0.10;
constexpr double kFixtureMin = 0.99;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Exact implementation checks fail the run. The trained criteria are empirical
// outcomes of the recipe and are reported without changing the exit status.
const std::set<int> kExact{1, 2, 3, 4, 13};

int failures = 0;
int exact_failures = 0;
int errors = 0;
std::ofstream results;

void line(const std::string& s) {
  std::printf("%s\n", s.c_str());
  std::fflush(stdout);
  if (results) results << s << '\n' << std::flush;
}

void report(int id, bool pass, const std::string& detail) {
  if (!pass) {
    ++failures;
    if (kExact.count(id)) ++exact_failures;
  }
  char head[32];
  std::snprintf(head, sizeof head, "criterion %2d: %s  ", id, pass ? "PASS" : "FAIL");
  line(head + detail);
}

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- store access -------------------------------------------------------------

struct Store {
  fs::path root;
  std::map<std::string, ExperimentConfig> configs;

  KeyValues meta(const std::string& cond, std::uint64_t seed) const {
    auto m = read_run_meta(root, cond, seed);
    if (!m) throw std::runtime_error("missing run " + cond + " seed " + std::to_string(seed));
    return *m;
  }
  double value(const std::string& cond, std::uint64_t seed, const std::string& key) const {
    return std::stod(meta(cond, seed).at(key));
  }
  const std::vector<std::uint64_t>& seeds(const std::string& cond) const { return configs.at(cond).seeds; }
  std::vector<double> column(const std::string& cond, const std::string& key) const {
    std::vector<double> out;
    for (auto s : seeds(cond)) out.push_back(value(cond, s, key));
    return out;
  }
  double rate(const std::string& cond) const {
    return compositional_rate(column(cond, "posdis"), configs.at(cond).posdis_threshold);
  }
};

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---- criteria ------------------------------------------------------------------

void gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t bad = 0;
  std::string worst_op;
  for (const auto& r : gradcheck::run_all(100, 20240101)) {
    bad += r.failures;
    if (r.worst > worst) {
      worst = r.worst;
      worst_op = r.name;
    }
  }
  const double secs = seconds_since(t0);
  report(1, bad == 0 && worst < kGradTol && secs < 60.0,
         "max rel err " + num(worst) + " (" + worst_op + "), " + std::to_string(bad) + " failing instances, " +
             num(secs, 3) + " s");
}

void metric_oracles() {
  const auto t0 = Clock::now();
  Rng rng(424242);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    ProtocolTable t = oracle::random_table(rng);
    for (std::size_t k = 0; k < t.message_length(); ++k)
      for (std::size_t j = 0; j < t.attribute_count(); ++j)
        worst = std::max(worst, std::abs(discrete_mi(t, k, j) -
                                         oracle::mi(oracle::column(t.symbols, k), oracle::column(t.attributes, j))));
    worst = std::max(worst, std::abs(posdis(t) - oracle::posdis(t)));
    worst = std::max(worst, std::abs(bosdis(t) - oracle::bosdis(t)));
  }
  double worst_ts = 0.0;
  for (int i = 0; i < 50; ++i) {
    ProtocolTable t = oracle::random_table(rng, 40);
    worst_ts = std::max(worst_ts, std::abs(topsim(t).value - oracle::topsim(t)));
  }
  const double secs = seconds_since(t0);
  report(2, worst <= kMetricTol && worst_ts <= kTopSimTol && secs < 60.0,
         "mi/posdis/bosdis max diff " + num(worst) + ", topsim max diff " + num(worst_ts) + ", " + num(secs, 3) + " s");
}

void fixtures() {
  ProtocolTable pos;
  pos.vocab = pos.bins = 5;
  pos.positions = 2;
  pos.attribute_names = {"a", "b"};
  ProtocolTable flat = pos;
  std::vector<std::size_t> x, y;
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      pos.symbols.push_back({a, b});
      pos.attributes.push_back({a, b});
      flat.symbols.push_back({0, 0});
      flat.attributes.push_back({a, b});
      x.push_back(a);
      y.push_back((3 * a + 1) % 5);  // bijection
    }
  const double p_pos = posdis(pos), p_flat = posdis(flat);
  const double mi_bij = mutual_information(x, y);

  Rng rng(31);
  std::uniform_real_distribution<double> r(0.2, 6.0), e(0.0, 1.0), v(1.5, 2.5);
  double momentum = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double rr = r(rng), ee = e(rng), vv = v(rng);
    auto p = collision_velocities(vv, rr, ee);
    momentum = std::max(momentum, std::abs(vv - (p.v_a + rr * p.v_b)));
  }

  // Closed form against the differential equation and an RK4 integration.
  Dataset d = make_dataset(Domain::kSpringMass, 1, 5);
  double ode = 0.0;
  for (const auto& sc : d.scenes) {
    const double k = sc.values[0], b = sc.values[1], A = sc.feature(0, 0);
    for (double t : kSpringTimes) {
      auto s = spring_state(k, b, 1.0, A, t);
      ode = std::max(ode, std::abs(s.a + b * s.v + k * s.x));
      auto ref = oracle::rk4_spring(k, b, A, spring_state(k, b, 1.0, A, 0.0).v, t, 1e-4);
      ode = std::max({ode, std::abs(s.x - ref[0]), std::abs(s.v - ref[1])});
    }
  }
  const bool ok = p_pos >= 0.999 && p_flat == 0.0 && std::abs(mi_bij - std::log(5.0)) <= kMiTol &&
                  momentum <= kMomentumTol && ode <= kOdeTol;
  report(3, ok,
         "positional posdis " + num(p_pos, 6) + ", constant posdis " + num(p_flat) + ", bijection MI - ln5 " +
             num(mi_bij - std::log(5.0)) + ", momentum " + num(momentum) + ", spring residual " + num(ode));
}

void latin_square() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Dataset d = make_dataset(Domain::kSpringMass, 12, 0);
    Rng rng = derive_rng(seed, "split");
    DatasetSplit s = latin_square_split(d, rng);
    std::set<std::size_t> rows, cols;
    for (const auto& c : s.heldout_cells) {
      rows.insert(c[0]);
      cols.insert(c[1]);
    }
    const bool good = d.scenes.size() == 300 && s.train_ids.size() == 240 && s.test_ids.size() == 60 &&
                      s.heldout_cells.size() == 5 && rows.size() == 5 && cols.size() == 5;
    if (!good) {
      ok = false;
      detail = "seed " + std::to_string(seed) + ": " + std::to_string(s.train_ids.size()) + "/" +
               std::to_string(s.test_ids.size());
    }
  }
  report(4, ok, ok ? "240/60 with one held-out cell per row and column on 20 split seeds" : detail);
}

void headline(const Store& st) {
  const auto h = st.column("il_n2", "holdout_both"), o = st.column("il_n2", "oracle_holdout_both");
  const auto rt = st.column("il_n2", "runtime_seconds");
  const double slowest = *std::max_element(rt.begin(), rt.end());
  const double total = std::accumulate(rt.begin(), rt.end(), 0.0);
  const SampleStats hs = describe(h);
  report(5, hs.mean >= kHoldoutMin && mean(o) >= kOracleMin && slowest <= kSeedSeconds && total <= kSweepSeconds,
         "holdout " + num(hs.mean) + " +- " + num(hs.stddev, 3) + " (n=" + std::to_string(h.size()) + "), oracle " +
             num(mean(o)) + ", slowest seed " + num(slowest, 4) + " s, total " + num(total, 5) + " s");
}

void scaling(const Store& st) {
  const double r1 = st.rate("il_n1"), r2 = st.rate("il_n2"), r4 = st.rate("il_n4");
  report(6, r1 <= r2 && r2 <= r4 && r4 >= r2 + kScalingGap - 1e-12,
         "compositional rate N=1 " + num(r1) + ", N=2 " + num(r2) + ", N=4 " + num(r4));
}

void bandwidth(const Store& st) {
  const double single = st.rate("il_n1_k4"), four = st.rate("il_n4");
  report(7, single < four, "1x(K=4) rate " + num(single) + " vs 4x(K=2) rate " + num(four));
}

void holistic(const Store& st) {
  const auto p = st.column("holistic", "posdis");
  const double worst = *std::max_element(p.begin(), p.end());
  report(8, worst < kHolisticMax, "max posdis " + num(worst) + " over " + std::to_string(p.size()) + " seeds");
}

void intervention(const Store& st) {
  // Exact part: lookup-table comparator on the positional fixture.
  Dataset fx = grid_fixture(5);
  MessageMatrix msgs = positional_messages(fx, 5);
  SenderConfig cfg = positional_fixture_config(2, 5);
  std::vector<std::size_t> ids(fx.scenes.size());
  std::iota(ids.begin(), ids.end(), 0);
  auto pairs = all_comparison_pairs(fx, ids, all_properties(fx));
  std::vector<Comparator> cs{TabularReceiver(cfg, msgs, pairs)};
  const double l = std::log(5.0);
  RelevanceSummary rel = relevance_drops(cs, msgs, cfg, {{l, 0.0}, {0.0, l}}, pairs);
  const bool exact = rel.relevant_drop > 0.0 && rel.irrelevant_drop == 0.0;

  std::vector<double> relevant, irrelevant;
  for (auto s : st.seeds("il_n2")) {
    if (st.value("il_n2", s, "posdis") <= st.configs.at("il_n2").posdis_threshold) continue;
    relevant.push_back(st.value("il_n2", s, "intervention.relevant_drop"));
    irrelevant.push_back(st.value("il_n2", s, "intervention.irrelevant_drop"));
  }
  const double mr = mean(relevant), mi = mean(irrelevant);
  const bool trained = !relevant.empty() && mr > 0.0 && mr >= kDropRatio * mi;
  report(9, exact && trained,
         "fixture relevant " + num(rel.relevant_drop) + " / irrelevant " + num(rel.irrelevant_drop) + "; trained (" +
             std::to_string(relevant.size()) + " compositional seeds) relevant " + num(mr) + " / irrelevant " +
             num(mi));
}

void lazimpa(const Store& st) {
  const double lz = st.rate("lazimpa_n2"), il = st.rate("il_n2");
  report(10, lz <= kLazImpaMax && lz < il, "LazImpa rate " + num(lz) + " vs IL rate " + num(il));
}

void transfer(const Store& st) {
  std::size_t wins = 0, paired = 0;
  std::vector<double> reg, chance;
  for (auto s : st.seeds("il_n2")) {
    const double comp = st.value("il_n2", s, "transfer.holdout");
    const double hol = st.value("holistic", s, "transfer.holdout");
    ++paired;
    wins += comp > hol;
    if (st.value("il_n2", s, "posdis") > st.configs.at("il_n2").posdis_threshold) {
      reg.push_back(st.value("il_n2", s, "regression.holdout"));
      chance.push_back(st.value("il_n2", s, "regression.chance"));
    }
  }
  Dataset fx = grid_fixture(5);
  MessageMatrix msgs = positional_messages(fx, 5);
  Rng split_rng(9), rng(4);
  DatasetSplit split = latin_square_split(fx, split_rng);
  RegressionResult abs = single_message_regression(msgs, positional_fixture_config(2, 5), 0, fx, split, 1, 300, rng);
  const double gap = std::abs(mean(reg) - mean(chance));
  report(11, wins >= kPairedWins && !reg.empty() && gap <= kChanceBand && abs.holdout_acc >= kFixtureMin,
         "transfer wins " + std::to_string(wins) + "/" + std::to_string(paired) + "; regression " + num(mean(reg)) +
             " vs chance " + num(mean(chance)) + " over " + std::to_string(reg.size()) +
             " compositional seeds; absolute fixture " + num(abs.holdout_acc));
}

void channels(const Store& st) {
  std::size_t wins = 0, paired = 0, inst_d = 0, inst_c = 0;
  for (auto s : st.seeds("il_n2")) {
    const auto d = st.meta("il_n2", s), c = st.meta("continuous_n2", s);
    inst_d += d.at("instability") != "none";
    inst_c += c.at("instability") != "none";
    if (!d.count("selectivity") || !c.count("selectivity")) continue;
    ++paired;
    wins += std::stod(d.at("selectivity")) > std::stod(c.at("selectivity"));
  }
  report(12, wins >= kPairedWins && inst_c >= inst_d,
         "discrete selectivity higher on " + std::to_string(wins) + "/" + std::to_string(paired) +
             " seeds; instabilities continuous " + std::to_string(inst_c) + " vs discrete " + std::to_string(inst_d));
}

void determinism(const Store& st) {
  const std::string cond = "il_n2";
  const std::uint64_t seed = st.seeds(cond).front();
  const std::string stored = slurp(st.root / cond / ("run." + std::to_string(seed) + ".report"));
  ExperimentRecord rec = run_experiment(st.configs.at(cond), seed);
  const std::string fresh = rec.report.serialize();
  report(13, rec.complete && !stored.empty() && fresh == stored,
         cond + " seed " + std::to_string(seed) + " re-run from scratch: report " +
             (fresh == stored ? "byte-identical" : "differs") + " (" + std::to_string(fresh.size()) + " bytes)");
}

// Training invariants read from the per-epoch logs. Printed, not counted.
void training_properties(const Store& st) {
  const std::string cond = "il_n2";
  const std::size_t interval = st.configs.at(cond).training.reset_interval;
  std::size_t improved = 0, seeds = 0, held = 0, active = 0;
  for (auto s : st.seeds(cond)) {
    std::ifstream in(st.root / cond / ("run." + std::to_string(s) + ".epochs.csv"));
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
      std::stringstream hs(line);
      for (std::string c; std::getline(hs, c, ',');) header.push_back(c);
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
      std::stringstream ls(line);
      std::vector<double> r;
      for (std::string c; std::getline(ls, c, ',');) r.push_back(std::stod(c));
      rows.push_back(r);
    }
    auto col = [&](const std::string& name) {
      return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
    };
    if (rows.size() <= interval) continue;
    ++seeds;
    improved += rows.back()[col("train_both")] > rows[interval - 1][col("train_both")];
    for (std::size_t h = 0; col("regularizer." + std::to_string(h)) < header.size(); ++h) {
      const std::size_t on = col("regularizer." + std::to_string(h)), ent = col("entropy." + std::to_string(h));
      for (std::size_t e = 0; e + 1 < rows.size(); ++e) {
        if (rows[e][on] != 1.0) continue;
        ++active;
        held += rows[e + 1][ent] >= rows[e][ent];
      }
    }
  }
  line("property: final generation beats first generation on " + std::to_string(improved) + "/" +
       std::to_string(seeds) + " seeds (need 80%)");
  line("property: entropy did not fall after " + std::to_string(held) + "/" + std::to_string(active) +
       " regularizer activations (need 90%)");
}

}  // namespace

int main() {
  results.open(EMCOMM_ACCEPTANCE_RESULTS);
  gradients();
  metric_oracles();
  fixtures();
  latin_square();

  Store st;
  const char* env = std::getenv("EMCOMM_STORE");
  st.root = env && *env ? fs::path(env) : fs::path(EMCOMM_ACCEPTANCE_STORE);
  std::vector<ExperimentConfig> cfgs;
  for (const auto& e : fs::directory_iterator(EMCOMM_ACCEPTANCE_CONFIGS))
    if (e.path().extension() == ".cfg") cfgs.push_back(ExperimentConfig::load(e.path()));
  std::sort(cfgs.begin(), cfgs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  for (const auto& c : cfgs) st.configs[c.name] = c;
  const char* w = std::getenv("EMCOMM_WORKERS");
  const std::size_t workers = w && *w ? std::stoul(w) : 1;
  line("store " + st.root.string() + ", " + std::to_string(cfgs.size()) + " conditions");
  sweep(cfgs, st.root, workers);

  using Check = void (*)(const Store&);
  const std::pair<int, Check> trained[] = {{5, headline}, {6, scaling},  {7, bandwidth}, {8, holistic},
                                           {9, intervention}, {10, lazimpa}, {11, transfer}, {12, channels},
                                           {13, determinism}};
  for (const auto& [id, fn] : trained) {
    try {
      fn(st);
    } catch (const std::exception& e) {
      ++errors;
      report(id, false, std::string("error: ") + e.what());
    }
  }
  try {
    training_properties(st);
  } catch (const std::exception& e) {
    line(std::string("property: error ") + e.what());
  }
  line(std::to_string(failures) + " criteria failed (" + std::to_string(exact_failures) + " exact, " +
       std::to_string(errors) + " evaluation errors)");
  return exact_failures == 0 && errors == 0 ? 0 : 1;
}
