// emcomm: dataset generation, training runs, sweeps, analyses and reports.
#include "emcomm/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace emcomm;

namespace {

// Collects --<key> overrides for every config field.
struct ConfigFlags {
  std::vector<std::string> files;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app, bool many_files) {
    if (many_files)
      app->add_option("-c,--config", files, "config file(s); one condition each")->check(CLI::ExistingFile);
    else
      app->add_option("-c,--config", files, "config file")->check(CLI::ExistingFile)->expected(0, 1);
    for (const auto& k : config_keys()) app->add_option("--" + k, values[k], "override " + k);
  }

  std::vector<ExperimentConfig> resolve() const {
    std::vector<ExperimentConfig> out;
    if (files.empty()) out.emplace_back();
    for (const auto& f : files) {
      out.push_back(ExperimentConfig::load(f));
      if (out.back().name == "default") out.back().name = fs::path(f).stem().string();
    }
    for (auto& c : out) {
      for (const auto& [k, v] : values)
        if (!v.empty()) c.set(k, v);
      c.validate();
    }
    return out;
  }
};

void print_kv(const KeyValues& kv) {
  for (const auto& [k, v] : kv) std::cout << k << '=' << v << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emergent communication about latent physical properties"};
  app.require_subcommand(1);
  std::string store_flag;
  app.add_option("--store", store_flag, "run store root (default: $EMCOMM_STORE or ./emcomm_store)");

  auto* gen = app.add_subcommand("gen", "generate a dataset");
  std::string domain = "spring_mass", gen_out, gen_manifest, gen_features;
  std::size_t spc = 12, dtype = 8;
  std::uint64_t data_seed = 0;
  gen->add_option("--domain", domain, "spring_mass | ramp | collision | abstract");
  gen->add_option("--scenes_per_cell", spc);
  gen->add_option("--data_seed", data_seed);
  gen->add_option("-o,--out", gen_out, "binary dataset path")->required();
  gen->add_option("--manifest", gen_manifest, "also write a scene manifest");
  gen->add_option("--features", gen_features, "also write an external-feature file");
  gen->add_option("--dtype", dtype, "feature width in bytes (4 or 8)")->check(CLI::IsMember({4, 8}));

  auto* train = app.add_subcommand("train", "run one (config, seed)");
  ConfigFlags train_flags;
  train_flags.attach(train, false);
  std::uint64_t train_seed = 1;
  train->add_option("--seed", train_seed);

  auto* sw = app.add_subcommand("sweep", "run every seed of every condition");
  ConfigFlags sweep_flags;
  sweep_flags.attach(sw, true);
  std::size_t workers = 1;
  std::string sweep_report;
  sw->add_option("-j,--workers", workers)->check(CLI::PositiveNumber);
  sw->add_option("--report", sweep_report, "write report files to this directory");

  auto* an = app.add_subcommand("analyze", "re-run interventions and transfer on a saved run");
  std::string an_condition;
  std::uint64_t an_seed = 1;
  an->add_option("--condition", an_condition)->required();
  an->add_option("--seed", an_seed);

  auto* rep = app.add_subcommand("report", "tables and plot data from the store");
  std::vector<std::string> rep_conditions;
  std::string rep_out = "report";
  rep->add_option("--condition", rep_conditions, "conditions to include (default: all)");
  rep->add_option("-o,--out", rep_out);

  auto* ing = app.add_subcommand("ingest", "validate external features against a manifest");
  std::string ing_features, ing_manifest, ing_out;
  ing->add_option("--features", ing_features)->required()->check(CLI::ExistingFile);
  ing->add_option("--manifest", ing_manifest)->required()->check(CLI::ExistingFile);
  ing->add_option("-o,--out", ing_out, "write the ingested dataset in binary form");

  CLI11_PARSE(app, argc, argv);
  const fs::path store = store_flag.empty() ? store_root() : fs::path(store_flag);

  try {
    if (*gen) {
      Dataset d = make_dataset(parse_domain(domain), spc, data_seed);
      write_dataset(gen_out, d);
      if (!gen_manifest.empty()) write_manifest(gen_manifest, d);
      if (!gen_features.empty()) write_external_features(gen_features, d, dtype);
      std::cout << "scenes=" << d.scenes.size() << " frames=" << d.frames << " dims=" << d.dims << '\n';
    } else if (*train) {
      auto cfgs = train_flags.resolve();
      ExperimentRecord rec = run_experiment(cfgs.front(), train_seed, store);
      print_kv(rec.summary(cfgs.front()));
      return rec.complete ? 0 : 1;
    } else if (*sw) {
      auto cfgs = sweep_flags.resolve();
      for (const auto& c : cfgs)
        if (c.seeds.size() < 2) throw std::invalid_argument("sweep: condition '" + c.name + "' needs at least 2 seeds");
      SweepSummary s = sweep(cfgs, store, workers);
      for (const auto& c : s.conditions)
        std::cout << c.condition << " n=" << c.seeds.size() << " holdout=" << c.holdout_stats.mean << " sd="
                  << c.holdout_stats.stddev << " posdis=" << c.posdis_stats.mean << " compositional="
                  << c.compositional_count << '/' << c.posdis.size() << '\n';
      for (const auto& c : s.comparisons)
        std::cout << c.a << " vs " << c.b << " [" << c.measure << "] t=" << c.welch.t << " p=" << c.welch.p
                  << " d=" << c.cohens_d << " n=" << c.n_a << '/' << c.n_b << '\n';
      if (!sweep_report.empty()) write_report(s, store, sweep_report);
    } else if (*an) {
      ExperimentConfig cfg = config_from_meta(run_meta_path(store, an_condition, an_seed));
      RestoredRun run = restore_run(cfg, an_seed, store);
      ExperimentRecord rec = analyze_restored(cfg, an_seed, run);
      print_kv(rec.summary(cfg));
      return rec.complete ? 0 : 1;
    } else if (*rep) {
      SweepSummary s = summarize_store(store, rep_conditions);
      add_comparisons(s);
      write_report(s, store, rep_out);
      std::ifstream t(fs::path(rep_out) / "table.txt");
      std::cout << t.rdbuf();
    } else if (*ing) {
      Dataset d = ingest_external_features(ing_features, ing_manifest);
      if (!ing_out.empty()) write_dataset(ing_out, d);
      std::cout << "domain=" << d.domain << " scenes=" << d.scenes.size() << " frames=" << d.frames
                << " dims=" << d.dims << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
