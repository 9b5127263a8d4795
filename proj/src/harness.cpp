#include "emcomm/harness.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace fs = std::filesystem;

namespace emcomm {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: '" + key + "' expects a boolean, got '" + v + "'");
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-')
    throw std::invalid_argument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
  return x;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Write to a sibling temp file, then rename over the target.
void write_atomic(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << content;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

KeyValues read_kv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  KeyValues kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string kv_text(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

}  // namespace

Method parse_method(const std::string& s) {
  if (s == "il" || s == "iterated_learning") return Method::kIteratedLearning;
  if (s == "lazimpa") return Method::kLazImpa;
  throw std::invalid_argument("unknown method '" + s + "'");
}

std::string method_name(Method m) { return m == Method::kIteratedLearning ? "il" : "lazimpa"; }

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      out.push_back(parse_size("seeds", part));
      continue;
    }
    const std::size_t lo = parse_size("seeds", trim(part.substr(0, dash)));
    const std::size_t hi = parse_size("seeds", trim(part.substr(dash + 1)));
    if (hi < lo) throw std::invalid_argument("seeds: descending range '" + part + "'");
    for (std::size_t x = lo; x <= hi; ++x) out.push_back(x);
  }
  if (out.empty()) throw std::invalid_argument("seeds: empty list");
  return out;
}

// ---- config ----------------------------------------------------------------------

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "name", "domain", "scenes_per_cell", "data_seed", "features", "manifest", "frozen_encoder", "n_agents",
      "positions", "vocab", "hidden", "channel", "assignment", "method", "epochs", "batch_size", "sender_lr",
      "receiver_lr", "population_size", "reset_interval", "temperature_start", "temperature_end", "soft_warmup",
      "entropy_coeff", "entropy_floor_fraction", "grad_clip", "oracle_epochs", "oracle_lr", "pairs_per_train_scene",
      "iterated_learning", "lazimpa_lambda", "posdis_threshold", "transfer_epochs", "regression_epochs",
      "regression_agent", "regression_attribute", "downstream_epochs", "save_checkpoints", "seeds"};
  return keys;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const std::string& v = value;
  TrainingConfig& t = training;
  if (key == "name") name = v;
  else if (key == "domain") domain = v;
  else if (key == "scenes_per_cell") scenes_per_cell = parse_size(key, v);
  else if (key == "data_seed") data_seed = parse_size(key, v);
  else if (key == "features") features_path = v;
  else if (key == "manifest") manifest_path = v;
  else if (key == "frozen_encoder") frozen_encoder = v;
  else if (key == "n_agents") sender.n_agents = parse_size(key, v);
  else if (key == "positions" || key == "K") sender.positions = parse_size(key, v);
  else if (key == "vocab" || key == "V") sender.vocab = parse_size(key, v);
  else if (key == "hidden") sender.hidden = parse_size(key, v);
  else if (key == "channel") sender.channel = parse_channel(v);
  else if (key == "assignment") assignment = parse_assignment(v);
  else if (key == "method") method = parse_method(v);
  else if (key == "epochs") t.epochs = parse_size(key, v);
  else if (key == "batch_size") t.batch_size = parse_size(key, v);
  else if (key == "sender_lr") t.sender_lr = parse_double(key, v);
  else if (key == "receiver_lr") t.receiver_lr = parse_double(key, v);
  else if (key == "population_size") t.population_size = parse_size(key, v);
  else if (key == "reset_interval") t.reset_interval = parse_size(key, v);
  else if (key == "temperature_start") t.temperature_start = parse_double(key, v);
  else if (key == "temperature_end") t.temperature_end = parse_double(key, v);
  else if (key == "soft_warmup") t.soft_warmup = parse_size(key, v);
  else if (key == "entropy_coeff") t.entropy_coeff = parse_double(key, v);
  else if (key == "entropy_floor_fraction") t.entropy_floor_fraction = parse_double(key, v);
  else if (key == "grad_clip") t.grad_clip = parse_double(key, v);
  else if (key == "oracle_epochs") t.oracle_epochs = parse_size(key, v);
  else if (key == "oracle_lr") t.oracle_lr = parse_double(key, v);
  else if (key == "pairs_per_train_scene") t.pairs_per_train_scene = parse_size(key, v);
  else if (key == "iterated_learning") t.iterated_learning = parse_bool(key, v);
  else if (key == "lazimpa_lambda") t.lazimpa_lambda = parse_double(key, v);
  else if (key == "posdis_threshold") posdis_threshold = parse_double(key, v);
  else if (key == "transfer_epochs") transfer_epochs = parse_size(key, v);
  else if (key == "regression_epochs") regression_epochs = parse_size(key, v);
  else if (key == "regression_agent") regression_agent = parse_size(key, v);
  else if (key == "regression_attribute") regression_attribute = parse_size(key, v);
  else if (key == "downstream_epochs") downstream_epochs = parse_size(key, v);
  else if (key == "save_checkpoints") save_checkpoints = parse_bool(key, v);
  else if (key == "seeds") seeds = parse_seed_list(v);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::validate() const {
  auto req = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: " + what);
  };
  req(!name.empty() && name.find('/') == std::string::npos, "name must be a non-empty path component");
  if (features_path.empty()) {
    parse_domain(domain);
    req(scenes_per_cell > 0, "scenes_per_cell must be positive");
  } else {
    req(!manifest_path.empty(), "features requires a manifest");
  }
  req(frozen_encoder == "random_mlp" || frozen_encoder == "identity", "frozen_encoder must be random_mlp or identity");
  req(sender.n_agents >= 1, "n_agents must be at least 1");
  req(sender.positions >= 1, "positions (K) must be at least 1");
  req(sender.vocab >= 2, "vocab (V) must be at least 2");
  req(sender.hidden >= 1, "hidden must be positive");
  req(!seeds.empty(), "seeds must be non-empty");
  if (method == Method::kLazImpa) req(sender.channel == ChannelMode::kDiscrete, "lazimpa needs a discrete channel");
  req(regression_agent < sender.n_agents, "regression_agent out of range");
  req(posdis_threshold >= 0.0 && posdis_threshold <= 1.0, "posdis_threshold must lie in [0,1]");
  training.validate();
}

std::string ExperimentConfig::canonical() const {
  KeyValues kv;
  const TrainingConfig& t = training;
  kv["domain"] = domain;
  kv["scenes_per_cell"] = std::to_string(scenes_per_cell);
  kv["data_seed"] = std::to_string(data_seed);
  kv["features"] = features_path;
  kv["manifest"] = manifest_path;
  kv["frozen_encoder"] = frozen_encoder;
  kv["n_agents"] = std::to_string(sender.n_agents);
  kv["positions"] = std::to_string(sender.positions);
  kv["vocab"] = std::to_string(sender.vocab);
  kv["hidden"] = std::to_string(sender.hidden);
  kv["channel"] = channel_name(sender.channel);
  kv["assignment"] = assignment_name(assignment);
  kv["method"] = method_name(method);
  kv["epochs"] = std::to_string(t.epochs);
  kv["batch_size"] = std::to_string(t.batch_size);
  kv["sender_lr"] = fmt(t.sender_lr);
  kv["receiver_lr"] = fmt(t.receiver_lr);
  kv["population_size"] = std::to_string(t.population_size);
  kv["reset_interval"] = std::to_string(t.reset_interval);
  kv["temperature_start"] = fmt(t.temperature_start);
  kv["temperature_end"] = fmt(t.temperature_end);
  kv["soft_warmup"] = std::to_string(t.soft_warmup);
  kv["entropy_coeff"] = fmt(t.entropy_coeff);
  kv["entropy_floor_fraction"] = fmt(t.entropy_floor_fraction);
  kv["grad_clip"] = fmt(t.grad_clip);
  kv["oracle_epochs"] = std::to_string(t.oracle_epochs);
  kv["oracle_lr"] = fmt(t.oracle_lr);
  kv["pairs_per_train_scene"] = std::to_string(t.pairs_per_train_scene);
  kv["iterated_learning"] = t.iterated_learning ? "1" : "0";
  kv["lazimpa_lambda"] = fmt(t.lazimpa_lambda);
  kv["posdis_threshold"] = fmt(posdis_threshold);
  kv["transfer_epochs"] = std::to_string(transfer_epochs);
  kv["regression_epochs"] = std::to_string(regression_epochs);
  kv["regression_agent"] = std::to_string(regression_agent);
  kv["regression_attribute"] = std::to_string(regression_attribute);
  kv["downstream_epochs"] = std::to_string(downstream_epochs);
  return kv_text(kv);
}

std::string ExperimentConfig::hash() const { return hex16(fnv1a(canonical())); }

// ---- runs ------------------------------------------------------------------------

fs::path store_root(const fs::path& fallback) {
  if (const char* env = std::getenv("EMCOMM_STORE"); env && *env) return env;
  return fallback;
}

fs::path run_meta_path(const fs::path& store, const std::string& condition, std::uint64_t seed) {
  return store / condition / ("run." + std::to_string(seed) + ".meta");
}

PreparedTask prepare_task(const ExperimentConfig& cfg, std::uint64_t seed) {
  PreparedTask t;
  t.data = cfg.features_path.empty() ? make_dataset(parse_domain(cfg.domain), cfg.scenes_per_cell, cfg.data_seed)
                                     : ingest_external_features(cfg.features_path, cfg.manifest_path);
  Rng split_rng = derive_rng(seed, "split");
  t.split = latin_square_split(t.data, split_rng);
  Standardizer::fit(t.data, t.split.train_ids).apply(t.data);
  if (cfg.frozen_encoder == "identity") {
    t.bank = FeatureBank::identity(t.data);
  } else {
    Rng fr = derive_rng(seed, "frozen");
    t.frozen = FrozenRandomEncoder(t.data.dims, fr);
    t.bank = FeatureBank::encode(t.data, t.frozen);
  }
  return t;
}

namespace {

std::string oracle_key(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::ostringstream os;
  os << cfg.domain << '|' << cfg.scenes_per_cell << '|' << cfg.data_seed << '|' << cfg.features_path << '|'
     << cfg.manifest_path << '|' << cfg.frozen_encoder << '|' << cfg.sender.hidden << '|' << cfg.training.oracle_epochs
     << '|' << fmt(cfg.training.oracle_lr) << '|' << cfg.training.batch_size << '|'
     << cfg.training.pairs_per_train_scene << '|' << fmt(cfg.training.grad_clip) << '|' << seed;
  return hex16(fnv1a(os.str()));
}

OracleResult obtain_oracle(const ExperimentConfig& cfg, std::uint64_t seed, const TaskContext& ctx,
                           const fs::path& store) {
  const fs::path dir = store.empty() ? fs::path() : store / "oracles" / oracle_key(cfg, seed);
  if (!dir.empty() && fs::exists(dir / "checkpoint.manifest")) {
    Rng dummy(0);
    OracleResult r{Oracle(ctx.bank->width, cfg.sender.hidden, ctx.properties.size(), dummy), {}, {}, {}};
    KeyValues kv = load_checkpoint(dir, r.oracle.parameters());
    r.holdout.both = std::stod(kv.at("holdout_both"));
    for (std::size_t j = 0; j < ctx.properties.size(); ++j)
      r.holdout.per_property.push_back(std::stod(kv.at("holdout." + std::to_string(j))));
    r.train.both = std::stod(kv.at("train_both"));
    return r;
  }
  Rng orng = derive_rng(seed, "oracle");
  OracleResult r = pretrain_oracle(cfg.training, ctx, cfg.sender.hidden, orng);
  if (!dir.empty()) {
    KeyValues kv{{"kind", "oracle"},
                 {"seed", std::to_string(seed)},
                 {"holdout_both", fmt(r.holdout.both)},
                 {"train_both", fmt(r.train.both)},
                 {"final_loss", fmt(r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back())}};
    for (std::size_t j = 0; j < r.holdout.per_property.size(); ++j)
      kv["holdout." + std::to_string(j)] = fmt(r.holdout.per_property[j]);
    // Per-process temp dir so concurrent workers never share a partial write.
    fs::path tmp = dir;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    fs::remove_all(tmp);
    save_checkpoint(tmp, kv, r.oracle.parameters());
    std::error_code ec;
    fs::rename(tmp, dir, ec);
    if (ec) fs::remove_all(tmp);
  }
  return r;
}

std::string epochs_csv(const std::vector<EpochLog>& logs, const std::vector<std::string>& props, std::size_t heads) {
  std::ostringstream os;
  os << "epoch,train_loss,train_both";
  for (const auto& p : props) os << ",acc." << p;
  os << ",temperature,resets";
  for (std::size_t h = 0; h < heads; ++h) os << ",entropy." << h;
  for (std::size_t h = 0; h < heads; ++h) os << ",regularizer." << h;
  os << '\n';
  for (const auto& l : logs) {
    os << l.epoch << ',' << fmt(l.train_loss) << ',' << fmt(l.train_both);
    for (double a : l.train_acc) os << ',' << fmt(a);
    os << ',' << fmt(l.temperature) << ',' << l.resets;
    for (double h : l.head_entropy) os << ',' << fmt(h);
    for (bool b : l.regularizer_active) os << ',' << (b ? 1 : 0);
    os << '\n';
  }
  return os.str();
}

void persist(const ExperimentConfig& cfg, const ExperimentRecord& rec, const fs::path& store,
             const std::vector<std::string>& props, const ProtocolTable* protocol, SenderGroup* sender,
             std::vector<Receiver>* receivers) {
  if (store.empty()) return;
  const fs::path dir = store / cfg.name;
  const std::string stem = "run." + std::to_string(rec.seed);
  fs::create_directories(dir);
  write_atomic(dir / (stem + ".epochs.csv"),
               epochs_csv(rec.logs, props, cfg.sender.n_agents * cfg.sender.positions));
  if (rec.has_metrics) write_atomic(dir / (stem + ".report"), rec.report.serialize());
  if (protocol) {
    fs::path tmp = dir / (stem + ".protocol.csv.tmp");
    protocol->write_csv(tmp);
    fs::rename(tmp, dir / (stem + ".protocol.csv"));
  }
  if (cfg.save_checkpoints && sender && receivers) {
    ParamRefs params = sender->parameters();
    for (std::size_t r = 0; r < receivers->size(); ++r)
      for (Parameter* p : (*receivers)[r].parameters()) {
        p->name = "pop" + std::to_string(r) + "." + p->name;
        params.push_back(p);
      }
    KeyValues kv{{"condition", cfg.name}, {"seed", std::to_string(rec.seed)}, {"config_hash", rec.config_hash},
                 {"epoch", std::to_string(rec.logs.size())}, {"receivers", std::to_string(receivers->size())}};
    save_checkpoint(dir / (stem + ".ckpt"), kv, params);
    // Restore the in-memory names.
    for (auto& r : *receivers)
      for (Parameter* p : r.parameters()) p->name = p->name.substr(p->name.find('.') + 1);
  }
  std::string meta = "# config\n" + cfg.canonical() + "# result\n" + kv_text(rec.summary(cfg));
  write_atomic(run_meta_path(store, cfg.name, rec.seed), meta);
}

void analyze_into(const ExperimentConfig& cfg, std::uint64_t seed, const PreparedTask& task, SenderGroup& sender,
                  const std::vector<Receiver>& receivers, ExperimentRecord& rec, std::string& stage,
                  std::optional<ProtocolTable>& protocol) {
  std::vector<std::string> props;
  for (const auto& p : task.data.grid.properties) props.push_back(p.name);
  const std::vector<std::size_t> properties = all_properties(task.data);
  stage = "evaluate";
  MessageMatrix msgs = harvest_messages(sender, task.bank);
  auto test_pairs = all_comparison_pairs(task.data, task.split.test_ids, properties);
  auto train_pairs = all_comparison_pairs(task.data, task.split.train_ids, properties);
  auto cs = comparators(receivers);
  rec.holdout = evaluate_comparators(cs, msgs, test_pairs);
  rec.train_eval = evaluate_comparators(cs, msgs, train_pairs);

  const bool discrete = cfg.sender.channel == ChannelMode::kDiscrete;
  if (discrete) {
    stage = "metrics";
    std::vector<std::size_t> all_ids(task.data.scenes.size());
    std::iota(all_ids.begin(), all_ids.end(), 0);
    const std::uint64_t ts = derive_seed(seed, "topsim");
    protocol.emplace(harvest_protocol(sender, task.bank, task.data, all_ids));
    rec.report = compute_report(*protocol, cfg.posdis_threshold, ts);
    rec.report_train = compute_report(harvest_protocol(sender, task.bank, task.data, task.split.train_ids),
                                      cfg.posdis_threshold, ts);
    rec.report_test = compute_report(harvest_protocol(sender, task.bank, task.data, task.split.test_ids),
                                     cfg.posdis_threshold, ts);
    rec.has_metrics = true;
  }

  stage = "analysis";
  if (discrete) {
    rec.relevance = relevance_drops(cs, msgs, cfg.sender, rec.report.mi, test_pairs);
    rec.relevance_train = relevance_drops(cs, msgs, cfg.sender, rec.report.mi, train_pairs);
  }
  rec.selectivity = continuous_selectivity(cs, msgs, cfg.sender, test_pairs);
  if (props.size() >= 2 && cfg.transfer_epochs > 0) {
    Rng xr = derive_rng(seed, "transfer");
    FitOptions fo;
    fo.epochs = cfg.transfer_epochs;
    fo.batch_size = cfg.training.batch_size;
    fo.lr = cfg.training.receiver_lr;
    fo.grad_clip = cfg.training.grad_clip;
    rec.transfer = cross_property_transfer(sender, task.bank, task.data, task.split, 0, 1, fo, xr);
  }
  if (cfg.regression_epochs > 0 && cfg.regression_attribute < props.size()) {
    Rng rr = derive_rng(seed, "regression");
    rec.regression = single_message_regression(msgs, cfg.sender, cfg.regression_agent, task.data, task.split,
                                               cfg.regression_attribute, cfg.regression_epochs, rr);
  }
  const auto& aux = task.data.aux_names;
  if (auto it = std::find(aux.begin(), aux.end(), "outcome_speed_b"); it != aux.end() && cfg.downstream_epochs > 0) {
    const std::size_t col = static_cast<std::size_t>(it - aux.begin());
    std::vector<double> outcome;
    for (const auto& s : task.data.scenes) outcome.push_back(s.aux.at(col));
    Rng dr = derive_rng(seed, "downstream");
    rec.downstream = train_downstream_predictor(msgs, outcome, task.split, cfg.downstream_epochs, dr);
  }
}

}  // namespace

KeyValues ExperimentRecord::summary(const ExperimentConfig& cfg) const {
  KeyValues kv;
  kv["condition"] = condition;
  kv["config_hash"] = config_hash;
  kv["seed"] = std::to_string(seed);
  kv["status"] = complete ? "complete" : "failed";
  if (!failed_stage.empty()) {
    kv["failed_stage"] = failed_stage;
    kv["error"] = error;
  }
  kv["oracle_holdout_both"] = fmt(oracle_holdout_both);
  for (std::size_t j = 0; j < oracle_holdout.size(); ++j) kv["oracle_holdout." + std::to_string(j)] = fmt(oracle_holdout[j]);
  kv["holdout_both"] = fmt(holdout.both);
  for (std::size_t j = 0; j < holdout.per_property.size(); ++j) kv["holdout." + std::to_string(j)] = fmt(holdout.per_property[j]);
  kv["holdout_pairs"] = std::to_string(holdout.pairs);
  kv["train_eval_both"] = fmt(train_eval.both);
  kv["resets"] = std::to_string(resets);
  kv["epochs_run"] = std::to_string(logs.size());
  kv["final_train_both"] = fmt(logs.empty() ? 0.0 : logs.back().train_both);
  kv["instability"] = instability.occurred ? instability.kind : "none";
  if (instability.occurred) {
    kv["instability_epoch"] = std::to_string(instability.epoch);
    kv["instability_op"] = instability.op;
  }
  kv["has_metrics"] = has_metrics ? "1" : "0";
  if (has_metrics) {
    kv["posdis"] = fmt(report.posdis);
    kv["bosdis"] = fmt(report.bosdis);
    kv["topsim"] = fmt(report.topsim);
    kv["compositional"] = report.compositional ? "1" : "0";
    kv["posdis_train"] = fmt(report_train.posdis);
    kv["posdis_test"] = fmt(report_test.posdis);
    for (std::size_t a = 0; a < report.specialization.size(); ++a)
      kv["specialization." + std::to_string(a)] = fmt(report.specialization[a]);
  }
  if (relevance) {
    kv["intervention.relevant_drop"] = fmt(relevance->relevant_drop);
    kv["intervention.irrelevant_drop"] = fmt(relevance->irrelevant_drop);
  }
  if (relevance_train) {
    kv["intervention_train.relevant_drop"] = fmt(relevance_train->relevant_drop);
    kv["intervention_train.irrelevant_drop"] = fmt(relevance_train->irrelevant_drop);
  }
  if (selectivity) {
    kv["selectivity"] = fmt(selectivity->selectivity);
    kv["selectivity_degenerate"] = selectivity->degenerate ? "1" : "0";
    kv["selectivity_blocks"] = std::to_string(selectivity->blocks_used);
  }
  if (transfer) {
    kv["transfer.task"] = transfer->task;
    kv["transfer.holdout"] = fmt(transfer->holdout_acc);
  }
  if (regression) {
    kv["regression.holdout"] = fmt(regression->holdout_acc);
    kv["regression.train"] = fmt(regression->train_acc);
    kv["regression.chance"] = fmt(regression->chance);
  }
  if (downstream) {
    kv["downstream.holdout"] = fmt(downstream->holdout_acc);
    kv["downstream.train"] = fmt(downstream->train_acc);
    kv["downstream.positives"] = std::to_string(downstream->positives);
    kv["downstream.negatives"] = std::to_string(downstream->negatives);
  }
  kv["runtime_seconds"] = fixed(runtime_seconds, 1);
  (void)cfg;
  return kv;
}

ExperimentRecord run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& store) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentRecord rec;
  rec.condition = cfg.name;
  rec.config_hash = cfg.hash();
  rec.seed = seed;

  std::string stage = "prepare";
  std::vector<std::string> props;
  std::optional<PreparedTask> task;
  std::optional<SenderGroup> sender;
  GameResult game;
  std::optional<ProtocolTable> protocol;
  try {
    task.emplace(prepare_task(cfg, seed));
    for (const auto& p : task->data.grid.properties) props.push_back(p.name);
    TaskContext ctx{&task->data, &task->bank, task->split, all_properties(task->data)};

    stage = "oracle";
    OracleResult oracle = obtain_oracle(cfg, seed, ctx, store);
    rec.oracle_holdout_both = oracle.holdout.both;
    rec.oracle_holdout = oracle.holdout.per_property;

    stage = "sender";
    Rng arng = derive_rng(seed, "assignment");
    FrameAssignment fa = build_frame_assignment(cfg.sender.n_agents, task->bank.frames, cfg.assignment, arng);
    Rng srng = derive_rng(seed, "sender");
    sender.emplace(cfg.sender, fa, task->bank.width, srng);
    sender->copy_encoders_from(oracle.oracle.encoder());

    stage = "train";
    Rng trng = derive_rng(seed, "train");
    game = cfg.method == Method::kLazImpa ? train_lazimpa_baseline(cfg.training, ctx, *sender, trng)
                                          : train_iterated_learning(cfg.training, ctx, *sender, trng);
    rec.logs = game.logs;
    rec.resets = game.resets;
    rec.instability = game.instability;

    if (!(game.instability.occurred && game.instability.kind == "nan")) {
      analyze_into(cfg, seed, *task, *sender, game.receivers, rec, stage, protocol);
    }
    rec.complete = true;
  } catch (const std::exception& e) {
    rec.failed_stage = stage;
    rec.error = e.what();
  }
  rec.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  persist(cfg, rec, store, props, protocol ? &*protocol : nullptr, sender ? &*sender : nullptr,
          game.receivers.empty() ? nullptr : &game.receivers);
  return rec;
}

ExperimentConfig config_from_meta(const fs::path& meta) {
  std::ifstream in(meta);
  if (!in) throw std::runtime_error("cannot read " + meta.string());
  std::string text, line;
  bool in_config = false;
  while (std::getline(in, line)) {
    if (line == "# config") in_config = true;
    else if (line == "# result") in_config = false;
    else if (in_config) text += line + "\n";
  }
  ExperimentConfig cfg = ExperimentConfig::parse(text);
  cfg.name = meta.parent_path().filename().string();
  return cfg;
}

RestoredRun restore_run(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& store) {
  const fs::path ckpt = store / cfg.name / ("run." + std::to_string(seed) + ".ckpt");
  const KeyValues head = read_kv(ckpt / "checkpoint.manifest");
  RestoredRun r{prepare_task(cfg, seed), {}, {}, {}};
  Rng arng = derive_rng(seed, "assignment");
  FrameAssignment fa = build_frame_assignment(cfg.sender.n_agents, r.task.bank.frames, cfg.assignment, arng);
  Rng srng = derive_rng(seed, "sender");
  r.sender = SenderGroup(cfg.sender, fa, r.task.bank.width, srng);
  const std::size_t n_recv = std::stoul(head.at("receivers"));
  const std::size_t heads = cfg.method == Method::kLazImpa ? cfg.sender.positions : 1;
  ReceiverConfig rc{2 * cfg.sender.bundle_width(), r.task.data.grid.properties.size(), heads};
  Rng dummy(0);
  for (std::size_t i = 0; i < n_recv; ++i) r.receivers.emplace_back(rc, dummy);
  ParamRefs params = r.sender.parameters();
  for (std::size_t i = 0; i < n_recv; ++i)
    for (Parameter* p : r.receivers[i].parameters()) {
      p->name = "pop" + std::to_string(i) + "." + p->name;
      params.push_back(p);
    }
  r.manifest = load_checkpoint(ckpt, params);
  for (auto& recv : r.receivers)
    for (Parameter* p : recv.parameters()) p->name = p->name.substr(p->name.find('.') + 1);
  return r;
}

ExperimentRecord analyze_restored(const ExperimentConfig& cfg, std::uint64_t seed, RestoredRun& run) {
  ExperimentRecord rec;
  rec.condition = cfg.name;
  rec.config_hash = cfg.hash();
  rec.seed = seed;
  std::string stage;
  std::optional<ProtocolTable> protocol;
  try {
    analyze_into(cfg, seed, run.task, run.sender, run.receivers, rec, stage, protocol);
    rec.complete = true;
  } catch (const std::exception& e) {
    rec.failed_stage = stage;
    rec.error = e.what();
  }
  return rec;
}

std::optional<KeyValues> read_run_meta(const fs::path& store, const std::string& condition, std::uint64_t seed) {
  const fs::path p = run_meta_path(store, condition, seed);
  if (!fs::exists(p)) return std::nullopt;
  return read_kv(p);
}

// ---- statistics ------------------------------------------------------------------

SampleStats describe(std::span<const double> xs) {
  SampleStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("welch_t_test: each sample needs at least two values");
  const SampleStats sa = describe(a), sb = describe(b);
  const double va = sa.stddev * sa.stddev / static_cast<double>(sa.n);
  const double vb = sb.stddev * sb.stddev / static_cast<double>(sb.n);
  WelchResult r;
  if (va + vb == 0.0) {
    r.t = sa.mean == sb.mean ? 0.0 : std::copysign(INFINITY, sa.mean - sb.mean);
    r.df = static_cast<double>(sa.n + sb.n - 2);
    r.p = sa.mean == sb.mean ? 1.0 : 0.0;
    return r;
  }
  r.t = (sa.mean - sb.mean) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) /
         (va * va / static_cast<double>(sa.n - 1) + vb * vb / static_cast<double>(sb.n - 1));
  boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

double cohens_d(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("cohens_d: each sample needs at least two values");
  const SampleStats sa = describe(a), sb = describe(b);
  const double na = static_cast<double>(sa.n), nb = static_cast<double>(sb.n);
  const double pooled = std::sqrt(((na - 1) * sa.stddev * sa.stddev + (nb - 1) * sb.stddev * sb.stddev) / (na + nb - 2));
  if (pooled == 0.0) return 0.0;
  return (sa.mean - sb.mean) / pooled;
}

// ---- sweeps ------------------------------------------------------------------------

SweepSummary sweep(const std::vector<ExperimentConfig>& configs, const fs::path& store, std::size_t workers) {
  struct Job {
    const ExperimentConfig* cfg;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  std::set<std::string> names;
  for (const auto& c : configs) {
    c.validate();
    if (!names.insert(c.name).second) throw std::invalid_argument("sweep: duplicate condition name '" + c.name + "'");
    for (std::uint64_t s : c.seeds) {
      auto meta = read_run_meta(store, c.name, s);
      if (meta && meta->count("status") && meta->at("status") == "complete" && meta->at("config_hash") == c.hash())
        continue;
      jobs.push_back({&c, s});
    }
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) run_experiment(*jobs[i].cfg, jobs[i].seed, store);
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::max<std::size_t>(workers, 1); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<std::string> selected;
  for (const auto& c : configs) selected.push_back(c.name);
  SweepSummary s = summarize_store(store, selected);
  add_comparisons(s);
  return s;
}

SweepSummary summarize_store(const fs::path& store, const std::vector<std::string>& conditions) {
  std::vector<std::string> names = conditions;
  if (names.empty() && fs::exists(store))
    for (const auto& entry : fs::directory_iterator(store))
      if (entry.is_directory() && entry.path().filename() != "oracles") names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());

  SweepSummary s;
  for (const auto& name : names) {
    ConditionSummary c;
    c.condition = name;
    std::map<std::uint64_t, KeyValues> runs;
    if (fs::exists(store / name))
      for (const auto& entry : fs::directory_iterator(store / name)) {
        const std::string fn = entry.path().filename().string();
        if (fn.rfind("run.", 0) != 0 || entry.path().extension() != ".meta") continue;
        KeyValues kv = read_kv(entry.path());
        if (kv["status"] != "complete") continue;
        runs[std::stoull(kv.at("seed"))] = std::move(kv);
      }
    for (auto& [seed, kv] : runs) {
      if (c.config_hash.empty()) {
        c.config_hash = kv.at("config_hash");
        c.n_agents = std::stoul(kv.at("n_agents"));
        c.positions = std::stoul(kv.at("positions"));
        c.vocab = std::stoul(kv.at("vocab"));
      } else if (kv.at("config_hash") != c.config_hash) {
        throw std::runtime_error("condition '" + name + "' mixes config hashes " + c.config_hash + " and " +
                                 kv.at("config_hash"));
      }
      c.seeds.push_back(seed);
      c.holdout.push_back(std::stod(kv.at("holdout_both")));
      c.oracle.push_back(std::stod(kv.at("oracle_holdout_both")));
      if (kv.at("has_metrics") == "1") c.posdis.push_back(std::stod(kv.at("posdis")));
      if (kv.at("instability") != "none") ++c.instabilities;
    }
    c.holdout_stats = describe(c.holdout);
    c.posdis_stats = describe(c.posdis);
    c.compositional_rate_03 = compositional_rate(c.posdis, 0.3);
    c.compositional_rate = compositional_rate(c.posdis, 0.4);
    c.compositional_rate_05 = compositional_rate(c.posdis, 0.5);
    c.compositional_count =
        static_cast<std::size_t>(std::count_if(c.posdis.begin(), c.posdis.end(), [](double p) { return p > 0.4; }));
    s.conditions.push_back(std::move(c));
  }
  return s;
}

void add_comparisons(SweepSummary& s) {
  s.comparisons.clear();
  for (std::size_t i = 0; i < s.conditions.size(); ++i)
    for (std::size_t j = i + 1; j < s.conditions.size(); ++j) {
      const auto& a = s.conditions[i];
      const auto& b = s.conditions[j];
      auto add = [&](const std::string& measure, const std::vector<double>& xa, const std::vector<double>& xb) {
        if (xa.size() < 2 || xb.size() < 2) return;
        s.comparisons.push_back({a.condition, b.condition, measure, welch_t_test(xa, xb), cohens_d(xa, xb), xa.size(), xb.size()});
      };
      add("holdout", a.holdout, b.holdout);
      add("posdis", a.posdis, b.posdis);
    }
}

void write_report(const SweepSummary& s, const fs::path& store, const fs::path& out) {
  std::size_t total = 0;
  for (const auto& c : s.conditions) total += c.seeds.size();
  if (s.conditions.empty() || total == 0) throw std::runtime_error("report: empty selection");
  fs::create_directories(out);

  std::ostringstream csv;
  csv << "group,N,K,V,n,holdout_mean,holdout_std,posdis_mean,posdis_std,compositional,rate_0.3,rate_0.4,rate_0.5,"
         "oracle_mean,instabilities,config_hash\n";
  for (const auto& c : s.conditions)
    csv << c.condition << ',' << c.n_agents << ',' << c.positions << ',' << c.vocab << ',' << c.seeds.size() << ','
        << fmt(c.holdout_stats.mean) << ',' << fmt(c.holdout_stats.stddev) << ',' << fmt(c.posdis_stats.mean) << ','
        << fmt(c.posdis_stats.stddev) << ',' << c.compositional_count << '/' << c.posdis.size() << ','
        << fmt(c.compositional_rate_03) << ',' << fmt(c.compositional_rate) << ',' << fmt(c.compositional_rate_05)
        << ',' << fmt(describe(c.oracle).mean) << ',' << c.instabilities << ',' << c.config_hash << '\n';
  write_atomic(out / "table.csv", csv.str());

  std::vector<std::vector<std::string>> rows{{"group", "N", "holdout", "posdis", "compositional", "instabilities"}};
  for (const auto& c : s.conditions)
    rows.push_back({c.condition, std::to_string(c.n_agents),
                    fixed(100 * c.holdout_stats.mean, 1) + "% +- " + fixed(100 * c.holdout_stats.stddev, 1) + "%",
                    c.posdis.empty() ? "-" : fixed(c.posdis_stats.mean, 3),
                    std::to_string(c.compositional_count) + "/" + std::to_string(c.posdis.size()),
                    std::to_string(c.instabilities)});
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& r : rows)
    for (std::size_t k = 0; k < r.size(); ++k) width[k] = std::max(width[k], r[k].size());
  std::ostringstream txt;
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < r.size(); ++k)
      txt << std::left << std::setw(static_cast<int>(width[k] + 2)) << r[k];
    txt << '\n';
  }
  write_atomic(out / "table.txt", txt.str());

  std::ostringstream cmp;
  cmp << "a,b,measure,n_a,n_b,welch_t,df,p,cohens_d\n";
  for (const auto& c : s.comparisons)
    cmp << c.a << ',' << c.b << ',' << c.measure << ',' << c.n_a << ',' << c.n_b << ',' << fmt(c.welch.t) << ','
        << fmt(c.welch.df) << ',' << fmt(c.welch.p) << ',' << fmt(c.cohens_d) << '\n';
  write_atomic(out / "comparisons.csv", cmp.str());

  for (const auto& c : s.conditions) {
    std::ostringstream h;
    h << "bin_lo,bin_hi,count\n";
    constexpr int kBins = 20;
    std::vector<std::size_t> counts(kBins, 0);
    for (double p : c.posdis) counts[std::min(kBins - 1, static_cast<int>(std::floor(p / 0.05)))]++;
    for (int b = 0; b < kBins; ++b) h << fixed(0.05 * b, 2) << ',' << fixed(0.05 * (b + 1), 2) << ',' << counts[b] << '\n';
    write_atomic(out / ("posdis_hist_" + c.condition + ".csv"), h.str());

    for (std::uint64_t seed : c.seeds) {
      const fs::path rp = store / c.condition / ("run." + std::to_string(seed) + ".report");
      if (!fs::exists(rp)) continue;
      std::ifstream in(rp);
      std::stringstream ss;
      ss << in.rdbuf();
      MetricReport r = MetricReport::parse(ss.str());
      std::ostringstream m;
      m << "position";
      for (std::size_t j = 0; j < (r.mi.empty() ? 0 : r.mi[0].size()); ++j) m << ",attr" << j;
      m << '\n';
      for (std::size_t k = 0; k < r.mi.size(); ++k) {
        m << k;
        for (double v : r.mi[k]) m << ',' << fmt(v);
        m << '\n';
      }
      write_atomic(out / ("mi_" + c.condition + "_seed" + std::to_string(seed) + ".csv"), m.str());
    }
  }
}

// ---- external features -----------------------------------------------------------

namespace {
constexpr char kFeatMagic[8] = {'E', 'M', 'C', 'F', 'E', 'A', 'T', '\0'};
constexpr std::uint32_t kFeatVersion = 1;
}  // namespace

void write_external_features(const fs::path& path, const Dataset& data, std::size_t dtype) {
  if (dtype != 4 && dtype != 8) throw std::invalid_argument("write_external_features: dtype must be 4 or 8");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kFeatMagic, 8);
  auto put32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  put32(kFeatVersion);
  put32(static_cast<std::uint32_t>(data.frames));
  put32(static_cast<std::uint32_t>(data.dims));
  put32(static_cast<std::uint32_t>(data.scenes.size()));
  put32(static_cast<std::uint32_t>(dtype));
  for (const auto& s : data.scenes)
    for (double v : s.features) {
      if (dtype == 8) {
        os.write(reinterpret_cast<const char*>(&v), 8);
      } else {
        const float f = static_cast<float>(v);
        os.write(reinterpret_cast<const char*>(&f), 4);
      }
    }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Dataset ingest_external_features(const fs::path& features, const fs::path& manifest) {
  Manifest m = read_manifest(manifest);
  std::ifstream in(features, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + features.string());
  std::size_t offset = 0;
  auto read = [&](char* dst, std::size_t n) {
    in.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got != n)
      throw std::runtime_error(features.string() + ": truncated at byte offset " + std::to_string(offset + got) +
                               " (expected " + std::to_string(n - got) + " more bytes)");
    offset += n;
  };
  auto get32 = [&] {
    std::uint32_t v = 0;
    read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  char magic[8];
  read(magic, 8);
  if (!std::equal(magic, magic + 8, kFeatMagic)) throw std::runtime_error(features.string() + ": bad magic");
  if (get32() != kFeatVersion) throw std::runtime_error(features.string() + ": unsupported version");
  const std::size_t T = get32(), D = get32(), n = get32(), dtype = get32();
  if (dtype != 4 && dtype != 8) throw std::runtime_error(features.string() + ": dtype must be 4 or 8");
  if (T == 0 || D == 0) throw std::runtime_error(features.string() + ": empty frame shape");
  if (n != m.records.size())
    throw std::runtime_error(features.string() + ": " + std::to_string(n) + " scenes but manifest lists " +
                             std::to_string(m.records.size()));

  Dataset d;
  d.domain = m.domain;
  d.grid = m.grid;
  d.frames = T;
  d.dims = D;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = m.records[i];
    if (r.id != i) throw std::runtime_error(manifest.string() + ": scene ids must run 0..n-1 in order");
    Scene s;
    s.id = i;
    s.frames = T;
    s.dims = D;
    s.bins = r.bins;
    s.nuisance_seed = r.nuisance_seed;
    for (std::size_t p = 0; p < r.bins.size(); ++p) {
      if (r.bins[p] >= d.grid.properties[p].bin_values.size())
        throw std::runtime_error(manifest.string() + ": scene " + std::to_string(i) + " bin out of range");
      s.values.push_back(d.grid.properties[p].bin_values[r.bins[p]]);
    }
    s.features.resize(T * D);
    for (std::size_t k = 0; k < T * D; ++k) {
      if (dtype == 8) {
        read(reinterpret_cast<char*>(&s.features[k]), 8);
      } else {
        float f = 0;
        read(reinterpret_cast<char*>(&f), 4);
        s.features[k] = f;
      }
      if (!std::isfinite(s.features[k]))
        throw std::runtime_error(features.string() + ": non-finite feature in scene " + std::to_string(i));
    }
    d.scenes.push_back(std::move(s));
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw std::runtime_error(features.string() + ": trailing bytes after offset " + std::to_string(offset));
  d.validate();
  return d;
}

}  // namespace emcomm
