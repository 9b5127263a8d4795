#include "emcomm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace emcomm {

void ProtocolTable::validate() const {
  if (attributes.size() != symbols.size()) throw std::invalid_argument("ProtocolTable: row count mismatch");
  for (std::size_t i = 0; i < rows(); ++i) {
    if (symbols[i].size() != message_length())
      throw std::invalid_argument("ProtocolTable: row " + std::to_string(i) + " has wrong message length");
    if (attributes[i].size() != attribute_count())
      throw std::invalid_argument("ProtocolTable: row " + std::to_string(i) + " has wrong attribute count");
    for (std::size_t s : symbols[i])
      if (s >= vocab) throw std::invalid_argument("ProtocolTable: symbol out of range");
    for (std::size_t b : attributes[i])
      if (b >= bins) throw std::invalid_argument("ProtocolTable: bin out of range");
  }
}

void ProtocolTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "# vocab=" << vocab << " bins=" << bins << " agents=" << agents << " positions=" << positions << '\n';
  for (std::size_t k = 0; k < message_length(); ++k) os << (k ? "," : "") << 'm' << k;
  for (const auto& n : attribute_names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < rows(); ++i) {
    for (std::size_t k = 0; k < symbols[i].size(); ++k) os << (k ? "," : "") << symbols[i][k];
    for (std::size_t b : attributes[i]) os << ',' << b;
    os << '\n';
  }
}

ProtocolTable ProtocolTable::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  ProtocolTable t;
  std::string line;
  std::getline(in, line);
  if (std::sscanf(line.c_str(), "# vocab=%zu bins=%zu agents=%zu positions=%zu", &t.vocab, &t.bins, &t.agents,
                  &t.positions) != 4)
    throw std::runtime_error("protocol csv: bad metadata line in " + path.string());
  std::getline(in, line);
  std::stringstream hs(line);
  std::string cell;
  std::size_t col = 0;
  while (std::getline(hs, cell, ','))
    if (col++ >= t.message_length()) t.attribute_names.push_back(cell);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::vector<std::size_t> vals;
    while (std::getline(ls, cell, ',')) vals.push_back(std::stoul(cell));
    if (vals.size() != t.message_length() + t.attribute_count())
      throw std::runtime_error("protocol csv: wrong column count in " + path.string());
    t.symbols.emplace_back(vals.begin(), vals.begin() + static_cast<long>(t.message_length()));
    t.attributes.emplace_back(vals.begin() + static_cast<long>(t.message_length()), vals.end());
  }
  t.validate();
  return t;
}

ProtocolTable harvest_protocol(const SenderGroup& sender, const FeatureBank& bank, const Dataset& data,
                               std::span<const std::size_t> ids) {
  if (ids.empty()) throw std::invalid_argument("harvest_protocol: empty partition");
  const SenderConfig& sc = sender.config();
  if (sc.channel != ChannelMode::kDiscrete) throw std::invalid_argument("harvest_protocol: needs a discrete channel");
  ProtocolTable t;
  t.vocab = sc.vocab;
  t.bins = data.grid.bins();
  t.agents = sc.n_agents;
  t.positions = sc.positions;
  for (const auto& p : data.grid.properties) t.attribute_names.push_back(p.name);
  t.symbols = sender.symbols(bank, ids);
  for (std::size_t id : ids) t.attributes.push_back(data.scenes.at(id).bins);
  t.validate();
  return t;
}

double mutual_information(std::span<const std::size_t> x, std::span<const std::size_t> y) {
  if (x.size() != y.size()) throw std::invalid_argument("mutual_information: length mismatch");
  if (x.empty()) return 0.0;
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> px, py;
  for (std::size_t i = 0; i < x.size(); ++i) {
    joint[{x[i], y[i]}] += 1.0;
    px[x[i]] += 1.0;
    py[y[i]] += 1.0;
  }
  const double n = static_cast<double>(x.size());
  double mi = 0.0;
  for (const auto& [key, c] : joint) mi += (c / n) * std::log(c * n / (px[key.first] * py[key.second]));
  return std::max(0.0, mi);
}

namespace {

std::vector<std::size_t> position_column(const ProtocolTable& t, std::size_t k) {
  std::vector<std::size_t> c;
  c.reserve(t.rows());
  for (const auto& r : t.symbols) c.push_back(r.at(k));
  return c;
}

std::vector<std::size_t> attribute_column(const ProtocolTable& t, std::size_t j) {
  std::vector<std::size_t> c;
  c.reserve(t.rows());
  for (const auto& r : t.attributes) c.push_back(r.at(j));
  return c;
}

double gap_ratio(std::vector<double> v) {
  std::sort(v.begin(), v.end(), std::greater<>());
  return (v[0] - v[1]) / (v[0] + kRatioEps);
}

void require_two_attributes(const ProtocolTable& t, const char* what) {
  if (t.attribute_count() < 2) throw std::invalid_argument(std::string(what) + ": needs at least two attributes");
}

}  // namespace

double discrete_mi(const ProtocolTable& t, std::size_t position, std::size_t attribute) {
  if (position >= t.message_length() || attribute >= t.attribute_count())
    throw std::out_of_range("discrete_mi: index out of range");
  return mutual_information(position_column(t, position), attribute_column(t, attribute));
}

MIMatrix mi_matrix(const ProtocolTable& t) {
  MIMatrix m(t.message_length(), std::vector<double>(t.attribute_count()));
  std::vector<std::vector<std::size_t>> attrs;
  for (std::size_t j = 0; j < t.attribute_count(); ++j) attrs.push_back(attribute_column(t, j));
  for (std::size_t k = 0; k < t.message_length(); ++k) {
    auto pos = position_column(t, k);
    for (std::size_t j = 0; j < t.attribute_count(); ++j) m[k][j] = mutual_information(pos, attrs[j]);
  }
  return m;
}

double posdis(const ProtocolTable& t) {
  require_two_attributes(t, "posdis");
  if (t.message_length() == 0) return 0.0;
  double total = 0.0;
  for (const auto& row : mi_matrix(t)) total += gap_ratio(row);
  return total / static_cast<double>(t.message_length());
}

double bosdis(const ProtocolTable& t) {
  require_two_attributes(t, "bosdis");
  std::vector<std::vector<std::size_t>> attrs;
  for (std::size_t j = 0; j < t.attribute_count(); ++j) attrs.push_back(attribute_column(t, j));
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t s = 0; s < t.vocab; ++s) {
    std::vector<std::size_t> count;
    count.reserve(t.rows());
    for (const auto& r : t.symbols) count.push_back(static_cast<std::size_t>(std::count(r.begin(), r.end(), s)));
    std::vector<double> mi;
    for (const auto& a : attrs) mi.push_back(mutual_information(count, a));
    if (*std::max_element(mi.begin(), mi.end()) <= 0.0) continue;
    total += gap_ratio(mi);
    ++used;
  }
  return used ? total / static_cast<double>(used) : 0.0;
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

double pearson(std::span<const double> x, std::span<const double> y, bool* degenerate) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // Constant inputs can leave rounding residue in the centred sums.
  auto constant = [](std::span<const double> v) { return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end(); };
  const bool degen = x.size() < 2 || sxx <= 0.0 || syy <= 0.0 || constant(x) || constant(y);
  if (degenerate) *degenerate = degen;
  return degen ? 0.0 : sxy / std::sqrt(sxx * syy);
}

double spearman(std::span<const double> x, std::span<const double> y, bool* degenerate) {
  auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  return pearson(rx, ry, degenerate);
}

TopSimResult topsim(const ProtocolTable& t, std::uint64_t seed, std::size_t max_rows) {
  std::vector<std::size_t> rows(t.rows());
  std::iota(rows.begin(), rows.end(), 0);
  if (rows.size() > max_rows) {
    Rng rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(max_rows);
    std::sort(rows.begin(), rows.end());
  }
  std::vector<double> meaning, message;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      const auto& ra = t.attributes[rows[a]];
      const auto& rb = t.attributes[rows[b]];
      double md = 0.0;
      for (std::size_t j = 0; j < ra.size(); ++j)
        md += std::abs(static_cast<double>(ra[j]) - static_cast<double>(rb[j]));
      const auto& sa = t.symbols[rows[a]];
      const auto& sb = t.symbols[rows[b]];
      double hd = 0.0;
      for (std::size_t k = 0; k < sa.size(); ++k) hd += sa[k] != sb[k] ? 1.0 : 0.0;
      meaning.push_back(md);
      message.push_back(hd);
    }
  TopSimResult r;
  r.pairs = meaning.size();
  r.value = spearman(meaning, message, &r.degenerate);
  return r;
}

double specialization_ratio(const ProtocolTable& t, std::size_t agent) {
  require_two_attributes(t, "specialization_ratio");
  if (agent >= t.agents) throw std::out_of_range("specialization_ratio: agent out of range");
  auto mi = mi_matrix(t);
  std::vector<double> totals(t.attribute_count(), 0.0);
  for (std::size_t k = agent * t.positions; k < (agent + 1) * t.positions; ++k)
    for (std::size_t j = 0; j < totals.size(); ++j) totals[j] += mi[k][j];
  return gap_ratio(totals);
}

double compositional_rate(std::span<const double> posdis_values, double threshold) {
  if (posdis_values.empty()) return 0.0;
  const auto above = std::count_if(posdis_values.begin(), posdis_values.end(), [&](double p) { return p > threshold; });
  return static_cast<double>(above) / static_cast<double>(posdis_values.size());
}

namespace {
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string MetricReport::serialize() const {
  std::ostringstream os;
  os << "posdis=" << fmt(posdis) << '\n'
     << "bosdis=" << fmt(bosdis) << '\n'
     << "topsim=" << fmt(topsim) << '\n'
     << "topsim_degenerate=" << (topsim_degenerate ? 1 : 0) << '\n'
     << "compositional=" << (compositional ? 1 : 0) << '\n'
     << "mi_positions=" << mi.size() << '\n'
     << "mi_attributes=" << (mi.empty() ? 0 : mi[0].size()) << '\n';
  for (std::size_t k = 0; k < mi.size(); ++k)
    for (std::size_t j = 0; j < mi[k].size(); ++j) os << "mi." << k << '.' << j << '=' << fmt(mi[k][j]) << '\n';
  for (std::size_t a = 0; a < specialization.size(); ++a)
    os << "specialization." << a << '=' << fmt(specialization[a]) << '\n';
  return os.str();
}

MetricReport MetricReport::parse(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("MetricReport: missing key '" + k + "'");
    return it->second;
  };
  MetricReport r;
  r.posdis = std::stod(get("posdis"));
  r.bosdis = std::stod(get("bosdis"));
  r.topsim = std::stod(get("topsim"));
  r.topsim_degenerate = get("topsim_degenerate") == "1";
  r.compositional = get("compositional") == "1";
  const std::size_t K = std::stoul(get("mi_positions")), P = std::stoul(get("mi_attributes"));
  r.mi.assign(K, std::vector<double>(P));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < P; ++j) r.mi[k][j] = std::stod(get("mi." + std::to_string(k) + "." + std::to_string(j)));
  for (std::size_t a = 0; kv.count("specialization." + std::to_string(a)); ++a)
    r.specialization.push_back(std::stod(kv["specialization." + std::to_string(a)]));
  return r;
}

MetricReport compute_report(const ProtocolTable& t, double threshold, std::uint64_t topsim_seed) {
  MetricReport r;
  r.mi = mi_matrix(t);
  r.posdis = posdis(t);
  r.bosdis = bosdis(t);
  auto ts = topsim(t, topsim_seed);
  r.topsim = ts.value;
  r.topsim_degenerate = ts.degenerate;
  for (std::size_t a = 0; a < t.agents; ++a) r.specialization.push_back(specialization_ratio(t, a));
  r.compositional = r.posdis > threshold;
  return r;
}

}  // namespace emcomm
