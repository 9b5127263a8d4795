#include "emcomm/environments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace emcomm {

namespace {

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  // Pin the endpoints exactly.
  v.front() = lo;
  v.back() = hi;
  return v;
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Scene make_scene_shell(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed,
                       std::size_t frames, std::size_t dims) {
  if (bins.size() != grid.property_count()) throw std::invalid_argument("scene: bin count does not match grid");
  Scene s;
  s.frames = frames;
  s.dims = dims;
  s.features.assign(frames * dims, 0.0);
  s.bins.assign(bins.begin(), bins.end());
  for (std::size_t p = 0; p < bins.size(); ++p) {
    if (bins[p] >= grid.properties[p].bin_values.size()) throw std::invalid_argument("scene: bin index out of range");
    s.values.push_back(grid.properties[p].bin_values[bins[p]]);
  }
  s.nuisance_seed = nuisance_seed;
  return s;
}

template <class Make>
std::vector<Scene> generate(std::size_t n_scenes, const PropertyGrid& grid, Rng& rng, Make make) {
  grid.validate();
  std::vector<Scene> out;
  out.reserve(n_scenes);
  const std::size_t cells = grid.cell_count();
  for (std::size_t i = 0; i < n_scenes; ++i) {
    auto bins = grid.cell_bins(i % cells);
    Scene s = make(grid, bins, rng());
    s.id = i;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

// ---- grid ----------------------------------------------------------------------

std::size_t PropertyGrid::bins() const {
  if (properties.empty()) throw std::invalid_argument("PropertyGrid: no properties");
  const std::size_t b = properties[0].bin_values.size();
  for (auto& p : properties)
    if (p.bin_values.size() != b) throw std::invalid_argument("PropertyGrid: properties have different bin counts");
  return b;
}

std::size_t PropertyGrid::cell_count() const {
  std::size_t c = 1;
  for (std::size_t i = 0; i < properties.size(); ++i) c *= bins();
  return c;
}

std::size_t PropertyGrid::property_index(const std::string& name) const {
  for (std::size_t i = 0; i < properties.size(); ++i)
    if (properties[i].name == name) return i;
  throw std::invalid_argument("PropertyGrid: unknown property '" + name + "'");
}

std::vector<std::size_t> PropertyGrid::cell_bins(std::size_t cell) const {
  const std::size_t b = bins();
  std::vector<std::size_t> out(properties.size());
  for (std::size_t p = properties.size(); p-- > 0;) {
    out[p] = cell % b;
    cell /= b;
  }
  return out;
}

std::size_t PropertyGrid::cell_of(std::span<const std::size_t> bin_idx) const {
  const std::size_t b = bins();
  std::size_t c = 0;
  for (std::size_t v : bin_idx) c = c * b + v;
  return c;
}

void PropertyGrid::validate() const {
  const std::size_t b = bins();
  if (b < 2) throw std::invalid_argument("PropertyGrid: need at least 2 bins");
  for (auto& p : properties)
    for (std::size_t i = 1; i < p.bin_values.size(); ++i)
      if (!(p.bin_values[i] > p.bin_values[i - 1]))
        throw std::invalid_argument("PropertyGrid: bin values of '" + p.name + "' not strictly increasing");
}

PropertyGrid spring_mass_grid() {
  return {{{"stiffness", linspace(1.0, 10.0, 5)}, {"damping", linspace(0.1, 2.0, 5)}}};
}
PropertyGrid ramp_grid() {
  return {{{"elasticity", {0.1, 0.3, 0.5, 0.7, 0.9}}, {"friction", {0.1, 0.3, 0.5, 0.7, 0.9}}}};
}
PropertyGrid collision_grid() {
  return {{{"mass_ratio", {1.0, 2.0, 3.0, 4.0, 5.0}}, {"restitution", {0.1, 0.3, 0.5, 0.7, 0.9}}}};
}
PropertyGrid abstract_grid() {
  return {{{"numerosity", {2.0, 3.0, 4.0, 5.0, 6.0}}, {"mean_size", {0.03, 0.045, 0.06, 0.075, 0.09}}}};
}

void Dataset::validate() const {
  grid.validate();
  for (const Scene& s : scenes) {
    if (s.frames != frames || s.dims != dims || s.features.size() != frames * dims)
      throw std::invalid_argument("Dataset: scene " + std::to_string(s.id) + " has inconsistent shape");
    if (s.bins.size() != grid.property_count() || s.values.size() != grid.property_count())
      throw std::invalid_argument("Dataset: scene " + std::to_string(s.id) + " has wrong property count");
    for (std::size_t p = 0; p < s.bins.size(); ++p)
      if (s.bins[p] >= grid.bins() || grid.properties[p].bin_values[s.bins[p]] != s.values[p])
        throw std::invalid_argument("Dataset: scene " + std::to_string(s.id) + " property value off-grid");
    for (double f : s.features)
      if (!std::isfinite(f)) throw std::invalid_argument("Dataset: non-finite feature in scene " + std::to_string(s.id));
  }
}

// ---- spring-mass -------------------------------------------------------------------

OscillatorState spring_state(double k, double b, double m, double amplitude, double t) {
  const double gamma = b / (2.0 * m);
  const double disc = k / m - gamma * gamma;
  if (disc < -1e-12) throw std::invalid_argument("spring_state: overdamped cell (k/m < gamma^2)");
  const double omega = std::sqrt(std::max(disc, 0.0));
  const double decay = amplitude * std::exp(-gamma * t);
  const double c = std::cos(omega * t), s = std::sin(omega * t);
  OscillatorState st;
  st.x = decay * c;
  st.v = decay * (-gamma * c - omega * s);
  st.a = decay * ((gamma * gamma - omega * omega) * c + 2.0 * gamma * omega * s);
  return st;
}

Scene spring_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed) {
  Scene s = make_scene_shell(grid, bins, nuisance_seed, kSpringTimes.size(), 2);
  const double k = s.values[0], b = s.values[1];
  Rng rng(nuisance_seed);
  const double amp = uniform(rng, 0.5, 1.5);
  for (std::size_t f = 0; f < kSpringTimes.size(); ++f) {
    auto st = spring_state(k, b, kSpringMass, amp, kSpringTimes[f]);
    s.features[f * 2] = st.x;
    s.features[f * 2 + 1] = st.v;
  }
  s.aux = {amp};
  return s;
}

std::vector<Scene> gen_spring_mass(std::size_t n_scenes, const PropertyGrid& grid, Rng& rng) {
  grid.validate();
  if (grid.property_count() != 2) throw std::invalid_argument("gen_spring_mass: grid must be (stiffness, damping)");
  for (double k : grid.properties[0].bin_values)
    for (double b : grid.properties[1].bin_values) {
      const double gamma = b / (2.0 * kSpringMass);
      if (k / kSpringMass < gamma * gamma - 1e-12)
        throw std::invalid_argument("gen_spring_mass: cell k=" + std::to_string(k) + ", b=" + std::to_string(b) +
                                    " has imaginary omega");
    }
  return generate(n_scenes, grid, rng, spring_scene);
}

// ---- abstract scenes -----------------------------------------------------------

std::vector<Shape2D> abstract_layout(std::size_t count, double mean_size, std::uint64_t nuisance_seed) {
  Rng rng(nuisance_seed);
  std::vector<Shape2D> shapes(count);
  double total = 0.0;
  for (auto& sh : shapes) {
    sh.x = uniform(rng, 0.0, 1.0);
    sh.y = uniform(rng, 0.0, 1.0);
    sh.size = mean_size * (1.0 + uniform(rng, -0.3, 0.3));
    total += sh.size;
  }
  const double shift = mean_size - total / static_cast<double>(count);
  for (auto& sh : shapes) sh.size += shift;
  return shapes;
}

std::array<std::array<double, 9>, 4> quadrant_features(std::span<const Shape2D> shapes) {
  std::array<std::array<double, 9>, 4> out{};
  std::array<std::vector<const Shape2D*>, 4> members;
  for (const auto& sh : shapes) {
    const std::size_t q = (sh.x >= 0.5 ? 1 : 0) + (sh.y >= 0.5 ? 2 : 0);
    members[q].push_back(&sh);
  }
  constexpr double kPi = 3.14159265358979323846;
  for (std::size_t q = 0; q < 4; ++q) {
    auto& f = out[q];
    const auto& m = members[q];
    if (m.empty()) continue;
    const double n = static_cast<double>(m.size());
    double sx = 0, sy = 0, ss = 0, area = 0, mn = m[0]->size, mx = m[0]->size;
    for (auto* sh : m) {
      sx += sh->x;
      sy += sh->y;
      ss += sh->size;
      area += kPi * sh->size * sh->size;
      mn = std::min(mn, sh->size);
      mx = std::max(mx, sh->size);
    }
    const double mean_size = ss / n;
    double var = 0.0;
    for (auto* sh : m) var += (sh->size - mean_size) * (sh->size - mean_size);
    f = {n, sx / n, sy / n, mean_size, std::sqrt(var / n), mn, mx, area / 0.25, n / 6.0};
  }
  return out;
}

Scene abstract_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed) {
  Scene s = make_scene_shell(grid, bins, nuisance_seed, 4, 9);
  auto shapes = abstract_layout(static_cast<std::size_t>(std::lround(s.values[0])), s.values[1], nuisance_seed);
  auto feats = quadrant_features(shapes);
  for (std::size_t q = 0; q < 4; ++q) std::copy(feats[q].begin(), feats[q].end(), s.features.begin() + q * 9);
  return s;
}

std::vector<Scene> gen_abstract_scenes(std::size_t n_scenes, Rng& rng) {
  return generate(n_scenes, abstract_grid(), rng, abstract_scene);
}

// ---- ramp ----------------------------------------------------------------------

double ramp_slide_acceleration(const RampParams& p) {
  const double a = p.gravity * (std::sin(p.theta) - p.friction * std::cos(p.theta));
  if (!(a > 0.0)) throw std::logic_error("ramp: friction too high, ball never slides");
  return a;
}

double ramp_slide_duration(const RampParams& p) {
  const double length = p.spawn_height / std::sin(p.theta);
  return std::sqrt(2.0 * length / ramp_slide_acceleration(p));
}

PlanarState ramp_state(const RampParams& p, double t) {
  const double a = ramp_slide_acceleration(p);
  const double ts = ramp_slide_duration(p);
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  PlanarState s;
  if (t <= ts) {
    const double dist = 0.5 * a * t * t;
    s.x = p.x_offset + dist * ct;
    s.y = p.spawn_height - dist * st;
    s.vx = a * t * ct;
    s.vy = -a * t * st;
    return s;
  }
  const double speed = a * ts;
  const double x_land = p.x_offset + p.spawn_height / std::tan(p.theta);
  s.vx = speed * ct;
  s.x = x_land + s.vx * (t - ts);
  // Walk the bounce arcs; each contact scales the vertical speed by e.
  double start = ts;
  double up = p.elasticity * speed * st;
  while (up > 1e-12) {
    const double duration = 2.0 * up / p.gravity;
    if (t < start + duration) {
      const double tau = t - start;
      s.y = up * tau - 0.5 * p.gravity * tau * tau;
      s.vy = up - p.gravity * tau;
      return s;
    }
    start += duration;
    up *= p.elasticity;
  }
  s.y = 0.0;
  s.vy = 0.0;
  return s;
}

Scene ramp_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed) {
  Scene s = make_scene_shell(grid, bins, nuisance_seed, kRampFrames, 4);
  Rng rng(nuisance_seed);
  RampParams p;
  p.elasticity = s.values[0];
  p.friction = s.values[1];
  p.spawn_height = uniform(rng, 0.8, 1.2);
  p.x_offset = uniform(rng, -0.2, 0.2);
  for (std::size_t f = 0; f < kRampFrames; ++f) {
    auto st = ramp_state(p, kRampFrameStep * static_cast<double>(f));
    std::array<double, 4> row{st.x, st.y, st.vx, st.vy};
    std::copy(row.begin(), row.end(), s.features.begin() + f * 4);
  }
  s.aux = {p.spawn_height, p.x_offset};
  return s;
}

std::vector<Scene> gen_ramp_trajectories(std::size_t n_scenes, const PropertyGrid& grid, Rng& rng) {
  return generate(n_scenes, grid, rng, ramp_scene);
}

// ---- collision -----------------------------------------------------------------

PostImpact collision_velocities(double v, double mass_ratio, double restitution) {
  if (!(mass_ratio > 0.0)) throw std::invalid_argument("collision: mass ratio must be positive");
  return {v * (1.0 - restitution * mass_ratio) / (1.0 + mass_ratio), v * (1.0 + restitution) / (1.0 + mass_ratio)};
}

std::array<double, 2> collision_positions(const CollisionParams& p, double t) {
  const double gap = 2.0 * p.radius;
  const double xa0 = -gap - p.speed * p.contact_time;
  if (t <= p.contact_time) return {xa0 + p.speed * t, 0.0};
  auto post = collision_velocities(p.speed, p.mass_ratio, p.restitution);
  const double dt = t - p.contact_time;
  return {-gap + post.v_a * dt, post.v_b * dt};
}

Scene collision_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed) {
  Scene s = make_scene_shell(grid, bins, nuisance_seed, kCollisionFrames, 2);
  Rng rng(nuisance_seed);
  CollisionParams p;
  p.mass_ratio = s.values[0];
  p.restitution = s.values[1];
  if (!(p.mass_ratio > 0.0)) throw std::invalid_argument("collision: mass ratio must be positive");
  p.speed = uniform(rng, 1.5, 2.5);
  p.contact_time = uniform(rng, 0.4, 0.8);
  for (std::size_t f = 0; f < kCollisionFrames; ++f) {
    auto pos = collision_positions(p, kCollisionFrameStep * static_cast<double>(f));
    s.features[f * 2] = pos[0];
    s.features[f * 2 + 1] = pos[1];
  }
  auto post = collision_velocities(p.speed, p.mass_ratio, p.restitution);
  s.aux = {std::abs(post.v_b), p.speed};
  return s;
}

std::vector<Scene> gen_collision_trajectories(std::size_t n_scenes, const PropertyGrid& grid, Rng& rng) {
  return generate(n_scenes, grid, rng, collision_scene);
}

// ---- datasets ------------------------------------------------------------------

Domain parse_domain(const std::string& name) {
  if (name == "spring_mass" || name == "spring") return Domain::kSpringMass;
  if (name == "ramp") return Domain::kRamp;
  if (name == "collision") return Domain::kCollision;
  if (name == "abstract" || name == "abstract_scenes") return Domain::kAbstract;
  throw std::invalid_argument("unknown domain '" + name + "'");
}

std::string domain_name(Domain d) {
  switch (d) {
    case Domain::kSpringMass: return "spring_mass";
    case Domain::kRamp: return "ramp";
    case Domain::kCollision: return "collision";
    case Domain::kAbstract: return "abstract";
  }
  return "unknown";
}

Dataset make_dataset(Domain domain, std::size_t scenes_per_cell, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.domain = domain_name(domain);
  switch (domain) {
    case Domain::kSpringMass:
      d.grid = spring_mass_grid();
      d.scenes = gen_spring_mass(scenes_per_cell * d.grid.cell_count(), d.grid, rng);
      d.aux_names = {"amplitude"};
      break;
    case Domain::kRamp:
      d.grid = ramp_grid();
      d.scenes = gen_ramp_trajectories(scenes_per_cell * d.grid.cell_count(), d.grid, rng);
      d.aux_names = {"spawn_height", "x_offset"};
      break;
    case Domain::kCollision:
      d.grid = collision_grid();
      d.scenes = gen_collision_trajectories(scenes_per_cell * d.grid.cell_count(), d.grid, rng);
      d.aux_names = {"outcome_speed_b", "approach_speed"};
      break;
    case Domain::kAbstract:
      d.grid = abstract_grid();
      d.scenes = gen_abstract_scenes(scenes_per_cell * d.grid.cell_count(), rng);
      break;
  }
  d.frames = d.scenes.front().frames;
  d.dims = d.scenes.front().dims;
  return d;
}

DatasetSplit latin_square_split(const Dataset& data, Rng& rng) {
  if (data.grid.property_count() != 2 || data.grid.bins() != 5)
    throw std::invalid_argument("latin_square_split: grid must be 5x5 over exactly two properties");
  std::array<std::size_t, 5> perm{0, 1, 2, 3, 4};
  std::shuffle(perm.begin(), perm.end(), rng);
  DatasetSplit split;
  for (std::size_t r = 0; r < 5; ++r) split.heldout_cells.push_back({r, perm[r]});
  for (const Scene& s : data.scenes) {
    const bool held = perm[s.bins[0]] == s.bins[1];
    (held ? split.test_ids : split.train_ids).push_back(s.id);
  }
  return split;
}

std::vector<std::size_t> all_properties(const Dataset& data) {
  std::vector<std::size_t> p(data.grid.property_count());
  std::iota(p.begin(), p.end(), 0);
  return p;
}

std::vector<ComparisonPair> make_comparison_pairs(const Dataset& data, std::span<const std::size_t> pool,
                                                  std::span<const std::size_t> properties, std::size_t n_pairs,
                                                  Rng& rng) {
  if (pool.size() < 2) throw std::invalid_argument("make_comparison_pairs: pool needs at least two scenes");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<ComparisonPair> out;
  out.reserve(n_pairs);
  for (std::size_t n = 0; n < n_pairs; ++n) {
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      const std::size_t a = pool[pick(rng)], b = pool[pick(rng)];
      const Scene& sa = data.scenes[a];
      const Scene& sb = data.scenes[b];
      ComparisonPair pr{a, b, {}};
      ok = a != b;
      for (std::size_t p : properties) {
        if (!ok) break;
        if (sa.bins[p] == sb.bins[p]) ok = false;
        else pr.labels.push_back(sa.bins[p] > sb.bins[p] ? Order::kAHigher : Order::kBHigher);
      }
      if (ok) out.push_back(std::move(pr));
    }
    if (!ok) throw std::runtime_error("make_comparison_pairs: no tie-free pair found in 1000 attempts");
  }
  return out;
}

std::vector<ComparisonPair> make_cross_property_pairs(const Dataset& data, std::span<const std::size_t> pool,
                                                      std::size_t prop_a, std::size_t prop_b, std::size_t n_pairs,
                                                      Rng& rng) {
  if (pool.size() < 2) throw std::invalid_argument("make_cross_property_pairs: pool needs at least two scenes");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<ComparisonPair> out;
  for (std::size_t n = 0; n < n_pairs; ++n) {
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
      const std::size_t a = pool[pick(rng)], b = pool[pick(rng)];
      const std::size_t ba = data.scenes[a].bins[prop_a], bb = data.scenes[b].bins[prop_b];
      if (a == b || ba == bb) continue;
      out.push_back({a, b, {ba > bb ? Order::kAHigher : Order::kBHigher}});
      ok = true;
    }
    if (!ok) throw std::runtime_error("make_cross_property_pairs: no tie-free pair found in 1000 attempts");
  }
  return out;
}

std::vector<ComparisonPair> all_comparison_pairs(const Dataset& data, std::span<const std::size_t> pool,
                                                 std::span<const std::size_t> properties) {
  std::vector<ComparisonPair> out;
  for (std::size_t a : pool)
    for (std::size_t b : pool) {
      if (a == b) continue;
      ComparisonPair pr{a, b, {}};
      bool ok = true;
      for (std::size_t p : properties) {
        const std::size_t x = data.scenes[a].bins[p], y = data.scenes[b].bins[p];
        if (x == y) {
          ok = false;
          break;
        }
        pr.labels.push_back(x > y ? Order::kAHigher : Order::kBHigher);
      }
      if (ok) out.push_back(std::move(pr));
    }
  return out;
}

Standardizer Standardizer::fit(const Dataset& data, std::span<const std::size_t> ids) {
  Standardizer st;
  st.mean.assign(data.dims, 0.0);
  st.stddev.assign(data.dims, 0.0);
  double n = 0.0;
  for (std::size_t id : ids) {
    const Scene& s = data.scenes[id];
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t d = 0; d < s.dims; ++d) st.mean[d] += s.feature(t, d);
    n += static_cast<double>(s.frames);
  }
  if (n == 0.0) throw std::invalid_argument("Standardizer::fit: no scenes");
  for (double& m : st.mean) m /= n;
  for (std::size_t id : ids) {
    const Scene& s = data.scenes[id];
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t d = 0; d < s.dims; ++d) {
        const double z = s.feature(t, d) - st.mean[d];
        st.stddev[d] += z * z;
      }
  }
  for (double& v : st.stddev) {
    v = std::sqrt(v / n);
    if (v < 1e-12) v = 1.0;
  }
  return st;
}

void Standardizer::apply(Dataset& data) const {
  for (Scene& s : data.scenes)
    for (std::size_t t = 0; t < s.frames; ++t)
      for (std::size_t d = 0; d < s.dims; ++d) s.features[t * s.dims + d] = (s.features[t * s.dims + d] - mean[d]) / stddev[d];
}

// ---- persistence -----------------------------------------------------------------

namespace {
constexpr char kDatasetMagic[8] = {'E', 'M', 'C', 'D', 'S', 'E', 'T', '\0'};
constexpr std::uint32_t kDatasetVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
void put_str(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("cannot open " + path.string());
  }
  template <class T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check(sizeof(T));
    return v;
  }
  std::string get_str() {
    auto n = get<std::uint32_t>();
    if (n > (1u << 20)) throw std::runtime_error(path_.string() + ": implausible string length at byte " + std::to_string(offset_));
    std::string s(n, '\0');
    in_.read(s.data(), n);
    check(n);
    return s;
  }
  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    check(n);
  }

 private:
  void check(std::size_t n) {
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw std::runtime_error(path_.string() + ": truncated at byte offset " +
                               std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())) + " (expected " +
                               std::to_string(n) + " more bytes)");
    offset_ += n;
  }
  std::ifstream in_;
  std::filesystem::path path_;
  std::size_t offset_ = 0;
};
}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  data.validate();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kDatasetMagic, 8);
  put<std::uint32_t>(os, kDatasetVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.frames));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.dims));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.scenes.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.grid.property_count()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.grid.bins()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.aux_names.size()));
  put_str(os, data.domain);
  for (auto& p : data.grid.properties) {
    put_str(os, p.name);
    for (double v : p.bin_values) put<double>(os, v);
  }
  for (auto& a : data.aux_names) put_str(os, a);
  for (auto& s : data.scenes) os.write(reinterpret_cast<const char*>(s.features.data()), static_cast<std::streamsize>(s.features.size() * 8));
  for (auto& s : data.scenes)
    for (std::size_t b : s.bins) put<std::uint32_t>(os, static_cast<std::uint32_t>(b));
  for (auto& s : data.scenes) put<std::uint64_t>(os, s.nuisance_seed);
  for (auto& s : data.scenes) {
    if (s.aux.size() != data.aux_names.size()) throw std::invalid_argument("write_dataset: aux width mismatch");
    for (double v : s.aux) put<double>(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (!std::equal(magic, magic + 8, kDatasetMagic)) throw std::runtime_error(path.string() + ": not a dataset file");
  if (r.get<std::uint32_t>() != kDatasetVersion) throw std::runtime_error(path.string() + ": unsupported version");
  Dataset d;
  d.frames = r.get<std::uint32_t>();
  d.dims = r.get<std::uint32_t>();
  const std::size_t n = r.get<std::uint32_t>();
  const std::size_t np = r.get<std::uint32_t>();
  const std::size_t nb = r.get<std::uint32_t>();
  const std::size_t naux = r.get<std::uint32_t>();
  d.domain = r.get_str();
  for (std::size_t p = 0; p < np; ++p) {
    PropertySpec spec{r.get_str(), {}};
    for (std::size_t b = 0; b < nb; ++b) spec.bin_values.push_back(r.get<double>());
    d.grid.properties.push_back(std::move(spec));
  }
  for (std::size_t a = 0; a < naux; ++a) d.aux_names.push_back(r.get_str());
  d.scenes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Scene& s = d.scenes[i];
    s.id = i;
    s.frames = d.frames;
    s.dims = d.dims;
    s.features.resize(d.frames * d.dims);
    r.bytes(reinterpret_cast<char*>(s.features.data()), s.features.size() * 8);
  }
  for (auto& s : d.scenes)
    for (std::size_t p = 0; p < np; ++p) s.bins.push_back(r.get<std::uint32_t>());
  for (auto& s : d.scenes) s.nuisance_seed = r.get<std::uint64_t>();
  for (auto& s : d.scenes)
    for (std::size_t a = 0; a < naux; ++a) s.aux.push_back(r.get<double>());
  for (auto& s : d.scenes)
    for (std::size_t p = 0; p < np; ++p) {
      if (s.bins[p] >= nb) throw std::runtime_error(path.string() + ": bin index out of range");
      s.values.push_back(d.grid.properties[p].bin_values[s.bins[p]]);
    }
  d.validate();
  return d;
}

void write_manifest(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "# emcomm scene manifest v1\n";
  os << "domain " << data.domain << '\n';
  os << std::setprecision(17);
  for (auto& p : data.grid.properties) {
    os << "property " << p.name;
    for (double v : p.bin_values) os << ' ' << v;
    os << '\n';
  }
  for (auto& s : data.scenes) {
    os << "scene " << s.id << ' ';
    for (std::size_t p = 0; p < s.bins.size(); ++p) os << (p ? ":" : "") << s.bins[p];
    os << ' ' << s.nuisance_seed << '\n';
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "domain") {
      ls >> m.domain;
    } else if (kind == "property") {
      PropertySpec p;
      ls >> p.name;
      double v;
      while (ls >> v) p.bin_values.push_back(v);
      m.grid.properties.push_back(std::move(p));
    } else if (kind == "scene") {
      ManifestRecord r;
      std::string cell;
      if (!(ls >> r.id >> cell >> r.nuisance_seed))
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed scene record");
      std::istringstream cs(cell);
      std::string part;
      while (std::getline(cs, part, ':')) r.bins.push_back(std::stoul(part));
      m.records.push_back(std::move(r));
    } else {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": unknown record '" + kind + "'");
    }
  }
  m.grid.validate();
  for (auto& r : m.records)
    if (r.bins.size() != m.grid.property_count())
      throw std::runtime_error(path.string() + ": scene " + std::to_string(r.id) + " cell does not match property count");
  return m;
}

Dataset regenerate(const Manifest& manifest) {
  const Domain dom = parse_domain(manifest.domain);
  Dataset d;
  d.domain = domain_name(dom);
  d.grid = manifest.grid;
  for (const auto& r : manifest.records) {
    Scene s;
    switch (dom) {
      case Domain::kSpringMass: s = spring_scene(d.grid, r.bins, r.nuisance_seed); d.aux_names = {"amplitude"}; break;
      case Domain::kRamp: s = ramp_scene(d.grid, r.bins, r.nuisance_seed); d.aux_names = {"spawn_height", "x_offset"}; break;
      case Domain::kCollision: s = collision_scene(d.grid, r.bins, r.nuisance_seed); d.aux_names = {"outcome_speed_b", "approach_speed"}; break;
      case Domain::kAbstract: s = abstract_scene(d.grid, r.bins, r.nuisance_seed); break;
    }
    s.id = r.id;
    d.scenes.push_back(std::move(s));
  }
  if (d.scenes.empty()) throw std::runtime_error("regenerate: manifest lists no scenes");
  d.frames = d.scenes.front().frames;
  d.dims = d.scenes.front().dims;
  return d;
}

}  // namespace emcomm
