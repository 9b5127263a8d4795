// Analytic scene generators, property grids, compositional holdout splits and
// comparison pairs.
//
// Every scene is a pure function of (property cell, nuisance seed), so datasets
// regenerate bit-for-bit from their manifest.
#pragma once

#include "emcomm/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace emcomm {

struct PropertySpec {
  std::string name;
  std::vector<double> bin_values;  // strictly increasing
};

struct PropertyGrid {
  std::vector<PropertySpec> properties;

  std::size_t property_count() const { return properties.size(); }
  std::size_t bins() const;            // common bin count; throws if ragged
  std::size_t cell_count() const;      // bins^P
  std::size_t property_index(const std::string& name) const;
  std::vector<std::size_t> cell_bins(std::size_t cell) const;  // first property is most significant
  std::size_t cell_of(std::span<const std::size_t> bins) const;
  void validate() const;
};

PropertyGrid spring_mass_grid();   // stiffness [1,10], damping [0.1,2]
PropertyGrid ramp_grid();          // elasticity, friction in {0.1..0.9}
PropertyGrid collision_grid();     // mass_ratio {1..5}, restitution {0.1..0.9}
PropertyGrid abstract_grid();      // numerosity {2..6}, mean_size

struct Scene {
  std::size_t id = 0;
  std::size_t frames = 0;
  std::size_t dims = 0;
  std::vector<double> features;  // frames x dims, row-major
  std::vector<std::size_t> bins;  // per grid property
  std::vector<double> values;     // bin_values[bins[p]] exactly
  std::uint64_t nuisance_seed = 0;
  std::vector<double> aux;        // domain extras (see Dataset::aux_names)

  double feature(std::size_t t, std::size_t d) const { return features[t * dims + d]; }
};

struct Dataset {
  std::string domain;
  PropertyGrid grid;
  std::size_t frames = 0;
  std::size_t dims = 0;
  std::vector<std::string> aux_names;
  std::vector<Scene> scenes;

  std::size_t cell_of(const Scene& s) const { return grid.cell_of(s.bins); }
  void validate() const;
};

// ---- spring-mass -------------------------------------------------------------

struct OscillatorState {
  double x = 0.0;
  double v = 0.0;
  double a = 0.0;
};

/// Closed-form underdamped/critical oscillator x(t) = A e^{-gamma t} cos(omega t)
/// with gamma = b/(2m), omega = sqrt(k/m - gamma^2).
OscillatorState spring_state(double k, double b, double m, double amplitude, double t);

inline constexpr std::array<double, 4> kSpringTimes{0.0, 0.5, 1.0, 1.5};
inline constexpr double kSpringMass = 1.0;

Scene spring_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed);
std::vector<Scene> gen_spring_mass(std::size_t n_scenes, const PropertyGrid& grid, Rng& rng);

// ---- abstract geometric scenes -----------------------------------------------

struct Shape2D {
  double x = 0.0;
  double y = 0.0;
  double size = 0.0;  // radius
};

std::vector<Shape2D> abstract_layout(std::size_t count, double mean_size, std::uint64_t nuisance_seed);
/// Per-quadrant features: count, mean x, mean y, mean size, size stddev, min
/// size, max size, occupied-area fraction, count/6. Quadrants: (x<.5,y<.5),
/// (x>=.5,y<.5), (x<.5,y>=.5), (x>=.5,y>=.5).
std::array<std::array<double, 9>, 4> quadrant_features(std::span<const Shape2D> shapes);

Scene abstract_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed);
std::vector<Scene> gen_abstract_scenes(std::size_t n_scenes, Rng& rng);

// ---- ramp --------------------------------------------------------------------

struct RampParams {
  double elasticity = 0.5;
  double friction = 0.5;
  double theta = 70.0 * 3.14159265358979323846 / 180.0;
  double gravity = 9.8;
  double spawn_height = 1.0;
  double x_offset = 0.0;
};

struct PlanarState {
  double x = 0.0;
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;
};

double ramp_slide_acceleration(const RampParams& p);
double ramp_slide_duration(const RampParams& p);
/// Slide down the incline from rest, then ballistic arcs over flat ground with
/// vertical restitution e at every contact.
PlanarState ramp_state(const RampParams& p, double t);

inline constexpr std::size_t kRampFrames = 8;
inline constexpr double kRampFrameStep = 0.25;

Scene ramp_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed);
std::vector<Scene> gen_ramp_trajectories(std::size_t n_scenes, const PropertyGrid& grid, Rng& rng);

// ---- collision ---------------------------------------------------------------

struct CollisionParams {
  double mass_ratio = 1.0;  // m_B / m_A, m_A = 1
  double restitution = 0.5;
  double speed = 2.0;       // approach speed of A
  double contact_time = 0.5;
  double radius = 0.15;
};

struct PostImpact {
  double v_a = 0.0;
  double v_b = 0.0;
};

PostImpact collision_velocities(double v, double mass_ratio, double restitution);
std::array<double, 2> collision_positions(const CollisionParams& p, double t);

inline constexpr std::size_t kCollisionFrames = 24;
inline constexpr double kCollisionFrameStep = 1.0 / 12.0;

Scene collision_scene(const PropertyGrid& grid, std::span<const std::size_t> bins, std::uint64_t nuisance_seed);
std::vector<Scene> gen_collision_trajectories(std::size_t n_scenes, const PropertyGrid& grid, Rng& rng);

// ---- datasets, splits, pairs ---------------------------------------------------

enum class Domain { kSpringMass, kRamp, kCollision, kAbstract };
Domain parse_domain(const std::string& name);
std::string domain_name(Domain d);

/// n_scenes cycle through the grid cells (scene i sits in cell i mod cells).
Dataset make_dataset(Domain domain, std::size_t scenes_per_cell, std::uint64_t seed);

struct DatasetSplit {
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> test_ids;
  std::vector<std::array<std::size_t, 2>> heldout_cells;
};

/// Holds out the cells (i, perm(i)) of a random permutation: one per row and
/// one per column of the 5x5 grid.
DatasetSplit latin_square_split(const Dataset& data, Rng& rng);

enum class Order { kAHigher, kBHigher };

struct ComparisonPair {
  std::size_t a = 0;
  std::size_t b = 0;
  std::vector<Order> labels;  // one per compared property
};

/// Uniform pairs from `pool`, resampled until every labeled property differs.
std::vector<ComparisonPair> make_comparison_pairs(const Dataset& data, std::span<const std::size_t> pool,
                                                  std::span<const std::size_t> properties, std::size_t n_pairs,
                                                  Rng& rng);
/// Single label "property p of A above property q of B", compared by bin index.
std::vector<ComparisonPair> make_cross_property_pairs(const Dataset& data, std::span<const std::size_t> pool,
                                                      std::size_t prop_a, std::size_t prop_b, std::size_t n_pairs,
                                                      Rng& rng);
/// Every ordered pair of distinct scenes in `pool` whose labeled properties all differ.
std::vector<ComparisonPair> all_comparison_pairs(const Dataset& data, std::span<const std::size_t> pool,
                                                 std::span<const std::size_t> properties);

std::vector<std::size_t> all_properties(const Dataset& data);

/// Per-dimension z-scoring fitted on the given scenes (all frames pooled).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& data, std::span<const std::size_t> ids);
  void apply(Dataset& data) const;
};

// ---- persistence ---------------------------------------------------------------

void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Dataset& data);

struct ManifestRecord {
  std::size_t id = 0;
  std::vector<std::size_t> bins;
  std::uint64_t nuisance_seed = 0;
};

struct Manifest {
  std::string domain;
  PropertyGrid grid;
  std::vector<ManifestRecord> records;
};

Manifest read_manifest(const std::filesystem::path& path);

/// Rebuilds a generated dataset from its manifest (domain must be analytic).
Dataset regenerate(const Manifest& manifest);

}  // namespace emcomm
