// Senders, receivers and the no-communication oracle.
//
// Scenes reach the networks as per-frame feature rows. A frozen random MLP
// lifts raw frame features to 384 dims once per dataset (FeatureBank); each
// agent then runs its own temporal encoder over the frames it is assigned.
#pragma once

#include "emcomm/environments.hpp"
#include "emcomm/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace emcomm {

inline constexpr std::size_t kFrozenWidth = 384;
inline constexpr std::size_t kSceneRepr = 128;

// PyTorch-style default init: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Parameter make_linear_weight(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng);
Parameter make_linear_bias(std::string name, std::size_t fan_in, std::size_t n, Rng& rng);

class FrozenRandomEncoder {
 public:
  FrozenRandomEncoder() = default;
  /// D -> 384 (ReLU) -> 384, He-normal weights, never trained.
  FrozenRandomEncoder(std::size_t in_dim, Rng& rng);

  std::size_t in_dim() const { return in_dim_; }
  /// rows: n x D row-major -> n x 384.
  std::vector<double> encode(std::span<const double> rows, std::size_t n) const;
  ParamRefs parameters();

 private:
  std::size_t in_dim_ = 0;
  Parameter w1_, b1_, w2_, b2_;
};

/// Frozen per-frame representation of every scene in a dataset.
struct FeatureBank {
  std::size_t frames = 0;
  std::size_t width = 0;
  std::vector<std::vector<double>> per_scene;  // frames x width

  static FeatureBank encode(const Dataset& data, const FrozenRandomEncoder& enc);
  /// Uses raw features unchanged (external backbone features).
  static FeatureBank identity(const Dataset& data);

  /// [ids.size(), frames.size(), width] constant tensor.
  Tensor batch(std::span<const std::size_t> ids, std::span<const std::size_t> frame_idx) const;
};

class TemporalEncoder {
 public:
  TemporalEncoder() = default;
  TemporalEncoder(std::size_t in_width, std::size_t hidden, Rng& rng, std::string prefix = "enc");

  /// x: [B, T, in_width] -> h: [B, 128]; conv-ReLU-conv-ReLU-mean.
  Tensor forward(const Tensor& x) const;
  ParamRefs parameters();
  void copy_from(const TemporalEncoder& other);
  std::size_t in_width() const { return in_width_; }
  std::size_t hidden() const { return hidden_; }

 private:
  std::size_t in_width_ = 0;
  std::size_t hidden_ = 0;
  Parameter c1w_, c1b_, c2w_, c2b_;
};

enum class AssignmentMode { kSequential, kRandom, kFull };
AssignmentMode parse_assignment(const std::string& s);
std::string assignment_name(AssignmentMode m);

struct FrameAssignment {
  AssignmentMode mode = AssignmentMode::kSequential;
  std::vector<std::vector<std::size_t>> frames;  // per agent
};

/// Sequential: contiguous near-equal blocks in order (remainder goes to the
/// leading blocks, so T=8, N=3 gives 3/3/2). Random: a seeded permutation cut
/// into the same block sizes. Full: every agent sees every frame.
FrameAssignment build_frame_assignment(std::size_t n_agents, std::size_t frames, AssignmentMode mode, Rng& rng);

enum class ChannelMode { kDiscrete, kContinuous };
ChannelMode parse_channel(const std::string& s);
std::string channel_name(ChannelMode m);

enum class SampleMode { kSoft, kHard, kEval };

struct SenderConfig {
  std::size_t n_agents = 2;
  std::size_t positions = 2;  // K
  std::size_t vocab = 5;      // V
  std::size_t hidden = 256;   // temporal encoder hidden channels
  ChannelMode channel = ChannelMode::kDiscrete;

  std::size_t agent_width() const { return positions * vocab; }
  std::size_t bundle_width() const { return n_agents * positions * vocab; }
};

/// Bounded continuous message: tanh of the head pre-activation.
Tensor continuous_channel(const Tensor& preactivation);

/// One agent: its own temporal encoder plus K linear heads 128 -> V.
class Agent {
 public:
  Agent() = default;
  Agent(const SenderConfig& cfg, std::size_t in_width, Rng& rng, std::string prefix);

  Tensor head_logits(const Tensor& h) const;  // [B, K*V]
  /// K channel samples, concatenated to [B, K*V].
  Tensor emit(const Tensor& h, double temperature, SampleMode mode, Rng& rng) const;
  TemporalEncoder& encoder() { return encoder_; }
  const TemporalEncoder& encoder() const { return encoder_; }
  ParamRefs parameters();

 private:
  SenderConfig cfg_;
  TemporalEncoder encoder_;
  Parameter head_w_, head_b_;
};

/// Output of a sender group for a batch of scenes.
struct Emission {
  Tensor bundle;               // [B, N*K*V]
  std::vector<Tensor> logits;  // per agent [B, K*V]
};

/// N agents observing disjoint frame subsets of the same scene.
class SenderGroup {
 public:
  SenderGroup() = default;
  SenderGroup(const SenderConfig& cfg, FrameAssignment assignment, std::size_t in_width, Rng& rng);

  const SenderConfig& config() const { return cfg_; }
  const FrameAssignment& assignment() const { return assignment_; }
  std::size_t agent_count() const { return agents_.size(); }
  Agent& agent(std::size_t i) { return agents_.at(i); }

  /// Representation of one agent for a batch of scenes.
  Tensor encode(const FeatureBank& bank, std::span<const std::size_t> ids, std::size_t agent) const;
  /// Logits for every agent on the given scenes.
  std::vector<Tensor> logits(const FeatureBank& bank, std::span<const std::size_t> ids) const;
  /// Channel samples from precomputed per-agent logits (rows may be gathered).
  Tensor sample(const std::vector<Tensor>& logits, double temperature, SampleMode mode, Rng& rng) const;
  Emission emit(const FeatureBank& bank, std::span<const std::size_t> ids, double temperature, SampleMode mode,
                Rng& rng) const;
  /// Eval-mode argmax symbols, one row of N*K symbols per scene.
  std::vector<std::vector<std::size_t>> symbols(const FeatureBank& bank, std::span<const std::size_t> ids) const;

  void copy_encoders_from(const TemporalEncoder& enc);
  ParamRefs parameters();

 private:
  SenderConfig cfg_;
  FrameAssignment assignment_;
  std::vector<Agent> agents_;
};

struct ReceiverConfig {
  std::size_t input_width = 40;  // both scenes' bundles
  std::size_t outputs = 2;       // one sigmoid per compared property
  std::size_t prefix_heads = 1;  // >1 for an impatient listener
};

/// MLP trunk in -> 128 -> 64 (ReLU) with one logit per compared property.
class Receiver {
 public:
  Receiver() = default;
  Receiver(const ReceiverConfig& cfg, Rng& rng);

  const ReceiverConfig& config() const { return cfg_; }
  /// Logits [B, outputs] from the last head. Throws on width mismatch.
  Tensor forward(const Tensor& input) const;
  Tensor forward_head(const Tensor& input, std::size_t head) const;
  /// Probability that A is higher, per property.
  Tensor predict(const Tensor& input) const;
  void reinitialize(Rng& rng);
  ParamRefs parameters();

 private:
  void build(Rng& rng);
  ReceiverConfig cfg_;
  Parameter w1_, b1_, w2_, b2_;
  std::vector<Parameter> head_w_, head_b_;
};

/// Concatenates scene-A and scene-B bundles into receiver input.
Tensor pair_input(const Tensor& bundle_a, const Tensor& bundle_b);

/// Direct comparator: shared temporal encoder on both full scenes, then an
/// MLP on [h_a, h_b].
class Oracle {
 public:
  Oracle() = default;
  Oracle(std::size_t in_width, std::size_t hidden, std::size_t outputs, Rng& rng);

  Tensor forward(const FeatureBank& bank, std::span<const std::size_t> ids_a, std::span<const std::size_t> ids_b,
                 std::span<const std::size_t> frames) const;
  TemporalEncoder& encoder() { return encoder_; }
  const TemporalEncoder& encoder() const { return encoder_; }
  ParamRefs parameters();

 private:
  TemporalEncoder encoder_;
  Parameter w1_, b1_, w2_, b2_;
};

// ---- checkpoints -----------------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

/// `<dir>/checkpoint.manifest` (key=value) + `<dir>/params.bin` (named float64
/// blobs: name, rank, extents, row-major payload).
void save_checkpoint(const std::filesystem::path& dir, const KeyValues& manifest, const ParamRefs& params);
KeyValues load_checkpoint(const std::filesystem::path& dir, const ParamRefs& params);

}  // namespace emcomm
