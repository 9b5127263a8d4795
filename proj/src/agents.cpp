#include "emcomm/agents.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace emcomm {

Parameter make_linear_weight(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = u(rng);
  return {std::move(name), Tensor::from({fan_in, fan_out}, std::move(w), true), true};
}

Parameter make_linear_bias(std::string name, std::size_t fan_in, std::size_t n, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> b(n);
  for (double& v : b) v = u(rng);
  return {std::move(name), Tensor::from({n}, std::move(b), true), true};
}

namespace {
void copy_values(Parameter& dst, const Parameter& src) {
  if (dst.tensor.shape() != src.tensor.shape())
    throw std::invalid_argument("copy: shape mismatch for " + dst.name + " " + shape_str(dst.tensor.shape()) +
                                " vs " + shape_str(src.tensor.shape()));
  std::copy(src.tensor.values().begin(), src.tensor.values().end(), dst.tensor.mutable_values().begin());
}

Tensor affine(const Tensor& x, const Parameter& w, const Parameter& b) { return add_row(matmul(x, w.tensor), b.tensor); }
}  // namespace

// ---- frozen encoder ----------------------------------------------------------------

FrozenRandomEncoder::FrozenRandomEncoder(std::size_t in_dim, Rng& rng)
    : in_dim_(in_dim),
      w1_(make_weight("frozen.w1", in_dim, kFrozenWidth, rng, false)),
      b1_(make_bias("frozen.b1", kFrozenWidth, false)),
      w2_(make_weight("frozen.w2", kFrozenWidth, kFrozenWidth, rng, false)),
      b2_(make_bias("frozen.b2", kFrozenWidth, false)) {}

std::vector<double> FrozenRandomEncoder::encode(std::span<const double> rows, std::size_t n) const {
  if (rows.size() != n * in_dim_) throw std::invalid_argument("FrozenRandomEncoder: input width mismatch");
  Tensor x = Tensor::from({n, in_dim_}, std::vector<double>(rows.begin(), rows.end()));
  Tensor y = affine(relu(affine(x, w1_, b1_)), w2_, b2_);
  return {y.values().begin(), y.values().end()};
}

ParamRefs FrozenRandomEncoder::parameters() { return {&w1_, &b1_, &w2_, &b2_}; }

FeatureBank FeatureBank::encode(const Dataset& data, const FrozenRandomEncoder& enc) {
  FeatureBank fb;
  fb.frames = data.frames;
  fb.width = kFrozenWidth;
  for (const Scene& s : data.scenes) fb.per_scene.push_back(enc.encode(s.features, s.frames));
  return fb;
}

FeatureBank FeatureBank::identity(const Dataset& data) {
  FeatureBank fb;
  fb.frames = data.frames;
  fb.width = data.dims;
  for (const Scene& s : data.scenes) fb.per_scene.push_back(s.features);
  return fb;
}

Tensor FeatureBank::batch(std::span<const std::size_t> ids, std::span<const std::size_t> frame_idx) const {
  if (frame_idx.empty()) throw std::invalid_argument("FeatureBank::batch: empty frame assignment");
  std::vector<double> out;
  out.reserve(ids.size() * frame_idx.size() * width);
  for (std::size_t id : ids) {
    const auto& f = per_scene.at(id);
    for (std::size_t t : frame_idx) {
      if (t >= frames) throw std::invalid_argument("FeatureBank::batch: frame index out of range");
      out.insert(out.end(), f.begin() + static_cast<long>(t * width), f.begin() + static_cast<long>((t + 1) * width));
    }
  }
  return Tensor::from({ids.size(), frame_idx.size(), width}, std::move(out));
}

// ---- temporal encoder ----------------------------------------------------------------

TemporalEncoder::TemporalEncoder(std::size_t in_width, std::size_t hidden, Rng& rng, std::string prefix)
    : in_width_(in_width), hidden_(hidden) {
  constexpr std::size_t kTaps = 3;
  c1w_ = make_linear_weight(prefix + ".conv1.w", kTaps * in_width, hidden, rng);
  c1b_ = make_linear_bias(prefix + ".conv1.b", kTaps * in_width, hidden, rng);
  c2w_ = make_linear_weight(prefix + ".conv2.w", kTaps * hidden, kSceneRepr, rng);
  c2b_ = make_linear_bias(prefix + ".conv2.b", kTaps * hidden, kSceneRepr, rng);
}

Tensor TemporalEncoder::forward(const Tensor& x) const {
  return mean_time(relu(conv1d(relu(conv1d(x, c1w_.tensor, c1b_.tensor)), c2w_.tensor, c2b_.tensor)));
}

ParamRefs TemporalEncoder::parameters() { return {&c1w_, &c1b_, &c2w_, &c2b_}; }

void TemporalEncoder::copy_from(const TemporalEncoder& other) {
  copy_values(c1w_, other.c1w_);
  copy_values(c1b_, other.c1b_);
  copy_values(c2w_, other.c2w_);
  copy_values(c2b_, other.c2b_);
}

// ---- frame assignment ------------------------------------------------------------------

AssignmentMode parse_assignment(const std::string& s) {
  if (s == "sequential") return AssignmentMode::kSequential;
  if (s == "random") return AssignmentMode::kRandom;
  if (s == "full") return AssignmentMode::kFull;
  throw std::invalid_argument("unknown assignment mode '" + s + "'");
}

std::string assignment_name(AssignmentMode m) {
  switch (m) {
    case AssignmentMode::kSequential: return "sequential";
    case AssignmentMode::kRandom: return "random";
    case AssignmentMode::kFull: return "full";
  }
  return "unknown";
}

FrameAssignment build_frame_assignment(std::size_t n_agents, std::size_t frames, AssignmentMode mode, Rng& rng) {
  if (n_agents == 0) throw std::invalid_argument("build_frame_assignment: need at least one agent");
  if (n_agents > frames)
    throw std::invalid_argument("build_frame_assignment: " + std::to_string(n_agents) + " agents exceed " +
                                std::to_string(frames) + " frames");
  FrameAssignment fa;
  fa.mode = mode;
  std::vector<std::size_t> order(frames);
  std::iota(order.begin(), order.end(), 0);
  if (mode == AssignmentMode::kFull) {
    fa.frames.assign(n_agents, order);
    return fa;
  }
  if (mode == AssignmentMode::kRandom) std::shuffle(order.begin(), order.end(), rng);
  const std::size_t base = frames / n_agents, extra = frames % n_agents;
  std::size_t pos = 0;
  for (std::size_t a = 0; a < n_agents; ++a) {
    const std::size_t len = base + (a < extra ? 1 : 0);
    std::vector<std::size_t> block(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + len));
    // Frames within a block keep temporal order for the convolution.
    std::sort(block.begin(), block.end());
    fa.frames.push_back(std::move(block));
    pos += len;
  }
  return fa;
}

ChannelMode parse_channel(const std::string& s) {
  if (s == "discrete") return ChannelMode::kDiscrete;
  if (s == "continuous") return ChannelMode::kContinuous;
  throw std::invalid_argument("unknown channel mode '" + s + "'");
}

std::string channel_name(ChannelMode m) { return m == ChannelMode::kDiscrete ? "discrete" : "continuous"; }

Tensor continuous_channel(const Tensor& preactivation) { return emcomm::tanh(preactivation); }

// ---- agents ------------------------------------------------------------------------

Agent::Agent(const SenderConfig& cfg, std::size_t in_width, Rng& rng, std::string prefix)
    : cfg_(cfg), encoder_(in_width, cfg.hidden, rng, prefix + ".enc") {
  if (cfg.positions < 1 || cfg.vocab < 2) throw std::invalid_argument("Agent: need K >= 1 and V >= 2");
  head_w_ = make_linear_weight(prefix + ".heads.w", kSceneRepr, cfg.agent_width(), rng);
  head_b_ = make_linear_bias(prefix + ".heads.b", kSceneRepr, cfg.agent_width(), rng);
}

Tensor Agent::head_logits(const Tensor& h) const { return affine(h, head_w_, head_b_); }

Tensor Agent::emit(const Tensor& h, double temperature, SampleMode mode, Rng& rng) const {
  Tensor logits = head_logits(h);
  if (cfg_.channel == ChannelMode::kContinuous) return continuous_channel(logits);
  std::vector<Tensor> parts;
  for (std::size_t k = 0; k < cfg_.positions; ++k) {
    Tensor lk = slice_cols(logits, k * cfg_.vocab, (k + 1) * cfg_.vocab);
    if (mode == SampleMode::kEval) parts.push_back(argmax_one_hot(lk));
    else parts.push_back(gumbel_softmax(lk, temperature, mode == SampleMode::kHard ? GumbelMode::kHard : GumbelMode::kSoft, rng));
  }
  return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

ParamRefs Agent::parameters() {
  ParamRefs p = encoder_.parameters();
  p.push_back(&head_w_);
  p.push_back(&head_b_);
  return p;
}

SenderGroup::SenderGroup(const SenderConfig& cfg, FrameAssignment assignment, std::size_t in_width, Rng& rng)
    : cfg_(cfg), assignment_(std::move(assignment)) {
  if (assignment_.frames.size() != cfg.n_agents)
    throw std::invalid_argument("SenderGroup: frame assignment covers " + std::to_string(assignment_.frames.size()) +
                                " agents, config has " + std::to_string(cfg.n_agents));
  for (std::size_t a = 0; a < cfg.n_agents; ++a) agents_.emplace_back(cfg, in_width, rng, "agent" + std::to_string(a));
}

Tensor SenderGroup::encode(const FeatureBank& bank, std::span<const std::size_t> ids, std::size_t agent) const {
  const auto& frames = assignment_.frames.at(agent);
  if (frames.empty()) throw std::invalid_argument("SenderGroup::encode: empty frame assignment");
  return agents_[agent].encoder().forward(bank.batch(ids, frames));
}

std::vector<Tensor> SenderGroup::logits(const FeatureBank& bank, std::span<const std::size_t> ids) const {
  std::vector<Tensor> out;
  for (std::size_t a = 0; a < agents_.size(); ++a) out.push_back(agents_[a].head_logits(encode(bank, ids, a)));
  return out;
}

Tensor SenderGroup::sample(const std::vector<Tensor>& logits, double temperature, SampleMode mode, Rng& rng) const {
  std::vector<Tensor> parts;
  for (const Tensor& l : logits) {
    if (cfg_.channel == ChannelMode::kContinuous) {
      parts.push_back(continuous_channel(l));
      continue;
    }
    for (std::size_t k = 0; k < cfg_.positions; ++k) {
      Tensor lk = slice_cols(l, k * cfg_.vocab, (k + 1) * cfg_.vocab);
      if (mode == SampleMode::kEval) parts.push_back(argmax_one_hot(lk));
      else
        parts.push_back(
            gumbel_softmax(lk, temperature, mode == SampleMode::kHard ? GumbelMode::kHard : GumbelMode::kSoft, rng));
    }
  }
  return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

Emission SenderGroup::emit(const FeatureBank& bank, std::span<const std::size_t> ids, double temperature,
                           SampleMode mode, Rng& rng) const {
  Emission e;
  e.logits = logits(bank, ids);
  e.bundle = sample(e.logits, temperature, mode, rng);
  return e;
}

std::vector<std::vector<std::size_t>> SenderGroup::symbols(const FeatureBank& bank,
                                                           std::span<const std::size_t> ids) const {
  auto lg = logits(bank, ids);
  const std::size_t K = cfg_.positions, V = cfg_.vocab;
  std::vector<std::vector<std::size_t>> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (const Tensor& l : lg)
      for (std::size_t k = 0; k < K; ++k) {
        const double* row = l.values().data() + i * K * V + k * V;
        out[i].push_back(static_cast<std::size_t>(std::max_element(row, row + V) - row));
      }
  return out;
}

void SenderGroup::copy_encoders_from(const TemporalEncoder& enc) {
  for (auto& a : agents_) a.encoder().copy_from(enc);
}

ParamRefs SenderGroup::parameters() {
  ParamRefs p;
  for (auto& a : agents_) {
    auto ap = a.parameters();
    p.insert(p.end(), ap.begin(), ap.end());
  }
  return p;
}

// ---- receiver --------------------------------------------------------------------

Receiver::Receiver(const ReceiverConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.prefix_heads < 1) throw std::invalid_argument("Receiver: need at least one head");
  build(rng);
}

void Receiver::build(Rng& rng) {
  w1_ = make_linear_weight("recv.w1", cfg_.input_width, 128, rng);
  b1_ = make_linear_bias("recv.b1", cfg_.input_width, 128, rng);
  w2_ = make_linear_weight("recv.w2", 128, 64, rng);
  b2_ = make_linear_bias("recv.b2", 128, 64, rng);
  head_w_.clear();
  head_b_.clear();
  for (std::size_t h = 0; h < cfg_.prefix_heads; ++h) {
    head_w_.push_back(make_linear_weight("recv.head" + std::to_string(h) + ".w", 64, cfg_.outputs, rng));
    head_b_.push_back(make_linear_bias("recv.head" + std::to_string(h) + ".b", 64, cfg_.outputs, rng));
  }
}

void Receiver::reinitialize(Rng& rng) {
  // Parameter storage is replaced in place so optimizer bindings stay valid.
  Receiver fresh(cfg_, rng);
  auto dst = parameters();
  auto src = fresh.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) copy_values(*dst[i], *src[i]);
}

Tensor Receiver::forward_head(const Tensor& input, std::size_t head) const {
  if (input.rank() != 2 || input.dim(1) != cfg_.input_width)
    throw std::invalid_argument("Receiver: input width " + (input.rank() == 2 ? std::to_string(input.dim(1)) : std::string("?")) +
                                " does not match expected " + std::to_string(cfg_.input_width));
  Tensor z = relu(affine(relu(affine(input, w1_, b1_)), w2_, b2_));
  return affine(z, head_w_.at(head), head_b_.at(head));
}

Tensor Receiver::forward(const Tensor& input) const { return forward_head(input, cfg_.prefix_heads - 1); }

Tensor Receiver::predict(const Tensor& input) const { return sigmoid(forward(input)); }

ParamRefs Receiver::parameters() {
  ParamRefs p{&w1_, &b1_, &w2_, &b2_};
  for (std::size_t h = 0; h < head_w_.size(); ++h) {
    p.push_back(&head_w_[h]);
    p.push_back(&head_b_[h]);
  }
  return p;
}

Tensor pair_input(const Tensor& bundle_a, const Tensor& bundle_b) { return concat_cols({bundle_a, bundle_b}); }

// ---- oracle ---------------------------------------------------------------------

Oracle::Oracle(std::size_t in_width, std::size_t hidden, std::size_t outputs, Rng& rng)
    : encoder_(in_width, hidden, rng, "oracle.enc") {
  w1_ = make_linear_weight("oracle.w1", 2 * kSceneRepr, 128, rng);
  b1_ = make_linear_bias("oracle.b1", 2 * kSceneRepr, 128, rng);
  w2_ = make_linear_weight("oracle.w2", 128, outputs, rng);
  b2_ = make_linear_bias("oracle.b2", 128, outputs, rng);
}

Tensor Oracle::forward(const FeatureBank& bank, std::span<const std::size_t> ids_a, std::span<const std::size_t> ids_b,
                       std::span<const std::size_t> frames) const {
  // Encode each distinct scene once, then gather both sides.
  std::vector<std::size_t> uniq(ids_a.begin(), ids_a.end());
  uniq.insert(uniq.end(), ids_b.begin(), ids_b.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  auto row_of = [&](std::size_t id) {
    return static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), id) - uniq.begin());
  };
  std::vector<std::size_t> ra, rb;
  for (std::size_t id : ids_a) ra.push_back(row_of(id));
  for (std::size_t id : ids_b) rb.push_back(row_of(id));
  Tensor h = encoder_.forward(bank.batch(uniq, frames));
  Tensor x = concat_cols({gather_rows(h, ra), gather_rows(h, rb)});
  return affine(relu(affine(x, w1_, b1_)), w2_, b2_);
}

ParamRefs Oracle::parameters() {
  ParamRefs p = encoder_.parameters();
  for (Parameter* q : {&w1_, &b1_, &w2_, &b2_}) p.push_back(q);
  return p;
}

// ---- checkpoints ------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const KeyValues& manifest, const ParamRefs& params) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "params.bin.tmp", std::ios::binary | std::ios::trunc);
    const char magic[8] = {'E', 'M', 'C', 'P', 'A', 'R', 'M', '\0'};
    os.write(magic, 8);
    auto put32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    put32(static_cast<std::uint32_t>(params.size()));
    for (const Parameter* p : params) {
      put32(static_cast<std::uint32_t>(p->name.size()));
      os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      put32(static_cast<std::uint32_t>(p->tensor.rank()));
      for (std::size_t e : p->tensor.shape()) put32(static_cast<std::uint32_t>(e));
      os.write(reinterpret_cast<const char*>(p->tensor.values().data()),
               static_cast<std::streamsize>(p->tensor.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed in " + dir.string());
  }
  {
    std::ofstream os(dir / "checkpoint.manifest.tmp", std::ios::trunc);
    for (auto& [k, v] : manifest) os << k << '=' << v << '\n';
    os << "param_count=" << params.size() << '\n';
  }
  std::filesystem::rename(dir / "params.bin.tmp", dir / "params.bin");
  std::filesystem::rename(dir / "checkpoint.manifest.tmp", dir / "checkpoint.manifest");
}

KeyValues load_checkpoint(const std::filesystem::path& dir, const ParamRefs& params) {
  KeyValues kv;
  {
    std::ifstream in(dir / "checkpoint.manifest");
    if (!in) throw std::runtime_error("load_checkpoint: missing manifest in " + dir.string());
    std::string line;
    while (std::getline(in, line)) {
      auto eq = line.find('=');
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  std::ifstream in(dir / "params.bin", std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: missing params.bin in " + dir.string());
  char magic[8];
  in.read(magic, 8);
  auto get32 = [&] {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw std::runtime_error("load_checkpoint: truncated params.bin");
    return v;
  };
  std::map<std::string, Parameter*> by_name;
  for (Parameter* p : params) by_name[p->name] = p;
  const std::uint32_t n = get32();
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name(get32(), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(get32());
    for (auto& e : shape) e = get32();
    std::vector<double> data(shape_size(shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated blob '" + name + "'");
    auto it = by_name.find(name);
    if (it == by_name.end()) continue;
    if (it->second->tensor.shape() != shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + name + "'");
    std::copy(data.begin(), data.end(), it->second->tensor.mutable_values().begin());
    ++loaded;
  }
  if (loaded != params.size())
    throw std::runtime_error("load_checkpoint: " + std::to_string(params.size() - loaded) + " parameters missing");
  return kv;
}

}  // namespace emcomm
