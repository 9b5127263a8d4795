// Minimal reverse-mode automatic differentiation over dense float64 tensors.
//
// Tensors are cheap handles onto graph nodes. Every op records its parents and a
// backward closure; Tensor::backward() walks the graph in reverse topological
// order. The op set is intentionally small: it covers affine layers, temporal
// 1D convolution, pooling, pointwise nonlinearities, softmax, Gumbel-Softmax and
// the losses used by the signaling game.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <new>
#include <vector>

namespace emcomm {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_size(const Shape& shape);

/// Independent sub-stream seed: splitmix64 over (seed, tag hash, index).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);
inline Rng derive_rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, tag, index));
}
std::string shape_str(const Shape& shape);

/// Raised when a forward or backward pass produces NaN/Inf. The message names
/// the op that produced the non-finite value.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& op, bool in_backward);
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

// 64-byte aligned storage. Vectorized reductions peel according to the data
// address, so alignment has to be fixed for runs to reproduce bit for bit.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};
using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::span<const double> values, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false) {
    return from(std::move(shape), std::span<const double>(values.begin(), values.size()), requires_grad);
  }
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  const std::string& op() const { return node_->op; }

  /// Back-propagates d(this)/d(leaf) into every reachable leaf that requires
  /// grad. Leaf gradients accumulate; callers zero them between steps.
  /// Throws std::invalid_argument for a non-scalar root and NonFiniteError when
  /// a backward closure produces NaN/Inf.
  void backward() const;

  /// Copy of the values with no graph history.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(std::string op, Shape shape, Buffer value,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);

  std::shared_ptr<detail::Node> node_;
};

// Builds an op result; checks finiteness of the forward value. Internal to the
// op implementations but exposed so model code can define fused ops.
Tensor make_result(std::string op, Shape shape, Buffer value,
                   std::vector<Tensor> parents, std::function<void(detail::Node&)> backward);

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);            // [m,k] x [k,n]
Tensor add_row(const Tensor& x, const Tensor& bias);        // [m,n] + [n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);               // elementwise
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_rows(const Tensor& x);                          // [m,n] -> [1,n]
Tensor softmax_rows(const Tensor& x);
Tensor row_entropy(const Tensor& p);                        // [m,n] -> [m], nats, 0 log 0 = 0
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Temporal convolution with zero 'same' padding. x: [B,T,C]; weight:
/// [taps*C, Cout] (tap j reads frame t + j - taps/2); bias: [Cout].
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// Adaptive average pooling to one step: [B,T,C] -> [B,C].
Tensor mean_time(const Tensor& x);

/// Mean over rows of the per-row sum of binary cross-entropies between
/// sigmoid(logits) and targets in {0,1}. logits: [m,p]; targets length m*p.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);
/// Mean categorical cross-entropy. logits: [m,n]; labels: m class indices.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

enum class GumbelMode { kSoft, kHard };

/// Row-wise Gumbel-Softmax sample. Soft mode returns the relaxed sample; hard
/// mode returns the argmax one-hot forward while gradients flow through the
/// relaxed sample (straight-through).
Tensor gumbel_softmax(const Tensor& logits, double temperature, GumbelMode mode, Rng& rng);
/// Row-wise argmax one-hot, no noise, no gradient.
Tensor argmax_one_hot(const Tensor& logits);

// ---- parameters ------------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using ParamRefs = std::vector<Parameter*>;

/// He-normal (stddev sqrt(2/fan_in)) initialized trainable matrix.
Parameter make_weight(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                      bool trainable = true);
Parameter make_bias(std::string name, std::size_t n, bool trainable = true);

/// Zeroes every parameter gradient, then back-propagates the scalar loss.
/// Parameters the loss does not reach are left with zero gradients.
void forward_backward(const Tensor& loss, const ParamRefs& params);

/// FNV-1a over the raw parameter bytes; used to assert frozen weights.
std::uint64_t checksum(const ParamRefs& params);
std::uint64_t checksum(std::span<const double> values, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace emcomm
