#include "emcomm/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace emcomm {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
  return mix(mix(mix(seed) ^ h) ^ index);
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

MapM as_mat(Buffer& v, std::size_t r, std::size_t c) {
  return MapM(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
CMapM as_cmat(const Buffer& v, std::size_t r, std::size_t c) {
  return CMapM(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_matrix(const Tensor& t, const char* op) {
  require(t.defined() && t.rank() == 2, std::string(op) + ": expected a rank-2 tensor, got " +
                                            (t.defined() ? shape_str(t.shape()) : "undefined"));
}

detail::Node& pnode(detail::Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

NonFiniteError::NonFiniteError(const std::string& op, bool in_backward)
    : std::runtime_error("non-finite value in " + std::string(in_backward ? "backward" : "forward") +
                         " of op '" + op + "'"),
      op_(op) {}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->value.assign(shape_size(shape), v);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::span<const double> values, bool requires_grad) {
  require(shape_size(shape) == values.size(),
          "Tensor::from: shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  if (!all_finite(values)) throw NonFiniteError("leaf", false);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value.assign(values.begin(), values.end());
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
  require(size() == 1, "Tensor::item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  require(defined() && size() == 1, "backward: loss must be a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior grads start from zero each pass; leaf grads accumulate.
  for (detail::Node* n : order)
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->backward) continue;
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backward(*n);
    for (auto& p : n->parents)
      if (p->requires_grad && !all_finite(p->grad)) throw NonFiniteError(n->op, true);
  }
  // Free interior gradient buffers.
  for (detail::Node* n : order)
    if (n->backward && n != node_.get()) Buffer().swap(n->grad);
}

Tensor make_result(std::string op, Shape shape, Buffer value, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward) {
  if (!all_finite(value)) throw NonFiniteError(op, false);
  auto n = std::make_shared<detail::Node>();
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (auto& p : parents) {
    rg = rg || p.requires_grad();
    n->parents.push_back(p.handle());
  }
  n->requires_grad = rg;
  if (rg) {
    n->backward = std::move(backward);
  } else {
    n->parents.clear();
  }
  return Tensor(std::move(n));
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Buffer out(m * n);
  as_mat(out, m, n).noalias() = as_cmat(a.node()->value, m, k) * as_cmat(b.node()->value, k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = pnode(self, 0);
    auto& pb = pnode(self, 1);
    auto g = as_cmat(self.grad, m, n);
    if (pa.requires_grad) as_mat(pa.grad, m, k).noalias() += g * as_cmat(pb.value, k, n).transpose();
    if (pb.requires_grad) as_mat(pb.grad, k, n).noalias() += as_cmat(pa.value, m, k).transpose() * g;
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_row");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(bias.size() == n, "add_row: bias length mismatch");
  Buffer out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias[j];
  return make_result("add_row", {m, n}, std::move(out), {x, bias}, [m, n](detail::Node& self) {
    auto& px = pnode(self, 0);
    auto& pb = pnode(self, 1);
    if (px.requires_grad)
      for (std::size_t i = 0; i < m * n; ++i) px.grad[i] += self.grad[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pb.grad[j] += self.grad[i * n + j];
  });
}

namespace {
template <class Fwd, class Bwd>
Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i], b[i]);
  return make_result(op, a.shape(), std::move(out), {a, b}, [bwd](detail::Node& self) {
    auto& pa = pnode(self, 0);
    auto& pb = pnode(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      auto [ga, gb] = bwd(pa.value[i], pb.value[i], self.grad[i]);
      if (pa.requires_grad) pa.grad[i] += ga;
      if (pb.requires_grad) pb.grad[i] += gb;
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [deriv](detail::Node& self) {
    auto& px = pnode(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * deriv(px.value[i], self.value[i]);
  });
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result("sum", {1}, {s}, {x}, [](detail::Node& self) {
    auto& px = pnode(self, 0);
    for (double& g : px.grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mean_rows(const Tensor& x) {
  require_matrix(x, "mean_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Buffer out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  for (double& v : out) v /= static_cast<double>(m);
  return make_result("mean_rows", {1, n}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& px = pnode(self, 0);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) px.grad[i * n + j] += self.grad[j] * inv;
  });
}

namespace {
void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = *std::max_element(in, in + n);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

// dx = y * (g - <g, y>) for y = softmax(x), accumulated with a factor.
void softmax_row_backward(const double* y, const double* g, double* dx, std::size_t n, double factor) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += factor * y[j] * (g[j] - dot);
}
}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Buffer out(m * n);
  for (std::size_t i = 0; i < m; ++i) softmax_row(x.values().data() + i * n, out.data() + i * n, n);
  return make_result("softmax_rows", {m, n}, std::move(out), {x}, [m, n](detail::Node& self) {
    auto& px = pnode(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      softmax_row_backward(self.value.data() + i * n, self.grad.data() + i * n, px.grad.data() + i * n, n, 1.0);
  });
}

Tensor row_entropy(const Tensor& p) {
  require_matrix(p, "row_entropy");
  const std::size_t m = p.dim(0), n = p.dim(1);
  static constexpr double kFloor = 1e-12;
  Buffer out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double v = p[i * n + j];
      if (v > 0.0) out[i] -= v * std::log(v);
    }
  return make_result("row_entropy", {m}, std::move(out), {p}, [m, n](detail::Node& self) {
    auto& pp = pnode(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double v = std::max(pp.value[i * n + j], kFloor);
        pp.grad[i * n + j] += -self.grad[i] * (std::log(v) + 1.0);
      }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  for (auto& t : parts) require_matrix(t, "concat_cols");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (auto& t : parts) {
    require(t.dim(0) == m, "concat_cols: row count mismatch");
    widths.push_back(t.dim(1));
    total += t.dim(1);
  }
  Buffer out(m * total);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[p].values().data() + i * widths[p], widths[p], out.data() + i * total + off);
    off += widths[p];
  }
  return make_result("concat_cols", {m, total}, std::move(out), parts, [m, total, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      auto& pp = pnode(self, p);
      if (pp.requires_grad)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[p]; ++j) pp.grad[i * widths[p] + j] += self.grad[i * total + off + j];
      off += widths[p];
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  require(begin < end && end <= n, "slice_cols: bad column range");
  const std::size_t w = end - begin;
  Buffer out(m * w);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.values().data() + i * n + begin, w, out.data() + i * w);
  return make_result("slice_cols", {m, w}, std::move(out), {x}, [m, n, w, begin](detail::Node& self) {
    auto& px = pnode(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) px.grad[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require(x.defined() && x.rank() >= 1, "gather_rows: undefined input");
  const std::size_t m = x.dim(0);
  const std::size_t w = x.size() / std::max<std::size_t>(m, 1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Buffer out(idx.size() * w);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < m, "gather_rows: row index out of range");
    std::copy_n(x.values().data() + idx[i] * w, w, out.data() + i * w);
  }
  Shape shape = x.shape();
  shape[0] = idx.size();
  return make_result("gather_rows", shape, std::move(out), {x}, [w, idx](detail::Node& self) {
    auto& px = pnode(self, 0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < w; ++j) px.grad[idx[i] * w + j] += self.grad[i * w + j];
  });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.defined() && x.rank() == 3, "conv1d: input must be [B,T,C]");
  require_matrix(weight, "conv1d");
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), Cout = weight.dim(1);
  require(weight.dim(0) % C == 0, "conv1d: weight rows must be taps*C");
  const std::size_t taps = weight.dim(0) / C;
  require(taps % 2 == 1, "conv1d: tap count must be odd");
  require(bias.size() == Cout, "conv1d: bias length mismatch");
  const long half = static_cast<long>(taps / 2);

  // Gathers the input rows read by one tap into a compact matrix; returns the
  // number of valid time steps per sequence.
  auto tap_rows = [B, T](long d, std::vector<std::size_t>& src, std::vector<std::size_t>& dst) {
    src.clear();
    dst.clear();
    for (std::size_t b = 0; b < B; ++b)
      for (long t = 0; t < static_cast<long>(T); ++t) {
        long s = t + d;
        if (s < 0 || s >= static_cast<long>(T)) continue;
        src.push_back(b * T + static_cast<std::size_t>(s));
        dst.push_back(b * T + static_cast<std::size_t>(t));
      }
  };

  Buffer out(B * T * Cout);
  auto O = as_mat(out, B * T, Cout);
  O.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), static_cast<Eigen::Index>(Cout));
  const auto& xv = x.node()->value;
  const auto& wv = weight.node()->value;
  std::vector<std::size_t> src, dst;
  for (std::size_t j = 0; j < taps; ++j) {
    const long d = static_cast<long>(j) - half;
    CMapM Wj(wv.data() + j * C * Cout, static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(Cout));
    if (d == 0) {
      O.noalias() += as_cmat(xv, B * T, C) * Wj;
      continue;
    }
    tap_rows(d, src, dst);
    if (src.empty()) continue;
    RowMat G(src.size(), C);
    for (std::size_t r = 0; r < src.size(); ++r) G.row(static_cast<Eigen::Index>(r)) = as_cmat(xv, B * T, C).row(static_cast<Eigen::Index>(src[r]));
    RowMat P = G * Wj;
    for (std::size_t r = 0; r < dst.size(); ++r) O.row(static_cast<Eigen::Index>(dst[r])) += P.row(static_cast<Eigen::Index>(r));
  }

  return make_result(
      "conv1d", {B, T, Cout}, std::move(out), {x, weight, bias},
      [B, T, C, Cout, taps, half, tap_rows](detail::Node& self) {
        auto& px = pnode(self, 0);
        auto& pw = pnode(self, 1);
        auto& pb = pnode(self, 2);
        auto Gout = as_cmat(self.grad, B * T, Cout);
        if (pb.requires_grad)
          Eigen::Map<Eigen::RowVectorXd>(pb.grad.data(), static_cast<Eigen::Index>(Cout)) += Gout.colwise().sum();
        std::vector<std::size_t> src, dst;
        for (std::size_t j = 0; j < taps; ++j) {
          const long d = static_cast<long>(j) - half;
          CMapM Wj(pw.value.data() + j * C * Cout, static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(Cout));
          MapM dWj(pw.grad.data() + j * C * Cout, static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(Cout));
          if (d == 0) {
            if (pw.requires_grad) dWj.noalias() += as_cmat(px.value, B * T, C).transpose() * Gout;
            if (px.requires_grad) as_mat(px.grad, B * T, C).noalias() += Gout * Wj.transpose();
            continue;
          }
          tap_rows(d, src, dst);
          if (src.empty()) continue;
          RowMat Gd(dst.size(), Cout);
          for (std::size_t r = 0; r < dst.size(); ++r) Gd.row(static_cast<Eigen::Index>(r)) = Gout.row(static_cast<Eigen::Index>(dst[r]));
          if (pw.requires_grad) {
            RowMat Xs(src.size(), C);
            for (std::size_t r = 0; r < src.size(); ++r)
              Xs.row(static_cast<Eigen::Index>(r)) = as_cmat(px.value, B * T, C).row(static_cast<Eigen::Index>(src[r]));
            dWj.noalias() += Xs.transpose() * Gd;
          }
          if (px.requires_grad) {
            RowMat dX = Gd * Wj.transpose();
            auto PX = as_mat(px.grad, B * T, C);
            for (std::size_t r = 0; r < src.size(); ++r) PX.row(static_cast<Eigen::Index>(src[r])) += dX.row(static_cast<Eigen::Index>(r));
          }
        }
      });
}

Tensor mean_time(const Tensor& x) {
  require(x.defined() && x.rank() == 3, "mean_time: input must be [B,T,C]");
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2);
  Buffer out(B * C, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) out[b * C + c] += x[(b * T + t) * C + c];
  const double inv = 1.0 / static_cast<double>(T);
  for (double& v : out) v *= inv;
  return make_result("mean_time", {B, C}, std::move(out), {x}, [B, T, C, inv](detail::Node& self) {
    auto& px = pnode(self, 0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) px.grad[(b * T + t) * C + c] += self.grad[b * C + c] * inv;
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  require_matrix(logits, "bce_with_logits");
  const std::size_t m = logits.dim(0), p = logits.dim(1);
  require(targets.size() == m * p, "bce_with_logits: target count mismatch");
  std::vector<double> tg(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < m * p; ++i) {
    const double z = logits[i];
    // max(z,0) - z*y + log(1 + exp(-|z|))
    total += std::max(z, 0.0) - z * tg[i] + std::log1p(std::exp(-std::abs(z)));
  }
  total /= static_cast<double>(m);
  return make_result("bce_with_logits", {1}, {total}, {logits}, [m, p, tg](detail::Node& self) {
    auto& pl = pnode(self, 0);
    const double g = self.grad[0] / static_cast<double>(m);
    for (std::size_t i = 0; i < m * p; ++i) {
      const double s = 1.0 / (1.0 + std::exp(-pl.value[i]));
      pl.grad[i] += g * (s - tg[i]);
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_matrix(logits, "softmax_cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  require(labels.size() == m, "softmax_cross_entropy: label count mismatch");
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Buffer probs(m * n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    require(lab[i] < n, "softmax_cross_entropy: label out of range");
    softmax_row(logits.values().data() + i * n, probs.data() + i * n, n);
    total -= std::log(std::max(probs[i * n + lab[i]], 1e-300));
  }
  total /= static_cast<double>(m);
  return make_result("softmax_cross_entropy", {1}, {total}, {logits},
                     [m, n, lab, probs = std::move(probs)](detail::Node& self) {
                       auto& pl = pnode(self, 0);
                       const double g = self.grad[0] / static_cast<double>(m);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           pl.grad[i * n + j] += g * (probs[i * n + j] - (j == lab[i] ? 1.0 : 0.0));
                     });
}

Tensor gumbel_softmax(const Tensor& logits, double temperature, GumbelMode mode, Rng& rng) {
  require_matrix(logits, "gumbel_softmax");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("gumbel_softmax: temperature must be positive and finite");
  if (!all_finite(logits.values())) throw NonFiniteError("gumbel_softmax", false);
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  require(n >= 2, "gumbel_softmax: vocabulary must have at least 2 symbols");

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Buffer perturbed(m * n);
  for (std::size_t i = 0; i < m * n; ++i) {
    const double u = std::clamp(unif(rng), 1e-10, 1.0 - 1e-10);
    perturbed[i] = (logits[i] - std::log(-std::log(u))) / temperature;
  }
  Buffer soft(m * n);
  for (std::size_t i = 0; i < m; ++i) softmax_row(perturbed.data() + i * n, soft.data() + i * n, n);

  Buffer out = soft;
  if (mode == GumbelMode::kHard) {
    for (std::size_t i = 0; i < m; ++i) {
      double* row = out.data() + i * n;
      const auto k = static_cast<std::size_t>(std::max_element(row, row + n) - row);
      std::fill(row, row + n, 0.0);
      row[k] = 1.0;
    }
  }
  const double inv_tau = 1.0 / temperature;
  return make_result(mode == GumbelMode::kHard ? "gumbel_softmax_hard" : "gumbel_softmax", {m, n}, std::move(out),
                     {logits}, [m, n, inv_tau, soft = std::move(soft)](detail::Node& self) {
                       auto& pl = pnode(self, 0);
                       for (std::size_t i = 0; i < m; ++i)
                         softmax_row_backward(soft.data() + i * n, self.grad.data() + i * n, pl.grad.data() + i * n,
                                              n, inv_tau);
                     });
}

Tensor argmax_one_hot(const Tensor& logits) {
  require_matrix(logits, "argmax_one_hot");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  Buffer out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = logits.values().data() + i * n;
    out[i * n + static_cast<std::size_t>(std::max_element(row, row + n) - row)] = 1.0;
  }
  return Tensor::from({m, n}, std::move(out));
}

// ---- parameters ------------------------------------------------------------

Parameter make_weight(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng, bool trainable) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> w(fan_in * fan_out);
  for (double& v : w) v = nd(rng);
  return {std::move(name), Tensor::from({fan_in, fan_out}, std::move(w), trainable), trainable};
}

Parameter make_bias(std::string name, std::size_t n, bool trainable) {
  return {std::move(name), Tensor::zeros({n}, trainable), trainable};
}

void forward_backward(const Tensor& loss, const ParamRefs& params) {
  if (!loss.defined() || loss.size() != 1) throw std::invalid_argument("forward_backward: loss must be a scalar");
  for (Parameter* p : params)
    if (p->trainable) p->tensor.zero_grad();
  loss.backward();
}

std::uint64_t checksum(std::span<const double> values, std::uint64_t h) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t checksum(const ParamRefs& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Parameter* p : params) h = checksum(p->tensor.values(), h);
  return h;
}

}  // namespace emcomm
