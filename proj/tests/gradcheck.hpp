// Central finite-difference gradient checks over the tensor op set.
#pragma once

#include "emcomm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace gradcheck {

using emcomm::Rng;
using emcomm::Shape;
using emcomm::Tensor;

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;
// Denominator floor so exact-zero gradients compare on an absolute scale.
inline constexpr double kFloor = 1e-3;

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Instance {
  std::vector<Tensor> inputs;
  Fn f;
};

struct OpCase {
  std::string name;
  std::function<Instance(Rng&)> make;
};

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.5, double hi = 1.5, bool away_from_zero = false) {
  std::vector<double> v(emcomm::shape_size(shape));
  for (auto& x : v) {
    do x = uniform(rng, lo, hi);
    while (away_from_zero && std::abs(x) < 0.02);
  }
  return Tensor::from(std::move(shape), v, true);
}

// Projects an op output onto a fixed random direction so every output entry
// contributes to the scalar being differentiated.
inline Tensor project(const Tensor& y, const std::vector<double>& dir) {
  return emcomm::sum(emcomm::mul(y, Tensor::from(y.shape(), dir)));
}

// Returns the largest relative error over all input entries.
inline double max_relative_error(const Instance& inst, Rng& rng) {
  Tensor y0 = inst.f(inst.inputs);
  std::vector<double> dir(y0.size());
  for (auto& d : dir) d = uniform(rng, -1.0, 1.0);
  for (Tensor x : inst.inputs) x.zero_grad();
  Tensor loss = project(y0, dir);
  loss.backward();
  double worst = 0.0;
  for (const auto& x : inst.inputs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    Tensor xm = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      xm.mutable_values()[i] = orig + kStep;
      const double up = project(inst.f(inst.inputs), dir).item();
      xm.mutable_values()[i] = orig - kStep;
      const double down = project(inst.f(inst.inputs), dir).item();
      xm.mutable_values()[i] = orig;
      const double numeric = (up - down) / (2.0 * kStep);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kFloor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

inline std::vector<OpCase> op_cases() {
  using namespace emcomm;
  std::vector<OpCase> cs;
  auto mn = [](Rng& r) { return std::pair{pick(r, 1, 5), pick(r, 2, 6)}; };

  cs.push_back({"matmul", [](Rng& r) {
                  const std::size_t m = pick(r, 1, 5), k = pick(r, 1, 6), n = pick(r, 1, 5);
                  return Instance{{random_tensor({m, k}, r), random_tensor({k, n}, r)},
                                  [](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); }};
                }});
  cs.push_back({"add_row", [mn](Rng& r) {
                  auto [m, n] = mn(r);
                  return Instance{{random_tensor({m, n}, r), random_tensor({n}, r)},
                                  [](const std::vector<Tensor>& x) { return add_row(x[0], x[1]); }};
                }});
  auto binary = [mn](std::string name, Tensor (*op)(const Tensor&, const Tensor&)) {
    return OpCase{name, [mn, op](Rng& r) {
                    auto [m, n] = mn(r);
                    return Instance{{random_tensor({m, n}, r), random_tensor({m, n}, r)},
                                    [op](const std::vector<Tensor>& x) { return op(x[0], x[1]); }};
                  }};
  };
  cs.push_back(binary("add", &add));
  cs.push_back(binary("sub", &sub));
  cs.push_back(binary("mul", &mul));
  cs.push_back({"scale", [mn](Rng& r) {
                  auto [m, n] = mn(r);
                  const double s = uniform(r, -3, 3);
                  return Instance{{random_tensor({m, n}, r)}, [s](const std::vector<Tensor>& x) { return scale(x[0], s); }};
                }});
  auto unary = [mn](std::string name, Tensor (*op)(const Tensor&), bool away = false) {
    return OpCase{name, [mn, op, away](Rng& r) {
                    auto [m, n] = mn(r);
                    return Instance{{random_tensor({m, n}, r, -2.0, 2.0, away)},
                                    [op](const std::vector<Tensor>& x) { return op(x[0]); }};
                  }};
  };
  cs.push_back(unary("relu", &relu, true));
  cs.push_back(unary("tanh", &emcomm::tanh));
  cs.push_back(unary("sigmoid", &sigmoid));
  cs.push_back(unary("sum", &emcomm::sum));
  cs.push_back(unary("mean", &mean));
  cs.push_back(unary("mean_rows", &mean_rows));
  cs.push_back(unary("softmax_rows", &softmax_rows));
  cs.push_back({"row_entropy", [mn](Rng& r) {
                  auto [m, n] = mn(r);
                  return Instance{{random_tensor({m, n}, r, 0.05, 1.0)},
                                  [](const std::vector<Tensor>& x) { return row_entropy(x[0]); }};
                }});
  cs.push_back({"concat_cols", [](Rng& r) {
                  const std::size_t m = pick(r, 1, 4), parts = pick(r, 1, 3);
                  std::vector<Tensor> in;
                  for (std::size_t p = 0; p < parts; ++p) in.push_back(random_tensor({m, pick(r, 1, 4)}, r));
                  return Instance{in, [](const std::vector<Tensor>& x) { return concat_cols(x); }};
                }});
  cs.push_back({"slice_cols", [](Rng& r) {
                  const std::size_t m = pick(r, 1, 4), n = pick(r, 2, 7);
                  const std::size_t b = pick(r, 0, n - 1), e = pick(r, b + 1, n);
                  return Instance{{random_tensor({m, n}, r)},
                                  [b, e](const std::vector<Tensor>& x) { return slice_cols(x[0], b, e); }};
                }});
  cs.push_back({"gather_rows", [](Rng& r) {
                  const std::size_t m = pick(r, 1, 5), n = pick(r, 1, 4), k = pick(r, 1, 7);
                  std::vector<std::size_t> rows(k);
                  for (auto& i : rows) i = pick(r, 0, m - 1);  // repeats exercise accumulation
                  return Instance{{random_tensor({m, n}, r)},
                                  [rows](const std::vector<Tensor>& x) { return gather_rows(x[0], rows); }};
                }});
  cs.push_back({"conv1d", [](Rng& r) {
                  const std::size_t B = pick(r, 1, 3), T = pick(r, 1, 5), C = pick(r, 1, 4), Co = pick(r, 1, 4);
                  return Instance{{random_tensor({B, T, C}, r), random_tensor({3 * C, Co}, r), random_tensor({Co}, r)},
                                  [](const std::vector<Tensor>& x) { return conv1d(x[0], x[1], x[2]); }};
                }});
  cs.push_back({"mean_time", [](Rng& r) {
                  const std::size_t B = pick(r, 1, 3), T = pick(r, 1, 5), C = pick(r, 1, 4);
                  return Instance{{random_tensor({B, T, C}, r)},
                                  [](const std::vector<Tensor>& x) { return mean_time(x[0]); }};
                }});
  cs.push_back({"bce_with_logits", [mn](Rng& r) {
                  auto [m, n] = mn(r);
                  std::vector<double> t(m * n);
                  for (auto& v : t) v = static_cast<double>(pick(r, 0, 1));
                  return Instance{{random_tensor({m, n}, r, -4, 4)},
                                  [t](const std::vector<Tensor>& x) { return bce_with_logits(x[0], t); }};
                }});
  cs.push_back({"softmax_cross_entropy", [mn](Rng& r) {
                  auto [m, n] = mn(r);
                  std::vector<std::size_t> labels(m);
                  for (auto& l : labels) l = pick(r, 0, n - 1);
                  return Instance{{random_tensor({m, n}, r, -3, 3)},
                                  [labels](const std::vector<Tensor>& x) { return softmax_cross_entropy(x[0], labels); }};
                }});
  cs.push_back({"gumbel_softmax", [mn](Rng& r) {
                  auto [m, n] = mn(r);
                  const double tau = uniform(r, 0.5, 2.0);
                  const std::uint64_t seed = r();
                  // Same noise on every evaluation.
                  return Instance{{random_tensor({m, n}, r)}, [tau, seed](const std::vector<Tensor>& x) {
                                    Rng g(seed);
                                    return gumbel_softmax(x[0], tau, GumbelMode::kSoft, g);
                                  }};
                }});
  cs.push_back({"mlp_bce", [](Rng& r) {
                  const std::size_t m = pick(r, 1, 4), d = pick(r, 1, 5), h = pick(r, 1, 6), p = pick(r, 1, 3);
                  std::vector<double> t(m * p);
                  for (auto& v : t) v = static_cast<double>(pick(r, 0, 1));
                  return Instance{{random_tensor({m, d}, r), random_tensor({d, h}, r), random_tensor({h}, r),
                                   random_tensor({h, p}, r), random_tensor({p}, r)},
                                  [t](const std::vector<Tensor>& x) {
                                    Tensor hid = emcomm::tanh(add_row(matmul(x[0], x[1]), x[2]));
                                    return bce_with_logits(add_row(matmul(hid, x[3]), x[4]), t);
                                  }};
                }});
  return cs;
}

struct CaseReport {
  std::string name;
  double worst = 0.0;
  std::size_t failures = 0;
};

inline std::vector<CaseReport> run_all(std::size_t instances, std::uint64_t seed) {
  std::vector<CaseReport> out;
  for (const auto& c : op_cases()) {
    Rng rng = emcomm::derive_rng(seed, c.name);
    CaseReport rep{c.name, 0.0, 0};
    for (std::size_t i = 0; i < instances; ++i) {
      const double e = max_relative_error(c.make(rng), rng);
      rep.worst = std::max(rep.worst, e);
      if (!(e < kTolerance)) ++rep.failures;
    }
    out.push_back(rep);
  }
  return out;
}

}  // namespace gradcheck
