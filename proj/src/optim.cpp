#include "emcomm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace emcomm {

OptimizerState OptimizerState::for_params(const ParamRefs& params, double lr) {
  OptimizerState s;
  s.lr = lr;
  for (const Parameter* p : params) {
    s.first.emplace_back(p->tensor.size(), 0.0);
    s.second.emplace_back(p->tensor.size(), 0.0);
  }
  return s;
}

void OptimizerState::reset() {
  step = 0;
  for (auto& m : first) std::fill(m.begin(), m.end(), 0.0);
  for (auto& v : second) std::fill(v.begin(), v.end(), 0.0);
}

void optimizer_step(OptimizerState& state, const ParamRefs& params) {
  if (params.size() != state.first.size())
    throw std::logic_error("optimizer_step: parameter list does not match optimizer state");
  for (const Parameter* p : params)
    if (p->trainable && !p->tensor.has_grad())
      throw std::logic_error("optimizer_step: parameter '" + p->name + "' has no gradient");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable) continue;
    auto& m = state.first[i];
    auto& v = state.second[i];
    if (m.size() != p.tensor.size()) throw std::logic_error("optimizer_step: moment shape mismatch for " + p.name);
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

double grad_norm(const ParamRefs& params) {
  double ss = 0.0;
  for (const Parameter* p : params) {
    if (!p->trainable || !p->tensor.has_grad()) continue;
    for (double g : p->tensor.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

ClipReport clip_gradients(const ParamRefs& params, double max_norm) {
  ClipReport r;
  r.pre_norm = grad_norm(params);
  r.post_norm = r.pre_norm;
  if (r.pre_norm > max_norm && r.pre_norm > 0.0) {
    r.scale = max_norm / r.pre_norm;
    for (Parameter* p : params) {
      if (!p->trainable || !p->tensor.has_grad()) continue;
      for (double& g : p->tensor.mutable_grad()) g *= r.scale;
    }
    r.post_norm = grad_norm(params);
  }
  return r;
}

}  // namespace emcomm
