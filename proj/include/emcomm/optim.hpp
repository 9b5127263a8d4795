#pragma once

#include "emcomm/tensor.hpp"

#include <cstdint>
#include <vector>

namespace emcomm {

/// Adaptive-moment optimizer state bound to a fixed parameter list.
struct OptimizerState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first;   // per parameter
  std::vector<std::vector<double>> second;  // per parameter

  static OptimizerState for_params(const ParamRefs& params, double lr);
  /// Zero moments and step counter, keeping the learning rate.
  void reset();
};

/// One bias-corrected Adam update over the trainable parameters. Throws
/// std::logic_error when a trainable parameter carries no gradient or the
/// parameter list does not match the state it was built for.
void optimizer_step(OptimizerState& state, const ParamRefs& params);

struct ClipReport {
  double pre_norm = 0.0;
  double post_norm = 0.0;
  double scale = 1.0;
};

/// Rescales the concatenated gradient so its global L2 norm is at most
/// max_norm. No-op when already within the bound.
ClipReport clip_gradients(const ParamRefs& params, double max_norm);

double grad_norm(const ParamRefs& params);

}  // namespace emcomm
