#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "reto/error.hpp"
#include "reto/model.hpp"

namespace reto {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments mirror the parameter shapes; step counts updates.
template <std::floating_point T>
struct OptimizerState {
  std::vector<Matrix<T>> first_moment;
  std::vector<Matrix<T>> second_moment;
  std::uint64_t step = 0;

  static OptimizerState for_parameters(const ParameterStore<T>& params) {
    OptimizerState s;
    for (const auto& p : params) {
      s.first_moment.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      s.second_moment.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
    return s;
  }
};

// Bias-corrected Adam on the gradients stored in `params`. Gradients are
// checked before any parameter is touched, so an abort leaves params intact.
template <std::floating_point T>
void adam_step(ParameterStore<T>& params, OptimizerState<T>& state, const AdamConfig& config, double lr) {
  require(state.first_moment.size() == params.size() && state.second_moment.size() == params.size(),
          ErrorCode::Shape, "optimizer state does not match parameter store");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    require(state.first_moment[i].rows() == p.value.rows() && state.first_moment[i].cols() == p.value.cols(),
            ErrorCode::Shape, "optimizer moment shape mismatch for " + p.name);
    if (!p.grad.allFinite()) fail(ErrorCode::NonFiniteGradient, "non-finite gradient in parameter " + p.name);
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(config.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(config.beta2, t)));
  const T step = static_cast<T>(lr);
  const T eps = static_cast<T>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = b1 * m + (T(1) - b1) * p.grad;
    v = b2 * v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= step * (m.array() * c1) / ((v.array() * c2).sqrt() + eps);
  }
}

// lr = initial * factor^floor(epoch / step_epochs)
inline double steplr(int epoch, double initial_lr, double factor, int step_epochs) {
  require(epoch >= 0, ErrorCode::Bounds, "epoch must be non-negative");
  require(step_epochs >= 1, ErrorCode::Configuration, "lr_step_epochs must be >= 1");
  return initial_lr * std::pow(factor, epoch / step_epochs);
}

}  // namespace reto
