#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "snr/tensor.hpp"

namespace snr {

/// Worst coordinate found by a central-difference gradient check.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t input = 0;  // which input tensor
  std::size_t index = 0;  // flat coordinate inside it
  double analytic = 0.0;
  double numeric = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given step. `f` receives one tensor per input and
/// must work both on tape variables and on plain constants.
template <typename T, typename F>
GradCheckResult grad_check(F&& f, const std::vector<Tensor<T>>& inputs, double step = 1e-5) {
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Tensor<T>> vars;
    vars.reserve(inputs.size());
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    tape.backward(f(vars));
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  GradCheckResult worst;
  std::vector<Tensor<T>> probe(inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<T> values = inputs[i].values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const T saved = values[j];
      values[j] = saved + static_cast<T>(step);
      probe[i] = Tensor<T>(inputs[i].shape(), values);
      const double up = static_cast<double>(f(probe).item());
      values[j] = saved - static_cast<T>(step);
      probe[i] = Tensor<T>(inputs[i].shape(), values);
      const double down = static_cast<double>(f(probe).item());
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double ad = static_cast<double>(analytic[i][j]);
      const double err = relative_error(ad, numeric);
      if (err > worst.max_rel_error || (i == 0 && j == 0)) worst = {err, i, j, ad, numeric};
    }
    probe[i] = inputs[i];
  }
  return worst;
}

/// Single-input form; returns the maximum relative error.
template <typename T, typename F>
double grad_check(F&& f, const Tensor<T>& x, double step = 1e-5) {
  return grad_check<T>([&](const std::vector<Tensor<T>>& in) { return f(in[0]); }, std::vector<Tensor<T>>{x}, step)
      .max_rel_error;
}

}  // namespace snr
