#pragma once

#include <cstdint>
#include <vector>

#include "snr/random.hpp"
#include "snr/tensor.hpp"

namespace snr::testing {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor<double>(std::move(shape), std::move(v));
}

inline Tensor<double> uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Random values kept at least `gap` away from zero.
inline Tensor<double> off_kink_tensor(Rng& rng, Shape shape, double gap = 1e-3) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    do {
      x = rng.normal();
    } while (std::abs(x) < gap);
  }
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Σ w ⊙ y with fixed random weights, so every output coordinate carries a
/// generic, nonzero share of the gradient.
struct Projection {
  Tensor<double> weights;
  Tensor<double> operator()(const Tensor<double>& y) const { return sum(mul(y, weights)); }
};

inline Projection projection(Rng& rng, const Shape& shape) { return {random_tensor(rng, shape)}; }

}  // namespace snr::testing
