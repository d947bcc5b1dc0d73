#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "snr/ops.hpp"
#include "snr/random.hpp"
#include "snr/tensor.hpp"

namespace snr {

struct SnrConfig {
  std::size_t reduction = 16;
  double eps = 1e-5;
  // Biases on the two gate FC layers. Off gives the bias-free gate
  // a = σ(W2·δ(W1·pool(R))).
  bool gate_bias = true;
};

/// Width of the gate bottleneck, ⌈c/r⌉ but never below one.
inline std::size_t reduced_channels(std::size_t channels, std::size_t reduction) {
  if (reduction == 0) throw ContractError("reduction ratio must be >= 1");
  const std::size_t hidden = (channels + reduction - 1) / reduction;
  return hidden == 0 ? 1 : hidden;
}

/// Learnable parameter count of one module: IN affine pair, gate FC pair
/// with biases, and the K-way entropy head.
inline std::size_t param_count(std::size_t channels, std::size_t reduction, std::size_t classes) {
  if (channels == 0 || classes == 0) throw ContractError("param_count: channels and classes must be >= 1");
  const std::size_t hidden = reduced_channels(channels, reduction);
  return 2 * channels + (hidden * channels + hidden) + (channels * hidden + channels) + (classes * channels + classes);
}

/// Affine map followed by softmax used to score how ambiguous a feature is.
template <typename T>
struct EntropyHead {
  Tensor<T> weight;  // [K, c]
  Tensor<T> bias;    // [K]

  std::size_t classes() const { return weight.dim(0); }

  /// Class likelihoods for a [c] vector or a [n, c] batch of vectors.
  Tensor<T> probabilities(const Tensor<T>& features) const { return softmax(linear(features, weight, bias)); }
};

template <typename T>
struct SnrParams {
  Tensor<T> gamma;  // [c]
  Tensor<T> beta;   // [c]
  Tensor<T> w1;     // [hidden, c]
  Tensor<T> b1;     // [hidden], undefined when config.gate_bias is off
  Tensor<T> w2;     // [c, hidden]
  Tensor<T> b2;     // [c]
  EntropyHead<T> phi;
  SnrConfig config;

  std::size_t channels() const { return gamma.dim(0); }
  std::size_t hidden() const { return w1.dim(0); }
  std::size_t classes() const { return phi.classes(); }

  /// γ = 1, β = 0, weights uniform in ±1/√fan_in, biases 0.
  static SnrParams initialize(std::size_t channels, std::size_t classes, const SnrConfig& config, Rng& rng) {
    const std::size_t hidden = reduced_channels(channels, config.reduction);
    auto uniform = [&rng](Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::vector<T> v(numel(shape));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      return Tensor<T>(std::move(shape), std::move(v));
    };
    SnrParams p;
    p.config = config;
    p.gamma = Tensor<T>::full({channels}, T(1));
    p.beta = Tensor<T>::zeros({channels});
    p.w1 = uniform({hidden, channels}, channels);
    p.w2 = uniform({channels, hidden}, hidden);
    if (config.gate_bias) {
      p.b1 = Tensor<T>::zeros({hidden});
      p.b2 = Tensor<T>::zeros({channels});
    }
    p.phi.weight = uniform({classes, channels}, channels);
    p.phi.bias = Tensor<T>::zeros({classes});
    return p;
  }

  /// Parameters in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{{"gamma", gamma}, {"beta", beta}, {"w1", w1}};
    if (b1.defined()) out.emplace_back("b1", b1);
    out.emplace_back("w2", w2);
    if (b2.defined()) out.emplace_back("b2", b2);
    out.emplace_back("w_phi", phi.weight);
    out.emplace_back("b_phi", phi.bias);
    return out;
  }

  /// Copy whose tensors are fresh variables on `tape`.
  SnrParams on(Tape<T>& tape) const {
    SnrParams p = *this;
    for (Tensor<T>* t : {&p.gamma, &p.beta, &p.w1, &p.b1, &p.w2, &p.b2, &p.phi.weight, &p.phi.bias}) {
      if (t->defined()) *t = tape.variable(*t);
    }
    return p;
  }
};

/// Everything one forward pass yields. `f_minus` is undefined when the
/// contaminated branch was not materialized (inference).
template <typename T>
struct SnrOutputs {
  Tensor<T> f_norm;
  Tensor<T> residual;
  Tensor<T> r_plus;
  Tensor<T> r_minus;
  Tensor<T> gate;
  Tensor<T> f_plus;
  Tensor<T> f_minus;
};

/// γ_k·(f(:,:,k) − μ_k)/σ_k + β_k with statistics per sample and channel.
template <typename T>
Tensor<T> instance_normalize(const Tensor<T>& f, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  return channel_affine(normalize_channels(f, eps), gamma, beta);
}

/// R = F − F̃.
template <typename T>
Tensor<T> compute_residual(const Tensor<T>& f, const Tensor<T>& f_norm) {
  return sub(f, f_norm);
}

/// a = σ(W2·δ(W1·pool(R) + b1) + b2), one gate vector per sample.
template <typename T>
Tensor<T> channel_gate(const Tensor<T>& residual, const SnrParams<T>& params) {
  if (residual.shape().back() != params.channels()) {
    throw DimensionError("channel_gate: map has " + std::to_string(residual.shape().back()) +
                         " channels, module expects " + std::to_string(params.channels()));
  }
  const Tensor<T> hidden = relu(linear(global_avg_pool(residual), params.w1, params.b1));
  return sigmoid(linear(hidden, params.w2, params.b2));
}

/// R⁺(:,:,k) = a_k·R(:,:,k), R⁻(:,:,k) = (1 − a_k)·R(:,:,k).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> disentangle(const Tensor<T>& residual, const Tensor<T>& gate) {
  const Tensor<T> complement = sub(Tensor<T>::full(gate.shape(), T(1)), gate);
  return {scale_channels(residual, gate), scale_channels(residual, complement)};
}

template <typename T>
SnrOutputs<T> snr_forward(const Tensor<T>& f, const SnrParams<T>& params, bool materialize_contaminated = true) {
  if (f.rank() < 3 || f.shape().back() != params.channels()) {
    throw DimensionError("snr_forward: input " + to_string(f.shape()) + " does not match a module with " +
                         std::to_string(params.channels()) + " channels");
  }
  SnrOutputs<T> out;
  out.f_norm = instance_normalize(f, params.gamma, params.beta, static_cast<T>(params.config.eps));
  out.residual = compute_residual(f, out.f_norm);
  out.gate = channel_gate(out.residual, params);
  std::tie(out.r_plus, out.r_minus) = disentangle(out.residual, out.gate);
  out.f_plus = add(out.f_norm, out.r_plus);
  if (materialize_contaminated) out.f_minus = add(out.f_norm, out.r_minus);
  return out;
}

}  // namespace snr
