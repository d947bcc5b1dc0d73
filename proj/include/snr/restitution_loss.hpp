#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "snr/ops.hpp"
#include "snr/snr_module.hpp"
#include "snr/tensor.hpp"

namespace snr {

template <typename T>
struct ModuleLoss {
  std::size_t module = 0;
  Tensor<T> l_plus;
  Tensor<T> l_minus;
};

/// L⁺, L⁻ and their sum over one or more SNR modules.
template <typename T>
struct LossBundle {
  Tensor<T> l_plus;
  Tensor<T> l_minus;
  Tensor<T> l_snr;
  std::vector<ModuleLoss<T>> per_module;
};

/// Ground-truth boxes of one image and the class of each box.
struct BoxSet {
  std::vector<Box> boxes;
  std::vector<std::size_t> classes;
};

namespace detail {

template <typename T>
LossBundle<T> compare_entropies(const Tensor<T>& h_norm, const Tensor<T>& h_plus, const Tensor<T>& h_minus,
                                std::size_t module) {
  Tensor<T> l_plus = softplus(sub(h_plus, h_norm));
  Tensor<T> l_minus = softplus(sub(h_norm, h_minus));
  if (l_plus.rank() != 0) {  // batch of per-sample losses
    l_plus = mean(l_plus);
    l_minus = mean(l_minus);
  }
  LossBundle<T> b;
  b.l_plus = l_plus;
  b.l_minus = l_minus;
  b.l_snr = add(l_plus, l_minus);
  b.per_module.push_back({module, l_plus, l_minus});
  return b;
}

template <typename T>
void require_loss_maps(const Tensor<T>& f_norm, const Tensor<T>& f_plus, const Tensor<T>& f_minus,
                       const EntropyHead<T>& phi, const char* op) {
  if (!f_minus.defined()) throw ContractError(std::string(op) + ": contaminated feature was not materialized");
  require_same_shape(f_norm.shape(), f_plus.shape(), op);
  require_same_shape(f_norm.shape(), f_minus.shape(), op);
  if (f_norm.rank() < 3 || f_norm.shape().back() != phi.weight.dim(1)) {
    throw DimensionError(std::string(op) + ": map " + to_string(f_norm.shape()) + " does not match entropy head " +
                         to_string(phi.weight.shape()));
  }
}

}  // namespace detail

/// Image-level form: entropies of φ applied to spatially pooled features.
/// A [n,h,w,c] batch gives the mean of the per-sample losses.
template <typename T>
LossBundle<T> classification_dual_loss(const Tensor<T>& f_norm, const Tensor<T>& f_plus, const Tensor<T>& f_minus,
                                       const EntropyHead<T>& phi, std::size_t module = 0) {
  detail::require_loss_maps(f_norm, f_plus, f_minus, phi, "classification_dual_loss");
  auto h = [&phi](const Tensor<T>& map) { return entropy(phi.probabilities(global_avg_pool(map))); };
  return detail::compare_entropies(h(f_norm), h(f_plus), h(f_minus), module);
}

/// Pixel-level form: φ at every position, entropies averaged over the map
/// before the single softplus comparison.
template <typename T>
LossBundle<T> segmentation_dual_loss(const Tensor<T>& f_norm, const Tensor<T>& f_plus, const Tensor<T>& f_minus,
                                     const EntropyHead<T>& phi, std::size_t module = 0) {
  detail::require_loss_maps(f_norm, f_plus, f_minus, phi, "segmentation_dual_loss");
  const Shape& s = f_norm.shape();
  const std::size_t c = s.back(), pixels = f_norm.size() / c;
  const Shape per_sample = s.size() == 3 ? Shape{pixels} : Shape{s[0], s[1] * s[2]};
  auto h = [&](const Tensor<T>& map) {
    const Tensor<T> rows = reshape(map, Shape{pixels, c});
    return mean_last(reshape(entropy(phi.probabilities(rows)), per_sample));
  };
  return detail::compare_entropies(h(f_norm), h(f_plus), h(f_minus), module);
}

/// Region-level form for one [h,w,c] map: φ on each box-pooled feature,
/// entropies averaged over boxes before the softplus comparison.
template <typename T>
LossBundle<T> detection_dual_loss(const Tensor<T>& f_norm, const Tensor<T>& f_plus, const Tensor<T>& f_minus,
                                  const BoxSet& boxes, const EntropyHead<T>& phi, std::size_t module = 0) {
  detail::require_loss_maps(f_norm, f_plus, f_minus, phi, "detection_dual_loss");
  if (f_norm.rank() != 3) throw DimensionError("detection_dual_loss: expects one [h,w,c] map per image");
  if (boxes.boxes.empty()) throw ContractError("detection_dual_loss: empty box set");
  auto h = [&](const Tensor<T>& map) {
    std::vector<Tensor<T>> pooled;
    pooled.reserve(boxes.boxes.size());
    for (const Box& b : boxes.boxes) pooled.push_back(region_avg_pool(map, b));
    return mean_last(entropy(phi.probabilities(stack(pooled))));
  };
  return detail::compare_entropies(h(f_norm), h(f_plus), h(f_minus), module);
}

/// Sums several per-module bundles into one.
template <typename T>
LossBundle<T> combine(const std::vector<LossBundle<T>>& bundles) {
  if (bundles.empty()) throw ContractError("combine: no loss bundles");
  LossBundle<T> out;
  for (const auto& b : bundles) {
    out.l_plus = out.l_plus.defined() ? add(out.l_plus, b.l_plus) : b.l_plus;
    out.l_minus = out.l_minus.defined() ? add(out.l_minus, b.l_minus) : b.l_minus;
    out.per_module.insert(out.per_module.end(), b.per_module.begin(), b.per_module.end());
  }
  out.l_snr = add(out.l_plus, out.l_minus);
  return out;
}

/// task + λ·Σ_modules (L⁺ + L⁻). With λ = 0 the task loss is returned
/// as is, so the graph carries no restitution term at all.
template <typename T>
Tensor<T> aggregate_snr_loss(const Tensor<T>& task_loss, const std::vector<LossBundle<T>>& bundles, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("aggregate_snr_loss: lambda must be >= 0");
  if (lambda == 0.0 || bundles.empty()) return task_loss;
  Tensor<T> snr_total;
  for (const auto& b : bundles) snr_total = snr_total.defined() ? add(snr_total, b.l_snr) : b.l_snr;
  return add(task_loss, scale(snr_total, static_cast<T>(lambda)));
}

}  // namespace snr
