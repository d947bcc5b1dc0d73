#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "snr/error.hpp"
#include "snr/grad_check.hpp"
#include "snr/harness/model.hpp"
#include "snr/ops.hpp"
#include "snr/random.hpp"
#include "snr/restitution_loss.hpp"
#include "snr/snr_module.hpp"

namespace snr::harness {

/// Outcome of one named check over all seeds.
struct GradSuiteEntry {
  std::string scope;
  std::string name;
  std::size_t seeds = 0;
  double max_rel_error = 0.0;
  std::uint64_t worst_seed = 0;
  GradCheckResult worst;
  bool passed = false;
};

namespace detail::grad {

using D = Tensor<double>;
using Inputs = std::vector<D>;
using Case = std::function<GradCheckResult(Rng&)>;

inline D normal(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return D(std::move(shape), std::move(v));
}

inline D off_kink(Rng& rng, Shape shape) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    do {
      x = rng.normal();
    } while (std::abs(x) < 1e-3);
  }
  return D(std::move(shape), std::move(v));
}

// Σ w ⊙ y with random weights so that every output coordinate matters.
inline std::function<D(const D&)> projection(Rng& rng, const Shape& shape) {
  D w = normal(rng, shape);
  return [w](const D& y) { return sum(mul(y, w)); };
}

// A check of `body` on inputs drawn fresh from the case's generator.
template <typename Make, typename Body>
Case make(Make make_inputs, Body body) {
  return [make_inputs, body](Rng& rng) {
    Inputs in = make_inputs(rng);
    auto f = body(rng, in);
    return grad_check<double>(f, in);
  };
}

// Unary op followed by a random projection of its output.
template <typename Op>
Case unary(Shape shape, Op op, bool avoid_kink = false, double scale = 1.0) {
  return make([=](Rng& rng) { return Inputs{avoid_kink ? off_kink(rng, shape) : normal(rng, shape, scale)}; },
              [=](Rng& rng, const Inputs& in) {
                const auto w = projection(rng, op(in[0]).shape());
                return [=](const Inputs& v) { return w(op(v[0])); };
              });
}

template <typename Op>
Case binary(Shape a, Shape b, Op op) {
  return make([=](Rng& rng) { return Inputs{normal(rng, a), normal(rng, b)}; },
              [=](Rng& rng, const Inputs& in) {
                const auto w = projection(rng, op(in[0], in[1]).shape());
                return [=](const Inputs& v) { return w(op(v[0], v[1])); };
              });
}

inline std::vector<std::pair<std::string, Case>> ops_cases() {
  std::vector<std::pair<std::string, Case>> c;
  c.emplace_back("add", binary({3, 4}, {3, 4}, [](const D& a, const D& b) { return add(a, b); }));
  c.emplace_back("sub", binary({3, 4}, {3, 4}, [](const D& a, const D& b) { return sub(a, b); }));
  c.emplace_back("mul", binary({3, 4}, {3, 4}, [](const D& a, const D& b) { return mul(a, b); }));
  c.emplace_back("scale", unary({3, 4}, [](const D& x) { return scale(x, 1.7); }));
  c.emplace_back("relu", unary({4, 5}, [](const D& x) { return relu(x); }, true));
  c.emplace_back("sigmoid", unary({4, 5}, [](const D& x) { return sigmoid(x); }, false, 2.0));
  c.emplace_back("softplus", unary({4, 5}, [](const D& x) { return softplus(x); }, false, 3.0));
  c.emplace_back("matmul", binary({3, 4}, {4, 2}, [](const D& a, const D& b) { return matmul(a, b); }));
  c.emplace_back("linear", make([](Rng& rng) { return Inputs{normal(rng, {3, 4}), normal(rng, {2, 4}), normal(rng, {2})}; },
                                [](Rng& rng, const Inputs&) {
                                  const auto w = projection(rng, {3, 2});
                                  return [=](const Inputs& v) { return w(linear(v[0], v[1], v[2])); };
                                }));
  c.emplace_back("conv2d/stride1", binary({2, 5, 5, 2}, {3, 3, 2, 3}, [](const D& x, const D& k) { return conv2d(x, k, 1, 1); }));
  c.emplace_back("conv2d/stride2", binary({1, 6, 6, 2}, {3, 3, 2, 3}, [](const D& x, const D& k) { return conv2d(x, k, 2, 1); }));
  c.emplace_back("add_channel_bias",
                 binary({2, 3, 3, 4}, {4}, [](const D& x, const D& b) { return add_channel_bias(x, b); }));
  c.emplace_back("channel_affine",
                 make([](Rng& rng) { return Inputs{normal(rng, {2, 3, 3, 4}), normal(rng, {4}), normal(rng, {4})}; },
                      [](Rng& rng, const Inputs&) {
                        const auto w = projection(rng, {2, 3, 3, 4});
                        return [=](const Inputs& v) { return w(channel_affine(v[0], v[1], v[2])); };
                      }));
  c.emplace_back("scale_channels",
                 binary({2, 3, 3, 4}, {2, 4}, [](const D& x, const D& a) { return scale_channels(x, a); }));
  c.emplace_back("global_avg_pool", unary({2, 3, 3, 4}, [](const D& x) { return global_avg_pool(x); }));
  c.emplace_back("region_avg_pool", unary({5, 5, 3}, [](const D& x) { return region_avg_pool(x, Box{1, 0, 4, 3}); }));
  c.emplace_back("channel_stats", make([](Rng& rng) { return Inputs{normal(rng, {2, 3, 3, 4})}; },
                                       [](Rng& rng, const Inputs&) {
                                         const auto wm = projection(rng, {2, 4}), ws = projection(rng, {2, 4});
                                         return [=](const Inputs& v) {
                                           const auto s = channel_stats(v[0], 1e-5);
                                           return add(wm(s.mu), ws(s.sigma));
                                         };
                                       }));
  c.emplace_back("normalize_channels", unary({2, 3, 3, 4}, [](const D& x) { return normalize_channels(x, 1e-5); }));
  c.emplace_back("softmax", unary({3, 5}, [](const D& x) { return softmax(x); }, false, 2.0));
  c.emplace_back("entropy", unary({3, 5}, [](const D& x) { return entropy(softmax(x)); }, false, 2.0));
  c.emplace_back("sum", unary({3, 4}, [](const D& x) { return sum(mul(x, x)); }));
  c.emplace_back("mean", unary({3, 4}, [](const D& x) { return mean(mul(x, x)); }));
  c.emplace_back("mean_last", unary({3, 4}, [](const D& x) { return mean_last(x); }));
  c.emplace_back("reshape", unary({3, 4}, [](const D& x) { return reshape(x, Shape{4, 3}); }));
  c.emplace_back("stack", binary({2, 3}, {2, 3}, [](const D& a, const D& b) { return stack(std::vector<D>{a, b}); }));
  c.emplace_back("cross_entropy", make([](Rng& rng) { return Inputs{normal(rng, {4, 3}, 2.0)}; },
                                       [](Rng& rng, const Inputs&) {
                                         std::vector<std::size_t> labels(4);
                                         for (auto& l : labels) l = rng.below(3);
                                         return [=](const Inputs& v) { return cross_entropy(v[0], labels); };
                                       }));
  return c;
}

// SNR parameters as a flat input list in SnrParams::named() order.
inline Inputs snr_inputs(Rng& rng, std::size_t c, std::size_t k, const SnrConfig& cfg) {
  auto p = SnrParams<double>::initialize(c, k, cfg, rng);
  Inputs in;
  for (const auto& [name, t] : p.named()) in.push_back(add(t, normal(rng, t.shape(), 0.3)));
  return in;
}

inline SnrParams<double> snr_from(const Inputs& v, std::size_t first, const SnrConfig& cfg) {
  SnrParams<double> p;
  p.config = cfg;
  std::size_t i = first;
  p.gamma = v[i++];
  p.beta = v[i++];
  p.w1 = v[i++];
  if (cfg.gate_bias) p.b1 = v[i++];
  p.w2 = v[i++];
  if (cfg.gate_bias) p.b2 = v[i++];
  p.phi.weight = v[i++];
  p.phi.bias = v[i++];
  return p;
}

inline Case snr_forward_case(bool gate_bias) {
  SnrConfig cfg;
  cfg.reduction = 2;
  cfg.gate_bias = gate_bias;
  return make(
      [cfg](Rng& rng) {
        Inputs in{normal(rng, {2, 3, 3, 4})};
        for (auto& t : snr_inputs(rng, 4, 3, cfg)) in.push_back(t);
        return in;
      },
      [cfg](Rng& rng, const Inputs&) {
        const auto wp = projection(rng, {2}), wmap = projection(rng, {2, 3, 3, 4});
        return [=](const Inputs& v) {
          const auto p = snr_from(v, 1, cfg);
          const auto o = snr_forward(v[0], p);
          const D hp = entropy(p.phi.probabilities(global_avg_pool(o.f_plus)));
          const D hm = entropy(p.phi.probabilities(global_avg_pool(o.f_minus)));
          return add(add(wp(hp), sum(mul(hm, hm))), wmap(o.f_plus));
        };
      });
}

inline std::vector<std::pair<std::string, Case>> snr_cases() {
  std::vector<std::pair<std::string, Case>> c;
  c.emplace_back("instance_normalize",
                 make([](Rng& rng) { return Inputs{normal(rng, {2, 3, 3, 4}, 2.0), normal(rng, {4}), normal(rng, {4})}; },
                      [](Rng& rng, const Inputs&) {
                        const auto w = projection(rng, {2, 3, 3, 4});
                        return [=](const Inputs& v) { return w(instance_normalize(v[0], v[1], v[2], 1e-5)); };
                      }));
  c.emplace_back("channel_gate", make(
                                     [](Rng& rng) {
                                       Inputs in{normal(rng, {2, 3, 3, 4})};
                                       for (auto& t : snr_inputs(rng, 4, 3, SnrConfig{2, 1e-5, true})) in.push_back(t);
                                       return in;
                                     },
                                     [](Rng& rng, const Inputs&) {
                                       const auto w = projection(rng, {2, 4});
                                       return [=](const Inputs& v) {
                                         return w(channel_gate(v[0], snr_from(v, 1, SnrConfig{2, 1e-5, true})));
                                       };
                                     }));
  c.emplace_back("disentangle", make([](Rng& rng) { return Inputs{normal(rng, {3, 3, 4}), normal(rng, {4})}; },
                                     [](Rng& rng, const Inputs&) {
                                       const auto wp = projection(rng, {3, 3, 4}), wm = projection(rng, {3, 3, 4});
                                       return [=](const Inputs& v) {
                                         const auto [rp, rm] = disentangle(v[0], sigmoid(v[1]));
                                         return add(wp(rp), wm(rm));
                                       };
                                     }));
  c.emplace_back("snr_module", snr_forward_case(true));
  c.emplace_back("snr_module/bias_free", snr_forward_case(false));
  return c;
}

// Three random maps plus an entropy head; the loss mixes L⁺ and L⁻ with
// random weights.
template <typename Loss>
Case dual_loss_case(Shape map, Loss loss, double head_scale = 2.0) {
  return make(
      [map, head_scale](Rng& rng) {
        const std::size_t c = map.back();
        return Inputs{normal(rng, map), normal(rng, map), normal(rng, map), normal(rng, {4, c}, head_scale),
                      normal(rng, {4}, 0.5)};
      },
      [loss](Rng& rng, const Inputs&) {
        const double a = rng.normal(), b = rng.normal();
        return [=](const Inputs& v) {
          const auto bundle = loss(v[0], v[1], v[2], EntropyHead<double>{v[3], v[4]});
          return add(scale(bundle.l_plus, a), scale(bundle.l_minus, b));
        };
      });
}

inline std::vector<std::pair<std::string, Case>> loss_cases() {
  std::vector<std::pair<std::string, Case>> c;
  c.emplace_back("classification_dual_loss",
                 dual_loss_case({2, 3, 3, 3}, [](const D& a, const D& b, const D& m, const EntropyHead<double>& p) {
                   return classification_dual_loss(a, b, m, p);
                 }));
  c.emplace_back("segmentation_dual_loss",
                 dual_loss_case({3, 2, 3}, [](const D& a, const D& b, const D& m, const EntropyHead<double>& p) {
                   return segmentation_dual_loss(a, b, m, p);
                 }, 1.0));
  c.emplace_back("detection_dual_loss",
                 dual_loss_case({3, 4, 3}, [](const D& a, const D& b, const D& m, const EntropyHead<double>& p) {
                   const BoxSet boxes{{{0, 0, 2, 2}, {1, 1, 4, 3}, {2, 0, 3, 3}}, {0, 1, 2}};
                   return detection_dual_loss(a, b, m, boxes, p);
                 }));
  c.emplace_back("aggregate_snr_loss",
                 dual_loss_case({2, 2, 2, 3}, [](const D& a, const D& b, const D& m, const EntropyHead<double>& p) {
                   auto bundle = classification_dual_loss(a, b, m, p);
                   bundle.l_plus = aggregate_snr_loss(sum(mul(a, a)), {bundle}, 0.7);
                   return bundle;
                 }));
  return c;
}

// The full network: conv stages with SNR modules, classifier, cross-entropy
// plus the dual loss, differentiated w.r.t. the images and every parameter.
inline Case model_case() {
  ModelSpec spec;
  spec.stages = {{4, 2}, {4, 1}, {4, 1}};
  spec.snr_after_stage = {true, true, false};
  spec.snr.reduction = 2;
  return [spec](Rng& rng) {
    const Model<double> model(spec, rng.next());
    const auto bound = model.bind(nullptr);
    // Redraw until no ReLU input sits within 1e-3 of the kink, where a
    // central difference would straddle it.
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Inputs in{normal(rng, {2, 6, 6, 3})};
      // SNR parameters moved off their initialization: near γ = 1, β = 0 and
      // a uniform φ several gradients vanish and the check would only see
      // noise.
      for (std::size_t i = 0; i < bound.size(); ++i) {
        in.push_back(model.params()[i].snr_module >= 0 ? add(bound[i], normal(rng, bound[i].shape(), 0.5)) : bound[i]);
      }
      const auto probe = model.forward_with(in[0], Inputs(in.begin() + 1, in.end()));
      bool near_kink = false;
      for (const auto& z : probe.pre_activations)
        for (const double v : z.values()) near_kink = near_kink || std::abs(v) < 1e-3;
      if (near_kink) continue;
      const std::vector<std::size_t> labels{rng.below(4), rng.below(4)};
      const double lambda = rng.uniform(0.5, 1.5);
      auto f = [&](const Inputs& v) {
        const auto fwd = model.forward_with(v[0], Inputs(v.begin() + 1, v.end()));
        return aggregate_snr_loss(cross_entropy(fwd.logits, labels), model.dual_losses(fwd), lambda);
      };
      return grad_check<double>(f, in);
    }
    throw NumericalError("grad-check: no kink-free network sample found");
  };
}

}  // namespace detail::grad

inline const std::vector<std::string>& grad_scopes() {
  static const std::vector<std::string> s{"ops", "snr", "loss", "model"};
  return s;
}

/// Runs every check of `scope` (model = all of the others plus the full
/// network) on seeds 0..seeds-1 in 64-bit with step 1e-5.
inline std::vector<GradSuiteEntry> run_grad_suite(const std::string& scope, std::size_t seeds,
                                                  double tolerance = 1e-4,
                                                  const std::function<void(const GradSuiteEntry&)>& on_entry = {}) {
  using namespace detail::grad;
  if (std::find(grad_scopes().begin(), grad_scopes().end(), scope) == grad_scopes().end()) {
    throw ConfigError("unknown grad-check scope '" + scope + "' (expected ops, snr, loss or model)");
  }
  if (seeds == 0) throw ConfigError("grad-check needs at least one seed");
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, Case>>>> groups;
  const bool all = scope == "model";
  if (all || scope == "ops") groups.emplace_back("ops", ops_cases());
  if (all || scope == "snr") groups.emplace_back("snr", snr_cases());
  if (all || scope == "loss") groups.emplace_back("loss", loss_cases());
  if (all) groups.push_back({"model", {{"network", model_case()}}});

  std::vector<GradSuiteEntry> out;
  for (const auto& [group, cases] : groups) {
    for (const auto& [name, run] : cases) {
      GradSuiteEntry e;
      e.scope = group;
      e.name = name;
      e.seeds = seeds;
      for (std::uint64_t s = 0; s < seeds; ++s) {
        Rng rng(derive_seed(derive_seed(s, "grad-check"), group + "/" + name));
        const auto r = run(rng);
        if (s == 0 || r.max_rel_error > e.max_rel_error) {
          e.max_rel_error = r.max_rel_error;
          e.worst_seed = s;
          e.worst = r;
        }
      }
      e.passed = e.max_rel_error < tolerance;
      if (on_entry) on_entry(e);
      out.push_back(std::move(e));
    }
  }
  return out;
}

}  // namespace snr::harness
