#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "snr/error.hpp"
#include "snr/ops.hpp"
#include "snr/random.hpp"
#include "snr/restitution_loss.hpp"
#include "snr/serialize.hpp"
#include "snr/snr_module.hpp"
#include "snr/tensor.hpp"

namespace snr::harness {

enum class Variant { baseline, in_only, snr, snr_no_dual_loss };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::baseline, Variant::in_only, Variant::snr, Variant::snr_no_dual_loss};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline:
      return "baseline";
    case Variant::in_only:
      return "in_only";
    case Variant::snr:
      return "snr";
    case Variant::snr_no_dual_loss:
      return "snr_no_dual_loss";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (const Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "' (expected baseline, in_only, snr or snr_no_dual_loss)");
}

struct StageSpec {
  std::size_t channels = 16;
  std::size_t stride = 1;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Toy backbone: 3×3 conv stages, each followed by ReLU and, where enabled,
/// an SNR module (or a plain IN for `in_only`), then pool + FC classifier.
struct ModelSpec {
  std::vector<StageSpec> stages{{16, 2}, {32, 2}, {64, 2}, {64, 1}};
  // Nothing after the last stage: a normalization right before global pooling
  // would reduce every channel to its shift β.
  std::vector<bool> snr_after_stage{true, true, true, false};
  Variant variant = Variant::snr;
  std::size_t classes = 4;
  std::size_t input_channels = 3;
  std::size_t kernel = 3;
  SnrConfig snr;

  /// The default insertion points for `n` stages: after every stage but the last.
  static std::vector<bool> default_insertion(std::size_t n) {
    std::vector<bool> flags(n, true);
    if (n > 1) flags.back() = false;
    return flags;
  }

  bool has_snr(std::size_t stage) const {
    return (variant == Variant::snr || variant == Variant::snr_no_dual_loss) && snr_after_stage.at(stage);
  }
  bool has_in(std::size_t stage) const { return variant == Variant::in_only && snr_after_stage.at(stage); }
  bool uses_dual_loss() const { return variant == Variant::snr; }

  /// The same topology for another variant; baseline clears every insertion
  /// point.
  ModelSpec with_variant(Variant v) const {
    ModelSpec s = *this;
    s.variant = v;
    if (v == Variant::baseline) s.snr_after_stage.assign(stages.size(), false);
    return s;
  }

  void validate() const {
    if (stages.empty()) throw ConfigError("model: at least one stage required");
    if (snr_after_stage.size() != stages.size()) {
      throw ConfigError("model: snr_after_stage needs one flag per stage");
    }
    for (const auto& s : stages)
      if (s.channels == 0 || s.stride == 0) throw ConfigError("model: stage channels and stride must be >= 1");
    if (classes == 0 || input_channels == 0 || kernel == 0) throw ConfigError("model: sizes must be >= 1");
    if (variant == Variant::baseline) {
      for (const bool b : snr_after_stage)
        if (b) throw ConfigError("model: baseline variant cannot have SNR insertion points");
    }
  }
};

template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  int snr_module = -1;  // index among SNR modules, -1 otherwise
};

/// Everything a forward pass exposes. `bound` holds the parameter tensors in
/// model order; after `Tape::backward` their gradients are the step's
/// gradients.
template <typename T>
struct Forward {
  Tensor<T> logits;
  Tensor<T> embedding;
  std::vector<SnrOutputs<T>> snr;
  std::vector<EntropyHead<T>> heads;
  std::vector<Tensor<T>> bound;
  std::vector<Tensor<T>> pre_activations;  // conv + bias of each stage, before ReLU
};

template <typename T>
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t cin = spec_.input_channels;
    std::size_t snr_index = 0;
    for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
      const std::size_t cout = spec_.stages[i].channels;
      const std::string stage = "stage" + std::to_string(i);
      StageSlots slots;
      // He-uniform conv init, one named stream per tensor so that variants
      // sharing a seed share backbone weights.
      Rng conv_rng(derive_seed(seed, "init/" + stage + "/conv"));
      const double bound = std::sqrt(6.0 / static_cast<double>(spec_.kernel * spec_.kernel * cin));
      slots.kernel = add_param(stage + ".conv.kernel", {spec_.kernel, spec_.kernel, cin, cout}, [&] {
        return static_cast<T>(conv_rng.uniform(-bound, bound));
      });
      slots.bias = add_param(stage + ".conv.bias", {cout}, [] { return T(0); });
      if (spec_.has_in(i)) {
        slots.in_gamma = add_param(stage + ".in.gamma", {cout}, [] { return T(1); });
        slots.in_beta = add_param(stage + ".in.beta", {cout}, [] { return T(0); });
      }
      if (spec_.has_snr(i)) {
        Rng snr_rng(derive_seed(seed, "init/" + stage + "/snr"));
        const auto p = SnrParams<T>::initialize(cout, spec_.classes, spec_.snr, snr_rng);
        slots.snr_first = params_.size();
        for (const auto& [name, t] : p.named()) {
          params_.push_back({stage + ".snr." + name, t.shape(), t.values(), static_cast<int>(snr_index)});
        }
        slots.snr_count = params_.size() - *slots.snr_first;
        ++snr_index;
      }
      stages_.push_back(slots);
      cin = cout;
    }
    Rng head_rng(derive_seed(seed, "init/head"));
    const double hb = 1.0 / std::sqrt(static_cast<double>(cin));
    head_weight_ = add_param("head.weight", {spec_.classes, cin}, [&] { return static_cast<T>(head_rng.uniform(-hb, hb)); });
    head_bias_ = add_param("head.bias", {spec_.classes}, [] { return T(0); });
  }

  const ModelSpec& spec() const { return spec_; }
  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::size_t snr_module_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < spec_.stages.size(); ++i) n += spec_.has_snr(i) ? 1 : 0;
    return n;
  }

  /// Runs the network on an [n,h,w,c] batch. With a tape, parameters are
  /// bound as variables; without one the pass is inference-only.
  Forward<T> forward(const Tensor<T>& images, Tape<T>* tape, bool materialize_contaminated = true) const {
    return forward_with(images, bind(tape), materialize_contaminated);
  }

  /// Parameter tensors in model order, as variables on `tape` when given.
  std::vector<Tensor<T>> bind(Tape<T>* tape) const {
    std::vector<Tensor<T>> bound;
    bound.reserve(params_.size());
    for (const auto& p : params_) bound.push_back(tape ? tape->variable(p.shape, p.value) : Tensor<T>(p.shape, p.value));
    return bound;
  }

  /// Forward pass over already-bound parameters; several passes may share
  /// one binding so their gradients accumulate.
  Forward<T> forward_with(const Tensor<T>& images, std::vector<Tensor<T>> bound,
                          bool materialize_contaminated = true) const {
    if (bound.size() != params_.size()) throw ContractError("forward: bound parameter count mismatch");
    Forward<T> out;
    out.bound = std::move(bound);
    Tensor<T> x = images;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const auto& s = stages_[i];
      const std::size_t pad = spec_.kernel / 2;
      out.pre_activations.push_back(
          add_channel_bias(conv2d(x, out.bound[s.kernel], spec_.stages[i].stride, pad), out.bound[s.bias]));
      x = relu(out.pre_activations.back());
      if (s.in_gamma) {
        x = instance_normalize(x, out.bound[*s.in_gamma], out.bound[*s.in_beta], static_cast<T>(spec_.snr.eps));
      }
      if (s.snr_first) {
        const SnrParams<T> p = assemble(out.bound, *s.snr_first);
        out.snr.push_back(snr_forward(x, p, materialize_contaminated));
        out.heads.push_back(p.phi);
        x = out.snr.back().f_plus;
      }
    }
    out.embedding = global_avg_pool(x);
    out.logits = linear(out.embedding, out.bound[head_weight_], out.bound[head_bias_]);
    return out;
  }

  /// Per-module classification dual losses of a forward pass.
  std::vector<LossBundle<T>> dual_losses(const Forward<T>& fwd) const {
    std::vector<LossBundle<T>> out;
    for (std::size_t m = 0; m < fwd.snr.size(); ++m) {
      const auto& o = fwd.snr[m];
      out.push_back(classification_dual_loss(o.f_norm, o.f_plus, o.f_minus, fwd.heads[m], m));
    }
    return out;
  }

  /// Checkpoint: parameter tensors in model order as SNRT0001 records, plus
  /// a JSON manifest next to it (same stem, .json).
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const {
    {
      std::ofstream os(path, std::ios::binary | std::ios::trunc);
      if (!os) throw IoError("cannot write checkpoint " + path.string());
      for (const auto& p : params_) io::write_record<T>(os, p.shape, p.value);
      if (!os) throw IoError("write failed for " + path.string());
    }
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& p : params_) {
      tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"snr_module", p.snr_module}});
    }
    nlohmann::json manifest = {{"format", "snr-checkpoint/1"},
                               {"model", spec_json()},
                               {"tensors", tensors},
                               {"sha256", io::sha256_file(path)}};
    if (!extra.is_null()) manifest["extra"] = extra;
    auto mpath = path;
    mpath.replace_extension(".json");
    std::ofstream ms(mpath, std::ios::trunc);
    if (!ms) throw IoError("cannot write " + mpath.string());
    ms << manifest.dump(2) << '\n';
  }

  /// Replaces parameter values from a checkpoint written for this topology.
  void load(const std::filesystem::path& path) {
    auto records = io::read_all(path);
    if (records.size() != params_.size()) {
      throw ContractError("checkpoint/model mismatch: " + std::to_string(records.size()) + " tensors in " +
                          path.string() + ", model has " + std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].shape != params_[i].shape) {
        throw ContractError("checkpoint/model mismatch at " + params_[i].name + ": " + snr::to_string(records[i].shape) +
                            " vs " + snr::to_string(params_[i].shape));
      }
      params_[i].value.assign(records[i].values.begin(), records[i].values.end());
    }
  }

  nlohmann::json spec_json() const {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : spec_.stages) stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
    return {{"stages", stages},
            {"snr_after_stage", spec_.snr_after_stage},
            {"variant", to_string(spec_.variant)},
            {"classes", spec_.classes},
            {"input_channels", spec_.input_channels},
            {"kernel", spec_.kernel},
            {"reduction", spec_.snr.reduction},
            {"eps", spec_.snr.eps},
            {"gate_bias", spec_.snr.gate_bias}};
  }

 private:
  struct StageSlots {
    std::size_t kernel = 0;
    std::size_t bias = 0;
    std::optional<std::size_t> in_gamma, in_beta;
    std::optional<std::size_t> snr_first;
    std::size_t snr_count = 0;
  };

  template <typename Fill>
  std::size_t add_param(std::string name, Shape shape, Fill fill) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = fill();
    params_.push_back({std::move(name), std::move(shape), std::move(v), -1});
    return params_.size() - 1;
  }

  // Rebuilds SnrParams from bound tensors laid out in SnrParams::named() order.
  SnrParams<T> assemble(const std::vector<Tensor<T>>& bound, std::size_t first) const {
    SnrParams<T> p;
    p.config = spec_.snr;
    std::size_t i = first;
    p.gamma = bound[i++];
    p.beta = bound[i++];
    p.w1 = bound[i++];
    if (spec_.snr.gate_bias) p.b1 = bound[i++];
    p.w2 = bound[i++];
    if (spec_.snr.gate_bias) p.b2 = bound[i++];
    p.phi.weight = bound[i++];
    p.phi.bias = bound[i++];
    return p;
  }

  ModelSpec spec_;
  std::vector<Parameter<T>> params_;
  std::vector<StageSlots> stages_;
  std::size_t head_weight_ = 0;
  std::size_t head_bias_ = 0;
};

/// Parses the "model" section of a checkpoint manifest or config.
inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  try {
    s.stages.clear();
    for (const auto& st : j.at("stages")) {
      s.stages.push_back({st.at("channels").get<std::size_t>(), st.at("stride").get<std::size_t>()});
    }
    s.snr_after_stage = j.at("snr_after_stage").get<std::vector<bool>>();
    s.variant = parse_variant(j.at("variant").get<std::string>());
    s.classes = j.at("classes").get<std::size_t>();
    s.input_channels = j.value("input_channels", std::size_t{3});
    s.kernel = j.value("kernel", std::size_t{3});
    s.snr.reduction = j.at("reduction").get<std::size_t>();
    s.snr.eps = j.at("eps").get<double>();
    s.snr.gate_bias = j.value("gate_bias", true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
  return s;
}

}  // namespace snr::harness
