#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "snr/error.hpp"
#include "snr/harness/model.hpp"
#include "snr/ops.hpp"
#include "snr/random.hpp"
#include "snr/restitution_loss.hpp"
#include "snr/styleshapes.hpp"

namespace snr::harness {

enum class Protocol { dg, uda };

inline std::string to_string(Protocol p) { return p == Protocol::dg ? "dg" : "uda"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "dg") return Protocol::dg;
  if (s == "uda") return Protocol::uda;
  throw ConfigError("unknown protocol '" + s + "' (expected dg or uda)");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double lambda = 1.0;
};

/// One experiment: which domains, which held-out target, how to train.
struct RunConfig {
  std::string dataset = "data";
  std::vector<std::string> domains{"D-id", "D-dim", "D-hue", "D-noisy"};
  std::string target = "D-noisy";
  Protocol protocol = Protocol::dg;
  ModelSpec model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string precision = "f32";
  std::size_t train_per_domain = 2000;
  std::size_t test_per_domain = 500;
  std::string output = "runs/default";
  bool checkpoints = true;
  std::size_t eval_batch = 250;

  std::vector<std::string> sources() const {
    std::vector<std::string> s;
    for (const auto& d : domains)
      if (d != target) s.push_back(d);
    return s;
  }

  void validate() const {
    model.validate();
    if (domains.size() < 2) throw ConfigError("domains: at least two domains required");
    if (std::find(domains.begin(), domains.end(), target) == domains.end()) {
      throw ConfigError("target '" + target + "' is not one of the configured domains");
    }
    if (train.batch_size < domains.size() - 1) throw ConfigError("train.batch_size smaller than source count");
    if (train.epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (!(train.lr >= 0.0) || !(train.lambda >= 0.0) || !(train.momentum >= 0.0 && train.momentum < 1.0)) {
      throw ConfigError("train: lr and lambda must be >= 0, momentum in [0, 1)");
    }
    if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be \"f32\" or \"f64\"");
    if (train_per_domain == 0 || test_per_domain == 0 || eval_batch == 0) {
      throw ConfigError("split sizes and eval_batch must be >= 1");
    }
  }
};

using DomainSet = std::map<std::string, data::DomainDataset>;

/// Cosine annealing over `total` steps: lr₀ at step 0, 0 at the last step.
inline double cosine_lr(double lr0, std::size_t step, std::size_t total) {
  if (total <= 1) return lr0;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// SGD with heavy-ball momentum: v ← μv + g, p ← p − lr·v. Parameters that
/// received no gradient this step are left alone.
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum) : momentum_(momentum) {}

  void step(std::vector<Parameter<T>>& params, const std::vector<Tensor<T>>& bound, double lr) {
    if (bound.size() != params.size()) throw ContractError("optimizer: gradient count does not match parameters");
    if (velocity_.empty()) {
      velocity_.reserve(params.size());
      for (const auto& p : params) velocity_.emplace_back(p.value.size(), T(0));
    }
    const T mu = static_cast<T>(momentum_), rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!bound[i].has_grad()) continue;
      const auto& g = bound[i].node()->grad;
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = mu * v[j] + g[j];
      if (lr == 0.0) continue;
      auto& p = params[i].value;
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= rate * v[j];
    }
  }

 private:
  double momentum_;
  std::vector<std::vector<T>> velocity_;
};

/// Mean entropies of φ(f̃⁺), φ(f̃), φ(f̃⁻) at one SNR module.
struct EntropyStats {
  double h_plus = 0.0;
  double h_norm = 0.0;
  double h_minus = 0.0;
};

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<EntropyStats> entropy;
};

/// Worker count for parallel evaluation: SNR_NUM_THREADS when set, else 1.
inline std::size_t eval_threads() {
  if (const char* env = std::getenv("SNR_NUM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

/// Top-1 accuracy (ties to the lowest class) and per-module entropy means.
/// Chunks may run on several workers; per-sample values are reduced in
/// index order, so the result does not depend on the worker count.
template <typename T>
EvalResult evaluate(const Model<T>& model, const data::DomainDataset& dataset, std::span<const std::size_t> indices,
                    std::size_t batch = 250, std::size_t threads = 1) {
  const std::size_t n = indices.size(), modules = model.snr_module_count();
  std::vector<std::uint8_t> hit(n, 0);
  std::vector<double> h_plus(n * modules), h_norm(n * modules), h_minus(n * modules);
  const std::size_t chunks = (n + batch - 1) / batch;
  auto run_chunk = [&](std::size_t c) {
    const std::size_t lo = c * batch, hi = std::min(n, lo + batch);
    const auto fwd = model.forward(dataset.template batch<T>(indices.subspan(lo, hi - lo)), nullptr, modules > 0);
    const auto pred = argmax_rows(fwd.logits);
    for (std::size_t i = lo; i < hi; ++i) hit[i] = pred[i - lo] == dataset.labels[indices[i]] ? 1 : 0;
    for (std::size_t m = 0; m < modules; ++m) {
      auto h = [&](const Tensor<T>& map) { return entropy(fwd.heads[m].probabilities(global_avg_pool(map))); };
      const auto hp = h(fwd.snr[m].f_plus), hn = h(fwd.snr[m].f_norm), hm = h(fwd.snr[m].f_minus);
      for (std::size_t i = lo; i < hi; ++i) {
        h_plus[i * modules + m] = static_cast<double>(hp[i - lo]);
        h_norm[i * modules + m] = static_cast<double>(hn[i - lo]);
        h_minus[i * modules + m] = static_cast<double>(hm[i - lo]);
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        try {
          for (std::size_t c = next++; c < chunks; c = next++) run_chunk(c);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  EvalResult r;
  r.total = n;
  for (const auto v : hit) r.correct += v;
  r.accuracy = n ? static_cast<double>(r.correct) / static_cast<double>(n) : 0.0;
  r.entropy.resize(modules);
  for (std::size_t m = 0; m < modules; ++m) {
    for (std::size_t i = 0; i < n; ++i) {
      r.entropy[m].h_plus += h_plus[i * modules + m];
      r.entropy[m].h_norm += h_norm[i * modules + m];
      r.entropy[m].h_minus += h_minus[i * modules + m];
    }
    if (n) {
      r.entropy[m].h_plus /= static_cast<double>(n);
      r.entropy[m].h_norm /= static_cast<double>(n);
      r.entropy[m].h_minus /= static_cast<double>(n);
    }
  }
  return r;
}

struct StepRecord {
  std::size_t step = 0;
  double task_loss = 0.0;
  std::vector<double> l_plus;   // per SNR module, source batch
  std::vector<double> l_minus;
  double total = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double task_loss = 0.0;
  double snr_loss = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;
  double target_accuracy = 0.0;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double target_accuracy = 0.0;
  std::vector<EntropyStats> source_entropy;  // held-out source test splits
  std::vector<EntropyStats> target_entropy;
  std::vector<EpochRecord> curve;
  std::vector<StepRecord> trace;
  std::size_t param_count = 0;
  double seconds = 0.0;
};

/// Results for one (variant, protocol, target) over all seeds.
struct MetricsReport {
  std::string variant;
  std::string protocol;
  std::string target;
  std::vector<std::string> sources;
  std::vector<SeedResult> seeds;
  double mean_accuracy = 0.0;
  std::size_t param_count = 0;
  std::size_t snr_param_overhead = 0;
  double seconds = 0.0;
};

inline std::vector<std::size_t> index_range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

namespace detail {

inline const data::DomainDataset& domain(const DomainSet& set, const std::string& name) {
  const auto it = set.find(name);
  if (it == set.end()) throw ContractError("dataset for domain '" + name + "' not provided");
  return it->second;
}

template <typename T>
nlohmann::json batch_diagnostics(const Tensor<T>& batch, std::size_t epoch, std::size_t step,
                                 const StepRecord* last) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0, sq = 0.0;
  std::size_t nonfinite = 0;
  for (const T v : batch.data()) {
    const double d = static_cast<double>(v);
    if (!std::isfinite(d)) {
      ++nonfinite;
      continue;
    }
    lo = std::min(lo, d);
    hi = std::max(hi, d);
    sum += d;
    sq += d * d;
  }
  const double n = static_cast<double>(batch.size());
  nlohmann::json j = {{"epoch", epoch},
                      {"step", step},
                      {"batch_shape", batch.shape()},
                      {"batch_min", lo},
                      {"batch_max", hi},
                      {"batch_mean", sum / n},
                      {"batch_std", std::sqrt(std::max(0.0, sq / n - (sum / n) * (sum / n)))},
                      {"nonfinite_inputs", nonfinite}};
  if (last) {
    j["last_step"] = {{"step", last->step},
                      {"task_loss", last->task_loss},
                      {"l_plus", last->l_plus},
                      {"l_minus", last->l_minus},
                      {"total", last->total}};
  }
  return j;
}

}  // namespace detail

/// Trains one model from `seed`. Minimizes CE(source) + λ·L_SNR(source),
/// plus λ·L_SNR on unlabeled target batches under the uda protocol. Each
/// batch mixes the source domains evenly. When `out_dir` is non-empty the
/// step trace, epoch curve and a per-epoch checkpoint are written there.
template <typename T>
SeedResult train_once(const RunConfig& cfg, const DomainSet& domains, std::uint64_t seed,
                      const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const auto source_names = cfg.sources();
  std::vector<const data::DomainDataset*> sources;
  for (const auto& s : source_names) sources.push_back(&detail::domain(domains, s));
  const data::DomainDataset& target = detail::domain(domains, cfg.target);
  const std::size_t need = cfg.train_per_domain + cfg.test_per_domain;
  for (const auto* d : sources) {
    if (d->size() < need) throw ConfigError("domain '" + d->name + "' has fewer images than the configured split");
  }
  if (target.size() < need) throw ConfigError("domain '" + target.name + "' has fewer images than the configured split");

  Model<T> model(cfg.model, seed);
  const std::size_t modules = model.snr_module_count();
  const double lambda = cfg.model.uses_dual_loss() ? cfg.train.lambda : 0.0;
  const bool uda = cfg.protocol == Protocol::uda;

  const std::size_t S = sources.size(), B = cfg.train.batch_size;
  std::vector<std::size_t> share(S);
  for (std::size_t d = 0; d < S; ++d) share[d] = B / S + (d < B % S ? 1 : 0);
  const std::size_t target_share = B / S;
  std::size_t steps_per_epoch = std::numeric_limits<std::size_t>::max();
  for (std::size_t d = 0; d < S; ++d) steps_per_epoch = std::min(steps_per_epoch, cfg.train_per_domain / share[d]);
  if (steps_per_epoch == 0) throw ConfigError("train_per_domain too small for the batch size");
  const std::size_t total_steps = steps_per_epoch * cfg.train.epochs;

  Rng shuffle_rng(derive_seed(seed, "shuffle"));
  SgdMomentum<T> optimizer(cfg.train.momentum);
  std::vector<std::vector<std::size_t>> order(S, index_range(0, cfg.train_per_domain));
  std::vector<std::size_t> target_order = index_range(0, cfg.train_per_domain);
  std::size_t target_cursor = cfg.train_per_domain;  // forces a shuffle on first use
  const auto target_test = index_range(cfg.train_per_domain, need);

  std::ofstream trace_csv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    trace_csv.open(out_dir / "losses.csv", std::ios::trunc);
    trace_csv << "step,task_loss";
    for (std::size_t m = 0; m < modules; ++m) trace_csv << ",l_plus_" << m << ",l_minus_" << m;
    trace_csv << ",total\n";
    trace_csv.precision(17);
  }

  SeedResult result;
  result.seed = seed;
  result.param_count = model.param_count();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    for (auto& o : order) shuffle_rng.shuffle(o.begin(), o.end());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(cfg.train.lr, step, total_steps);
    std::size_t correct = 0, seen = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<T> pixels;
      pixels.reserve(B * data::kImageValues);
      std::vector<std::size_t> labels;
      labels.reserve(B);
      for (std::size_t d = 0; d < S; ++d) {
        for (std::size_t k = 0; k < share[d]; ++k) {
          const std::size_t idx = order[d][s * share[d] + k];
          const auto img = sources[d]->image(idx);
          pixels.insert(pixels.end(), img.begin(), img.end());
          labels.push_back(sources[d]->labels[idx]);
        }
      }
      const Tensor<T> images(Shape{labels.size(), data::kImageSide, data::kImageSide, data::kImageChannels},
                             std::move(pixels));
      const double lr = cosine_lr(cfg.train.lr, step, total_steps);
      StepRecord sr;
      sr.step = step;
      try {
        Tape<T> tape;
        const auto fwd = model.forward(images, &tape, modules > 0);
        const Tensor<T> task = cross_entropy(fwd.logits, labels);
        const auto bundles = model.dual_losses(fwd);
        Tensor<T> total = aggregate_snr_loss(task, bundles, lambda);
        if (uda && modules > 0) {
          std::vector<std::size_t> tidx;
          for (std::size_t k = 0; k < target_share; ++k) {
            if (target_cursor >= target_order.size()) {
              shuffle_rng.shuffle(target_order.begin(), target_order.end());
              target_cursor = 0;
            }
            tidx.push_back(target_order[target_cursor++]);
          }
          const auto tfwd = model.forward_with(target.template batch<T>(tidx), fwd.bound, true);
          total = aggregate_snr_loss(total, model.dual_losses(tfwd), lambda);
        }
        tape.backward(total);
        optimizer.step(model.params(), fwd.bound, lr);

        sr.task_loss = static_cast<double>(task.item());
        for (const auto& b : bundles) {
          sr.l_plus.push_back(static_cast<double>(b.l_plus.item()));
          sr.l_minus.push_back(static_cast<double>(b.l_minus.item()));
        }
        sr.total = static_cast<double>(total.item());
        const auto pred = argmax_rows(fwd.logits);
        for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
        seen += labels.size();
      } catch (const NumericalError& e) {
        const auto diag = detail::batch_diagnostics(images, epoch, step, result.trace.empty() ? nullptr : &result.trace.back());
        if (!out_dir.empty()) std::ofstream(out_dir / "nan_diagnostics.json") << diag.dump(2) << '\n';
        throw NumericalError(std::string("training aborted: ") + e.what() + "; last batch statistics: " + diag.dump());
      }
      rec.task_loss += sr.task_loss;
      for (std::size_t m = 0; m < sr.l_plus.size(); ++m) rec.snr_loss += sr.l_plus[m] + sr.l_minus[m];
      rec.total += sr.total;
      if (trace_csv.is_open()) {
        trace_csv << sr.step << ',' << sr.task_loss;
        for (std::size_t m = 0; m < sr.l_plus.size(); ++m) trace_csv << ',' << sr.l_plus[m] << ',' << sr.l_minus[m];
        trace_csv << ',' << sr.total << '\n';
      }
      result.trace.push_back(std::move(sr));
    }
    const double steps = static_cast<double>(steps_per_epoch);
    rec.task_loss /= steps;
    rec.snr_loss /= steps;
    rec.total /= steps;
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    rec.target_accuracy = evaluate(model, target, target_test, cfg.eval_batch, eval_threads()).accuracy;
    result.curve.push_back(rec);
    if (!out_dir.empty() && cfg.checkpoints) {
      model.save(out_dir / "checkpoint.snrt", {{"epoch", epoch}, {"seed", seed}, {"target", cfg.target}});
    }
  }

  const EvalResult target_eval = evaluate(model, target, target_test, cfg.eval_batch, eval_threads());
  result.target_accuracy = target_eval.accuracy;
  result.target_entropy = target_eval.entropy;
  // Held-out source data: the test split of every source domain.
  result.source_entropy.assign(modules, {});
  for (const auto* d : sources) {
    const auto idx = index_range(cfg.train_per_domain, need);
    const auto e = evaluate(model, *d, idx, cfg.eval_batch, eval_threads());
    for (std::size_t m = 0; m < modules; ++m) {
      result.source_entropy[m].h_plus += e.entropy[m].h_plus / static_cast<double>(S);
      result.source_entropy[m].h_norm += e.entropy[m].h_norm / static_cast<double>(S);
      result.source_entropy[m].h_minus += e.entropy[m].h_minus / static_cast<double>(S);
    }
  }
  if (!out_dir.empty()) {
    std::ofstream curve(out_dir / "curves.csv", std::ios::trunc);
    curve.precision(17);
    curve << "epoch,lr,task_loss,snr_loss,total,train_accuracy,target_accuracy\n";
    for (const auto& r : result.curve) {
      curve << r.epoch << ',' << r.lr << ',' << r.task_loss << ',' << r.snr_loss << ',' << r.total << ','
            << r.train_accuracy << ',' << r.target_accuracy << '\n';
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

/// SNR parameters added on top of the baseline topology.
inline std::size_t snr_overhead(const ModelSpec& spec) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    if (spec.has_snr(i)) n += param_count(spec.stages[i].channels, spec.snr.reduction, spec.classes);
  }
  return n;
}

/// Runs every configured seed for the configured target.
template <typename T>
MetricsReport train(const RunConfig& cfg, const DomainSet& domains, const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  MetricsReport r;
  r.variant = to_string(cfg.model.variant);
  r.protocol = to_string(cfg.protocol);
  r.target = cfg.target;
  r.sources = cfg.sources();
  r.snr_param_overhead = snr_overhead(cfg.model);
  for (const auto seed : cfg.seeds) {
    const auto dir = out_dir.empty() ? out_dir : out_dir / ("seed_" + std::to_string(seed));
    r.seeds.push_back(train_once<T>(cfg, domains, seed, dir));
    r.param_count = r.seeds.back().param_count;
    r.mean_accuracy += r.seeds.back().target_accuracy / static_cast<double>(cfg.seeds.size());
    r.seconds += r.seeds.back().seconds;
  }
  return r;
}

struct LodoReport {
  std::string variant;
  std::string protocol;
  std::vector<MetricsReport> rows;  // one per held-out domain
  double mean_accuracy = 0.0;
  double seconds = 0.0;
};

/// Holds out each domain in turn, trains on the rest, tests on it.
template <typename T>
LodoReport leave_one_domain_out(const RunConfig& cfg, const DomainSet& domains,
                                const std::filesystem::path& out_dir = {},
                                const std::function<void(const MetricsReport&)>& on_row = {}) {
  if (cfg.domains.size() < 2) throw ConfigError("leave-one-domain-out needs at least two domains");
  LodoReport rep;
  rep.variant = to_string(cfg.model.variant);
  rep.protocol = to_string(cfg.protocol);
  for (const auto& held_out : cfg.domains) {
    RunConfig c = cfg;
    c.target = held_out;
    rep.rows.push_back(train<T>(c, domains, out_dir.empty() ? out_dir : out_dir / held_out));
    rep.mean_accuracy += rep.rows.back().mean_accuracy / static_cast<double>(cfg.domains.size());
    rep.seconds += rep.rows.back().seconds;
    if (on_row) on_row(rep.rows.back());
  }
  return rep;
}

/// Generates the configured domains in memory from the preset styles.
inline DomainSet generate_presets(const std::vector<std::string>& names, std::size_t n, std::uint64_t seed) {
  DomainSet set;
  const auto presets = data::preset_domains();
  for (const auto& name : names) {
    const auto it = std::find_if(presets.begin(), presets.end(), [&](const auto& p) { return p.name == name; });
    if (it == presets.end()) throw ConfigError("no preset style named '" + name + "'");
    set.emplace(name, data::generate_domain(name, it->spec, n, data::kShapeClasses, seed));
  }
  return set;
}

/// Loads `<cfg.dataset>/<domain>` for every configured domain.
inline DomainSet load_domains(const RunConfig& cfg) {
  DomainSet set;
  for (const auto& name : cfg.domains) {
    const auto dir = std::filesystem::path(cfg.dataset) / name;
    if (!std::filesystem::is_directory(dir)) {
      throw IoError("dataset directory '" + dir.string() + "' not found; generate it with `snr gen-data --out " +
                    cfg.dataset + "` or set dataset=<dir>");
    }
    set.emplace(name, data::load_dataset(dir));
  }
  return set;
}

}  // namespace snr::harness
