// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit status if
// any criterion fails. Criteria 4-6 share one full ablation run and take
// roughly half an hour on one core.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "loss_oracle.hpp"
#include "snr/harness/grad_suite.hpp"
#include "snr/harness/report.hpp"

namespace {

namespace fs = std::filesystem;
using namespace snr;
using namespace snr::harness;
using namespace snr::testing;
using Clock = std::chrono::steady_clock;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Verdict gradient_correctness() {
  const auto t0 = Clock::now();
  const auto entries = run_grad_suite("model", 20);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& e : entries) {
    if (e.max_rel_error > worst) {
      worst = e.max_rel_error;
      worst_name = e.scope + "/" + e.name;
    }
    if (!e.passed) failed += " " + e.scope + "/" + e.name + fmt("(seed %llu)", (unsigned long long)e.worst_seed);
  }
  const bool pass = failed.empty() && secs < 120.0;
  return {pass, fmt("%zu checks x 20 seeds, max rel err %.2e (%s), %.1f s", entries.size(), worst, worst_name.c_str(),
                    secs) +
                    (failed.empty() ? "" : "; failed:" + failed)};
}

// ---------------------------------------------------------------------------
// 2. Algebraic invariants

SnrParams<double> random_params(Rng& rng, std::size_t c, std::size_t k) {
  auto p = SnrParams<double>::initialize(c, k, SnrConfig{}, rng);
  p.gamma = uniform_tensor(rng, {c}, 0.5, 1.5);
  p.beta = random_tensor(rng, {c}, 0.3);
  p.b1 = random_tensor(rng, {p.hidden()}, 0.3);
  p.b2 = random_tensor(rng, {c}, 0.3);
  return p;
}

Verdict algebraic_invariants() {
  Rng rng(derive_seed(2, "acceptance/invariants"));
  double recon = 0.0, split = 0.0, affine = 0.0, gate_lo = 1.0, gate_hi = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t c = 2 + rng.below(15), h = 1 + rng.below(6), w = 2 + rng.below(6), n = 1 + rng.below(3);
    const auto p = random_params(rng, c, 4);
    const Tensor<double> f = random_tensor(rng, {n, h, w, c}, rng.uniform(0.1, 10.0));
    const auto o = snr_forward(f, p);
    for (std::size_t i = 0; i < f.size(); ++i) {
      recon = std::max(recon, std::abs(o.f_norm[i] + o.residual[i] - f[i]) / std::max(1.0, std::abs(f[i])));
      split = std::max(split, std::abs(o.r_plus[i] + o.r_minus[i] - o.residual[i]) /
                                  std::max(1.0, std::abs(o.residual[i])));
    }
    for (const double a : o.gate.values()) {
      gate_lo = std::min(gate_lo, a);
      gate_hi = std::max(gate_hi, a);
    }
    // Per-channel positive scale and shift, normalized with eps = 0.
    std::vector<double> scale(c), shift(c), styled(f.size());
    for (std::size_t k = 0; k < c; ++k) {
      scale[k] = rng.uniform(0.2, 5.0);
      shift[k] = rng.uniform(-3.0, 3.0);
    }
    for (std::size_t i = 0; i < f.size(); ++i) styled[i] = scale[i % c] * f[i] + shift[i % c];
    const auto y0 = instance_normalize(f, p.gamma, p.beta, 0.0);
    const auto y1 = instance_normalize(Tensor<double>(f.shape(), styled), p.gamma, p.beta, 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) affine = std::max(affine, std::abs(y0[i] - y1[i]));
  }
  const bool pass = recon < 1e-6 && split < 1e-6 && affine < 1e-5 && gate_lo > 0.0 && gate_hi < 1.0;
  return {pass, fmt("1000 inputs: |F~+R-F| %.1e, |R+ + R- - R| %.1e, affine restyle %.1e, gate min %.1e, 1 - max %.1e",
                    recon, split, affine, gate_lo, 1.0 - gate_hi)};
}

// ---------------------------------------------------------------------------
// 3. Loss oracles

double rel(double got, double want) { return std::abs(got - want) / std::max(1e-300, std::abs(want)); }

Verdict loss_oracles() {
  Rng rng(derive_seed(3, "acceptance/oracles"));
  double worst_c = 0.0, worst_s = 0.0, worst_d = 0.0;
  auto track = [](double& worst, const LossBundle<double>& b, RefLoss r) {
    worst = std::max({worst, rel(b.l_plus.item(), r.l_plus), rel(b.l_minus.item(), r.l_minus)});
  };
  for (int t = 0; t < 100; ++t) {
    const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6), c = 1 + rng.below(8), k = 2 + rng.below(5);
    const auto in = random_instance(rng, h, w, c, k);
    track(worst_c, classification_dual_loss(in.f_norm, in.f_plus, in.f_minus, in.phi),
          ref_classification(in.f_norm, in.f_plus, in.f_minus, in.phi));
    track(worst_s, segmentation_dual_loss(in.f_norm, in.f_plus, in.f_minus, in.phi),
          ref_segmentation(in.f_norm, in.f_plus, in.f_minus, in.phi));
    const auto boxes = random_boxes(rng, h, w, 1 + rng.below(4));
    track(worst_d, detection_dual_loss(in.f_norm, in.f_plus, in.f_minus, boxes, in.phi),
          ref_detection(in.f_norm, in.f_plus, in.f_minus, boxes, in.phi));
  }

  bool bitwise = true;
  for (int t = 0; t < 100; ++t) {
    const auto px = random_instance(rng, 1, 1, 1 + rng.below(8), 2 + rng.below(5));
    const auto a = classification_dual_loss(px.f_norm, px.f_plus, px.f_minus, px.phi);
    const auto s = segmentation_dual_loss(px.f_norm, px.f_plus, px.f_minus, px.phi);
    bitwise = bitwise && a.l_plus.item() == s.l_plus.item() && a.l_minus.item() == s.l_minus.item();

    const std::size_t h = 1 + rng.below(6), w = 1 + rng.below(6);
    const auto in = random_instance(rng, h, w, 1 + rng.below(8), 2 + rng.below(5));
    const auto b = classification_dual_loss(in.f_norm, in.f_plus, in.f_minus, in.phi);
    const auto d = detection_dual_loss(in.f_norm, in.f_plus, in.f_minus, BoxSet{{{0, 0, w, h}}, {0}}, in.phi);
    bitwise = bitwise && b.l_plus.item() == d.l_plus.item() && b.l_minus.item() == d.l_minus.item();

    const auto e = classification_dual_loss(in.f_norm, in.f_norm, in.f_norm, in.phi);
    const auto es = segmentation_dual_loss(in.f_norm, in.f_norm, in.f_norm, in.phi);
    const auto ed = detection_dual_loss(in.f_norm, in.f_norm, in.f_norm, random_boxes(rng, h, w, 2), in.phi);
    for (const auto* x : {&e, &es, &ed}) {
      bitwise = bitwise && x->l_plus.item() == std::log(2.0) && x->l_minus.item() == std::log(2.0);
    }
  }
  const bool pass = worst_c < 1e-10 && worst_s < 1e-10 && worst_d < 1e-10 && bitwise;
  return {pass, fmt("100 instances each, max rel err cls %.1e seg %.1e det %.1e; degenerate identities %s", worst_c,
                    worst_s, worst_d, bitwise ? "bitwise" : "BROKEN")};
}

// ---------------------------------------------------------------------------
// 4-6. Desk-scale experiments on StyleShapes

struct Experiments {
  RunConfig cfg;
  DomainSet domains;
  AblationReport ablation;
  double ablation_seconds = 0.0;
  std::optional<LodoReport> uda;
};

const LodoReport& variant(const AblationReport& rep, const std::string& name) {
  for (const auto& v : rep.variants)
    if (v.variant == name) return v;
  throw ContractError("ablation has no variant " + name);
}

Verdict dg_ordering(const Experiments& x) {
  const double base = variant(x.ablation, "baseline").mean_accuracy, in = variant(x.ablation, "in_only").mean_accuracy;
  const double snr = variant(x.ablation, "snr").mean_accuracy,
               no_dual = variant(x.ablation, "snr_no_dual_loss").mean_accuracy;
  const bool pass = snr >= no_dual && no_dual >= base && snr - base >= 0.02 && base < in && in < snr &&
                    x.ablation_seconds < 40 * 60;
  return {pass, fmt("mean acc baseline %.2f, in_only %.2f, snr_no_dual_loss %.2f, snr %.2f (snr - baseline %+.2f); "
                    "%.1f min",
                    100 * base, 100 * in, 100 * no_dual, 100 * snr, 100 * (snr - base), x.ablation_seconds / 60)};
}

// Per seed: the final module's entropies on each held-out domain, averaged
// over the leave-one-domain-out splits.
Verdict entropy_ordering(const Experiments& x) {
  const auto& rows = variant(x.ablation, "snr").rows;
  std::size_t ordered = 0;
  std::string detail;
  for (std::size_t s = 0; s < x.cfg.seeds.size(); ++s) {
    EntropyStats mean;
    for (const auto& row : rows) {
      const auto& e = row.seeds.at(s).target_entropy.back();
      mean.h_plus += e.h_plus / static_cast<double>(rows.size());
      mean.h_norm += e.h_norm / static_cast<double>(rows.size());
      mean.h_minus += e.h_minus / static_cast<double>(rows.size());
    }
    const bool ok = mean.h_plus <= mean.h_norm && mean.h_norm <= mean.h_minus;
    ordered += ok ? 1 : 0;
    detail += fmt("%sseed %llu H+ %.3f H %.3f H- %.3f%s", s ? "; " : "", (unsigned long long)x.cfg.seeds[s],
                  mean.h_plus, mean.h_norm, mean.h_minus, ok ? "" : " (violated)");
  }
  return {ordered >= 2, fmt("%zu/%zu seeds ordered: ", ordered, x.cfg.seeds.size()) + detail};
}

Verdict uda_delta(const Experiments& x) {
  const double dg = variant(x.ablation, "snr").mean_accuracy, uda = x.uda->mean_accuracy;
  return {uda - dg >= 0.005, fmt("snr mean target acc dg %.2f, uda %.2f (%+.2f points)", 100 * dg, 100 * uda,
                                 100 * (uda - dg))};
}

// ---------------------------------------------------------------------------
// 7. Parameter accounting

std::size_t formula(std::size_t c, std::size_t r, std::size_t k) {
  const std::size_t hidden = std::max<std::size_t>(1, c / r);
  return 2 * c + hidden * c + hidden + c * hidden + c + k * c + k;
}

Verdict parameter_accounting() {
  ModelSpec all;
  all.snr_after_stage.assign(all.stages.size(), true);
  const Model<float> with_snr(all, 0);
  const Model<float> baseline(all.with_variant(Variant::baseline), 0);
  bool exact = true;
  std::size_t sum = 0;
  std::string per_stage;
  for (std::size_t m = 0; m < all.stages.size(); ++m) {
    const std::size_t c = all.stages[m].channels;
    std::size_t enumerated = 0;
    for (const auto& p : with_snr.params())
      if (p.snr_module == static_cast<int>(m)) enumerated += p.value.size();
    const std::size_t predicted = param_count(c, all.snr.reduction, all.classes);
    exact = exact && enumerated == predicted && predicted == formula(c, all.snr.reduction, all.classes);
    sum += enumerated;
    per_stage += fmt("%s%zu", m ? "/" : "", enumerated);
  }
  exact = exact && with_snr.param_count() - baseline.param_count() == sum && snr_overhead(all) == sum;

  const ModelSpec toy;
  const std::size_t toy_base = Model<float>(toy.with_variant(Variant::baseline), 0).param_count();
  const std::size_t toy_over = Model<float>(toy, 0).param_count() - toy_base;
  exact = exact && toy_over == snr_overhead(toy);
  return {exact, fmt("per-stage modules %s = %zu params (all four stages, %.2f%% of %zu); default toy insertion: +%zu "
                     "on %zu (%.2f%%)",
                     per_stage.c_str(), sum, 100.0 * sum / baseline.param_count(), baseline.param_count(), toy_over,
                     toy_base, 100.0 * toy_over / toy_base)};
}

// ---------------------------------------------------------------------------
// 8. Determinism

RunConfig tiny_config() {
  RunConfig c;
  c.model.stages = {{8, 2}, {8, 2}};
  c.model.snr_after_stage = {true, false};
  c.train.epochs = 2;
  c.train.batch_size = 16;
  c.train_per_domain = 48;
  c.test_per_domain = 16;
  c.eval_batch = 8;
  c.seeds = {0, 1};
  return c;
}

int run_cli(const std::string& cli, const std::string& args) {
  const int status = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict determinism(const fs::path& work) {
  const auto dir = work / "determinism";
  fs::remove_all(dir);
  std::vector<std::string> checked, broken;
  auto same = [&](const std::string& what, const std::string& a, const std::string& b) {
    checked.push_back(what);
    if (a != b || a.empty()) broken.push_back(what);
  };

  const RunConfig cfg = tiny_config();
  const auto domains = generate_presets(cfg.domains, 64, 5);
  for (const char* precision : {"f32", "f64"}) {
    RunConfig c = cfg;
    c.precision = precision;
    auto run = [&](const std::string& tag) {
      const auto out = dir / (std::string("train_") + precision + "_" + tag);
      const auto r = c.precision == "f64" ? train<double>(c, domains, out) : train<float>(c, domains, out);
      return std::make_pair(to_json(r).dump(), out);
    };
    const auto [ja, da] = run("a");
    const auto [jb, db] = run("b");
    same(std::string("train report ") + precision, ja, jb);
    for (const char* f : {"seed_0/checkpoint.snrt", "seed_1/checkpoint.snrt", "seed_0/losses.csv"}) {
      same(std::string(precision) + " " + f, slurp(da / f), slurp(db / f));
    }
  }

  RunConfig uda = cfg;
  uda.protocol = Protocol::uda;
  same("uda report", to_json(train<float>(uda, domains)).dump(), to_json(train<float>(uda, domains)).dump());

  RunConfig small = cfg;
  small.domains = {"D-id", "D-dim", "D-hue"};
  small.target = "D-hue";
  small.train.epochs = 1;
  small.seeds = {3};
  const auto shapes = generate_presets(small.domains, 64, 5);
  same("ablate report", to_json(ablate<float>(small, shapes)).dump(), to_json(ablate<float>(small, shapes)).dump());

  auto grad_dump = [] {
    std::string s;
    for (const auto& e : run_grad_suite("loss", 2)) s += e.name + fmt(" %.17g %zu\n", e.max_rel_error, e.worst.index);
    return s;
  };
  same("grad-check", grad_dump(), grad_dump());

  const auto spec = data::preset_domains().back();
  data::save_dataset(data::generate_domain(spec.name, spec.spec, 32, 4, 9), dir / "gen_a");
  data::save_dataset(data::generate_domain(spec.name, spec.spec, 32, 4, 9), dir / "gen_b");
  for (const char* f : {"images.snrt", "labels.snrt", "masks.snrt", "manifest.json"}) {
    same(std::string("gen-data ") + f, slurp(dir / "gen_a" / f), slurp(dir / "gen_b" / f));
  }

  // The command-line front end, re-run into the same directory with --force.
  if (const char* cli = std::getenv("SNR_CLI")) {
    const auto data_dir = dir / "cli_data";
    const auto cfg_file = dir / "cli.json";
    std::ofstream(cfg_file) << nlohmann::json{
        {"dataset", data_dir.string()},
        {"model", {{"stages", {{{"channels", 8}, {"stride", 2}}, {{"channels", 8}, {"stride", 2}}}},
                   {"snr_after_stage", {true, false}}}},
        {"train", {{"epochs", 2}, {"batch_size", 16}}},
        {"seeds", {0}},
        {"split", {{"train_per_domain", 48}, {"test_per_domain", 16}}},
        {"eval_batch", 8}}
                                   .dump();
    const std::string base = "--config " + cfg_file.string() + " --out " + (dir / "cli_run").string();
    const bool ok = run_cli(cli, "gen-data --n 64 --seed 5 --out " + data_dir.string()) == 0 &&
                    run_cli(cli, "train " + base) == 0;
    const auto first = slurp(dir / "cli_run" / "report.json"), ckpt = slurp(dir / "cli_run" / "seed_0/checkpoint.snrt");
    const bool again = ok && run_cli(cli, "train " + base + " --force") == 0;
    same("cli train report.json", again ? first : "", slurp(dir / "cli_run" / "report.json"));
    same("cli checkpoint", again ? ckpt : "", slurp(dir / "cli_run" / "seed_0/checkpoint.snrt"));
  }

  std::string detail = fmt("%zu artifacts compared (train f32/f64, uda, ablate, grad-check, gen-data%s)",
                           checked.size(), std::getenv("SNR_CLI") ? ", cli train" : "");
  for (const auto& b : broken) detail += "; differs: " + b;
  return {broken.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the SNR library"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory for run artifacts");
  app.add_option("--only", only, "run only these criteria (1-8)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected =
      only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8} : std::set<int>(only.begin(), only.end());
  fs::create_directories(work);

  std::vector<std::pair<int, std::string>> lines;
  bool all = true;
  auto report = [&](int id, const char* name, const std::function<Verdict()>& f) {
    if (!selected.count(id)) return;
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    all = all && v.pass;
    lines.emplace_back(id, fmt("%s [%d] %s: ", v.pass ? "PASS" : "FAIL", id, name) + v.detail);
    std::printf("%s\n", lines.back().second.c_str());
    std::fflush(stdout);
  };

  report(1, "gradient correctness", gradient_correctness);
  report(2, "algebraic invariants", algebraic_invariants);
  report(3, "loss oracles", loss_oracles);
  report(7, "parameter accounting", parameter_accounting);
  report(8, "determinism", [&] { return determinism(work); });

  if (selected.count(4) || selected.count(5) || selected.count(6)) {
    Experiments x;
    std::optional<std::string> setup_error;
    try {
      x.domains = generate_presets(x.cfg.domains, x.cfg.train_per_domain + x.cfg.test_per_domain, 0);
      std::printf("ablation: 4 variants x %zu held-out domains x %zu seeds (default config)\n", x.cfg.domains.size(),
                  x.cfg.seeds.size());
      const auto t0 = Clock::now();
      x.ablation = ablate<float>(x.cfg, x.domains, fs::path(work) / "ablation",
                                 [&](const std::string& v, const MetricsReport& r) {
                                   std::printf("  %-17s %-8s %.2f%%  (%.0f s elapsed)\n", v.c_str(), r.target.c_str(),
                                               100 * r.mean_accuracy, seconds_since(t0));
                                   std::fflush(stdout);
                                 });
      x.ablation_seconds = seconds_since(t0);
      write_outputs(fs::path(work) / "ablation", x.cfg, x.domains, x.ablation);
      std::printf("%s", comparison_table(x.ablation).c_str());
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    auto guarded = [&](const std::function<Verdict()>& f) {
      return [&, f] { return setup_error ? Verdict{false, "ablation failed: " + *setup_error} : f(); };
    };
    report(4, "leave-one-domain-out ordering", guarded([&] { return dg_ordering(x); }));
    report(5, "entropy ordering", guarded([&] { return entropy_ordering(x); }));
    if (selected.count(6)) {
      report(6, "unlabeled target data", guarded([&] {
               RunConfig c = x.cfg;
               c.protocol = Protocol::uda;
               std::printf("uda: snr x %zu held-out domains x %zu seeds\n", c.domains.size(), c.seeds.size());
               const auto t0 = Clock::now();
               x.uda = leave_one_domain_out<float>(c, x.domains, fs::path(work) / "uda", [&](const MetricsReport& r) {
                 std::printf("  snr uda %-8s %.2f%%  (%.0f s elapsed)\n", r.target.c_str(), 100 * r.mean_accuracy,
                             seconds_since(t0));
                 std::fflush(stdout);
               });
               return uda_delta(x);
             }));
    }
  }

  std::sort(lines.begin(), lines.end());
  std::printf("\nsummary\n");
  std::ofstream summary(fs::path(work) / "summary.txt");
  for (const auto& [id, line] : lines) {
    std::printf("%s\n", line.c_str());
    summary << line << '\n';
  }
  return all ? 0 : 1;
}
