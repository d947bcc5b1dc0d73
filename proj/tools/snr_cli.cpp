// snr: data generation, training, evaluation, ablation, gradient checks and
// activation dumps for the style normalization and restitution library.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "snr/harness/grad_suite.hpp"
#include "snr/harness/report.hpp"

namespace {

namespace fs = std::filesystem;
using namespace snr;
using namespace snr::harness;

// Refuses to write into a non-empty directory unless forced.
void claim_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw IoError("output path '" + dir.string() + "' is not a directory");
  if (fs::is_directory(dir) && !fs::is_empty(dir) && !force) {
    throw ContractError("output directory '" + dir.string() + "' is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir);
}

template <typename F>
void with_precision(const RunConfig& cfg, F&& f) {
  if (cfg.precision == "f64") {
    f.template operator()<double>();
  } else {
    f.template operator()<float>();
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string spec = "preset";
  std::string out = "data";
  std::uint64_t seed = 0;
  std::size_t n = 2500;
  bool force = false;
};

// "preset" gives all four shipped domains, a preset name gives that one, and
// anything else is read as a JSON object mapping domain names to styles.
std::vector<data::NamedStyle> resolve_styles(const std::string& spec) {
  const auto presets = data::preset_domains();
  if (spec == "preset") return presets;
  for (const auto& p : presets)
    if (p.name == spec) return {p};
  if (!fs::exists(spec)) throw IoError("style spec '" + spec + "' is neither a preset name nor a readable file");
  std::ifstream is(spec);
  if (!is) throw IoError("cannot read style spec " + spec);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("style spec " + spec + ": " + e.what());
  }
  if (!j.is_object() || j.empty()) throw ConfigError("style spec " + spec + ": expected an object of name -> style");
  std::vector<data::NamedStyle> out;
  for (const auto& [name, style] : j.items()) {
    data::NamedStyle s{name, style.get<data::StyleSpec>()};
    s.spec.validate();
    out.push_back(std::move(s));
  }
  return out;
}

int gen_data(const GenDataArgs& a) {
  if (a.n == 0) throw ConfigError("--n must be >= 1");
  const auto styles = resolve_styles(a.spec);
  claim_output_dir(a.out, a.force);
  for (const auto& s : styles) {
    const fs::path dir = fs::path(a.out) / s.name;
    fs::remove_all(dir);
    data::save_dataset(data::generate_domain(s.name, s.spec, a.n, data::kShapeClasses, a.seed), dir);
    std::printf("%s: %zu images -> %s\n", s.name.c_str(), a.n, dir.c_str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train / ablate / eval

struct RunArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string protocol;
  std::string out;
  std::string checkpoint;
  bool force = false;
};

RunConfig resolve_config(const RunArgs& a) {
  auto overrides = a.overrides;
  if (!a.protocol.empty()) overrides.push_back("protocol=" + a.protocol);
  if (!a.out.empty()) overrides.push_back("output=" + a.out);
  return load_run_config(a.config, overrides);
}

int train_cmd(const RunArgs& a) {
  const RunConfig cfg = resolve_config(a);
  const auto domains = load_domains(cfg);
  claim_output_dir(cfg.output, a.force);
  with_precision(cfg, [&]<typename T>() {
    const auto r = train<T>(cfg, domains, cfg.output);
    for (const auto& s : r.seeds) {
      std::printf("%s %s target %s seed %llu: %.2f%%\n", r.variant.c_str(), r.protocol.c_str(), r.target.c_str(),
                  static_cast<unsigned long long>(s.seed), 100.0 * s.target_accuracy);
    }
    std::printf("mean target accuracy %.2f%%\n", 100.0 * r.mean_accuracy);
    write_outputs(cfg.output, cfg, domains, r);
  });
  std::printf("wrote %s/report.json\n", cfg.output.c_str());
  return 0;
}

int ablate_cmd(const RunArgs& a) {
  const RunConfig cfg = resolve_config(a);
  const auto domains = load_domains(cfg);
  claim_output_dir(cfg.output, a.force);
  with_precision(cfg, [&]<typename T>() {
    const auto rep = ablate<T>(cfg, domains, cfg.output, [](const std::string& variant, const MetricsReport& r) {
      std::printf("%-17s target %-8s %.2f%%\n", variant.c_str(), r.target.c_str(), 100.0 * r.mean_accuracy);
      std::fflush(stdout);
    });
    write_outputs(cfg.output, cfg, domains, rep);
    std::printf("\n%s", comparison_table(rep).c_str());
  });
  std::printf("wrote %s/report.json and table.md\n", cfg.output.c_str());
  return 0;
}

nlohmann::json read_checkpoint_manifest(const fs::path& checkpoint) {
  fs::path manifest = checkpoint;
  manifest.replace_extension(".json");
  std::ifstream is(manifest);
  if (!is) throw IoError("checkpoint manifest '" + manifest.string() + "' not found");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
}

Model<double> load_checkpoint(const fs::path& checkpoint) {
  if (!fs::exists(checkpoint)) throw IoError("checkpoint '" + checkpoint.string() + "' not found");
  const auto manifest = read_checkpoint_manifest(checkpoint);
  if (!manifest.contains("model")) throw FormatError(checkpoint.string() + ": manifest has no model section");
  Model<double> model(model_spec_from_json(manifest.at("model")), 0);
  model.load(checkpoint);
  return model;
}

// Accuracy and entropies of a checkpoint on the test split of every
// configured domain.
int eval_cmd(const RunArgs& a) {
  if (a.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const RunConfig cfg = resolve_config(a);
  const auto model = load_checkpoint(a.checkpoint);
  const auto domains = load_domains(cfg);
  claim_output_dir(cfg.output, a.force);
  const auto test = index_range(cfg.train_per_domain, cfg.train_per_domain + cfg.test_per_domain);
  nlohmann::json results = nlohmann::json::array();
  for (const auto& name : cfg.domains) {
    const auto& d = domains.at(name);
    if (d.size() < cfg.train_per_domain + cfg.test_per_domain) {
      throw ConfigError("domain '" + name + "' has fewer images than the configured split");
    }
    const auto r = evaluate(model, d, test, cfg.eval_batch, eval_threads());
    std::printf("%-8s %.2f%% (%zu/%zu)\n", name.c_str(), 100.0 * r.accuracy, r.correct, r.total);
    results.push_back(nlohmann::json{{"domain", name},
                       {"accuracy", r.accuracy},
                       {"correct", r.correct},
                       {"total", r.total},
                       {"entropy", to_json(r.entropy)}});
  }
  auto j = run_header(cfg, domains);
  j["report"] = {{"checkpoint", fs::path(a.checkpoint).filename().string()},
                 {"model", model.spec_json()},
                 {"results", results}};
  write_json(fs::path(cfg.output) / "report.json", j);
  std::printf("wrote %s/report.json\n", cfg.output.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

int grad_check_cmd(const std::string& scope, std::size_t seeds) {
  std::size_t failures = 0;
  const auto entries = run_grad_suite(scope, seeds, 1e-4, [&](const GradSuiteEntry& e) {
    std::printf("%-5s %-26s max rel err %.3e  %s\n", e.scope.c_str(), e.name.c_str(), e.max_rel_error,
                e.passed ? "ok" : "FAIL");
    if (!e.passed) {
      ++failures;
      std::printf("      worst: seed %llu, input %zu, coordinate %zu, analytic %.10e, numeric %.10e\n",
                  static_cast<unsigned long long>(e.worst_seed), e.worst.input, e.worst.index, e.worst.analytic,
                  e.worst.numeric);
    }
    std::fflush(stdout);
  });
  std::printf("%zu/%zu checks passed over %zu seeds (64-bit, step 1e-5, tolerance 1e-4)\n",
              entries.size() - failures, entries.size(), seeds);
  return failures == 0 ? 0 : 2;
}

// ---------------------------------------------------------------------------
// inspect

struct InspectArgs {
  std::string checkpoint;
  std::string dataset;
  std::string dump = "inspect";
  std::size_t count = 16;
  bool force = false;
};

// Channel sum of an [n,h,w,c] map, each image scaled to unit spatial ℓ2 norm.
std::vector<float> activation_maps(const Tensor<double>& map) {
  const std::size_t n = map.dim(0), hw = map.dim(1) * map.dim(2), c = map.dim(3);
  std::vector<float> out(n * hw);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> m(hw, 0.0);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) m[p] += map[(i * hw + p) * c + k];
    double norm = 0.0;
    for (const double v : m) norm += v * v;
    norm = std::sqrt(norm);
    for (std::size_t p = 0; p < hw; ++p) out[i * hw + p] = static_cast<float>(norm > 0.0 ? m[p] / norm : 0.0);
  }
  return out;
}

int inspect_cmd(const InspectArgs& a) {
  if (a.checkpoint.empty() || a.dataset.empty()) throw ConfigError("inspect needs --checkpoint and --dataset");
  if (a.count == 0) throw ConfigError("--count must be >= 1");
  const auto model = load_checkpoint(a.checkpoint);
  const auto dataset = data::load_dataset(a.dataset);
  if (dataset.size() < a.count) {
    throw ConfigError("dataset '" + a.dataset + "' has " + std::to_string(dataset.size()) + " images, --count is " +
                      std::to_string(a.count));
  }
  claim_output_dir(a.dump, a.force);
  const auto idx = index_range(0, a.count);
  const auto fwd = model.forward(dataset.batch<double>(idx), nullptr);
  const fs::path dir = a.dump;

  nlohmann::json modules = nlohmann::json::array();
  for (std::size_t m = 0; m < fwd.snr.size(); ++m) {
    const auto& o = fwd.snr[m];
    const Shape shape{a.count, o.f_norm.dim(1), o.f_norm.dim(2)};
    const auto norm = activation_maps(o.f_norm), plus = activation_maps(o.f_plus), minus = activation_maps(o.f_minus);
    const std::string stem = "module" + std::to_string(m);
    io::save_tensor<float>(dir / (stem + "_f_norm.snrt"), shape, norm);
    io::save_tensor<float>(dir / (stem + "_f_plus.snrt"), shape, plus);
    io::save_tensor<float>(dir / (stem + "_f_minus.snrt"), shape, minus);
    double dist = 0.0;
    for (std::size_t i = 0; i < plus.size(); ++i) dist += (plus[i] - minus[i]) * (plus[i] - minus[i]);
    modules.push_back(nlohmann::json{{"module", m},
                       {"shape", shape},
                       {"files", {stem + "_f_norm.snrt", stem + "_f_plus.snrt", stem + "_f_minus.snrt"}},
                       {"plus_minus_l2", std::sqrt(dist)}});
    std::printf("module %zu: %zux%zu maps, |plus - minus| = %.4f\n", m, shape[1], shape[2], std::sqrt(dist));
  }

  std::ofstream csv(dir / "embeddings.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write " + (dir / "embeddings.csv").string());
  csv.precision(9);
  const std::size_t width = fwd.embedding.dim(1);
  csv << "index,label";
  for (std::size_t k = 0; k < width; ++k) csv << ",e" << k;
  csv << '\n';
  for (std::size_t i = 0; i < a.count; ++i) {
    csv << i << ',' << dataset.labels[i];
    for (std::size_t k = 0; k < width; ++k) csv << ',' << fwd.embedding[i * width + k];
    csv << '\n';
  }
  write_json(dir / "inspect.json", {{"checkpoint", fs::path(a.checkpoint).filename().string()},
                                    {"dataset", dataset.name},
                                    {"count", a.count},
                                    {"modules", modules},
                                    {"embeddings", "embeddings.csv"}});
  std::printf("wrote %zu images to %s\n", a.count, a.dump.c_str());
  return 0;
}

void add_run_options(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("--config", a.config, "JSON run config (defaults apply when omitted)");
  cmd->add_option("--protocol", a.protocol, "dg or uda")->check(CLI::IsMember({"dg", "uda"}));
  cmd->add_option("--out", a.out, "output directory (config key 'output')");
  cmd->add_flag("--force", a.force, "write into a non-empty output directory");
  cmd->add_option("overrides", a.overrides, "dotted key=value overrides, e.g. train.lr=0.1");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style normalization and restitution: data, training and checks"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "render the synthetic StyleShapes domains");
  gen_cmd->add_option("--spec", gen.spec, "'preset', a preset domain name, or a JSON file of name -> style");
  gen_cmd->add_option("--out", gen.out, "dataset root directory");
  gen_cmd->add_option("--seed", gen.seed, "content seed shared by all domains");
  gen_cmd->add_option("--n", gen.n, "images per domain");
  gen_cmd->add_flag("--force", gen.force, "write into a non-empty directory");

  RunArgs train_args, eval_args, ablate_args;
  auto* train_sub = app.add_subcommand("train", "train one variant on the source domains, test on the target");
  add_run_options(train_sub, train_args);
  auto* eval_sub = app.add_subcommand("eval", "evaluate a checkpoint on every domain's test split");
  add_run_options(eval_sub, eval_args);
  eval_sub->add_option("--checkpoint", eval_args.checkpoint, "checkpoint.snrt written by train")->required();
  auto* ablate_sub = app.add_subcommand("ablate", "leave-one-domain-out for all four variants");
  add_run_options(ablate_sub, ablate_args);

  std::string scope = "model";
  std::size_t seeds = 20;
  auto* grad_sub = app.add_subcommand("grad-check", "compare analytic gradients with central differences");
  grad_sub->add_option("--scope", scope, "ops, snr, loss or model (model runs everything)")
      ->check(CLI::IsMember(grad_scopes()));
  grad_sub->add_option("--seeds", seeds, "random seeds per check");

  InspectArgs ins;
  auto* inspect_sub = app.add_subcommand("inspect", "dump SNR activation maps and embeddings");
  inspect_sub->add_option("--checkpoint", ins.checkpoint, "checkpoint.snrt")->required();
  inspect_sub->add_option("--dataset", ins.dataset, "one domain directory, e.g. data/D-noisy")->required();
  inspect_sub->add_option("--dump", ins.dump, "output directory");
  inspect_sub->add_option("--count", ins.count, "images to dump (the first N)");
  inspect_sub->add_flag("--force", ins.force, "write into a non-empty directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_sub) return train_cmd(train_args);
    if (*eval_sub) return eval_cmd(eval_args);
    if (*ablate_sub) return ablate_cmd(ablate_args);
    if (*grad_sub) return grad_check_cmd(scope, seeds);
    if (*inspect_sub) return inspect_cmd(ins);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
