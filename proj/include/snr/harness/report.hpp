#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "snr/error.hpp"
#include "snr/harness/config.hpp"
#include "snr/harness/train.hpp"
#include "snr/random.hpp"

namespace snr::harness {

inline nlohmann::json to_json(const EntropyStats& e) {
  return {{"h_plus", e.h_plus}, {"h_norm", e.h_norm}, {"h_minus", e.h_minus}};
}

inline nlohmann::json to_json(const std::vector<EntropyStats>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& e : v) a.push_back(to_json(e));
  return a;
}

// Wall-clock times are left out so that identical runs give identical files;
// they go to timing.json instead.
inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.seeds) {
    seeds.push_back({{"seed", s.seed},
                     {"target_accuracy", s.target_accuracy},
                     {"source_entropy", to_json(s.source_entropy)},
                     {"target_entropy", to_json(s.target_entropy)},
                     {"final_train_accuracy", s.curve.empty() ? 0.0 : s.curve.back().train_accuracy},
                     {"final_task_loss", s.curve.empty() ? 0.0 : s.curve.back().task_loss}});
  }
  return {{"variant", r.variant},     {"protocol", r.protocol},        {"target", r.target},
          {"sources", r.sources},     {"seeds", seeds},                {"mean_accuracy", r.mean_accuracy},
          {"param_count", r.param_count}, {"snr_param_overhead", r.snr_param_overhead}};
}

inline nlohmann::json to_json(const LodoReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(to_json(row));
  return {{"variant", r.variant}, {"protocol", r.protocol}, {"rows", rows}, {"mean_accuracy", r.mean_accuracy}};
}

/// Provenance shared by every report: the resolved config and where each
/// random stream came from.
inline nlohmann::json run_header(const RunConfig& cfg, const DomainSet& domains) {
  nlohmann::json data = nlohmann::json::object();
  for (const auto& name : cfg.domains) {
    if (const auto it = domains.find(name); it != domains.end()) data[name] = {{"seed", it->second.seed}, {"n", it->second.size()}};
  }
  return {{"config", to_json(cfg)},
          {"prng", kPrngName},
          {"streams", {{"data", "per domain, see data"}, {"init", "init/<stage>/<part>"}, {"shuffle", "shuffle"}}},
          {"root_seeds", cfg.seeds},
          {"data", data}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

/// Plot data: one line per (target, seed, epoch).
inline void write_curves(const std::filesystem::path& path, const std::vector<const MetricsReport*>& reports) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  os << "variant,protocol,target,seed,epoch,lr,task_loss,snr_loss,total,train_accuracy,target_accuracy\n";
  for (const auto* r : reports) {
    for (const auto& s : r->seeds) {
      for (const auto& e : s.curve) {
        os << r->variant << ',' << r->protocol << ',' << r->target << ',' << s.seed << ',' << e.epoch << ',' << e.lr
           << ',' << e.task_loss << ',' << e.snr_loss << ',' << e.total << ',' << e.train_accuracy << ','
           << e.target_accuracy << '\n';
      }
    }
  }
}

inline void write_timing(const std::filesystem::path& path, const std::vector<const MetricsReport*>& reports) {
  nlohmann::json runs = nlohmann::json::array();
  double total = 0.0;
  for (const auto* r : reports) {
    for (const auto& s : r->seeds) {
      runs.push_back({{"variant", r->variant}, {"protocol", r->protocol}, {"target", r->target}, {"seed", s.seed}, {"seconds", s.seconds}});
      total += s.seconds;
    }
  }
  write_json(path, {{"runs", runs}, {"total_seconds", total}});
}

/// report.json, curves.csv and timing.json for a single-target run.
inline void write_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const DomainSet& domains,
                          const MetricsReport& r) {
  auto j = run_header(cfg, domains);
  j["report"] = to_json(r);
  write_json(dir / "report.json", j);
  write_curves(dir / "curves.csv", {&r});
  write_timing(dir / "timing.json", {&r});
}

struct AblationReport {
  std::string protocol;
  std::vector<std::string> targets;
  std::vector<LodoReport> variants;  // baseline, in_only, snr, snr_no_dual_loss
};

/// Leave-one-domain-out for all four variants under identical seeds.
template <typename T>
AblationReport ablate(const RunConfig& cfg, const DomainSet& domains, const std::filesystem::path& out_dir = {},
                      const std::function<void(const std::string&, const MetricsReport&)>& on_row = {}) {
  AblationReport rep;
  rep.protocol = to_string(cfg.protocol);
  rep.targets = cfg.domains;
  for (const Variant v : all_variants()) {
    RunConfig c = cfg;
    c.model = cfg.model.with_variant(v);
    if (v != Variant::baseline && cfg.model.variant == Variant::baseline) {
      c.model.snr_after_stage = ModelSpec::default_insertion(c.model.stages.size());
    }
    const auto dir = out_dir.empty() ? out_dir : out_dir / to_string(v);
    rep.variants.push_back(leave_one_domain_out<T>(c, domains, dir, [&](const MetricsReport& r) {
      if (on_row) on_row(to_string(v), r);
    }));
  }
  return rep;
}

/// Markdown table: one row per variant, one accuracy column per held-out
/// domain plus the mean.
inline std::string comparison_table(const AblationReport& rep) {
  std::string s = "| variant |";
  for (const auto& t : rep.targets) s += " " + t + " |";
  s += " mean |\n|---|";
  for (std::size_t i = 0; i <= rep.targets.size(); ++i) s += "---|";
  s += '\n';
  char buf[32];
  for (const auto& v : rep.variants) {
    s += "| " + v.variant + " |";
    for (const auto& row : v.rows) {
      std::snprintf(buf, sizeof buf, " %.2f |", 100.0 * row.mean_accuracy);
      s += buf;
    }
    std::snprintf(buf, sizeof buf, " %.2f |\n", 100.0 * v.mean_accuracy);
    s += buf;
  }
  return s;
}

inline nlohmann::json to_json(const AblationReport& rep) {
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : rep.variants) variants.push_back(to_json(v));
  nlohmann::json table = nlohmann::json::array();
  for (const auto& v : rep.variants) {
    nlohmann::json row = {{"variant", v.variant}, {"mean", v.mean_accuracy}};
    for (const auto& r : v.rows) row[r.target] = r.mean_accuracy;
    table.push_back(row);
  }
  return {{"protocol", rep.protocol}, {"targets", rep.targets}, {"table", table}, {"variants", variants}};
}

inline void write_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const DomainSet& domains,
                          const AblationReport& rep) {
  auto j = run_header(cfg, domains);
  j["report"] = to_json(rep);
  write_json(dir / "report.json", j);
  std::vector<const MetricsReport*> all;
  for (const auto& v : rep.variants)
    for (const auto& r : v.rows) all.push_back(&r);
  write_curves(dir / "curves.csv", all);
  write_timing(dir / "timing.json", all);
  std::ofstream(dir / "table.md", std::ios::trunc) << comparison_table(rep);
}

}  // namespace snr::harness
