#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "snr/harness/report.hpp"

namespace {

namespace fs = std::filesystem;
using namespace snr;
using namespace snr::harness;

fs::path write_file(const std::string& name, const std::string& text) {
  const fs::path p = fs::temp_directory_path() / ("snr_config_" + name + "_" + std::to_string(::getpid()) + ".json");
  std::ofstream(p, std::ios::trunc) << text;
  return p;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "<no ConfigError>";
}

TEST(RunConfigJson, DefaultsRoundTrip) {
  const RunConfig d;
  const RunConfig back = run_config_from_json(to_json(d));
  EXPECT_EQ(to_json(back), to_json(d));
  EXPECT_EQ(back.model.snr_after_stage, (std::vector<bool>{true, true, true, false}));
  EXPECT_EQ(back.train.lr, 0.05);
  EXPECT_EQ(back.train.epochs, 30u);
  EXPECT_EQ(back.train.batch_size, 64u);
  EXPECT_EQ(back.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(RunConfigJson, NonDefaultRoundTrip) {
  RunConfig c;
  c.protocol = Protocol::uda;
  c.target = "D-dim";
  c.model.stages = {{8, 1}, {12, 2}};
  c.model.snr_after_stage = {false, true};
  c.model.variant = Variant::in_only;
  c.model.snr.gate_bias = false;
  c.train.lambda = 0.25;
  c.seeds = {7};
  c.precision = "f64";
  const RunConfig back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.model.stages, c.model.stages);
  EXPECT_EQ(back.protocol, Protocol::uda);
}

TEST(RunConfigJson, PartialPatchKeepsDefaults) {
  const RunConfig c = run_config_from_json(nlohmann::json::parse(R"({"train": {"lambda": 2}})"));
  EXPECT_EQ(c.train.lambda, 2.0);
  EXPECT_EQ(c.train.lr, 0.05);
  EXPECT_EQ(c.target, "D-noisy");
}

TEST(RunConfigJson, UnknownKeyIsRejected) {
  EXPECT_EQ(error_of([] { (void)run_config_from_json(nlohmann::json::parse(R"({"train": {"lamda": 1}})")); }),
            "unknown config key 'train.lamda'");
  EXPECT_EQ(error_of([] { (void)run_config_from_json(nlohmann::json::parse(R"({"epochs": 3})")); }),
            "unknown config key 'epochs'");
  EXPECT_NE(error_of([] {
              (void)run_config_from_json(nlohmann::json::parse(R"({"model": {"stages": [{"channels": 8, "strid": 1}]}})"));
            }).find("strid"),
            std::string::npos);
}

TEST(RunConfigJson, TypeMismatchNamesKeyAndTypes) {
  EXPECT_EQ(error_of([] { (void)run_config_from_json(nlohmann::json::parse(R"({"train": {"epochs": "ten"}})")); }),
            "config key 'train.epochs': expected unsigned integer, got string");
  EXPECT_EQ(error_of([] { (void)run_config_from_json(nlohmann::json::parse(R"({"train": {"epochs": -1}})")); }),
            "config key 'train.epochs': expected unsigned integer, got integer");
  EXPECT_EQ(error_of([] { (void)run_config_from_json(nlohmann::json::parse(R"({"checkpoints": 1})")); }),
            "config key 'checkpoints': expected boolean, got unsigned integer");
  // An integer is a valid float.
  EXPECT_EQ(run_config_from_json(nlohmann::json::parse(R"({"train": {"lr": 1}})")).train.lr, 1.0);
}

TEST(Overrides, ParseDottedAssignments) {
  EXPECT_EQ(override_patch("train.lr=0.1"), nlohmann::json::parse(R"({"train": {"lr": 0.1}})"));
  EXPECT_EQ(override_patch("target=D-dim"), nlohmann::json::parse(R"({"target": "D-dim"})"));
  EXPECT_EQ(override_patch("seeds=[3,4]"), nlohmann::json::parse(R"({"seeds": [3, 4]})"));
  EXPECT_THROW((void)override_patch("train.lr"), ConfigError);
  EXPECT_THROW((void)override_patch("train..lr=1"), ConfigError);
}

TEST(LoadRunConfig, PrecedenceIsOverrideThenFileThenDefault) {
  const auto file = write_file("prec", R"({"train": {"lr": 0.2, "epochs": 4}, "target": "D-hue"})");
  const RunConfig c = load_run_config(file, {"train.lr=0.3"});
  EXPECT_EQ(c.train.lr, 0.3);        // override beats file
  EXPECT_EQ(c.train.epochs, 4u);     // file beats default
  EXPECT_EQ(c.target, "D-hue");
  EXPECT_EQ(c.train.momentum, 0.9);  // default
  const RunConfig later = load_run_config(file, {"train.lr=0.3", "train.lr=0.4"});
  EXPECT_EQ(later.train.lr, 0.4);
  fs::remove(file);
}

TEST(LoadRunConfig, Errors) {
  EXPECT_THROW((void)load_run_config("/nonexistent/config.json", {}), IoError);
  const auto broken = write_file("broken", "{ not json");
  EXPECT_THROW((void)load_run_config(broken, {}), ConfigError);
  fs::remove(broken);
  // Merged but semantically invalid.
  EXPECT_THROW((void)load_run_config({}, {"target=D-nowhere"}), ConfigError);
  EXPECT_THROW((void)load_run_config({}, {"model.variant=agg"}), ConfigError);
  EXPECT_THROW((void)load_run_config({}, {"model.stages=[{\"channels\":8,\"stride\":1}]"}), ConfigError);
}

TEST(Reports, ExcludeWallClock) {
  MetricsReport r;
  r.variant = "snr";
  r.seconds = 12.5;
  SeedResult s;
  s.seconds = 3.0;
  r.seeds.push_back(s);
  const std::string dumped = to_json(r).dump();
  EXPECT_EQ(dumped.find("seconds"), std::string::npos);
}

TEST(Reports, ComparisonTable) {
  AblationReport rep;
  rep.targets = {"A", "B"};
  LodoReport v;
  v.variant = "snr";
  MetricsReport a, b;
  a.target = "A";
  a.mean_accuracy = 0.5;
  b.target = "B";
  b.mean_accuracy = 0.25;
  v.rows = {a, b};
  v.mean_accuracy = 0.375;
  rep.variants = {v};
  EXPECT_EQ(comparison_table(rep), "| variant | A | B | mean |\n|---|---|---|---|\n| snr | 50.00 | 25.00 | 37.50 |\n");
  const auto j = to_json(rep);
  EXPECT_EQ(j.at("table").at(0).at("B"), 0.25);
}

}  // namespace
