#include "mmpda/experiment.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "mmpda/errors.hpp"

namespace experiment = mmpda::experiment;
namespace fs = std::filesystem;
using json = nlohmann::json;
using mmpda::ConfigError;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mmpda_experiment_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

json tiny_doc(const fs::path& out) {
  return {{"run_id", "tiny"},
          {"output_dir", out.string()},
          {"seeds", {1, 2}},
          {"data",
           {{"benchmark", "shift-2s1t"},
            {"benchmark_options",
             {{"width", 3}, {"source_count", 24}, {"target_count", 16}}}}},
          {"model",
           {{"unimodal_width", 4},
            {"fused_width", 3},
            {"encoder_hidden", {4}},
            {"discriminator_hidden", {4}}}},
          {"train", {{"epochs", 1}, {"batch_size", 8}, {"lr", 1e-3}}}};
}

std::string error_path(const json& doc) {
  try {
    experiment::parse_config(doc);
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "<no error>";
}

TEST(Config, DefaultsFromMinimalDocument) {
  auto c = experiment::parse_config({{"data", {{"benchmark", "shift-2s1t"}}}});
  EXPECT_EQ(c.run_id, "run");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1}));
  EXPECT_EQ(c.train.weights.alpha, 10.0);
  EXPECT_EQ(c.train.weights.beta, 0.1);
  EXPECT_EQ(c.train.weights.gamma, 10.0);
  EXPECT_EQ(c.train.weights.eta, 0.1);
  EXPECT_EQ(c.train.weights.lambda, 10.0);
  EXPECT_EQ(c.train.lr, 1e-4);
  EXPECT_EQ(c.train.weight_decay, 5e-5);
  EXPECT_EQ(c.train.batch_size, 32u);
  EXPECT_EQ(c.train.epochs, 20u);
  EXPECT_EQ(c.model.modality_inputs, (std::vector<std::size_t>{8, 8}));
}

TEST(Config, RoundTripsThroughJson) {
  auto c = experiment::parse_config(tiny_doc("out"));
  auto again = experiment::parse_config(experiment::to_json(c));
  EXPECT_TRUE(again == c);
  EXPECT_EQ(experiment::to_json(again).dump(), experiment::to_json(c).dump());
}

TEST(Config, ExplicitDomainsRoundTrip) {
  json gen = {{"count", 8},
              {"seed", 4},
              {"modalities",
               {{{"class_means", {{0.0, 0.0}, {1.0, 1.0}}}, {"transform", {{1.0, 0.0}, {0.2, 1.0}}}}}}};
  json doc = {{"data",
               {{"modality_widths", {2}},
                {"sources", {{{"id", "a"}, {"generator", gen}}, {{"id", "b"}, {"csv", "b.csv"}}}},
                {"target", {{"id", "t"}, {"generator", gen}}}}}};
  auto c = experiment::parse_config(doc, "/data");
  EXPECT_TRUE(experiment::parse_config(experiment::to_json(c), "/data") == c);
  ASSERT_EQ(c.data.sources.size(), 2u);
  EXPECT_TRUE(c.data.sources[0].generator.has_value());
  EXPECT_EQ(c.data.sources[1].csv, "b.csv");
}

TEST(Config, ErrorsNameTheField) {
  auto base = tiny_doc("out");
  auto with = [&](const json::json_pointer& ptr, const json& value) {
    json d = base;
    d[ptr] = value;
    return d;
  };
  EXPECT_EQ(error_path(with("/train/lr"_json_pointer, "fast")), "train.lr");
  EXPECT_EQ(error_path(with("/train/lr"_json_pointer, -1.0)), "train.lr");
  EXPECT_EQ(error_path(with("/train/bogus"_json_pointer, 1)), "train.bogus");
  EXPECT_EQ(error_path(with("/train/seed"_json_pointer, 1)), "train.seed");
  EXPECT_EQ(error_path(with("/train/alpha"_json_pointer, -2)), "train.alpha");
  EXPECT_EQ(error_path(with("/data/benchmark"_json_pointer, "nope")), "data.benchmark");
  EXPECT_EQ(error_path(with("/data/benchmark_options"_json_pointer, {{"class_lean", 1.0}})),
            "data.benchmark_options.class_lean");
  EXPECT_EQ(error_path(with("/model/fusion"_json_pointer, {{"kind", "sum"}})), "model.fusion.kind");
  EXPECT_EQ(error_path(with("/seeds"_json_pointer, {1, 1})), "seeds[1]");
  EXPECT_EQ(error_path(with("/sweep"_json_pointer, {{"grid", {{"mu", {1}}}}})), "sweep.grid.mu");
  EXPECT_EQ(error_path(with("/sweep"_json_pointer, {{"grid", {{"grl", {"maybe"}}}}})),
            "sweep.grid.grl[0]");
  EXPECT_EQ(error_path(with("/sweep"_json_pointer, {{"rows", "table4"}})), "sweep.rows");
  EXPECT_EQ(error_path(with("/unknown"_json_pointer, 0)), "unknown");
  json no_data = base;
  no_data.erase("data");
  EXPECT_EQ(error_path(no_data), "data");
}

TEST(Config, LoadReportsMissingFileAndBadJson) {
  auto dir = scratch("load");
  EXPECT_THROW(experiment::load_config(dir / "missing.json"), ConfigError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(experiment::load_config(dir / "bad.json"), ConfigError);
}

TEST(Sweep, SensitivityPresetHasTwelveRows) {
  auto rows = experiment::sensitivity_rows();
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(*rows[0].lambda, 0.0);
  EXPECT_EQ(*rows[1].lambda, 1.0);
  EXPECT_EQ(*rows[11].lambda, 10.0);
  EXPECT_EQ(*rows[11].alpha, 10.0);
  EXPECT_EQ(*rows[11].beta, 0.1);
  EXPECT_EQ(*rows[11].gamma, 10.0);
  EXPECT_EQ(*rows[11].eta, 0.1);
  std::set<std::string> keys;
  for (const auto& r : rows) keys.insert(experiment::row_key(r));
  EXPECT_EQ(keys.size(), 12u);
  EXPECT_EQ(experiment::row_key(rows[11]), "alpha=10;beta=0.1;gamma=10;eta=0.1;lambda=10");
}

TEST(Sweep, GridExpandsInKeyOrder) {
  experiment::SweepConfig s;
  s.grid = {{"lambda", {0.0, 1.0, 10.0}}, {"grl", {false, true}}};
  auto rows = experiment::expand_sweep(s);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(*rows[0].lambda, 0.0);
  EXPECT_FALSE(*rows[0].grl);
  EXPECT_TRUE(*rows[1].grl);
  EXPECT_EQ(*rows[5].lambda, 10.0);
  EXPECT_EQ(experiment::row_key(rows[1]), "lambda=0;grl=on");
  EXPECT_EQ(experiment::expand_sweep({}).size(), 1u);
}

TEST(MeanStdev, SampleDeviation) {
  auto [m, s] = experiment::mean_stdev({1.0, 2.0, 3.0, 4.0});
  EXPECT_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(experiment::mean_stdev({7.0}).second, 0.0);
}

TEST(RunExperiment, WritesReportsCheckpointsAndSummary) {
  auto dir = scratch("run");
  auto c = experiment::parse_config(tiny_doc(dir));
  c.jobs = 2;
  auto summary = experiment::run_experiment(c);
  ASSERT_EQ(summary.runs.size(), 2u);
  for (auto seed : {1, 2}) {
    EXPECT_TRUE(fs::exists(dir / ("tiny-seed" + std::to_string(seed) + ".report.json")));
    EXPECT_TRUE(fs::exists(dir / ("tiny-seed" + std::to_string(seed) + ".checkpoint.json")));
  }
  auto doc = json::parse(read_file(dir / "tiny.summary.json"));
  EXPECT_EQ(doc["runs"].size(), 2u);
  EXPECT_TRUE(doc["accuracy"].contains("stdev"));

  // The echoed config re-parses to the same experiment.
  auto report = json::parse(read_file(dir / "tiny-seed1.report.json"));
  auto echoed = experiment::parse_config(report["config"]);
  EXPECT_TRUE(echoed == c) << report["config"].dump();

  // Reports are byte-identical on a rerun.
  const auto first = read_file(dir / "tiny-seed2.report.json");
  experiment::run_experiment(c);
  EXPECT_EQ(read_file(dir / "tiny-seed2.report.json"), first);
}

TEST(RunExperiment, BaselineHasZeroAdaptationLosses) {
  auto dir = scratch("baseline");
  auto doc = tiny_doc(dir);
  doc["train"]["lambda"] = 0.0;
  doc["seeds"] = {5};
  experiment::run_experiment(experiment::parse_config(doc));
  auto report = json::parse(read_file(dir / "tiny-seed5.report.json"));
  for (const auto& e : report["per_epoch"]) {
    EXPECT_EQ(e["mean"]["coral"], 0.0);
    EXPECT_EQ(e["mean"]["mdd"], 0.0);
    EXPECT_EQ(e["mean"]["entropy"], 0.0);
    EXPECT_EQ(e["mean"]["adversarial"], 0.0);
  }
}

TEST(AblationSweep, RowCountsMatchGridTimesSeedsPlusMeans) {
  auto dir = scratch("sweep");
  auto doc = tiny_doc(dir);
  doc["sweep"] = {{"grid", {{"lambda", {0, 1, 10}}}}};
  auto result = experiment::ablation_sweep(experiment::parse_config(doc));
  EXPECT_EQ(result.combinations, 3u);
  EXPECT_EQ(result.rows_written, 3u * 2u + 3u);
  EXPECT_EQ(count_lines(result.csv_path), 1u + 9u);
  const auto text = read_file(result.csv_path);
  EXPECT_EQ(text.rfind("row,key,alpha,beta,gamma,eta,lambda,grl,seed,accuracy,f1\n", 0), 0u);
  EXPECT_NE(text.find(",mean,"), std::string::npos);
}

TEST(AblationSweep, SensitivityRowsProduceTwelveSummaries) {
  auto dir = scratch("sensitivity");
  auto doc = tiny_doc(dir);
  doc["seeds"] = {1};
  doc["sweep"] = {{"rows", "sensitivity"}};
  auto result = experiment::ablation_sweep(experiment::parse_config(doc));
  EXPECT_EQ(result.combinations, 12u);
  EXPECT_EQ(result.rows_written, 12u + 12u);
}

// ---- command-line tool ----------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MMPDA_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const json& doc) {
  const auto path = dir / "config.json";
  std::ofstream(path) << doc.dump(2);
  return path;
}

TEST(Cli, ExitCodes) {
  auto dir = scratch("cli");
  auto good = write_config(dir, tiny_doc(dir / "out"));
  EXPECT_EQ(run_cli("train --config " + good.string() + " --seed 3"), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "tiny-seed3.report.json"));
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("train"), 2);
  EXPECT_EQ(run_cli("train --config " + (dir / "missing.json").string()), 2);

  auto bad = tiny_doc(dir / "out");
  bad["train"]["lr"] = "fast";
  EXPECT_EQ(run_cli("train --config " + write_config(dir, bad).string()), 2);

  auto diverging = tiny_doc(dir / "out");
  diverging["train"]["lr"] = 1e300;
  diverging["train"]["grad_clip"] = 0;
  diverging["train"]["optimizer"] = "plain-sgd";
  diverging["train"]["epochs"] = 5;
  EXPECT_EQ(run_cli("train --config " + write_config(dir, diverging).string()), 3);
}

TEST(Cli, GenerateEvaluateAndGapmatrix) {
  auto dir = scratch("cli_flow");
  auto config = write_config(dir, tiny_doc(dir / "out"));
  ASSERT_EQ(run_cli("generate --config " + config.string() + " --seed 4"), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "seed4" / "source-1.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "seed4" / "target.csv"));
  ASSERT_EQ(run_cli("train --config " + config.string() + " --seed 4"), 0);
  const auto ckpt = dir / "out" / "tiny-seed4.checkpoint.json";
  EXPECT_EQ(run_cli("evaluate --config " + config.string() + " --seed 4 --checkpoint " +
                    ckpt.string() + " --out " + dir.string()),
            0);
  EXPECT_EQ(run_cli("evaluate --checkpoint " + ckpt.string() + " --data " +
                    (dir / "out" / "seed4" / "source-2.csv").string() + " --out " +
                    dir.string()),
            0);
  EXPECT_EQ(run_cli("gapmatrix --config " + config.string() + " --seed 4"), 0);
  EXPECT_EQ(run_cli("sweep --config " + config.string()), 2);  // no sweep section
  auto doc = tiny_doc(dir / "out");
  doc["sweep"] = {{"grid", {{"grl", {"off", "on"}}}}};
  EXPECT_EQ(run_cli("sweep --config " + write_config(dir, doc).string() + " --seed 4"), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "tiny.sweep.csv"));
}

}  // namespace
