#pragma once

// Config-driven experiment runner behind the command-line tool: domain
// loading, multi-seed runs with reports and checkpoints, and grid sweeps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmpda/model.hpp"
#include "mmpda/synthdata.hpp"
#include "mmpda/trainer.hpp"

namespace mmpda::experiment {

// One domain: either a CSV file or an explicit generator spec.
struct DomainEntry {
  std::string id;
  std::string csv;  // resolved against the config file's directory
  std::optional<data::DomainSpec> generator;
};

struct DataConfig {
  // "shift-2s1t" or empty for explicit entries.
  std::string benchmark;
  data::BenchmarkOptions benchmark_options;
  std::vector<std::size_t> modality_widths;
  std::vector<DomainEntry> sources;
  std::optional<DomainEntry> target;
};

// One sweep combination. Unset fields keep the base config's value.
struct SweepRow {
  std::optional<double> alpha, beta, gamma, eta, lambda;
  std::optional<bool> grl;
};

struct SweepConfig {
  // Cross product in the fixed key order alpha, beta, gamma, eta, lambda,
  // grl, last key varying fastest.
  std::vector<std::pair<std::string, std::vector<nlohmann::json>>> grid;
  // Declared row list; used instead of the grid when non-empty.
  std::vector<SweepRow> rows;
};

struct ExperimentConfig {
  std::string run_id = "run";
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{1};
  std::size_t jobs = 1;
  DataConfig data;
  model::ModelDims model;  // modality_inputs filled from the data section
  train::AdaptConfig train;
  SweepConfig sweep;
  // Directory relative paths are resolved against; not serialized.
  std::filesystem::path base_dir;

  bool operator==(const ExperimentConfig& other) const;
};

// Throws ConfigError naming the offending field path (e.g. "train.lr").
ExperimentConfig parse_config(const nlohmann::json& doc,
                              const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

// The twelve (alpha, beta, gamma, eta, lambda) settings of the weight
// sensitivity sweep, starting from the lambda = 0 baseline.
std::vector<SweepRow> sensitivity_rows();
std::vector<SweepRow> expand_sweep(const SweepConfig& sweep);
std::string row_key(const SweepRow& row);

nlohmann::json to_json(const data::DomainSpec& spec);
data::DomainSpec domain_spec_from_json(const nlohmann::json& doc,
                                       const std::string& path);

struct Domains {
  std::vector<data::DomainDataset> sources;
  data::DomainDataset target;
};

// Builds every domain for one run seed. Benchmark domains are generated from
// the run seed; explicit generator specs keep their own seeds.
Domains load_domains(const ExperimentConfig& config, std::uint64_t seed);

struct RunOutcome {
  std::uint64_t seed = 0;
  std::filesystem::path report_path;
  std::filesystem::path checkpoint_path;
  bool has_final = false;
  double accuracy = 0.0;
  double f1 = 0.0;
};

struct Summary {
  std::string run_id;
  std::vector<RunOutcome> runs;
  double accuracy_mean = 0.0, accuracy_stdev = 0.0;
  double f1_mean = 0.0, f1_stdev = 0.0;
};

nlohmann::json to_json(const Summary& s);

using Logger = std::function<void(const std::string& event, const nlohmann::json& fields)>;

// Serialized report: two-space indented JSON with a trailing newline.
std::string report_text(const train::RunReport& report);

// One training run per seed (up to config.jobs in parallel). Writes
// <run_id>-seed<k>.report.json and .checkpoint.json per seed, then
// <run_id>.summary.json. A diverging seed is rethrown after the other seeds
// finish; completed reports stay on disk.
Summary run_experiment(const ExperimentConfig& config, const Logger& log = {});

struct SweepResult {
  std::filesystem::path csv_path;
  std::size_t combinations = 0;
  std::size_t rows_written = 0;  // data rows, excluding the header
};

// Runs every sweep combination for every seed and writes <run_id>.sweep.csv:
// one row per (combination, seed) followed by one mean row per combination.
SweepResult ablation_sweep(const ExperimentConfig& config, const Logger& log = {});

// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_stdev(const std::vector<double>& values);

}  // namespace mmpda::experiment
