// mmpda: config-driven runner for multi-source multimodal domain adaptation.
//
//   mmpda generate  --config exp.json [--seed k] [--out dir]
//   mmpda train     --config exp.json [--seed k] [--out dir] [--jobs n]
//   mmpda evaluate  --checkpoint ck.json (--data file.csv | --config exp.json [--seed k]) [--out dir]
//   mmpda gapmatrix --config exp.json [--seed k] [--checkpoint ck.json] [--out dir]
//   mmpda gradcheck [--out dir]
//   mmpda sweep     --config exp.json [--seed k] [--out dir] [--jobs n]
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error or divergence.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "log.hpp"
#include "mmpda/errors.hpp"
#include "mmpda/evalx.hpp"
#include "mmpda/experiment.hpp"
#include "mmpda/gradcheck.hpp"
#include "mmpda/model.hpp"
#include "mmpda/synthdata.hpp"
#include "mmpda/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

constexpr double kGradTolerance = 1e-5;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> jobs;
  std::string checkpoint;
  std::string data;
};

using namespace mmpda;

experiment::ExperimentConfig load(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config", "required");
  auto c = experiment::load_config(o.config);
  if (o.seed) c.seeds = {*o.seed};
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.jobs) {
    if (*o.jobs == 0) throw ConfigError("--jobs", "must be > 0");
    c.jobs = *o.jobs;
  }
  return c;
}

void logger(const std::string& event, const json& fields) {
  cli::log_info(event, fields);
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << doc.dump(2) << "\n";
}

model::ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return model::from_checkpoint(json::parse(in));
}

int cmd_generate(const Options& o) {
  const auto c = load(o);
  for (auto seed : c.seeds) {
    const auto domains = experiment::load_domains(c, seed);
    const fs::path dir = fs::path(c.output_dir) / ("seed" + std::to_string(seed));
    fs::create_directories(dir);
    auto write = [&](const data::DomainDataset& d) {
      const fs::path p = dir / (d.id() + ".csv");
      data::write_domain_csv(d, p.string());
      cli::log_info("generate.domain", {{"seed", seed},
                                        {"domain", d.id()},
                                        {"role", data::to_string(d.role())},
                                        {"samples", d.size()},
                                        {"path", p.string()}});
    };
    for (const auto& s : domains.sources) write(s);
    write(domains.target);
  }
  return kExitOk;
}

int cmd_train(const Options& o) {
  const auto c = load(o);
  cli::log_info("train.start", {{"run_id", c.run_id}, {"seeds", c.seeds}, {"jobs", c.jobs}});
  experiment::run_experiment(c, logger);
  return kExitOk;
}

int cmd_evaluate(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint", "required");
  auto model = load_checkpoint(o.checkpoint);
  const auto widths = model.dims().modality_inputs;
  std::optional<data::DomainDataset> dataset;
  if (!o.data.empty()) {
    // Loaded as a source so unlabeled rows are reported with their line.
    dataset = data::load_domain_csv(o.data, fs::path(o.data).stem().string(),
                                    data::Role::kSource, widths);
  } else {
    auto c = load(o);
    if (c.model.modality_inputs != widths) {
      throw ConfigError("data", "modality widths differ from the checkpoint");
    }
    dataset = experiment::load_domains(c, c.seeds.front()).target;
  }
  const auto metrics = train::evaluate(model, *dataset);
  const fs::path out = fs::path(o.out.empty() ? "." : o.out) /
                       (dataset->id() + ".metrics.json");
  write_json(out, evalx::to_json(metrics));
  cli::log_info("evaluate.done", {{"domain", dataset->id()},
                                  {"samples", dataset->size()},
                                  {"accuracy", metrics.accuracy},
                                  {"f1", metrics.f1},
                                  {"path", out.string()}});
  return kExitOk;
}

int cmd_gapmatrix(const Options& o) {
  const auto c = load(o);
  std::optional<model::ModelBundle> model;
  if (!o.checkpoint.empty()) model = load_checkpoint(o.checkpoint);
  for (auto seed : c.seeds) {
    const auto domains = experiment::load_domains(c, seed);
    std::vector<std::pair<std::string, nd::Tensor>> sets;
    auto features = [&](const data::DomainDataset& d) {
      return model ? train::fused_features(*model, d) : d.flat_features();
    };
    for (const auto& s : domains.sources) sets.emplace_back(s.id(), features(s));
    sets.emplace_back(domains.target.id(), features(domains.target));
    const auto gap = evalx::domain_gap_matrix(sets);
    json doc = evalx::to_json(gap);
    doc["features"] = model ? "fused" : "raw";
    doc["seed"] = seed;
    const fs::path out = fs::path(c.output_dir) /
                         (c.run_id + "-seed" + std::to_string(seed) + ".gapmatrix.json");
    write_json(out, doc);
    cli::log_info("gapmatrix.done", {{"seed", seed}, {"path", out.string()}});
  }
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  const auto results = gradcheck::run_gradient_suite();
  bool ok = true;
  json doc = json::array();
  for (const auto& r : results) {
    const bool pass = r.max_rel_error < kGradTolerance;
    ok = ok && pass;
    json fields = {{"check", r.name},
                   {"max_rel_error", r.max_rel_error},
                   {"coordinates", r.coordinates},
                   {"pass", pass}};
    doc.push_back(fields);
    if (pass) cli::log_info("gradcheck", fields);
    else cli::log_error("gradcheck", fields);
  }
  if (!o.out.empty()) write_json(fs::path(o.out) / "gradcheck.json", doc);
  cli::log_info("gradcheck.done", {{"checks", results.size()}, {"pass", ok}});
  return ok ? kExitOk : kExitRuntime;
}

int cmd_sweep(const Options& o) {
  const auto c = load(o);
  const auto r = experiment::ablation_sweep(c, logger);
  cli::log_info("sweep.summary", {{"csv", r.csv_path.string()},
                                  {"combinations", r.combinations}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  cli::init_logging();
  CLI::App app{"Multi-source multimodal domain adaptation runner"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", o.config, "Experiment config (JSON)");
    if (config_required) opt->required();
    sub->add_option("--seed", o.seed, "Run only this seed");
    sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
  };
  auto* gen = app.add_subcommand("generate", "Write every configured domain to CSV");
  add_common(gen, true);
  auto* tr = app.add_subcommand("train", "Train one model per seed; write reports");
  add_common(tr, true);
  tr->add_option("--jobs", o.jobs, "Seeds trained in parallel");
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on labeled data");
  add_common(ev, false);
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required();
  ev->add_option("--data", o.data, "Labeled CSV (defaults to the config's target)");
  auto* gap = app.add_subcommand("gapmatrix", "Pairwise correlation-alignment gaps");
  add_common(gap, true);
  gap->add_option("--checkpoint", o.checkpoint, "Use fused features of this model");
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--out", o.out, "Also write gradcheck.json here");
  auto* sw = app.add_subcommand("sweep", "Ablation sweep over adaptation weights");
  add_common(sw, true);
  sw->add_option("--jobs", o.jobs, "Runs executed in parallel");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    cli::log_error("usage", {{"message", e.what()}});
    return kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_evaluate(o);
    if (*gap) return cmd_gapmatrix(o);
    if (*gc) return cmd_gradcheck(o);
    if (*sw) return cmd_sweep(o);
  } catch (const ConfigError& e) {
    cli::log_error("config", {{"field", e.path()}, {"message", e.what()}});
    return kExitConfig;
  } catch (const train::DivergenceError& e) {
    cli::log_error("divergence", {{"step", e.step()},
                                  {"breakdown", losses::to_json(e.breakdown())},
                                  {"message", e.what()}});
    return kExitRuntime;
  } catch (const ParseError& e) {
    cli::log_error("parse", {{"line", e.line()}, {"message", e.what()}});
    return kExitRuntime;
  } catch (const std::exception& e) {
    cli::log_error("runtime", {{"message", e.what()}});
    return kExitRuntime;
  }
  return kExitConfig;
}
