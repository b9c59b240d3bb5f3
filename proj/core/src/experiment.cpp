#include "mmpda/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "mmpda/errors.hpp"

namespace mmpda::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

std::string index_path(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

// Typed, path-aware access to one JSON object. finish() rejects any key that
// was never looked at.
class Reader {
 public:
  Reader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) {
      throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }
  }

  bool has(const std::string& key) {
    seen_.push_back(key);
    return doc_.contains(key);
  }
  std::string path(const std::string& key) const { return join(path_, key); }
  const json& raw(const std::string& key) {
    seen_.push_back(key);
    return doc_.at(key);
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = doc_.at(key);
    if (!v.is_number()) throw ConfigError(path(key), "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(path(key), "must be finite");
    return d;
  }
  std::uint64_t unsigned_int(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    return as_unsigned(doc_.at(key), path(key));
  }
  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = doc_.at(key);
    if (!v.is_boolean()) throw ConfigError(path(key), "expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = doc_.at(key);
    if (!v.is_string()) throw ConfigError(path(key), "expected a string");
    return v.get<std::string>();
  }
  std::vector<std::size_t> sizes(const std::string& key,
                                 std::vector<std::size_t> fallback) {
    if (!has(key)) return fallback;
    const auto& v = doc_.at(key);
    if (!v.is_array()) throw ConfigError(path(key), "expected an array");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i)
      out.push_back(static_cast<std::size_t>(as_unsigned(v[i], index_path(path(key), i))));
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw ConfigError(join(path_, key), "unknown field");
      }
    }
  }

  static std::uint64_t as_unsigned(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
      throw ConfigError(path, "must be a non-negative integer");
    }
    throw ConfigError(path, "expected a non-negative integer");
  }

 private:
  const json& doc_;
  std::string path_;
  std::vector<std::string> seen_;
};

std::vector<double> number_array(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError(index_path(path, i), "expected a number");
    out.push_back(v[i].get<double>());
  }
  return out;
}

void require_positive(std::size_t v, const std::string& path) {
  if (v == 0) throw ConfigError(path, "must be > 0");
}

bool safe_name(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
           c == '-' || c == '_' || c == '.';
  });
}

// ---- sections -------------------------------------------------------------

data::BenchmarkOptions parse_benchmark_options(const json& doc, const std::string& path) {
  Reader r(doc, path);
  data::BenchmarkOptions o;
  o.modalities = r.unsigned_int("modalities", o.modalities);
  o.width = r.unsigned_int("width", o.width);
  o.separation = r.number("separation", o.separation);
  o.rotation = r.number("rotation", o.rotation);
  o.target_shift = r.number("target_shift", o.target_shift);
  o.class_lean = r.number("class_lean", o.class_lean);
  o.source_count = r.unsigned_int("source_count", o.source_count);
  o.target_count = r.unsigned_int("target_count", o.target_count);
  o.label_noise = r.number("label_noise", o.label_noise);
  r.finish();
  require_positive(o.modalities, r.path("modalities"));
  if (o.width < 2) throw ConfigError(r.path("width"), "must be >= 2");
  if (o.source_count < 4) throw ConfigError(r.path("source_count"), "must be >= 4");
  if (o.target_count < 4) throw ConfigError(r.path("target_count"), "must be >= 4");
  if (!(o.label_noise >= 0.0 && o.label_noise < 0.5)) {
    throw ConfigError(r.path("label_noise"), "must lie in [0, 0.5)");
  }
  if (!(o.class_lean >= 0.0 && o.class_lean < 1.0)) {
    throw ConfigError(r.path("class_lean"), "must lie in [0, 1)");
  }
  return o;
}

json to_json(const data::BenchmarkOptions& o) {
  return {{"modalities", o.modalities},   {"width", o.width},
          {"separation", o.separation},   {"rotation", o.rotation},
          {"target_shift", o.target_shift}, {"class_lean", o.class_lean},
          {"source_count", o.source_count},
          {"target_count", o.target_count}, {"label_noise", o.label_noise}};
}

DomainEntry parse_entry(const json& doc, const std::string& path, data::Role role) {
  Reader r(doc, path);
  DomainEntry e;
  e.id = r.string("id", "");
  if (!safe_name(e.id)) {
    throw ConfigError(r.path("id"), "required; letters, digits, '-', '_' or '.'");
  }
  const bool has_csv = r.has("csv");
  const bool has_gen = r.has("generator");
  if (has_csv == has_gen) {
    throw ConfigError(path, "exactly one of 'csv' or 'generator' is required");
  }
  if (has_csv) {
    e.csv = r.string("csv", "");
    if (e.csv.empty()) throw ConfigError(r.path("csv"), "must not be empty");
  } else {
    e.generator = domain_spec_from_json(r.raw("generator"), r.path("generator"));
    e.generator->id = e.id;
    e.generator->role = role;
  }
  r.finish();
  return e;
}

json to_json(const DomainEntry& e) {
  json out = {{"id", e.id}};
  if (e.generator) {
    out["generator"] = experiment::to_json(*e.generator);
  } else {
    out["csv"] = e.csv;
  }
  return out;
}

DataConfig parse_data(const json& doc, const std::string& path) {
  Reader r(doc, path);
  DataConfig d;
  d.benchmark = r.string("benchmark", "");
  if (r.has("benchmark_options")) {
    d.benchmark_options = parse_benchmark_options(r.raw("benchmark_options"),
                                                  r.path("benchmark_options"));
  }
  d.modality_widths = r.sizes("modality_widths", {});
  if (r.has("sources")) {
    const auto& s = r.raw("sources");
    if (!s.is_array()) throw ConfigError(r.path("sources"), "expected an array");
    for (std::size_t i = 0; i < s.size(); ++i)
      d.sources.push_back(parse_entry(s[i], index_path(r.path("sources"), i),
                                      data::Role::kSource));
  }
  if (r.has("target")) {
    d.target = parse_entry(r.raw("target"), r.path("target"), data::Role::kTarget);
  }
  r.finish();

  if (!d.benchmark.empty()) {
    if (d.benchmark != "shift-2s1t") {
      throw ConfigError(r.path("benchmark"), "unknown benchmark '" + d.benchmark +
                                                 "' (available: shift-2s1t)");
    }
    if (!d.sources.empty() || d.target) {
      throw ConfigError(path, "'benchmark' cannot be combined with sources/target");
    }
    if (!d.modality_widths.empty()) {
      throw ConfigError(r.path("modality_widths"),
                        "implied by the benchmark; remove it");
    }
    d.modality_widths.assign(d.benchmark_options.modalities, d.benchmark_options.width);
    return d;
  }
  if (d.sources.empty()) throw ConfigError(r.path("sources"), "at least one source is required");
  if (!d.target) throw ConfigError(r.path("target"), "exactly one target is required");
  if (d.modality_widths.empty()) {
    throw ConfigError(r.path("modality_widths"), "required with explicit domains");
  }
  for (std::size_t i = 0; i < d.modality_widths.size(); ++i)
    require_positive(d.modality_widths[i], index_path(r.path("modality_widths"), i));
  std::vector<std::string> ids;
  auto check = [&](const DomainEntry& e, const std::string& p) {
    if (std::find(ids.begin(), ids.end(), e.id) != ids.end()) {
      throw ConfigError(p + ".id", "duplicate domain id '" + e.id + "'");
    }
    ids.push_back(e.id);
    if (!e.generator) return;
    const auto& mods = e.generator->modalities;
    if (mods.size() != d.modality_widths.size()) {
      throw ConfigError(p + ".generator.modalities",
                        "expected " + std::to_string(d.modality_widths.size()) +
                            " modalities");
    }
    for (std::size_t u = 0; u < mods.size(); ++u) {
      if (mods[u].class_means[0].size() != d.modality_widths[u]) {
        throw ConfigError(index_path(p + ".generator.modalities", u),
                          "width differs from modality_widths");
      }
    }
  };
  for (std::size_t i = 0; i < d.sources.size(); ++i)
    check(d.sources[i], index_path(r.path("sources"), i));
  check(*d.target, r.path("target"));
  return d;
}

json to_json(const DataConfig& d) {
  if (!d.benchmark.empty()) {
    return {{"benchmark", d.benchmark},
            {"benchmark_options", to_json(d.benchmark_options)}};
  }
  json sources = json::array();
  for (const auto& e : d.sources) sources.push_back(to_json(e));
  return {{"modality_widths", d.modality_widths},
          {"sources", std::move(sources)},
          {"target", to_json(*d.target)}};
}

model::ModelDims parse_model(const json& doc, const std::string& path) {
  Reader r(doc, path);
  model::ModelDims m;
  m.unimodal_width = r.unsigned_int("unimodal_width", m.unimodal_width);
  m.fused_width = r.unsigned_int("fused_width", m.fused_width);
  m.encoder_hidden = r.sizes("encoder_hidden", m.encoder_hidden);
  m.discriminator_hidden = r.sizes("discriminator_hidden", m.discriminator_hidden);
  if (r.has("fusion")) {
    Reader f(r.raw("fusion"), r.path("fusion"));
    const auto kind = f.string("kind", model::to_string(m.fusion.kind));
    try {
      m.fusion.kind = model::fusion_kind_from_string(kind);
    } catch (const ContractError& e) {
      throw ConfigError(f.path("kind"), e.what());
    }
    m.fusion.heads = f.unsigned_int("heads", m.fusion.heads);
    m.fusion.head_width = f.unsigned_int("head_width", m.fusion.head_width);
    f.finish();
    require_positive(m.fusion.heads, f.path("heads"));
    require_positive(m.fusion.head_width, f.path("head_width"));
  }
  r.finish();
  require_positive(m.unimodal_width, r.path("unimodal_width"));
  require_positive(m.fused_width, r.path("fused_width"));
  for (std::size_t i = 0; i < m.encoder_hidden.size(); ++i)
    require_positive(m.encoder_hidden[i], index_path(r.path("encoder_hidden"), i));
  for (std::size_t i = 0; i < m.discriminator_hidden.size(); ++i)
    require_positive(m.discriminator_hidden[i],
                     index_path(r.path("discriminator_hidden"), i));
  return m;
}

json model_to_json(const model::ModelDims& m) {
  return {{"unimodal_width", m.unimodal_width},
          {"fused_width", m.fused_width},
          {"encoder_hidden", m.encoder_hidden},
          {"discriminator_hidden", m.discriminator_hidden},
          {"fusion",
           {{"kind", model::to_string(m.fusion.kind)},
            {"heads", m.fusion.heads},
            {"head_width", m.fusion.head_width}}}};
}

train::AdaptConfig parse_train(const json& doc, const std::string& path) {
  Reader r(doc, path);
  train::AdaptConfig c;
  auto nonneg = [&](const char* key, double fallback) {
    const double v = r.number(key, fallback);
    if (v < 0.0) throw ConfigError(r.path(key), "must be >= 0");
    return v;
  };
  c.weights.alpha = nonneg("alpha", c.weights.alpha);
  c.weights.beta = nonneg("beta", c.weights.beta);
  c.weights.gamma = nonneg("gamma", c.weights.gamma);
  c.weights.eta = nonneg("eta", c.weights.eta);
  c.weights.lambda = nonneg("lambda", c.weights.lambda);
  c.lr = r.number("lr", c.lr);
  if (!(c.lr > 0.0)) throw ConfigError(r.path("lr"), "must be > 0");
  c.weight_decay = nonneg("weight_decay", c.weight_decay);
  c.batch_size = r.unsigned_int("batch_size", c.batch_size);
  if (c.batch_size < 2) throw ConfigError(r.path("batch_size"), "must be >= 2");
  c.epochs = r.unsigned_int("epochs", c.epochs);
  if (c.epochs < 1) throw ConfigError(r.path("epochs"), "must be >= 1");
  const auto opt = r.string("optimizer", train::to_string(c.optimizer));
  try {
    c.optimizer = train::optimizer_from_string(opt);
  } catch (const ContractError& e) {
    throw ConfigError(r.path("optimizer"), e.what());
  }
  c.adam_beta1 = r.number("adam_beta1", c.adam_beta1);
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) {
    throw ConfigError(r.path("adam_beta1"), "must lie in [0, 1)");
  }
  c.adam_beta2 = r.number("adam_beta2", c.adam_beta2);
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) {
    throw ConfigError(r.path("adam_beta2"), "must lie in [0, 1)");
  }
  c.adam_eps = r.number("adam_eps", c.adam_eps);
  if (!(c.adam_eps > 0.0)) throw ConfigError(r.path("adam_eps"), "must be > 0");
  c.target_grad = r.boolean("target_grad", c.target_grad);
  c.pseudo_threshold = r.number("pseudo_threshold", c.pseudo_threshold);
  if (!(c.pseudo_threshold >= 0.0 && c.pseudo_threshold < 1.0)) {
    throw ConfigError(r.path("pseudo_threshold"), "must lie in [0, 1)");
  }
  c.grl = r.boolean("grl", c.grl);
  c.grad_clip = nonneg("grad_clip", c.grad_clip);

  // Enumerated strings go through the trainer's own parser.
  json enums = json::object();
  for (const char* key : {"entropy_weight", "mdd_pairing"})
    if (r.has(key)) enums[key] = r.string(key, "");
  try {
    const auto parsed = train::adapt_config_from_json(enums);
    c.entropy_weight_form = parsed.entropy_weight_form;
    c.mdd_pairing = parsed.mdd_pairing;
  } catch (const ContractError& e) {
    const std::string msg = e.what();
    throw ConfigError(r.path(msg.find("pairing") != std::string::npos ? "mdd_pairing"
                                                                       : "entropy_weight"),
                      msg);
  }
  c.mdd_flip_inter = r.boolean("mdd_flip_inter", c.mdd_flip_inter);
  if (r.has("seed")) throw ConfigError(r.path("seed"), "set seeds at the top level");
  r.finish();
  return c;
}

json train_to_json(const train::AdaptConfig& c) {
  json out = train::to_json(c);
  out.erase("seed");
  return out;
}

const std::vector<std::string>& sweep_keys() {
  static const std::vector<std::string> keys{"alpha", "beta", "gamma",
                                             "eta",   "lambda", "grl"};
  return keys;
}

SweepRow parse_row(const json& doc, const std::string& path) {
  Reader r(doc, path);
  SweepRow row;
  auto weight = [&](const char* key) -> std::optional<double> {
    if (!r.has(key)) return std::nullopt;
    const double v = r.number(key, 0.0);
    if (v < 0.0) throw ConfigError(r.path(key), "must be >= 0");
    return v;
  };
  row.alpha = weight("alpha");
  row.beta = weight("beta");
  row.gamma = weight("gamma");
  row.eta = weight("eta");
  row.lambda = weight("lambda");
  if (r.has("grl")) row.grl = r.boolean("grl", true);
  r.finish();
  return row;
}

SweepConfig parse_sweep(const json& doc, const std::string& path) {
  Reader r(doc, path);
  SweepConfig s;
  if (r.has("grid")) {
    const auto& g = r.raw("grid");
    const std::string gpath = r.path("grid");
    if (!g.is_object()) throw ConfigError(gpath, "expected an object");
    for (const auto& [key, values] : g.items()) {
      const auto& keys = sweep_keys();
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
        throw ConfigError(join(gpath, key),
                          "unknown sweep parameter (allowed: alpha, beta, gamma, "
                          "eta, lambda, grl)");
      }
    }
    for (const auto& key : sweep_keys()) {
      if (!g.contains(key)) continue;
      const auto& values = g.at(key);
      const std::string kpath = join(gpath, key);
      if (!values.is_array() || values.empty()) {
        throw ConfigError(kpath, "expected a non-empty array");
      }
      std::vector<json> list;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& v = values[i];
        if (key == "grl") {
          if (v.is_boolean()) {
            list.push_back(v);
          } else if (v.is_string() && (v == "on" || v == "off")) {
            list.push_back(v == "on");
          } else {
            throw ConfigError(index_path(kpath, i), "expected true/false or \"on\"/\"off\"");
          }
        } else {
          if (!v.is_number() || v.get<double>() < 0.0 || !std::isfinite(v.get<double>())) {
            throw ConfigError(index_path(kpath, i), "expected a number >= 0");
          }
          list.push_back(v.get<double>());
        }
      }
      s.grid.emplace_back(key, std::move(list));
    }
  }
  if (r.has("rows")) {
    const auto& rows = r.raw("rows");
    if (rows.is_string()) {
      if (rows != "sensitivity") {
        throw ConfigError(r.path("rows"), "unknown preset (available: sensitivity)");
      }
      s.rows = sensitivity_rows();
    } else if (rows.is_array()) {
      for (std::size_t i = 0; i < rows.size(); ++i)
        s.rows.push_back(parse_row(rows[i], index_path(r.path("rows"), i)));
    } else {
      throw ConfigError(r.path("rows"), "expected \"sensitivity\" or an array of rows");
    }
  }
  r.finish();
  if (!s.grid.empty() && !s.rows.empty()) {
    throw ConfigError(path, "use either 'grid' or 'rows', not both");
  }
  return s;
}

json row_to_json(const SweepRow& row) {
  json out = json::object();
  if (row.alpha) out["alpha"] = *row.alpha;
  if (row.beta) out["beta"] = *row.beta;
  if (row.gamma) out["gamma"] = *row.gamma;
  if (row.eta) out["eta"] = *row.eta;
  if (row.lambda) out["lambda"] = *row.lambda;
  if (row.grl) out["grl"] = *row.grl;
  return out;
}

json sweep_to_json(const SweepConfig& s) {
  json out = json::object();
  if (!s.grid.empty()) {
    json grid = json::object();
    for (const auto& [key, values] : s.grid) grid[key] = values;
    out["grid"] = std::move(grid);
  }
  if (!s.rows.empty()) {
    json rows = json::array();
    for (const auto& r : s.rows) rows.push_back(row_to_json(r));
    out["rows"] = std::move(rows);
  }
  return out;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + dir.string() + "': " + ec.message());
}

// Runs task(i) for i in [0, count) on up to `jobs` threads. Every task runs
// even if another fails; the failure with the lowest index is rethrown.
void parallel_for(std::size_t count, std::size_t jobs,
                  const std::function<void(std::size_t)>& task) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, count));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

train::AdaptConfig apply_row(train::AdaptConfig c, const SweepRow& row) {
  if (row.alpha) c.weights.alpha = *row.alpha;
  if (row.beta) c.weights.beta = *row.beta;
  if (row.gamma) c.weights.gamma = *row.gamma;
  if (row.eta) c.weights.eta = *row.eta;
  if (row.lambda) c.weights.lambda = *row.lambda;
  if (row.grl) c.grl = *row.grl;
  return c;
}

}  // namespace

// ---- public ---------------------------------------------------------------

json to_json(const data::DomainSpec& spec) {
  json mods = json::array();
  for (const auto& m : spec.modalities) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.transform.rows(); ++i) {
      std::vector<double> row(m.transform.cols());
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = m.transform.at(i, j);
      rows.push_back(row);
    }
    mods.push_back({{"class_means", {m.class_means[0], m.class_means[1]}},
                    {"transform", std::move(rows)}});
  }
  return {{"count", spec.count},
          {"label_noise", spec.label_noise},
          {"seed", spec.seed},
          {"modalities", std::move(mods)}};
}

data::DomainSpec domain_spec_from_json(const json& doc, const std::string& path) {
  Reader r(doc, path);
  data::DomainSpec s;
  s.count = r.unsigned_int("count", 0);
  s.label_noise = r.number("label_noise", 0.0);
  s.seed = r.unsigned_int("seed", 0);
  if (!r.has("modalities")) throw ConfigError(r.path("modalities"), "required");
  const auto& mods = r.raw("modalities");
  if (!mods.is_array() || mods.empty()) {
    throw ConfigError(r.path("modalities"), "expected a non-empty array");
  }
  for (std::size_t u = 0; u < mods.size(); ++u) {
    const std::string mpath = index_path(r.path("modalities"), u);
    Reader m(mods[u], mpath);
    data::ModalitySpec spec;
    if (!m.has("class_means")) throw ConfigError(m.path("class_means"), "required");
    const auto& means = m.raw("class_means");
    if (!means.is_array() || means.size() != 2) {
      throw ConfigError(m.path("class_means"), "expected two mean vectors");
    }
    spec.class_means[0] = number_array(means[0], index_path(m.path("class_means"), 0));
    spec.class_means[1] = number_array(means[1], index_path(m.path("class_means"), 1));
    const std::size_t w = spec.class_means[0].size();
    if (w == 0 || spec.class_means[1].size() != w) {
      throw ConfigError(m.path("class_means"), "mean vectors must share a positive width");
    }
    if (!m.has("transform")) throw ConfigError(m.path("transform"), "required");
    const auto& rows = m.raw("transform");
    if (!rows.is_array() || rows.size() != w) {
      throw ConfigError(m.path("transform"), "expected a " + std::to_string(w) + "x" +
                                                 std::to_string(w) + " matrix");
    }
    spec.transform = nd::Tensor(nd::Shape{w, w});
    for (std::size_t i = 0; i < w; ++i) {
      const auto row = number_array(rows[i], index_path(m.path("transform"), i));
      if (row.size() != w) {
        throw ConfigError(index_path(m.path("transform"), i),
                          "expected " + std::to_string(w) + " values");
      }
      for (std::size_t j = 0; j < w; ++j) spec.transform.at(i, j) = row[j];
    }
    m.finish();
    s.modalities.push_back(std::move(spec));
  }
  r.finish();
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw ConfigError(path, e.what());
  }
  return s;
}

ExperimentConfig parse_config(const json& doc, const fs::path& base_dir) {
  Reader r(doc, "");
  ExperimentConfig c;
  c.base_dir = base_dir;
  c.run_id = r.string("run_id", c.run_id);
  if (!safe_name(c.run_id)) {
    throw ConfigError("run_id", "letters, digits, '-', '_' or '.' only");
  }
  c.output_dir = r.string("output_dir", c.output_dir);
  if (c.output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  if (r.has("seeds")) {
    const auto& s = r.raw("seeds");
    if (!s.is_array() || s.empty()) throw ConfigError("seeds", "expected a non-empty array");
    c.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto seed = Reader::as_unsigned(s[i], index_path("seeds", i));
      if (std::find(c.seeds.begin(), c.seeds.end(), seed) != c.seeds.end()) {
        throw ConfigError(index_path("seeds", i), "duplicate seed");
      }
      c.seeds.push_back(seed);
    }
  }
  c.jobs = r.unsigned_int("jobs", c.jobs);
  require_positive(c.jobs, "jobs");
  if (!r.has("data")) throw ConfigError("data", "required");
  c.data = parse_data(r.raw("data"), "data");
  if (r.has("model")) c.model = parse_model(r.raw("model"), "model");
  c.model.modality_inputs = c.data.modality_widths;
  if (r.has("train")) c.train = parse_train(r.raw("train"), "train");
  if (r.has("sweep")) c.sweep = parse_sweep(r.raw("sweep"), "sweep");
  r.finish();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string(), "cannot open config file");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  return parse_config(doc, path.parent_path());
}

json to_json(const ExperimentConfig& c) {
  json out = {{"run_id", c.run_id},
              {"output_dir", c.output_dir},
              {"seeds", c.seeds},
              {"jobs", c.jobs},
              {"data", to_json(c.data)},
              {"model", model_to_json(c.model)},
              {"train", train_to_json(c.train)}};
  const json sweep = sweep_to_json(c.sweep);
  if (!sweep.empty()) out["sweep"] = sweep;
  return out;
}

bool ExperimentConfig::operator==(const ExperimentConfig& other) const {
  return to_json(*this) == to_json(other);
}

std::vector<SweepRow> sensitivity_rows() {
  auto row = [](double a, double b, double g, double e, double l) {
    SweepRow r;
    r.alpha = a;
    r.beta = b;
    r.gamma = g;
    r.eta = e;
    r.lambda = l;
    return r;
  };
  return {row(1, 1, 1, 1, 0),        row(1, 1, 1, 1, 1),
          row(0.1, 1, 1, 1, 1),      row(10, 1, 1, 1, 1),
          row(1, 0.1, 1, 1, 1),      row(1, 10, 1, 1, 1),
          row(1, 1, 0.1, 1, 1),      row(1, 1, 10, 1, 1),
          row(1, 1, 1, 0.1, 1),      row(1, 1, 1, 10, 1),
          row(10, 0.1, 10, 0.1, 1),  row(10, 0.1, 10, 0.1, 10)};
}

std::vector<SweepRow> expand_sweep(const SweepConfig& sweep) {
  if (!sweep.rows.empty()) return sweep.rows;
  std::vector<SweepRow> rows{SweepRow{}};
  for (const auto& [key, values] : sweep.grid) {
    std::vector<SweepRow> next;
    for (const auto& base : rows) {
      for (const auto& v : values) {
        SweepRow r = base;
        if (key == "alpha") r.alpha = v.get<double>();
        else if (key == "beta") r.beta = v.get<double>();
        else if (key == "gamma") r.gamma = v.get<double>();
        else if (key == "eta") r.eta = v.get<double>();
        else if (key == "lambda") r.lambda = v.get<double>();
        else if (key == "grl") r.grl = v.get<bool>();
        next.push_back(r);
      }
    }
    rows = std::move(next);
  }
  return rows;
}

std::string row_key(const SweepRow& row) {
  std::string out;
  auto add = [&](const char* name, const std::string& v) {
    if (!out.empty()) out += ';';
    out += name;
    out += '=';
    out += v;
  };
  if (row.alpha) add("alpha", format_number(*row.alpha));
  if (row.beta) add("beta", format_number(*row.beta));
  if (row.gamma) add("gamma", format_number(*row.gamma));
  if (row.eta) add("eta", format_number(*row.eta));
  if (row.lambda) add("lambda", format_number(*row.lambda));
  if (row.grl) add("grl", *row.grl ? "on" : "off");
  return out.empty() ? "base" : out;
}

Domains load_domains(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& d = c.data;
  if (!d.benchmark.empty()) {
    const auto specs = data::shift_2s1t(seed, d.benchmark_options);
    Domains out{{}, data::generate_domain(specs.target)};
    for (const auto& s : specs.sources) out.sources.push_back(data::generate_domain(s));
    return out;
  }
  auto load = [&](const DomainEntry& e, data::Role role) {
    if (e.generator) return data::generate_domain(*e.generator);
    fs::path p(e.csv);
    if (p.is_relative()) p = c.base_dir / p;
    return data::load_domain_csv(p.string(), e.id, role, d.modality_widths);
  };
  Domains out{{}, load(*d.target, data::Role::kTarget)};
  for (const auto& e : d.sources) out.sources.push_back(load(e, data::Role::kSource));
  return out;
}

std::pair<double, double> mean_stdev(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

json to_json(const Summary& s) {
  json runs = json::array();
  for (const auto& r : s.runs) {
    runs.push_back({{"seed", r.seed},
                    {"report", r.report_path.filename().string()},
                    {"checkpoint", r.checkpoint_path.filename().string()},
                    {"accuracy", r.has_final ? json(r.accuracy) : json(nullptr)},
                    {"f1", r.has_final ? json(r.f1) : json(nullptr)}});
  }
  const bool scored =
      !s.runs.empty() && std::all_of(s.runs.begin(), s.runs.end(),
                                     [](const RunOutcome& r) { return r.has_final; });
  json out = {{"run_id", s.run_id}, {"runs", std::move(runs)}};
  if (scored) {
    out["accuracy"] = {{"mean", s.accuracy_mean}, {"stdev", s.accuracy_stdev}};
    out["f1"] = {{"mean", s.f1_mean}, {"stdev", s.f1_stdev}};
  } else {
    out["accuracy"] = nullptr;
    out["f1"] = nullptr;
  }
  return out;
}

std::string report_text(const train::RunReport& report) {
  return train::to_json(report).dump(2) + "\n";
}

Summary run_experiment(const ExperimentConfig& c, const Logger& log) {
  const fs::path out_dir = c.output_dir;
  ensure_dir(out_dir);
  std::mutex log_mutex;
  auto emit = [&](const std::string& event, const json& fields) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(event, fields);
  };
  const json echo = to_json(c);

  Summary summary;
  summary.run_id = c.run_id;
  summary.runs.resize(c.seeds.size());
  parallel_for(c.seeds.size(), c.jobs, [&](std::size_t i) {
    const std::uint64_t seed = c.seeds[i];
    const std::string id = c.run_id + "-seed" + std::to_string(seed);
    emit("run.start", {{"run_id", id}, {"seed", seed}});
    const auto t0 = std::chrono::steady_clock::now();
    const Domains domains = load_domains(c, seed);
    train::AdaptConfig tc = c.train;
    tc.seed = seed;
    auto result = [&] {
      try {
        return train::run_training(domains.sources, domains.target, c.model, tc, id);
      } catch (const train::DivergenceError& e) {
        emit("run.diverged", {{"run_id", id}, {"step", e.step()}});
        throw;
      }
    }();
    result.report.config = echo;
    RunOutcome& o = summary.runs[i];
    o.seed = seed;
    o.report_path = out_dir / (id + ".report.json");
    o.checkpoint_path = out_dir / (id + ".checkpoint.json");
    write_text(o.report_path, report_text(result.report));
    write_text(o.checkpoint_path, model::to_checkpoint(result.model).dump() + "\n");
    o.has_final = result.report.has_final;
    o.accuracy = result.report.final.accuracy;
    o.f1 = result.report.final.f1;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json fields = {{"run_id", id}, {"seed", seed}, {"seconds", secs},
                   {"report", o.report_path.string()}};
    if (o.has_final) {
      fields["accuracy"] = o.accuracy;
      fields["f1"] = o.f1;
    }
    emit("run.done", fields);
  });

  std::vector<double> acc, f1;
  for (const auto& r : summary.runs) {
    if (!r.has_final) continue;
    acc.push_back(r.accuracy);
    f1.push_back(r.f1);
  }
  std::tie(summary.accuracy_mean, summary.accuracy_stdev) = mean_stdev(acc);
  std::tie(summary.f1_mean, summary.f1_stdev) = mean_stdev(f1);
  const fs::path summary_path = out_dir / (c.run_id + ".summary.json");
  write_text(summary_path, to_json(summary).dump(2) + "\n");
  emit("experiment.done", {{"summary", summary_path.string()},
                           {"accuracy_mean", summary.accuracy_mean},
                           {"f1_mean", summary.f1_mean}});
  return summary;
}

SweepResult ablation_sweep(const ExperimentConfig& c, const Logger& log) {
  const auto rows = expand_sweep(c.sweep);
  if (c.sweep.grid.empty() && c.sweep.rows.empty()) {
    throw ConfigError("sweep", "needs a 'grid' or 'rows' entry");
  }
  const fs::path out_dir = c.output_dir;
  const fs::path report_dir = out_dir / (c.run_id + ".sweep");
  ensure_dir(report_dir);
  std::mutex log_mutex;
  auto emit = [&](const std::string& event, const json& fields) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(event, fields);
  };
  const json echo = to_json(c);

  struct Cell {
    bool has_final = false;
    double accuracy = 0.0, f1 = 0.0;
  };
  const std::size_t n_seeds = c.seeds.size();
  std::vector<Cell> cells(rows.size() * n_seeds);
  parallel_for(cells.size(), c.jobs, [&](std::size_t k) {
    const std::size_t ri = k / n_seeds;
    const std::uint64_t seed = c.seeds[k % n_seeds];
    train::AdaptConfig tc = apply_row(c.train, rows[ri]);
    tc.seed = seed;
    const std::string id =
        c.run_id + "-row" + std::to_string(ri) + "-seed" + std::to_string(seed);
    const Domains domains = load_domains(c, seed);
    auto result = train::run_training(domains.sources, domains.target, c.model, tc, id);
    result.report.config = echo;
    result.report.config["sweep_row"] = row_to_json(rows[ri]);
    write_text(report_dir / (id + ".report.json"), report_text(result.report));
    cells[k] = {result.report.has_final, result.report.final.accuracy,
                result.report.final.f1};
    json fields = {{"run_id", id}, {"row", row_key(rows[ri])}, {"seed", seed}};
    if (cells[k].has_final) fields["accuracy"] = cells[k].accuracy;
    emit("sweep.run", fields);
  });

  std::ostringstream csv;
  csv << "row,key,alpha,beta,gamma,eta,lambda,grl,seed,accuracy,f1\n";
  auto prefix = [&](std::size_t ri) {
    const auto cfg = apply_row(c.train, rows[ri]);
    std::ostringstream s;
    s << ri << ',' << row_key(rows[ri]) << ',' << format_number(cfg.weights.alpha) << ','
      << format_number(cfg.weights.beta) << ',' << format_number(cfg.weights.gamma)
      << ',' << format_number(cfg.weights.eta) << ','
      << format_number(cfg.weights.lambda) << ',' << (cfg.grl ? "on" : "off");
    return s.str();
  };
  auto metric = [](bool ok, double v) { return ok ? format_number(v) : std::string(); };
  SweepResult result;
  result.combinations = rows.size();
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    for (std::size_t si = 0; si < n_seeds; ++si) {
      const Cell& cell = cells[ri * n_seeds + si];
      csv << prefix(ri) << ',' << c.seeds[si] << ',' << metric(cell.has_final, cell.accuracy)
          << ',' << metric(cell.has_final, cell.f1) << '\n';
      ++result.rows_written;
    }
  }
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    std::vector<double> acc, f1;
    for (std::size_t si = 0; si < n_seeds; ++si) {
      const Cell& cell = cells[ri * n_seeds + si];
      if (!cell.has_final) continue;
      acc.push_back(cell.accuracy);
      f1.push_back(cell.f1);
    }
    const bool ok = acc.size() == n_seeds;
    csv << prefix(ri) << ",mean," << metric(ok, mean_stdev(acc).first) << ','
        << metric(ok, mean_stdev(f1).first) << '\n';
    ++result.rows_written;
  }
  result.csv_path = out_dir / (c.run_id + ".sweep.csv");
  write_text(result.csv_path, csv.str());
  emit("sweep.done", {{"csv", result.csv_path.string()},
                      {"combinations", result.combinations},
                      {"rows", result.rows_written}});
  return result;
}

}  // namespace mmpda::experiment
