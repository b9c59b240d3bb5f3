#include "mmpda/synthdata.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <utility>

#include "mmpda/errors.hpp"
#include "mmpda/rng.hpp"

namespace mmpda::data {

using nd::Shape;
using nd::Tensor;

std::string to_string(Role role) {
  return role == Role::kSource ? "source" : "target";
}

Role role_from_string(const std::string& name) {
  if (name == "source") return Role::kSource;
  if (name == "target") return Role::kTarget;
  throw ContractError("unknown domain role '" + name + "'");
}

// ---- DomainDataset --------------------------------------------------------

DomainDataset::DomainDataset(std::string id, Role role,
                             std::vector<std::size_t> widths)
    : id_(std::move(id)), role_(role), widths_(std::move(widths)) {
  if (widths_.empty()) throw ContractError("dataset: no modalities declared");
}

void DomainDataset::add(Sample sample) {
  if (sample.modalities.size() != widths_.size()) {
    throw ContractError("dataset '" + id_ + "': sample has " +
                        std::to_string(sample.modalities.size()) +
                        " modalities, expected " + std::to_string(widths_.size()));
  }
  for (std::size_t u = 0; u < widths_.size(); ++u) {
    if (sample.modalities[u].size() != widths_[u]) {
      throw ContractError("dataset '" + id_ + "': modality " + std::to_string(u) +
                          " has width " + std::to_string(sample.modalities[u].size()) +
                          ", expected " + std::to_string(widths_[u]));
    }
  }
  if (sample.label != 0 && sample.label != 1 && sample.label != kUnlabeled) {
    throw ContractError("dataset '" + id_ + "': label must be 0, 1 or -1");
  }
  if (role_ == Role::kSource && sample.label == kUnlabeled) {
    throw ContractError("dataset '" + id_ + "': source samples must be labeled");
  }
  samples_.push_back(std::move(sample));
}

std::vector<Tensor> DomainDataset::modality_batch(
    const std::vector<std::size_t>& rows) const {
  std::vector<Tensor> out;
  for (std::size_t u = 0; u < widths_.size(); ++u) {
    const std::size_t w = widths_[u];
    Tensor t(Shape{rows.size(), w});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& f = samples_.at(rows[r]).modalities[u];
      std::copy(f.begin(), f.end(), t.data().begin() + static_cast<std::ptrdiff_t>(r * w));
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Tensor> DomainDataset::all_inputs() const {
  std::vector<std::size_t> rows(samples_.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return modality_batch(rows);
}

Tensor DomainDataset::flat_features() const {
  std::size_t total = 0;
  for (auto w : widths_) total += w;
  Tensor t(Shape{samples_.size(), total});
  for (std::size_t r = 0; r < samples_.size(); ++r) {
    std::size_t c = 0;
    for (const auto& f : samples_[r].modalities)
      for (double v : f) t.at(r, c++) = v;
  }
  return t;
}

std::vector<int> DomainDataset::training_labels(
    const std::vector<std::size_t>& rows) const {
  if (role_ == Role::kTarget) {
    throw ContractError("dataset '" + id_ + "': target labels are not available for training");
  }
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(samples_.at(r).label);
  return out;
}

std::vector<int> DomainDataset::evaluation_labels() const {
  std::vector<int> out;
  out.reserve(samples_.size());
  for (const auto& s : samples_) out.push_back(s.label);
  return out;
}

bool DomainDataset::fully_labeled() const {
  for (const auto& s : samples_)
    if (s.label == kUnlabeled) return false;
  return !samples_.empty();
}

// ---- generation -----------------------------------------------------------

void DomainSpec::validate() const {
  if (!(label_noise >= 0.0 && label_noise < 0.5)) {
    throw ContractError("domain '" + id + "': label_noise must lie in [0, 0.5)");
  }
  if (count < 4) throw ContractError("domain '" + id + "': count must be >= 4");
  if (modalities.empty()) throw ContractError("domain '" + id + "': no modalities");
  for (std::size_t u = 0; u < modalities.size(); ++u) {
    const auto& m = modalities[u];
    const std::size_t w = m.class_means[0].size();
    const std::string where = "domain '" + id + "' modality " + std::to_string(u);
    if (w == 0 || m.class_means[1].size() != w) {
      throw ContractError(where + ": class means must share a positive width");
    }
    if (m.transform.rows() != w || m.transform.cols() != w) {
      throw ContractError(where + ": transform must be " + std::to_string(w) + "x" +
                          std::to_string(w));
    }
    bool all_zero = true;
    bool singular = false;
    for (std::size_t i = 0; i < w; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double v = m.transform.at(i, j);
        if (!std::isfinite(v)) throw ContractError(where + ": transform not finite");
        if (j > i && v != 0.0) throw ContractError(where + ": transform must be lower-triangular");
        if (v != 0.0) all_zero = false;
      }
      if (m.transform.at(i, i) == 0.0) singular = true;
    }
    // The all-zero transform is the noise-free limit and stays allowed.
    if (singular && !all_zero) throw ContractError(where + ": transform is singular");
  }
}

DomainDataset generate_domain(const DomainSpec& spec) {
  spec.validate();
  std::vector<std::size_t> widths;
  for (const auto& m : spec.modalities) widths.push_back(m.class_means[0].size());
  DomainDataset out(spec.id, spec.role, widths);

  CounterRng rng(spec.seed);
  std::vector<std::size_t> order(spec.count);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t zeros = spec.count / 2;

  for (std::size_t i = 0; i < spec.count; ++i) {
    const int clean = order[i] < zeros ? 0 : 1;
    Sample s;
    for (const auto& m : spec.modalities) {
      const std::size_t w = widths[s.modalities.size()];
      std::vector<double> z(w);
      for (auto& v : z) v = rng.normal();
      std::vector<double> x = m.class_means[clean];
      for (std::size_t r = 0; r < w; ++r)
        for (std::size_t c = 0; c <= r; ++c) x[r] += m.transform.at(r, c) * z[c];
      s.modalities.push_back(std::move(x));
    }
    const bool flip = rng.uniform() < spec.label_noise;
    s.label = flip ? 1 - clean : clean;
    out.add(std::move(s));
  }
  return out;
}

Tensor cholesky(const Tensor& a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError("cholesky: matrix is not square");
  Tensor l(Shape{n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a.at(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l.at(j, k) * l.at(j, k);
    if (!(diag > 0.0)) throw NumericError("cholesky: matrix not positive definite");
    l.at(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = a.at(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l.at(i, k) * l.at(j, k);
      l.at(i, j) = v / l.at(j, j);
    }
  }
  return l;
}

namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec normalized(Vec v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
  return v;
}

// Random unit vector orthogonal to every vector in `basis` (orthonormal).
Vec random_orthogonal(const std::vector<Vec>& basis, std::size_t w, CounterRng& rng) {
  Vec v(w);
  for (auto& x : v) x = rng.normal();
  for (const auto& b : basis) {
    const double p = dot(v, b);
    for (std::size_t i = 0; i < w; ++i) v[i] -= p * b[i];
  }
  return normalized(std::move(v));
}

// Rotation by `angle` in the plane spanned by orthonormal a, b.
Tensor plane_rotation(const Vec& a, const Vec& b, double angle) {
  const std::size_t w = a.size();
  Tensor r = Tensor::identity(w);
  const double c = std::cos(angle) - 1.0, s = std::sin(angle);
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t j = 0; j < w; ++j)
      r.at(i, j) += c * (a[i] * a[j] + b[i] * b[j]) + s * (b[i] * a[j] - a[i] * b[j]);
  return r;
}

Vec mat_vec(const Tensor& m, const Vec& v) {
  Vec out(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i] += m.at(i, j) * v[j];
  return out;
}

// Cholesky factor of R diag(scales^2) R^T.
Tensor rotated_transform(const Tensor& rot, const Vec& scales) {
  const std::size_t w = scales.size();
  Tensor cov(Shape{w, w});
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < w; ++k)
        cov.at(i, j) += rot.at(i, k) * scales[k] * scales[k] * rot.at(j, k);
  return cholesky(cov);
}

}  // namespace

BenchmarkSpecs shift_2s1t(std::uint64_t seed, const BenchmarkOptions& o) {
  if (o.width < 2) throw ContractError("shift-2s1t: width must be >= 2");
  if (!(o.class_lean >= 0.0 && o.class_lean < 1.0)) {
    throw ContractError("shift-2s1t: class_lean must lie in [0, 1)");
  }
  CounterRng rng = CounterRng(seed).fork(0x5eed);
  BenchmarkSpecs out;
  const std::size_t w = o.width;
  out.sources.resize(2);
  for (std::size_t i = 0; i < 2; ++i) {
    out.sources[i].id = "source-" + std::to_string(i + 1);
    out.sources[i].role = Role::kSource;
    out.sources[i].count = o.source_count;
    out.sources[i].label_noise = o.label_noise;
    out.sources[i].seed = CounterRng::mix(seed * 31 + i + 1);
  }
  out.target.id = "target";
  out.target.role = Role::kTarget;
  out.target.count = o.target_count;
  out.target.label_noise = o.label_noise;
  out.target.seed = CounterRng::mix(seed * 31 + 99);

  // Shift: +target_shift on the first half of the coordinates.
  Vec shift(w, 0.0);
  for (std::size_t k = 0; k < w / 2; ++k) shift[k] = o.target_shift;
  const Vec shift_dir = normalized(shift);
  const double lean = o.class_lean;

  for (std::size_t u = 0; u < o.modalities; ++u) {
    // Class axis leans into the shift so the target moves across the source
    // decision boundary, but keeps a component orthogonal to it.
    const Vec side = random_orthogonal({shift_dir}, w, rng);
    Vec axis(w);
    for (std::size_t k = 0; k < w; ++k)
      axis[k] = lean * shift_dir[k] + std::sqrt(1.0 - lean * lean) * side[k];
    const Vec plane = random_orthogonal({shift_dir, side}, w, rng);
    Vec scales(w), target_scales(w);
    for (auto& s : scales) s = rng.uniform(0.7, 1.3);
    for (auto& s : target_scales) s = rng.uniform(0.5, 1.6);

    const double half = 0.5 * o.separation;
    for (std::size_t i = 0; i < 2; ++i) {
      const double angle = (i == 0 ? 0.5 : -0.5) * o.rotation;
      const Tensor rot = plane_rotation(normalized(axis), plane, angle);
      ModalitySpec m;
      Vec ax = mat_vec(rot, axis);
      m.class_means[0] = ax;
      m.class_means[1] = ax;
      for (std::size_t k = 0; k < w; ++k) {
        m.class_means[0][k] *= -half;
        m.class_means[1][k] *= half;
      }
      m.transform = rotated_transform(rot, scales);
      if (i == 0) {
        ModalitySpec t = m;
        for (int c = 0; c < 2; ++c)
          for (std::size_t k = 0; k < w; ++k) t.class_means[c][k] += shift[k];
        t.transform = rotated_transform(rot, target_scales);
        out.target.modalities.push_back(std::move(t));
      }
      out.sources[i].modalities.push_back(std::move(m));
    }
  }
  return out;
}

// ---- CSV ------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

double parse_number(std::string_view cell, std::size_t line) {
  double v = 0.0;
  const auto* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(cell.data(), end, v);
  if (ec != std::errc() || ptr != end || cell.empty()) {
    throw ParseError("line " + std::to_string(line) + ": non-numeric cell '" +
                     std::string(cell) + "'", line);
  }
  return v;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

DomainDataset parse_domain_csv(const std::string& text, const std::string& id,
                               Role role, const std::vector<std::size_t>& widths) {
  DomainDataset out(id, role, widths);
  std::size_t expected = 1;
  for (auto w : widths) expected += w;

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_commas(line);
    if (!header_seen) {
      header_seen = true;
      if (cells.size() != expected || cells.front() != "label") {
        throw ParseError("line " + std::to_string(line_no) + ": header has " +
                         std::to_string(cells.size()) + " columns, expected " +
                         std::to_string(expected) + " starting with 'label'",
                         line_no);
      }
      continue;
    }
    if (cells.size() != expected) {
      throw ParseError("line " + std::to_string(line_no) + ": row has " +
                       std::to_string(cells.size()) + " values, expected " +
                       std::to_string(expected), line_no);
    }
    const double raw_label = parse_number(cells[0], line_no);
    Sample s;
    if (raw_label == 0.0 || raw_label == 1.0) {
      s.label = static_cast<int>(raw_label);
    } else if (raw_label == -1.0) {
      if (role == Role::kSource) {
        throw ContractError("line " + std::to_string(line_no) +
                            ": unlabeled row (-1) in source domain '" + id + "'");
      }
      s.label = kUnlabeled;
    } else {
      throw ParseError("line " + std::to_string(line_no) + ": label must be 0, 1 or -1",
                       line_no);
    }
    std::size_t c = 1;
    for (auto w : widths) {
      std::vector<double> f(w);
      for (auto& v : f) v = parse_number(cells[c++], line_no);
      s.modalities.push_back(std::move(f));
    }
    out.add(std::move(s));
  }
  if (!header_seen) throw ParseError("line 1: missing header", 1);
  return out;
}

DomainDataset load_domain_csv(const std::string& path, const std::string& id,
                              Role role, const std::vector<std::size_t>& widths) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_domain_csv(buf.str(), id, role, widths);
}

std::string format_domain_csv(const DomainDataset& dataset, bool include_labels) {
  std::string out = "label";
  for (std::size_t u = 0; u < dataset.widths().size(); ++u)
    for (std::size_t k = 0; k < dataset.widths()[u]; ++k)
      out += ",f" + std::to_string(u) + "_" + std::to_string(k);
  out += '\n';
  for (const auto& s : dataset.samples()) {
    out += std::to_string(include_labels ? s.label : kUnlabeled);
    for (const auto& f : s.modalities)
      for (double v : f) {
        out += ',';
        out += format_number(v);
      }
    out += '\n';
  }
  return out;
}

void write_domain_csv(const DomainDataset& dataset, const std::string& path,
                      bool include_labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write '" + path + "'");
  out << format_domain_csv(dataset, include_labels);
}

}  // namespace mmpda::data
