#pragma once

// Multi-domain, multi-modality datasets: parametric generators with known
// covariate shift, the built-in shift-2s1t benchmark family, and CSV I/O.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mmpda/ndgraph.hpp"

namespace mmpda::data {

enum class Role { kSource, kTarget };

std::string to_string(Role role);
Role role_from_string(const std::string& name);

inline constexpr int kUnlabeled = -1;

struct Sample {
  std::vector<std::vector<double>> modalities;
  int label = kUnlabeled;
};

class DomainDataset {
 public:
  DomainDataset(std::string id, Role role, std::vector<std::size_t> widths);

  // Throws ContractError on width mismatch or an unlabeled source sample.
  void add(Sample sample);

  const std::string& id() const { return id_; }
  Role role() const { return role_; }
  const std::vector<std::size_t>& widths() const { return widths_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const Sample& sample(std::size_t i) const { return samples_.at(i); }
  const std::vector<Sample>& samples() const { return samples_; }

  // One rows x width matrix per modality.
  std::vector<nd::Tensor> modality_batch(const std::vector<std::size_t>& rows) const;
  std::vector<nd::Tensor> all_inputs() const;
  // All modalities concatenated, one row per sample.
  nd::Tensor flat_features() const;

  // Training labels; throws for a target-role dataset.
  std::vector<int> training_labels(const std::vector<std::size_t>& rows) const;
  // Labels for scoring, including held-out target labels when present.
  std::vector<int> evaluation_labels() const;
  bool fully_labeled() const;

 private:
  std::string id_;
  Role role_;
  std::vector<std::size_t> widths_;
  std::vector<Sample> samples_;
};

struct ModalitySpec {
  std::vector<double> class_means[2];
  // Lower-triangular w x w matrix applied to standard-normal noise.
  nd::Tensor transform;
};

struct DomainSpec {
  std::string id;
  Role role = Role::kSource;
  std::vector<ModalitySpec> modalities;
  double label_noise = 0.0;  // rho in [0, 0.5)
  std::size_t count = 0;     // >= 4
  std::uint64_t seed = 0;

  // Throws ContractError when a field is out of range.
  void validate() const;
};

// Balanced classes (floor(count/2) of class 0, the rest class 1) in a seeded
// shuffled order; x = mean[y] + L z; each label flipped with probability rho.
DomainDataset generate_domain(const DomainSpec& spec);

// Knobs of the shift-2s1t family. Defaults are the documented benchmark.
struct BenchmarkOptions {
  std::size_t modalities = 2;
  std::size_t width = 8;
  double separation = 2.0;
  double rotation = 0.6;     // radians between the two source domains
  double target_shift = 1.5; // added to half the coordinates
  // Cosine between each class axis and the shift direction, in [0, 1).
  double class_lean = 0.5;
  std::size_t source_count = 512;
  std::size_t target_count = 512;
  double label_noise = 0.05;
};

struct BenchmarkSpecs {
  std::vector<DomainSpec> sources;
  DomainSpec target;
};

// Two labeled sources with distinct rotations of a shared class geometry and
// one unlabeled target built from source 1 with shifted means and a different
// covariance transform.
BenchmarkSpecs shift_2s1t(std::uint64_t seed, const BenchmarkOptions& options = {});

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
nd::Tensor cholesky(const nd::Tensor& spd);

// CSV with header `label,f0_0,...,f0_{w0-1},f1_0,...`; label in {0,1,-1}.
DomainDataset load_domain_csv(const std::string& path, const std::string& id,
                              Role role, const std::vector<std::size_t>& widths);
DomainDataset parse_domain_csv(const std::string& text, const std::string& id,
                               Role role, const std::vector<std::size_t>& widths);
// Shortest round-trip decimal formatting; a written dataset reloads bitwise.
std::string format_domain_csv(const DomainDataset& dataset,
                              bool include_labels = true);
void write_domain_csv(const DomainDataset& dataset, const std::string& path,
                      bool include_labels = true);

}  // namespace mmpda::data
