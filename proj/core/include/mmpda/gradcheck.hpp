#pragma once

// Finite-difference verification of every loss against its analytic
// gradient, both w.r.t. raw feature inputs and w.r.t. model parameters.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace mmpda::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;  // max |analytic - numeric| / max(1, |numeric|)
  std::size_t coordinates = 0;
};

struct SuiteOptions {
  double h = 1e-5;
  std::uint64_t seed = 7;
  std::size_t batch = 4;
  std::size_t width = 3;
};

std::vector<CheckResult> run_gradient_suite(const SuiteOptions& options = {});

}  // namespace mmpda::gradcheck
