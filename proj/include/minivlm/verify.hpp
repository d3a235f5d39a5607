#pragma once

// Self-contained invariant suite behind `minivlm verify` and the acceptance
// tests: finite-difference gradient checks, permutation invariance, LoRA
// identity, causality, schedule shape, metric oracles, kernel-path identity.

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "minivlm/tensor.hpp"

namespace minivlm::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Central finite differences against an already-populated analytic gradient.
// rel = |a - n| / max(|a|, |n|, 1e-8), with differences below abs_floor
// counted as zero. loss_fn must recompute the forward pass from live data.
struct FdReport {
  double max_rel = 0.0;
  i64 checked = 0;
  std::string worst;
};
FdReport fd_check_param(const std::function<double()>& loss_fn, Tensor param,
                        const std::string& name, double h = 1e-5,
                        double abs_floor = 1e-9);

// Runs every check; each result is printed to `log` (when given) as one
// "[PASS]/[FAIL] name: detail" line. paper_dims additionally reports the
// projector parameter counts at the published dimensions.
std::vector<CheckResult> run_verification(bool paper_dims,
                                          std::ostream* log = nullptr);

}  // namespace minivlm::verify
