// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace elx {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyOptions {
  int permutations = 40;   // random permutations per config combination
  int switches = 60;       // random level switches for the zero-copy check
  uint64_t seed = 1;
  std::string tmp_dir = ".";  // scratch space for the round-trip check
};

// Self-check suites: permutation consistency (float32 serving path and
// float64 reference path), decode/prefill agreement, zero-copy switching
// against the naive re-layout baseline, view/extraction equivalence,
// gradient-times-weight importance against leave-one-out, checkpoint
// round-trip integrity and compression invariants.
std::vector<CheckResult> run_verification(const VerifyOptions& opts);

}  // namespace elx
