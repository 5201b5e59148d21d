// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "elx/planner.hpp"
#include "elx/task.hpp"

namespace elx {

struct Request {
  int64_t id = 0;
  std::vector<int> prompt;
  Slo slo;
  std::vector<int> groundtruth;
  double arrival_time = 0.0;
};

struct TraceSpec {
  int n_requests = 600;
  std::vector<Slo> slos;  // tightest first (level 1); empty = table3_slos()
  double alpha = 0.0;     // skew: >0 favors relaxed SLOs
  double poisson_rate = 2.0;  // requests per second
  uint64_t seed = 0;
  TaskParams task;
};

// Largest-remainder apportionment of n by the given positive weights.
std::vector<int> largest_remainder_counts(int n, const std::vector<double>& weights);

// Per-SLO counts Num(i) = N * e^(alpha*i) / sum_k e^(alpha*k), i = 1..K
// (tightest SLO is level 1), rounded by largest remainder.
std::vector<int> slo_level_counts(int n, int n_levels, double alpha);

// Seeded synthesis: per-level counts, shuffled order, exponential
// inter-arrival gaps. (spec, seed) fully determine the result.
std::vector<Request> synth_trace(const TraceSpec& spec);

// One JSON record per line: id, tokens, slo, groundtruth, arrival_time.
void save_trace(const std::vector<Request>& trace, const std::string& path);
std::vector<Request> load_trace(const std::string& path);

}  // namespace elx
