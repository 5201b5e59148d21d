// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "elx/planner.hpp"
#include "elx/trace.hpp"

namespace elx {

struct RequestResult {
  int64_t id = 0;
  Slo slo;
  Decision decision;
  bool fallback_used = false;
  bool infeasible = false;  // no feasible decision existed; not served
  int prompt_len = 0;
  int compressed_len = 0;
  int decode_steps = 0;
  bool switched = false;
  double switch_seconds = 0.0;
  double predicted_ttft = 0.0;  // includes switch cost
  double predicted_tpot = 0.0;
  double measured_ttft = 0.0;  // switch + prefill wall time
  double measured_tpot = 0.0;  // mean decode-step wall time
  double ttft_budget = 0.0;    // zeta_ttft * TTFT_full(L)
  double tpot_budget = 0.0;
  bool slo_met_predicted = false;
  bool slo_met_measured = false;
  bool correct = false;
};

struct ReplayAggregates {
  int n_requests = 0;
  int n_served = 0;
  int n_infeasible = 0;
  int n_slo_met = 0;
  int n_correct_and_met = 0;
  double accuracy = 0.0;         // correct among SLO-met, over all requests
  double slo_compliance = 0.0;   // measured
  double predicted_compliance = 0.0;
  int switch_count = 0;
  double switch_seconds_total = 0.0;
  double ttft_seconds_total = 0.0;
  double switch_share_of_ttft = 0.0;
  int fallback_count = 0;
  int64_t peak_resident_bytes = 0;
  uint64_t weight_bytes_copied = 0;
};

struct ReplayReport {
  std::vector<RequestResult> rows;
  ReplayAggregates agg;
};

// FCFS serving of a trace: score, decide, switch, compress, prefill,
// greedy-decode, compare; one request at a time. Infeasible SLOs are
// recorded and skipped, never served.
ReplayReport replay(const std::vector<Request>& trace, ElasticRuntime& rt,
                    const PolicyBundle& bundle);

// Aggregates recomputed from rows (consistency oracle for report()).
ReplayAggregates recompute_aggregates(const std::vector<RequestResult>& rows,
                                      int64_t peak_resident_bytes,
                                      uint64_t weight_bytes_copied);

void save_report(const ReplayReport& report, const std::string& path);
ReplayReport load_report(const std::string& path);

// Human-readable table or machine-readable JSON with identical numbers.
std::string render_report(const ReplayReport& report, bool as_json);

}  // namespace elx
