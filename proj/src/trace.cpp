// SPDX-License-Identifier: Apache-2.0
#include "elx/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "elx/rng.hpp"

namespace elx {

using ordered_json = nlohmann::ordered_json;

std::vector<int> largest_remainder_counts(int n, const std::vector<double>& weights) {
  if (weights.empty()) throw InputError("largest_remainder_counts: no weights");
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw InputError("weights must be positive");
    total += w;
  }
  std::vector<int> counts(weights.size());
  std::vector<std::pair<double, size_t>> remainders;  // (-remainder, index)
  int assigned = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(n) * weights[i] / total;
    counts[i] = static_cast<int>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(-(exact - std::floor(exact)), i);
  }
  std::stable_sort(remainders.begin(), remainders.end());
  for (int k = 0; k < n - assigned; ++k) {
    counts[remainders[static_cast<size_t>(k)].second] += 1;
  }
  return counts;
}

std::vector<int> slo_level_counts(int n, int n_levels, double alpha) {
  std::vector<double> weights(static_cast<size_t>(n_levels));
  for (int i = 1; i <= n_levels; ++i) {
    weights[static_cast<size_t>(i - 1)] = std::exp(alpha * static_cast<double>(i));
  }
  return largest_remainder_counts(n, weights);
}

std::vector<Request> synth_trace(const TraceSpec& spec) {
  if (spec.n_requests < 0) throw InputError("trace: negative request count");
  if (spec.poisson_rate <= 0.0) throw InputError("trace: arrival rate must be positive");
  const std::vector<Slo> slos = spec.slos.empty() ? table3_slos() : spec.slos;
  for (const auto& s : slos) {
    if (!s.valid()) throw InputError("trace: slo ratios must lie in (0, 1]");
  }

  const std::vector<int> counts =
      slo_level_counts(spec.n_requests, static_cast<int>(slos.size()), spec.alpha);

  std::vector<Request> trace;
  trace.reserve(static_cast<size_t>(spec.n_requests));
  uint64_t instance = 0;
  for (size_t level = 0; level < slos.size(); ++level) {
    for (int k = 0; k < counts[level]; ++k) {
      Request r;
      const TaskInstance inst = gen_task(spec.task, mix_seed(spec.seed, instance));
      r.prompt = inst.prompt;
      r.groundtruth = inst.groundtruth;
      r.slo = slos[level];
      trace.push_back(std::move(r));
      ++instance;
    }
  }

  Rng rng(mix_seed(spec.seed, 0x5875FF1Eull));
  rng.shuffle(trace);
  double t = 0.0;
  for (size_t i = 0; i < trace.size(); ++i) {
    t += rng.exponential(spec.poisson_rate);
    trace[i].id = static_cast<int64_t>(i);
    trace[i].arrival_time = t;
  }
  return trace;
}

void save_trace(const std::vector<Request>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  for (const auto& r : trace) {
    ordered_json j;
    j["id"] = r.id;
    j["tokens"] = r.prompt;
    j["slo"] = ordered_json{{"ttft", r.slo.zeta_ttft}, {"tpot", r.slo.zeta_tpot}};
    j["groundtruth"] = r.groundtruth;
    j["arrival_time"] = r.arrival_time;
    out << j.dump() << "\n";
  }
  if (!out) throw FormatError("short write to '" + path + "'");
}

std::vector<Request> load_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<Request> trace;
  std::string line;
  double prev_arrival = -1.0;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const ordered_json j = ordered_json::parse(line);
      Request r;
      r.id = j.at("id").get<int64_t>();
      r.prompt = j.at("tokens").get<std::vector<int>>();
      r.slo.zeta_ttft = j.at("slo").at("ttft").get<double>();
      r.slo.zeta_tpot = j.at("slo").at("tpot").get<double>();
      r.groundtruth = j.at("groundtruth").get<std::vector<int>>();
      r.arrival_time = j.at("arrival_time").get<double>();
      if (r.prompt.empty()) {
        throw FormatError("trace line " + std::to_string(line_no) + ": empty prompt");
      }
      if (!r.slo.valid()) {
        throw FormatError("trace line " + std::to_string(line_no) + ": invalid slo");
      }
      if (r.arrival_time < prev_arrival) {
        throw FormatError("trace line " + std::to_string(line_no) +
                          ": arrival times must be non-decreasing");
      }
      prev_arrival = r.arrival_time;
      trace.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return trace;
}

}  // namespace elx
