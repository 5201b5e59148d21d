// SPDX-License-Identifier: Apache-2.0
#include "elx/replay.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "elx/rng.hpp"

namespace elx {

using ordered_json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace {
double secs(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}
}  // namespace

ReplayReport replay(const std::vector<Request>& trace, ElasticRuntime& rt,
                    const PolicyBundle& bundle) {
  ReplayReport report;
  report.rows.reserve(trace.size());
  const LatencyModel& lm = bundle.latency;

  for (const Request& req : trace) {
    RequestResult row;
    row.id = req.id;
    row.slo = req.slo;
    row.prompt_len = static_cast<int>(req.prompt.size());
    row.ttft_budget = req.slo.zeta_ttft * lm.ttft_full(row.prompt_len);
    row.tpot_budget = req.slo.zeta_tpot * lm.tpot_full();

    const TokenScores scores = bundle.scorer.score(req.prompt);
    DecideResult dec;
    try {
      dec = decide(bundle.policy, lm, req.slo, row.prompt_len, scores,
                   rt.current_percent(),
                   mix_seed(bundle.seed, static_cast<uint64_t>(req.id)));
    } catch (const InfeasibleSloError&) {
      row.infeasible = true;
      report.rows.push_back(row);
      continue;
    }
    row.decision = dec.decision;
    row.fallback_used = dec.fallback_used;
    row.predicted_ttft =
        lm.predict_ttft(std::ceil(row.prompt_len * dec.decision.prompt_percent / 100.0),
                        dec.decision.model_percent / 100.0) +
        lm.switch_cost_for(rt.current_percent(), dec.decision.model_percent);
    row.predicted_tpot = lm.predict_tpot(dec.decision.model_percent / 100.0);
    row.slo_met_predicted =
        row.predicted_ttft <= row.ttft_budget && row.predicted_tpot <= row.tpot_budget;

    // serve: switch (billed to TTFT), compress, prefill, greedy decode
    const auto t0 = Clock::now();
    if (dec.decision.model_percent != rt.current_percent()) {
      const SwitchReport sw = rt.switch_level(dec.decision.model_percent);
      row.switched = true;
      row.switch_seconds = sw.wall_seconds;
    }
    const std::vector<char> mask = structural_mask(req.prompt);
    const std::vector<int> compressed =
        compress(req.prompt, scores, dec.decision.prompt_percent / 100.0, &mask);
    row.compressed_len = static_cast<int>(compressed.size());

    KvCache cache = rt.begin_request();
    TensorF logits = rt.prefill(cache, compressed);
    row.measured_ttft = secs(t0, Clock::now());

    const int64_t voc = logits.dim(1);
    int next = 0;
    const float* last = logits.row(logits.dim(0) - 1);
    for (int64_t j = 1; j < voc; ++j) {
      if (last[j] > last[next]) next = static_cast<int>(j);
    }
    std::vector<int> answer;
    double decode_seconds = 0.0;
    const int max_steps = static_cast<int>(req.groundtruth.size());
    for (int s = 0; s < max_steps; ++s) {
      if (next == tok::kEos) break;
      answer.push_back(next);
      if (s + 1 == max_steps) break;
      const auto d0 = Clock::now();
      TensorF step = rt.decode_step(cache, next);
      decode_seconds += secs(d0, Clock::now());
      row.decode_steps += 1;
      const float* r = step.row(0);
      next = 0;
      for (int64_t j = 1; j < voc; ++j) {
        if (r[j] > r[next]) next = static_cast<int>(j);
      }
    }
    rt.end_request(cache);
    row.measured_tpot = row.decode_steps > 0 ? decode_seconds / row.decode_steps : 0.0;
    row.correct = answer == req.groundtruth;
    row.slo_met_measured =
        row.measured_ttft <= row.ttft_budget && row.measured_tpot <= row.tpot_budget;
    report.rows.push_back(std::move(row));
  }

  report.agg = recompute_aggregates(report.rows, rt.resident_bytes(),
                                    rt.weight_bytes_copied_total());
  return report;
}

ReplayAggregates recompute_aggregates(const std::vector<RequestResult>& rows,
                                      int64_t peak_resident_bytes,
                                      uint64_t weight_bytes_copied) {
  ReplayAggregates a;
  a.n_requests = static_cast<int>(rows.size());
  a.peak_resident_bytes = peak_resident_bytes;
  a.weight_bytes_copied = weight_bytes_copied;
  for (const auto& r : rows) {
    if (r.infeasible) {
      a.n_infeasible += 1;
      continue;
    }
    a.n_served += 1;
    if (r.fallback_used) a.fallback_count += 1;
    if (r.slo_met_measured) a.n_slo_met += 1;
    if (r.slo_met_measured && r.correct) a.n_correct_and_met += 1;
    if (r.switched) {
      a.switch_count += 1;
      a.switch_seconds_total += r.switch_seconds;
    }
    a.ttft_seconds_total += r.measured_ttft;
  }
  if (a.n_requests > 0) {
    a.accuracy = static_cast<double>(a.n_correct_and_met) / a.n_requests;
    a.slo_compliance = static_cast<double>(a.n_slo_met) / a.n_requests;
    int pred = 0;
    for (const auto& r : rows) {
      if (!r.infeasible && r.slo_met_predicted) ++pred;
    }
    a.predicted_compliance = static_cast<double>(pred) / a.n_requests;
  }
  if (a.ttft_seconds_total > 0.0) {
    a.switch_share_of_ttft = a.switch_seconds_total / a.ttft_seconds_total;
  }
  return a;
}

namespace {

ordered_json row_to_json(const RequestResult& r) {
  ordered_json j;
  j["id"] = r.id;
  j["slo"] = ordered_json{{"ttft", r.slo.zeta_ttft}, {"tpot", r.slo.zeta_tpot}};
  j["decision"] = ordered_json{{"prompt", r.decision.prompt_percent},
                               {"model", r.decision.model_percent}};
  j["fallback_used"] = r.fallback_used;
  j["infeasible"] = r.infeasible;
  j["prompt_len"] = r.prompt_len;
  j["compressed_len"] = r.compressed_len;
  j["decode_steps"] = r.decode_steps;
  j["switched"] = r.switched;
  j["switch_seconds"] = r.switch_seconds;
  j["predicted_ttft"] = r.predicted_ttft;
  j["predicted_tpot"] = r.predicted_tpot;
  j["measured_ttft"] = r.measured_ttft;
  j["measured_tpot"] = r.measured_tpot;
  j["ttft_budget"] = r.ttft_budget;
  j["tpot_budget"] = r.tpot_budget;
  j["slo_met_predicted"] = r.slo_met_predicted;
  j["slo_met_measured"] = r.slo_met_measured;
  j["correct"] = r.correct;
  return j;
}

RequestResult row_from_json(const ordered_json& j) {
  RequestResult r;
  r.id = j.at("id").get<int64_t>();
  r.slo.zeta_ttft = j.at("slo").at("ttft").get<double>();
  r.slo.zeta_tpot = j.at("slo").at("tpot").get<double>();
  r.decision.prompt_percent = j.at("decision").at("prompt").get<int>();
  r.decision.model_percent = j.at("decision").at("model").get<int>();
  r.fallback_used = j.at("fallback_used").get<bool>();
  r.infeasible = j.at("infeasible").get<bool>();
  r.prompt_len = j.at("prompt_len").get<int>();
  r.compressed_len = j.at("compressed_len").get<int>();
  r.decode_steps = j.at("decode_steps").get<int>();
  r.switched = j.at("switched").get<bool>();
  r.switch_seconds = j.at("switch_seconds").get<double>();
  r.predicted_ttft = j.at("predicted_ttft").get<double>();
  r.predicted_tpot = j.at("predicted_tpot").get<double>();
  r.measured_ttft = j.at("measured_ttft").get<double>();
  r.measured_tpot = j.at("measured_tpot").get<double>();
  r.ttft_budget = j.at("ttft_budget").get<double>();
  r.tpot_budget = j.at("tpot_budget").get<double>();
  r.slo_met_predicted = j.at("slo_met_predicted").get<bool>();
  r.slo_met_measured = j.at("slo_met_measured").get<bool>();
  r.correct = j.at("correct").get<bool>();
  return r;
}

ordered_json agg_to_json(const ReplayAggregates& a) {
  ordered_json j;
  j["n_requests"] = a.n_requests;
  j["n_served"] = a.n_served;
  j["n_infeasible"] = a.n_infeasible;
  j["n_slo_met"] = a.n_slo_met;
  j["n_correct_and_met"] = a.n_correct_and_met;
  j["accuracy"] = a.accuracy;
  j["slo_compliance"] = a.slo_compliance;
  j["predicted_compliance"] = a.predicted_compliance;
  j["switch_count"] = a.switch_count;
  j["switch_seconds_total"] = a.switch_seconds_total;
  j["ttft_seconds_total"] = a.ttft_seconds_total;
  j["switch_share_of_ttft"] = a.switch_share_of_ttft;
  j["fallback_count"] = a.fallback_count;
  j["peak_resident_bytes"] = a.peak_resident_bytes;
  j["weight_bytes_copied"] = a.weight_bytes_copied;
  return j;
}

ReplayAggregates agg_from_json(const ordered_json& j) {
  ReplayAggregates a;
  a.n_requests = j.at("n_requests").get<int>();
  a.n_served = j.at("n_served").get<int>();
  a.n_infeasible = j.at("n_infeasible").get<int>();
  a.n_slo_met = j.at("n_slo_met").get<int>();
  a.n_correct_and_met = j.at("n_correct_and_met").get<int>();
  a.accuracy = j.at("accuracy").get<double>();
  a.slo_compliance = j.at("slo_compliance").get<double>();
  a.predicted_compliance = j.at("predicted_compliance").get<double>();
  a.switch_count = j.at("switch_count").get<int>();
  a.switch_seconds_total = j.at("switch_seconds_total").get<double>();
  a.ttft_seconds_total = j.at("ttft_seconds_total").get<double>();
  a.switch_share_of_ttft = j.at("switch_share_of_ttft").get<double>();
  a.fallback_count = j.at("fallback_count").get<int>();
  a.peak_resident_bytes = j.at("peak_resident_bytes").get<int64_t>();
  a.weight_bytes_copied = j.at("weight_bytes_copied").get<uint64_t>();
  return a;
}

}  // namespace

void save_report(const ReplayReport& report, const std::string& path) {
  ordered_json j;
  j["format"] = "elx-replay-report";
  j["aggregates"] = agg_to_json(report.agg);
  ordered_json rows = ordered_json::array();
  for (const auto& r : report.rows) rows.push_back(row_to_json(r));
  j["requests"] = std::move(rows);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

ReplayReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  try {
    ordered_json j;
    in >> j;
    if (j.at("format").get<std::string>() != "elx-replay-report") {
      throw FormatError("'" + path + "' is not a replay report");
    }
    ReplayReport report;
    report.agg = agg_from_json(j.at("aggregates"));
    for (const auto& rj : j.at("requests")) report.rows.push_back(row_from_json(rj));
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed replay report: ") + e.what());
  }
}

std::string render_report(const ReplayReport& report, bool as_json) {
  if (as_json) {
    ordered_json j;
    j["aggregates"] = agg_to_json(report.agg);
    ordered_json rows = ordered_json::array();
    for (const auto& r : report.rows) rows.push_back(row_to_json(r));
    j["requests"] = std::move(rows);
    return j.dump(2) + "\n";
  }
  const ReplayAggregates& a = report.agg;
  char buf[512];
  std::string out;
  out += "replay summary\n";
  out += "--------------\n";
  std::snprintf(buf, sizeof(buf), "%-28s %d\n", "requests", a.n_requests);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %d\n", "served", a.n_served);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %d\n", "infeasible SLOs", a.n_infeasible);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %.4f\n", "accuracy (SLO-met)", a.accuracy);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %.4f\n", "SLO compliance (measured)",
                a.slo_compliance);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %.4f\n", "SLO compliance (predicted)",
                a.predicted_compliance);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %d\n", "level switches", a.switch_count);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %.6f\n", "switch seconds total",
                a.switch_seconds_total);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %.6f\n", "ttft seconds total",
                a.ttft_seconds_total);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %.6f\n", "switch share of TTFT",
                a.switch_share_of_ttft);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %d\n", "fallback decisions", a.fallback_count);
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %lld\n", "peak resident bytes",
                static_cast<long long>(a.peak_resident_bytes));
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-28s %llu\n", "weight bytes copied",
                static_cast<unsigned long long>(a.weight_bytes_copied));
  out += buf;
  return out;
}

}  // namespace elx
