// SPDX-License-Identifier: Apache-2.0
#include "elx/planner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "elx/rng.hpp"

namespace elx {

using ordered_json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

std::vector<Slo> table3_slos() {
  return {{0.2, 0.5}, {0.2, 0.6}, {0.4, 0.7}, {0.6, 0.8}, {0.8, 0.9}, {1.0, 1.0}};
}

DecisionGrid DecisionGrid::from_levels(const LevelTable& levels) {
  DecisionGrid grid;
  for (const auto& e : levels.levels) {
    grid.model_percents.push_back(e.percent);
    grid.prompt_percents.push_back(e.percent);
  }
  return grid;
}

bool DecisionGrid::contains(const Decision& d) const {
  return std::find(prompt_percents.begin(), prompt_percents.end(), d.prompt_percent) !=
             prompt_percents.end() &&
         std::find(model_percents.begin(), model_percents.end(), d.model_percent) !=
             model_percents.end();
}

double LatencyModel::switch_cost_for(int from, int to) const {
  if (from == to) return 0.0;
  auto it = switch_cost.find({from, to});
  return it == switch_cost.end() ? 0.0 : it->second;
}

double RuntimeProber::prefill_seconds(int prompt_len, int model_percent) {
  rt_.switch_level(model_percent);
  Rng rng(mix_seed(seed_, static_cast<uint64_t>(prompt_len * 1000 + model_percent)));
  std::vector<int> tokens(static_cast<size_t>(prompt_len));
  const int vocab = rt_.checkpoint().config().vocab_size;
  for (auto& t : tokens) t = rng.below_int(vocab);
  KvCache cache = rt_.begin_request();
  const auto t0 = Clock::now();
  rt_.prefill(cache, tokens);
  const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
  rt_.end_request(cache);
  return dt;
}

double RuntimeProber::decode_step_seconds(int model_percent) {
  rt_.switch_level(model_percent);
  Rng rng(mix_seed(seed_, static_cast<uint64_t>(77000 + model_percent)));
  const int vocab = rt_.checkpoint().config().vocab_size;
  std::vector<int> tokens(32);
  for (auto& t : tokens) t = rng.below_int(vocab);
  KvCache cache = rt_.begin_request();
  rt_.prefill(cache, tokens);
  const auto t0 = Clock::now();
  rt_.decode_step(cache, rng.below_int(vocab));
  const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
  rt_.end_request(cache);
  return dt;
}

double RuntimeProber::switch_seconds(int from_percent, int to_percent) {
  rt_.switch_level(from_percent);
  return rt_.switch_level(to_percent).wall_seconds;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) throw CalibrationError("median of empty sample");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// least squares for y ~ slope*x + intercept
std::pair<double, double> fit_line(const std::vector<double>& x,
                                   const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double det = n * sxx - sx * sx;
  if (std::fabs(det) < 1e-12 * std::max(1.0, sxx * n)) {
    throw CalibrationError("singular latency fit: probe points do not span the axis");
  }
  const double slope = (n * sxy - sx * sy) / det;
  const double intercept = (sy * sxx - sx * sxy) / det;
  return {slope, intercept};
}

double mape(const std::vector<double>& x, const std::vector<double>& y, double slope,
            double intercept) {
  std::vector<double> errs;
  errs.reserve(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double pred = slope * x[i] + intercept;
    if (y[i] > 0) errs.push_back(std::fabs(pred - y[i]) / y[i]);
  }
  return errs.empty() ? 0.0 : median(errs);
}

}  // namespace

LatencyModel calibrate(Prober& prober, const std::vector<int>& probe_lengths,
                       const std::vector<int>& level_percents, int repetitions) {
  if (probe_lengths.size() < 2) throw CalibrationError("need at least 2 probe lengths");
  if (level_percents.size() < 2) throw CalibrationError("need at least 2 levels");
  if (repetitions < 1) throw CalibrationError("repetitions must be >= 1");

  LatencyModel lm;
  std::vector<double> xs, ys;
  for (int len : probe_lengths) {
    for (int pct : level_percents) {
      std::vector<double> reps;
      for (int r = 0; r < repetitions; ++r) {
        reps.push_back(prober.prefill_seconds(len, pct));
      }
      xs.push_back(static_cast<double>(len) * (static_cast<double>(pct) / 100.0));
      ys.push_back(median(reps));
    }
  }
  std::tie(lm.a, lm.b) = fit_line(xs, ys);
  lm.ttft_mape = mape(xs, ys, lm.a, lm.b);

  std::vector<double> xd, yd;
  for (int pct : level_percents) {
    std::vector<double> reps;
    for (int r = 0; r < repetitions; ++r) {
      reps.push_back(prober.decode_step_seconds(pct));
    }
    xd.push_back(static_cast<double>(pct) / 100.0);
    yd.push_back(median(reps));
  }
  std::tie(lm.c, lm.d) = fit_line(xd, yd);
  lm.tpot_mape = mape(xd, yd, lm.c, lm.d);

  for (int from : level_percents) {
    for (int to : level_percents) {
      if (from == to) continue;
      std::vector<double> reps;
      for (int r = 0; r < repetitions; ++r) {
        reps.push_back(prober.switch_seconds(from, to));
      }
      lm.switch_cost[{from, to}] = median(reps);
    }
  }
  return lm;
}

bool feasible(const LatencyModel& lm, const Slo& slo, int prompt_len, const Decision& d,
              bool include_switch, int current_percent) {
  if (!slo.valid()) throw InputError("slo ratios must lie in (0, 1]");
  const double L = static_cast<double>(prompt_len);
  const double compressed =
      std::ceil(static_cast<double>(d.prompt_percent) / 100.0 * L);
  const double s = static_cast<double>(d.model_percent) / 100.0;
  double ttft = lm.predict_ttft(compressed, s);
  if (include_switch) ttft += lm.switch_cost_for(current_percent, d.model_percent);
  if (ttft > slo.zeta_ttft * lm.ttft_full(L)) return false;
  return lm.predict_tpot(s) <= slo.zeta_tpot * lm.tpot_full();
}

std::vector<Decision> enumerate_feasible(const LatencyModel& lm, const DecisionGrid& grid,
                                         const Slo& slo, int prompt_len,
                                         bool include_switch, int current_percent) {
  std::vector<Decision> out;
  for (auto m = grid.model_percents.rbegin(); m != grid.model_percents.rend(); ++m) {
    for (auto p = grid.prompt_percents.rbegin(); p != grid.prompt_percents.rend(); ++p) {
      const Decision d{*p, *m};
      if (feasible(lm, slo, prompt_len, d, include_switch, current_percent)) {
        out.push_back(d);
      }
    }
  }
  return out;
}

LabelledExample label_one(ElasticRuntime& rt, const Scorer& scorer, const LatencyModel& lm,
                          const DecisionGrid& grid, const TaskInstance& inst,
                          uint64_t task_seed, const Slo& slo, uint64_t label_seed) {
  const int prompt_len = static_cast<int>(inst.prompt.size());
  std::vector<Decision> feas = enumerate_feasible(lm, grid, slo, prompt_len, false);
  if (feas.empty()) {
    throw InfeasibleSloError("no decision in the grid can meet the SLO");
  }

  const TokenScores scores = scorer.score(inst.prompt);
  const std::vector<char> mask = structural_mask(inst.prompt);

  LabelledExample ex;
  ex.task_seed = task_seed;
  ex.slo = slo;
  ex.prompt_len = prompt_len;
  ex.features = policy_features(slo, prompt_len, scores);

  // lightest first: ascending model level, then ascending prompt level
  std::vector<Decision> asc = feas;
  std::sort(asc.begin(), asc.end(), [](const Decision& x, const Decision& y) {
    if (x.model_percent != y.model_percent) return x.model_percent < y.model_percent;
    return x.prompt_percent < y.prompt_percent;
  });
  std::map<int, TaskInstance> compressed_cache;
  const ElasticCheckpoint& ckpt = rt.checkpoint();
  for (const Decision& d : asc) {
    auto it = compressed_cache.find(d.prompt_percent);
    if (it == compressed_cache.end()) {
      TaskInstance served = inst;
      served.prompt = compress(inst.prompt, scores,
                               static_cast<double>(d.prompt_percent) / 100.0, &mask);
      it = compressed_cache.emplace(d.prompt_percent, std::move(served)).first;
    }
    const ViewExtents ext = ckpt.extents_for(d.model_percent);
    const AdapterSet* adapters = ckpt.adapters_for(d.model_percent);
    if (greedy_answer(ckpt.weights, ext, adapters, it->second) == inst.groundtruth) {
      ex.label = d;
      ex.correct = true;
      return ex;
    }
  }
  Rng rng(mix_seed(label_seed, task_seed));
  ex.label = feas[static_cast<size_t>(rng.below(feas.size()))];
  ex.correct = false;
  ex.fallback = true;
  return ex;
}

std::vector<double> policy_features(const Slo& slo, int prompt_len,
                                    const TokenScores& scores) {
  double mean = 0.0;
  for (double v : scores.values) mean += v;
  mean /= static_cast<double>(scores.values.size());
  double var = 0.0;
  double high = 0.0;
  for (double v : scores.values) {
    var += (v - mean) * (v - mean);
    if (v >= 0.5) high += 1.0;
  }
  var /= static_cast<double>(scores.values.size());
  return {1.0,
          slo.zeta_ttft,
          slo.zeta_tpot,
          static_cast<double>(prompt_len) / 64.0,
          mean,
          std::sqrt(var),
          high / static_cast<double>(scores.values.size()),
          slo.zeta_ttft * slo.zeta_tpot};
}

Decision PolicyModel::predict(const std::vector<double>& features) const {
  if (static_cast<int>(features.size()) != kPolicyFeatureCount) {
    throw InputError("policy features size mismatch");
  }
  std::vector<double> f(features.size());
  for (size_t i = 0; i < f.size(); ++i) {
    f[i] = (features[i] - feat_mean[i]) * feat_scale[i];
  }
  auto argmax_head = [&](const TensorD& w) {
    int best = 0;
    double best_z = -1e300;
    for (int64_t c = 0; c < w.dim(0); ++c) {
      double z = 0.0;
      for (int64_t j = 0; j < w.dim(1); ++j) z += w.at(c, j) * f[static_cast<size_t>(j)];
      if (z > best_z) {
        best_z = z;
        best = static_cast<int>(c);
      }
    }
    return best;
  };
  Decision d;
  d.prompt_percent = grid.prompt_percents[static_cast<size_t>(argmax_head(w_prompt))];
  d.model_percent = grid.model_percents[static_cast<size_t>(argmax_head(w_model))];
  return d;
}

PolicyModel train_policy(const std::vector<LabelledExample>& examples,
                         const DecisionGrid& grid, const PolicyTrainOptions& opts) {
  if (examples.empty()) throw TrainingError("train_policy: empty dataset");
  const int F = kPolicyFeatureCount;
  const int K = static_cast<int>(grid.prompt_percents.size());
  const int J = static_cast<int>(grid.model_percents.size());

  PolicyModel pm;
  pm.grid = grid;
  pm.feat_mean.assign(static_cast<size_t>(F), 0.0);
  pm.feat_scale.assign(static_cast<size_t>(F), 1.0);
  for (const auto& ex : examples) {
    for (int j = 0; j < F; ++j) pm.feat_mean[static_cast<size_t>(j)] += ex.features[static_cast<size_t>(j)];
  }
  for (double& m : pm.feat_mean) m /= static_cast<double>(examples.size());
  std::vector<double> var(static_cast<size_t>(F), 0.0);
  for (const auto& ex : examples) {
    for (int j = 0; j < F; ++j) {
      const double dlt = ex.features[static_cast<size_t>(j)] - pm.feat_mean[static_cast<size_t>(j)];
      var[static_cast<size_t>(j)] += dlt * dlt;
    }
  }
  for (int j = 0; j < F; ++j) {
    const double sd = std::sqrt(var[static_cast<size_t>(j)] / static_cast<double>(examples.size()));
    pm.feat_scale[static_cast<size_t>(j)] = sd > 1e-9 ? 1.0 / sd : 1.0;
  }
  // keep the bias feature as-is
  pm.feat_mean[0] = 0.0;
  pm.feat_scale[0] = 1.0;

  auto class_of = [](const std::vector<int>& percents, int pct) {
    for (size_t i = 0; i < percents.size(); ++i) {
      if (percents[i] == pct) return static_cast<int>(i);
    }
    throw TrainingError("label outside the decision grid");
  };

  std::vector<std::vector<double>> feats(examples.size());
  std::vector<int> yp(examples.size()), ym(examples.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    feats[i].resize(static_cast<size_t>(F));
    for (int j = 0; j < F; ++j) {
      feats[i][static_cast<size_t>(j)] =
          (examples[i].features[static_cast<size_t>(j)] - pm.feat_mean[static_cast<size_t>(j)]) *
          pm.feat_scale[static_cast<size_t>(j)];
    }
    yp[i] = class_of(grid.prompt_percents, examples[i].label.prompt_percent);
    ym[i] = class_of(grid.model_percents, examples[i].label.model_percent);
  }

  auto train_head = [&](int classes, const std::vector<int>& y) {
    TensorD w({classes, F});
    std::vector<double> z(static_cast<size_t>(classes));
    TensorD g({classes, F});
    const double inv_n = 1.0 / static_cast<double>(examples.size());
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
      g.fill(0.0);
      for (size_t i = 0; i < examples.size(); ++i) {
        double mx = -1e300;
        for (int c = 0; c < classes; ++c) {
          double s = 0.0;
          for (int j = 0; j < F; ++j) s += w.at(c, j) * feats[i][static_cast<size_t>(j)];
          z[static_cast<size_t>(c)] = s;
          mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) {
          z[static_cast<size_t>(c)] = std::exp(z[static_cast<size_t>(c)] - mx);
          denom += z[static_cast<size_t>(c)];
        }
        for (int c = 0; c < classes; ++c) {
          const double p = z[static_cast<size_t>(c)] / denom - (y[i] == c ? 1.0 : 0.0);
          for (int j = 0; j < F; ++j) g.at(c, j) += p * feats[i][static_cast<size_t>(j)];
        }
      }
      for (int64_t t = 0; t < w.numel(); ++t) w[t] -= opts.lr * g[t] * inv_n;
    }
    return w;
  };
  pm.w_prompt = train_head(K, yp);
  pm.w_model = train_head(J, ym);

  int hits = 0;
  for (size_t i = 0; i < examples.size(); ++i) {
    if (pm.predict(examples[i].features) == examples[i].label) ++hits;
  }
  pm.train_accuracy = static_cast<double>(hits) / static_cast<double>(examples.size());
  return pm;
}

DecideResult decide(const PolicyModel& policy, const LatencyModel& lm, const Slo& slo,
                    int prompt_len, const TokenScores& scores, int current_percent,
                    uint64_t fallback_seed) {
  const std::vector<double> feats = policy_features(slo, prompt_len, scores);
  const Decision predicted = policy.predict(feats);
  if (feasible(lm, slo, prompt_len, predicted, true, current_percent)) {
    return {predicted, false};
  }
  const std::vector<Decision> feas =
      enumerate_feasible(lm, policy.grid, slo, prompt_len, true, current_percent);
  if (feas.empty()) {
    throw InfeasibleSloError("no decision in the grid can meet the SLO");
  }
  Rng rng(fallback_seed);
  return {feas[static_cast<size_t>(rng.below(feas.size()))], true};
}

namespace {

ordered_json tensor_to_json(const TensorD& t) {
  ordered_json j;
  j["shape"] = t.shape();
  j["data"] = std::vector<double>(t.span().begin(), t.span().end());
  return j;
}

TensorD tensor_from_json(const ordered_json& j) {
  return TensorD(j.at("shape").get<std::vector<int64_t>>(),
                 j.at("data").get<std::vector<double>>());
}

ordered_json latency_to_json(const LatencyModel& lm) {
  ordered_json j;
  j["a"] = lm.a;
  j["b"] = lm.b;
  j["c"] = lm.c;
  j["d"] = lm.d;
  j["ttft_mape"] = lm.ttft_mape;
  j["tpot_mape"] = lm.tpot_mape;
  ordered_json sw = ordered_json::array();
  for (const auto& [key, v] : lm.switch_cost) {
    sw.push_back(ordered_json{{"from", key.first}, {"to", key.second}, {"seconds", v}});
  }
  j["switch_cost"] = std::move(sw);
  return j;
}

LatencyModel latency_from_json(const ordered_json& j) {
  LatencyModel lm;
  lm.a = j.at("a").get<double>();
  lm.b = j.at("b").get<double>();
  lm.c = j.at("c").get<double>();
  lm.d = j.at("d").get<double>();
  lm.ttft_mape = j.at("ttft_mape").get<double>();
  lm.tpot_mape = j.at("tpot_mape").get<double>();
  for (const auto& e : j.at("switch_cost")) {
    lm.switch_cost[{e.at("from").get<int>(), e.at("to").get<int>()}] =
        e.at("seconds").get<double>();
  }
  return lm;
}

ordered_json task_to_json(const TaskParams& t) {
  ordered_json j;
  j["n_pairs"] = t.n_pairs;
  j["distractor_len"] = t.distractor_len;
  j["value_len"] = t.value_len;
  j["n_keys"] = t.n_keys;
  j["n_values"] = t.n_values;
  j["n_filler"] = t.n_filler;
  return j;
}

TaskParams task_from_json(const ordered_json& j) {
  TaskParams t;
  t.n_pairs = j.at("n_pairs").get<int>();
  t.distractor_len = j.at("distractor_len").get<int>();
  t.value_len = j.at("value_len").get<int>();
  t.n_keys = j.at("n_keys").get<int>();
  t.n_values = j.at("n_values").get<int>();
  t.n_filler = j.at("n_filler").get<int>();
  return t;
}

}  // namespace

void save_bundle(const PolicyBundle& bundle, const std::string& path) {
  ordered_json j;
  j["format"] = "elx-policy-bundle";
  j["format_version"] = 1;
  j["task"] = task_to_json(bundle.task);
  j["scorer"]["kind"] = bundle.scorer.kind() == Scorer::Kind::kUniform     ? "uniform"
                        : bundle.scorer.kind() == Scorer::Kind::kHeuristic ? "heuristic"
                                                                           : "learned";
  j["scorer"]["weights"] = bundle.scorer.weights();
  j["policy"]["prompt_percents"] = bundle.policy.grid.prompt_percents;
  j["policy"]["model_percents"] = bundle.policy.grid.model_percents;
  j["policy"]["feat_mean"] = bundle.policy.feat_mean;
  j["policy"]["feat_scale"] = bundle.policy.feat_scale;
  j["policy"]["w_prompt"] = tensor_to_json(bundle.policy.w_prompt);
  j["policy"]["w_model"] = tensor_to_json(bundle.policy.w_model);
  j["policy"]["train_accuracy"] = bundle.policy.train_accuracy;
  j["latency"] = latency_to_json(bundle.latency);
  j["grid"]["prompt_percents"] = bundle.grid.prompt_percents;
  j["grid"]["model_percents"] = bundle.grid.model_percents;
  j["seed"] = bundle.seed;
  {
    ordered_json core = j;
    j["digest"] = fnv1a64_hex_of(core.dump());
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

PolicyBundle load_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  ordered_json j;
  try {
    in >> j;
    if (j.at("format").get<std::string>() != "elx-policy-bundle") {
      throw FormatError("'" + path + "' is not a policy bundle");
    }
    if (j.at("format_version").get<int>() != 1) {
      throw UnsupportedVersionError("unsupported bundle version");
    }
    {
      ordered_json core = j;
      core.erase("digest");
      if (fnv1a64_hex_of(core.dump()) != j.at("digest").get<std::string>()) {
        throw FormatError("policy bundle digest mismatch; the file is corrupt");
      }
    }
    PolicyBundle b;
    b.task = task_from_json(j.at("task"));
    const std::string kind = j.at("scorer").at("kind").get<std::string>();
    if (kind == "uniform") {
      b.scorer = Scorer::uniform();
    } else if (kind == "heuristic") {
      b.scorer = Scorer::heuristic(b.task);
    } else {
      b.scorer =
          Scorer::learned(b.task, j.at("scorer").at("weights").get<std::vector<double>>());
    }
    b.policy.grid.prompt_percents =
        j.at("policy").at("prompt_percents").get<std::vector<int>>();
    b.policy.grid.model_percents =
        j.at("policy").at("model_percents").get<std::vector<int>>();
    b.policy.feat_mean = j.at("policy").at("feat_mean").get<std::vector<double>>();
    b.policy.feat_scale = j.at("policy").at("feat_scale").get<std::vector<double>>();
    b.policy.w_prompt = tensor_from_json(j.at("policy").at("w_prompt"));
    b.policy.w_model = tensor_from_json(j.at("policy").at("w_model"));
    b.policy.train_accuracy = j.at("policy").at("train_accuracy").get<double>();
    b.latency = latency_from_json(j.at("latency"));
    b.grid.prompt_percents = j.at("grid").at("prompt_percents").get<std::vector<int>>();
    b.grid.model_percents = j.at("grid").at("model_percents").get<std::vector<int>>();
    b.seed = j.at("seed").get<uint64_t>();
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed policy bundle: ") + e.what());
  }
}

void save_latency(const LatencyModel& lm, const DecisionGrid& grid,
                  const std::string& path) {
  ordered_json j;
  j["format"] = "elx-latency";
  j["latency"] = latency_to_json(lm);
  j["grid"]["prompt_percents"] = grid.prompt_percents;
  j["grid"]["model_percents"] = grid.model_percents;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

std::pair<LatencyModel, DecisionGrid> load_latency(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  try {
    ordered_json j;
    in >> j;
    if (j.at("format").get<std::string>() != "elx-latency") {
      throw FormatError("'" + path + "' is not a latency model file");
    }
    DecisionGrid grid;
    grid.prompt_percents = j.at("grid").at("prompt_percents").get<std::vector<int>>();
    grid.model_percents = j.at("grid").at("model_percents").get<std::vector<int>>();
    return {latency_from_json(j.at("latency")), grid};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed latency file: ") + e.what());
  }
}

void save_scorer(const Scorer& scorer, const std::string& path) {
  ordered_json j;
  j["format"] = "elx-scorer";
  j["kind"] = scorer.kind() == Scorer::Kind::kUniform     ? "uniform"
              : scorer.kind() == Scorer::Kind::kHeuristic ? "heuristic"
                                                          : "learned";
  j["task"] = task_to_json(scorer.task());
  j["weights"] = scorer.weights();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
}

Scorer load_scorer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  try {
    ordered_json j;
    in >> j;
    if (j.at("format").get<std::string>() != "elx-scorer") {
      throw FormatError("'" + path + "' is not a scorer file");
    }
    const TaskParams task = task_from_json(j.at("task"));
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "uniform") return Scorer::uniform();
    if (kind == "heuristic") return Scorer::heuristic(task);
    return Scorer::learned(task, j.at("weights").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scorer file: ") + e.what());
  }
}

void save_labels(const std::vector<LabelledExample>& labels, const std::string& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  for (const auto& ex : labels) {
    ordered_json j;
    j["task_seed"] = ex.task_seed;
    j["slo"] = ordered_json{{"ttft", ex.slo.zeta_ttft}, {"tpot", ex.slo.zeta_tpot}};
    j["prompt_len"] = ex.prompt_len;
    j["features"] = ex.features;
    j["label"] = ordered_json{{"prompt", ex.label.prompt_percent},
                              {"model", ex.label.model_percent}};
    j["correct"] = ex.correct;
    j["fallback"] = ex.fallback;
    out << j.dump() << "\n";
  }
}

std::vector<LabelledExample> load_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<LabelledExample> labels;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const ordered_json j = ordered_json::parse(line);
      LabelledExample ex;
      ex.task_seed = j.at("task_seed").get<uint64_t>();
      ex.slo.zeta_ttft = j.at("slo").at("ttft").get<double>();
      ex.slo.zeta_tpot = j.at("slo").at("tpot").get<double>();
      ex.prompt_len = j.at("prompt_len").get<int>();
      ex.features = j.at("features").get<std::vector<double>>();
      ex.label.prompt_percent = j.at("label").at("prompt").get<int>();
      ex.label.model_percent = j.at("label").at("model").get<int>();
      ex.correct = j.at("correct").get<bool>();
      ex.fallback = j.at("fallback").get<bool>();
      labels.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("labels line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return labels;
}

}  // namespace elx
