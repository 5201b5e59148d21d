// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "elx/promptkit.hpp"
#include "elx/runtime.hpp"
#include "elx/task.hpp"
#include "elx/tensor.hpp"

namespace elx {

// Latency contract per request: ratios of the full model serving the
// uncompressed prompt.
struct Slo {
  double zeta_ttft = 1.0;
  double zeta_tpot = 1.0;

  bool valid() const {
    return zeta_ttft > 0.0 && zeta_ttft <= 1.0 && zeta_tpot > 0.0 && zeta_tpot <= 1.0;
  }
  bool operator==(const Slo&) const = default;
};

// The six operating points used for trace synthesis, tightest first.
std::vector<Slo> table3_slos();

struct Decision {
  int prompt_percent = 100;
  int model_percent = 100;
  bool operator==(const Decision&) const = default;
  auto operator<=>(const Decision&) const = default;
};

struct DecisionGrid {
  std::vector<int> prompt_percents;  // ascending
  std::vector<int> model_percents;   // ascending

  static DecisionGrid from_levels(const LevelTable& levels);
  bool contains(const Decision& d) const;
  size_t size() const { return prompt_percents.size() * model_percents.size(); }
};

// Affine fit of the two-stage latency law: TTFT ~ a*L*s + b over prompt
// length L and model fraction s, TPOT ~ c*s + d.
struct LatencyModel {
  double a = 0.0, b = 0.0;  // prefill
  double c = 0.0, d = 0.0;  // decode
  double ttft_mape = 0.0;   // fit residuals, median absolute percentage error
  double tpot_mape = 0.0;
  std::map<std::pair<int, int>, double> switch_cost;  // (from,to) percents -> seconds

  double predict_ttft(double compressed_len, double model_fraction) const {
    return a * compressed_len * model_fraction + b;
  }
  double predict_tpot(double model_fraction) const { return c * model_fraction + d; }
  double ttft_full(double prompt_len) const { return a * prompt_len + b; }
  double tpot_full() const { return c + d; }
  double switch_cost_for(int from, int to) const;
};

// Measurement source for calibration. The production implementation times
// the elastic runtime; tests substitute exact synthetic laws.
class Prober {
 public:
  virtual ~Prober() = default;
  virtual double prefill_seconds(int prompt_len, int model_percent) = 0;
  virtual double decode_step_seconds(int model_percent) = 0;
  virtual double switch_seconds(int from_percent, int to_percent) = 0;
};

class RuntimeProber : public Prober {
 public:
  RuntimeProber(ElasticRuntime& rt, uint64_t seed) : rt_(rt), seed_(seed) {}
  double prefill_seconds(int prompt_len, int model_percent) override;
  double decode_step_seconds(int model_percent) override;
  double switch_seconds(int from_percent, int to_percent) override;

 private:
  ElasticRuntime& rt_;
  uint64_t seed_;
};

struct CalibrateOptions {
  std::vector<int> probe_lengths = {32, 64, 128, 192};
  int repetitions = 5;
  int decode_steps = 16;  // steps timed per TPOT probe
};

// Least-squares fit over (probe length x level) measurements, plus the
// pairwise switch-cost table. Throws CalibrationError on a singular fit.
LatencyModel calibrate(Prober& prober, const std::vector<int>& probe_lengths,
                       const std::vector<int>& level_percents, int repetitions);

// include_switch adds the measured switch cost from `current_percent` to
// the decision's model level on top of the predicted TTFT.
bool feasible(const LatencyModel& lm, const Slo& slo, int prompt_len, const Decision& d,
              bool include_switch = false, int current_percent = 100);

// All feasible grid decisions, ordered by descending model level then
// descending prompt level.
std::vector<Decision> enumerate_feasible(const LatencyModel& lm, const DecisionGrid& grid,
                                         const Slo& slo, int prompt_len,
                                         bool include_switch = false,
                                         int current_percent = 100);

struct LabelledExample {
  uint64_t task_seed = 0;
  Slo slo;
  int prompt_len = 0;
  std::vector<double> features;
  Decision label;
  bool correct = false;   // label's answer matched groundtruth
  bool fallback = false;  // no feasible decision was correct; seeded-random label
};

// Lightest feasible decision whose greedy answer is correct; lexicographic
// on (model level, prompt level). Switch cost is excluded offline. Falls
// back to a seeded uniform-random feasible decision when nothing is
// correct. Throws InfeasibleSloError when the feasible set is empty.
LabelledExample label_one(ElasticRuntime& rt, const Scorer& scorer, const LatencyModel& lm,
                          const DecisionGrid& grid, const TaskInstance& inst,
                          uint64_t task_seed, const Slo& slo, uint64_t label_seed);

// SLO conditioning and prompt statistics as numeric policy features.
std::vector<double> policy_features(const Slo& slo, int prompt_len,
                                    const TokenScores& scores);
constexpr int kPolicyFeatureCount = 8;

// Two softmax heads over shared features: one classifies the prompt level,
// the other the model level. Output is always a member of the grid.
struct PolicyModel {
  DecisionGrid grid;
  std::vector<double> feat_mean, feat_scale;
  TensorD w_prompt;  // [n_prompt_levels, features]
  TensorD w_model;   // [n_model_levels, features]
  double train_accuracy = 0.0;

  Decision predict(const std::vector<double>& features) const;
};

struct PolicyTrainOptions {
  int epochs = 300;
  double lr = 0.25;
  uint64_t seed = 23;
};

PolicyModel train_policy(const std::vector<LabelledExample>& examples,
                         const DecisionGrid& grid, const PolicyTrainOptions& opts);

struct DecideResult {
  Decision decision;
  bool fallback_used = false;
};

// Policy prediction when feasible (switch cost included), otherwise a
// seeded-random member of the feasible set. Throws InfeasibleSloError when
// the set is empty.
DecideResult decide(const PolicyModel& policy, const LatencyModel& lm, const Slo& slo,
                    int prompt_len, const TokenScores& scores, int current_percent,
                    uint64_t fallback_seed);

// Everything the serving loop needs, as one signed file.
struct PolicyBundle {
  TaskParams task;
  Scorer scorer;
  PolicyModel policy;
  LatencyModel latency;
  DecisionGrid grid;
  uint64_t seed = 0;  // base seed for per-request fallback draws
};

void save_bundle(const PolicyBundle& bundle, const std::string& path);
PolicyBundle load_bundle(const std::string& path);

// Intermediate pipeline files used by the CLI.
void save_latency(const LatencyModel& lm, const DecisionGrid& grid, const std::string& path);
std::pair<LatencyModel, DecisionGrid> load_latency(const std::string& path);
void save_scorer(const Scorer& scorer, const std::string& path);
Scorer load_scorer(const std::string& path);
void save_labels(const std::vector<LabelledExample>& labels, const std::string& path);
std::vector<LabelledExample> load_labels(const std::string& path);

}  // namespace elx
