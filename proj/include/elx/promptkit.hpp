// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "elx/task.hpp"

namespace elx {

// Per-token retain probabilities, aligned with the prompt.
struct TokenScores {
  std::vector<double> values;  // each in [0, 1]
};

// Pluggable token scorer. The learned variant is a logistic model over
// structural features of the prompt (token class, position, match/distance
// to the queried key); heuristic is a task-aware baseline; uniform scores
// every token the same. All are deterministic functions of the prompt.
class Scorer {
 public:
  enum class Kind { kUniform, kHeuristic, kLearned };

  Scorer() = default;  // uniform
  static Scorer uniform();
  static Scorer heuristic(const TaskParams& task);
  static Scorer learned(const TaskParams& task, std::vector<double> weights);

  Kind kind() const { return kind_; }
  const TaskParams& task() const { return task_; }
  const std::vector<double>& weights() const { return weights_; }

  TokenScores score(std::span<const int> prompt) const;

  static constexpr int kFeatureCount = 10;
  // feature vector for one prompt position (exposed for training/tests)
  static void features(const TaskParams& task, std::span<const int> prompt, size_t pos,
                       double* out);

 private:
  Kind kind_ = Kind::kUniform;
  TaskParams task_;
  std::vector<double> weights_;
};

struct ScorerTrainOptions {
  int n_prompts = 400;
  int epochs = 30;
  double lr = 0.5;
  uint64_t seed = 17;
};

// Logistic regression on generator-provided retain labels.
Scorer train_scorer(const TaskParams& task, const ScorerTrainOptions& opts);

// Keeps the top-scoring tokens at the requested retention level as an
// order-preserving subsequence. Ties break toward earlier positions.
// Target length is max(1, floor(level * len)); positions flagged in
// `always_keep` are retained regardless of score.
std::vector<int> compress(std::span<const int> prompt, const TokenScores& scores,
                          double level, const std::vector<char>* always_keep = nullptr);

// Indices kept by compress, in ascending order (used by tests and replay).
std::vector<size_t> compress_indices(size_t prompt_len, const TokenScores& scores,
                                     double level,
                                     const std::vector<char>* always_keep = nullptr);

// Structural mask for a task prompt: delimiters the compressor must keep.
std::vector<char> structural_mask(std::span<const int> prompt);

}  // namespace elx
