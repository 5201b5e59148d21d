// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <vector>

#include "elx/checkpoint.hpp"
#include "elx/engine.hpp"
#include "elx/model.hpp"
#include "elx/task.hpp"

namespace elx {

using CalibrationBatch = std::vector<TaskInstance>;

// Estimated unit importance: |sum over the unit's elements of grad*weight|,
// gradients accumulated over all calibration batches in float64.
ImportanceTable profile_importance(const Weights& w,
                                   const std::vector<CalibrationBatch>& batches);

// Layer importance is the loss increase when the layer's attention+MLP
// contribution is skipped (residual passthrough). Returns the top
// ceil(anchor_fraction * n_layers) layers.
std::set<int> detect_anchors(const Weights& w, const std::vector<CalibrationBatch>& batches,
                             double anchor_fraction);

// Per-level retention. Non-anchor retention ratio r = (S*T - A)/(T - A);
// counts are round-half-up with a floor of one unit, then running maxima
// across levels restore prefix nesting after rounding.
LevelTable build_level_table(const ModelConfig& config, const std::set<int>& anchors,
                             const std::vector<double>& fractions);

std::vector<double> default_fractions();  // 0.2 .. 1.0 step 0.1

// One-shot re-layout: within every non-anchor block units are stored in
// descending importance order; anchor layers keep their original order.
// Returns a checkpoint with empty adapter slots.
ElasticCheckpoint reorder_units(const Weights& w, const ImportanceTable& importance,
                                const std::set<int>& anchors, const LevelTable& levels);

struct AdapterTrainOptions {
  int rank = 8;
  int steps = 150;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
  bool verbose = false;
};

// Trains the low-rank recovery branch for one level on the frozen prefix
// sub-model. steps == 0 returns the zero-initialized branch (b = 0), which
// leaves the sub-model output unchanged.
AdapterSet train_adapters(const ElasticCheckpoint& ckpt, int percent,
                          const std::vector<TaskInstance>& recovery,
                          const AdapterTrainOptions& opts);

struct ElastifyOptions {
  double anchor_fraction = 0.15;
  std::vector<double> fractions;  // empty = default_fractions()
  int calibration_batches = 8;
  int batch_instances = 8;
  uint64_t calibration_seed = 101;
  AdapterTrainOptions adapter;
  bool train_recovery = true;
  int recovery_instances = 256;
  bool verbose = false;
};

// Full offline pipeline: profile -> anchors -> reorder -> levels -> adapters.
ElasticCheckpoint elastify(const Weights& w, const TaskParams& task,
                           const ElastifyOptions& opts);

}  // namespace elx
