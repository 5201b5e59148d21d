// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "elx/checkpoint.hpp"
#include "elx/engine.hpp"

namespace elx {

struct SwitchReport {
  int from_percent = 0;
  int to_percent = 0;
  uint64_t weight_bytes_copied = 0;   // always 0 for ElasticRuntime
  uint64_t adapter_bytes_touched = 0; // detached + attached adapter footprint
  double wall_seconds = 0.0;
};

// A level exposed as extents over the reordered weights plus its adapter
// set. Holds no weight storage of its own; it must not outlive the
// runtime's checkpoint.
struct LevelView {
  int percent = 0;
  ViewExtents extents;
  const AdapterSet* adapters = nullptr;  // nullptr when the level has none
};

// Online serving state: one checkpoint, one active level, one request at a
// time. Level switches move extents and adapter pointers only; the weight
// blob is never copied, and a counter proves it.
class ElasticRuntime {
 public:
  explicit ElasticRuntime(ElasticCheckpoint ckpt);

  const ElasticCheckpoint& checkpoint() const { return ckpt_; }
  int current_percent() const { return current_; }
  const LevelEntry& current_level() const { return ckpt_.levels.at(current_); }

  LevelView make_view(int percent) const;  // throws LookupError on unknown level
  LevelView current_view() const { return make_view(current_); }

  // throws BusyError if a request is in flight
  SwitchReport switch_level(int percent);

  // Request lifecycle. begin_request throws BusyError while another
  // request is live; decode under a stale cache throws ConsistencyError.
  KvCache begin_request();
  TensorF prefill(KvCache& cache, std::span<const int> tokens);
  TensorF decode_step(KvCache& cache, int token);
  void end_request(KvCache& cache);

  uint64_t weight_bytes_copied_total() const { return weight_bytes_copied_; }
  uint64_t switch_count() const { return switch_count_; }
  double switch_seconds_total() const { return switch_seconds_; }

  // backbone plus every level's adapters, all resident for switching
  int64_t resident_bytes() const;

 private:
  ElasticCheckpoint ckpt_;
  int current_ = 100;
  int live_requests_ = 0;
  uint64_t weight_bytes_copied_ = 0;
  uint64_t switch_count_ = 0;
  double switch_seconds_ = 0.0;
};

// What switching costs without the importance-ordered contiguous layout:
// every active weight byte is copied into compact per-level buffers before
// the dense kernels can run. Used as the measured baseline.
class NaiveRelayoutBaseline {
 public:
  explicit NaiveRelayoutBaseline(const ElasticCheckpoint& ckpt);

  SwitchReport switch_level(int percent);
  const Weights& compact() const { return compact_; }

 private:
  const ElasticCheckpoint* ckpt_;
  Weights compact_;
  int current_ = -1;
};

}  // namespace elx
