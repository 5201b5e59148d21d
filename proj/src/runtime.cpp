// SPDX-License-Identifier: Apache-2.0
#include "elx/runtime.hpp"

#include <chrono>
#include <cstring>

namespace elx {

namespace {
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}
}  // namespace

ElasticRuntime::ElasticRuntime(ElasticCheckpoint ckpt) : ckpt_(std::move(ckpt)) {
  if (ckpt_.levels.levels.empty()) throw InputError("checkpoint has no levels");
  current_ = ckpt_.levels.full_percent();
}

LevelView ElasticRuntime::make_view(int percent) const {
  LevelView view;
  view.percent = percent;
  view.extents = ckpt_.extents_for(percent);  // throws LookupError when unknown
  view.adapters = ckpt_.adapters_for(percent);
  return view;
}

SwitchReport ElasticRuntime::switch_level(int percent) {
  if (live_requests_ > 0) {
    throw BusyError("cannot switch levels while a request is in flight");
  }
  const auto t0 = Clock::now();
  SwitchReport report;
  report.from_percent = current_;
  report.to_percent = percent;
  if (percent == current_) {
    report.wall_seconds = seconds_since(t0);
    return report;
  }
  if (!ckpt_.levels.has(percent)) {
    throw LookupError("unknown model level " + std::to_string(percent) + "%");
  }
  // detach the old adapter, move the extents, attach the new adapter; the
  // weights themselves are untouched
  const AdapterSet* old_set = ckpt_.adapters_for(current_);
  const AdapterSet* new_set = ckpt_.adapters_for(percent);
  if (old_set) report.adapter_bytes_touched += static_cast<uint64_t>(old_set->byte_size());
  if (new_set) report.adapter_bytes_touched += static_cast<uint64_t>(new_set->byte_size());
  current_ = percent;
  report.weight_bytes_copied = 0;
  weight_bytes_copied_ += report.weight_bytes_copied;
  report.wall_seconds = seconds_since(t0);
  switch_seconds_ += report.wall_seconds;
  switch_count_ += 1;
  return report;
}

KvCache ElasticRuntime::begin_request() {
  if (live_requests_ > 0) throw BusyError("another request is already in flight");
  live_requests_ += 1;
  KvCache cache;
  cache.level_percent = current_;
  cache.live = true;
  return cache;
}

TensorF ElasticRuntime::prefill(KvCache& cache, std::span<const int> tokens) {
  if (!cache.live) throw ConsistencyError("prefill on a finished request");
  cache.level_percent = current_;
  const LevelView view = current_view();
  return elx::prefill(ckpt_.weights, view.extents, view.adapters, tokens, &cache);
}

TensorF ElasticRuntime::decode_step(KvCache& cache, int token) {
  if (!cache.live) throw ConsistencyError("decode on a finished request");
  if (cache.level_percent != current_) {
    throw ConsistencyError("level switched since prefill; caches are per-level");
  }
  const LevelView view = current_view();
  return elx::decode_step(ckpt_.weights, view.extents, view.adapters, cache, token);
}

void ElasticRuntime::end_request(KvCache& cache) {
  if (!cache.live) return;
  cache.live = false;
  live_requests_ -= 1;
}

int64_t ElasticRuntime::resident_bytes() const {
  int64_t total = ckpt_.backbone_byte_size();
  for (const auto& [pct, set] : ckpt_.adapters) total += set.byte_size();
  return total;
}

NaiveRelayoutBaseline::NaiveRelayoutBaseline(const ElasticCheckpoint& ckpt)
    : ckpt_(&ckpt), compact_(ckpt.weights) {
  // destination buffers preallocated at full size so the measured switch
  // cost is copying alone, the most favorable case for this baseline
}

SwitchReport NaiveRelayoutBaseline::switch_level(int percent) {
  const auto t0 = Clock::now();
  SwitchReport report;
  report.from_percent = current_;
  report.to_percent = percent;
  const ViewExtents ext = ckpt_->extents_for(percent);
  const Weights& src = ckpt_->weights;
  const int hd = src.config.head_dim;

  // re-layout: copy the active slice of every elasticized tensor into the
  // compact buffers a dense kernel needs when sub-model weights are not
  // already contiguous; non-sliced tensors need no movement
  uint64_t bytes = 0;
  auto copy_rows = [&](const TensorF& from, TensorF& to, int64_t rows) {
    if (from.empty() || rows == 0) return;
    const int64_t cols = from.rank() == 1 ? 1 : from.dim(1);
    const size_t n = static_cast<size_t>(rows * cols) * sizeof(float);
    std::memcpy(to.data(), from.data(), n);
    bytes += n;
  };
  for (size_t l = 0; l < src.layers.size(); ++l) {
    const auto& s = src.layers[l];
    auto& d = compact_.layers[l];
    const int64_t aw = static_cast<int64_t>(ext.layers[l].heads) * hd;
    const int64_t an = ext.layers[l].neurons;
    copy_rows(s.wq, d.wq, aw);
    copy_rows(s.wk, d.wk, aw);
    copy_rows(s.wv, d.wv, aw);
    copy_rows(s.wo, d.wo, aw);
    copy_rows(s.bq, d.bq, aw);
    copy_rows(s.bk, d.bk, aw);
    copy_rows(s.bv, d.bv, aw);
    copy_rows(s.w_gate, d.w_gate, an);
    copy_rows(s.b_gate, d.b_gate, an);
    copy_rows(s.w_up, d.w_up, an);
    copy_rows(s.b_up, d.b_up, an);
    copy_rows(s.w_down, d.w_down, an);
  }

  if (const AdapterSet* set = ckpt_->adapters_for(percent)) {
    report.adapter_bytes_touched = static_cast<uint64_t>(set->byte_size());
  }
  current_ = percent;
  report.weight_bytes_copied = bytes;
  report.wall_seconds = seconds_since(t0);
  return report;
}

}  // namespace elx
