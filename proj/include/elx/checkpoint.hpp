// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "elx/engine.hpp"
#include "elx/model.hpp"

namespace elx {

// Importance per unit, aligned with enumerate_units coverage.
using ImportanceTable = std::map<UnitId, double>;

struct LevelEntry {
  int percent = 0;       // 20..100
  double fraction = 0.0; // percent / 100
  std::vector<LayerExtents> layers;
};

struct LevelTable {
  std::vector<LevelEntry> levels;  // ascending by percent

  bool has(int percent) const;
  const LevelEntry& at(int percent) const;  // throws LookupError
  int full_percent() const { return levels.back().percent; }
};

constexpr int kCheckpointFormatVersion = 1;

// Reordered weights plus everything needed to serve any level as a
// contiguous leading slice: unit order, importances, anchors, level table
// and per-level recovery adapters.
struct ElasticCheckpoint {
  int format_version = kCheckpointFormatVersion;
  Weights weights;  // reordered, serving layout
  std::vector<std::vector<int>> head_order;    // per layer: original index per slot
  std::vector<std::vector<int>> neuron_order;  // per layer
  ImportanceTable importance;
  std::set<int> anchors;
  LevelTable levels;
  int adapter_rank = 0;
  std::map<int, AdapterSet> adapters;  // keyed by level percent

  const ModelConfig& config() const { return weights.config; }
  ViewExtents extents_for(int percent) const;
  const AdapterSet* adapters_for(int percent) const;  // nullptr when absent
  int64_t backbone_param_count() const { return weights.param_count(); }
  int64_t adapter_param_count(int percent) const;
  int64_t backbone_byte_size() const {
    return backbone_param_count() * static_cast<int64_t>(sizeof(float));
  }
};

// Container format: magic + version + JSON manifest + raw little-endian
// float32 blob addressed by (tensor name -> offset, shape) manifest
// entries. Round-trips are bit-exact; the manifest carries an FNV-1a
// digest of the blob that load verifies.
void save_checkpoint(const ElasticCheckpoint& ckpt, const std::string& path);
ElasticCheckpoint load_checkpoint(const std::string& path);

// Same container with a base-model manifest (config + tensors only).
void save_base_model(const Weights& w, const std::string& path);
Weights load_base_model(const std::string& path);

uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull);
std::string fnv1a64_hex_of(const std::string& s);

}  // namespace elx
