// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "elx/model.hpp"
#include "elx/task.hpp"

namespace elx {

// Low-rank side branch for one weight matrix: y += (x . a^T) . b^T.
// a: [rank, in_active], b: [out_active, rank].
template <typename T>
struct AdapterT {
  Tensor<T> a, b;
  bool present() const { return !a.empty(); }
  int64_t param_count() const { return a.numel() + b.numel(); }
};

template <typename T>
struct LayerAdaptersT {
  AdapterT<T> wq, wk, wv, wo, w_gate, w_up, w_down;
};

template <typename T>
struct AdapterSetT {
  int rank = 0;
  std::vector<LayerAdaptersT<T>> layers;

  bool empty() const { return layers.empty(); }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& la : layers) {
      for (const AdapterT<T>* ad :
           {&la.wq, &la.wk, &la.wv, &la.wo, &la.w_gate, &la.w_up, &la.w_down}) {
        n += ad->param_count();
      }
    }
    return n;
  }
  int64_t byte_size() const { return param_count() * static_cast<int64_t>(sizeof(T)); }
};

using Adapter = AdapterT<float>;
using LayerAdapters = LayerAdaptersT<float>;
using AdapterSet = AdapterSetT<float>;

// Per-request attention cache sized to the active head count of each layer.
struct KvCache {
  int level_percent = -1;  // runtime tag; -1 = unmanaged
  int seq_len = 0;
  std::vector<TensorF> k, v;  // per layer [capacity, active_attn_width]
  int capacity = 0;
  bool live = false;  // tracked by ElasticRuntime between begin/end

  bool matches(const ModelConfig& config, const ViewExtents& ext) const;
};

// Prompt processing. Returns logits for every position [T, vocab]; fills
// `cache` for the active units when provided. Throws InputError on an
// empty prompt or out-of-range token ids.
TensorF prefill(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                std::span<const int> tokens, KvCache* cache,
                const std::vector<char>* skip_layers = nullptr);

// One decode step; extends the cache by one position. Throws
// ConsistencyError if the cache was built under different extents.
TensorF decode_step(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                    KvCache& cache, int token,
                    const std::vector<char>* skip_layers = nullptr);

// Mean masked cross-entropy of the serving path over teacher-forced
// sequences; accumulated in double.
double eval_loss(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                 const std::vector<TrainSequence>& batch,
                 const std::vector<char>* skip_layers = nullptr);

// Greedy decode for one task instance; stops at EOS or after
// groundtruth-length steps. Returns the emitted answer tokens.
std::vector<int> greedy_answer(const Weights& w, const ViewExtents& ext,
                               const AdapterSet* adapters, const TaskInstance& inst);

}  // namespace elx
