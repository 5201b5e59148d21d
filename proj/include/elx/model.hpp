// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "elx/tensor.hpp"

namespace elx {

enum class MlpKind { kPlain, kGated };

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 8;
  int head_dim = 32;
  int d_ff = 1024;
  int vocab_size = 80;
  MlpKind mlp_kind = MlpKind::kGated;
  bool use_rope = true;
  bool use_bias = false;
  uint64_t seed = 0;

  int d_model() const { return n_heads * head_dim; }
  int attn_width() const { return n_heads * head_dim; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class UnitKind : uint8_t { kAttentionHead = 0, kMlpNeuron = 1 };

// Identity of one permutation-consistent unit: an attention head (columns
// of Q/K/V plus the matching rows of O) or an MLP neuron (up/gate column
// plus the matching down row).
struct UnitId {
  int layer = 0;
  UnitKind kind = UnitKind::kAttentionHead;
  int index = 0;

  auto operator<=>(const UnitId&) const = default;
};

std::string to_string(const UnitId& u);

// All units of a model, in canonical order (layer, heads then neurons, index).
std::vector<UnitId> enumerate_units(const ModelConfig& config);

// Active widths per layer. Anchor layers keep full counts at every level.
struct LayerExtents {
  int heads = 0;
  int neurons = 0;
  bool operator==(const LayerExtents&) const = default;
};

struct ViewExtents {
  std::vector<LayerExtents> layers;

  static ViewExtents full(const ModelConfig& config) {
    ViewExtents e;
    e.layers.assign(static_cast<size_t>(config.n_layers),
                    LayerExtents{config.n_heads, config.d_ff});
    return e;
  }
  bool operator==(const ViewExtents&) const = default;
};

// Every tensor that can be sliced at serving time stores its unit axis as
// axis 0, so an active sub-model is a contiguous leading slice of the
// buffer:
//   wq/wk/wv:        [attn_width, d_model]  row = output dim (head-major)
//   wo:              [attn_width, d_model]  row = input dim  (head-major)
//   w_up/w_gate:     [d_ff, d_model]        row = neuron output
//   w_down:          [d_ff, d_model]        row = neuron input
//   bq/bk/bv:        [attn_width]
//   b_up/b_gate:     [d_ff]
template <typename T>
struct LayerWeightsT {
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> bq, bk, bv;        // empty unless use_bias
  Tensor<T> w_gate;            // empty unless gated
  Tensor<T> b_gate;
  Tensor<T> w_up, w_down;
  Tensor<T> b_up;
  Tensor<T> attn_norm_g, mlp_norm_g;  // rmsnorm gains [d_model]
};

template <typename T>
struct WeightsT {
  ModelConfig config;
  Tensor<T> embedding;     // [vocab, d_model]
  Tensor<T> lm_head;       // [vocab, d_model], logits = x . lm_head^T
  Tensor<T> final_norm_g;  // [d_model]
  std::vector<LayerWeightsT<T>> layers;

  static WeightsT init(const ModelConfig& config);

  template <typename U>
  WeightsT<U> cast() const {
    WeightsT<U> out;
    out.config = config;
    out.embedding = embedding.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    out.final_norm_g = final_norm_g.template cast<U>();
    out.layers.resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& s = layers[i];
      auto& d = out.layers[i];
      d.wq = s.wq.template cast<U>();
      d.wk = s.wk.template cast<U>();
      d.wv = s.wv.template cast<U>();
      d.wo = s.wo.template cast<U>();
      if (!s.bq.empty()) {
        d.bq = s.bq.template cast<U>();
        d.bk = s.bk.template cast<U>();
        d.bv = s.bv.template cast<U>();
      }
      if (!s.w_gate.empty()) {
        d.w_gate = s.w_gate.template cast<U>();
        if (!s.b_gate.empty()) d.b_gate = s.b_gate.template cast<U>();
      }
      d.w_up = s.w_up.template cast<U>();
      d.w_down = s.w_down.template cast<U>();
      if (!s.b_up.empty()) d.b_up = s.b_up.template cast<U>();
      d.attn_norm_g = s.attn_norm_g.template cast<U>();
      d.mlp_norm_g = s.mlp_norm_g.template cast<U>();
    }
    return out;
  }

  int64_t param_count() const;

  // Visits every tensor in a stable order with its canonical name
  // ("embedding", "layers.0.wq", ...). The order defines the checkpoint
  // blob layout and the optimizer slot order.
  void for_each_tensor(const std::function<void(const std::string&, Tensor<T>&)>& fn);
  void for_each_tensor(
      const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;
};

using Weights = WeightsT<float>;
using WeightsD = WeightsT<double>;

// Zero all weights owned by one unit (head slices or neuron row/column).
template <typename T>
void zero_unit(WeightsT<T>& w, const UnitId& unit);

// Sum of grad*weight over every element owned by a unit. `grad_of` must
// return the gradient tensor matching a given weight tensor.
template <typename T>
double unit_grad_dot_weight(
    const WeightsT<T>& w, const UnitId& unit,
    const std::function<const Tensor<T>&(const Tensor<T>&)>& grad_of);

// Re-lay out one block's units: order[new_slot] = old_index. Applies to all
// tensors the block's units own. Order must be a permutation.
template <typename T>
void permute_block(WeightsT<T>& w, int layer, UnitKind kind, const std::vector<int>& order);

// Physically extracts a dense sub-model: every sliced tensor is copied down
// to its active leading rows. Offline/test helper; the serving path never
// calls this.
template <typename T>
WeightsT<T> slice_weights(const WeightsT<T>& w, const ViewExtents& ext);

extern template struct WeightsT<float>;
extern template struct WeightsT<double>;

}  // namespace elx
