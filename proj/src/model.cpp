// SPDX-License-Identifier: Apache-2.0
#include "elx/model.hpp"

#include <cmath>

#include "elx/rng.hpp"

namespace elx {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || head_dim < 1 || d_ff < 1 || vocab_size < 1) {
    throw InputError("model config: all counts must be >= 1");
  }
}

std::string to_string(const UnitId& u) {
  return "layer " + std::to_string(u.layer) +
         (u.kind == UnitKind::kAttentionHead ? " head " : " neuron ") +
         std::to_string(u.index);
}

std::vector<UnitId> enumerate_units(const ModelConfig& config) {
  config.validate();
  std::vector<UnitId> units;
  units.reserve(static_cast<size_t>(config.n_layers) * (config.n_heads + config.d_ff));
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) {
      units.push_back({l, UnitKind::kAttentionHead, h});
    }
    for (int j = 0; j < config.d_ff; ++j) {
      units.push_back({l, UnitKind::kMlpNeuron, j});
    }
  }
  return units;
}

template <typename T>
WeightsT<T> WeightsT<T>::init(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int64_t d = config.d_model();
  const int64_t aw = config.attn_width();
  const int64_t f = config.d_ff;
  const int64_t v = config.vocab_size;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = proj_std / std::sqrt(2.0 * config.n_layers);
  const double down_std = 1.0 / std::sqrt(static_cast<double>(f)) /
                          std::sqrt(2.0 * config.n_layers);

  WeightsT<T> w;
  w.config = config;
  w.embedding = Tensor<T>::randn({v, d}, rng, 0.05);
  w.lm_head = Tensor<T>::randn({v, d}, rng, proj_std);
  w.final_norm_g = Tensor<T>::full({d}, T(1));
  w.layers.resize(static_cast<size_t>(config.n_layers));
  for (auto& lw : w.layers) {
    lw.wq = Tensor<T>::randn({aw, d}, rng, proj_std);
    lw.wk = Tensor<T>::randn({aw, d}, rng, proj_std);
    lw.wv = Tensor<T>::randn({aw, d}, rng, proj_std);
    lw.wo = Tensor<T>::randn({aw, d}, rng, out_std);
    if (config.use_bias) {
      lw.bq = Tensor<T>::randn({aw}, rng, 0.02);
      lw.bk = Tensor<T>::randn({aw}, rng, 0.02);
      lw.bv = Tensor<T>::randn({aw}, rng, 0.02);
    }
    if (config.mlp_kind == MlpKind::kGated) {
      lw.w_gate = Tensor<T>::randn({f, d}, rng, proj_std);
      if (config.use_bias) lw.b_gate = Tensor<T>::randn({f}, rng, 0.02);
    }
    lw.w_up = Tensor<T>::randn({f, d}, rng, proj_std);
    if (config.use_bias) lw.b_up = Tensor<T>::randn({f}, rng, 0.02);
    lw.w_down = Tensor<T>::randn({f, d}, rng, down_std);
    lw.attn_norm_g = Tensor<T>::full({d}, T(1));
    lw.mlp_norm_g = Tensor<T>::full({d}, T(1));
  }
  return w;
}

template <typename T>
int64_t WeightsT<T>::param_count() const {
  int64_t n = 0;
  const_cast<WeightsT<T>*>(this)->for_each_tensor(
      [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
void WeightsT<T>::for_each_tensor(
    const std::function<void(const std::string&, Tensor<T>&)>& fn) {
  fn("embedding", embedding);
  fn("lm_head", lm_head);
  fn("final_norm_g", final_norm_g);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& lw = layers[l];
    fn(p + "wq", lw.wq);
    fn(p + "wk", lw.wk);
    fn(p + "wv", lw.wv);
    fn(p + "wo", lw.wo);
    if (!lw.bq.empty()) {
      fn(p + "bq", lw.bq);
      fn(p + "bk", lw.bk);
      fn(p + "bv", lw.bv);
    }
    if (!lw.w_gate.empty()) fn(p + "w_gate", lw.w_gate);
    if (!lw.b_gate.empty()) fn(p + "b_gate", lw.b_gate);
    fn(p + "w_up", lw.w_up);
    if (!lw.b_up.empty()) fn(p + "b_up", lw.b_up);
    fn(p + "w_down", lw.w_down);
    fn(p + "attn_norm_g", lw.attn_norm_g);
    fn(p + "mlp_norm_g", lw.mlp_norm_g);
  }
}

template <typename T>
void WeightsT<T>::for_each_tensor(
    const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
  const_cast<WeightsT<T>*>(this)->for_each_tensor(
      [&](const std::string& name, Tensor<T>& t) { fn(name, t); });
}

namespace {

template <typename T>
void zero_rows(Tensor<T>& t, int64_t row0, int64_t count) {
  if (t.empty()) return;
  if (t.rank() == 1) {
    for (int64_t i = 0; i < count; ++i) t[row0 + i] = T(0);
    return;
  }
  const int64_t n = t.dim(1);
  for (int64_t r = 0; r < count; ++r) {
    T* p = t.row(row0 + r);
    for (int64_t j = 0; j < n; ++j) p[j] = T(0);
  }
}

template <typename T>
double rows_grad_dot(const Tensor<T>& w, const Tensor<T>& g, int64_t row0, int64_t count) {
  if (w.empty()) return 0.0;
  double acc = 0.0;
  if (w.rank() == 1) {
    for (int64_t i = 0; i < count; ++i) {
      acc += static_cast<double>(w[row0 + i]) * static_cast<double>(g[row0 + i]);
    }
    return acc;
  }
  const int64_t n = w.dim(1);
  for (int64_t r = 0; r < count; ++r) {
    const T* wp = w.row(row0 + r);
    const T* gp = g.row(row0 + r);
    for (int64_t j = 0; j < n; ++j) {
      acc += static_cast<double>(wp[j]) * static_cast<double>(gp[j]);
    }
  }
  return acc;
}

// Tensors owned by a unit, expressed as (tensor, first row, row count).
template <typename T, typename Fn>
void visit_unit_slices(WeightsT<T>& w, const UnitId& unit, Fn&& fn) {
  auto& lw = w.layers.at(static_cast<size_t>(unit.layer));
  if (unit.kind == UnitKind::kAttentionHead) {
    const int64_t hd = w.config.head_dim;
    const int64_t r0 = static_cast<int64_t>(unit.index) * hd;
    fn(lw.wq, r0, hd);
    fn(lw.wk, r0, hd);
    fn(lw.wv, r0, hd);
    fn(lw.wo, r0, hd);
    fn(lw.bq, r0, hd);
    fn(lw.bk, r0, hd);
    fn(lw.bv, r0, hd);
  } else {
    const int64_t r0 = unit.index;
    fn(lw.w_gate, r0, 1);
    fn(lw.b_gate, r0, 1);
    fn(lw.w_up, r0, 1);
    fn(lw.b_up, r0, 1);
    fn(lw.w_down, r0, 1);
  }
}

}  // namespace

template <typename T>
void zero_unit(WeightsT<T>& w, const UnitId& unit) {
  visit_unit_slices(w, unit, [](Tensor<T>& t, int64_t r0, int64_t count) {
    zero_rows(t, r0, count);
  });
}

template <typename T>
double unit_grad_dot_weight(
    const WeightsT<T>& w, const UnitId& unit,
    const std::function<const Tensor<T>&(const Tensor<T>&)>& grad_of) {
  double acc = 0.0;
  visit_unit_slices(const_cast<WeightsT<T>&>(w), unit,
                    [&](Tensor<T>& t, int64_t r0, int64_t count) {
                      if (t.empty()) return;
                      acc += rows_grad_dot(t, grad_of(t), r0, count);
                    });
  return acc;
}

namespace {

template <typename T>
Tensor<T> permute_rows(const Tensor<T>& t, const std::vector<int>& order, int64_t group) {
  if (t.empty()) return t;
  Tensor<T> out(t.shape());
  const int64_t n = t.rank() == 1 ? 1 : t.dim(1);
  for (size_t slot = 0; slot < order.size(); ++slot) {
    const int64_t src0 = static_cast<int64_t>(order[slot]) * group;
    const int64_t dst0 = static_cast<int64_t>(slot) * group;
    for (int64_t r = 0; r < group; ++r) {
      const T* sp = t.data() + (src0 + r) * n;
      T* dp = out.data() + (dst0 + r) * n;
      for (int64_t j = 0; j < n; ++j) dp[j] = sp[j];
    }
  }
  return out;
}

void check_permutation(const std::vector<int>& order, int n) {
  if (static_cast<int>(order.size()) != n) throw InputError("permutation size mismatch");
  std::vector<char> seen(static_cast<size_t>(n), 0);
  for (int v : order) {
    if (v < 0 || v >= n || seen[static_cast<size_t>(v)]) {
      throw InputError("order is not a permutation");
    }
    seen[static_cast<size_t>(v)] = 1;
  }
}

}  // namespace

template <typename T>
void permute_block(WeightsT<T>& w, int layer, UnitKind kind, const std::vector<int>& order) {
  auto& lw = w.layers.at(static_cast<size_t>(layer));
  if (kind == UnitKind::kAttentionHead) {
    check_permutation(order, w.config.n_heads);
    const int64_t hd = w.config.head_dim;
    lw.wq = permute_rows(lw.wq, order, hd);
    lw.wk = permute_rows(lw.wk, order, hd);
    lw.wv = permute_rows(lw.wv, order, hd);
    lw.wo = permute_rows(lw.wo, order, hd);
    lw.bq = permute_rows(lw.bq, order, hd);
    lw.bk = permute_rows(lw.bk, order, hd);
    lw.bv = permute_rows(lw.bv, order, hd);
  } else {
    check_permutation(order, w.config.d_ff);
    lw.w_gate = permute_rows(lw.w_gate, order, 1);
    lw.b_gate = permute_rows(lw.b_gate, order, 1);
    lw.w_up = permute_rows(lw.w_up, order, 1);
    lw.b_up = permute_rows(lw.b_up, order, 1);
    lw.w_down = permute_rows(lw.w_down, order, 1);
  }
}

namespace {

template <typename T>
Tensor<T> head_rows(const Tensor<T>& t, int64_t rows) {
  if (t.empty()) return t;
  if (t.rank() == 1) {
    return Tensor<T>({rows}, std::vector<T>(t.data(), t.data() + rows));
  }
  const int64_t n = t.dim(1);
  return Tensor<T>({rows, n}, std::vector<T>(t.data(), t.data() + rows * n));
}

}  // namespace

template <typename T>
WeightsT<T> slice_weights(const WeightsT<T>& w, const ViewExtents& ext) {
  if (ext.layers.size() != w.layers.size()) {
    throw ConsistencyError("slice_weights: extents layer count mismatch");
  }
  WeightsT<T> out;
  out.config = w.config;
  out.embedding = w.embedding;
  out.lm_head = w.lm_head;
  out.final_norm_g = w.final_norm_g;
  out.layers.resize(w.layers.size());
  const int64_t hd = w.config.head_dim;
  for (size_t l = 0; l < w.layers.size(); ++l) {
    const auto& s = w.layers[l];
    auto& d = out.layers[l];
    const int64_t aw = static_cast<int64_t>(ext.layers[l].heads) * hd;
    const int64_t an = ext.layers[l].neurons;
    d.wq = head_rows(s.wq, aw);
    d.wk = head_rows(s.wk, aw);
    d.wv = head_rows(s.wv, aw);
    d.wo = head_rows(s.wo, aw);
    d.bq = head_rows(s.bq, aw);
    d.bk = head_rows(s.bk, aw);
    d.bv = head_rows(s.bv, aw);
    d.w_gate = head_rows(s.w_gate, an);
    d.b_gate = head_rows(s.b_gate, an);
    d.w_up = head_rows(s.w_up, an);
    d.b_up = head_rows(s.b_up, an);
    d.w_down = head_rows(s.w_down, an);
    d.attn_norm_g = s.attn_norm_g;
    d.mlp_norm_g = s.mlp_norm_g;
  }
  return out;
}

template struct WeightsT<float>;
template struct WeightsT<double>;

template WeightsT<float> slice_weights<float>(const WeightsT<float>&, const ViewExtents&);
template WeightsT<double> slice_weights<double>(const WeightsT<double>&, const ViewExtents&);

template void zero_unit<float>(WeightsT<float>&, const UnitId&);
template void zero_unit<double>(WeightsT<double>&, const UnitId&);
template double unit_grad_dot_weight<float>(
    const WeightsT<float>&, const UnitId&,
    const std::function<const Tensor<float>&(const Tensor<float>&)>&);
template double unit_grad_dot_weight<double>(
    const WeightsT<double>&, const UnitId&,
    const std::function<const Tensor<double>&(const Tensor<double>&)>&);
template void permute_block<float>(WeightsT<float>&, int, UnitKind, const std::vector<int>&);
template void permute_block<double>(WeightsT<double>&, int, UnitKind,
                                    const std::vector<int>&);

}  // namespace elx
