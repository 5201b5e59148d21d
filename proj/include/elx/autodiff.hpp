// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "elx/tensor.hpp"

namespace elx {

// Reverse-mode tape over the fixed op set a decoder-only transformer needs.
// Values are held by the tape; registered weights are identified by the
// address of their backing Tensor and receive accumulated gradients after
// backward(). Single-threaded by design; replaying the same inputs yields
// bitwise-identical values and gradients.
template <typename T>
class Tape {
 public:
  using Id = int32_t;

  // Leaf that never receives a gradient (fixed weights, inputs).
  Id constant(Tensor<T> value);

  // Registered weight: the tensor's current contents are copied in, and
  // grad(&weight) is defined after backward().
  Id param(const Tensor<T>& weight);

  // out[t,:] = table[ids[t],:]
  Id embedding(Id table, const std::vector<int>& ids);

  Id matmul(Id a, Id b);     // a[m,k] x b[k,n]
  Id matmul_nt(Id a, Id b);  // a[m,k] x b[n,k]^T  (weights stored row=output)
  Id add(Id a, Id b);        // same shape
  Id add_row(Id x, Id bias); // bias[n] broadcast over rows of x[m,n]
  Id mul(Id a, Id b);        // elementwise
  Id scale(Id x, T s);
  Id silu(Id x);
  Id gelu(Id x);
  Id rmsnorm(Id x, Id gain, T eps);

  // Rotary position embedding applied per head over adjacent pairs.
  Id rope(Id x, int head_dim, int pos_offset, double base);

  // Multi-head causal self-attention over a full sequence.
  // q,k,v: [T, n_heads*head_dim]; row i may attend to rows j <= i.
  Id causal_attention(Id q, Id k, Id v, int n_heads);

  // Mean cross-entropy over rows where mask != 0; returns a scalar node.
  Id cross_entropy_mean(Id logits, const std::vector<int>& targets,
                        const std::vector<char>& mask);

  const Tensor<T>& value(Id id) const { return nodes_[id].value; }
  T scalar(Id id) const;

  void backward(Id loss);

  // Gradient of the last backward() w.r.t. a registered weight.
  const Tensor<T>& grad(const Tensor<T>& weight) const;
  bool registered(const Tensor<T>& weight) const {
    return params_.count(&weight) != 0;
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    bool needs_grad = false;
    std::function<void(Tape&, const Tensor<T>&)> backward_fn;  // upstream grad
  };

  Id push(Tensor<T> value, bool needs_grad,
          std::function<void(Tape&, const Tensor<T>&)> fn);
  bool needs(Id id) const { return nodes_[id].needs_grad; }
  Tensor<T>& grad_buf(Id id);
  void accumulate(Id id, const Tensor<T>& g);

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  std::unordered_map<const Tensor<T>*, Id> params_;
  bool ran_backward_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace elx
