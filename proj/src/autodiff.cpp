// SPDX-License-Identifier: Apache-2.0
#include "elx/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace elx {

namespace {

template <typename T>
void rope_rotate(const T* in, T* out, int64_t rows, int64_t width, int head_dim,
                 int pos_offset, double base, bool invert) {
  const int half = head_dim / 2;
  for (int64_t t = 0; t < rows; ++t) {
    const double pos = static_cast<double>(t + pos_offset);
    for (int64_t h = 0; h * head_dim < width; ++h) {
      const T* src = in + t * width + h * head_dim;
      T* dst = out + t * width + h * head_dim;
      for (int i = 0; i < half; ++i) {
        const double theta = pos * std::pow(base, -2.0 * i / head_dim);
        const double c = std::cos(theta);
        const double s = invert ? -std::sin(theta) : std::sin(theta);
        const double x0 = static_cast<double>(src[2 * i]);
        const double x1 = static_cast<double>(src[2 * i + 1]);
        dst[2 * i] = static_cast<T>(x0 * c - x1 * s);
        dst[2 * i + 1] = static_cast<T>(x0 * s + x1 * c);
      }
    }
  }
}

}  // namespace

template <typename T>
typename Tape<T>::Id Tape<T>::push(Tensor<T> value, bool needs_grad,
                                   std::function<void(Tape&, const Tensor<T>&)> fn) {
  nodes_.push_back(Node{std::move(value), needs_grad, std::move(fn)});
  grads_.emplace_back();
  return static_cast<Id>(nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad_buf(Id id) {
  if (grads_[id].empty() && nodes_[id].value.numel() > 0) {
    grads_[id] = Tensor<T>(nodes_[id].value.shape());
  }
  return grads_[id];
}

template <typename T>
void Tape<T>::accumulate(Id id, const Tensor<T>& g) {
  Tensor<T>& buf = grad_buf(id);
  T* dst = buf.data();
  const T* src = g.data();
  const int64_t n = buf.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <typename T>
typename Tape<T>::Id Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false, nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::param(const Tensor<T>& weight) {
  auto it = params_.find(&weight);
  if (it != params_.end()) return it->second;
  Id id = push(Tensor<T>(weight.shape(), std::vector<T>(weight.span().begin(),
                                                        weight.span().end())),
               true, nullptr);
  params_.emplace(&weight, id);
  return id;
}

template <typename T>
typename Tape<T>::Id Tape<T>::embedding(Id table, const std::vector<int>& ids) {
  const Tensor<T>& tab = nodes_[table].value;
  const int64_t d = tab.dim(1);
  Tensor<T> out({static_cast<int64_t>(ids.size()), d});
  for (size_t t = 0; t < ids.size(); ++t) {
    const T* src = tab.row(ids[t]);
    T* dst = out.row(static_cast<int64_t>(t));
    for (int64_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  const bool ng = needs(table);
  std::vector<int> ids_copy = ids;
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [table, ids_copy, d](Tape& tp, const Tensor<T>& g) {
                         Tensor<T>& gt = tp.grad_buf(table);
                         for (size_t t = 0; t < ids_copy.size(); ++t) {
                           T* dst = gt.row(ids_copy[t]);
                           const T* src = g.row(static_cast<int64_t>(t));
                           for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                         }
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::matmul(Id a, Id b) {
  const Tensor<T>& av = nodes_[a].value;
  const Tensor<T>& bv = nodes_[b].value;
  if (av.dim(1) != bv.dim(0)) throw DimensionError("tape matmul dimension mismatch");
  const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  const bool ng = needs(a) || needs(b);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [a, b, m, k, n](Tape& tp, const Tensor<T>& g) {
                         if (tp.needs(a)) {
                           Tensor<T> da({m, k});
                           kernels::matmul_nt(g.data(), tp.value(b).data(), da.data(), m, n,
                                              k);
                           tp.accumulate(a, da);
                         }
                         if (tp.needs(b)) {
                           Tensor<T> db({k, n});
                           kernels::matmul_tn(tp.value(a).data(), g.data(), db.data(), m, k,
                                              n);
                           tp.accumulate(b, db);
                         }
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::matmul_nt(Id a, Id b) {
  const Tensor<T>& av = nodes_[a].value;
  const Tensor<T>& bv = nodes_[b].value;
  if (av.dim(1) != bv.dim(1)) throw DimensionError("tape matmul_nt dimension mismatch");
  const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor<T> out({m, n});
  kernels::matmul_nt(av.data(), bv.data(), out.data(), m, k, n);
  const bool ng = needs(a) || needs(b);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [a, b, m, k, n](Tape& tp, const Tensor<T>& g) {
                         if (tp.needs(a)) {
                           Tensor<T> da({m, k});
                           kernels::matmul(g.data(), tp.value(b).data(), da.data(), m, n, k);
                           tp.accumulate(a, da);
                         }
                         if (tp.needs(b)) {
                           Tensor<T> db({n, k});
                           kernels::matmul_tn(g.data(), tp.value(a).data(), db.data(), m, n,
                                              k);
                           tp.accumulate(b, db);
                         }
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::add(Id a, Id b) {
  const Tensor<T>& av = nodes_[a].value;
  const Tensor<T>& bv = nodes_[b].value;
  if (!av.same_shape(bv)) throw DimensionError("tape add shape mismatch");
  Tensor<T> out(av.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  const bool ng = needs(a) || needs(b);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [a, b](Tape& tp, const Tensor<T>& g) {
                         if (tp.needs(a)) tp.accumulate(a, g);
                         if (tp.needs(b)) tp.accumulate(b, g);
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::add_row(Id x, Id bias) {
  const Tensor<T>& xv = nodes_[x].value;
  const Tensor<T>& bv = nodes_[bias].value;
  const int64_t m = xv.dim(0), n = xv.dim(1);
  if (bv.numel() != n) throw DimensionError("tape add_row bias mismatch");
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < m; ++i) {
    const T* xr = xv.row(i);
    T* orow = out.row(i);
    for (int64_t j = 0; j < n; ++j) orow[j] = xr[j] + bv[j];
  }
  const bool ng = needs(x) || needs(bias);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [x, bias, m, n](Tape& tp, const Tensor<T>& g) {
                         if (tp.needs(x)) tp.accumulate(x, g);
                         if (tp.needs(bias)) {
                           Tensor<T>& gb = tp.grad_buf(bias);
                           for (int64_t i = 0; i < m; ++i) {
                             const T* gr = g.row(i);
                             for (int64_t j = 0; j < n; ++j) gb[j] += gr[j];
                           }
                         }
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::mul(Id a, Id b) {
  const Tensor<T>& av = nodes_[a].value;
  const Tensor<T>& bv = nodes_[b].value;
  if (!av.same_shape(bv)) throw DimensionError("tape mul shape mismatch");
  Tensor<T> out(av.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  const bool ng = needs(a) || needs(b);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [a, b](Tape& tp, const Tensor<T>& g) {
                         if (tp.needs(a)) {
                           Tensor<T> da(g.shape());
                           const Tensor<T>& bb = tp.value(b);
                           for (int64_t i = 0; i < da.numel(); ++i) da[i] = g[i] * bb[i];
                           tp.accumulate(a, da);
                         }
                         if (tp.needs(b)) {
                           Tensor<T> db(g.shape());
                           const Tensor<T>& aa = tp.value(a);
                           for (int64_t i = 0; i < db.numel(); ++i) db[i] = g[i] * aa[i];
                           tp.accumulate(b, db);
                         }
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::scale(Id x, T s) {
  const Tensor<T>& xv = nodes_[x].value;
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = xv[i] * s;
  const bool ng = needs(x);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [x, s](Tape& tp, const Tensor<T>& g) {
                         Tensor<T> dx(g.shape());
                         for (int64_t i = 0; i < dx.numel(); ++i) dx[i] = g[i] * s;
                         tp.accumulate(x, dx);
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::silu(Id x) {
  const Tensor<T>& xv = nodes_[x].value;
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const T v = xv[i];
    const T sig = T(1) / (T(1) + std::exp(-v));
    out[i] = v * sig;
  }
  const bool ng = needs(x);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [x](Tape& tp, const Tensor<T>& g) {
                         const Tensor<T>& xx = tp.value(x);
                         Tensor<T> dx(g.shape());
                         for (int64_t i = 0; i < dx.numel(); ++i) {
                           const T v = xx[i];
                           const T sig = T(1) / (T(1) + std::exp(-v));
                           dx[i] = g[i] * sig * (T(1) + v * (T(1) - sig));
                         }
                         tp.accumulate(x, dx);
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::gelu(Id x) {
  const Tensor<T>& xv = nodes_[x].value;
  const T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T kA = static_cast<T>(0.044715);
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const T v = xv[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  const bool ng = needs(x);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [x, kC, kA](Tape& tp, const Tensor<T>& g) {
                         const Tensor<T>& xx = tp.value(x);
                         Tensor<T> dx(g.shape());
                         for (int64_t i = 0; i < dx.numel(); ++i) {
                           const T v = xx[i];
                           const T u = kC * (v + kA * v * v * v);
                           const T t = std::tanh(u);
                           const T du = kC * (T(1) + T(3) * kA * v * v);
                           dx[i] = g[i] * (T(0.5) * (T(1) + t) +
                                           T(0.5) * v * (T(1) - t * t) * du);
                         }
                         tp.accumulate(x, dx);
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::rmsnorm(Id x, Id gain, T eps) {
  const Tensor<T>& xv = nodes_[x].value;
  const Tensor<T>& gv = nodes_[gain].value;
  const int64_t m = xv.dim(0), n = xv.dim(1);
  if (gv.numel() != n) throw DimensionError("tape rmsnorm gain mismatch");
  Tensor<T> out(xv.shape());
  Tensor<T> inv_rms({m});
  for (int64_t i = 0; i < m; ++i) {
    const T* xr = xv.row(i);
    double ss = 0.0;
    for (int64_t j = 0; j < n; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const T r = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(n) +
                                               static_cast<double>(eps)));
    inv_rms[i] = r;
    T* orow = out.row(i);
    for (int64_t j = 0; j < n; ++j) orow[j] = xr[j] * r * gv[j];
  }
  const bool ng = needs(x) || needs(gain);
  auto saved = std::make_shared<Tensor<T>>(std::move(inv_rms));
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [x, gain, m, n, saved](Tape& tp, const Tensor<T>& g) {
                         const Tensor<T>& xx = tp.value(x);
                         const Tensor<T>& gg = tp.value(gain);
                         if (tp.needs(x)) {
                           Tensor<T> dx({m, n});
                           for (int64_t i = 0; i < m; ++i) {
                             const T r = (*saved)[i];
                             const T* xr = xx.row(i);
                             const T* gr = g.row(i);
                             double acc = 0.0;
                             for (int64_t j = 0; j < n; ++j)
                               acc += static_cast<double>(gr[j]) * gg[j] * xr[j];
                             const T coef = static_cast<T>(
                                 acc * static_cast<double>(r) * r * r /
                                 static_cast<double>(n));
                             T* dr = dx.row(i);
                             for (int64_t j = 0; j < n; ++j)
                               dr[j] = gr[j] * gg[j] * r - coef * xr[j];
                           }
                           tp.accumulate(x, dx);
                         }
                         if (tp.needs(gain)) {
                           Tensor<T>& gb = tp.grad_buf(gain);
                           for (int64_t i = 0; i < m; ++i) {
                             const T r = (*saved)[i];
                             const T* xr = xx.row(i);
                             const T* gr = g.row(i);
                             for (int64_t j = 0; j < n; ++j) gb[j] += gr[j] * xr[j] * r;
                           }
                         }
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::rope(Id x, int head_dim, int pos_offset, double base) {
  const Tensor<T>& xv = nodes_[x].value;
  const int64_t m = xv.dim(0), w = xv.dim(1);
  Tensor<T> out(xv.shape());
  rope_rotate(xv.data(), out.data(), m, w, head_dim, pos_offset, base, false);
  const bool ng = needs(x);
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [x, head_dim, pos_offset, base, m, w](Tape& tp, const Tensor<T>& g) {
                         Tensor<T> dx({m, w});
                         rope_rotate(g.data(), dx.data(), m, w, head_dim, pos_offset, base,
                                     true);
                         tp.accumulate(x, dx);
                       })
                 : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::causal_attention(Id q, Id k, Id v, int n_heads) {
  const Tensor<T>& qv = nodes_[q].value;
  const Tensor<T>& kv = nodes_[k].value;
  const Tensor<T>& vv = nodes_[v].value;
  const int64_t rows = qv.dim(0), width = qv.dim(1);
  if (width % n_heads != 0) throw DimensionError("attention width not divisible by heads");
  const int64_t hd = width / n_heads;
  const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  // probs laid out [head][i][j], row-major per head
  auto probs = std::make_shared<Tensor<T>>(
      Tensor<T>({static_cast<int64_t>(n_heads), rows, rows}));
  Tensor<T> out({rows, width});
  std::vector<T> srow(static_cast<size_t>(rows));
  for (int h = 0; h < n_heads; ++h) {
    const int64_t off = h * hd;
    T* ph = probs->data() + static_cast<int64_t>(h) * rows * rows;
    for (int64_t i = 0; i < rows; ++i) {
      const T* qi = qv.row(i) + off;
      T mx = std::numeric_limits<T>::lowest();
      for (int64_t j = 0; j <= i; ++j) {
        srow[j] = scl * kernels::dot(qi, kv.row(j) + off, hd);
        if (srow[j] > mx) mx = srow[j];
      }
      double denom = 0.0;
      for (int64_t j = 0; j <= i; ++j) {
        srow[j] = std::exp(srow[j] - mx);
        denom += static_cast<double>(srow[j]);
      }
      T* prow = ph + i * rows;
      for (int64_t j = 0; j <= i; ++j) prow[j] = static_cast<T>(srow[j] / denom);
      for (int64_t j = i + 1; j < rows; ++j) prow[j] = T(0);
      T* orow = out.row(i) + off;
      for (int64_t d = 0; d < hd; ++d) orow[d] = T(0);
      for (int64_t j = 0; j <= i; ++j) {
        kernels::axpy(orow, vv.row(j) + off, prow[j], hd);
      }
    }
  }
  const bool ng = needs(q) || needs(k) || needs(v);
  return push(
      std::move(out), ng,
      ng ? std::function<void(Tape&, const Tensor<T>&)>([q, k, v, n_heads, rows, hd, scl,
                                                         probs](Tape& tp,
                                                                const Tensor<T>& g) {
            const int64_t width = static_cast<int64_t>(n_heads) * hd;
            const Tensor<T>& qq = tp.value(q);
            const Tensor<T>& kk = tp.value(k);
            const Tensor<T>& vv2 = tp.value(v);
            Tensor<T> dq({rows, width});
            Tensor<T> dk({rows, width});
            Tensor<T> dv({rows, width});
            std::vector<T> dp(static_cast<size_t>(rows));
            for (int h = 0; h < n_heads; ++h) {
              const int64_t off = h * hd;
              const T* ph = probs->data() + static_cast<int64_t>(h) * rows * rows;
              for (int64_t i = 0; i < rows; ++i) {
                const T* gi = g.row(i) + off;
                const T* prow = ph + i * rows;
                // dv and dp
                double pdsum = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                  kernels::axpy(dv.row(j) + off, gi, prow[j], hd);
                  dp[j] = kernels::dot(gi, vv2.row(j) + off, hd);
                  pdsum += static_cast<double>(prow[j]) * dp[j];
                }
                // softmax backward, then q/k
                for (int64_t j = 0; j <= i; ++j) {
                  const T ds = prow[j] * (dp[j] - static_cast<T>(pdsum));
                  kernels::axpy(dq.row(i) + off, kk.row(j) + off, ds * scl, hd);
                  kernels::axpy(dk.row(j) + off, qq.row(i) + off, ds * scl, hd);
                }
              }
            }
            if (tp.needs(q)) tp.accumulate(q, dq);
            if (tp.needs(k)) tp.accumulate(k, dk);
            if (tp.needs(v)) tp.accumulate(v, dv);
          })
         : nullptr);
}

template <typename T>
typename Tape<T>::Id Tape<T>::cross_entropy_mean(Id logits, const std::vector<int>& targets,
                                                 const std::vector<char>& mask) {
  const Tensor<T>& lv = nodes_[logits].value;
  const int64_t rows = lv.dim(0), vocab = lv.dim(1);
  if (static_cast<int64_t>(targets.size()) != rows ||
      static_cast<int64_t>(mask.size()) != rows) {
    throw DimensionError("cross_entropy rows mismatch");
  }
  auto probs = std::make_shared<Tensor<T>>(Tensor<T>({rows, vocab}));
  int64_t count = 0;
  double loss = 0.0;
  for (int64_t i = 0; i < rows; ++i) {
    const T* lr = lv.row(i);
    T mx = lr[0];
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
    double denom = 0.0;
    T* pr = probs->row(i);
    for (int64_t j = 0; j < vocab; ++j) {
      pr[j] = std::exp(lr[j] - mx);
      denom += static_cast<double>(pr[j]);
    }
    for (int64_t j = 0; j < vocab; ++j) pr[j] = static_cast<T>(pr[j] / denom);
    if (mask[i]) {
      ++count;
      loss -= std::log(std::max(static_cast<double>(pr[targets[i]]), 1e-300));
    }
  }
  if (count == 0) throw InputError("cross_entropy: empty mask");
  loss /= static_cast<double>(count);
  Tensor<T> out({1});
  out[0] = static_cast<T>(loss);
  const bool ng = needs(logits);
  std::vector<int> tgt = targets;
  std::vector<char> msk = mask;
  return push(std::move(out), ng,
              ng ? std::function<void(Tape&, const Tensor<T>&)>(
                       [logits, tgt, msk, probs, rows, vocab, count](Tape& tp,
                                                                     const Tensor<T>& g) {
                         const T gs = g[0] / static_cast<T>(count);
                         Tensor<T> dl({rows, vocab});
                         for (int64_t i = 0; i < rows; ++i) {
                           if (!msk[i]) continue;
                           const T* pr = probs->row(i);
                           T* dr = dl.row(i);
                           for (int64_t j = 0; j < vocab; ++j) dr[j] = pr[j] * gs;
                           dr[tgt[i]] -= gs;
                         }
                         tp.accumulate(logits, dl);
                       })
                 : nullptr);
}

template <typename T>
T Tape<T>::scalar(Id id) const {
  const Tensor<T>& v = nodes_[id].value;
  if (v.numel() != 1) throw DimensionError("scalar() on non-scalar node");
  return v[0];
}

template <typename T>
void Tape<T>::backward(Id loss) {
  if (nodes_[loss].value.numel() != 1) {
    throw DimensionError("backward expects a scalar loss node");
  }
  for (auto& g : grads_) g = Tensor<T>();
  Tensor<T>& seed = grad_buf(loss);
  seed[0] = T(1);
  for (Id id = loss; id >= 0; --id) {
    if (!nodes_[id].needs_grad && id != loss) continue;
    if (grads_[id].empty()) continue;
    if (nodes_[id].backward_fn) nodes_[id].backward_fn(*this, grads_[id]);
  }
  ran_backward_ = true;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(const Tensor<T>& weight) const {
  auto it = params_.find(&weight);
  if (it == params_.end()) throw LookupError("grad requested for unregistered weight");
  const Tensor<T>& g = grads_[it->second];
  if (g.empty()) {
    // no gradient flowed; expose zeros lazily
    const_cast<Tape<T>*>(this)->grads_[it->second] = Tensor<T>(weight.shape());
    return grads_[it->second];
  }
  return g;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace elx
