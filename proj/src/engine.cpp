// SPDX-License-Identifier: Apache-2.0
#include "elx/engine.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace elx {

bool KvCache::matches(const ModelConfig& config, const ViewExtents& ext) const {
  if (k.size() != static_cast<size_t>(config.n_layers)) return false;
  for (size_t l = 0; l < k.size(); ++l) {
    const int64_t aw = static_cast<int64_t>(ext.layers[l].heads) * config.head_dim;
    if (!k[l].empty() && k[l].dim(1) != aw) return false;
  }
  return true;
}

namespace {

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("empty prompt");
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

void rmsnorm_rows(const float* x, const float* gain, float* out, int64_t rows, int64_t n) {
  constexpr double kEps = 1e-6;
  for (int64_t i = 0; i < rows; ++i) {
    const float* xr = x + i * n;
    double ss = 0.0;
    for (int64_t j = 0; j < n; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const float r = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(n) + kEps));
    float* orow = out + i * n;
    for (int64_t j = 0; j < n; ++j) orow[j] = xr[j] * r * gain[j];
  }
}

// out[m, out_rows] = x[m, k] . w[0:out_rows, k]^T (+ bias)
void linear_nt(const float* x, const TensorF& w, const TensorF& bias, float* out, int64_t m,
               int64_t k, int64_t out_rows) {
  for (int64_t i = 0; i < m; ++i) {
    const float* xr = x + i * k;
    float* orow = out + i * out_rows;
    for (int64_t j = 0; j < out_rows; ++j) orow[j] = kernels::dot(xr, w.row(j), k);
    if (!bias.empty()) {
      for (int64_t j = 0; j < out_rows; ++j) orow[j] += bias[j];
    }
  }
}

// out[m, n] += x[m, active] . w[0:active, n]
void linear_rows_accum(const float* x, const TensorF& w, float* out, int64_t m,
                       int64_t active, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* xr = x + i * active;
    float* orow = out + i * n;
    for (int64_t p = 0; p < active; ++p) kernels::axpy(orow, w.row(p), xr[p], n);
  }
}

// y[m, out] += (x[m, in] . a[rank, in]^T) . b[out, rank]^T
void adapter_accum(const Adapter& ad, const float* x, float* y, int64_t m, int64_t in,
                   int64_t out) {
  if (!ad.present()) return;
  const int64_t r = ad.a.dim(0);
  if (ad.a.dim(1) != in || ad.b.dim(0) != out || ad.b.dim(1) != r) {
    throw ConsistencyError("adapter shape does not match active extents");
  }
  std::vector<float> xa(static_cast<size_t>(r));
  for (int64_t i = 0; i < m; ++i) {
    const float* xr = x + i * in;
    for (int64_t j = 0; j < r; ++j) xa[static_cast<size_t>(j)] = kernels::dot(xr, ad.a.row(j), in);
    float* yr = y + i * out;
    for (int64_t o = 0; o < out; ++o) yr[o] += kernels::dot(xa.data(), ad.b.row(o), r);
  }
}

void rope_inplace(float* x, int64_t rows, int64_t width, int head_dim, int pos_offset) {
  const int half = head_dim / 2;
  constexpr double kBase = 10000.0;
  for (int64_t t = 0; t < rows; ++t) {
    const double pos = static_cast<double>(t + pos_offset);
    for (int64_t h = 0; h * head_dim < width; ++h) {
      float* p = x + t * width + h * head_dim;
      for (int i = 0; i < half; ++i) {
        const double theta = pos * std::pow(kBase, -2.0 * i / head_dim);
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        const double x0 = p[2 * i];
        const double x1 = p[2 * i + 1];
        p[2 * i] = static_cast<float>(x0 * c - x1 * s);
        p[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
      }
    }
  }
}

void ensure_capacity(KvCache& cache, const ModelConfig& config, const ViewExtents& ext,
                     int needed) {
  if (cache.k.empty()) {
    cache.k.resize(static_cast<size_t>(config.n_layers));
    cache.v.resize(static_cast<size_t>(config.n_layers));
    cache.capacity = 0;
  }
  if (needed <= cache.capacity) return;
  int cap = cache.capacity == 0 ? needed + 32 : cache.capacity;
  while (cap < needed) cap *= 2;
  for (int l = 0; l < config.n_layers; ++l) {
    const int64_t aw = static_cast<int64_t>(ext.layers[l].heads) * config.head_dim;
    TensorF nk({cap, aw});
    TensorF nv({cap, aw});
    if (!cache.k[l].empty()) {
      std::memcpy(nk.data(), cache.k[l].data(),
                  static_cast<size_t>(cache.seq_len * aw) * sizeof(float));
      std::memcpy(nv.data(), cache.v[l].data(),
                  static_cast<size_t>(cache.seq_len * aw) * sizeof(float));
    }
    cache.k[l] = std::move(nk);
    cache.v[l] = std::move(nv);
  }
  cache.capacity = cap;
}

// Causal attention for `rows` new positions starting at `pos0`, attending
// to k/v rows [0, pos0+i]. q: [rows, aw]; out: [rows, aw].
void attend(const float* q, const TensorF& kc, const TensorF& vc, float* out, int64_t rows,
            int64_t pos0, int n_heads, int head_dim) {
  const int64_t aw = static_cast<int64_t>(n_heads) * head_dim;
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  std::vector<float> scores;
  for (int h = 0; h < n_heads; ++h) {
    const int64_t off = static_cast<int64_t>(h) * head_dim;
    for (int64_t i = 0; i < rows; ++i) {
      const int64_t limit = pos0 + i;  // inclusive
      scores.resize(static_cast<size_t>(limit + 1));
      const float* qi = q + i * aw + off;
      float mx = std::numeric_limits<float>::lowest();
      for (int64_t j = 0; j <= limit; ++j) {
        scores[static_cast<size_t>(j)] = scale * kernels::dot(qi, kc.row(j) + off, head_dim);
        mx = std::max(mx, scores[static_cast<size_t>(j)]);
      }
      double denom = 0.0;
      for (int64_t j = 0; j <= limit; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
        denom += static_cast<double>(scores[static_cast<size_t>(j)]);
      }
      const float inv = static_cast<float>(1.0 / denom);
      float* orow = out + i * aw + off;
      for (int d = 0; d < head_dim; ++d) orow[d] = 0.0f;
      for (int64_t j = 0; j <= limit; ++j) {
        kernels::axpy(orow, vc.row(j) + off, scores[static_cast<size_t>(j)] * inv,
                      static_cast<int64_t>(head_dim));
      }
    }
  }
}

// Runs the stack over `rows` positions starting at sequence position pos0.
// x is modified in place; k/v rows for the new positions are appended to
// the cache (which must already have capacity).
void run_layers(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                KvCache& cache, float* x, int64_t rows, int64_t pos0,
                const std::vector<char>* skip_layers) {
  const ModelConfig& cfg = w.config;
  const int64_t d = cfg.d_model();
  const int hd = cfg.head_dim;
  std::vector<float> xn(static_cast<size_t>(rows * d));
  std::vector<float> q, k, v, ctx, h1, h2;
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (skip_layers && (*skip_layers)[static_cast<size_t>(l)]) continue;
    const LayerWeightsT<float>& lw = w.layers[static_cast<size_t>(l)];
    const LayerAdapters* la =
        (adapters && !adapters->empty()) ? &adapters->layers[static_cast<size_t>(l)] : nullptr;
    const int heads = ext.layers[static_cast<size_t>(l)].heads;
    const int neurons = ext.layers[static_cast<size_t>(l)].neurons;
    const int64_t aw = static_cast<int64_t>(heads) * hd;

    // attention
    rmsnorm_rows(x, lw.attn_norm_g.data(), xn.data(), rows, d);
    q.resize(static_cast<size_t>(rows * aw));
    linear_nt(xn.data(), lw.wq, lw.bq, q.data(), rows, d, aw);
    if (la) adapter_accum(la->wq, xn.data(), q.data(), rows, d, aw);
    TensorF& kc = cache.k[static_cast<size_t>(l)];
    TensorF& vc = cache.v[static_cast<size_t>(l)];
    float* krows = kc.data() + pos0 * aw;
    float* vrows = vc.data() + pos0 * aw;
    linear_nt(xn.data(), lw.wk, lw.bk, krows, rows, d, aw);
    if (la) adapter_accum(la->wk, xn.data(), krows, rows, d, aw);
    linear_nt(xn.data(), lw.wv, lw.bv, vrows, rows, d, aw);
    if (la) adapter_accum(la->wv, xn.data(), vrows, rows, d, aw);
    if (cfg.use_rope) {
      rope_inplace(q.data(), rows, aw, hd, static_cast<int>(pos0));
      rope_inplace(krows, rows, aw, hd, static_cast<int>(pos0));
    }
    ctx.resize(static_cast<size_t>(rows * aw));
    attend(q.data(), kc, vc, ctx.data(), rows, pos0, heads, hd);
    if (la && la->wo.present()) {
      // adapter reads the attention context, so accumulate into a staging
      // buffer before the residual add
      h1.assign(static_cast<size_t>(rows * d), 0.0f);
      linear_rows_accum(ctx.data(), lw.wo, h1.data(), rows, aw, d);
      adapter_accum(la->wo, ctx.data(), h1.data(), rows, aw, d);
      for (int64_t i = 0; i < rows * d; ++i) x[i] += h1[static_cast<size_t>(i)];
    } else {
      linear_rows_accum(ctx.data(), lw.wo, x, rows, aw, d);
    }

    // mlp
    rmsnorm_rows(x, lw.mlp_norm_g.data(), xn.data(), rows, d);
    h1.resize(static_cast<size_t>(rows * neurons));
    linear_nt(xn.data(), lw.w_up, lw.b_up, h1.data(), rows, d, neurons);
    if (la) adapter_accum(la->w_up, xn.data(), h1.data(), rows, d, neurons);
    if (cfg.mlp_kind == MlpKind::kGated) {
      h2.resize(static_cast<size_t>(rows * neurons));
      linear_nt(xn.data(), lw.w_gate, lw.b_gate, h2.data(), rows, d, neurons);
      if (la) adapter_accum(la->w_gate, xn.data(), h2.data(), rows, d, neurons);
      for (int64_t i = 0; i < rows * neurons; ++i) {
        const float g = h2[static_cast<size_t>(i)];
        const float sig = 1.0f / (1.0f + std::exp(-g));
        h1[static_cast<size_t>(i)] *= g * sig;
      }
    } else {
      constexpr float kC = 0.7978845608028654f;
      constexpr float kA = 0.044715f;
      for (int64_t i = 0; i < rows * neurons; ++i) {
        const float u = h1[static_cast<size_t>(i)];
        h1[static_cast<size_t>(i)] =
            0.5f * u * (1.0f + std::tanh(kC * (u + kA * u * u * u)));
      }
    }
    if (la && la->w_down.present()) {
      h2.assign(static_cast<size_t>(rows * d), 0.0f);
      linear_rows_accum(h1.data(), lw.w_down, h2.data(), rows, neurons, d);
      adapter_accum(la->w_down, h1.data(), h2.data(), rows, neurons, d);
      for (int64_t i = 0; i < rows * d; ++i) x[i] += h2[static_cast<size_t>(i)];
    } else {
      linear_rows_accum(h1.data(), lw.w_down, x, rows, neurons, d);
    }
  }
}

TensorF project_logits(const Weights& w, const float* x, int64_t rows) {
  const int64_t d = w.config.d_model();
  const int64_t voc = w.config.vocab_size;
  std::vector<float> xn(static_cast<size_t>(rows * d));
  rmsnorm_rows(x, w.final_norm_g.data(), xn.data(), rows, d);
  TensorF logits({rows, voc});
  linear_nt(xn.data(), w.lm_head, TensorF(), logits.data(), rows, d, voc);
  return logits;
}

void validate_extents(const ModelConfig& cfg, const ViewExtents& ext) {
  if (ext.layers.size() != static_cast<size_t>(cfg.n_layers)) {
    throw ConsistencyError("view extents layer count mismatch");
  }
  for (const auto& le : ext.layers) {
    if (le.heads < 1 || le.heads > cfg.n_heads || le.neurons < 1 || le.neurons > cfg.d_ff) {
      throw ConsistencyError("view extents out of range");
    }
  }
}

}  // namespace

TensorF prefill(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                std::span<const int> tokens, KvCache* cache,
                const std::vector<char>* skip_layers) {
  check_tokens(w.config, tokens);
  validate_extents(w.config, ext);
  const int64_t rows = static_cast<int64_t>(tokens.size());
  const int64_t d = w.config.d_model();

  KvCache local;
  KvCache& kv = cache ? *cache : local;
  // prefill always starts a fresh request; drop any stale buffers whose
  // widths belong to a previous level
  kv.k.clear();
  kv.v.clear();
  kv.capacity = 0;
  kv.seq_len = 0;
  ensure_capacity(kv, w.config, ext, static_cast<int>(rows));

  std::vector<float> x(static_cast<size_t>(rows * d));
  for (int64_t t = 0; t < rows; ++t) {
    const float* e = w.embedding.row(tokens[static_cast<size_t>(t)]);
    std::memcpy(x.data() + t * d, e, static_cast<size_t>(d) * sizeof(float));
  }
  run_layers(w, ext, adapters, kv, x.data(), rows, 0, skip_layers);
  kv.seq_len = static_cast<int>(rows);
  return project_logits(w, x.data(), rows);
}

TensorF decode_step(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                    KvCache& cache, int token, const std::vector<char>* skip_layers) {
  validate_extents(w.config, ext);
  if (cache.seq_len <= 0) throw ConsistencyError("decode_step before prefill");
  if (!cache.matches(w.config, ext)) {
    throw ConsistencyError("kv cache was built under a different level view");
  }
  const int tk[1] = {token};
  check_tokens(w.config, std::span<const int>(tk, 1));
  ensure_capacity(cache, w.config, ext, cache.seq_len + 1);

  const int64_t d = w.config.d_model();
  std::vector<float> x(static_cast<size_t>(d));
  std::memcpy(x.data(), w.embedding.row(token), static_cast<size_t>(d) * sizeof(float));
  run_layers(w, ext, adapters, cache, x.data(), 1, cache.seq_len, skip_layers);
  cache.seq_len += 1;
  return project_logits(w, x.data(), 1);
}

double eval_loss(const Weights& w, const ViewExtents& ext, const AdapterSet* adapters,
                 const std::vector<TrainSequence>& batch,
                 const std::vector<char>* skip_layers) {
  double loss = 0.0;
  int64_t count = 0;
  for (const auto& seq : batch) {
    TensorF logits = prefill(w, ext, adapters, seq.inputs, nullptr, skip_layers);
    const int64_t voc = logits.dim(1);
    for (size_t i = 0; i < seq.targets.size(); ++i) {
      if (!seq.loss_mask[i]) continue;
      const float* lr = logits.row(static_cast<int64_t>(i));
      float mx = lr[0];
      for (int64_t j = 1; j < voc; ++j) mx = std::max(mx, lr[j]);
      double denom = 0.0;
      for (int64_t j = 0; j < voc; ++j) denom += std::exp(static_cast<double>(lr[j]) - mx);
      loss -= static_cast<double>(lr[seq.targets[i]]) - mx - std::log(denom);
      ++count;
    }
  }
  if (count == 0) throw InputError("eval_loss: no masked positions");
  return loss / static_cast<double>(count);
}

std::vector<int> greedy_answer(const Weights& w, const ViewExtents& ext,
                               const AdapterSet* adapters, const TaskInstance& inst) {
  KvCache cache;
  TensorF logits = prefill(w, ext, adapters, inst.prompt, &cache);
  std::vector<int> answer;
  const int64_t voc = logits.dim(1);
  int next = 0;
  const float* last = logits.row(logits.dim(0) - 1);
  for (int64_t j = 1; j < voc; ++j) {
    if (last[j] > last[next]) next = static_cast<int>(j);
  }
  const int max_steps = static_cast<int>(inst.groundtruth.size());
  for (int s = 0; s < max_steps; ++s) {
    if (next == tok::kEos) break;
    answer.push_back(next);
    if (s + 1 == max_steps) break;
    TensorF step = decode_step(w, ext, adapters, cache, next);
    const float* row = step.row(0);
    next = 0;
    for (int64_t j = 1; j < voc; ++j) {
      if (row[j] > row[next]) next = static_cast<int>(j);
    }
  }
  return answer;
}

}  // namespace elx
